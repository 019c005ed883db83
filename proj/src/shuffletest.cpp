#include "palimpsest/shuffletest.hpp"

#include <algorithm>
#include <cmath>

#include "palimpsest/binary_io.hpp"
#include "palimpsest/errors.hpp"
#include "palimpsest/parallel.hpp"

namespace palimpsest {

Checkpoint Checkpoint::from_blob(std::vector<std::uint8_t> blob) {
  Checkpoint c;
  c.hash = sha256_hex(blob);
  c.blob = std::move(blob);
  return c;
}

void train_on_transcript(ToyLM& m, const Transcript& t) {
  // Every step ticks the clock, including steps without entries.
  std::vector<std::vector<std::size_t>> by_step(t.num_steps() + 1);
  for (std::size_t i : t.order_by_step()) by_step[t.step(i)].push_back(i);
  std::vector<Document> batch;
  for (Step s = 1; s <= t.num_steps(); ++s) {
    batch.clear();
    for (std::size_t i : by_step[s]) batch.push_back(t.doc(i));
    m.train_step(std::span<const Document>(batch));
  }
}

Checkpoint ToyTrainer::initial() const { return Checkpoint::from_blob(ToyLM(cfg_).serialize()); }

std::unique_ptr<LanguageModel> ToyTrainer::train(const Checkpoint& from, const Transcript& tail,
                                                 const RandomSource&) const {
  auto m = std::make_unique<ToyLM>(ToyLM::deserialize(from.blob));
  train_on_transcript(*m, tail);
  return m;
}

namespace {

const ToyLM& as_toy(const LanguageModel& m) {
  const auto* toy = dynamic_cast<const ToyLM*>(&m);
  if (!toy) throw Error(ErrorCode::InvalidArgument, "ToyTrainer handles only ToyLM models");
  return *toy;
}

}  // namespace

Checkpoint ToyTrainer::checkpoint(const LanguageModel& m) const {
  return Checkpoint::from_blob(as_toy(m).serialize());
}

std::unique_ptr<LanguageModel> ToyTrainer::finetune(const LanguageModel& m, const TextBundle& text,
                                                    const FinetuneConfig& cfg) const {
  auto out = std::make_unique<ToyLM>(as_toy(m));
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (const auto& d : text.docs) out->train_step(std::span<const TokenId>(d), cfg.weight);
  }
  return out;
}

Step tail_length(Step num_steps, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "retrain_fraction must be in (0, 1]");
  }
  // Shave rounding noise so that e.g. 0.05 * 500 is 25, not 26.
  const double x = fraction * num_steps * (1.0 - 1e-12);
  const auto n = static_cast<Step>(std::ceil(x));
  return std::clamp<Step>(n, 1, num_steps);
}

Transcript retrain_tail(const Transcript& t, double fraction) {
  const Step len = tail_length(t.num_steps(), fraction);
  return restrict_steps(t, {t.num_steps() - len + 1, t.num_steps()});
}

double mean_doc_loglik(const LanguageModel& m, const TextBundle& text) {
  if (text.docs.empty()) throw Error(ErrorCode::InvalidArgument, "text bundle is empty");
  double sum = 0.0;
  for (const auto& d : text.docs) {
    if (d.empty()) throw Error(ErrorCode::InvalidArgument, "text bundle holds an empty document");
    sum += m.log_prob(d) / static_cast<double>(d.size());
  }
  return sum / static_cast<double>(text.docs.size());
}

ZScoreResult z_score(double chi_observed, std::span<const double> chi_null) {
  if (chi_null.size() < 2) throw Error(ErrorCode::InvalidArgument, "need at least 2 null models");
  ZScoreResult res;
  res.k = chi_null.size();
  res.chi_observed = chi_observed;
  res.chi_null.assign(chi_null.begin(), chi_null.end());
  double mean = 0.0;
  for (double c : chi_null) mean += c;
  mean /= static_cast<double>(chi_null.size());
  double ss = 0.0;
  for (double c : chi_null) ss += (c - mean) * (c - mean);
  res.chi_null_mean = mean;
  res.chi_null_sd = std::sqrt(ss / static_cast<double>(chi_null.size() - 1));
  if (!(res.chi_null_sd > 0.0)) {
    throw Error(ErrorCode::DegenerateNullSpread, "null models all score the text identically");
  }
  res.z = (chi_observed - mean) / res.chi_null_sd;
  res.p_approx = normal_sf(res.z);
  return res;
}

std::unique_ptr<LanguageModel> finetune_on_text(const LanguageModel& m, const Trainer& trainer,
                                                const TextBundle& text,
                                                const ShuffleTestConfig& cfg) {
  return trainer.finetune(m, text, cfg.finetune);
}

ZScoreResult shuffle_statistic(const Transcript& tail, const Checkpoint& from,
                               const Trainer& trainer, const TextBundle& text,
                               const ShuffleTestConfig& cfg, const RandomSource& r) {
  if (cfg.k < 2) throw Error(ErrorCode::InvalidArgument, "k must be >= 2");
  std::vector<double> chi(cfg.k + 1);
  parallel_for(cfg.k + 1, cfg.threads, [&](std::size_t j) {
    const RandomSource stream = r.substream(j);
    const Transcript order = j == 0 ? tail : shuffle_transcript(tail, stream.substream(0));
    auto model = trainer.train(from, order, stream.substream(1));
    if (cfg.finetune_on_text) model = finetune_on_text(*model, trainer, text, cfg);
    chi[j] = mean_doc_loglik(*model, text);
  });
  auto res = z_score(chi[0], std::span<const double>(chi).subspan(1));
  res.checkpoint_hash = from.hash;
  return res;
}

ZScoreResult phi_obs_shuff(const Transcript& t, const Checkpoint& from, const Trainer& trainer,
                           const TextBundle& text, const ShuffleTestConfig& cfg,
                           const RandomSource& r) {
  return shuffle_statistic(retrain_tail(t, cfg.retrain_fraction), from, trainer, text, cfg, r);
}

PermutationResult phi_obs_shuff_exact(const Transcript& t, const Checkpoint& from,
                                      const Trainer& trainer, const TextBundle& text,
                                      const ShuffleTestConfig& cfg, std::size_t m,
                                      const RandomSource& r) {
  if (m < 1) throw Error(ErrorCode::InvalidArgument, "m must be >= 1");
  const Transcript tail = retrain_tail(t, cfg.retrain_fraction);
  ShuffleTestConfig inner = cfg;
  inner.threads = 1;
  const RandomSource internal = r.substream(0);
  const StatisticFn phi = [&](const Transcript& relabelled) {
    return shuffle_statistic(relabelled, from, trainer, text, inner, internal).z;
  };
  return permutation_test(tail, phi, m, r.substream(1), cfg.threads);
}

}  // namespace palimpsest
