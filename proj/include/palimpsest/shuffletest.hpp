#pragma once

// Observational shuffle test: replay the tail of the training run from a
// checkpoint in the original order and under k reshuffles, then ask whether
// Bob's text is unusually likely under the in-order model.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "palimpsest/core.hpp"
#include "palimpsest/language_model.hpp"
#include "palimpsest/stats.hpp"
#include "palimpsest/toylm.hpp"

namespace palimpsest {

// Opaque trainer state addressed by the SHA-256 of its bytes.
struct Checkpoint {
  std::vector<std::uint8_t> blob;
  std::string hash;

  static Checkpoint from_blob(std::vector<std::uint8_t> blob);
};

struct FinetuneConfig {
  std::size_t epochs = 1;
  double weight = 1.0;  // per-occurrence update size
};

class Trainer {
 public:
  virtual ~Trainer() = default;

  // Resumes from `from` and trains on `tail` in step order. Deterministic in
  // (from, tail order, r).
  virtual std::unique_ptr<LanguageModel> train(const Checkpoint& from, const Transcript& tail,
                                               const RandomSource& r) const = 0;
  virtual Checkpoint checkpoint(const LanguageModel& m) const = 0;
  // Adapted copy of `m`; `m` is not modified.
  virtual std::unique_ptr<LanguageModel> finetune(const LanguageModel& m, const TextBundle& text,
                                                  const FinetuneConfig& cfg) const = 0;
};

// Trains ToyLM models; each step of the transcript is one batch.
class ToyTrainer final : public Trainer {
 public:
  explicit ToyTrainer(ToyLMConfig cfg = {}) : cfg_(cfg) {}

  const ToyLMConfig& config() const noexcept { return cfg_; }
  // Checkpoint of an untrained model.
  Checkpoint initial() const;

  std::unique_ptr<LanguageModel> train(const Checkpoint& from, const Transcript& tail,
                                       const RandomSource& r) const override;
  Checkpoint checkpoint(const LanguageModel& m) const override;
  std::unique_ptr<LanguageModel> finetune(const LanguageModel& m, const TextBundle& text,
                                          const FinetuneConfig& cfg) const override;

 private:
  ToyLMConfig cfg_;
};

// Trains `m` on the entries of `t` one step (batch) at a time.
void train_on_transcript(ToyLM& m, const Transcript& t);

struct ShuffleTestConfig {
  std::size_t k = 16;
  double retrain_fraction = 0.05;
  bool finetune_on_text = false;
  FinetuneConfig finetune;
  unsigned threads = 1;
};

struct ZScoreResult {
  double z = 0.0;
  std::size_t k = 0;
  double chi_observed = 0.0;
  double chi_null_mean = 0.0;
  double chi_null_sd = 0.0;
  double p_approx = 1.0;
  std::vector<double> chi_null;
  std::string checkpoint_hash;
};

// Number of final steps replayed: ceil(fraction * num_steps).
Step tail_length(Step num_steps, double fraction);
// Entries in the last tail_length steps, re-based to start at step 1.
Transcript retrain_tail(const Transcript& t, double fraction);

// Mean over documents of the per-token average log-likelihood.
double mean_doc_loglik(const LanguageModel& m, const TextBundle& text);

// z = (observed - mean) / sd with the k - 1 denominator; p = 1 - Phi(z).
ZScoreResult z_score(double chi_observed, std::span<const double> chi_null);

std::unique_ptr<LanguageModel> finetune_on_text(const LanguageModel& m, const Trainer& trainer,
                                                const TextBundle& text,
                                                const ShuffleTestConfig& cfg);

// Model 0 replays the tail in order, model i >= 1 replays a reshuffle drawn
// from r.substream(i). Every model starts from `from`.
ZScoreResult phi_obs_shuff(const Transcript& t, const Checkpoint& from, const Trainer& trainer,
                           const TextBundle& text, const ShuffleTestConfig& cfg,
                           const RandomSource& r);

// The same statistic evaluated on a tail that is already cut out.
ZScoreResult shuffle_statistic(const Transcript& tail, const Checkpoint& from,
                               const Trainer& trainer, const TextBundle& text,
                               const ShuffleTestConfig& cfg, const RandomSource& r);

// Exact permutation p-value with the z statistic: the tail's steps are
// relabelled m times and every relabelling retrains all k + 1 models. The
// statistic's own reshuffles use r.substream(0); relabellings use
// r.substream(1).
PermutationResult phi_obs_shuff_exact(const Transcript& t, const Checkpoint& from,
                                      const Trainer& trainer, const TextBundle& text,
                                      const ShuffleTestConfig& cfg, std::size_t m,
                                      const RandomSource& r);

}  // namespace palimpsest
