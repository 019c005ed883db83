#include "palimpsest/toylm.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "palimpsest/binary_io.hpp"
#include "palimpsest/errors.hpp"

namespace palimpsest {

namespace {

constexpr char kMagic[] = "PTLM1";
constexpr std::uint32_t kVersion = 1;

void validate(const ToyLMConfig& cfg, unsigned bits) {
  if (cfg.order < 1 || cfg.order > 15) throw Error(ErrorCode::InvalidArgument, "order must be in [1, 15]");
  if (cfg.vocab < 1) throw Error(ErrorCode::InvalidArgument, "vocab must be positive");
  if (cfg.order * bits + 4 > 64) {
    throw Error(ErrorCode::InvalidArgument, "order * ceil(log2 vocab) must be <= 60");
  }
  if (!(cfg.decay > 0.0 && cfg.decay <= 1.0)) throw Error(ErrorCode::InvalidArgument, "decay must be in (0, 1]");
  if (!(cfg.smoothing > 0.0) || !std::isfinite(cfg.smoothing)) {
    throw Error(ErrorCode::InvalidArgument, "smoothing must be positive");
  }
  if (!(cfg.interpolation > 0.0 && cfg.interpolation < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "interpolation must be in (0, 1)");
  }
}

}  // namespace

ToyLM::ToyLM(ToyLMConfig cfg) : cfg_(cfg) {
  bits_ = cfg.vocab > 1 ? static_cast<unsigned>(std::bit_width(cfg.vocab - 1)) : 1;
  validate(cfg_, bits_);
}

double ToyLM::weight_now(const Decayed& d) const {
  if (cfg_.decay == 1.0 || d.stamp == clock_) return d.value;
  return d.value * std::pow(cfg_.decay, static_cast<double>(clock_ - d.stamp));
}

void ToyLM::add(Decayed& d, double w) const {
  d.value = weight_now(d) + w;
  d.stamp = clock_;
}

std::uint64_t ToyLM::context_key(std::span<const TokenId> context) const {
  std::uint64_t k = context.size() + 1;
  for (TokenId t : context) k = (k << bits_) | t;
  return k;
}

void ToyLM::check_tokens(std::span<const TokenId> doc) const {
  for (TokenId t : doc) {
    if (t >= cfg_.vocab) {
      throw Error(ErrorCode::TokenOutOfRange,
                  "token " + std::to_string(t) + " >= vocab " + std::to_string(cfg_.vocab));
    }
  }
}

void ToyLM::train_doc(std::span<const TokenId> doc, double weight) {
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const std::size_t jmax = std::min<std::size_t>(cfg_.order, i + 1);
    for (std::size_t j = 1; j <= jmax; ++j) {
      auto ctx = doc.subspan(i + 1 - j, j - 1);
      const std::uint64_t ck = context_key(ctx);
      auto& stats = contexts_[ck];
      add(stats.total, weight);
      auto [it, inserted] = ngrams_.try_emplace(ngram_key(ck, doc[i]));
      if (inserted) stats.successors.push_back(doc[i]);
      add(it->second, weight);
    }
  }
}

TrainStepRecord ToyLM::train_step(std::span<const TokenId> doc, double weight) {
  std::vector<Document> batch;
  batch.emplace_back(doc.begin(), doc.end());
  return train_step(std::span<const Document>(batch), weight);
}

TrainStepRecord ToyLM::train_step(std::span<const Document> batch, double weight) {
  if (!(weight > 0.0) || !std::isfinite(weight)) {
    throw Error(ErrorCode::InvalidArgument, "training weight must be positive");
  }
  for (const auto& doc : batch) check_tokens(doc);
  ++clock_;
  for (const auto& doc : batch) train_doc(doc, weight);
  return {clock_, batch.size(), clock_};
}

double ToyLM::order_prob(std::span<const TokenId> ctx, TokenId next) const {
  const std::uint64_t ck = context_key(ctx);
  const double alpha = cfg_.smoothing;
  double total = 0.0;
  double w = 0.0;
  if (auto c = contexts_.find(ck); c != contexts_.end()) {
    total = weight_now(c->second.total);
    if (auto g = ngrams_.find(ngram_key(ck, next)); g != ngrams_.end()) w = weight_now(g->second);
  }
  return (w + alpha) / (total + alpha * cfg_.vocab);
}

double ToyLM::token_prob(std::span<const TokenId> context, TokenId next) const {
  check_tokens(context);
  check_tokens(std::span<const TokenId>(&next, 1));
  const std::size_t jmax = std::min<std::size_t>(cfg_.order, context.size() + 1);
  const double lambda = cfg_.interpolation;
  double p = order_prob({}, next);
  for (std::size_t j = 2; j <= jmax; ++j) {
    p = lambda * order_prob(context.last(j - 1), next) + (1.0 - lambda) * p;
  }
  return p;
}

double ToyLM::token_log_prob(std::span<const TokenId> context, TokenId next) const {
  return std::log(token_prob(context, next));
}

std::vector<double> ToyLM::next_distribution(std::span<const TokenId> context) const {
  check_tokens(context);
  const std::size_t jmax = std::min<std::size_t>(cfg_.order, context.size() + 1);
  const double lambda = cfg_.interpolation;
  const double alpha = cfg_.smoothing;
  const std::uint32_t V = cfg_.vocab;

  // Same operation order as token_prob so both agree bit for bit.
  std::vector<double> dist(V);
  std::vector<double> level(V);
  for (std::size_t j = 1; j <= jmax; ++j) {
    auto ctx = context.last(j - 1);
    const std::uint64_t ck = context_key(ctx);
    auto c = contexts_.find(ck);
    const double total = c == contexts_.end() ? 0.0 : weight_now(c->second.total);
    const double denom = total + alpha * V;
    std::fill(level.begin(), level.end(), (0.0 + alpha) / denom);
    if (c != contexts_.end()) {
      for (TokenId s : c->second.successors) {
        level[s] = (weight_now(ngrams_.at(ngram_key(ck, s))) + alpha) / denom;
      }
    }
    if (j == 1) {
      dist.swap(level);
    } else {
      for (std::uint32_t i = 0; i < V; ++i) dist[i] = lambda * level[i] + (1.0 - lambda) * dist[i];
    }
  }
  return dist;
}

Document ToyLM::sample(std::span<const TokenId> prefix, std::size_t max_len, double temperature,
                       RandomSource& r) const {
  check_tokens(prefix);
  Document ctx(prefix.begin(), prefix.end());
  Document out;
  out.reserve(max_len);
  for (std::size_t i = 0; i < max_len; ++i) {
    const std::size_t keep = std::min<std::size_t>(ctx.size(), cfg_.order - 1);
    auto window = std::span<const TokenId>(ctx).last(keep);
    const TokenId next = sample_next(window, r, temperature);
    ctx.push_back(next);
    out.push_back(next);
  }
  return out;
}

ToyLM ToyLM::clone_and_finetune(std::span<const Document> docs, double weight) const {
  for (const auto& d : docs) check_tokens(d);
  ToyLM copy(*this);
  for (const auto& d : docs) copy.train_step(std::span<const TokenId>(d), weight);
  return copy;
}

double ToyLM::ngram_weight(std::span<const TokenId> context, TokenId next) const {
  if (context.size() + 1 > cfg_.order) throw Error(ErrorCode::InvalidArgument, "context longer than order - 1");
  auto g = ngrams_.find(ngram_key(context_key(context), next));
  return g == ngrams_.end() ? 0.0 : weight_now(g->second);
}

double ToyLM::context_weight(std::span<const TokenId> context) const {
  if (context.size() + 1 > cfg_.order) throw Error(ErrorCode::InvalidArgument, "context longer than order - 1");
  auto c = contexts_.find(context_key(context));
  return c == contexts_.end() ? 0.0 : weight_now(c->second.total);
}

std::vector<std::uint8_t> ToyLM::serialize() const {
  ByteWriter w;
  w.raw(kMagic);
  w.u32(kVersion);
  w.u32(cfg_.order);
  w.u32(cfg_.vocab);
  w.f64(cfg_.decay);
  w.f64(cfg_.smoothing);
  w.f64(cfg_.interpolation);
  w.u64(clock_);

  auto write_sorted = [&w](const auto& map, auto decayed_of) {
    std::vector<std::uint64_t> keys;
    keys.reserve(map.size());
    for (const auto& kv : map) keys.push_back(kv.first);
    std::sort(keys.begin(), keys.end());
    w.u64(keys.size());
    for (std::uint64_t k : keys) {
      const Decayed& d = decayed_of(map.at(k));
      w.u64(k);
      w.f64(d.value);
      w.u64(d.stamp);
    }
  };
  write_sorted(ngrams_, [](const Decayed& d) -> const Decayed& { return d; });
  write_sorted(contexts_, [](const ContextStats& c) -> const Decayed& { return c.total; });
  return std::move(w).take();
}

ToyLM ToyLM::deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader rd(bytes);
  rd.expect(kMagic);
  if (const auto v = rd.u32(); v != kVersion) {
    throw Error(ErrorCode::FormatError, "unsupported model version " + std::to_string(v));
  }
  ToyLMConfig cfg;
  cfg.order = rd.u32();
  cfg.vocab = rd.u32();
  cfg.decay = rd.f64();
  cfg.smoothing = rd.f64();
  cfg.interpolation = rd.f64();
  ToyLM m(cfg);
  m.clock_ = rd.u64();

  auto read_record = [&rd, &m] {
    const std::uint64_t key = rd.u64();
    Decayed d{rd.f64(), rd.u64()};
    if (!(d.value > 0.0) || d.stamp > m.clock_) throw Error(ErrorCode::FormatError, "corrupt weight record");
    return std::pair{key, d};
  };
  const std::uint64_t n_ngrams = rd.u64();
  if (n_ngrams > rd.remaining() / 24) throw Error(ErrorCode::FormatError, "truncated binary file");
  m.ngrams_.reserve(n_ngrams);
  for (std::uint64_t i = 0; i < n_ngrams; ++i) {
    auto [key, d] = read_record();
    m.ngrams_.emplace(key, d);
  }
  const std::uint64_t n_contexts = rd.u64();
  if (n_contexts > rd.remaining() / 24) throw Error(ErrorCode::FormatError, "truncated binary file");
  m.contexts_.reserve(n_contexts);
  for (std::uint64_t i = 0; i < n_contexts; ++i) {
    auto [key, d] = read_record();
    m.contexts_[key].total = d;
  }
  if (!rd.at_end()) throw Error(ErrorCode::FormatError, "trailing bytes in model file");

  const std::uint64_t mask = (std::uint64_t{1} << m.bits_) - 1;
  std::vector<std::uint64_t> keys;
  keys.reserve(m.ngrams_.size());
  for (const auto& kv : m.ngrams_) keys.push_back(kv.first);
  std::sort(keys.begin(), keys.end());
  for (std::uint64_t k : keys) {
    auto c = m.contexts_.find(k >> m.bits_);
    if (c == m.contexts_.end()) throw Error(ErrorCode::FormatError, "n-gram without context record");
    c->second.successors.push_back(static_cast<TokenId>(k & mask));
  }
  return m;
}

void ToyLM::save(const std::string& path) const { write_file_bytes(path, serialize()); }

ToyLM ToyLM::load(const std::string& path) { return deserialize(read_file_bytes(path)); }

}  // namespace palimpsest
