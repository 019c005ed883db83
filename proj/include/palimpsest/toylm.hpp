#pragma once

// Recency-decayed interpolated n-gram language model. Every occurrence written
// at clock t contributes decay^(T - t) at evaluation clock T, so recently
// trained documents are remembered more strongly than older ones.

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "palimpsest/language_model.hpp"

namespace palimpsest {

struct ToyLMConfig {
  unsigned order = 3;
  std::uint32_t vocab = kByteVocab;
  double decay = 0.999;
  double smoothing = 0.1;
  double interpolation = 0.5;
};

struct TrainStepRecord {
  std::uint64_t step = 0;
  std::size_t documents = 0;
  std::uint64_t clock = 0;
};

class ToyLM final : public LanguageModel {
 public:
  explicit ToyLM(ToyLMConfig cfg = {});

  const ToyLMConfig& config() const noexcept { return cfg_; }
  std::uint64_t clock() const noexcept { return clock_; }
  std::uint32_t vocab() const override { return cfg_.vocab; }

  // One clock tick. All documents of a batch are written at the same stamp;
  // `weight` scales the contribution of each occurrence.
  TrainStepRecord train_step(std::span<const TokenId> doc, double weight = 1.0);
  TrainStepRecord train_step(std::span<const Document> batch, double weight = 1.0);

  double token_prob(std::span<const TokenId> context, TokenId next) const;
  double token_log_prob(std::span<const TokenId> context, TokenId next) const override;
  std::vector<double> next_distribution(std::span<const TokenId> context) const override;
  std::unique_ptr<LanguageModel> clone() const override { return std::make_unique<ToyLM>(*this); }

  // Continuation of `prefix` with max_len sampled tokens.
  Document sample(std::span<const TokenId> prefix, std::size_t max_len, double temperature,
                  RandomSource& r) const;

  // Copy trained further on `docs`, one step per document.
  ToyLM clone_and_finetune(std::span<const Document> docs, double weight = 1.0) const;

  // Decayed weight of the j-gram (context, next), j = context.size() + 1.
  double ngram_weight(std::span<const TokenId> context, TokenId next) const;
  // Decayed total weight of all continuations of `context`.
  double context_weight(std::span<const TokenId> context) const;
  std::size_t num_ngrams() const noexcept { return ngrams_.size(); }

  std::vector<std::uint8_t> serialize() const;
  static ToyLM deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::string& path) const;
  static ToyLM load(const std::string& path);

 private:
  struct Decayed {
    double value = 0.0;
    std::uint64_t stamp = 0;
  };
  struct ContextStats {
    Decayed total;
    std::vector<TokenId> successors;
  };

  double weight_now(const Decayed& d) const;
  void add(Decayed& d, double w) const;
  std::uint64_t context_key(std::span<const TokenId> context) const;
  std::uint64_t ngram_key(std::uint64_t ctx_key, TokenId next) const {
    return (ctx_key << bits_) | next;
  }
  void check_tokens(std::span<const TokenId> doc) const;
  void train_doc(std::span<const TokenId> doc, double weight);
  // Smoothed estimate at one order; `ctx` holds exactly j - 1 tokens.
  double order_prob(std::span<const TokenId> ctx, TokenId next) const;

  ToyLMConfig cfg_;
  unsigned bits_ = 1;
  std::uint64_t clock_ = 0;
  std::unordered_map<std::uint64_t, Decayed> ngrams_;
  std::unordered_map<std::uint64_t, ContextStats> contexts_;
};

}  // namespace palimpsest
