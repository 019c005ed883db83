#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "palimpsest/core.hpp"
#include "palimpsest/random.hpp"

namespace palimpsest {

// Autoregressive model over a fixed vocabulary.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::uint32_t vocab() const = 0;
  // log P(next | context); context may be empty.
  virtual double token_log_prob(std::span<const TokenId> context, TokenId next) const = 0;
  // Full conditional distribution over the vocabulary.
  virtual std::vector<double> next_distribution(std::span<const TokenId> context) const = 0;
  virtual std::unique_ptr<LanguageModel> clone() const = 0;

  // temperature == 0 selects the argmax (lowest id on ties).
  virtual TokenId sample_next(std::span<const TokenId> context, RandomSource& r,
                              double temperature = 1.0) const;

  // Sum of conditional log-probabilities of every token given its prefix.
  double log_prob(std::span<const TokenId> doc) const;
};

// Draws from a discrete distribution after temperature scaling.
TokenId sample_from(std::span<const double> probs, RandomSource& r, double temperature);

class UniformModel final : public LanguageModel {
 public:
  explicit UniformModel(std::uint32_t vocab) : vocab_(vocab) {}

  std::uint32_t vocab() const override { return vocab_; }
  double token_log_prob(std::span<const TokenId> context, TokenId next) const override;
  std::vector<double> next_distribution(std::span<const TokenId> context) const override;
  std::unique_ptr<LanguageModel> clone() const override {
    return std::make_unique<UniformModel>(*this);
  }

 private:
  std::uint32_t vocab_;
};

}  // namespace palimpsest
