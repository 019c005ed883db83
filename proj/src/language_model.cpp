#include "palimpsest/language_model.hpp"

#include <cmath>
#include <string>

#include "palimpsest/errors.hpp"

namespace palimpsest {

TokenId sample_from(std::span<const double> probs, RandomSource& r, double temperature) {
  if (probs.empty()) throw Error(ErrorCode::InvalidArgument, "empty distribution");
  if (!(temperature >= 0.0)) throw Error(ErrorCode::InvalidArgument, "temperature must be >= 0");
  if (temperature == 0.0) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i) {
      if (probs[i] > probs[best]) best = i;
    }
    return static_cast<TokenId>(best);
  }
  std::vector<double> w(probs.begin(), probs.end());
  if (temperature != 1.0) {
    // Scale in log space relative to the max to keep the powers finite.
    double max_log = -INFINITY;
    for (double p : w) {
      if (p > 0.0) max_log = std::max(max_log, std::log(p));
    }
    for (double& p : w) p = p > 0.0 ? std::exp((std::log(p) - max_log) / temperature) : 0.0;
  }
  double total = 0.0;
  for (double p : w) total += p;
  double u = r.uniform() * total;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (u < w[i]) return static_cast<TokenId>(i);
    u -= w[i];
  }
  // Rounding left u just past the last bucket.
  for (std::size_t i = w.size(); i-- > 0;) {
    if (w[i] > 0.0) return static_cast<TokenId>(i);
  }
  return 0;
}

TokenId LanguageModel::sample_next(std::span<const TokenId> context, RandomSource& r,
                                   double temperature) const {
  auto dist = next_distribution(context);
  return sample_from(dist, r, temperature);
}

double LanguageModel::log_prob(std::span<const TokenId> doc) const {
  double total = 0.0;
  for (std::size_t i = 0; i < doc.size(); ++i) total += token_log_prob(doc.first(i), doc[i]);
  return total;
}

double UniformModel::token_log_prob(std::span<const TokenId>, TokenId next) const {
  if (next >= vocab_) {
    throw Error(ErrorCode::TokenOutOfRange, "token " + std::to_string(next) + " >= vocab");
  }
  return -std::log(static_cast<double>(vocab_));
}

std::vector<double> UniformModel::next_distribution(std::span<const TokenId>) const {
  return std::vector<double>(vocab_, 1.0 / vocab_);
}

}  // namespace palimpsest
