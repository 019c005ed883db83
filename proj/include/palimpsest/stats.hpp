#pragma once

// Rank statistics, distribution functions, the generic permutation engine and
// least-squares residualization.

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "palimpsest/core.hpp"
#include "palimpsest/random.hpp"

namespace palimpsest {

// Paired (score, step) observations; n >= 3, all finite.
class ScoreSeries {
 public:
  ScoreSeries(std::vector<double> scores, std::vector<double> steps);

  std::size_t size() const noexcept { return scores_.size(); }
  const std::vector<double>& scores() const noexcept { return scores_; }
  const std::vector<double>& steps() const noexcept { return steps_; }

 private:
  std::vector<double> scores_;
  std::vector<double> steps_;
};

struct SpearmanResult {
  double rho = 0.0;
  std::size_t n = 0;
  double t_stat = 0.0;
  // Alternative: positive correlation.
  double p_value_one_sided = 1.0;
  double p_value_two_sided = 1.0;
};

// 1-based average ranks; ties share the mean of the positions they span.
std::vector<double> ranks(std::span<const double> values);

// Pearson correlation of two equal-length vectors; throws DegenerateRanks if
// either has zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

SpearmanResult spearman(const ScoreSeries& s);
SpearmanResult spearman(std::span<const double> scores, std::span<const double> steps);
// From an already computed coefficient.
SpearmanResult spearman_from_rho(double rho, std::size_t n);

// Student t with `dof` degrees of freedom.
double t_cdf(double x, double dof);
// Upper tail 1 - t_cdf(x), evaluated without cancellation.
double t_sf(double x, double dof);
// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);

double normal_cdf(double z);
// Upper tail 1 - normal_cdf(z).
double normal_sf(double z);

struct PermutationResult {
  double p_hat = 1.0;
  std::size_t m = 0;
  double observed = 0.0;
  std::size_t exceed_count = 0;  // permutations with statistic > observed
  std::size_t tie_count = 0;     // permutations bit-identical to observed
  std::size_t ties_ranked_above = 0;
};

using StatisticFn = std::function<double(const Transcript&)>;

// Rank-based p-value: (1 + #{null > observed} + U) / (m + 1), where U is
// uniform on {0, ..., #ties}. Exactly uniform on {(j+1)/(m+1)} under
// exchangeability.
PermutationResult permutation_p_value(double observed, std::span<const double> null_stats,
                                      RandomSource tie_breaker);

// Monte-Carlo permutation test over step relabelings. Permutation j draws
// from r.substream(j + 1); ties are broken with r.substream(0).
PermutationResult permutation_test(const Transcript& t, const StatisticFn& phi, std::size_t m,
                                   const RandomSource& r, unsigned threads = 1);

template <class Artifact, class Phi>
PermutationResult permutation_test(const Transcript& t, const Artifact& artifact, Phi&& phi,
                                   std::size_t m, const RandomSource& r, unsigned threads = 1) {
  return permutation_test(
      t, StatisticFn([&](const Transcript& tt) { return phi(tt, artifact); }), m, r, threads);
}

// OLS residuals of y on [1, X]. X holds rows of equal width d; n > d + 1.
std::vector<double> residualize(std::span<const double> y,
                                const std::vector<std::vector<double>>& X);

struct RegressionFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_se = 0.0;
  double t_stat = 0.0;
};

// Diagnostic OLS fit of scores on steps.
RegressionFit regression_slope(const ScoreSeries& s);

// min(1, k * min(p)).
double bonferroni(std::span<const double> p_values);

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

// One-sample Kolmogorov-Smirnov test against Uniform(0, 1).
KsResult ks_uniform(std::span<const double> samples);
// Asymptotic Kolmogorov survival function Q(lambda).
double kolmogorov_sf(double lambda);

double median(std::vector<double> values);
double quantile(std::vector<double> values, double q);

}  // namespace palimpsest
