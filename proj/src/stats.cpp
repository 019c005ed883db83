#include "palimpsest/stats.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include <Eigen/Dense>

#include "palimpsest/errors.hpp"
#include "palimpsest/parallel.hpp"

namespace palimpsest {

namespace {

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFiniteInput, std::string(what) + " contains a non-finite value");
  }
}

constexpr double kInf = std::numeric_limits<double>::infinity();

}  // namespace

ScoreSeries::ScoreSeries(std::vector<double> scores, std::vector<double> steps)
    : scores_(std::move(scores)), steps_(std::move(steps)) {
  if (scores_.size() != steps_.size()) {
    throw Error(ErrorCode::InvalidArgument, "scores and steps differ in length");
  }
  if (scores_.size() < 3) {
    throw Error(ErrorCode::TooFewExamples, "a score series needs at least 3 observations");
  }
  require_finite(scores_, "scores");
  require_finite(steps_, "steps");
}

std::vector<double> ranks(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::InvalidArgument, "ranks of an empty list");
  require_finite(values, "values");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> out(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    // Positions i+1 .. j share the mean rank.
    const double shared = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) out[order[k]] = shared;
    i = j;
  }
  return out;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.empty()) {
    throw Error(ErrorCode::InvalidArgument, "pearson needs two equal-length non-empty vectors");
  }
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw Error(ErrorCode::DegenerateRanks, "zero variance; correlation undefined");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

SpearmanResult spearman_from_rho(double rho, std::size_t n) {
  if (n < 3) throw Error(ErrorCode::TooFewExamples, "spearman needs n >= 3");
  SpearmanResult r;
  r.rho = rho;
  r.n = n;
  const double dof = static_cast<double>(n - 2);
  if (rho >= 1.0) {
    r.t_stat = kInf;
    r.p_value_one_sided = 0.0;
    r.p_value_two_sided = 0.0;
    return r;
  }
  if (rho <= -1.0) {
    r.t_stat = -kInf;
    r.p_value_one_sided = 1.0;
    r.p_value_two_sided = 0.0;
    return r;
  }
  r.t_stat = rho * std::sqrt(dof / ((1.0 - rho) * (1.0 + rho)));
  r.p_value_one_sided = t_sf(r.t_stat, dof);
  const double lower = t_cdf(r.t_stat, dof);
  r.p_value_two_sided = std::min(1.0, 2.0 * std::min(r.p_value_one_sided, lower));
  return r;
}

SpearmanResult spearman(std::span<const double> scores, std::span<const double> steps) {
  if (scores.size() != steps.size()) {
    throw Error(ErrorCode::InvalidArgument, "scores and steps differ in length");
  }
  if (scores.size() < 3) throw Error(ErrorCode::TooFewExamples, "spearman needs n >= 3");
  const auto rs = ranks(scores);
  const auto rt = ranks(steps);
  return spearman_from_rho(pearson(rs, rt), scores.size());
}

SpearmanResult spearman(const ScoreSeries& s) { return spearman(s.scores(), s.steps()); }

namespace {

// Continued fraction for I_x(a, b) (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr double kTiny = 1e-300;
  constexpr double kEps = 1e-16;
  constexpr int kMaxIter = 200000;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

double log_beta(double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); }

// I_x(a, b) given both x and y = 1 - x, so callers can pass y without
// cancellation.
double incomplete_beta_xy(double a, double b, double x, double y) {
  if (x <= 0.0) return 0.0;
  if (y <= 0.0) return 1.0;
  const double log_x = x > 0.5 ? std::log1p(-y) : std::log(x);
  const double log_y = y > 0.5 ? std::log1p(-x) : std::log(y);
  const double log_front = a * log_x + b * log_y - log_beta(a, b);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return std::exp(log_front) * beta_continued_fraction(a, b, x) / a;
  }
  return 1.0 - std::exp(log_front) * beta_continued_fraction(b, a, y) / b;
}

// 0.5 * I_{dof/(dof+t^2)}(dof/2, 1/2), the one-sided tail mass beyond |t|.
double t_tail(double t, double dof) {
  if (std::isinf(t)) return 0.0;
  const double t2 = t * t;
  const double denom = dof + t2;
  return 0.5 * incomplete_beta_xy(0.5 * dof, 0.5, dof / denom, t2 / denom);
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw Error(ErrorCode::InvalidArgument, "incomplete beta needs a, b > 0");
  if (x < 0.0 || x > 1.0) throw Error(ErrorCode::InvalidArgument, "incomplete beta needs x in [0, 1]");
  return incomplete_beta_xy(a, b, x, 1.0 - x);
}

double t_sf(double x, double dof) {
  if (!(dof > 0.0)) throw Error(ErrorCode::InvalidArgument, "t distribution needs dof > 0");
  if (std::isnan(x)) throw Error(ErrorCode::NonFiniteInput, "t_sf of NaN");
  const double tail = t_tail(x, dof);
  return x >= 0.0 ? tail : 1.0 - tail;
}

double t_cdf(double x, double dof) {
  if (!(dof > 0.0)) throw Error(ErrorCode::InvalidArgument, "t distribution needs dof > 0");
  if (std::isnan(x)) throw Error(ErrorCode::NonFiniteInput, "t_cdf of NaN");
  const double tail = t_tail(x, dof);
  return x <= 0.0 ? tail : 1.0 - tail;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double normal_sf(double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); }

PermutationResult permutation_p_value(double observed, std::span<const double> null_stats,
                                      RandomSource tie_breaker) {
  if (std::isnan(observed)) throw Error(ErrorCode::NonFiniteInput, "observed statistic is NaN");
  PermutationResult out;
  out.m = null_stats.size();
  out.observed = observed;
  const auto observed_bits = std::bit_cast<std::uint64_t>(observed);
  for (double s : null_stats) {
    if (std::bit_cast<std::uint64_t>(s) == observed_bits) {
      ++out.tie_count;
    } else if (s > observed) {
      ++out.exceed_count;
    }
  }
  out.ties_ranked_above =
      out.tie_count == 0 ? 0 : static_cast<std::size_t>(tie_breaker.uniform_below(out.tie_count + 1));
  out.p_hat = static_cast<double>(1 + out.exceed_count + out.ties_ranked_above) /
              static_cast<double>(out.m + 1);
  return out;
}

PermutationResult permutation_test(const Transcript& t, const StatisticFn& phi, std::size_t m,
                                   const RandomSource& r, unsigned threads) {
  if (m < 1) throw Error(ErrorCode::InvalidArgument, "permutation test needs m >= 1");
  const double observed = phi(t);
  std::vector<double> null_stats(m);
  parallel_for(m, threads, [&](std::size_t j) {
    null_stats[j] = phi(shuffle_transcript(t, r.substream(j + 1)));
  });
  return permutation_p_value(observed, null_stats, r.substream(0));
}

std::vector<double> residualize(std::span<const double> y,
                                const std::vector<std::vector<double>>& X) {
  const std::size_t n = y.size();
  std::size_t d = 0;
  if (!X.empty()) {
    if (X.size() != n) throw Error(ErrorCode::InvalidArgument, "design rows differ from response length");
    d = X.front().size();
    for (const auto& row : X) {
      if (row.size() != d) throw Error(ErrorCode::InvalidArgument, "design rows differ in width");
      require_finite(row, "design matrix");
    }
  }
  require_finite(y, "response");
  if (n <= d + 1) throw Error(ErrorCode::InvalidArgument, "need more observations than columns");
  Eigen::MatrixXd A(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d + 1));
  Eigen::VectorXd b(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    A(row, 0) = 1.0;
    for (std::size_t j = 0; j < d; ++j) A(row, static_cast<Eigen::Index>(j + 1)) = X[i][j];
    b(row) = y[i];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  if (qr.rank() < static_cast<Eigen::Index>(d + 1)) {
    throw Error(ErrorCode::SingularDesign, "design matrix is rank deficient");
  }
  const Eigen::VectorXd beta = qr.solve(b);
  const Eigen::VectorXd resid = b - A * beta;
  return {resid.data(), resid.data() + resid.size()};
}

RegressionFit regression_slope(const ScoreSeries& s) {
  const auto& x = s.steps();
  const auto& y = s.scores();
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) throw Error(ErrorCode::DegenerateRanks, "all steps identical");
  RegressionFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ssr = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - fit.intercept - fit.slope * x[i];
    ssr += e * e;
  }
  fit.slope_se = std::sqrt(ssr / (n - 2.0) / sxx);
  if (fit.slope_se > 0.0) {
    fit.t_stat = fit.slope / fit.slope_se;
  } else {
    fit.t_stat = fit.slope == 0.0 ? 0.0 : std::copysign(kInf, fit.slope);
  }
  return fit;
}

double bonferroni(std::span<const double> p_values) {
  if (p_values.empty()) throw Error(ErrorCode::InvalidArgument, "bonferroni of an empty list");
  for (double p : p_values) {
    if (!(p > 0.0 && p <= 1.0)) throw Error(ErrorCode::InvalidArgument, "p-values must lie in (0, 1]");
  }
  const double smallest = *std::min_element(p_values.begin(), p_values.end());
  return std::min(1.0, static_cast<double>(p_values.size()) * smallest);
}

double kolmogorov_sf(double lambda) {
  if (lambda <= 0.0) return 1.0;
  if (lambda < 1.18) {
    // Jacobi-theta form converges fast for small lambda.
    const double k = std::sqrt(2.0 * std::numbers::pi) / lambda;
    const double f = -std::numbers::pi * std::numbers::pi / (8.0 * lambda * lambda);
    double sum = 0.0;
    for (int j = 1; j <= 7; j += 2) sum += std::exp(f * j * j);
    return std::clamp(1.0 - k * sum, 0.0, 1.0);
  }
  double sum = 0.0;
  for (int j = 1; j <= 100; ++j) {
    const double term = std::exp(-2.0 * j * j * lambda * lambda);
    sum += (j % 2 == 1 ? term : -term);
    if (term < 1e-300) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

KsResult ks_uniform(std::span<const double> samples) {
  if (samples.empty()) throw Error(ErrorCode::InvalidArgument, "KS test of an empty sample");
  std::vector<double> sorted(samples.begin(), samples.end());
  require_finite(sorted, "samples");
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const double u = std::clamp(sorted[i], 0.0, 1.0);
    d = std::max({d, static_cast<double>(i + 1) / n - u, u - static_cast<double>(i) / n});
  }
  const double root_n = std::sqrt(n);
  return {d, kolmogorov_sf((root_n + 0.12 + 0.11 / root_n) * d)};
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::InvalidArgument, "quantile of an empty list");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

}  // namespace palimpsest
