#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "oracles.hpp"
#include "palimpsest/errors.hpp"
#include "palimpsest/stats.hpp"

using namespace palimpsest;
using palimpsest::oracle::normal_cdf_quadrature;
using palimpsest::oracle::t_cdf_quadrature;

namespace {

// O(n^2) rank oracle.
std::vector<double> brute_ranks(const std::vector<double>& v) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double below = 0, equal = 0;
    for (double x : v) {
      if (x < v[i]) ++below;
      if (x == v[i]) ++equal;
    }
    out[i] = below + (equal + 1.0) / 2.0;
  }
  return out;
}

template <class Fn>
ErrorCode error_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::InvalidArgument;
}

Transcript dense_transcript(std::size_t n) {
  std::vector<Document> docs(n, Document{0});
  std::vector<Step> steps(n);
  for (std::size_t i = 0; i < n; ++i) steps[i] = static_cast<Step>(i + 1);
  return Transcript(std::move(docs), std::move(steps), static_cast<Step>(n), 1);
}

}  // namespace

TEST_CASE("ranks") {
  CHECK(ranks(std::vector<double>{10, 20, 30}) == std::vector<double>{1, 2, 3});
  CHECK(ranks(std::vector<double>{5, 5, 1}) == std::vector<double>{2.5, 2.5, 1});
  CHECK(error_of([] { ranks(std::vector<double>{1.0, NAN}); }) == ErrorCode::NonFiniteInput);

  RandomSource r(8);
  std::vector<double> v(1000);
  for (auto& x : v) x = std::floor(r.uniform() * 300);  // plenty of ties
  const auto fast = ranks(v);
  CHECK(fast == brute_ranks(v));
  const double sum = std::accumulate(fast.begin(), fast.end(), 0.0);
  CHECK(sum == 1000.0 * 1001.0 / 2.0);
}

TEST_CASE("spearman examples") {
  auto up = spearman(ScoreSeries({1, 2, 3, 4, 5}, {1, 2, 3, 4, 5}));
  CHECK(up.rho == 1.0);
  CHECK(up.p_value_one_sided == 0.0);
  auto down = spearman(ScoreSeries({5, 4, 3, 2, 1}, {1, 2, 3, 4, 5}));
  CHECK(down.rho == -1.0);
  CHECK(down.p_value_one_sided == 1.0);

  // rho = 0 exactly: score ranks are symmetric, centered step ranks antisymmetric.
  auto zero = spearman(ScoreSeries({1, 2, 3, 4, 5, 5, 4, 3, 2, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}));
  CHECK(zero.rho == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(zero.p_value_one_sided == doctest::Approx(0.5).epsilon(1e-12));

  CHECK(error_of([] { spearman(ScoreSeries({2, 2, 2}, {1, 2, 3})); }) == ErrorCode::DegenerateRanks);
  CHECK(error_of([] { spearman(ScoreSeries({1, 2, 3}, {4, 4, 4})); }) == ErrorCode::DegenerateRanks);
  CHECK(error_of([] { ScoreSeries({1, 2}, {1, 2}); }) == ErrorCode::TooFewExamples);
}

TEST_CASE("spearman invariant under strictly increasing transforms") {
  RandomSource r(3);
  std::vector<double> s(40), t(40), s2(40), t2(40);
  for (std::size_t i = 0; i < 40; ++i) {
    s[i] = r.normal();
    t[i] = 1.0 + std::floor(r.uniform() * 25);
    s2[i] = std::exp(3.0 * s[i]) - 7.0;
    t2[i] = t[i] * t[i] * t[i] + 100.0;
  }
  const auto a = spearman(ScoreSeries(s, t));
  const auto b = spearman(ScoreSeries(s2, t2));
  CHECK(a.rho == b.rho);
  CHECK(a.p_value_one_sided == b.p_value_one_sided);
}

TEST_CASE("spearman p agrees with the permutation engine") {
  RandomSource r(20);
  const auto t = dense_transcript(20);
  std::vector<double> scores(20);
  for (std::size_t i = 0; i < 20; ++i) scores[i] = 0.03 * static_cast<double>(i) + r.normal();
  const auto rank_scores = ranks(scores);
  auto phi = [&](const Transcript& tt) {
    std::vector<double> steps(tt.size());
    for (std::size_t i = 0; i < tt.size(); ++i) steps[i] = tt.step(i);
    return pearson(rank_scores, ranks(steps));
  };
  constexpr std::size_t m = 200000;
  const auto perm = permutation_test(t, StatisticFn(phi), m, RandomSource(21));
  std::vector<double> steps(20);
  for (std::size_t i = 0; i < 20; ++i) steps[i] = static_cast<double>(i + 1);
  const auto analytic = spearman(ScoreSeries(scores, steps));
  const double p = analytic.p_value_one_sided;
  // Monte-Carlo error plus the t approximation at n = 20.
  CHECK(std::fabs(perm.p_hat - p) < 3.0 * std::sqrt(p * (1 - p) / m) + 0.01);
}

TEST_CASE("t_cdf") {
  for (double nu : {1.0, 2.0, 7.0, 100.0}) CHECK(t_cdf(0.0, nu) == 0.5);
  CHECK(t_cdf(1.0, 1.0) == doctest::Approx(0.5 + std::atan(1.0) / std::numbers::pi).epsilon(1e-14));
  CHECK(std::fabs(t_cdf(1.0, 1.0) - 0.75) < 1e-14);
  CHECK(std::fabs(t_cdf(2.0, 30.0) - t_cdf_quadrature(2.0, 30.0)) < 1e-10);
  double prev = 0.0;
  for (double x = -8.0; x <= 8.0; x += 0.05) {
    for (double nu : {1.0, 3.0, 30.0}) {
      CHECK(std::fabs(t_cdf(x, nu) + t_cdf(-x, nu) - 1.0) < 1e-12);
      CHECK(std::fabs(t_cdf(x, nu) - t_cdf_quadrature(x, nu)) < 1e-12);
    }
    const double now = t_cdf(x, 5.0);
    CHECK(now >= prev);
    prev = now;
  }
  // Upper tail stays accurate far past where 1 - cdf would underflow.
  CHECK(t_sf(40.0, 1000.0) > 0.0);
  CHECK(t_sf(40.0, 1000.0) < 1e-200);
}

TEST_CASE("normal_cdf") {
  CHECK(normal_cdf(0.0) == 0.5);
  CHECK(std::fabs(normal_cdf(1.96) - 0.9750021049) < 1e-9);
  CHECK(std::fabs(normal_cdf(1.96) - normal_cdf_quadrature(1.96)) < 1e-12);
  RandomSource r(1);
  for (int i = 0; i < 200; ++i) {
    const double z = 6.0 * r.normal();
    CHECK(std::fabs(normal_cdf(-z) - (1.0 - normal_cdf(z))) < 1e-15);
    CHECK(std::fabs(normal_sf(z) - normal_cdf(-z)) < 1e-15);
  }
}

TEST_CASE("permutation_p_value support extremes") {
  std::vector<double> null{1, 2, 3, 4, 5, 6, 7, 8, 9};
  CHECK(permutation_p_value(10.0, null, RandomSource(1)).p_hat == doctest::Approx(0.1));
  CHECK(permutation_p_value(0.0, null, RandomSource(1)).p_hat == 1.0);
  // Ties are exact-bit only.
  const auto near = permutation_p_value(5.0 + 1e-12, null, RandomSource(1));
  CHECK(near.tie_count == 0);
  CHECK(near.exceed_count == 4);
}

TEST_CASE("constant statistic gives uniform p via tie breaking") {
  constexpr std::size_t m = 9;
  std::vector<double> null(m, 0.25);
  std::vector<int> counts(m + 1, 0);
  RandomSource root(5);
  constexpr int kTrials = 20000;
  for (int i = 0; i < kTrials; ++i) {
    const auto res = permutation_p_value(0.25, null, root.substream(i));
    ++counts[static_cast<std::size_t>(std::lround(res.p_hat * (m + 1))) - 1];
  }
  double chi2 = 0;
  const double expected = kTrials / static_cast<double>(m + 1);
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(boost::math::gamma_q(m / 2.0, chi2 / 2.0) > 1e-3);
}

TEST_CASE("permutation_test is uniform under the null and thread-invariant") {
  constexpr std::size_t m = 19;
  constexpr int kTrials = 4000;
  std::vector<int> counts(m + 1, 0);
  RandomSource root(6);
  const auto base = dense_transcript(12);
  for (int trial = 0; trial < kTrials; ++trial) {
    auto tr = root.substream(trial);
    const auto alice = shuffle_transcript(base, tr.substream(0));
    // Independent artifact: random scores per document.
    std::vector<double> artifact(12);
    auto ar = tr.substream(1);
    for (auto& a : artifact) a = ar.normal();
    auto phi = [](const Transcript& t, const std::vector<double>& art) {
      std::vector<double> steps(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) steps[i] = t.step(i);
      return pearson(ranks(art), ranks(steps));
    };
    const auto res = permutation_test(alice, artifact, phi, m, tr.substream(2));
    ++counts[static_cast<std::size_t>(std::lround(res.p_hat * (m + 1))) - 1];
  }
  double chi2 = 0;
  const double expected = kTrials / static_cast<double>(m + 1);
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(boost::math::gamma_q(m / 2.0, chi2 / 2.0) > 1e-3);

  std::vector<double> art{3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8};
  auto phi = [](const Transcript& t, const std::vector<double>& a) {
    double s = 0;
    for (std::size_t i = 0; i < t.size(); ++i) s += a[i] * t.step(i);
    return s;
  };
  const auto one = permutation_test(base, art, phi, 99, RandomSource(7), 1);
  const auto eight = permutation_test(base, art, phi, 99, RandomSource(7), 8);
  CHECK(one.p_hat == eight.p_hat);
  CHECK(one.exceed_count == eight.exceed_count);
}

TEST_CASE("residualize") {
  std::vector<double> y{1, 4, 2, 8, 5};
  const auto centered = residualize(y, {});
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(centered[i] == doctest::Approx(y[i] - 4.0));

  std::vector<std::vector<double>> X;
  std::vector<double> lin;
  for (int i = 0; i < 10; ++i) {
    X.push_back({double(i), double(i * i % 7)});
    lin.push_back(3.0 - 2.0 * i + 0.5 * (i * i % 7));
  }
  for (double e : residualize(lin, X)) CHECK(std::fabs(e) < 1e-9);

  std::vector<std::vector<double>> dup{{1, 2}, {2, 4}, {3, 6}, {4, 8}, {5, 10}};
  CHECK(error_of([&] { residualize(std::vector<double>{1, 2, 3, 4, 5}, dup); }) == ErrorCode::SingularDesign);

  // Normal-equations oracle in long double.
  RandomSource r(50);
  constexpr std::size_t n = 50, d = 3;
  std::vector<std::vector<double>> Xr(n, std::vector<double>(d));
  std::vector<double> yr(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& x : Xr[i]) x = r.normal();
    yr[i] = 1.0 + Xr[i][0] - 0.5 * Xr[i][2] + r.normal();
  }
  long double G[d + 1][d + 2] = {};
  for (std::size_t i = 0; i < n; ++i) {
    long double row[d + 1] = {1.0L, Xr[i][0], Xr[i][1], Xr[i][2]};
    for (std::size_t a = 0; a <= d; ++a) {
      for (std::size_t b = 0; b <= d; ++b) G[a][b] += row[a] * row[b];
      G[a][d + 1] += row[a] * yr[i];
    }
  }
  for (std::size_t c = 0; c <= d; ++c) {  // Gauss-Jordan
    for (std::size_t rr = 0; rr <= d; ++rr) {
      if (rr == c) continue;
      const long double f = G[rr][c] / G[c][c];
      for (std::size_t k = c; k <= d + 1; ++k) G[rr][k] -= f * G[c][k];
    }
  }
  const auto fast = residualize(yr, Xr);
  for (std::size_t i = 0; i < n; ++i) {
    long double fit = G[0][d + 1] / G[0][0];
    for (std::size_t j = 0; j < d; ++j) fit += G[j + 1][d + 1] / G[j + 1][j + 1] * Xr[i][j];
    CHECK(std::fabs(static_cast<double>(yr[i] - fit) - fast[i]) < 1e-10);
  }
}

TEST_CASE("regression_slope") {
  std::vector<double> steps{1, 2, 3, 4, 5, 6};
  std::vector<double> scores;
  for (double s : steps) scores.push_back(2 * s + 1);
  const auto fit = regression_slope(ScoreSeries(scores, steps));
  CHECK(fit.slope == doctest::Approx(2.0));
  CHECK(fit.intercept == doctest::Approx(1.0));
  const auto flat = regression_slope(ScoreSeries({3, 3, 3, 3}, {1, 2, 3, 4}));
  CHECK(flat.slope == 0.0);
  CHECK(flat.t_stat == 0.0);
  CHECK(error_of([] { regression_slope(ScoreSeries({1, 2, 3}, {2, 2, 2})); }) == ErrorCode::DegenerateRanks);

  // Slope lands within 3 standard errors of the truth in ~99.7% of trials.
  RandomSource r(31);
  int inside = 0;
  constexpr int kTrials = 400;
  for (int trial = 0; trial < kTrials; ++trial) {
    std::vector<double> x(30), y(30);
    for (std::size_t i = 0; i < 30; ++i) {
      x[i] = static_cast<double>(i + 1);
      y[i] = -0.3 * x[i] + 4.0 + 2.0 * r.normal();
    }
    const auto f = regression_slope(ScoreSeries(y, x));
    if (std::fabs(f.slope + 0.3) <= 3.0 * f.slope_se) ++inside;
  }
  CHECK(inside >= kTrials * 0.97);
}

TEST_CASE("bonferroni") {
  CHECK(bonferroni(std::vector<double>{0.001, 0.5, 0.9}) == doctest::Approx(0.003));
  CHECK(bonferroni(std::vector<double>{1.0}) == 1.0);
  CHECK(bonferroni(std::vector<double>{0.4, 0.5, 0.6}) == 1.0);
  CHECK(error_of([] { bonferroni(std::vector<double>{}); }) == ErrorCode::InvalidArgument);
  CHECK(error_of([] { bonferroni(std::vector<double>{0.0}); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("ks_uniform") {
  std::vector<double> grid;
  for (int rep = 0; rep < 10; ++rep)
    for (int j = 1; j <= 20; ++j) grid.push_back(j / 20.0);
  CHECK(ks_uniform(grid).statistic <= 1.0 / 20.0 + 1e-12);
  CHECK(ks_uniform(std::vector<double>(100, 0.001)).p_value < 0.01);
  // Q(lambda) is continuous across the two evaluation branches.
  CHECK(kolmogorov_sf(1.18 - 1e-9) == doctest::Approx(kolmogorov_sf(1.18 + 1e-9)).epsilon(1e-6));
  CHECK(kolmogorov_sf(1.6276) == doctest::Approx(0.01).epsilon(0.01));
}
