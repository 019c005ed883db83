#include <doctest.h>

#include <cmath>
#include <sstream>

#include "palimpsest/errors.hpp"
#include "palimpsest/harness.hpp"

using namespace palimpsest;

namespace {

Scenario small(ScenarioKind kind) {
  Scenario sc;
  sc.kind = kind;
  auto& c = sc.cfg;
  c.corpus.n_docs = 60;
  c.corpus.min_len = 20;
  c.corpus.max_len = 30;
  c.corpus.vocab = 32;
  c.corpus.templates = 4;
  c.model.vocab = 32;
  c.model.decay = 0.97;
  c.query.seq_len = 8;
  c.text.prefix_len = 4;
  c.text.continuation_len = 32;
  c.partitions = 5;
  c.shuffle.k = 4;
  c.shuffle.retrain_fraction = 0.2;
  c.exact_m = 3;
  c.n_samples = 8;
  return sc;
}

const std::vector<TestId> kAll{TestId::Query,   TestId::QueryRef,          TestId::QueryRegression,
                               TestId::QuerySampled, TestId::ObsPart, TestId::ObsPartLikelihood,
                               TestId::ObsShuff, TestId::ObsShuffFinetune, TestId::ObsShuffExact};

}  // namespace

TEST_CASE("corpus generator") {
  CorpusConfig cfg;
  const auto a = generate_corpus(cfg, RandomSource(1, 0));
  CHECK(a == generate_corpus(cfg, RandomSource(1, 0)));
  CHECK(a != generate_corpus(cfg, RandomSource(2, 0)));
  CHECK(a.size() == cfg.n_docs);
  for (const auto& d : a) {
    CHECK(d.size() >= cfg.min_len);
    CHECK(d.size() <= cfg.max_len);
    for (TokenId t : d) CHECK(t < cfg.vocab);
  }
  CHECK(distinct_ngram_rate(a, 8) >= 0.5);
  // Short n-grams repeat across documents; long ones mostly do not.
  CHECK(distinct_ngram_rate(a, 2) < distinct_ngram_rate(a, 8));

  cfg.n_docs = 1;
  CHECK(generate_corpus(cfg, RandomSource(1, 0)).size() == 1);
  cfg.min_len = 10;
  cfg.max_len = 5;
  CHECK_THROWS_AS(generate_corpus(cfg, RandomSource(1, 0)), Error);
}

TEST_CASE("distinct n-gram rate") {
  const std::vector<Document> docs{{1, 2, 1, 2}, {7}};
  CHECK(distinct_ngram_rate(docs, 2) == doctest::Approx(2.0 / 3.0));
  CHECK(distinct_ngram_rate(docs, 1) == doctest::Approx(3.0 / 5.0));
  CHECK(distinct_ngram_rate(docs, 5) == 0.0);
}

TEST_CASE("names round trip") {
  for (TestId id : kAll) CHECK(parse_test_id(to_string(id)) == id);
  for (auto k : {ScenarioKind::Copy, ScenarioKind::Finetune, ScenarioKind::IndependentReshuffle,
                 ScenarioKind::IndependentCorpus}) {
    CHECK(parse_scenario_kind(to_string(k)) == k);
  }
  CHECK_THROWS_AS(parse_test_id("nope"), Error);
  CHECK(is_query_test(TestId::QuerySampled));
  CHECK(!is_query_test(TestId::ObsPart));
}

TEST_CASE("sweeps are reproducible and thread invariant") {
  const Scenario sc = small(ScenarioKind::Copy);
  const std::vector<std::size_t> sizes{30, 60};
  const auto a = run_scenario(sc, kAll, sizes, 3, RandomSource(4, 1), 1);
  const auto b = run_scenario(sc, kAll, sizes, 3, RandomSource(4, 1), 3);
  REQUIRE(a.cells.size() == kAll.size() * sizes.size());
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    CHECK(a.cells[i].p_values == b.cells[i].p_values);
    CHECK(a.cells[i].p_values.size() == 3);
    for (double p : a.cells[i].p_values) {
      CHECK(p > 0.0);
      CHECK(p <= 1.0);
    }
  }
  std::ostringstream ja, jb;
  write_report_json(ja, a);
  write_report_json(jb, b);
  CHECK(ja.str() == jb.str());

  // A copied model is flagged by the exact query test.
  CHECK(a.cell("copy", "query", 60).median < 0.01);
  // The exact shuffle p-value lives on the grid 1/(m+1).
  for (double p : a.cell("copy", "obs_shuff_exact", 60).p_values) {
    CHECK(p * 4.0 == doctest::Approx(std::round(p * 4.0)));
    CHECK(p >= 0.25);
  }

  std::ostringstream csv;
  write_report_csv(csv, a);
  std::string header;
  std::getline(std::istringstream(csv.str()) >> std::ws, header);
  CHECK(header == "scenario,test,n,trial,p");
}

TEST_CASE("scenario validation") {
  const std::vector<TestId> q{TestId::Query};
  const std::vector<std::size_t> ok{10};
  auto expect_invalid = [&](const Scenario& sc, std::span<const TestId> tests,
                            std::span<const std::size_t> sizes) {
    try {
      run_scenario(sc, tests, sizes, 1, RandomSource(0, 0));
      FAIL("expected throw");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::InvalidScenario);
    }
  };
  Scenario sc = small(ScenarioKind::Finetune);
  expect_invalid(sc, q, ok);
  sc = small(ScenarioKind::Copy);
  sc.finetune_tokens = 10;
  expect_invalid(sc, q, ok);
  sc = small(ScenarioKind::Copy);
  expect_invalid(sc, q, std::vector<std::size_t>{61});
  sc.cfg.query.seq_len = 25;
  expect_invalid(sc, q, ok);
  sc = small(ScenarioKind::Copy);
  sc.cfg.model.vocab = 64;
  expect_invalid(sc, q, ok);
  sc = small(ScenarioKind::Copy);
  sc.cfg.partitions = 2;
  expect_invalid(sc, std::vector<TestId>{TestId::ObsPart}, ok);
}

TEST_CASE("default sizes") {
  const Scenario sc = small(ScenarioKind::IndependentCorpus);
  const std::vector<TestId> tests{TestId::Query, TestId::ObsPart};
  const auto rep = run_scenario(sc, tests, {}, 2, RandomSource(3, 0));
  REQUIRE(rep.cells.size() == 2);
  CHECK(rep.cells[0].n == 60);
  CHECK(rep.cells[1].n == 20 * 32);
}

TEST_CASE("fine-tuned copies stay detectable") {
  Scenario sc = small(ScenarioKind::Finetune);
  sc.finetune_tokens = 200;
  const std::vector<TestId> q{TestId::Query};
  const auto rep = run_scenario(sc, q, std::vector<std::size_t>{60}, 3, RandomSource(5, 0));
  CHECK(rep.cells[0].scenario == "finetune(200)");
  CHECK(rep.cells[0].median < 0.05);
}

TEST_CASE("independent models give calibrated query p-values") {
  const Scenario sc = small(ScenarioKind::IndependentCorpus);
  const std::vector<TestId> q{TestId::Query};
  const auto rep = run_scenario(sc, q, std::vector<std::size_t>{60}, 60, RandomSource(6, 0));
  const auto cal = calibration_report(rep.cells[0].p_values);
  CHECK(cal.uniform_pass);
}

TEST_CASE("calibration report") {
  std::vector<double> grid;
  for (int i = 1; i <= 200; ++i) grid.push_back((i - 0.5) / 200.0);
  const auto good = calibration_report(grid);
  CHECK(good.uniform_pass);
  REQUIRE(good.ecdf.size() == 100);
  CHECK(good.ecdf[0].x == 0.01);
  CHECK(good.ecdf[49].fraction == doctest::Approx(0.5));
  CHECK(good.ecdf[99].fraction == 1.0);

  const std::vector<double> bad(50, 0.001);
  const auto r = calibration_report(bad);
  CHECK(!r.uniform_pass);
  CHECK(r.ecdf[0].fraction == 1.0);

  // Permutation p-values on a grid of step 1/(m+1) are uniform on that grid.
  std::vector<double> lattice;
  for (int rep = 0; rep < 40; ++rep) {
    for (int j = 1; j <= 5; ++j) lattice.push_back(j / 5.0);
  }
  const auto lat = calibration_report(lattice);
  CHECK(lat.ecdf[19].fraction == doctest::Approx(0.2));
  CHECK_THROWS_AS(calibration_report(std::vector<double>{}), Error);
}
