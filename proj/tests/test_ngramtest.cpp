#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "palimpsest/errors.hpp"
#include "palimpsest/ngramtest.hpp"
#include "oracles.hpp"

using namespace palimpsest;
using namespace palimpsest::oracle;

TEST_CASE("partition_entries splits contiguously by step") {
  RandomSource r(1, 0);
  const Transcript t = random_corpus(r, 23, 5, 4);
  const auto parts = partition_entries(t, 5);
  std::size_t total = 0;
  Step last = 0;
  for (const auto& p : parts) {
    CHECK(p.size() >= 4);
    CHECK(p.size() <= 5);
    total += p.size();
    for (std::size_t e : p) {
      CHECK(t.step(e) > last);
      last = t.step(e);
    }
  }
  CHECK(total == 23);
  try {
    partition_entries(t, 24);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TooManyPartitions);
  }
}

TEST_CASE("index of a single document") {
  const Transcript t = transcript_in_order({{0, 1, 2}}, 1, 3);
  const auto idx = build_index(t, 1, 2, 1.0, RandomSource(1, 0));
  const OracleIndex want{{{0}, {{1, 1}}}, {{1}, {{1, 1}}}, {{2}, {{1, 1}}},
                         {{0, 1}, {{1, 1}}}, {{1, 2}, {{1, 1}}}};
  CHECK(as_map(idx) == want);
  CHECK(idx.size() == 5);
  CHECK(idx.find(Gram{2, 1}).empty());
}

TEST_CASE("index equals the brute-force enumeration") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CAPTURE(seed);
    RandomSource r(seed, 2);
    const Transcript t = random_corpus(r, 200, 3 + seed * 5, 30);
    const auto idx = build_index(t, 10, 8, 1.0, RandomSource(seed, 0));
    CHECK(as_map(idx) == oracle_index(t, 10, 8));

    std::uint64_t mass = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::size_t len = t.doc(i).size();
      for (std::size_t n = 1; n <= 8; ++n) mass += len >= n ? len - n + 1 : 0;
    }
    CHECK(idx.total_mass() == mass);
    CHECK(build_index(t, 10, 8, 1.0, RandomSource(seed, 0), 4) == idx);
  }
}

TEST_CASE("subsampled index") {
  RandomSource r(3, 0);
  const Transcript t = random_corpus(r, 150, 50, 40);
  const auto full = build_index(t, 5, 4, 1.0, RandomSource(8, 0));
  const auto half = build_index(t, 5, 4, 0.25, RandomSource(8, 0));
  const double ratio = static_cast<double>(half.total_mass()) / full.total_mass();
  CHECK(ratio == doctest::Approx(0.25).epsilon(0.05 / 0.25));
  CHECK(build_index(t, 5, 4, 0.25, RandomSource(8, 0), 3) == half);
  CHECK_FALSE(build_index(t, 5, 4, 0.25, RandomSource(9, 0)) == half);
  // Keep decisions follow documents, so relabelling steps keeps the mass.
  const auto relabelled = build_index(shuffle_transcript(t, RandomSource(4, 4)), 5, 4, 0.25, RandomSource(8, 0));
  CHECK(relabelled.total_mass() == half.total_mass());

  CHECK_THROWS_AS(build_index(t, 5, 4, 0.0, RandomSource(8, 0)), Error);
  CHECK_THROWS_AS(build_index(t, 151, 4, 1.0, RandomSource(8, 0)), Error);
}

TEST_CASE("match profile equals the substring-scan oracle") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    CAPTURE(seed);
    RandomSource r(seed, 5);
    const std::uint32_t V = 2 + static_cast<std::uint32_t>(seed);
    const Transcript t = random_corpus(r, 60, V, 25);
    const std::uint32_t k = 6;
    const auto idx = build_index(t, k, 8, 1.0, RandomSource(seed, 0));
    TextBundle text;
    for (int i = 0; i < 5; ++i) text.docs.push_back(random_doc(r, 40, V + 2));
    // Splice verbatim training spans into the text.
    text.docs.push_back(t.doc(3));
    text.docs.push_back(t.doc(17));
    for (unsigned min_order : {1u, 2u}) {
      CAPTURE(min_order);
      MatchOptions opt;
      opt.min_order = min_order;
      const auto got = match_profile(idx, text, opt);
      CHECK(got == oracle_profile(t, k, 8, text, min_order));
      opt.threads = 3;
      CHECK(match_profile(idx, text, opt) == got);
      TextBundle reversed{{text.docs.rbegin(), text.docs.rend()}};
      CHECK(match_profile(idx, reversed, opt) == got);
    }
  }
}

TEST_CASE("match profile edge cases") {
  RandomSource r(4, 0);
  const Transcript t = random_corpus(r, 30, 10, 20);

  SUBCASE("no shared vocabulary") {
    const auto idx = build_index(t, 3, 8, 1.0, RandomSource(1, 0));
    TextBundle text{{{10, 11, 12, 13}, {19, 18}}};
    MatchOptions opt;
    opt.min_order = 1;
    CHECK(match_profile(idx, text, opt) == MatchProfile{0, 0, 0});
  }
  SUBCASE("a training document matches in bulk") {
    const auto idx = build_index(t, 1, 8, 1.0, RandomSource(1, 0));
    Document longest = t.doc(0);
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t.doc(i).size() > longest.size()) longest = t.doc(i);
    }
    const auto prof = match_profile(idx, TextBundle{{longest}}, {1, 1});
    CHECK(prof[0] >= (longest.size() + 7) / 8);
  }
  SUBCASE("unique 8-gram in one partition") {
    // Ten partitions of filler over tokens 0..4; partition 7 also holds a
    // span over tokens 100..107 seen nowhere else.
    std::vector<Document> docs;
    RandomSource f(2, 0);
    for (int i = 0; i < 10; ++i) docs.push_back(random_doc(f, 10, 5));
    docs[6].insert(docs[6].end(), {100, 101, 102, 103, 104, 105, 106, 107});
    const Transcript ten = transcript_in_order(docs, 1, 200);
    const auto idx = build_index(ten, 10, 8, 1.0, RandomSource(1, 0));
    TextBundle text{{{150, 151, 100, 101, 102, 103, 104, 105, 106, 107, 152}}};
    const auto prof = match_profile(idx, text);
    MatchProfile want(10, 0);
    want[6] = 1;
    CHECK(prof == want);
  }
}

TEST_CASE("partition statistic") {
  const auto inc = partition_statistic({1, 2, 5, 9, 10});
  REQUIRE(inc.stats);
  CHECK(inc.stats->rho == 1.0);
  CHECK_FALSE(inc.degenerate);
  CHECK(inc.p_value < 0.01);

  const auto flat = partition_statistic({4, 4, 4, 4});
  CHECK(flat.degenerate);
  CHECK(flat.p_value == 1.0);
  CHECK_FALSE(flat.stats);

  CHECK_THROWS_AS(partition_statistic({1, 2}), Error);
}

TEST_CASE("relabelling steps permutes the profile when k = N") {
  RandomSource r(12, 0);
  const std::size_t n = 12;
  std::vector<Document> docs;
  for (std::size_t i = 0; i < n; ++i) docs.push_back(random_doc(r, 15, 4));
  const Transcript t = transcript_in_order(docs, 1, 4);
  TextBundle text{{random_doc(r, 200, 4)}};
  const auto base = match_profile(build_index(t, n, 6, 1.0, RandomSource(1, 0)), text);
  for (int trial = 0; trial < 5; ++trial) {
    const Transcript s = shuffle_transcript(t, r.substream(trial));
    const auto prof = match_profile(build_index(s, n, 6, 1.0, RandomSource(1, 0)), text);
    for (std::size_t i = 0; i < n; ++i) CHECK(prof[s.step(i) - 1] == base[t.step(i) - 1]);
  }
}

TEST_CASE("profile permutation test") {
  const std::vector<double> inc{1, 2, 3, 4, 5, 6};
  const auto res = profile_permutation_test(inc, 999, RandomSource(3, 0));
  CHECK(res.exceed_count == 0);
  CHECK(res.p_hat <= 0.01);
  const auto flat = profile_permutation_test(std::vector<double>{2, 2, 2}, 99, RandomSource(3, 0));
  CHECK(flat.p_hat == 1.0);
}

TEST_CASE("likelihood variant") {
  RandomSource r(6, 0);
  std::vector<Document> docs;
  for (int i = 0; i < 12; ++i) docs.push_back(random_doc(r, 30, 8));

  SUBCASE("text from the last partition scores highest there") {
    const Transcript t = transcript_in_order(docs, 1, 8);
    TextBundle text{{docs[10], docs[11]}};
    const auto res = phi_obs_part_likelihood(t, 4, text, 3, 0.1);
    const auto best = std::max_element(res.profile.begin(), res.profile.end());
    CHECK(best - res.profile.begin() == 3);
  }
  SUBCASE("identical partitions are degenerate") {
    std::vector<Document> dup;
    for (int p = 0; p < 4; ++p) dup.insert(dup.end(), docs.begin(), docs.begin() + 3);
    const Transcript t = transcript_in_order(dup, 1, 8);
    const auto res = phi_obs_part_likelihood(t, 4, TextBundle{{docs[5]}}, 3, 0.1, 2);
    CHECK(res.degenerate);
    CHECK(res.p_value == 1.0);
  }
}

TEST_CASE("null calibration of the partition tests") {
  std::vector<double> p_counts, p_lik;
  RandomSource root(31, 0);
  for (int trial = 0; trial < 300; ++trial) {
    RandomSource tr = root.substream(trial);
    const Transcript t = random_corpus(tr.substream(0), 80, 6, 20);
    RandomSource tx = tr.substream(1);
    TextBundle text{{random_doc(tx, 150, 6)}};
    const auto idx = build_index(t, 8, 6, 1.0, tr.substream(2));
    p_counts.push_back(phi_obs_part(idx, text).p_value);
    p_lik.push_back(phi_obs_part_likelihood(t, 8, text, 2, 0.5).p_value);
  }
  CHECK(ks_uniform(p_counts).p_value > 0.001);
  CHECK(ks_uniform(p_lik).p_value > 0.001);
}

TEST_CASE("index file round trip") {
  RandomSource r(9, 0);
  const Transcript t = random_corpus(r, 80, 1000, 30);
  const auto idx = build_index(t, 7, 8, 0.5, RandomSource(77, 0));
  const auto bytes = idx.serialize();
  CHECK(std::string(bytes.begin(), bytes.begin() + 5) == "PNGX1");
  const auto back = NGramIndex::deserialize(bytes);
  CHECK(back == idx);
  CHECK(back.serialize() == bytes);
  CHECK(back.seed() == 77);
  CHECK(back.subsample_rate() == 0.5);

  auto cut = bytes;
  cut.pop_back();
  CHECK_THROWS_AS(NGramIndex::deserialize(cut), Error);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(NGramIndex::deserialize(extra), Error);
}
