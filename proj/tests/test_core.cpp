#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "palimpsest/core.hpp"
#include "palimpsest/errors.hpp"

using namespace palimpsest;

namespace {

Transcript ramp(Step n) {
  std::vector<Document> docs;
  std::vector<Step> steps;
  for (Step i = 1; i <= n; ++i) {
    docs.push_back({i % 7, (i * 3) % 7});
    steps.push_back(i);
  }
  return Transcript(std::move(docs), std::move(steps), n, 7);
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

}  // namespace

TEST_CASE("transcript construction validates invariants") {
  CHECK(error_of([] { Transcript({{1}}, {0}, 3, 4); }) == ErrorCode::StepOutOfRange);
  CHECK(error_of([] { Transcript({{1}}, {4}, 3, 4); }) == ErrorCode::StepOutOfRange);
  CHECK(error_of([] { Transcript({{9}}, {1}, 3, 4); }) == ErrorCode::TokenOutOfRange);
  CHECK(error_of([] { Transcript(std::vector<Document>{}, std::vector<Step>{}, 3, 4); }) == ErrorCode::EmptyTranscript);
  // Several entries may share a step.
  Transcript shared({{1}, {2}, {3}}, {2, 2, 2}, 2, 4);
  CHECK(shared.size() == 3);
}

TEST_CASE("shuffle_transcript edge cases") {
  Transcript one({{1, 2}}, {1}, 1, 4);
  auto s = shuffle_transcript(one, RandomSource(3));
  CHECK(s.step(0) == 1);
  CHECK(s.doc(0) == one.doc(0));

  Transcript single({{1, 2}}, {2}, 5, 4);
  auto s2 = shuffle_transcript(single, RandomSource(11));
  CHECK(s2.size() == 1);
  CHECK(s2.doc(0) == single.doc(0));
  CHECK((s2.step(0) >= 1 && s2.step(0) <= 5));
}

TEST_CASE("shuffle_transcript golden permutation") {
  const auto t = ramp(5);
  const auto a = shuffle_transcript(t, RandomSource(2024, 1));
  const auto b = shuffle_transcript(t, RandomSource(2024, 1));
  CHECK(a.steps() == b.steps());
  CHECK(a.steps() == std::vector<Step>{2, 3, 5, 1, 4});  // frozen
  // Original untouched.
  CHECK(t.steps() == std::vector<Step>{1, 2, 3, 4, 5});
}

TEST_CASE("double shuffle has uniform step marginals") {
  // chi-square over (entry, step) cells: each entry lands on each step with
  // probability 1/N.
  constexpr Step N = 6;
  constexpr int kTrials = 6000;
  const auto t = ramp(N);
  std::vector<std::vector<int>> counts(N, std::vector<int>(N, 0));
  RandomSource root(77);
  for (int trial = 0; trial < kTrials; ++trial) {
    const auto once = shuffle_transcript(t, root.substream(2 * trial));
    const auto twice = shuffle_transcript(once, root.substream(2 * trial + 1));
    for (std::size_t i = 0; i < N; ++i) ++counts[i][twice.step(i) - 1];
  }
  const double expected = static_cast<double>(kTrials) / N;
  for (std::size_t i = 0; i < N; ++i) {
    double chi2 = 0.0;
    for (int c : counts[i]) chi2 += (c - expected) * (c - expected) / expected;
    CHECK(boost::math::gamma_q((N - 1) / 2.0, chi2 / 2.0) > 1e-4);
  }
}

TEST_CASE("subsample_transcript") {
  const auto t = ramp(100);
  CHECK(error_of([&] { subsample_transcript(t, 101, RandomSource(1)); }) == ErrorCode::SampleTooLarge);
  CHECK(error_of([&] { subsample_transcript(t, 0, RandomSource(1)); }) == ErrorCode::SampleTooLarge);

  const auto all = subsample_transcript(t, 100, RandomSource(1));
  auto a = all.steps();
  auto b = t.steps();
  std::sort(a.begin(), a.end());
  CHECK(a == b);
  CHECK(all.num_steps() == t.num_steps());

  const auto ten = subsample_transcript(t, 10, RandomSource(2024, 3));
  CHECK(ten.num_steps() == 100);
  CHECK(ten.steps() == std::vector<Step>{2, 8, 14, 15, 20, 24, 57, 75, 78, 81});  // frozen
  CHECK(ten.steps() == subsample_transcript(t, 10, RandomSource(2024, 3)).steps());
  for (std::size_t i = 0; i < ten.size(); ++i) CHECK(ten.doc(i) == t.doc(ten.step(i) - 1));
}

TEST_CASE("filter_epoch") {
  const auto t = ramp(10);
  const EpochMap whole({{1, 10}}, 10);
  const auto same = filter_epoch(t, whole, 1);
  CHECK(same.steps() == t.steps());
  CHECK(same.num_steps() == 10);

  const auto halves = EpochMap::uniform(10, 2);
  const auto second = filter_epoch(t, halves, 2);
  CHECK(second.steps() == std::vector<Step>{1, 2, 3, 4, 5});
  CHECK(second.num_steps() == 5);
  CHECK(second.doc(0) == t.doc(5));

  CHECK(error_of([&] { filter_epoch(t, halves, 3); }) == ErrorCode::UnknownEpoch);
  CHECK(error_of([&] { filter_epoch(t, halves, 0); }) == ErrorCode::UnknownEpoch);

  Transcript early({{1}, {2}}, {1, 2}, 10, 4);
  CHECK(error_of([&] { filter_epoch(early, halves, 2); }) == ErrorCode::EmptyEpoch);

  CHECK(error_of([] { EpochMap({{1, 4}, {6, 10}}, 10); }) == ErrorCode::InvalidEpochMap);
  CHECK(error_of([] { EpochMap({{1, 4}}, 10); }) == ErrorCode::InvalidEpochMap);
}

TEST_CASE("transcript JSONL round trip and errors") {
  Transcript t({{1, 2, 3}, {0}, {3, 3}}, {2, 1, 2}, 3, 4);
  std::stringstream ss;
  write_transcript_jsonl(ss, t);
  CHECK(ss.str() ==
        "{\"num_steps\":3,\"vocab\":4}\n"
        "{\"step\":2,\"tokens\":[1,2,3]}\n"
        "{\"step\":1,\"tokens\":[0]}\n"
        "{\"step\":2,\"tokens\":[3,3]}\n");
  const auto back = read_transcript_jsonl(ss);
  CHECK(back.steps() == t.steps());
  for (std::size_t i = 0; i < t.size(); ++i) CHECK(back.doc(i) == t.doc(i));

  std::stringstream bad("{\"num_steps\":3,\"vocab\":4}\n{\"step\":1,\"tokens\":[1]}\n{\"step\":9,\"tokens\":[1]}\n");
  try {
    read_transcript_jsonl(bad);
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ParseError);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  std::stringstream garbage("{\"num_steps\":3,\"vocab\":4}\nnot json\n");
  CHECK(error_of([&] { read_transcript_jsonl(garbage); }) == ErrorCode::ParseError);
}

TEST_CASE("byte tokenizer") {
  const auto d = tokenize_bytes("ab\xff");
  CHECK(d == Document{97, 98, 255});
  CHECK(detokenize_bytes(d) == "ab\xff");
}

TEST_CASE("text JSONL round trip and errors") {
  const TextBundle text{{{1, 2, 3}, {300}}};
  std::stringstream ss;
  write_text_jsonl(ss, text);
  CHECK(ss.str() == "{\"tokens\":[1,2,3]}\n{\"tokens\":[300]}\n");
  CHECK(read_text_jsonl(ss).docs == text.docs);

  std::istringstream bad("{\"tokens\":[1]}\n{\"tokens\":[]}\n");
  try {
    read_text_jsonl(bad);
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ParseError);
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::istringstream empty("");
  CHECK_THROWS_AS(read_text_jsonl(empty), Error);
}
