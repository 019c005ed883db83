#pragma once

// Synthetic experiments: generate a corpus, let Alice train on a shuffled
// transcript, derive Bob according to a scenario, run the tests and collect
// p-values over independent trials.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "palimpsest/core.hpp"
#include "palimpsest/ngramtest.hpp"
#include "palimpsest/querytest.hpp"
#include "palimpsest/shuffletest.hpp"
#include "palimpsest/toylm.hpp"

namespace palimpsest {

struct CorpusConfig {
  std::size_t n_docs = 1000;
  std::size_t min_len = 48;
  std::size_t max_len = 96;
  std::uint32_t vocab = kByteVocab;
  std::size_t templates = 16;  // template diversity
  std::size_t min_branch = 2;
  std::size_t max_branch = 32;
  double noise = 0.05;  // probability of a uniformly random token
};

// A mixture of first-order Markov templates. Each template gives every token
// a successor list of random size in [min_branch, max_branch] with Zipf
// weights.
class Language {
 public:
  Language(const CorpusConfig& cfg, RandomSource r);

  const CorpusConfig& config() const noexcept { return cfg_; }
  Document sample_doc(std::size_t len, RandomSource& r) const;

 private:
  struct Row {
    std::vector<TokenId> next;
    std::vector<double> cumulative;
  };

  CorpusConfig cfg_;
  std::vector<std::vector<Row>> templates_;  // [template][token]
};

// Documents from `lang`; document i draws from r.substream(i).
std::vector<Document> generate_corpus(const Language& lang, std::size_t n_docs, RandomSource r);
// Builds the language from r.substream(0) and the documents from
// r.substream(1).
std::vector<Document> generate_corpus(const CorpusConfig& cfg, RandomSource r);

// Distinct n-grams over total n-gram occurrences.
double distinct_ngram_rate(std::span<const Document> docs, std::size_t n);

enum class ScenarioKind { Copy, Finetune, IndependentReshuffle, IndependentCorpus };

enum class TestId {
  Query,
  QueryRef,
  QueryRegression,
  QuerySampled,
  ObsPart,
  ObsPartLikelihood,
  ObsShuff,
  ObsShuffFinetune,
  ObsShuffExact,
};

std::string to_string(ScenarioKind kind);
std::string to_string(TestId id);
TestId parse_test_id(const std::string& name);
ScenarioKind parse_scenario_kind(const std::string& name);
// Query tests take n as a number of queried examples; observational tests
// take it as a number of text tokens.
bool is_query_test(TestId id);

struct TextGenConfig {
  std::size_t prefix_len = 16;
  std::size_t continuation_len = 128;
  double temperature = 1.0;
};

struct HarnessConfig {
  CorpusConfig corpus;
  std::size_t batch = 1;  // documents per training step
  ToyLMConfig model;      // Alice's, Bob's and the reference model's settings
  TextGenConfig text;

  QueryConfig query;
  std::size_t n_samples = 16;
  bool regression_features = true;

  std::uint32_t partitions = 10;
  unsigned n_max = 8;
  double index_rate = 1.0;
  unsigned min_order = 2;
  unsigned lm_order = 3;
  double lm_smoothing = 0.1;

  ShuffleTestConfig shuffle;
  std::size_t exact_m = 19;
};

struct Scenario {
  ScenarioKind kind = ScenarioKind::Copy;
  std::size_t finetune_tokens = 0;  // Finetune only
  HarnessConfig cfg;

  std::string name() const;
};

struct SweepCell {
  std::string scenario;
  std::string test;
  std::size_t n = 0;
  std::vector<double> p_values;  // one per trial, trial order
  std::size_t degenerate = 0;    // trials whose statistic was undefined (p = 1)
  double median = 1.0;
  double q25 = 1.0;
  double q75 = 1.0;
};

struct SweepReport {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::size_t trials = 0;
  std::vector<SweepCell> cells;

  const SweepCell& cell(const std::string& scenario, const std::string& test, std::size_t n) const;
};

// Trial i draws everything from r.substream(i). Sizes apply to every test;
// trials run on up to `threads` workers with identical results.
SweepReport run_scenario(const Scenario& sc, std::span<const TestId> tests,
                         std::span<const std::size_t> sizes, std::size_t trials,
                         const RandomSource& r, unsigned threads = 1);

// Appends the cells of `more` (same seed and trial count) to `into`.
void merge_reports(SweepReport& into, const SweepReport& more);

void write_report_json(std::ostream& out, const SweepReport& rep);
// scenario,test,n,trial,p
void write_report_csv(std::ostream& out, const SweepReport& rep);

struct EcdfPoint {
  double x;
  double fraction;  // share of p-values <= x
};

struct CalibrationReport {
  double ks_stat = 0.0;
  double ks_p_value = 1.0;
  bool uniform_pass = false;  // KS at alpha = 0.01
  std::vector<EcdfPoint> ecdf;  // x = 0.01, 0.02, ..., 1.00
};

CalibrationReport calibration_report(std::span<const double> p_values);

}  // namespace palimpsest
