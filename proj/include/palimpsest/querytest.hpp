#pragma once

// Query-setting tests: correlate the subject model's per-example likelihoods
// with the training step at which each example was seen.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "palimpsest/core.hpp"
#include "palimpsest/language_model.hpp"
#include "palimpsest/stats.hpp"

namespace palimpsest {

struct EpochSelection {
  EpochMap epochs;
  std::size_t label = 1;
};

struct QueryConfig {
  std::size_t seq_len = 32;  // L, tokens per scored window
  std::size_t start_pos = 0;
  std::optional<EpochSelection> epoch;
};

// Which window positions phi_query_sampled estimates by sampling.
enum class EstimatePositions {
  Last,  // one next-token probability per example: the window's last token
  All,   // every predicted position; the estimate of -nll
};

struct LoglikRecord {
  Step step = 0;
  double ll_subject = 0.0;
  std::optional<double> ll_ref;
  std::optional<std::vector<double>> features;
};

struct RecordSet {
  std::vector<LoglikRecord> records;
  std::size_t skipped = 0;  // documents shorter than start_pos + seq_len
};

struct QueryTestResult {
  SpearmanResult stats;
  std::size_t scored = 0;
  std::size_t skipped = 0;
};

// Mean negative log-probability of the L - 1 predicted tokens of the window
// [start_pos, start_pos + L). Conditioning starts at the window.
double sequence_nll(const LanguageModel& m, std::span<const TokenId> doc, const QueryConfig& cfg);

// Entries the config applies to: the whole transcript or one epoch.
Transcript select_examples(const Transcript& t, const QueryConfig& cfg);

// ll_subject = -nll under `subject`; ll_ref likewise when `ref` is given.
RecordSet collect_records(const Transcript& t, const LanguageModel& subject,
                          const LanguageModel* ref, const QueryConfig& cfg, unsigned threads = 1);

QueryTestResult phi_query(const Transcript& t, const LanguageModel& m, const QueryConfig& cfg,
                          unsigned threads = 1);
// Spearman of ll_subject against step.
SpearmanResult phi_query(std::span<const LoglikRecord> records);
// Spearman of ll_subject - ll_ref against step.
SpearmanResult phi_query_ref(std::span<const LoglikRecord> records);
// Residualizes ll_subject on [ll_ref if present, features], then correlates
// the residuals with step.
SpearmanResult phi_query_regression(std::span<const LoglikRecord> records);

// Fraction of n_samples next-token draws equal to `target`.
double estimate_token_prob(const LanguageModel& m, std::span<const TokenId> prefix,
                           TokenId target, std::size_t n_samples, RandomSource& r);

// phi_query (or phi_query_ref when `ref` is given) on log-probabilities
// estimated by sampling the subject. Zero estimates are floored at
// 1 / (2 n_samples). Example i samples from r.substream(i); the reference
// model is scored exactly.
QueryTestResult phi_query_sampled(const Transcript& t, const LanguageModel& m,
                                  const QueryConfig& cfg, std::size_t n_samples,
                                  const LanguageModel* ref, const RandomSource& r,
                                  unsigned threads = 1,
                                  EstimatePositions positions = EstimatePositions::Last);

// JSONL, one {"step", "ll_subject", "ll_ref", "features"} object per line.
void write_loglik_jsonl(std::ostream& out, std::span<const LoglikRecord> records);
std::vector<LoglikRecord> read_loglik_jsonl(std::istream& in);
std::vector<LoglikRecord> read_loglik_jsonl(const std::string& path);

// Fills ll_ref of `subject` from the ll_subject of a separately scored
// reference file. Records pair up by position; steps must agree.
std::vector<LoglikRecord> attach_reference(std::vector<LoglikRecord> subject,
                                           std::span<const LoglikRecord> reference);

}  // namespace palimpsest
