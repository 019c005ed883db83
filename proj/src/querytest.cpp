#include "palimpsest/querytest.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include <json.hpp>

#include "palimpsest/errors.hpp"
#include "palimpsest/parallel.hpp"

namespace palimpsest {

using json = nlohmann::json;

namespace {

void check_config(const QueryConfig& cfg) {
  if (cfg.seq_len < 2) throw Error(ErrorCode::InvalidArgument, "seq_len must be >= 2");
}

bool fits(const Document& doc, const QueryConfig& cfg) {
  return doc.size() >= cfg.start_pos + cfg.seq_len;
}

std::vector<double> steps_of(std::span<const LoglikRecord> records) {
  std::vector<double> steps;
  steps.reserve(records.size());
  for (const auto& r : records) steps.push_back(r.step);
  return steps;
}

void require_count(std::size_t n) {
  if (n < 3) {
    throw Error(ErrorCode::TooFewExamples, "need at least 3 scorable examples, have " + std::to_string(n));
  }
}

}  // namespace

double sequence_nll(const LanguageModel& m, std::span<const TokenId> doc, const QueryConfig& cfg) {
  check_config(cfg);
  if (doc.size() < cfg.start_pos + cfg.seq_len) {
    throw Error(ErrorCode::WindowOutOfRange,
                "window [" + std::to_string(cfg.start_pos) + ", " +
                    std::to_string(cfg.start_pos + cfg.seq_len) + ") exceeds document of length " +
                    std::to_string(doc.size()));
  }
  auto window = doc.subspan(cfg.start_pos, cfg.seq_len);
  double total = 0.0;
  for (std::size_t i = 1; i < window.size(); ++i) total -= m.token_log_prob(window.first(i), window[i]);
  return total / static_cast<double>(cfg.seq_len - 1);
}

Transcript select_examples(const Transcript& t, const QueryConfig& cfg) {
  if (!cfg.epoch) return t;
  return filter_epoch(t, cfg.epoch->epochs, cfg.epoch->label);
}

RecordSet collect_records(const Transcript& t, const LanguageModel& subject,
                          const LanguageModel* ref, const QueryConfig& cfg, unsigned threads) {
  check_config(cfg);
  const Transcript sel = select_examples(t, cfg);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < sel.size(); ++i) {
    if (fits(sel.doc(i), cfg)) idx.push_back(i);
  }
  RecordSet out;
  out.skipped = sel.size() - idx.size();
  out.records.resize(idx.size());
  parallel_for(idx.size(), threads, [&](std::size_t k) {
    const auto& doc = sel.doc(idx[k]);
    auto& rec = out.records[k];
    rec.step = sel.step(idx[k]);
    rec.ll_subject = -sequence_nll(subject, doc, cfg);
    if (ref) rec.ll_ref = -sequence_nll(*ref, doc, cfg);
  });
  return out;
}

QueryTestResult phi_query(const Transcript& t, const LanguageModel& m, const QueryConfig& cfg,
                          unsigned threads) {
  auto set = collect_records(t, m, nullptr, cfg, threads);
  require_count(set.records.size());
  return {phi_query(set.records), set.records.size(), set.skipped};
}

SpearmanResult phi_query(std::span<const LoglikRecord> records) {
  require_count(records.size());
  std::vector<double> scores;
  scores.reserve(records.size());
  for (const auto& r : records) scores.push_back(r.ll_subject);
  return spearman(ScoreSeries(std::move(scores), steps_of(records)));
}

SpearmanResult phi_query_ref(std::span<const LoglikRecord> records) {
  require_count(records.size());
  std::vector<double> scores;
  scores.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i].ll_ref) {
      throw Error(ErrorCode::MissingReference, "record " + std::to_string(i) + " has no ll_ref");
    }
    scores.push_back(records[i].ll_subject - *records[i].ll_ref);
  }
  return spearman(ScoreSeries(std::move(scores), steps_of(records)));
}

SpearmanResult phi_query_regression(std::span<const LoglikRecord> records) {
  require_count(records.size());
  std::vector<double> y;
  std::vector<std::vector<double>> X;
  y.reserve(records.size());
  X.reserve(records.size());
  std::optional<std::size_t> width;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    std::vector<double> row;
    if (r.ll_ref) row.push_back(*r.ll_ref);
    if (r.features) row.insert(row.end(), r.features->begin(), r.features->end());
    if (width && *width != row.size()) {
      throw Error(ErrorCode::InvalidArgument,
                  "record " + std::to_string(i) + " has a different regressor count");
    }
    width = row.size();
    y.push_back(r.ll_subject);
    X.push_back(std::move(row));
  }
  auto resid = residualize(y, X);
  return spearman(ScoreSeries(std::move(resid), steps_of(records)));
}

double estimate_token_prob(const LanguageModel& m, std::span<const TokenId> prefix,
                           TokenId target, std::size_t n_samples, RandomSource& r) {
  if (n_samples == 0) throw Error(ErrorCode::InvalidArgument, "n_samples must be >= 1");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    if (m.sample_next(prefix, r) == target) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n_samples);
}

QueryTestResult phi_query_sampled(const Transcript& t, const LanguageModel& m,
                                  const QueryConfig& cfg, std::size_t n_samples,
                                  const LanguageModel* ref, const RandomSource& r,
                                  unsigned threads, EstimatePositions positions) {
  check_config(cfg);
  if (n_samples == 0) throw Error(ErrorCode::InvalidArgument, "n_samples must be >= 1");
  const Transcript sel = select_examples(t, cfg);
  const double floor_p = 1.0 / (2.0 * static_cast<double>(n_samples));

  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < sel.size(); ++i) {
    if (fits(sel.doc(i), cfg)) idx.push_back(i);
  }
  require_count(idx.size());

  std::vector<LoglikRecord> records(idx.size());
  parallel_for(idx.size(), threads, [&](std::size_t k) {
    auto window = std::span<const TokenId>(sel.doc(idx[k])).subspan(cfg.start_pos, cfg.seq_len);
    RandomSource stream = r.substream(idx[k]);
    const std::size_t first = positions == EstimatePositions::Last ? window.size() - 1 : 1;
    double est = 0.0;
    double exact_ref = 0.0;
    for (std::size_t i = first; i < window.size(); ++i) {
      const double p = estimate_token_prob(m, window.first(i), window[i], n_samples, stream);
      est += std::log(p > 0.0 ? p : floor_p);
      if (ref) exact_ref += ref->token_log_prob(window.first(i), window[i]);
    }
    const double count = static_cast<double>(window.size() - first);
    records[k].step = sel.step(idx[k]);
    records[k].ll_subject = est / count;
    if (ref) records[k].ll_ref = exact_ref / count;
  });
  const auto stats = ref ? phi_query_ref(records) : phi_query(records);
  return {stats, records.size(), sel.size() - idx.size()};
}

void write_loglik_jsonl(std::ostream& out, std::span<const LoglikRecord> records) {
  for (const auto& r : records) {
    json obj{{"step", r.step}, {"ll_subject", r.ll_subject}};
    obj["ll_ref"] = r.ll_ref ? json(*r.ll_ref) : json(nullptr);
    obj["features"] = r.features ? json(*r.features) : json(nullptr);
    out << obj.dump() << '\n';
  }
}

namespace {

[[noreturn]] void parse_fail(std::size_t line, const std::string& msg) {
  throw Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": " + msg);
}

double finite_number(const json& v, std::size_t line, const char* field) {
  if (!v.is_number()) parse_fail(line, std::string(field) + " must be a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) parse_fail(line, std::string(field) + " must be finite");
  return x;
}

}  // namespace

std::vector<LoglikRecord> read_loglik_jsonl(std::istream& in) {
  std::vector<LoglikRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      parse_fail(line_no, e.what());
    }
    if (!obj.is_object()) parse_fail(line_no, "expected a JSON object");
    if (!obj.contains("step") || !obj.contains("ll_subject")) {
      parse_fail(line_no, "missing \"step\" or \"ll_subject\"");
    }
    LoglikRecord r;
    const auto& step = obj.at("step");
    if (!step.is_number_integer() || step.get<std::int64_t>() < 1 || step.get<std::int64_t>() > UINT32_MAX) {
      parse_fail(line_no, "step must be a positive integer");
    }
    r.step = static_cast<Step>(step.get<std::int64_t>());
    r.ll_subject = finite_number(obj.at("ll_subject"), line_no, "ll_subject");
    if (obj.contains("ll_ref") && !obj.at("ll_ref").is_null()) {
      r.ll_ref = finite_number(obj.at("ll_ref"), line_no, "ll_ref");
    }
    if (obj.contains("features") && !obj.at("features").is_null()) {
      const auto& f = obj.at("features");
      if (!f.is_array()) parse_fail(line_no, "features must be an array or null");
      std::vector<double> feats;
      for (const auto& v : f) feats.push_back(finite_number(v, line_no, "features"));
      r.features = std::move(feats);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<LoglikRecord> read_loglik_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return read_loglik_jsonl(in);
}

std::vector<LoglikRecord> attach_reference(std::vector<LoglikRecord> subject,
                                           std::span<const LoglikRecord> reference) {
  if (subject.size() != reference.size()) {
    throw Error(ErrorCode::MisalignedRecords,
                "subject has " + std::to_string(subject.size()) + " records, reference has " +
                    std::to_string(reference.size()));
  }
  for (std::size_t i = 0; i < subject.size(); ++i) {
    if (subject[i].step != reference[i].step) {
      throw Error(ErrorCode::MisalignedRecords,
                  "record " + std::to_string(i) + ": step " + std::to_string(subject[i].step) +
                      " vs " + std::to_string(reference[i].step));
    }
    subject[i].ll_ref = reference[i].ll_subject;
  }
  return subject;
}

}  // namespace palimpsest
