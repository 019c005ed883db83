#include "palimpsest/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "palimpsest/binary_io.hpp"
#include "palimpsest/core.hpp"
#include "palimpsest/errors.hpp"
#include "palimpsest/harness.hpp"
#include "palimpsest/ngramtest.hpp"
#include "palimpsest/querytest.hpp"
#include "palimpsest/shuffletest.hpp"
#include "palimpsest/toylm.hpp"

namespace palimpsest::cli {

double estimate_query_cost(const CostModel& c) {
  if (!(c.input_rate >= 0.0) || !(c.output_rate >= 0.0) || !(c.n_sequences >= 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "rates and sequence count must be non-negative");
  }
  if (c.seq_len < 2) throw Error(ErrorCode::InvalidArgument, "seq_len must be >= 2");
  const double steps = static_cast<double>(c.seq_len - 1);
  const double prefix_tokens = steps * (steps + 1.0) / 2.0;
  return c.input_rate * c.n_sequences * prefix_tokens + c.output_rate * c.n_sequences * steps;
}

namespace {

using json = nlohmann::ordered_json;

struct Input {
  std::string path;
  std::vector<std::uint8_t> bytes;
  std::string sha256;

  std::string text() const { return std::string(bytes.begin(), bytes.end()); }
};

Input load_input(const std::string& path) {
  Input in;
  in.path = path;
  in.bytes = read_file_bytes(path);
  in.sha256 = sha256_hex(in.bytes);
  return in;
}

Transcript parse_transcript(const Input& in) {
  std::istringstream s(in.text());
  return read_transcript_jsonl(s);
}

TextBundle parse_text(const Input& in) {
  std::istringstream s(in.text());
  return read_text_jsonl(s);
}

std::vector<LoglikRecord> parse_loglik(const Input& in) {
  std::istringstream s(in.text());
  return read_loglik_jsonl(s);
}

// Writes through a temporary file so a failed run never leaves a partial
// output behind.
void write_output(const std::string& path, std::string_view content, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << content;
    return;
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::IoError, "cannot write " + path);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw Error(ErrorCode::IoError, "write failed for " + path);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorCode::IoError, "cannot move output into " + path);
  }
}

void write_output(const std::string& path, const std::vector<std::uint8_t>& bytes, std::ostream& out) {
  write_output(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), out);
}

json log10_or_null(double p) {
  if (p > 0.0) return std::log10(p);
  return nullptr;
}

void put_p(json& obj, const std::string& key, double p) {
  obj[key] = p;
  obj["log10_" + key] = log10_or_null(p);
}

json spearman_json(const SpearmanResult& s) {
  json j;
  j["rho"] = s.rho;
  j["t_stat"] = s.t_stat;
  j["n"] = s.n;
  put_p(j, "p_value_one_sided", s.p_value_one_sided);
  put_p(j, "p_value_two_sided", s.p_value_two_sided);
  return j;
}

json permutation_json(const PermutationResult& p) {
  json j;
  j["observed"] = p.observed;
  j["m"] = p.m;
  j["exceed_count"] = p.exceed_count;
  j["tie_count"] = p.tie_count;
  put_p(j, "p_hat", p.p_hat);
  return j;
}

bool is_degenerate(const Error& e) {
  return e.code() == ErrorCode::DegenerateRanks || e.code() == ErrorCode::DegenerateNullSpread ||
         e.code() == ErrorCode::DegenerateProfile;
}

json degenerate_json(const Error& e) {
  json j;
  j["degenerate"] = true;
  j["reason"] = e.what();
  put_p(j, "p_value_one_sided", 1.0);
  return j;
}

class Report {
 public:
  Report(std::string command, std::string method) {
    doc_["tool"] = "palimpsest";
    doc_["command"] = std::move(command);
    doc_["method"] = std::move(method);
    doc_["config"] = json::object();
    doc_["inputs"] = json::object();
  }

  json& config() { return doc_["config"]; }

  const Input& add_input(const std::string& role, const std::string& path) {
    inputs_.push_back(load_input(path));
    doc_["inputs"][role] = {{"path", path}, {"sha256", inputs_.back().sha256}};
    return inputs_.back();
  }

  void set_result(json r) { doc_["result"] = std::move(r); }

  std::string dump() const { return doc_.dump(2) + "\n"; }

 private:
  json doc_;
  std::deque<Input> inputs_;
};

struct Common {
  std::string out = "-";
  unsigned threads = 1;
  bool timing = false;
};

void add_common(CLI::App* app, Common& c, bool with_threads = true) {
  app->add_option("--out", c.out, "Output path ('-' for stdout)");
  if (with_threads) app->add_option("--threads", c.threads, "Worker threads (results do not depend on it)")->check(CLI::Range(1u, 1024u));
  app->add_flag("--timing", c.timing, "Record wall time in the report");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

// ---- artifact commands ----------------------------------------------------

struct IngestOpts {
  std::string input;
  std::size_t batch = 1;
  std::string split = "lines";
  bool shuffle = false;
  std::optional<std::uint64_t> seed;
};

void cmd_ingest(const IngestOpts& o, const Common& c, std::ostream& out, std::ostream& err) {
  const Input in = load_input(o.input);
  const std::string text = in.text();
  std::vector<Document> docs;
  if (o.split == "lines") {
    std::istringstream s(text);
    std::string line;
    while (std::getline(s, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) docs.push_back(tokenize_bytes(line));
    }
  } else {
    // Paragraphs are separated by blank lines.
    std::istringstream s(text);
    std::string line, para;
    auto flush = [&] {
      if (!para.empty()) docs.push_back(tokenize_bytes(para));
      para.clear();
    };
    while (std::getline(s, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) {
        flush();
      } else {
        if (!para.empty()) para += '\n';
        para += line;
      }
    }
    flush();
  }
  if (docs.empty()) throw Error(ErrorCode::EmptyTranscript, o.input + " holds no documents");
  Transcript t = transcript_in_order(std::move(docs), o.batch, kByteVocab);
  if (o.shuffle) {
    if (!o.seed) throw Error(ErrorCode::InvalidArgument, "--shuffle needs --seed");
    t = shuffle_transcript(t, RandomSource(*o.seed, 0));
  }
  std::ostringstream s;
  write_transcript_jsonl(s, t);
  write_output(c.out, s.str(), out);
  err << "ingest: " << t.size() << " documents over " << t.num_steps() << " steps\n";
}

struct SubsampleOpts {
  std::string transcript;
  std::size_t k = 0;
  std::uint64_t seed = 0;
};

void cmd_subsample(const SubsampleOpts& o, const Common& c, std::ostream& out, std::ostream& err) {
  const Transcript t = parse_transcript(load_input(o.transcript));
  const Transcript sub = subsample_transcript(t, o.k, RandomSource(o.seed, 0));
  std::ostringstream s;
  write_transcript_jsonl(s, sub);
  write_output(c.out, s.str(), out);
  err << "subsample: kept " << sub.size() << " of " << t.size() << " entries\n";
}

struct TrainOpts {
  std::string transcript;
  std::optional<std::string> from;
  ToyLMConfig model;
  Step first_step = 1;
  std::optional<Step> last_step;
};

void cmd_train_toy(const TrainOpts& o, const Common& c, std::ostream& out, std::ostream& err) {
  const Transcript t = parse_transcript(load_input(o.transcript));
  ToyLM m = [&] {
    if (o.from) return ToyLM::deserialize(load_input(*o.from).bytes);
    ToyLMConfig cfg = o.model;
    cfg.vocab = t.vocab();
    return ToyLM(cfg);
  }();
  if (m.vocab() != t.vocab()) throw Error(ErrorCode::InvalidArgument, "model and transcript vocabularies differ");
  const Step last = o.last_step.value_or(t.num_steps());
  if (o.first_step < 1 || o.first_step > last || last > t.num_steps()) {
    throw Error(ErrorCode::StepOutOfRange, "step range must satisfy 1 <= first <= last <= num_steps");
  }
  // Empty steps inside the window still tick the clock.
  std::vector<TranscriptEntry> kept;
  for (const auto& e : t.entries()) {
    if (e.step >= o.first_step && e.step <= last) kept.push_back({e.doc, e.step - o.first_step + 1});
  }
  train_on_transcript(m, t.with_entries(std::move(kept), last - o.first_step + 1));
  const auto bytes = m.serialize();
  write_output(c.out, bytes, out);
  err << "train-toy: steps " << o.first_step << ".." << last << ", checkpoint sha256 " << sha256_hex(bytes)
      << "\n";
}

struct IndexOpts {
  std::string transcript;
  std::uint32_t k = 0;
  unsigned n_max = 8;
  double rate = 1.0;
  std::uint64_t seed = 0;
};

void cmd_ngram_index(const IndexOpts& o, const Common& c, std::ostream& out, std::ostream& err) {
  const Transcript t = parse_transcript(load_input(o.transcript));
  const NGramIndex idx = build_index(t, o.k, o.n_max, o.rate, RandomSource(o.seed, 0), c.threads);
  write_output(c.out, idx.serialize(), out);
  err << "ngram-index: " << idx.size() << " n-grams, total mass " << idx.total_mass() << "\n";
}

// ---- test commands --------------------------------------------------------

struct QueryOpts {
  std::optional<std::string> transcript, model, ref_model, loglik, ref_loglik, loglik_out;
  std::string method = "query";
  std::size_t seq_len = 32;
  std::size_t start_pos = 0;
  std::size_t epochs = 0;
  std::size_t epoch = 1;
  // sampled variant
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  std::string positions = "last";
};

QueryConfig query_config(const QueryOpts& o, const Transcript* t) {
  QueryConfig q;
  q.seq_len = o.seq_len;
  q.start_pos = o.start_pos;
  if (o.epochs > 0) {
    if (!t) throw Error(ErrorCode::InvalidArgument, "epoch selection needs --transcript");
    q.epoch = EpochSelection{EpochMap::uniform(t->num_steps(), o.epochs), o.epoch};
  }
  return q;
}

void echo_query(Report& rep, const QueryOpts& o) {
  auto& cfg = rep.config();
  cfg["seq_len"] = o.seq_len;
  cfg["start_pos"] = o.start_pos;
  if (o.epochs > 0) {
    cfg["epochs"] = o.epochs;
    cfg["epoch"] = o.epoch;
  }
}

std::string cmd_query_test(const QueryOpts& o, const Common& c, std::ostream& out) {
  static const std::map<std::string, std::string> kMethods{
      {"query", "phi_query"}, {"ref", "phi_query_ref"}, {"regression", "phi_query_regression"}};
  const auto method = kMethods.find(o.method);
  if (method == kMethods.end()) throw Error(ErrorCode::InvalidArgument, "unknown --method " + o.method);
  Report rep("query-test", method->second);
  echo_query(rep, o);
  rep.config()["method"] = o.method;

  std::vector<LoglikRecord> records;
  std::size_t skipped = 0;
  if (o.loglik) {
    if (o.transcript || o.model) throw Error(ErrorCode::InvalidArgument, "use either --loglik or --transcript/--model");
    if (o.epochs > 0) throw Error(ErrorCode::InvalidArgument, "epoch selection needs --transcript");
    records = parse_loglik(rep.add_input("loglik", *o.loglik));
    if (o.ref_loglik) records = attach_reference(std::move(records), parse_loglik(rep.add_input("ref_loglik", *o.ref_loglik)));
  } else {
    if (!o.transcript || !o.model) throw Error(ErrorCode::InvalidArgument, "need --loglik or both --transcript and --model");
    const Transcript t = parse_transcript(rep.add_input("transcript", *o.transcript));
    const ToyLM model = ToyLM::deserialize(rep.add_input("model", *o.model).bytes);
    std::optional<ToyLM> ref;
    if (o.ref_model) ref = ToyLM::deserialize(rep.add_input("ref_model", *o.ref_model).bytes);
    auto set = collect_records(t, model, ref ? &*ref : nullptr, query_config(o, &t), c.threads);
    records = std::move(set.records);
    skipped = set.skipped;
    if (o.loglik_out) {
      std::ostringstream s;
      write_loglik_jsonl(s, records);
      write_output(*o.loglik_out, s.str(), out);
    }
  }

  json res;
  res["scored"] = records.size();
  res["skipped"] = skipped;
  try {
    SpearmanResult s;
    if (o.method == "query") {
      s = phi_query(records);
    } else if (o.method == "ref") {
      s = phi_query_ref(records);
    } else {
      s = phi_query_regression(records);
    }
    res["degenerate"] = false;
    res.update(spearman_json(s));
  } catch (const Error& e) {
    if (!is_degenerate(e)) throw;
    res.update(degenerate_json(e));
  }
  rep.set_result(std::move(res));
  return rep.dump();
}

std::string cmd_query_test_sampled(const QueryOpts& o, const Common& c) {
  Report rep("query-test-sampled", o.ref_model ? "phi_query_sampled_ref" : "phi_query_sampled");
  echo_query(rep, o);
  auto& cfg = rep.config();
  cfg["samples"] = o.samples;
  cfg["positions"] = o.positions;
  cfg["seed"] = o.seed;
  EstimatePositions pos;
  if (o.positions == "last") {
    pos = EstimatePositions::Last;
  } else if (o.positions == "all") {
    pos = EstimatePositions::All;
  } else {
    throw Error(ErrorCode::InvalidArgument, "--positions must be 'last' or 'all'");
  }
  if (!o.transcript || !o.model) throw Error(ErrorCode::InvalidArgument, "need --transcript and --model");
  const Transcript t = parse_transcript(rep.add_input("transcript", *o.transcript));
  const ToyLM model = ToyLM::deserialize(rep.add_input("model", *o.model).bytes);
  std::optional<ToyLM> ref;
  if (o.ref_model) ref = ToyLM::deserialize(rep.add_input("ref_model", *o.ref_model).bytes);

  json res;
  try {
    const auto r = phi_query_sampled(t, model, query_config(o, &t), o.samples, ref ? &*ref : nullptr,
                                     RandomSource(o.seed, 0), c.threads, pos);
    res["scored"] = r.scored;
    res["skipped"] = r.skipped;
    res["degenerate"] = false;
    res.update(spearman_json(r.stats));
  } catch (const Error& e) {
    if (!is_degenerate(e)) throw;
    res.update(degenerate_json(e));
  }
  rep.set_result(std::move(res));
  return rep.dump();
}

struct NgramTestOpts {
  std::string text;
  std::optional<std::string> index, transcript;
  bool likelihood = false;
  std::uint32_t k = 0;
  unsigned min_order = 2;
  unsigned lm_order = 3;
  double smoothing = 0.1;
  std::size_t m = 0;
  std::optional<std::uint64_t> seed;
};

std::string cmd_ngram_test(const NgramTestOpts& o, const Common& c) {
  Report rep("ngram-test", o.likelihood ? "phi_obs_part_likelihood" : "phi_obs_part");
  auto& cfg = rep.config();
  PartitionTestResult res;
  if (o.likelihood) {
    if (!o.transcript || o.k == 0) throw Error(ErrorCode::InvalidArgument, "--likelihood needs --transcript and --k");
    cfg["k"] = o.k;
    cfg["lm_order"] = o.lm_order;
    cfg["smoothing"] = o.smoothing;
    const Transcript t = parse_transcript(rep.add_input("transcript", *o.transcript));
    const TextBundle text = parse_text(rep.add_input("text", o.text));
    res = phi_obs_part_likelihood(t, o.k, text, o.lm_order, o.smoothing, c.threads);
  } else {
    if (!o.index) throw Error(ErrorCode::InvalidArgument, "need --index (or --likelihood)");
    cfg["min_order"] = o.min_order;
    const NGramIndex idx = NGramIndex::deserialize(rep.add_input("index", *o.index).bytes);
    const TextBundle text = parse_text(rep.add_input("text", o.text));
    cfg["index"] = {{"k", idx.k()}, {"n_max", idx.n_max()}, {"subsample_rate", idx.subsample_rate()},
                    {"seed", idx.seed()}};
    MatchOptions opt;
    opt.min_order = o.min_order;
    opt.threads = c.threads;
    res = phi_obs_part(idx, text, opt);
  }
  json out;
  out["profile"] = res.profile;
  out["degenerate"] = res.degenerate;
  if (res.stats) {
    out.update(spearman_json(*res.stats));
  } else {
    put_p(out, "p_value_one_sided", res.p_value);
  }
  if (o.m > 0) {
    if (!o.seed) throw Error(ErrorCode::InvalidArgument, "--m needs --seed");
    cfg["m"] = o.m;
    cfg["seed"] = *o.seed;
    out["permutation"] = permutation_json(profile_permutation_test(res.profile, o.m, RandomSource(*o.seed, 0)));
  }
  rep.set_result(std::move(out));
  return rep.dump();
}

struct ShuffleOpts {
  std::string transcript, checkpoint, text;
  ShuffleTestConfig cfg;
  std::uint64_t seed = 0;
  std::size_t m = 0;
};

json zscore_json(const ZScoreResult& z) {
  json j;
  j["degenerate"] = false;
  j["z"] = z.z;
  j["k"] = z.k;
  j["chi_observed"] = z.chi_observed;
  j["chi_null_mean"] = z.chi_null_mean;
  j["chi_null_sd"] = z.chi_null_sd;
  j["chi_null"] = z.chi_null;
  put_p(j, "p_value_one_sided", z.p_approx);
  return j;
}

std::string cmd_shuffle_test(const ShuffleOpts& o, const Common& c) {
  Report rep("shuffle-test", o.m > 0 ? "phi_obs_shuff_exact" : "phi_obs_shuff");
  auto& cfg = rep.config();
  cfg["k"] = o.cfg.k;
  cfg["retrain_fraction"] = o.cfg.retrain_fraction;
  cfg["finetune_on_text"] = o.cfg.finetune_on_text;
  if (o.cfg.finetune_on_text) cfg["finetune"] = {{"epochs", o.cfg.finetune.epochs}, {"weight", o.cfg.finetune.weight}};
  cfg["seed"] = o.seed;
  if (o.m > 0) cfg["m"] = o.m;

  const Transcript t = parse_transcript(rep.add_input("transcript", o.transcript));
  const Checkpoint from = Checkpoint::from_blob(rep.add_input("checkpoint", o.checkpoint).bytes);
  const TextBundle text = parse_text(rep.add_input("text", o.text));
  const ToyTrainer trainer(ToyLM::deserialize(from.blob).config());
  if (trainer.config().vocab != t.vocab()) throw Error(ErrorCode::InvalidArgument, "checkpoint and transcript vocabularies differ");
  ShuffleTestConfig sc = o.cfg;
  sc.threads = c.threads;
  cfg["tail_steps"] = tail_length(t.num_steps(), sc.retrain_fraction);

  json res;
  res["checkpoint_hash"] = from.hash;
  try {
    res.update(zscore_json(phi_obs_shuff(t, from, trainer, text, sc, RandomSource(o.seed, 0))));
  } catch (const Error& e) {
    if (!is_degenerate(e)) throw;
    res.update(degenerate_json(e));
  }
  if (o.m > 0) {
    res["exact"] = permutation_json(phi_obs_shuff_exact(t, from, trainer, text, sc, o.m, RandomSource(o.seed, 1)));
  }
  rep.set_result(std::move(res));
  return rep.dump();
}

// ---- experiments ----------------------------------------------------------

struct SimulateOpts {
  std::string scenario = "copy";
  std::size_t finetune_tokens = 0;
  std::string tests = "query";
  std::vector<std::size_t> sizes;
  std::size_t trials = 10;
  std::uint64_t seed = 0;
  std::optional<std::string> csv;
  HarnessConfig h;
};

std::string cmd_simulate(const SimulateOpts& o, const Common& c, std::ostream& out) {
  Scenario sc;
  sc.kind = parse_scenario_kind(o.scenario);
  sc.finetune_tokens = o.finetune_tokens;
  sc.cfg = o.h;
  sc.cfg.model.vocab = sc.cfg.corpus.vocab;
  std::vector<TestId> tests;
  for (const auto& name : split_list(o.tests)) tests.push_back(parse_test_id(name));
  const SweepReport rep = run_scenario(sc, tests, o.sizes, o.trials, RandomSource(o.seed, 0), c.threads);

  std::ostringstream body;
  write_report_json(body, rep);
  json doc;
  doc["tool"] = "palimpsest";
  doc["command"] = "simulate";
  const auto& h = sc.cfg;
  doc["config"] = {
      {"scenario", o.scenario},
      {"finetune_tokens", o.finetune_tokens},
      {"tests", o.tests},
      {"sizes", o.sizes},
      {"trials", o.trials},
      {"seed", o.seed},
      {"corpus",
       {{"n_docs", h.corpus.n_docs}, {"min_len", h.corpus.min_len}, {"max_len", h.corpus.max_len},
        {"vocab", h.corpus.vocab}, {"templates", h.corpus.templates}, {"min_branch", h.corpus.min_branch},
        {"max_branch", h.corpus.max_branch}, {"noise", h.corpus.noise}}},
      {"batch", h.batch},
      {"model",
       {{"order", h.model.order}, {"decay", h.model.decay}, {"smoothing", h.model.smoothing},
        {"interpolation", h.model.interpolation}}},
      {"text",
       {{"prefix_len", h.text.prefix_len}, {"continuation_len", h.text.continuation_len},
        {"temperature", h.text.temperature}}},
      {"query", {{"seq_len", h.query.seq_len}, {"start_pos", h.query.start_pos}, {"samples", h.n_samples}}},
      {"partitions", h.partitions},
      {"n_max", h.n_max},
      {"index_rate", h.index_rate},
      {"min_order", h.min_order},
      {"shuffle", {{"k", h.shuffle.k}, {"retrain_fraction", h.shuffle.retrain_fraction}, {"exact_m", h.exact_m}}},
  };
  doc["report"] = json::parse(body.str());
  if (o.csv) {
    std::ostringstream s;
    write_report_csv(s, rep);
    write_output(*o.csv, s.str(), out);
  }
  return doc.dump(2) + "\n";
}

struct CalibrateOpts {
  std::optional<std::string> report, pvalues;
};

json calibration_json(const CalibrationReport& c) {
  json j;
  j["ks_stat"] = c.ks_stat;
  put_p(j, "ks_p_value", c.ks_p_value);
  j["uniform_pass"] = c.uniform_pass;
  json ecdf = json::array();
  for (const auto& pt : c.ecdf) ecdf.push_back({pt.x, pt.fraction});
  j["ecdf"] = std::move(ecdf);
  return j;
}

std::string cmd_calibrate(const CalibrateOpts& o) {
  Report rep("calibrate", "ks_uniform");
  json cells = json::array();
  if (o.report) {
    const Input& in = rep.add_input("report", *o.report);
    json doc;
    try {
      doc = json::parse(in.text());
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ParseError, *o.report + ": " + e.what());
    }
    const json& r = doc.contains("report") ? doc["report"] : doc;
    if (!r.contains("cells")) throw Error(ErrorCode::ParseError, *o.report + ": no 'cells' array");
    for (const auto& cell : r["cells"]) {
      const auto p = cell.at("p_values").get<std::vector<double>>();
      json j{{"scenario", cell.at("scenario")}, {"test", cell.at("test")}, {"n", cell.at("n")},
             {"trials", p.size()}};
      j.update(calibration_json(calibration_report(p)));
      cells.push_back(std::move(j));
    }
  } else if (o.pvalues) {
    std::istringstream s(rep.add_input("pvalues", *o.pvalues).text());
    std::vector<double> p;
    std::string tok;
    std::size_t count = 0;
    while (s >> tok) {
      ++count;
      try {
        std::size_t used = 0;
        p.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw Error(ErrorCode::ParseError, *o.pvalues + ": value " + std::to_string(count) + " is not a number");
      }
    }
    json j{{"trials", p.size()}};
    j.update(calibration_json(calibration_report(p)));
    cells.push_back(std::move(j));
  } else {
    throw Error(ErrorCode::InvalidArgument, "need --report or --pvalues");
  }
  rep.set_result({{"cells", std::move(cells)}});
  return rep.dump();
}

std::string cmd_cost(const CostModel& m) {
  Report rep("cost", "estimate_query_cost");
  auto& cfg = rep.config();
  cfg["input_rate"] = m.input_rate;
  cfg["output_rate"] = m.output_rate;
  cfg["n_sequences_millions"] = m.n_sequences;
  cfg["seq_len"] = m.seq_len;
  const double cost = estimate_query_cost(m);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "$%.2f", cost);
  rep.set_result({{"cost", cost}, {"formatted", buf}});
  return rep.dump();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Palimpsest: test whether a model or its text derives from a given training run"};
  app.require_subcommand(1);
  Common common;

  IngestOpts ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Byte-tokenize a text file into a transcript (JSONL)");
  c_ingest->add_option("--input", ingest.input, "Text file")->required();
  c_ingest->add_option("--batch", ingest.batch, "Documents per step")->check(CLI::PositiveNumber);
  c_ingest->add_option("--split", ingest.split, "Document boundaries")->check(CLI::IsMember({"lines", "paragraphs"}));
  c_ingest->add_flag("--shuffle", ingest.shuffle, "Assign steps by a seeded random permutation");
  c_ingest->add_option("--seed", ingest.seed, "Seed for --shuffle");
  add_common(c_ingest, common, false);

  SubsampleOpts subsample;
  auto* c_sub = app.add_subcommand("subsample", "Draw k entries without replacement");
  c_sub->add_option("--transcript", subsample.transcript)->required();
  c_sub->add_option("--k", subsample.k)->required();
  c_sub->add_option("--seed", subsample.seed)->required();
  add_common(c_sub, common, false);

  TrainOpts train;
  auto* c_train = app.add_subcommand("train-toy", "Train the toy language model on a transcript and save a snapshot");
  c_train->add_option("--transcript", train.transcript)->required();
  c_train->add_option("--from", train.from, "Resume from a snapshot (its hyperparameters are kept)");
  c_train->add_option("--order", train.model.order);
  c_train->add_option("--decay", train.model.decay);
  c_train->add_option("--smoothing", train.model.smoothing);
  c_train->add_option("--interpolation", train.model.interpolation);
  c_train->add_option("--first-step", train.first_step, "First step to train on");
  c_train->add_option("--last-step", train.last_step, "Last step to train on");
  add_common(c_train, common, false);

  QueryOpts query;
  auto* c_query = app.add_subcommand("query-test", "Correlate per-example log-likelihoods with training order");
  c_query->add_option("--transcript", query.transcript);
  c_query->add_option("--model", query.model, "Toy model snapshot to score");
  c_query->add_option("--ref-model", query.ref_model, "Reference model snapshot");
  c_query->add_option("--loglik", query.loglik, "Precomputed log-likelihood records (JSONL)");
  c_query->add_option("--ref-loglik", query.ref_loglik, "Reference records aligned with --loglik");
  c_query->add_option("--loglik-out", query.loglik_out, "Write the scored records here");
  c_query->add_option("--method", query.method)->check(CLI::IsMember({"query", "ref", "regression"}));
  c_query->add_option("--seq-len", query.seq_len);
  c_query->add_option("--start-pos", query.start_pos);
  c_query->add_option("--epochs", query.epochs, "Split the run into this many equal epochs");
  c_query->add_option("--epoch", query.epoch, "Query only this epoch (1-based)");
  add_common(c_query, common);

  QueryOpts sampled;
  auto* c_sampled = app.add_subcommand("query-test-sampled", "Query test from sampled next-token frequencies");
  c_sampled->add_option("--transcript", sampled.transcript)->required();
  c_sampled->add_option("--model", sampled.model)->required();
  c_sampled->add_option("--ref-model", sampled.ref_model);
  c_sampled->add_option("--samples", sampled.samples, "Samples per estimated token")->required()->check(CLI::PositiveNumber);
  c_sampled->add_option("--positions", sampled.positions)->check(CLI::IsMember({"last", "all"}));
  c_sampled->add_option("--seq-len", sampled.seq_len);
  c_sampled->add_option("--start-pos", sampled.start_pos);
  c_sampled->add_option("--epochs", sampled.epochs);
  c_sampled->add_option("--epoch", sampled.epoch);
  c_sampled->add_option("--seed", sampled.seed)->required();
  add_common(c_sampled, common);

  IndexOpts index;
  auto* c_index = app.add_subcommand("ngram-index", "Build a partitioned n-gram index");
  c_index->add_option("--transcript", index.transcript)->required();
  c_index->add_option("--k", index.k, "Number of partitions")->required();
  c_index->add_option("--n-max", index.n_max);
  c_index->add_option("--rate", index.rate, "Subsampling rate in (0, 1]");
  c_index->add_option("--seed", index.seed)->required();
  add_common(c_index, common);

  NgramTestOpts ngram;
  auto* c_ngram = app.add_subcommand("ngram-test", "Partition test on text attributed to the suspect model");
  c_ngram->add_option("--text", ngram.text, "Text bundle (JSONL)")->required();
  c_ngram->add_option("--index", ngram.index);
  c_ngram->add_flag("--likelihood", ngram.likelihood, "Use per-partition n-gram models instead of matching");
  c_ngram->add_option("--transcript", ngram.transcript);
  c_ngram->add_option("--k", ngram.k);
  c_ngram->add_option("--min-order", ngram.min_order);
  c_ngram->add_option("--lm-order", ngram.lm_order);
  c_ngram->add_option("--smoothing", ngram.smoothing);
  c_ngram->add_option("--m", ngram.m, "Also run a permutation test with m relabellings");
  c_ngram->add_option("--seed", ngram.seed);
  add_common(c_ngram, common);

  ShuffleOpts shuffle;
  auto* c_shuffle = app.add_subcommand("shuffle-test", "Retrain the tail in order and reshuffled, score the text");
  c_shuffle->add_option("--transcript", shuffle.transcript)->required();
  c_shuffle->add_option("--checkpoint", shuffle.checkpoint, "Toy model snapshot at the start of the tail")->required();
  c_shuffle->add_option("--text", shuffle.text)->required();
  c_shuffle->add_option("--k", shuffle.cfg.k, "Reshuffled models");
  c_shuffle->add_option("--fraction", shuffle.cfg.retrain_fraction, "Share of steps replayed");
  c_shuffle->add_flag("--finetune", shuffle.cfg.finetune_on_text, "Fine-tune every model on the text first");
  c_shuffle->add_option("--finetune-epochs", shuffle.cfg.finetune.epochs);
  c_shuffle->add_option("--finetune-weight", shuffle.cfg.finetune.weight);
  c_shuffle->add_option("--m", shuffle.m, "Also run the exact permutation variant with m relabellings");
  c_shuffle->add_option("--seed", shuffle.seed)->required();
  add_common(c_shuffle, common);

  SimulateOpts sim;
  auto* c_sim = app.add_subcommand("simulate", "Run synthetic trials of a scenario");
  c_sim->add_option("--scenario", sim.scenario)
      ->check(CLI::IsMember({"copy", "finetune", "independent_reshuffle", "independent_corpus"}));
  c_sim->add_option("--finetune-tokens", sim.finetune_tokens);
  c_sim->add_option("--tests", sim.tests, "Comma-separated test names");
  c_sim->add_option("--sizes", sim.sizes, "Sample sizes (examples or text tokens)")->delimiter(',');
  c_sim->add_option("--trials", sim.trials);
  c_sim->add_option("--seed", sim.seed)->required();
  c_sim->add_option("--csv", sim.csv, "Also write scenario,test,n,trial,p rows here");
  c_sim->add_option("--n-docs", sim.h.corpus.n_docs);
  c_sim->add_option("--min-len", sim.h.corpus.min_len);
  c_sim->add_option("--max-len", sim.h.corpus.max_len);
  c_sim->add_option("--vocab", sim.h.corpus.vocab);
  c_sim->add_option("--templates", sim.h.corpus.templates);
  c_sim->add_option("--noise", sim.h.corpus.noise);
  c_sim->add_option("--batch", sim.h.batch);
  c_sim->add_option("--order", sim.h.model.order);
  c_sim->add_option("--decay", sim.h.model.decay);
  c_sim->add_option("--seq-len", sim.h.query.seq_len);
  c_sim->add_option("--samples", sim.h.n_samples);
  c_sim->add_option("--partitions", sim.h.partitions);
  c_sim->add_option("--n-max", sim.h.n_max);
  c_sim->add_option("--shuffle-k", sim.h.shuffle.k);
  c_sim->add_option("--fraction", sim.h.shuffle.retrain_fraction);
  c_sim->add_option("--m", sim.h.exact_m, "Relabellings for the exact shuffle test");
  c_sim->add_option("--continuation-len", sim.h.text.continuation_len);
  add_common(c_sim, common);

  CalibrateOpts cal;
  auto* c_cal = app.add_subcommand("calibrate", "KS uniformity and ECDF of null p-values");
  c_cal->add_option("--report", cal.report, "Report written by simulate");
  c_cal->add_option("--pvalues", cal.pvalues, "Whitespace-separated p-values");
  add_common(c_cal, common, false);

  CostModel cost;
  auto* c_cost = app.add_subcommand("cost", "Price of scoring sequences through a paid API");
  c_cost->add_option("--input-rate", cost.input_rate, "Price per 1M input tokens");
  c_cost->add_option("--output-rate", cost.output_rate, "Price per 1M output tokens");
  c_cost->add_option("--sequences", cost.n_sequences, "Sequences, in millions");
  c_cost->add_option("--seq-len", cost.seq_len);
  add_common(c_cost, common, false);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(std::move(rev));
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  try {
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    std::string report;
    if (name == "ingest") {
      cmd_ingest(ingest, common, out, err);
    } else if (name == "subsample") {
      cmd_subsample(subsample, common, out, err);
    } else if (name == "train-toy") {
      cmd_train_toy(train, common, out, err);
    } else if (name == "ngram-index") {
      cmd_ngram_index(index, common, out, err);
    } else if (name == "query-test") {
      report = cmd_query_test(query, common, out);
    } else if (name == "query-test-sampled") {
      report = cmd_query_test_sampled(sampled, common);
    } else if (name == "ngram-test") {
      report = cmd_ngram_test(ngram, common);
    } else if (name == "shuffle-test") {
      report = cmd_shuffle_test(shuffle, common);
    } else if (name == "simulate") {
      report = cmd_simulate(sim, common, out);
    } else if (name == "calibrate") {
      report = cmd_calibrate(cal);
    } else {
      report = cmd_cost(cost);
    }
    const double wall = elapsed();
    if (!report.empty()) {
      if (common.timing) {
        auto doc = json::parse(report);
        doc["wall_time_s"] = wall;
        report = doc.dump(2) + "\n";
      }
      write_output(common.out, report, out);
    }
    err << name << ": wall time " << std::fixed << std::setprecision(3) << wall << " s\n";
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace palimpsest::cli
