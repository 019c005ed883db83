#include "palimpsest/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <optional>
#include <ostream>
#include <unordered_set>

#include <json.hpp>

#include "palimpsest/errors.hpp"
#include "palimpsest/parallel.hpp"

namespace palimpsest {

using json = nlohmann::json;

Language::Language(const CorpusConfig& cfg, RandomSource r) : cfg_(cfg) {
  if (cfg.vocab < 2) throw Error(ErrorCode::InvalidScenario, "corpus vocab must be >= 2");
  if (cfg.templates < 1) throw Error(ErrorCode::InvalidScenario, "need at least one template");
  if (cfg.min_branch < 1 || cfg.max_branch < cfg.min_branch) {
    throw Error(ErrorCode::InvalidScenario, "branching range must satisfy 1 <= min <= max");
  }
  if (!(cfg.noise >= 0.0 && cfg.noise <= 1.0)) throw Error(ErrorCode::InvalidScenario, "noise must be in [0, 1]");
  templates_.resize(cfg.templates);
  for (auto& rows : templates_) {
    rows.resize(cfg.vocab);
    for (auto& row : rows) {
      const std::size_t b = cfg.min_branch + r.uniform_below(cfg.max_branch - cfg.min_branch + 1);
      row.next.resize(b);
      row.cumulative.resize(b);
      double acc = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        row.next[i] = static_cast<TokenId>(r.uniform_below(cfg.vocab));
        acc += 1.0 / static_cast<double>(i + 1);
        row.cumulative[i] = acc;
      }
    }
  }
}

Document Language::sample_doc(std::size_t len, RandomSource& r) const {
  Document d;
  if (len == 0) return d;
  d.reserve(len);
  const auto& rows = templates_[r.uniform_below(templates_.size())];
  auto tok = static_cast<TokenId>(r.uniform_below(cfg_.vocab));
  d.push_back(tok);
  while (d.size() < len) {
    if (cfg_.noise > 0.0 && r.bernoulli(cfg_.noise)) {
      tok = static_cast<TokenId>(r.uniform_below(cfg_.vocab));
    } else {
      const auto& row = rows[tok];
      const double u = r.uniform() * row.cumulative.back();
      const auto it = std::upper_bound(row.cumulative.begin(), row.cumulative.end(), u);
      tok = row.next[std::min<std::size_t>(it - row.cumulative.begin(), row.next.size() - 1)];
    }
    d.push_back(tok);
  }
  return d;
}

std::vector<Document> generate_corpus(const Language& lang, std::size_t n_docs, RandomSource r) {
  const auto& cfg = lang.config();
  if (cfg.min_len < 1 || cfg.max_len < cfg.min_len) {
    throw Error(ErrorCode::InvalidScenario, "document length range must satisfy 1 <= min <= max");
  }
  std::vector<Document> docs;
  docs.reserve(n_docs);
  for (std::size_t i = 0; i < n_docs; ++i) {
    RandomSource s = r.substream(i);
    const std::size_t len = cfg.min_len + s.uniform_below(cfg.max_len - cfg.min_len + 1);
    docs.push_back(lang.sample_doc(len, s));
  }
  return docs;
}

std::vector<Document> generate_corpus(const CorpusConfig& cfg, RandomSource r) {
  if (cfg.n_docs < 1) throw Error(ErrorCode::InvalidScenario, "n_docs must be >= 1");
  return generate_corpus(Language(cfg, r.substream(0)), cfg.n_docs, r.substream(1));
}

double distinct_ngram_rate(std::span<const Document> docs, std::size_t n) {
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "n must be positive");
  std::unordered_set<std::string> seen;
  std::size_t total = 0;
  for (const auto& d : docs) {
    for (std::size_t i = 0; i + n <= d.size(); ++i) {
      seen.emplace(reinterpret_cast<const char*>(d.data() + i), n * sizeof(TokenId));
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(seen.size()) / static_cast<double>(total);
}

namespace {

struct Named {
  TestId id;
  const char* name;
};
constexpr Named kTests[] = {
    {TestId::Query, "query"},
    {TestId::QueryRef, "query_ref"},
    {TestId::QueryRegression, "query_regression"},
    {TestId::QuerySampled, "query_sampled"},
    {TestId::ObsPart, "obs_part"},
    {TestId::ObsPartLikelihood, "obs_part_likelihood"},
    {TestId::ObsShuff, "obs_shuff"},
    {TestId::ObsShuffFinetune, "obs_shuff_finetune"},
    {TestId::ObsShuffExact, "obs_shuff_exact"},
};

}  // namespace

std::string to_string(TestId id) {
  for (const auto& t : kTests) {
    if (t.id == id) return t.name;
  }
  return "unknown";
}

TestId parse_test_id(const std::string& name) {
  for (const auto& t : kTests) {
    if (name == t.name) return t.id;
  }
  throw Error(ErrorCode::InvalidScenario, "unknown test '" + name + "'");
}

std::string to_string(ScenarioKind kind) {
  switch (kind) {
    case ScenarioKind::Copy: return "copy";
    case ScenarioKind::Finetune: return "finetune";
    case ScenarioKind::IndependentReshuffle: return "independent_reshuffle";
    case ScenarioKind::IndependentCorpus: return "independent_corpus";
  }
  return "unknown";
}

ScenarioKind parse_scenario_kind(const std::string& name) {
  for (auto k : {ScenarioKind::Copy, ScenarioKind::Finetune, ScenarioKind::IndependentReshuffle,
                 ScenarioKind::IndependentCorpus}) {
    if (name == to_string(k)) return k;
  }
  throw Error(ErrorCode::InvalidScenario, "unknown scenario '" + name + "'");
}

bool is_query_test(TestId id) {
  return id == TestId::Query || id == TestId::QueryRef || id == TestId::QueryRegression ||
         id == TestId::QuerySampled;
}

std::string Scenario::name() const {
  if (kind == ScenarioKind::Finetune) return "finetune(" + std::to_string(finetune_tokens) + ")";
  return to_string(kind);
}

const SweepCell& SweepReport::cell(const std::string& scenario, const std::string& test,
                                   std::size_t n) const {
  for (const auto& c : cells) {
    if (c.scenario == scenario && c.test == test && c.n == n) return c;
  }
  throw Error(ErrorCode::InvalidArgument, "no cell " + scenario + "/" + test + "/" + std::to_string(n));
}

namespace {

struct CellSpec {
  TestId test;
  std::size_t n;
};

void validate(const Scenario& sc, std::span<const CellSpec> cells, std::size_t trials) {
  const auto& c = sc.cfg;
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidScenario, msg); };
  if (trials < 1) fail("trials must be >= 1");
  if (cells.empty()) fail("no tests requested");
  if (c.corpus.n_docs < 1) fail("corpus.n_docs must be >= 1");
  if (c.corpus.min_len < 1 || c.corpus.max_len < c.corpus.min_len) fail("bad document length range");
  if (c.model.vocab != c.corpus.vocab) fail("model vocab differs from corpus vocab");
  if (c.batch < 1) fail("batch must be >= 1");
  if (sc.kind == ScenarioKind::Finetune && sc.finetune_tokens == 0) fail("finetune scenario needs finetune_tokens > 0");
  if (sc.kind != ScenarioKind::Finetune && sc.finetune_tokens != 0) fail("finetune_tokens set on a non-finetune scenario");
  const std::size_t n_entries = c.corpus.n_docs;
  for (const auto& [id, n] : cells) {
    if (is_query_test(id)) {
      if (n < 3 || n > n_entries) fail("query sample size must be in [3, n_docs]");
    } else if (n < 1) {
      fail("text token budget must be positive");
    }
    if (is_query_test(id) && c.query.start_pos + c.query.seq_len > c.corpus.min_len) {
      fail("query window does not fit the shortest document");
    }
    if (!is_query_test(id)) {
      if (c.text.prefix_len < 1 || c.text.continuation_len < 1) fail("text lengths must be positive");
      if ((id == TestId::ObsPart || id == TestId::ObsPartLikelihood) &&
          (c.partitions < 3 || c.partitions > n_entries)) {
        fail("partitions must be in [3, n_docs]");
      }
    }
  }
}

std::size_t default_size(const HarnessConfig& c, TestId id) {
  return is_query_test(id) ? c.corpus.n_docs : 20 * c.text.continuation_len;
}

TextBundle first_tokens(const std::vector<Document>& docs, std::size_t n) {
  TextBundle out;
  std::size_t have = 0;
  for (const auto& d : docs) {
    if (have >= n) break;
    const std::size_t take = std::min(d.size(), n - have);
    out.docs.emplace_back(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(take));
    have += take;
  }
  return out;
}

ToyLM train_fresh(const ToyLMConfig& cfg, const Transcript& t) {
  ToyLM m(cfg);
  train_on_transcript(m, t);
  return m;
}

// Share of distinct tokens in each scored window, aligned with
// collect_records.
void attach_features(std::vector<LoglikRecord>& recs, const Transcript& t, const QueryConfig& q) {
  const Transcript sel = select_examples(t, q);
  std::size_t k = 0;
  for (std::size_t i = 0; i < sel.size(); ++i) {
    const auto& d = sel.doc(i);
    if (d.size() < q.start_pos + q.seq_len) continue;
    std::vector<TokenId> w(d.begin() + static_cast<std::ptrdiff_t>(q.start_pos),
                           d.begin() + static_cast<std::ptrdiff_t>(q.start_pos + q.seq_len));
    std::sort(w.begin(), w.end());
    const auto distinct = std::unique(w.begin(), w.end()) - w.begin();
    recs.at(k++).features = std::vector<double>{static_cast<double>(distinct) / static_cast<double>(q.seq_len)};
  }
}

struct CellResult {
  double p = 1.0;
  bool degenerate = false;
};

template <class Fn>
CellResult guarded(Fn&& fn) {
  try {
    return {fn(), false};
  } catch (const Error& e) {
    if (e.code() == ErrorCode::DegenerateRanks || e.code() == ErrorCode::DegenerateNullSpread) {
      return {1.0, true};
    }
    throw;
  }
}

// One trial: every requested (test, size) cell. Streams of R:
// 1 language, 2 corpus, 3 Alice's shuffle, 4 fine-tune data, 5 Bob's
// reshuffle, 6 Bob's corpus, 7 reference reshuffle, 8 query subsample,
// 9 query sampling, 10 text prefixes, 11 text sampling, 12 index, 13 shuffle
// test, 14 exact shuffle test.
std::vector<CellResult> run_trial(const Scenario& sc, std::span<const CellSpec> cells,
                                  const RandomSource& R) {
  const HarnessConfig& c = sc.cfg;
  const Language lang(c.corpus, R.substream(1));
  const auto corpus = generate_corpus(lang, c.corpus.n_docs, R.substream(2));
  const Transcript t = shuffle_transcript(transcript_in_order(corpus, c.batch, c.corpus.vocab), R.substream(3));

  // Alice, with a checkpoint where the replayed tail begins.
  const Step n_steps = t.num_steps();
  const Step tail = tail_length(n_steps, c.shuffle.retrain_fraction);
  ToyLM alice(c.model);
  if (tail < n_steps) train_on_transcript(alice, restrict_steps(t, {1, n_steps - tail}));
  const Checkpoint checkpoint = Checkpoint::from_blob(alice.serialize());
  train_on_transcript(alice, restrict_steps(t, {n_steps - tail + 1, n_steps}));

  ToyLM bob(c.model);
  switch (sc.kind) {
    case ScenarioKind::Copy:
      bob = alice;
      break;
    case ScenarioKind::Finetune: {
      const auto extra = generate_corpus(lang, sc.finetune_tokens / c.corpus.min_len + 1, R.substream(4));
      bob = alice.clone_and_finetune(first_tokens(extra, sc.finetune_tokens).docs);
      break;
    }
    case ScenarioKind::IndependentReshuffle:
      bob = train_fresh(c.model, shuffle_transcript(t, R.substream(5)));
      break;
    case ScenarioKind::IndependentCorpus:
      bob = train_fresh(c.model, transcript_in_order(generate_corpus(lang, c.corpus.n_docs, R.substream(6)),
                                                      c.batch, c.corpus.vocab));
      break;
  }

  auto wants = [&](std::initializer_list<TestId> ids) {
    return std::any_of(cells.begin(), cells.end(), [&](const CellSpec& x) {
      return std::find(ids.begin(), ids.end(), x.test) != ids.end();
    });
  };
  std::optional<ToyLM> ref;
  if (wants({TestId::QueryRef, TestId::QueryRegression})) {
    ref = train_fresh(c.model, shuffle_transcript(t, R.substream(7)));
  }

  std::vector<Document> text_docs;
  std::size_t max_tokens = 0;
  for (const auto& cs : cells) {
    if (!is_query_test(cs.test)) max_tokens = std::max(max_tokens, cs.n);
  }
  if (max_tokens > 0) {
    const std::size_t n_docs = (max_tokens + c.text.continuation_len - 1) / c.text.continuation_len;
    RandomSource prefixes = R.substream(10);
    const RandomSource sampling = R.substream(11);
    for (std::size_t i = 0; i < n_docs; ++i) {
      const Document prefix = lang.sample_doc(c.text.prefix_len, prefixes);
      RandomSource s = sampling.substream(i);
      text_docs.push_back(bob.sample(prefix, c.text.continuation_len, c.text.temperature, s));
    }
  }

  std::optional<NGramIndex> index;
  const ToyTrainer trainer(c.model);
  ShuffleTestConfig shuffle = c.shuffle;
  shuffle.threads = 1;

  std::vector<CellResult> out;
  out.reserve(cells.size());
  for (const CellSpec& cs : cells) {
    const TestId id = cs.test;
    const std::size_t n = cs.n;
    if (is_query_test(id)) {
      const Transcript sub = subsample_transcript(t, n, R.substream(8));
      switch (id) {
        case TestId::Query:
          out.push_back(guarded([&] { return phi_query(sub, bob, c.query).stats.p_value_one_sided; }));
          break;
        case TestId::QueryRef:
          out.push_back(guarded([&] {
            return phi_query_ref(collect_records(sub, bob, &*ref, c.query).records).p_value_one_sided;
          }));
          break;
        case TestId::QueryRegression:
          out.push_back(guarded([&] {
            auto recs = collect_records(sub, bob, &*ref, c.query).records;
            if (c.regression_features) attach_features(recs, sub, c.query);
            return phi_query_regression(recs).p_value_one_sided;
          }));
          break;
        default:
          out.push_back(guarded([&] {
            return phi_query_sampled(sub, bob, c.query, c.n_samples, nullptr, R.substream(9))
                .stats.p_value_one_sided;
          }));
          break;
      }
      continue;
    }
    const TextBundle text = first_tokens(text_docs, n);
    switch (id) {
      case TestId::ObsPart:
        if (!index) index = build_index(t, c.partitions, c.n_max, c.index_rate, R.substream(12));
        {
          MatchOptions opt;
          opt.min_order = c.min_order;
          const auto res = phi_obs_part(*index, text, opt);
          out.push_back({res.p_value, res.degenerate});
        }
        break;
      case TestId::ObsPartLikelihood:
        {
          const auto res = phi_obs_part_likelihood(t, c.partitions, text, c.lm_order, c.lm_smoothing);
          out.push_back({res.p_value, res.degenerate});
        }
        break;
      case TestId::ObsShuff:
      case TestId::ObsShuffFinetune: {
        ShuffleTestConfig s = shuffle;
        s.finetune_on_text = id == TestId::ObsShuffFinetune;
        out.push_back(guarded([&] {
          return phi_obs_shuff(t, checkpoint, trainer, text, s, R.substream(13)).p_approx;
        }));
        break;
      }
      default:
        out.push_back(guarded([&] {
          return phi_obs_shuff_exact(t, checkpoint, trainer, text, shuffle, c.exact_m, R.substream(14)).p_hat;
        }));
        break;
    }
  }
  return out;
}

}  // namespace

SweepReport run_scenario(const Scenario& sc, std::span<const TestId> tests,
                         std::span<const std::size_t> sizes, std::size_t trials,
                         const RandomSource& r, unsigned threads) {
  std::vector<CellSpec> cells;
  for (TestId id : tests) {
    if (sizes.empty()) {
      cells.push_back({id, default_size(sc.cfg, id)});
    } else {
      for (std::size_t n : sizes) cells.push_back({id, n});
    }
  }
  validate(sc, cells, trials);

  std::vector<std::vector<CellResult>> per_trial(trials);
  parallel_for(trials, threads, [&](std::size_t i) { per_trial[i] = run_trial(sc, cells, r.substream(i)); });

  SweepReport rep;
  rep.seed = r.seed();
  rep.stream = r.stream();
  rep.trials = trials;
  for (std::size_t col = 0; col < cells.size(); ++col) {
    SweepCell cell;
    cell.scenario = sc.name();
    cell.test = to_string(cells[col].test);
    cell.n = cells[col].n;
    for (std::size_t i = 0; i < trials; ++i) {
      cell.p_values.push_back(per_trial[i][col].p);
      if (per_trial[i][col].degenerate) ++cell.degenerate;
    }
    cell.median = quantile(cell.p_values, 0.5);
    cell.q25 = quantile(cell.p_values, 0.25);
    cell.q75 = quantile(cell.p_values, 0.75);
    rep.cells.push_back(std::move(cell));
  }
  return rep;
}

void merge_reports(SweepReport& into, const SweepReport& more) {
  if (into.cells.empty()) {
    into = more;
    return;
  }
  if (into.seed != more.seed || into.stream != more.stream || into.trials != more.trials) {
    throw Error(ErrorCode::InvalidArgument, "reports differ in seed or trial count");
  }
  into.cells.insert(into.cells.end(), more.cells.begin(), more.cells.end());
}

void write_report_json(std::ostream& out, const SweepReport& rep) {
  json cells = json::array();
  for (const auto& c : rep.cells) {
    cells.push_back({{"scenario", c.scenario},
                     {"test", c.test},
                     {"n", c.n},
                     {"trials", c.p_values.size()},
                     {"p_values", c.p_values},
                     {"degenerate", c.degenerate},
                     {"median", c.median},
                     {"q25", c.q25},
                     {"q75", c.q75}});
  }
  json doc{{"seed", rep.seed},
           {"stream", rep.stream},
           {"trials", rep.trials},
           {"trial_streams", "trial i uses substream(i) of (seed, stream)"},
           {"cells", cells}};
  out << doc.dump(2) << '\n';
}

void write_report_csv(std::ostream& out, const SweepReport& rep) {
  out << "scenario,test,n,trial,p\n";
  char buf[64];
  for (const auto& c : rep.cells) {
    for (std::size_t i = 0; i < c.p_values.size(); ++i) {
      const auto res = std::to_chars(buf, buf + sizeof(buf), c.p_values[i]);
      out << '"' << c.scenario << "\"," << c.test << ',' << c.n << ',' << i << ','
          << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf)) << '\n';
    }
  }
}

CalibrationReport calibration_report(std::span<const double> p_values) {
  if (p_values.empty()) throw Error(ErrorCode::InvalidArgument, "no p-values");
  CalibrationReport rep;
  const auto ks = ks_uniform(p_values);
  rep.ks_stat = ks.statistic;
  rep.ks_p_value = ks.p_value;
  rep.uniform_pass = ks.p_value >= 0.01;
  std::vector<double> sorted(p_values.begin(), p_values.end());
  std::sort(sorted.begin(), sorted.end());
  for (int i = 1; i <= 100; ++i) {
    const double x = i / 100.0;
    const auto below = std::upper_bound(sorted.begin(), sorted.end(), x) - sorted.begin();
    rep.ecdf.push_back({x, static_cast<double>(below) / static_cast<double>(sorted.size())});
  }
  return rep;
}

}  // namespace palimpsest
