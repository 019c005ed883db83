#include "palimpsest/core.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <ostream>
#include <istream>

#include <json.hpp>

#include "palimpsest/errors.hpp"

namespace palimpsest {

using nlohmann::json;

Document tokenize_bytes(std::string_view text) {
  Document out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(c);
  return out;
}

std::string detokenize_bytes(std::span<const TokenId> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t >= kByteVocab) throw Error(ErrorCode::TokenOutOfRange, "token is not a byte");
    out.push_back(static_cast<char>(t));
  }
  return out;
}

namespace {

void validate(const std::vector<Document>& store, const std::vector<TranscriptEntry>& entries,
              Step num_steps, std::uint32_t vocab) {
  if (entries.empty()) throw Error(ErrorCode::EmptyTranscript, "transcript has no entries");
  if (num_steps == 0) throw Error(ErrorCode::StepOutOfRange, "num_steps must be positive");
  if (vocab == 0) throw Error(ErrorCode::InvalidArgument, "vocab must be positive");
  for (const auto& e : entries) {
    if (e.doc >= store.size()) throw Error(ErrorCode::InvalidArgument, "entry references missing document");
    if (e.step < 1 || e.step > num_steps) {
      throw Error(ErrorCode::StepOutOfRange,
                  "step " + std::to_string(e.step) + " outside [1, " + std::to_string(num_steps) + "]");
    }
  }
}

void validate_docs(const std::vector<Document>& docs, std::uint32_t vocab) {
  for (const auto& d : docs) {
    if (d.empty()) throw Error(ErrorCode::InvalidArgument, "empty document");
    for (TokenId tok : d) {
      if (tok >= vocab) {
        throw Error(ErrorCode::TokenOutOfRange,
                    "token " + std::to_string(tok) + " >= vocab " + std::to_string(vocab));
      }
    }
  }
}

}  // namespace

Transcript::Transcript(std::vector<Document> docs, std::vector<Step> steps, Step num_steps,
                       std::uint32_t vocab)
    : num_steps_(num_steps), vocab_(vocab) {
  if (docs.size() != steps.size()) {
    throw Error(ErrorCode::InvalidArgument, "documents and steps differ in length");
  }
  validate_docs(docs, vocab);
  entries_.reserve(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    entries_.push_back({static_cast<std::uint32_t>(i), steps[i]});
  }
  auto store = std::make_shared<const std::vector<Document>>(std::move(docs));
  validate(*store, entries_, num_steps_, vocab_);
  store_ = std::move(store);
}

Transcript::Transcript(std::shared_ptr<const std::vector<Document>> store,
                       std::vector<TranscriptEntry> entries, Step num_steps, std::uint32_t vocab)
    : store_(std::move(store)), entries_(std::move(entries)), num_steps_(num_steps), vocab_(vocab) {
  if (!store_) throw Error(ErrorCode::InvalidArgument, "null document store");
  validate(*store_, entries_, num_steps_, vocab_);
}

Transcript Transcript::with_steps(std::vector<Step> steps) const {
  if (steps.size() != entries_.size()) {
    throw Error(ErrorCode::InvalidArgument, "step count differs from entry count");
  }
  std::vector<TranscriptEntry> entries = entries_;
  for (std::size_t i = 0; i < entries.size(); ++i) entries[i].step = steps[i];
  return Transcript(store_, std::move(entries), num_steps_, vocab_);
}

Transcript Transcript::with_entries(std::vector<TranscriptEntry> entries, Step num_steps) const {
  return Transcript(store_, std::move(entries), num_steps, vocab_);
}

std::vector<std::size_t> Transcript::order_by_step() const {
  std::vector<std::size_t> idx(entries_.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return entries_[a].step < entries_[b].step; });
  return idx;
}

std::vector<Step> Transcript::steps() const {
  std::vector<Step> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.step);
  return out;
}

std::size_t Transcript::total_tokens() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += (*store_)[e.doc].size();
  return total;
}

EpochMap::EpochMap(std::vector<StepRange> ranges, Step num_steps)
    : ranges_(std::move(ranges)), num_steps_(num_steps) {
  if (ranges_.empty()) throw Error(ErrorCode::InvalidEpochMap, "no epochs");
  Step expected = 1;
  for (const auto& r : ranges_) {
    if (r.first != expected || r.last < r.first) {
      throw Error(ErrorCode::InvalidEpochMap, "epochs must be sorted, disjoint and contiguous from step 1");
    }
    expected = r.last + 1;
  }
  if (expected != num_steps_ + 1) {
    throw Error(ErrorCode::InvalidEpochMap, "epochs do not cover [1, num_steps]");
  }
}

EpochMap EpochMap::uniform(Step num_steps, std::size_t epochs) {
  if (epochs == 0 || epochs > num_steps) {
    throw Error(ErrorCode::InvalidEpochMap, "epoch count must be in [1, num_steps]");
  }
  std::vector<StepRange> ranges;
  Step first = 1;
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto len = static_cast<Step>(num_steps / epochs + (e < num_steps % epochs ? 1 : 0));
    ranges.push_back({first, first + len - 1});
    first += len;
  }
  return EpochMap(std::move(ranges), num_steps);
}

Transcript shuffle_transcript(const Transcript& t, RandomSource r) {
  std::vector<Step> sigma(t.num_steps());
  std::iota(sigma.begin(), sigma.end(), Step{1});
  r.shuffle(std::span<Step>(sigma));
  std::vector<Step> steps;
  steps.reserve(t.size());
  for (const auto& e : t.entries()) steps.push_back(sigma[e.step - 1]);
  return t.with_steps(std::move(steps));
}

Transcript subsample_transcript(const Transcript& t, std::size_t k, RandomSource r) {
  if (k > t.size()) {
    throw Error(ErrorCode::SampleTooLarge,
                "cannot draw " + std::to_string(k) + " of " + std::to_string(t.size()) + " entries");
  }
  if (k == 0) throw Error(ErrorCode::SampleTooLarge, "subsample of size 0 would be empty");
  // Partial Fisher-Yates over indices, then restore input order.
  std::vector<std::size_t> idx(t.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(r.uniform_below(idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  std::vector<TranscriptEntry> entries;
  entries.reserve(k);
  for (std::size_t i : idx) entries.push_back(t.entries()[i]);
  return t.with_entries(std::move(entries), t.num_steps());
}

Transcript restrict_steps(const Transcript& t, StepRange range) {
  if (range.first < 1 || range.last < range.first || range.last > t.num_steps()) {
    throw Error(ErrorCode::StepOutOfRange, "step range outside transcript");
  }
  std::vector<TranscriptEntry> entries;
  for (const auto& e : t.entries()) {
    if (e.step >= range.first && e.step <= range.last) {
      entries.push_back({e.doc, e.step - range.first + 1});
    }
  }
  if (entries.empty()) {
    throw Error(ErrorCode::EmptyEpoch, "no entries in steps [" + std::to_string(range.first) + ", " +
                                           std::to_string(range.last) + "]");
  }
  return t.with_entries(std::move(entries), range.length());
}

Transcript filter_epoch(const Transcript& t, const EpochMap& epochs, std::size_t epoch) {
  if (epochs.num_steps() != t.num_steps()) {
    throw Error(ErrorCode::InvalidEpochMap, "epoch map does not match transcript length");
  }
  if (epoch < 1 || epoch > epochs.count()) {
    throw Error(ErrorCode::UnknownEpoch, "epoch " + std::to_string(epoch) + " not in map");
  }
  return restrict_steps(t, epochs.ranges()[epoch - 1]);
}

std::size_t TextBundle::total_tokens() const noexcept {
  std::size_t n = 0;
  for (const auto& d : docs) n += d.size();
  return n;
}

Transcript transcript_in_order(std::vector<Document> docs, std::size_t batch, std::uint32_t vocab) {
  if (batch == 0) throw Error(ErrorCode::InvalidArgument, "batch must be positive");
  std::vector<Step> steps(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) steps[i] = static_cast<Step>(i / batch + 1);
  const auto n_steps = static_cast<Step>((docs.size() + batch - 1) / batch);
  return Transcript(std::move(docs), std::move(steps), n_steps, vocab);
}

void write_transcript_jsonl(std::ostream& out, const Transcript& t) {
  out << json{{"num_steps", t.num_steps()}, {"vocab", t.vocab()}}.dump() << '\n';
  for (std::size_t i = 0; i < t.size(); ++i) {
    out << json{{"tokens", t.doc(i)}, {"step", t.step(i)}}.dump() << '\n';
  }
}

namespace {

[[noreturn]] void parse_fail(std::size_t line, const std::string& msg) {
  throw Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": " + msg);
}

}  // namespace

Transcript read_transcript_jsonl(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::int64_t num_steps = -1;
  std::int64_t vocab = -1;
  std::vector<Document> docs;
  std::vector<Step> steps;
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
    try {
      if (num_steps < 0) {
        if (!obj.contains("num_steps") || !obj.contains("vocab")) {
          parse_fail(line_no, "first line must be the {\"num_steps\", \"vocab\"} header");
        }
        num_steps = obj.at("num_steps").get<std::int64_t>();
        vocab = obj.at("vocab").get<std::int64_t>();
        if (num_steps < 1 || num_steps > UINT32_MAX) parse_fail(line_no, "num_steps out of range");
        if (vocab < 1 || vocab > UINT32_MAX) parse_fail(line_no, "vocab out of range");
        continue;
      }
      const auto step = obj.at("step").get<std::int64_t>();
      if (step < 1 || step > num_steps) parse_fail(line_no, "step outside [1, num_steps]");
      Document doc;
      for (const auto& tok : obj.at("tokens")) {
        const auto v = tok.get<std::int64_t>();
        if (v < 0 || v >= vocab) parse_fail(line_no, "token id outside [0, vocab)");
        doc.push_back(static_cast<TokenId>(v));
      }
      if (doc.empty()) parse_fail(line_no, "empty token list");
      docs.push_back(std::move(doc));
      steps.push_back(static_cast<Step>(step));
    } catch (const json::exception& e) {
      parse_fail(line_no, e.what());
    }
  }
  if (num_steps < 0) throw Error(ErrorCode::ParseError, "missing transcript header");
  if (docs.empty()) throw Error(ErrorCode::EmptyTranscript, "transcript file has no entries");
  return Transcript(std::move(docs), std::move(steps), static_cast<Step>(num_steps),
                    static_cast<std::uint32_t>(vocab));
}

Transcript read_transcript_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return read_transcript_jsonl(in);
}

void write_text_jsonl(std::ostream& out, const TextBundle& text) {
  for (const auto& d : text.docs) out << json{{"tokens", d}}.dump() << '\n';
}

TextBundle read_text_jsonl(std::istream& in) {
  TextBundle text;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json obj = json::parse(line);
      if (!obj.is_object()) parse_fail(line_no, "expected a JSON object");
      Document doc;
      for (const auto& tok : obj.at("tokens")) {
        const auto v = tok.get<std::int64_t>();
        if (v < 0 || v > UINT32_MAX) parse_fail(line_no, "negative or oversized token id");
        doc.push_back(static_cast<TokenId>(v));
      }
      if (doc.empty()) parse_fail(line_no, "empty token list");
      text.docs.push_back(std::move(doc));
    } catch (const json::exception& e) {
      parse_fail(line_no, e.what());
    }
  }
  if (text.docs.empty()) throw Error(ErrorCode::ParseError, "text file has no documents");
  return text;
}

TextBundle read_text_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  return read_text_jsonl(in);
}

}  // namespace palimpsest
