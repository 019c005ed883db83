#pragma once

// Training transcripts: documents paired with the optimizer step at which they
// were consumed.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "palimpsest/random.hpp"

namespace palimpsest {

using TokenId = std::uint32_t;
using Step = std::uint32_t;
using Document = std::vector<TokenId>;

constexpr std::uint32_t kByteVocab = 256;

// Byte-level tokenizer: id = byte value.
Document tokenize_bytes(std::string_view text);
std::string detokenize_bytes(std::span<const TokenId> tokens);

// Texts attributed to Bob, analysed jointly.
struct TextBundle {
  std::vector<Document> docs;

  std::size_t total_tokens() const noexcept;
};

struct TranscriptEntry {
  std::uint32_t doc;  // index into the shared document store
  Step step;
};

// Immutable after construction. Documents live in a shared store so
// relabelled copies (shuffles, subsamples) are cheap.
class Transcript {
 public:
  Transcript(std::vector<Document> docs, std::vector<Step> steps, Step num_steps,
             std::uint32_t vocab);
  Transcript(std::shared_ptr<const std::vector<Document>> store,
             std::vector<TranscriptEntry> entries, Step num_steps, std::uint32_t vocab);

  std::size_t size() const noexcept { return entries_.size(); }
  Step num_steps() const noexcept { return num_steps_; }
  std::uint32_t vocab() const noexcept { return vocab_; }

  const Document& doc(std::size_t i) const { return (*store_)[entries_[i].doc]; }
  Step step(std::size_t i) const { return entries_[i].step; }
  const std::vector<TranscriptEntry>& entries() const noexcept { return entries_; }
  const std::shared_ptr<const std::vector<Document>>& store() const noexcept { return store_; }

  // Same documents, new steps (one per entry).
  Transcript with_steps(std::vector<Step> steps) const;
  Transcript with_entries(std::vector<TranscriptEntry> entries, Step num_steps) const;

  // Entry indices ordered by (step, entry index).
  std::vector<std::size_t> order_by_step() const;
  std::vector<Step> steps() const;
  std::size_t total_tokens() const;

 private:
  std::shared_ptr<const std::vector<Document>> store_;
  std::vector<TranscriptEntry> entries_;
  Step num_steps_;
  std::uint32_t vocab_;
};

struct StepRange {
  Step first;
  Step last;  // inclusive
  Step length() const noexcept { return last - first + 1; }
};

// Epoch labels are 1-based indices into `ranges`.
class EpochMap {
 public:
  EpochMap(std::vector<StepRange> ranges, Step num_steps);

  // `epochs` equal-length (±1) epochs covering [1, num_steps].
  static EpochMap uniform(Step num_steps, std::size_t epochs);

  const std::vector<StepRange>& ranges() const noexcept { return ranges_; }
  Step num_steps() const noexcept { return num_steps_; }
  std::size_t count() const noexcept { return ranges_.size(); }

 private:
  std::vector<StepRange> ranges_;
  Step num_steps_;
};

// Steps are permuted by a uniform permutation of [1, N].
Transcript shuffle_transcript(const Transcript& t, RandomSource r);

// k distinct entries, uniformly without replacement. Output preserves the
// input's relative entry order.
Transcript subsample_transcript(const Transcript& t, std::size_t k, RandomSource r);

// Entries inside [range.first, range.last], steps re-based to start at 1.
Transcript restrict_steps(const Transcript& t, StepRange range);

Transcript filter_epoch(const Transcript& t, const EpochMap& epochs, std::size_t epoch);

// Assigns consecutive documents to steps, `batch` documents per step.
Transcript transcript_in_order(std::vector<Document> docs, std::size_t batch,
                               std::uint32_t vocab);

// JSONL: header {"num_steps", "vocab"} then one {"tokens", "step"} per line.
void write_transcript_jsonl(std::ostream& out, const Transcript& t);
Transcript read_transcript_jsonl(std::istream& in);
Transcript read_transcript_jsonl(const std::string& path);

// JSONL: one {"tokens": [...]} per line, no header.
void write_text_jsonl(std::ostream& out, const TextBundle& text);
TextBundle read_text_jsonl(std::istream& in);
TextBundle read_text_jsonl(const std::string& path);

}  // namespace palimpsest
