#pragma once

// Observational partition test: index which contiguous block of training
// steps each n-gram occurred in, count how much of Bob's text matches each
// block, and correlate the counts with block order.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "palimpsest/core.hpp"
#include "palimpsest/random.hpp"
#include "palimpsest/stats.hpp"

namespace palimpsest {

struct Posting {
  std::uint32_t partition;  // 1-based
  std::uint32_t count;

  friend bool operator==(const Posting&, const Posting&) = default;
};

// Entry indices of each of k contiguous partitions of the transcript sorted by
// (step, entry index). Sizes differ by at most one.
std::vector<std::vector<std::size_t>> partition_entries(const Transcript& t, std::size_t k);

// Immutable map from n-gram (orders 1..n_max) to per-partition counts. Grams
// are stored sorted by (order, tokens), so the layout is canonical.
class NGramIndex {
 public:
  NGramIndex(unsigned n_max, std::uint32_t k, double subsample_rate, std::uint64_t seed);

  unsigned n_max() const noexcept { return n_max_; }
  std::uint32_t k() const noexcept { return k_; }
  double subsample_rate() const noexcept { return rate_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t size() const noexcept { return grams_.size(); }

  // Postings of `gram`, sorted by partition; empty if absent.
  std::span<const Posting> find(std::span<const TokenId> gram) const;
  // Sum of all posting counts.
  std::uint64_t total_mass() const noexcept;

  // Visits grams in (order, tokens) order.
  template <class Fn>
  void for_each(Fn&& fn) const {
    for (std::uint32_t g = 0; g < grams_.size(); ++g) fn(tokens_of(g), postings_of(g));
  }

  std::vector<std::uint8_t> serialize() const;
  static NGramIndex deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::string& path) const;
  static NGramIndex load(const std::string& path);

  friend bool operator==(const NGramIndex& a, const NGramIndex& b);

 private:
  friend NGramIndex build_index(const Transcript&, std::uint32_t, unsigned, double,
                                const RandomSource&, unsigned);

  struct Gram {
    std::uint32_t offset;  // into arena_
    std::uint32_t order;
    std::uint32_t begin;  // into postings_
    std::uint32_t end;
  };

  std::span<const TokenId> tokens_of(std::uint32_t g) const {
    return {arena_.data() + grams_[g].offset, grams_[g].order};
  }
  std::span<const Posting> postings_of(std::uint32_t g) const {
    return {postings_.data() + grams_[g].begin, grams_[g].end - grams_[g].begin};
  }
  std::int64_t lookup(std::span<const TokenId> gram, std::uint64_t hash) const;
  // Inserts if absent; returns the gram id.
  std::uint32_t intern(std::span<const TokenId> gram);
  void grow();
  void rebuild_table();

  unsigned n_max_;
  std::uint32_t k_;
  double rate_;
  std::uint64_t seed_;
  std::vector<TokenId> arena_;
  std::vector<Gram> grams_;
  std::vector<Posting> postings_;
  std::vector<std::uint32_t> table_;  // gram id + 1, 0 = empty
};

// Indexes every n-gram occurrence of orders 1..n_max, each kept independently
// with probability subsample_rate. Keep decisions for entry i draw from
// r.substream(i), so they depend on the document and not on its step.
NGramIndex build_index(const Transcript& t, std::uint32_t k, unsigned n_max, double subsample_rate,
                       const RandomSource& r, unsigned threads = 1);

struct MatchOptions {
  // Smallest n-gram order that counts as a match.
  unsigned min_order = 2;
  unsigned threads = 1;
};

// Per-partition match counts (index j - 1 holds partition j).
using MatchProfile = std::vector<std::uint64_t>;

// Greedy longest match: at each position try orders n_max down to min_order;
// a hit at order j credits every partition holding that n-gram once and
// advances by j, otherwise advance by 1.
MatchProfile match_profile(const NGramIndex& idx, const TextBundle& text, MatchOptions opt = {});

struct PartitionTestResult {
  std::vector<double> profile;  // per-partition statistic
  std::optional<SpearmanResult> stats;
  bool degenerate = false;  // constant profile; p is reported as 1
  double p_value = 1.0;     // one-sided
};

// Spearman of a per-partition profile against 1..k. Constant profiles give
// degenerate = true and p = 1.
PartitionTestResult partition_statistic(std::vector<double> profile);

PartitionTestResult phi_obs_part(const NGramIndex& idx, const TextBundle& text,
                                 MatchOptions opt = {});

// Likelihood variant: one add-alpha n-gram model per partition; the profile
// is the mean per-token log-likelihood of the bundle under each model.
PartitionTestResult phi_obs_part_likelihood(const Transcript& t, std::uint32_t k,
                                            const TextBundle& text, unsigned lm_order = 3,
                                            double smoothing = 0.1, unsigned threads = 1);

// Permutation p-value of the profile's Spearman coefficient under random
// relabeling of partitions. Permutation j draws from r.substream(j + 1).
PermutationResult profile_permutation_test(std::span<const double> profile, std::size_t m,
                                           const RandomSource& r);

}  // namespace palimpsest
