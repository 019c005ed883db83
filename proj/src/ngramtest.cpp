#include "palimpsest/ngramtest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "palimpsest/binary_io.hpp"
#include "palimpsest/errors.hpp"
#include "palimpsest/parallel.hpp"
#include "palimpsest/toylm.hpp"

namespace palimpsest {

namespace {

constexpr char kMagic[] = "PNGX1";

std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

std::uint64_t gram_hash(std::span<const TokenId> gram) {
  std::uint64_t h = mix64(0x9e3779b97f4a7c15ULL + gram.size());
  for (TokenId t : gram) h = mix64(h ^ (t + 0x632be59bd9b4e019ULL));
  return h;
}

bool gram_less(std::span<const TokenId> a, std::span<const TokenId> b) {
  if (a.size() != b.size()) return a.size() < b.size();
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

void check_index_params(unsigned n_max, std::uint32_t k, double rate) {
  if (n_max < 1 || n_max > 255) throw Error(ErrorCode::InvalidArgument, "n_max must be in [1, 255]");
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "k must be positive");
  if (!(rate > 0.0 && rate <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "subsample_rate must be in (0, 1]");
  }
}

}  // namespace

std::vector<std::vector<std::size_t>> partition_entries(const Transcript& t, std::size_t k) {
  if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be positive");
  if (k > t.size()) {
    throw Error(ErrorCode::TooManyPartitions,
                std::to_string(k) + " partitions for " + std::to_string(t.size()) + " examples");
  }
  const auto order = t.order_by_step();
  std::vector<std::vector<std::size_t>> parts(k);
  const std::size_t n = order.size();
  for (std::size_t p = 0; p < k; ++p) {
    parts[p].assign(order.begin() + static_cast<std::ptrdiff_t>(n * p / k),
                    order.begin() + static_cast<std::ptrdiff_t>(n * (p + 1) / k));
  }
  return parts;
}

NGramIndex::NGramIndex(unsigned n_max, std::uint32_t k, double subsample_rate, std::uint64_t seed)
    : n_max_(n_max), k_(k), rate_(subsample_rate), seed_(seed) {
  check_index_params(n_max, k, subsample_rate);
}

std::int64_t NGramIndex::lookup(std::span<const TokenId> gram, std::uint64_t hash) const {
  if (table_.empty()) return -1;
  const std::size_t mask = table_.size() - 1;
  for (std::size_t i = hash & mask;; i = (i + 1) & mask) {
    const std::uint32_t slot = table_[i];
    if (slot == 0) return -1;
    const auto toks = tokens_of(slot - 1);
    if (toks.size() == gram.size() && std::equal(toks.begin(), toks.end(), gram.begin())) {
      return slot - 1;
    }
  }
}

void NGramIndex::rebuild_table() {
  std::size_t cap = 16;
  while (cap < 2 * grams_.size() + 2) cap *= 2;
  table_.assign(cap, 0);
  const std::size_t mask = cap - 1;
  for (std::uint32_t g = 0; g < grams_.size(); ++g) {
    std::size_t i = gram_hash(tokens_of(g)) & mask;
    while (table_[i] != 0) i = (i + 1) & mask;
    table_[i] = g + 1;
  }
}

void NGramIndex::grow() {
  table_.resize(std::max<std::size_t>(16, table_.size() * 2));
  rebuild_table();
}

std::uint32_t NGramIndex::intern(std::span<const TokenId> gram) {
  if (2 * (grams_.size() + 1) > table_.size()) grow();
  const std::uint64_t h = gram_hash(gram);
  if (const auto g = lookup(gram, h); g >= 0) return static_cast<std::uint32_t>(g);
  const auto id = static_cast<std::uint32_t>(grams_.size());
  grams_.push_back({static_cast<std::uint32_t>(arena_.size()), static_cast<std::uint32_t>(gram.size()), 0, 0});
  arena_.insert(arena_.end(), gram.begin(), gram.end());
  const std::size_t mask = table_.size() - 1;
  std::size_t i = h & mask;
  while (table_[i] != 0) i = (i + 1) & mask;
  table_[i] = id + 1;
  return id;
}

std::span<const Posting> NGramIndex::find(std::span<const TokenId> gram) const {
  const auto g = lookup(gram, gram_hash(gram));
  if (g < 0) return {};
  return postings_of(static_cast<std::uint32_t>(g));
}

std::uint64_t NGramIndex::total_mass() const noexcept {
  std::uint64_t s = 0;
  for (const auto& p : postings_) s += p.count;
  return s;
}

bool operator==(const NGramIndex& a, const NGramIndex& b) {
  if (a.n_max_ != b.n_max_ || a.k_ != b.k_ || a.rate_ != b.rate_ || a.seed_ != b.seed_ ||
      a.grams_.size() != b.grams_.size() || a.arena_ != b.arena_ || a.postings_ != b.postings_) {
    return false;
  }
  for (std::size_t g = 0; g < a.grams_.size(); ++g) {
    const auto& x = a.grams_[g];
    const auto& y = b.grams_[g];
    if (x.offset != y.offset || x.order != y.order || x.begin != y.begin || x.end != y.end) return false;
  }
  return true;
}

NGramIndex build_index(const Transcript& t, std::uint32_t k, unsigned n_max, double subsample_rate,
                       const RandomSource& r, unsigned threads) {
  check_index_params(n_max, k, subsample_rate);
  const auto parts = partition_entries(t, k);

  // Per-partition tables are built concurrently, then merged in partition
  // order, so the result does not depend on the thread count.
  struct Local {
    NGramIndex grams{1, 1, 1.0, 0};
    std::vector<std::uint32_t> counts;
  };
  struct Event {
    std::uint32_t gram;
    std::uint32_t partition;
    std::uint32_t count;
  };

  NGramIndex global(n_max, k, subsample_rate, r.seed());
  std::vector<Event> events;
  const std::size_t wave = std::max(1u, threads);
  for (std::size_t first = 0; first < k; first += wave) {
    const std::size_t n_local = std::min<std::size_t>(wave, k - first);
    std::vector<Local> locals(n_local);
    parallel_for(n_local, threads, [&](std::size_t w) {
      Local& loc = locals[w];
      for (std::size_t e : parts[first + w]) {
        const auto& doc = t.doc(e);
        RandomSource keep = r.substream(e);
        for (std::size_t i = 0; i < doc.size(); ++i) {
          for (std::size_t n = 1; n <= n_max && i + n <= doc.size(); ++n) {
            if (subsample_rate < 1.0 && !keep.bernoulli(subsample_rate)) continue;
            const auto g = loc.grams.intern(std::span<const TokenId>(doc).subspan(i, n));
            if (g == loc.counts.size()) loc.counts.push_back(0);
            ++loc.counts[g];
          }
        }
      }
    });
    for (std::size_t w = 0; w < n_local; ++w) {
      const Local& loc = locals[w];
      for (std::uint32_t g = 0; g < loc.counts.size(); ++g) {
        const auto id = global.intern(loc.grams.tokens_of(g));
        events.push_back({id, static_cast<std::uint32_t>(first + w + 1), loc.counts[g]});
      }
    }
  }

  // Canonical gram order, then postings laid out contiguously per gram.
  std::vector<std::uint32_t> order(global.grams_.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    return gram_less(global.tokens_of(a), global.tokens_of(b));
  });
  std::vector<std::uint32_t> rank(order.size());
  for (std::uint32_t i = 0; i < order.size(); ++i) rank[order[i]] = i;

  NGramIndex out(n_max, k, subsample_rate, r.seed());
  out.grams_.resize(order.size());
  out.arena_.reserve(global.arena_.size());
  std::vector<std::uint32_t> fill(order.size() + 1, 0);
  for (const auto& ev : events) ++fill[rank[ev.gram] + 1];
  for (std::size_t i = 1; i < fill.size(); ++i) fill[i] += fill[i - 1];
  for (std::uint32_t i = 0; i < order.size(); ++i) {
    const auto toks = global.tokens_of(order[i]);
    out.grams_[i] = {static_cast<std::uint32_t>(out.arena_.size()), static_cast<std::uint32_t>(toks.size()),
                     fill[i], fill[i + 1]};
    out.arena_.insert(out.arena_.end(), toks.begin(), toks.end());
  }
  out.postings_.resize(events.size());
  // Events arrive in increasing partition order, so each gram's postings
  // come out sorted by partition.
  for (const auto& ev : events) out.postings_[fill[rank[ev.gram]]++] = {ev.partition, ev.count};
  out.rebuild_table();
  return out;
}

std::vector<std::uint8_t> NGramIndex::serialize() const {
  ByteWriter w;
  w.raw(kMagic);
  w.u32(n_max_);
  w.u32(k_);
  w.f64(rate_);
  w.u64(seed_);
  w.u64(grams_.size());
  for (std::uint32_t g = 0; g < grams_.size(); ++g) {
    const auto toks = tokens_of(g);
    w.u8(static_cast<std::uint8_t>(toks.size()));
    for (TokenId t : toks) w.u32(t);
    const auto post = postings_of(g);
    w.u32(static_cast<std::uint32_t>(post.size()));
    for (const auto& p : post) {
      w.u32(p.partition);
      w.u32(p.count);
    }
  }
  return std::move(w).take();
}

NGramIndex NGramIndex::deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader rd(bytes);
  rd.expect(kMagic);
  const std::uint32_t n_max = rd.u32();
  const std::uint32_t k = rd.u32();
  const double rate = rd.f64();
  const std::uint64_t seed = rd.u64();
  NGramIndex idx(n_max, k, rate, seed);
  const std::uint64_t count = rd.u64();
  if (count > rd.remaining() / 9) throw Error(ErrorCode::FormatError, "truncated binary file");
  idx.grams_.reserve(count);
  std::vector<TokenId> toks;
  for (std::uint64_t g = 0; g < count; ++g) {
    const unsigned order = rd.u8();
    if (order < 1 || order > n_max) throw Error(ErrorCode::FormatError, "n-gram order outside [1, n_max]");
    toks.resize(order);
    for (auto& t : toks) t = rd.u32();
    if (g > 0 && !gram_less(idx.tokens_of(static_cast<std::uint32_t>(g - 1)), toks)) {
      throw Error(ErrorCode::FormatError, "postings are not sorted");
    }
    const std::uint32_t pairs = rd.u32();
    if (pairs == 0 || pairs > k) throw Error(ErrorCode::FormatError, "bad partition count");
    const auto begin = static_cast<std::uint32_t>(idx.postings_.size());
    std::uint32_t prev = 0;
    for (std::uint32_t i = 0; i < pairs; ++i) {
      const Posting p{rd.u32(), rd.u32()};
      if (p.partition <= prev || p.partition > k || p.count == 0) {
        throw Error(ErrorCode::FormatError, "bad posting");
      }
      prev = p.partition;
      idx.postings_.push_back(p);
    }
    idx.grams_.push_back({static_cast<std::uint32_t>(idx.arena_.size()), order, begin,
                          static_cast<std::uint32_t>(idx.postings_.size())});
    idx.arena_.insert(idx.arena_.end(), toks.begin(), toks.end());
  }
  if (!rd.at_end()) throw Error(ErrorCode::FormatError, "trailing bytes in index file");
  idx.rebuild_table();
  return idx;
}

void NGramIndex::save(const std::string& path) const { write_file_bytes(path, serialize()); }

NGramIndex NGramIndex::load(const std::string& path) { return deserialize(read_file_bytes(path)); }

MatchProfile match_profile(const NGramIndex& idx, const TextBundle& text, MatchOptions opt) {
  if (opt.min_order < 1) throw Error(ErrorCode::InvalidArgument, "min_order must be >= 1");
  const std::size_t n_docs = text.docs.size();
  const std::size_t chunks = std::min<std::size_t>(std::max(1u, opt.threads), std::max<std::size_t>(n_docs, 1));
  std::vector<MatchProfile> partial(chunks, MatchProfile(idx.k(), 0));
  parallel_for(chunks, opt.threads, [&](std::size_t c) {
    auto& prof = partial[c];
    for (std::size_t d = n_docs * c / chunks; d < n_docs * (c + 1) / chunks; ++d) {
      std::span<const TokenId> doc = text.docs[d];
      std::size_t pos = 0;
      while (pos < doc.size()) {
        std::size_t advance = 1;
        const std::size_t top = std::min<std::size_t>(idx.n_max(), doc.size() - pos);
        for (std::size_t j = top; j >= opt.min_order && j >= 1; --j) {
          const auto post = idx.find(doc.subspan(pos, j));
          if (!post.empty()) {
            for (const auto& p : post) ++prof[p.partition - 1];
            advance = j;
            break;
          }
        }
        pos += advance;
      }
    }
  });
  MatchProfile total(idx.k(), 0);
  for (const auto& p : partial) {
    for (std::size_t j = 0; j < total.size(); ++j) total[j] += p[j];
  }
  return total;
}

PartitionTestResult partition_statistic(std::vector<double> profile) {
  if (profile.size() < 3) {
    throw Error(ErrorCode::TooFewExamples, "partition tests need k >= 3");
  }
  PartitionTestResult res;
  res.profile = std::move(profile);
  const auto& v = res.profile;
  if (std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); })) {
    res.degenerate = true;
    res.p_value = 1.0;
    return res;
  }
  std::vector<double> idx(v.size());
  std::iota(idx.begin(), idx.end(), 1.0);
  res.stats = spearman(v, idx);
  res.p_value = res.stats->p_value_one_sided;
  return res;
}

PartitionTestResult phi_obs_part(const NGramIndex& idx, const TextBundle& text, MatchOptions opt) {
  const auto counts = match_profile(idx, text, opt);
  return partition_statistic(std::vector<double>(counts.begin(), counts.end()));
}

PartitionTestResult phi_obs_part_likelihood(const Transcript& t, std::uint32_t k,
                                            const TextBundle& text, unsigned lm_order,
                                            double smoothing, unsigned threads) {
  if (text.total_tokens() == 0) throw Error(ErrorCode::InvalidArgument, "text bundle is empty");
  const auto parts = partition_entries(t, k);
  ToyLMConfig cfg;
  cfg.order = lm_order;
  cfg.vocab = t.vocab();
  cfg.decay = 1.0;
  cfg.smoothing = smoothing;
  const ToyLM validated(cfg);  // rejects bad settings before any work starts
  const double tokens = static_cast<double>(text.total_tokens());
  std::vector<double> chi(k);
  parallel_for(k, threads, [&](std::size_t p) {
    ToyLM m(cfg);
    for (std::size_t e : parts[p]) m.train_step(t.doc(e));
    double ll = 0.0;
    for (const auto& d : text.docs) ll += m.log_prob(d);
    chi[p] = ll / tokens;
  });
  return partition_statistic(std::move(chi));
}

PermutationResult profile_permutation_test(std::span<const double> profile, std::size_t m,
                                           const RandomSource& r) {
  const auto observed = partition_statistic(std::vector<double>(profile.begin(), profile.end()));
  if (observed.degenerate) {
    PermutationResult res;
    res.m = m;
    return res;
  }
  std::vector<double> idx(profile.size());
  std::iota(idx.begin(), idx.end(), 1.0);
  std::vector<double> null_stats(m);
  std::vector<double> perm(profile.begin(), profile.end());
  for (std::size_t j = 0; j < m; ++j) {
    std::copy(profile.begin(), profile.end(), perm.begin());
    RandomSource pr = r.substream(j + 1);
    pr.shuffle(std::span<double>(perm));
    null_stats[j] = spearman(perm, idx).rho;
  }
  return permutation_p_value(observed.stats->rho, null_stats, r.substream(0));
}

}  // namespace palimpsest
