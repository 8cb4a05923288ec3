#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "glr/numerics.hpp"
#include "glr/rng.hpp"

namespace glr {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using ItemId = std::int32_t;
using CateId = std::int32_t;

// One interaction after vocab indexing. The user is implicit (actions live in
// per-user sequences). Behavior tags are kept through filtering but are not
// persisted in the prepared-dataset format.
struct Action {
  ItemId item = 0;
  CateId cate = 0;
  std::int64_t ts = 0;
};

// One raw log record before filtering/indexing.
struct RawAction {
  std::string user;
  std::string item;
  std::string cate;
  std::int64_t ts = 0;
  std::string behavior;
};

struct ParseResult {
  std::vector<RawAction> actions;
  std::size_t data_lines = 0;
  std::size_t malformed = 0;
  std::vector<std::string> malformed_samples;  // at most 5
  bool had_header = false;
  std::vector<std::string> warnings;
};

struct Vocab {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, std::int32_t> index;
  std::vector<std::int64_t> train_count;

  std::int32_t size() const { return static_cast<std::int32_t>(tokens.size()); }

  std::int32_t add(const std::string& tok) {
    auto it = index.find(tok);
    if (it != index.end()) return it->second;
    const auto id = static_cast<std::int32_t>(tokens.size());
    tokens.push_back(tok);
    index.emplace(tok, id);
    train_count.push_back(0);
    return id;
  }

  std::int32_t lookup(const std::string& tok) const {
    auto it = index.find(tok);
    return it == index.end() ? -1 : it->second;
  }
};

enum class Split { train, valid, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

// Half-open split ranges: train = [train_begin, train_end), valid =
// [train_end, valid_end), test = [valid_end, test_end). An action at exactly
// a boundary belongs to the later split.
struct SplitBounds {
  std::int64_t train_begin = 0;
  std::int64_t train_end = 0;
  std::int64_t valid_end = 0;
  std::int64_t test_end = 0;

  bool contains(std::int64_t ts) const { return ts >= train_begin && ts < test_end; }

  Split of(std::int64_t ts) const {
    if (ts < train_end) return Split::train;
    if (ts < valid_end) return Split::valid;
    return Split::test;
  }
};

struct UserSeq {
  std::string user;
  std::vector<Action> actions;  // chronological; ties keep original log order
};

struct Dataset {
  static constexpr CateId kUnkCate = 0;

  std::vector<UserSeq> seqs;
  Vocab items;
  Vocab cates;  // index 0 is always the reserved "UNK" category
  SplitBounds split;

  std::int32_t num_items() const { return items.size(); }
  std::int32_t num_cates() const { return cates.size(); }

  std::size_t count_actions(Split s) const {
    std::size_t n = 0;
    for (const auto& u : seqs)
      for (const auto& a : u.actions)
        if (split.of(a.ts) == s) ++n;
    return n;
  }

  std::size_t total_actions() const {
    std::size_t n = 0;
    for (const auto& u : seqs) n += u.actions.size();
    return n;
  }
};

// Distant actions of one category, chronological, capped at the latest T.
struct CategoryHistory {
  CateId cate = 0;
  std::vector<ItemId> items;
};

// One supervised instance. recent holds (item, cate) pairs in chronological
// order; distant groups are sorted by category index.
struct Example {
  std::int32_t user = 0;
  std::size_t position = 0;  // 0-based index of the target within its sequence
  ItemId target_item = 0;
  CateId target_cate = 0;
  std::vector<std::pair<ItemId, CateId>> recent;
  std::vector<CategoryHistory> distant;
};

// ---------------------------------------------------------------------------
// Raw log parsing. CSV or TSV with columns user,item,category,timestamp,
// behavior (behavior may be absent); an optional header row is auto-detected.
// ---------------------------------------------------------------------------

namespace detail {

inline bool parse_i64(std::string_view s, std::int64_t& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

inline std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == sep) {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline bool parse_record(std::string_view line, char sep, RawAction& out) {
  auto f = split_fields(line, sep);
  if (f.size() != 4 && f.size() != 5) return false;
  if (f[0].empty() || f[1].empty() || f[2].empty()) return false;
  std::int64_t ts = 0;
  if (!parse_i64(f[3], ts) || ts < 0) return false;
  out.user.assign(f[0]);
  out.item.assign(f[1]);
  out.cate.assign(f[2]);
  out.ts = ts;
  out.behavior = f.size() == 5 ? std::string(f[4]) : std::string();
  return true;
}

}  // namespace detail

inline ParseResult parse_action_log(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open action log: " + path);
  ParseResult res;
  std::string line;
  char sep = ',';
  bool sep_known = false;
  bool first_data_line = true;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!sep_known) {
      sep = line.find('\t') != std::string::npos ? '\t' : ',';
      sep_known = true;
    }
    RawAction a;
    const bool ok = detail::parse_record(line, sep, a);
    if (first_data_line) {
      first_data_line = false;
      if (!ok) {  // header row: field names fail the timestamp parse
        res.had_header = true;
        continue;
      }
    }
    ++res.data_lines;
    if (!ok) {
      ++res.malformed;
      if (res.malformed_samples.size() < 5)
        res.malformed_samples.push_back("line " + std::to_string(line_no) + ": " + line);
      continue;
    }
    res.actions.push_back(std::move(a));
  }
  if (res.data_lines == 0) res.warnings.push_back("action log is empty: " + path);
  if (res.data_lines > 0 &&
      static_cast<double>(res.malformed) > 0.01 * static_cast<double>(res.data_lines)) {
    std::string msg = "more than 1% malformed lines (" + std::to_string(res.malformed) + " of " +
                      std::to_string(res.data_lines) + ") in " + path;
    for (const auto& s : res.malformed_samples) msg += "\n  " + s;
    throw DataError(msg);
  }
  return res;
}

// Drops actions outside [begin, end); returns the number removed.
inline std::size_t clamp_to_window(std::vector<RawAction>& actions, std::int64_t begin,
                                   std::int64_t end) {
  const std::size_t before = actions.size();
  std::erase_if(actions, [&](const RawAction& a) { return a.ts < begin || a.ts >= end; });
  return before - actions.size();
}

// ---------------------------------------------------------------------------
// Filtering. Order is fixed and applied once: items below the action
// threshold, then users outside [user_min, user_max], then categories whose
// surviving distinct-item count is below min_cate_items are merged into UNK.
// ---------------------------------------------------------------------------

struct FilterThresholds {
  std::int64_t min_item_actions = 20;
  std::int64_t user_min = 20;
  std::int64_t user_max = 300;
  std::int64_t min_cate_items = 100;
};

inline Dataset filter_dataset(const std::vector<RawAction>& raw, const FilterThresholds& th) {
  if (th.min_item_actions <= 0 || th.user_min <= 0 || th.user_max <= 0 || th.min_cate_items <= 0)
    throw InvalidInput("filter_dataset: thresholds must be positive");

  // 1. items with fewer than min_item_actions actions
  std::unordered_map<std::string, std::int64_t> item_count;
  for (const auto& a : raw) ++item_count[a.item];

  // group surviving actions per user, preserving log order
  std::unordered_map<std::string, std::size_t> user_slot;
  std::vector<std::string> user_order;
  std::vector<std::vector<const RawAction*>> per_user;
  for (const auto& a : raw) {
    if (item_count[a.item] < th.min_item_actions) continue;
    auto [it, inserted] = user_slot.emplace(a.user, per_user.size());
    if (inserted) {
      per_user.emplace_back();
      user_order.push_back(a.user);
    }
    per_user[it->second].push_back(&a);
  }

  // 2. users outside [user_min, user_max] (inclusive bounds kept)
  // 3. categories with fewer than min_cate_items surviving distinct items
  std::unordered_map<std::string, std::unordered_set<std::string>> cate_items;
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    const auto n = static_cast<std::int64_t>(per_user[u].size());
    if (n < th.user_min || n > th.user_max) {
      per_user[u].clear();
      continue;
    }
    for (const RawAction* a : per_user[u]) cate_items[a->cate].insert(a->item);
  }

  Dataset ds;
  ds.cates.add("UNK");  // reserved index 0
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    if (per_user[u].empty()) continue;
    // stable sort by timestamp; ties keep original log order
    std::vector<const RawAction*> acts = per_user[u];
    std::stable_sort(acts.begin(), acts.end(),
                     [](const RawAction* a, const RawAction* b) { return a->ts < b->ts; });
    UserSeq seq;
    seq.user = user_order[u];
    seq.actions.reserve(acts.size());
    for (const RawAction* a : acts) {
      Action act;
      act.item = ds.items.add(a->item);
      const bool merged =
          static_cast<std::int64_t>(cate_items[a->cate].size()) < th.min_cate_items;
      act.cate = merged ? Dataset::kUnkCate : ds.cates.add(a->cate);
      act.ts = a->ts;
      seq.actions.push_back(act);
    }
    ds.seqs.push_back(std::move(seq));
  }
  if (ds.seqs.empty() || ds.items.size() == 0)
    throw DataError("filter_dataset: nothing survives the filters");
  return ds;
}

// Assigns split bounds and computes training-range popularity counts.
// Sequences stay whole; splits mark target eligibility only.
inline void temporal_split(Dataset& ds, const SplitBounds& bounds) {
  if (!(bounds.train_begin < bounds.train_end && bounds.train_end < bounds.valid_end &&
        bounds.valid_end < bounds.test_end))
    throw InvalidInput("temporal_split: bounds must satisfy begin < train_end < valid_end < test_end");
  for (const auto& u : ds.seqs)
    for (const auto& a : u.actions)
      if (!bounds.contains(a.ts))
        throw DataError("temporal_split: action timestamp " + std::to_string(a.ts) +
                        " outside the split window");
  ds.split = bounds;
  std::fill(ds.items.train_count.begin(), ds.items.train_count.end(), 0);
  std::fill(ds.cates.train_count.begin(), ds.cates.train_count.end(), 0);
  std::size_t n_train = 0, n_test = 0;
  for (const auto& u : ds.seqs) {
    for (const auto& a : u.actions) {
      switch (bounds.of(a.ts)) {
        case Split::train:
          ++n_train;
          ++ds.items.train_count[static_cast<std::size_t>(a.item)];
          ++ds.cates.train_count[static_cast<std::size_t>(a.cate)];
          break;
        case Split::test:
          ++n_test;
          break;
        case Split::valid:
          break;
      }
    }
  }
  if (n_train == 0) throw DataError("temporal_split: empty train split");
  if (n_test == 0) throw DataError("temporal_split: empty test split");
}

// ---------------------------------------------------------------------------
// Example construction.
// ---------------------------------------------------------------------------

// Visits every eligible target: position >= 1 (at least one context action)
// with timestamp in the requested split. fn(user_index, position).
template <typename Fn>
void for_each_target(const Dataset& ds, Split split, Fn&& fn) {
  for (std::size_t u = 0; u < ds.seqs.size(); ++u) {
    const auto& acts = ds.seqs[u].actions;
    for (std::size_t p = 1; p < acts.size(); ++p)
      if (ds.split.of(acts[p].ts) == split) fn(static_cast<std::int32_t>(u), p);
  }
}

inline Example make_example_at(const Dataset& ds, std::int32_t user, std::size_t pos,
                               std::size_t recent_window, std::size_t distant_cap) {
  const auto& acts = ds.seqs[static_cast<std::size_t>(user)].actions;
  Example ex;
  ex.user = user;
  ex.position = pos;
  ex.target_item = acts[pos].item;
  ex.target_cate = acts[pos].cate;
  const std::size_t recent_begin = pos > recent_window ? pos - recent_window : 0;
  ex.recent.reserve(pos - recent_begin);
  for (std::size_t i = recent_begin; i < pos; ++i)
    ex.recent.emplace_back(acts[i].item, acts[i].cate);
  // distant: everything before the recent window, grouped by category,
  // keeping only the latest distant_cap per group
  std::map<CateId, std::vector<ItemId>> groups;
  for (std::size_t i = 0; i < recent_begin; ++i)
    groups[acts[i].cate].push_back(acts[i].item);
  ex.distant.reserve(groups.size());
  for (auto& [cate, items] : groups) {
    CategoryHistory h;
    h.cate = cate;
    if (items.size() > distant_cap)
      h.items.assign(items.end() - static_cast<std::ptrdiff_t>(distant_cap), items.end());
    else
      h.items = std::move(items);
    ex.distant.push_back(std::move(h));
  }
  return ex;
}

inline std::vector<Example> make_examples(const Dataset& ds, Split split,
                                          std::size_t recent_window, std::size_t distant_cap) {
  if (recent_window < 1 || distant_cap < 1)
    throw InvalidInput("make_examples: window and cap must be >= 1");
  std::vector<Example> out;
  for_each_target(ds, split, [&](std::int32_t u, std::size_t p) {
    out.push_back(make_example_at(ds, u, p, recent_window, distant_cap));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Popularity-proportional negative sampling.
// ---------------------------------------------------------------------------

class NegativeSampler {
 public:
  NegativeSampler(const std::vector<std::int64_t>& train_counts, std::int32_t sample_count)
      : num_negatives_(sample_count) {
    if (train_counts.size() < 2)
      throw DataError("NegativeSampler: need at least 2 items in the vocabulary");
    if (sample_count < 1) throw InvalidInput("NegativeSampler: sample count must be >= 1");
    cumulative_.resize(train_counts.size());
    std::int64_t acc = 0;
    for (std::size_t i = 0; i < train_counts.size(); ++i) {
      acc += std::max<std::int64_t>(train_counts[i], 0);
      cumulative_[i] = acc;
    }
    total_ = acc;
  }

  std::int32_t num_negatives() const { return num_negatives_; }

  // One popularity-proportional draw, rejection-resampling the positive.
  // Falls back to uniform over the other items when the positive holds all
  // the popularity mass.
  ItemId draw(ItemId positive, Rng& rng) const {
    const auto n = static_cast<std::int64_t>(cumulative_.size());
    std::int64_t pos_mass = cumulative_[static_cast<std::size_t>(positive)];
    if (positive > 0) pos_mass -= cumulative_[static_cast<std::size_t>(positive) - 1];
    if (total_ <= 0 || pos_mass >= total_) {
      const std::int64_t r = rng.range(0, n - 1);
      return static_cast<ItemId>(r >= positive ? r + 1 : r);
    }
    for (;;) {
      const std::int64_t u = rng.range(0, total_);
      const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
      const auto idx = static_cast<ItemId>(it - cumulative_.begin());
      if (idx != positive) return idx;
    }
  }

  // Z i.i.d. draws; duplicates among negatives are allowed.
  std::vector<ItemId> sample(ItemId positive, Rng& rng) const {
    std::vector<ItemId> out(static_cast<std::size_t>(num_negatives_));
    for (auto& v : out) v = draw(positive, rng);
    return out;
  }

 private:
  std::vector<std::int64_t> cumulative_;
  std::int64_t total_ = 0;
  std::int32_t num_negatives_ = 0;
};

// ---------------------------------------------------------------------------
// Synthetic corpus with planted long-term dependence.
//
// The category schedule is periodic with period window+1, so for every
// position n > window the action at lag window+1 has the same category and is
// exactly the last distant same-category action. Each action's item is the
// category's fixed permutation applied to that anchor; positions <= window
// are random seeds. The target is therefore predictable from the gated
// long-term branch but carries no usable signal in the recent window.
//
// intent_noise > 0 marks a fraction of schedule residues ambiguous: such an
// action flips, with probability 1/2, to the designated noise category
// (category index 1), whose items are always uniform-random. That makes the
// next category genuinely uncertain at those positions while keeping the
// noise category's conditional item distribution flat.
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::int32_t num_users = 200;
  std::int32_t num_cates = 5;
  std::int32_t items_per_cate = 40;
  std::int32_t seq_len = 120;
  std::int32_t window = 10;  // the M used for the distant boundary
  std::int32_t chunk_len = 2;
  double intent_noise = 0.0;
  double train_frac = 0.8;
  double valid_frac = 0.1;
  std::uint64_t seed = 1;
};

struct SynthData {
  Dataset dataset;
  // permutations[c][v - first_item(c)] = item emitted after anchor item v
  std::vector<std::vector<ItemId>> permutations;
  std::vector<bool> residue_ambiguous;  // length window+1
  CateId noise_cate = -1;               // vocab index, -1 when intent_noise == 0
};

inline SynthData generate_synthetic(const SynthConfig& cfg) {
  if (cfg.num_users < 2 || cfg.num_cates < 1 || cfg.items_per_cate < 2 || cfg.seq_len < 2 ||
      cfg.window < 1 || cfg.chunk_len < 1)
    throw InvalidInput("generate_synthetic: sizes out of range");
  Rng rng(cfg.seed);
  SynthData out;
  Dataset& ds = out.dataset;
  ds.cates.add("UNK");
  for (std::int32_t c = 0; c < cfg.num_cates; ++c) ds.cates.add("c" + std::to_string(c + 1));
  const std::int32_t num_items = cfg.num_cates * cfg.items_per_cate;
  for (std::int32_t v = 0; v < num_items; ++v) ds.items.add("i" + std::to_string(v));

  out.permutations.resize(static_cast<std::size_t>(cfg.num_cates));
  for (std::int32_t c = 0; c < cfg.num_cates; ++c) {
    auto& perm = out.permutations[static_cast<std::size_t>(c)];
    perm.resize(static_cast<std::size_t>(cfg.items_per_cate));
    const ItemId base = c * cfg.items_per_cate;
    for (std::int32_t i = 0; i < cfg.items_per_cate; ++i) perm[static_cast<std::size_t>(i)] = base + i;
    rng.shuffle(perm);
  }

  const std::int32_t period = cfg.window + 1;
  // residue -> scheduled category (vocab index, 1-based over real categories)
  std::vector<CateId> sched(static_cast<std::size_t>(period));
  for (std::int32_t r = 0; r < period; ++r)
    sched[static_cast<std::size_t>(r)] = 1 + (r / cfg.chunk_len) % cfg.num_cates;

  out.residue_ambiguous.assign(static_cast<std::size_t>(period), false);
  if (cfg.intent_noise > 0 && cfg.num_cates >= 2) {
    out.noise_cate = 1;
    std::vector<std::int32_t> eligible;
    for (std::int32_t r = 0; r < period; ++r)
      if (sched[static_cast<std::size_t>(r)] != out.noise_cate) eligible.push_back(r);
    rng.shuffle(eligible);
    auto want = static_cast<std::size_t>(std::llround(cfg.intent_noise * period));
    want = std::min(want, eligible.size());
    for (std::size_t i = 0; i < want; ++i)
      out.residue_ambiguous[static_cast<std::size_t>(eligible[i])] = true;
  }

  auto random_item_of = [&](CateId cate_vocab_idx) {
    const std::int32_t c = cate_vocab_idx - 1;
    return static_cast<ItemId>(c * cfg.items_per_cate + rng.range(0, cfg.items_per_cate));
  };

  ds.seqs.resize(static_cast<std::size_t>(cfg.num_users));
  for (std::int32_t u = 0; u < cfg.num_users; ++u) {
    UserSeq& seq = ds.seqs[static_cast<std::size_t>(u)];
    seq.user = "u" + std::to_string(u);
    seq.actions.reserve(static_cast<std::size_t>(cfg.seq_len));
    // last_at[c] = chronological (position, item) pairs of category c;
    // cursor[c] advances to the newest entry at position <= n - window - 1
    std::vector<std::vector<std::pair<std::int32_t, ItemId>>> hist(
        static_cast<std::size_t>(cfg.num_cates + 1));
    std::vector<std::size_t> cursor(static_cast<std::size_t>(cfg.num_cates + 1), 0);
    for (std::int32_t n = 0; n < cfg.seq_len; ++n) {
      const std::int32_t r = n % period;
      CateId c = sched[static_cast<std::size_t>(r)];
      if (out.residue_ambiguous[static_cast<std::size_t>(r)] && rng.bernoulli(0.5))
        c = out.noise_cate;
      ItemId v;
      if (c == out.noise_cate && cfg.intent_noise > 0) {
        v = random_item_of(c);
      } else {
        // newest same-category item at position <= n - window - 1
        const std::int32_t bound = n - cfg.window - 1;
        auto& h = hist[static_cast<std::size_t>(c)];
        auto& cur = cursor[static_cast<std::size_t>(c)];
        while (cur < h.size() && h[cur].first <= bound) ++cur;
        if (cur > 0) {
          const ItemId anchor = h[cur - 1].second;
          const std::int32_t base = (c - 1) * cfg.items_per_cate;
          v = out.permutations[static_cast<std::size_t>(c - 1)]
                              [static_cast<std::size_t>(anchor - base)];
        } else {
          v = random_item_of(c);
        }
      }
      hist[static_cast<std::size_t>(c)].emplace_back(n, v);
      seq.actions.push_back(Action{v, c, n});
    }
  }

  SplitBounds b;
  b.train_begin = 0;
  b.train_end = static_cast<std::int64_t>(std::llround(cfg.train_frac * cfg.seq_len));
  b.valid_end = static_cast<std::int64_t>(std::llround((cfg.train_frac + cfg.valid_frac) * cfg.seq_len));
  b.test_end = cfg.seq_len;
  temporal_split(ds, b);
  return out;
}

inline Dataset generate_synthetic(std::int32_t num_users, std::int32_t num_cates,
                                  std::int32_t items_per_cate, std::int32_t seq_len,
                                  std::int32_t window, Rng& rng) {
  SynthConfig cfg;
  cfg.num_users = num_users;
  cfg.num_cates = num_cates;
  cfg.items_per_cate = items_per_cate;
  cfg.seq_len = seq_len;
  cfg.window = window;
  cfg.seed = rng.next_u64();
  return generate_synthetic(cfg).dataset;
}

// ---------------------------------------------------------------------------
// Prepared-dataset directory format:
//   item_vocab  one entry per line: token<TAB>index<TAB>train_count
//   cate_vocab  same
//   sequences   one user per line: user_id<TAB>v:c:t triplets, space-separated
//   manifest    key=value lines (split bounds, thresholds, generator seed...)
// ---------------------------------------------------------------------------

inline void write_vocab(const std::filesystem::path& path, const Vocab& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::int32_t i = 0; i < v.size(); ++i)
    out << v.tokens[static_cast<std::size_t>(i)] << '\t' << i << '\t'
        << v.train_count[static_cast<std::size_t>(i)] << '\n';
}

inline Vocab read_vocab(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  Vocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tok;
    std::int32_t idx;
    std::int64_t cnt;
    if (!std::getline(ss, tok, '\t') || !(ss >> idx >> cnt))
      throw DataError("bad vocab line in " + path.string() + ": " + line);
    if (idx != v.size()) throw DataError("vocab indices not dense in " + path.string());
    v.add(tok);
    v.train_count.back() = cnt;
  }
  return v;
}

inline void save_dataset(const std::string& dir, const Dataset& ds,
                         const std::vector<std::pair<std::string, std::string>>& manifest_extra = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_vocab(fs::path(dir) / "item_vocab", ds.items);
  write_vocab(fs::path(dir) / "cate_vocab", ds.cates);
  {
    std::ofstream out(fs::path(dir) / "sequences", std::ios::binary);
    if (!out) throw IoError("cannot write sequences in " + dir);
    for (const auto& u : ds.seqs) {
      out << u.user;
      char sep = '\t';
      for (const auto& a : u.actions) {
        out << sep << a.item << ':' << a.cate << ':' << a.ts;
        sep = ' ';
      }
      out << '\n';
    }
  }
  {
    std::ofstream out(fs::path(dir) / "manifest", std::ios::binary);
    if (!out) throw IoError("cannot write manifest in " + dir);
    out << "format=glr-dataset-1\n";
    out << "train_begin=" << ds.split.train_begin << '\n';
    out << "train_end=" << ds.split.train_end << '\n';
    out << "valid_end=" << ds.split.valid_end << '\n';
    out << "test_end=" << ds.split.test_end << '\n';
    for (const auto& [k, val] : manifest_extra) out << k << '=' << val << '\n';
  }
}

inline std::unordered_map<std::string, std::string> read_manifest(const std::string& dir) {
  std::ifstream in(std::filesystem::path(dir) / "manifest", std::ios::binary);
  if (!in) throw IoError("cannot read manifest in " + dir);
  std::unordered_map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("bad manifest line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  Dataset ds;
  ds.items = read_vocab(fs::path(dir) / "item_vocab");
  ds.cates = read_vocab(fs::path(dir) / "cate_vocab");
  if (ds.cates.size() == 0 || ds.cates.tokens[0] != "UNK")
    throw DataError("cate_vocab must reserve index 0 for UNK in " + dir);
  auto manifest = read_manifest(dir);
  auto need = [&](const char* k) {
    auto it = manifest.find(k);
    if (it == manifest.end()) throw DataError(std::string("manifest missing key ") + k);
    std::int64_t v = 0;
    if (!detail::parse_i64(it->second, v)) throw DataError(std::string("bad manifest value for ") + k);
    return v;
  };
  SplitBounds b;
  b.train_begin = need("train_begin");
  b.train_end = need("train_end");
  b.valid_end = need("valid_end");
  b.test_end = need("test_end");

  std::ifstream in(fs::path(dir) / "sequences", std::ios::binary);
  if (!in) throw IoError("cannot read sequences in " + dir);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("bad sequence line: " + line);
    UserSeq seq;
    seq.user = line.substr(0, tab);
    std::size_t pos = tab + 1;
    while (pos < line.size()) {
      const auto end = line.find(' ', pos);
      const auto triplet = line.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
      const auto c1 = triplet.find(':');
      const auto c2 = triplet.find(':', c1 + 1);
      if (c1 == std::string::npos || c2 == std::string::npos)
        throw DataError("bad v:c:t triplet: " + triplet);
      Action a;
      std::int64_t item = 0, cate = 0, ts = 0;
      if (!detail::parse_i64(triplet.substr(0, c1), item) ||
          !detail::parse_i64(triplet.substr(c1 + 1, c2 - c1 - 1), cate) ||
          !detail::parse_i64(triplet.substr(c2 + 1), ts))
        throw DataError("bad v:c:t triplet: " + triplet);
      if (item < 0 || item >= ds.items.size() || cate < 0 || cate >= ds.cates.size())
        throw DataError("triplet index out of vocabulary range: " + triplet);
      a.item = static_cast<ItemId>(item);
      a.cate = static_cast<CateId>(cate);
      a.ts = ts;
      seq.actions.push_back(a);
      if (end == std::string::npos) break;
      pos = end + 1;
    }
    ds.seqs.push_back(std::move(seq));
  }
  ds.split = b;  // counts come from the vocab files; bounds validated here
  for (const auto& u : ds.seqs)
    for (const auto& a : u.actions)
      if (!b.contains(a.ts)) throw DataError("sequences contain an action outside the split window");
  return ds;
}

// Corpus statistics in the shape used by `prepare` (users, items, categories,
// average actions per user, per-split action counts).
struct DatasetStats {
  std::size_t users = 0;
  std::int32_t items = 0;
  std::int32_t cates = 0;
  double avg_actions_per_user = 0;
  std::size_t train_actions = 0;
  std::size_t valid_actions = 0;
  std::size_t test_actions = 0;
};

inline DatasetStats dataset_stats(const Dataset& ds) {
  DatasetStats s;
  s.users = ds.seqs.size();
  s.items = ds.num_items();
  s.cates = ds.num_cates();
  s.train_actions = ds.count_actions(Split::train);
  s.valid_actions = ds.count_actions(Split::valid);
  s.test_actions = ds.count_actions(Split::test);
  const std::size_t total = s.train_actions + s.valid_actions + s.test_actions;
  s.avg_actions_per_user = s.users ? static_cast<double>(total) / static_cast<double>(s.users) : 0;
  return s;
}

}  // namespace glr
