#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "glr/data.hpp"

using namespace glr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("glr_data_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("parse_action_log maps fields directly") {
  TempDir dir;
  write_file(dir.file("log.csv"), "u1,i9,c2,1511836800,pv\n");
  const ParseResult r = parse_action_log(dir.file("log.csv"));
  REQUIRE(r.actions.size() == 1);
  CHECK(r.actions[0].user == "u1");
  CHECK(r.actions[0].item == "i9");
  CHECK(r.actions[0].cate == "c2");
  CHECK(r.actions[0].ts == 1511836800);
  CHECK(r.actions[0].behavior == "pv");
  CHECK(r.malformed == 0);
}

TEST_CASE("parse_action_log handles tabs, headers and four-column rows") {
  TempDir dir;
  write_file(dir.file("log.tsv"), "user\titem\tcategory\ttimestamp\tbehavior\n"
                                  "u1\ti1\tc1\t100\tpv\n"
                                  "u1\ti2\tc1\t101\n");
  const ParseResult r = parse_action_log(dir.file("log.tsv"));
  CHECK(r.had_header);
  REQUIRE(r.actions.size() == 2);
  CHECK(r.actions[1].behavior.empty());
}

TEST_CASE("parse_action_log on an empty file warns and returns nothing") {
  TempDir dir;
  write_file(dir.file("empty.csv"), "");
  const ParseResult r = parse_action_log(dir.file("empty.csv"));
  CHECK(r.actions.empty());
  CHECK(r.warnings.size() == 1);
}

TEST_CASE("parse_action_log counts isolated bad lines") {
  TempDir dir;
  std::ostringstream log;
  for (int i = 0; i < 999; ++i) log << "u1,i" << i << ",c1," << 1000 + i << ",pv\n";
  log << "this line is broken\n";
  write_file(dir.file("log.csv"), log.str());
  const ParseResult r = parse_action_log(dir.file("log.csv"));
  CHECK(r.actions.size() == 999);
  CHECK(r.malformed == 1);
  CHECK(r.data_lines == 1000);
}

TEST_CASE("parse_action_log fails hard above 1% malformed, with samples") {
  TempDir dir;
  std::ostringstream log;
  for (int i = 0; i < 50; ++i) log << "u1,i" << i << ",c1," << 1000 + i << ",pv\n";
  log << "bad line one\nbad line two\n";
  write_file(dir.file("log.csv"), log.str());
  CHECK_THROWS_WITH_AS(parse_action_log(dir.file("log.csv")), doctest::Contains("bad line one"),
                       DataError);
}

TEST_CASE("parse_action_log rejects unreadable files") {
  CHECK_THROWS_AS(parse_action_log("/nonexistent/path/log.csv"), IoError);
}

TEST_CASE("filter_dataset applies the fixed item -> user -> category order") {
  std::vector<RawAction> rows;
  // item "cold" totals 19 actions across all users and is removed first
  for (int i = 0; i < 25; ++i) rows.push_back({"a", "hot", "c1", 100 + i, ""});
  for (int i = 0; i < 10; ++i) rows.push_back({"a", "cold", "c1", 200 + i, ""});
  for (int i = 0; i < 25; ++i) rows.push_back({"b", "hot", "c1", 300 + i, ""});
  // user "c" has 20 raw actions but falls to 11 once "cold" goes away
  for (int i = 0; i < 20; ++i) rows.push_back({"c", i < 9 ? "cold" : "hot", "c1", 400 + i, ""});

  FilterThresholds th;
  th.min_item_actions = 20;
  th.user_min = 20;
  th.user_max = 300;
  th.min_cate_items = 1;
  const Dataset out = filter_dataset(rows, th);
  REQUIRE(out.seqs.size() == 2);  // "a" and "b"
  CHECK(out.items.lookup("cold") == -1);
  CHECK(out.items.lookup("hot") == 0);
  for (const auto& s : out.seqs) {
    CHECK(s.actions.size() >= 20);
    CHECK(s.actions.size() <= 300);
  }
}

TEST_CASE("filter_dataset boundaries: exactly 20 actions survive") {
  std::vector<RawAction> rows;
  for (int i = 0; i < 20; ++i) rows.push_back({"u", "i1", "c1", 100 + i, ""});
  FilterThresholds th;
  th.min_item_actions = 20;
  th.user_min = 20;
  th.user_max = 300;
  th.min_cate_items = 1;
  const Dataset out = filter_dataset(rows, th);
  REQUIRE(out.seqs.size() == 1);
  CHECK(out.seqs[0].actions.size() == 20);
}

TEST_CASE("filter_dataset merges small categories into UNK") {
  std::vector<RawAction> rows;
  // category "small" carries 2 distinct items, "big" carries 3; threshold 3
  for (int i = 0; i < 30; ++i) rows.push_back({"u", "s" + std::to_string(i % 2), "small", 100 + i, ""});
  for (int i = 0; i < 30; ++i) rows.push_back({"u", "b" + std::to_string(i % 3), "big", 200 + i, ""});
  FilterThresholds th;
  th.min_item_actions = 5;
  th.user_min = 20;
  th.user_max = 300;
  th.min_cate_items = 3;
  const Dataset out = filter_dataset(rows, th);
  CHECK(out.cates.lookup("small") == -1);
  CHECK(out.cates.lookup("big") == 1);
  CHECK(out.cates.tokens[0] == "UNK");
  std::size_t unk_actions = 0;
  for (const auto& a : out.seqs[0].actions)
    if (a.cate == Dataset::kUnkCate) ++unk_actions;
  CHECK(unk_actions == 30);
}

TEST_CASE("filter_dataset fails when nothing survives") {
  std::vector<RawAction> rows;
  for (int i = 0; i < 5; ++i) rows.push_back({"u", "i", "c", 100 + i, ""});
  CHECK_THROWS_AS(filter_dataset(rows, FilterThresholds{}), DataError);
}

TEST_CASE("filter invariants hold under a full rescan") {
  Rng rng(5);
  std::vector<RawAction> rows;
  for (int u = 0; u < 40; ++u) {
    const int n = static_cast<int>(rng.range(5, 60));
    for (int i = 0; i < n; ++i) {
      const int item = static_cast<int>(rng.range(0, 30));
      rows.push_back({"u" + std::to_string(u), "i" + std::to_string(item),
                      "c" + std::to_string(item % 5), rng.range(0, 100000), ""});
    }
  }
  FilterThresholds th;
  th.min_item_actions = 10;
  th.user_min = 10;
  th.user_max = 50;
  th.min_cate_items = 2;
  Dataset out;
  try {
    out = filter_dataset(rows, th);
  } catch (const DataError&) {
    return;  // degenerate draw; nothing to rescan
  }
  // raw counts of every surviving item meet the threshold
  std::map<std::string, std::int64_t> raw_count;
  for (const auto& r : rows) ++raw_count[r.item];
  for (const auto& tok : out.items.tokens) CHECK(raw_count[tok] >= th.min_item_actions);
  // user sizes in bounds, sequences sorted by timestamp
  for (const auto& s : out.seqs) {
    CHECK(static_cast<std::int64_t>(s.actions.size()) >= th.user_min);
    CHECK(static_cast<std::int64_t>(s.actions.size()) <= th.user_max);
    for (std::size_t i = 1; i < s.actions.size(); ++i)
      CHECK(s.actions[i - 1].ts <= s.actions[i].ts);
  }
  // every non-UNK category keeps at least min_cate_items distinct items
  std::map<CateId, std::set<ItemId>> per_cate;
  for (const auto& s : out.seqs)
    for (const auto& a : s.actions) per_cate[a.cate].insert(a.item);
  for (const auto& [c, items] : per_cate)
    if (c != Dataset::kUnkCate)
      CHECK(static_cast<std::int64_t>(items.size()) >= th.min_cate_items);
}

TEST_CASE("temporal_split half-open boundaries and popularity counts") {
  std::vector<RawAction> rows;
  for (int i = 0; i < 30; ++i) rows.push_back({"u", "i1", "c1", i, ""});  // ts 0..29
  FilterThresholds th{1, 1, 300, 1};
  Dataset ds = filter_dataset(rows, th);
  temporal_split(ds, SplitBounds{0, 10, 20, 30});
  CHECK(ds.split.of(9) == Split::train);
  CHECK(ds.split.of(10) == Split::valid);  // boundary belongs to the later split
  CHECK(ds.split.of(19) == Split::valid);
  CHECK(ds.split.of(20) == Split::test);
  CHECK(ds.items.train_count[0] == 10);
  // partition: every action in exactly one split
  CHECK(ds.count_actions(Split::train) + ds.count_actions(Split::valid) +
            ds.count_actions(Split::test) ==
        ds.total_actions());
}

TEST_CASE("temporal_split rejects empty train or test") {
  std::vector<RawAction> rows;
  for (int i = 0; i < 10; ++i) rows.push_back({"u", "i1", "c1", i, ""});
  FilterThresholds th{1, 1, 300, 1};
  Dataset ds = filter_dataset(rows, th);
  CHECK_THROWS_AS(temporal_split(ds, SplitBounds{0, 10, 11, 12}), DataError);  // empty test
  Dataset ds2 = filter_dataset(rows, th);
  CHECK_THROWS_AS(temporal_split(ds2, SplitBounds{0, 20, 30, 40}), DataError);  // no test actions
}

namespace {

// one user, timestamps = 10*position, last action in test, rest in train
Dataset toy_sequence_dataset(const std::vector<std::pair<ItemId, CateId>>& actions) {
  std::vector<RawAction> rows;
  for (std::size_t i = 0; i < actions.size(); ++i)
    rows.push_back({"u", "i" + std::to_string(actions[i].first),
                    "c" + std::to_string(actions[i].second), static_cast<std::int64_t>(10 * i), ""});
  FilterThresholds th{1, 1, 10000, 1};
  Dataset ds = filter_dataset(rows, th);
  const std::int64_t last = 10 * (static_cast<std::int64_t>(actions.size()) - 1);
  temporal_split(ds, SplitBounds{0, last - 5, last - 2, last + 1});
  return ds;
}

}  // namespace

TEST_CASE("make_examples: short sequence keeps all context as recent") {
  // 3 actions, M=20: target = action 3, recent = actions 1..2, distant empty
  Dataset ds = toy_sequence_dataset({{0, 0}, {1, 0}, {2, 0}});
  const auto examples = make_examples(ds, Split::test, 20, 20);
  REQUIRE(examples.size() == 1);
  CHECK(examples[0].recent.size() == 2);
  CHECK(examples[0].distant.empty());
}

TEST_CASE("make_examples: window arithmetic on a 30-action sequence") {
  std::vector<std::pair<ItemId, CateId>> acts;
  for (int i = 0; i < 30; ++i) acts.push_back({i, i % 3});
  Dataset ds = toy_sequence_dataset(acts);
  const auto examples = make_examples(ds, Split::test, 20, 20);
  REQUIRE(examples.size() == 1);
  const Example& ex = examples[0];
  CHECK(ex.position == 29);
  REQUIRE(ex.recent.size() == 20);  // positions 9..28
  for (int i = 0; i < 20; ++i)
    CHECK(ex.recent[static_cast<std::size_t>(i)].first == ds.items.lookup("i" + std::to_string(9 + i)));
  std::size_t distant_total = 0;
  for (const auto& g : ex.distant) distant_total += g.items.size();
  CHECK(distant_total == 9);  // positions 0..8
}

TEST_CASE("make_examples: per-category distant groups keep only the latest T") {
  std::vector<std::pair<ItemId, CateId>> acts;
  for (int i = 0; i < 25; ++i) acts.push_back({i, 0});  // 25 distant candidates of one category
  for (int i = 0; i < 5; ++i) acts.push_back({100 + i, 1});
  acts.push_back({200, 1});  // target
  Dataset ds = toy_sequence_dataset(acts);
  const auto examples = make_examples(ds, Split::test, 5, 20);
  REQUIRE(examples.size() == 1);
  const Example& ex = examples[0];
  REQUIRE(ex.distant.size() == 1);
  CHECK(ex.distant[0].items.size() == 20);
  // latest 20 of the 25, order preserved
  for (int i = 0; i < 20; ++i)
    CHECK(ex.distant[0].items[static_cast<std::size_t>(i)] ==
          ds.items.lookup("i" + std::to_string(5 + i)));
}

TEST_CASE("make_examples matches a brute-force splitter on random sequences") {
  Rng rng(77);
  for (int rep = 0; rep < 100; ++rep) {
    const int len = static_cast<int>(rng.range(2, 60));
    const auto m = static_cast<std::size_t>(rng.range(1, 10));
    const auto t = static_cast<std::size_t>(rng.range(1, 6));
    std::vector<std::pair<ItemId, CateId>> acts;
    for (int i = 0; i < len; ++i)
      acts.push_back({static_cast<ItemId>(rng.range(0, 10)), static_cast<CateId>(rng.range(0, 4))});
    Dataset ds = toy_sequence_dataset(acts);
    const auto& seq = ds.seqs[0].actions;
    for (std::size_t pos = 1; pos < seq.size(); ++pos) {
      const Example ex = make_example_at(ds, 0, pos, m, t);
      const std::size_t recent_n = std::min(m, pos);
      REQUIRE(ex.recent.size() == recent_n);
      for (std::size_t i = 0; i < recent_n; ++i)
        CHECK(ex.recent[i].first == seq[pos - recent_n + i].item);
      std::map<CateId, std::vector<ItemId>> groups;
      for (std::size_t i = 0; i + recent_n < pos; ++i) groups[seq[i].cate].push_back(seq[i].item);
      for (auto& [c, items] : groups)
        if (items.size() > t) items.erase(items.begin(), items.end() - static_cast<std::ptrdiff_t>(t));
      REQUIRE(ex.distant.size() == groups.size());
      for (const auto& g : ex.distant) {
        CHECK(g.items.size() <= t);
        CHECK(g.items == groups[g.cate]);
      }
    }
  }
}

TEST_CASE("negative sampler follows training popularity") {
  Rng rng(99);
  // counts (90, 10) plus an unseen positive: draw frequencies track the ratio
  NegativeSampler s({90, 10, 0}, 10000);
  const auto draws = s.sample(2, rng);
  std::size_t zero = 0;
  for (ItemId v : draws) {
    CHECK(v != 2);
    if (v == 0) ++zero;
  }
  CHECK(static_cast<double>(zero) / 10000.0 == doctest::Approx(0.9).epsilon(0.025));
}

TEST_CASE("negative sampler never returns the positive across 1e6 draws") {
  Rng rng(101);
  NegativeSampler s({5, 5, 5, 5}, 1);
  bool hit = false;
  for (int i = 0; i < 1000000; ++i)
    if (s.draw(2, rng) == 2) hit = true;
  CHECK_FALSE(hit);
}

TEST_CASE("negative sampler is near uniform over uniform counts") {
  Rng rng(103);
  NegativeSampler s({7, 7, 7, 7}, 40000);
  const auto draws = s.sample(0, rng);
  std::array<int, 4> hist{};
  for (ItemId v : draws) ++hist[static_cast<std::size_t>(v)];
  CHECK(hist[0] == 0);
  for (int c = 1; c < 4; ++c)
    CHECK(static_cast<double>(hist[static_cast<std::size_t>(c)]) / 40000.0 ==
          doctest::Approx(1.0 / 3).epsilon(0.06));
}

TEST_CASE("negative sampler rejects single-item vocabularies") {
  CHECK_THROWS_AS(NegativeSampler({42}, 4), DataError);
}

TEST_CASE("negative sampler falls back to uniform when the positive owns all mass") {
  Rng rng(105);
  NegativeSampler s({100, 0, 0}, 100);
  const auto draws = s.sample(0, rng);
  for (ItemId v : draws) CHECK(v != 0);
}

TEST_CASE("synthetic generator plants the permutation rule") {
  SynthConfig cfg;
  cfg.num_users = 10;
  cfg.num_cates = 5;
  cfg.items_per_cate = 8;
  cfg.seq_len = 80;
  cfg.window = 10;
  cfg.seed = 42;
  const SynthData synth = generate_synthetic(cfg);
  const Dataset& ds = synth.dataset;
  for (const auto& u : ds.seqs) {
    for (std::size_t n = 0; n < u.actions.size(); ++n) {
      const CateId c = u.actions[n].cate;
      // brute-force anchor: last same-category action more than `window`
      // steps back
      ItemId anchor = -1;
      for (std::size_t j = 0; j + static_cast<std::size_t>(cfg.window) + 1 <= n; ++j)
        if (u.actions[j].cate == c) anchor = u.actions[j].item;
      if (n <= static_cast<std::size_t>(cfg.window)) CHECK(anchor == -1);
      if (anchor >= 0) {
        const ItemId base = (c - 1) * cfg.items_per_cate;
        CHECK(u.actions[n].item ==
              synth.permutations[static_cast<std::size_t>(c - 1)]
                                [static_cast<std::size_t>(anchor - base)]);
      }
    }
  }
}

TEST_CASE("synthetic generator: one category degenerates to a deterministic chain") {
  SynthConfig cfg;
  cfg.num_users = 10;
  cfg.num_cates = 1;
  cfg.items_per_cate = 12;
  cfg.seq_len = 60;
  cfg.window = 5;
  cfg.seed = 7;
  const SynthData synth = generate_synthetic(cfg);
  const Dataset& ds = synth.dataset;
  // first-order Markov model on the last *distant* item, fit on train targets
  std::map<ItemId, std::map<ItemId, int>> counts;
  std::size_t tested = 0, correct = 0;
  for (const auto& u : ds.seqs) {
    for (std::size_t n = 1; n < u.actions.size(); ++n) {
      ItemId anchor = -1;
      for (std::size_t j = 0; j + static_cast<std::size_t>(cfg.window) + 1 <= n; ++j)
        anchor = u.actions[j].item;
      if (anchor < 0) continue;
      if (ds.split.of(u.actions[n].ts) == Split::train) {
        ++counts[anchor][u.actions[n].item];
      } else if (ds.split.of(u.actions[n].ts) == Split::test) {
        ++tested;
        const auto& row = counts.at(anchor);
        ItemId best = -1;
        int best_count = -1;
        for (const auto& [v, cnt] : row)
          if (cnt > best_count) {
            best = v;
            best_count = cnt;
          }
        if (best == u.actions[n].item) ++correct;
      }
    }
  }
  REQUIRE(tested > 0);
  CHECK(correct == tested);  // Recall@1 == 1.0
}

TEST_CASE("synthetic generator is deterministic and round-trips through disk") {
  SynthConfig cfg;
  cfg.num_users = 6;
  cfg.num_cates = 3;
  cfg.items_per_cate = 5;
  cfg.seq_len = 40;
  cfg.window = 4;
  cfg.intent_noise = 0.4;
  cfg.seed = 11;
  TempDir dir;
  save_dataset(dir.file("a"), generate_synthetic(cfg).dataset);
  save_dataset(dir.file("b"), generate_synthetic(cfg).dataset);
  for (const char* name : {"item_vocab", "cate_vocab", "sequences", "manifest"})
    CHECK(read_file(dir.file("a") + "/" + name) == read_file(dir.file("b") + "/" + name));

  const Dataset loaded = load_dataset(dir.file("a"));
  const Dataset orig = generate_synthetic(cfg).dataset;
  REQUIRE(loaded.seqs.size() == orig.seqs.size());
  for (std::size_t u = 0; u < loaded.seqs.size(); ++u) {
    CHECK(loaded.seqs[u].user == orig.seqs[u].user);
    REQUIRE(loaded.seqs[u].actions.size() == orig.seqs[u].actions.size());
    for (std::size_t i = 0; i < loaded.seqs[u].actions.size(); ++i) {
      CHECK(loaded.seqs[u].actions[i].item == orig.seqs[u].actions[i].item);
      CHECK(loaded.seqs[u].actions[i].cate == orig.seqs[u].actions[i].cate);
      CHECK(loaded.seqs[u].actions[i].ts == orig.seqs[u].actions[i].ts);
    }
  }
  CHECK(loaded.items.tokens == orig.items.tokens);
  CHECK(loaded.items.train_count == orig.items.train_count);
  CHECK(loaded.cates.tokens == orig.cates.tokens);
  CHECK(loaded.split.train_end == orig.split.train_end);
  CHECK(loaded.split.test_end == orig.split.test_end);
}

TEST_CASE("synthetic intent noise only flips toward the noise category") {
  SynthConfig cfg;
  cfg.num_users = 4;
  cfg.num_cates = 5;
  cfg.items_per_cate = 6;
  cfg.seq_len = 66;
  cfg.window = 10;
  cfg.chunk_len = 2;
  cfg.intent_noise = 0.5;
  cfg.seed = 3;
  const SynthData synth = generate_synthetic(cfg);
  CHECK(synth.noise_cate == 1);
  const std::int32_t period = cfg.window + 1;
  std::size_t flipped = 0;
  for (const auto& u : synth.dataset.seqs) {
    for (std::size_t n = 0; n < u.actions.size(); ++n) {
      const auto r = n % static_cast<std::size_t>(period);
      const CateId sched = 1 + (static_cast<std::int32_t>(r) / cfg.chunk_len) % cfg.num_cates;
      if (u.actions[n].cate != sched) {
        CHECK(synth.residue_ambiguous[r]);
        CHECK(u.actions[n].cate == synth.noise_cate);
        ++flipped;
      }
    }
  }
  CHECK(flipped > 0);
}
