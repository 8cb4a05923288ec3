#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "glr/data.hpp"
#include "glr/model.hpp"
#include "glr/training.hpp"

namespace glr {

// ---------------------------------------------------------------------------
// Ranking metrics. Ranks are 1-based; ties count against the ground truth
// (every equal-scored competitor ranks ahead of it).
// ---------------------------------------------------------------------------

template <typename Real>
std::size_t pessimistic_rank(std::span<const Real> scores, std::size_t truth) {
  const Real s = scores[truth];
  std::size_t ahead = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i == truth) continue;
    if (scores[i] >= s) ++ahead;
  }
  return ahead + 1;
}

inline double recall_at_k(std::size_t rank, std::size_t k) { return rank <= k ? 1.0 : 0.0; }

inline double mrr_at_k(std::size_t rank, std::size_t k) {
  return rank <= k ? 1.0 / static_cast<double>(rank) : 0.0;
}

struct MetricAccumulator {
  std::size_t k = 100;
  std::size_t targets = 0;
  double recall_sum = 0;
  double mrr_sum = 0;

  void add(std::size_t rank) {
    ++targets;
    recall_sum += recall_at_k(rank, k);
    mrr_sum += mrr_at_k(rank, k);
  }

  double recall() const { return targets ? recall_sum / static_cast<double>(targets) : 0; }
  double mrr() const { return targets ? mrr_sum / static_cast<double>(targets) : 0; }
};

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

struct EvalReport {
  std::string model;
  std::string split;
  std::size_t targets = 0;

  bool has_item_metrics = false;
  std::size_t item_k = 100;
  double item_recall = 0;
  double item_mrr = 0;

  bool has_cate_metrics = false;
  std::size_t cate_k = 3;
  double cate_recall = 0;
  double cate_mrr = 0;

  // item-correct (rank <= item_k) decomposed by whether the ground-truth
  // category was among the top-3 gated categories
  bool has_decomposition = false;
  std::size_t n_cate_correct = 0;
  std::size_t n_item_correct = 0;
  std::size_t n_item_correct_cate_correct = 0;
  std::size_t n_item_correct_cate_wrong = 0;

  double rate(std::size_t num, std::size_t den) const {
    return den ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
  }

  void write_kv(std::ostream& out) const {
    out << "model=" << model << '\n' << "split=" << split << '\n' << "targets=" << targets << '\n';
    if (has_item_metrics) {
      out << "item_k=" << item_k << '\n';
      out << "item_recall=" << std::setprecision(10) << item_recall << '\n';
      out << "item_mrr=" << std::setprecision(10) << item_mrr << '\n';
    }
    if (has_cate_metrics) {
      out << "cate_k=" << cate_k << '\n';
      out << "cate_recall=" << std::setprecision(10) << cate_recall << '\n';
      out << "cate_mrr=" << std::setprecision(10) << cate_mrr << '\n';
    }
    if (has_decomposition) {
      out << "cate_correct=" << n_cate_correct << '\n';
      out << "item_correct=" << n_item_correct << '\n';
      out << "item_correct_given_cate_correct=" << n_item_correct_cate_correct << '\n';
      out << "item_correct_given_cate_wrong=" << n_item_correct_cate_wrong << '\n';
      out << "rate_item_correct=" << std::setprecision(10) << rate(n_item_correct, targets) << '\n';
      out << "rate_item_correct_given_cate_correct=" << std::setprecision(10)
          << rate(n_item_correct_cate_correct, n_cate_correct) << '\n';
      out << "rate_item_correct_given_cate_wrong=" << std::setprecision(10)
          << rate(n_item_correct_cate_wrong, targets - n_cate_correct) << '\n';
    }
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write report: " + path);
    write_kv(out);
  }

  void print_table(std::ostream& out) const {
    out << std::left << std::setw(24) << ("[" + model + "]") << " split=" << split
        << " targets=" << targets << '\n';
    if (has_item_metrics)
      out << "  " << std::left << std::setw(14) << ("Recall@" + std::to_string(item_k))
          << std::fixed << std::setprecision(4) << item_recall << "   " << std::setw(14)
          << ("MRR@" + std::to_string(item_k)) << item_mrr << '\n';
    if (has_cate_metrics)
      out << "  " << std::left << std::setw(14) << ("CateRecall@" + std::to_string(cate_k))
          << std::fixed << std::setprecision(4) << cate_recall << "   " << std::setw(14)
          << ("CateMRR@" + std::to_string(cate_k)) << cate_mrr << '\n';
    if (has_decomposition) {
      out << "  item-correct rate            " << std::fixed << std::setprecision(4)
          << rate(n_item_correct, targets) << '\n';
      out << "  ... given category correct   " << std::fixed << std::setprecision(4)
          << rate(n_item_correct_cate_correct, n_cate_correct) << "  (" << n_cate_correct
          << " targets)\n";
      out << "  ... given category wrong     " << std::fixed << std::setprecision(4)
          << rate(n_item_correct_cate_wrong, targets - n_cate_correct) << "  ("
          << (targets - n_cate_correct) << " targets)\n";
    }
    out.unsetf(std::ios::fixed);
  }
};

struct EvalOptions {
  std::size_t item_k = 100;
  std::size_t cate_k = 3;
};

// ---------------------------------------------------------------------------
// Model evaluation: full-catalog scoring of every split target, plus the
// category head and the gated-category correctness decomposition.
// ---------------------------------------------------------------------------

template <typename Real>
EvalReport evaluate_model(const ModelParams<Real>& params, const HyperParams& hp,
                          const Dataset& ds, Split split, Variant variant = Variant::full,
                          EvalOptions opts = {}) {
  if (params.num_items() != ds.num_items() || params.num_cates() != ds.num_cates())
    throw DataError("evaluate_model: checkpoint vocabulary does not match the dataset (items " +
                    std::to_string(params.num_items()) + " vs " + std::to_string(ds.num_items()) +
                    ", cates " + std::to_string(params.num_cates()) + " vs " +
                    std::to_string(ds.num_cates()) + ")");
  EvalReport rep;
  rep.model = std::string("gatedlongrec_") + variant_name(variant);
  rep.split = split_name(split);
  rep.has_item_metrics = rep.has_cate_metrics = rep.has_decomposition = true;
  rep.item_k = opts.item_k;
  rep.cate_k = opts.cate_k;
  MetricAccumulator item_acc{opts.item_k};
  MetricAccumulator cate_acc{opts.cate_k};

  std::vector<ItemId> catalog(static_cast<std::size_t>(ds.num_items()));
  for (std::size_t i = 0; i < catalog.size(); ++i) catalog[i] = static_cast<ItemId>(i);

  Tape<Real> tape;
  for_each_target(ds, split, [&](std::int32_t u, std::size_t pos) {
    const Example ex = make_example_at(ds, u, pos, static_cast<std::size_t>(hp.recent_window),
                                       static_cast<std::size_t>(hp.distant_cap));
    tape.clear();
    const auto nodes = forward_on_tape(tape, params, static_cast<ModelParams<Real>*>(nullptr), hp,
                                       ex, std::span<const ItemId>(catalog), variant,
                                       DropoutCtx<Real>{});
    const Vec<Real>& mixed = tape.value(nodes.mixed);
    const std::size_t item_rank = pessimistic_rank(std::span<const Real>(mixed),
                                                   static_cast<std::size_t>(ex.target_item));
    item_acc.add(item_rank);
    const Vec<Real>& cdist = tape.value(nodes.cate_dist);
    cate_acc.add(pessimistic_rank(std::span<const Real>(cdist),
                                  static_cast<std::size_t>(ex.target_cate)));

    const bool item_ok = item_rank <= opts.item_k;
    bool cate_ok = false;
    const std::size_t gate_top = std::min<std::size_t>(3, nodes.gated_cates.size());
    for (std::size_t i = 0; i < gate_top; ++i)
      if (nodes.gated_cates[i] == ex.target_cate) cate_ok = true;
    rep.n_cate_correct += cate_ok ? 1 : 0;
    rep.n_item_correct += item_ok ? 1 : 0;
    if (item_ok && cate_ok) ++rep.n_item_correct_cate_correct;
    if (item_ok && !cate_ok) ++rep.n_item_correct_cate_wrong;
  });

  rep.targets = item_acc.targets;
  rep.item_recall = item_acc.recall();
  rep.item_mrr = item_acc.mrr();
  rep.cate_recall = cate_acc.recall();
  rep.cate_mrr = cate_acc.mrr();
  return rep;
}

// ---------------------------------------------------------------------------
// Non-neural baselines. All three work over an abstract symbol space so that
// the *_cate variants reuse the same machinery (symbols = items or
// categories).
// ---------------------------------------------------------------------------

// Static ranking by training popularity, ties by lower index. Symbols absent
// from training rank after all counted ones.
class GlobalPopRanking {
 public:
  explicit GlobalPopRanking(const std::vector<std::int64_t>& train_counts)
      : counts_(train_counts), order_(train_counts.size()), rank_(train_counts.size()) {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<std::int32_t>(i);
    std::sort(order_.begin(), order_.end(), [&](std::int32_t a, std::int32_t b) {
      if (counts_[static_cast<std::size_t>(a)] != counts_[static_cast<std::size_t>(b)])
        return counts_[static_cast<std::size_t>(a)] > counts_[static_cast<std::size_t>(b)];
      return a < b;
    });
    for (std::size_t i = 0; i < order_.size(); ++i)
      rank_[static_cast<std::size_t>(order_[i])] = i + 1;
  }

  std::size_t rank(std::int32_t symbol) const { return rank_[static_cast<std::size_t>(symbol)]; }
  const std::vector<std::int32_t>& order() const { return order_; }
  std::int64_t count(std::int32_t symbol) const { return counts_[static_cast<std::size_t>(symbol)]; }

 private:
  std::vector<std::int64_t> counts_;
  std::vector<std::int32_t> order_;
  std::vector<std::size_t> rank_;
};

// Prefix-popularity ranking, updated sequentially: frequency within the
// user's prefix, ties by recency (more recent first); symbols unseen in the
// prefix follow all seen ones in global-popularity order.
class SeqPopRanker {
 public:
  explicit SeqPopRanker(const GlobalPopRanking& global) : global_(global) {}

  void reset() { seen_.clear(); }

  void observe(std::int32_t symbol, std::size_t position) {
    auto& e = seen_[symbol];
    ++e.count;
    e.last = position;
  }

  std::size_t rank(std::int32_t truth) const {
    auto it = seen_.find(truth);
    if (it != seen_.end()) {
      std::size_t ahead = 0;
      for (const auto& [sym, e] : seen_) {
        if (sym == truth) continue;
        if (e.count > it->second.count ||
            (e.count == it->second.count && e.last > it->second.last))
          ++ahead;
      }
      return ahead + 1;
    }
    // unseen: after every seen symbol, global order among the unseen
    std::size_t ahead = seen_.size();
    const std::size_t global_better = global_.rank(truth) - 1;
    std::size_t seen_global_better = 0;
    for (const auto& [sym, e] : seen_)
      if (global_.rank(sym) < global_.rank(truth)) ++seen_global_better;
    return ahead + (global_better - seen_global_better) + 1;
  }

  // Total order over the catalog (test oracle / diagnostics).
  std::vector<std::int32_t> materialize() const {
    std::vector<std::int32_t> order = global_.order();
    std::sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
      const auto ia = seen_.find(a), ib = seen_.find(b);
      const bool sa = ia != seen_.end(), sb = ib != seen_.end();
      if (sa != sb) return sa;
      if (sa && sb) {
        if (ia->second.count != ib->second.count) return ia->second.count > ib->second.count;
        return ia->second.last > ib->second.last;
      }
      return global_.rank(a) < global_.rank(b);
    });
    return order;
  }

 private:
  struct Entry {
    std::int64_t count = 0;
    std::size_t last = 0;
  };
  const GlobalPopRanking& global_;
  std::unordered_map<std::int32_t, Entry> seen_;
};

// First-order transition model: raw MLE over consecutive training pairs
// within each user sequence; ranking backs off to global popularity for
// conditioning symbols without a training row.
class FirstOrderTransitions {
 public:
  template <typename SymbolOf>
  FirstOrderTransitions(const Dataset& ds, SymbolOf&& symbol_of) {
    for (const auto& u : ds.seqs) {
      for (std::size_t i = 0; i + 1 < u.actions.size(); ++i) {
        if (ds.split.of(u.actions[i + 1].ts) != Split::train) continue;
        ++rows_[symbol_of(u.actions[i])][symbol_of(u.actions[i + 1])];
        ++row_total_[symbol_of(u.actions[i])];
      }
    }
  }

  bool has_row(std::int32_t prev) const { return rows_.find(prev) != rows_.end(); }

  double prob(std::int32_t prev, std::int32_t next) const {
    auto it = rows_.find(prev);
    if (it == rows_.end()) return 0;
    auto jt = it->second.find(next);
    if (jt == it->second.end()) return 0;
    return static_cast<double>(jt->second) / static_cast<double>(row_total_.at(prev));
  }

  double row_sum(std::int32_t prev) const {
    auto it = rows_.find(prev);
    if (it == rows_.end()) return 0;
    double s = 0;
    for (const auto& [next, cnt] : it->second)
      s += static_cast<double>(cnt) / static_cast<double>(row_total_.at(prev));
    return s;
  }

  std::vector<std::int32_t> observed_rows() const {
    std::vector<std::int32_t> keys;
    keys.reserve(rows_.size());
    for (const auto& [k, row] : rows_) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    return keys;
  }

  // Descending transition count (equal denominators make count order the
  // probability order); ties by global-popularity order; symbols outside the
  // row follow in global order.
  std::size_t rank(std::int32_t prev, std::int32_t truth, const GlobalPopRanking& global) const {
    auto it = rows_.find(prev);
    if (it == rows_.end()) return global.rank(truth);
    const auto& row = it->second;
    auto jt = row.find(truth);
    if (jt != row.end()) {
      std::size_t ahead = 0;
      for (const auto& [next, cnt] : row) {
        if (next == truth) continue;
        if (cnt > jt->second || (cnt == jt->second && global.rank(next) < global.rank(truth)))
          ++ahead;
      }
      return ahead + 1;
    }
    std::size_t seen_global_better = 0;
    for (const auto& [next, cnt] : row)
      if (global.rank(next) < global.rank(truth)) ++seen_global_better;
    return row.size() + (global.rank(truth) - 1 - seen_global_better) + 1;
  }

  std::vector<std::int32_t> materialize(std::int32_t prev, const GlobalPopRanking& global) const {
    std::vector<std::int32_t> order = global.order();
    auto it = rows_.find(prev);
    if (it == rows_.end()) return order;
    const auto& row = it->second;
    std::sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) {
      const auto ia = row.find(a), ib = row.find(b);
      const bool sa = ia != row.end(), sb = ib != row.end();
      if (sa != sb) return sa;
      if (sa && sb && ia->second != ib->second) return ia->second > ib->second;
      return global.rank(a) < global.rank(b);
    });
    return order;
  }

 private:
  std::unordered_map<std::int32_t, std::unordered_map<std::int32_t, std::int64_t>> rows_;
  std::unordered_map<std::int32_t, std::int64_t> row_total_;
};

enum class BaselineKind {
  global_pop,
  seq_pop,
  fot,
  global_pop_cate,
  seq_pop_cate,
  fot_cate,
};

inline const char* baseline_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::global_pop: return "global_pop";
    case BaselineKind::seq_pop: return "seq_pop";
    case BaselineKind::fot: return "fot";
    case BaselineKind::global_pop_cate: return "global_pop_cate";
    case BaselineKind::seq_pop_cate: return "seq_pop_cate";
    case BaselineKind::fot_cate: return "fot_cate";
  }
  return "?";
}

inline BaselineKind parse_baseline(const std::string& s) {
  for (BaselineKind k :
       {BaselineKind::global_pop, BaselineKind::seq_pop, BaselineKind::fot,
        BaselineKind::global_pop_cate, BaselineKind::seq_pop_cate, BaselineKind::fot_cate})
    if (s == baseline_name(k)) return k;
  throw InvalidInput("unknown baseline '" + s + "'");
}

inline EvalReport run_baseline(BaselineKind kind, const Dataset& ds, Split split,
                               EvalOptions opts = {}) {
  const bool cate_space = kind == BaselineKind::global_pop_cate ||
                          kind == BaselineKind::seq_pop_cate || kind == BaselineKind::fot_cate;
  const auto symbol_of = [cate_space](const Action& a) { return cate_space ? a.cate : a.item; };
  const auto& counts = cate_space ? ds.cates.train_count : ds.items.train_count;
  const std::size_t k = cate_space ? opts.cate_k : opts.item_k;

  GlobalPopRanking global(counts);
  const bool is_seq = kind == BaselineKind::seq_pop || kind == BaselineKind::seq_pop_cate;
  const bool is_fot = kind == BaselineKind::fot || kind == BaselineKind::fot_cate;
  FirstOrderTransitions fot = is_fot ? FirstOrderTransitions(ds, symbol_of)
                                     : FirstOrderTransitions(Dataset{}, symbol_of);

  MetricAccumulator acc{k};
  SeqPopRanker seq(global);
  for (const auto& u : ds.seqs) {
    seq.reset();
    for (std::size_t p = 0; p < u.actions.size(); ++p) {
      const std::int32_t sym = symbol_of(u.actions[p]);
      if (p >= 1 && ds.split.of(u.actions[p].ts) == split) {
        std::size_t rank;
        if (is_seq)
          rank = seq.rank(sym);
        else if (is_fot)
          rank = fot.rank(symbol_of(u.actions[p - 1]), sym, global);
        else
          rank = global.rank(sym);
        acc.add(rank);
      }
      if (is_seq) seq.observe(sym, p);
    }
  }

  EvalReport rep;
  rep.model = baseline_name(kind);
  rep.split = split_name(split);
  rep.targets = acc.targets;
  if (cate_space) {
    rep.has_cate_metrics = true;
    rep.cate_k = k;
    rep.cate_recall = acc.recall();
    rep.cate_mrr = acc.mrr();
  } else {
    rep.has_item_metrics = true;
    rep.item_k = k;
    rep.item_recall = acc.recall();
    rep.item_mrr = acc.mrr();
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Ablations: train a variant with the identical pipeline (the missing branch
// is replaced by a zero vector inside forward) and evaluate it.
// ---------------------------------------------------------------------------

template <typename Real>
struct AblationResult {
  TrainResult<Real> training;
  EvalReport report;
};

template <typename Real>
AblationResult<Real> run_ablation(Variant variant, const Dataset& ds, const HyperParams& hp,
                                  const TrainConfig& cfg, Split eval_split = Split::test,
                                  EvalOptions opts = {}, std::ostream* log = nullptr) {
  Trainer<Real> trainer(ds, hp, cfg, variant);
  AblationResult<Real> out;
  out.training = trainer.run(log);
  out.report = evaluate_model(out.training.best_params, hp, ds, eval_split, variant, opts);
  return out;
}

}  // namespace glr
