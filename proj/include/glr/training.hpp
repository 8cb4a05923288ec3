#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "glr/data.hpp"
#include "glr/model.hpp"
#include "glr/numerics.hpp"

namespace glr {

struct TrainConfig {
  double learning_rate = 0.001;
  std::int32_t batch_size = 64;
  double lambda_initial = 0.5;
  double lambda_final = 1.0;
  std::int32_t patience_lambda = 3;  // epochs without a new valid-cate-loss minimum
  std::int32_t patience_stop = 10;   // epochs without a new valid-joint-loss minimum
  std::int32_t max_epochs = 100;
  std::uint64_t seed = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::int32_t threads = 1;
  bool deterministic_timing = false;  // log seconds=0.000 for bit-reproducible logs

  void validate() const {
    if (learning_rate < 0) throw InvalidInput("TrainConfig: learning_rate must be >= 0");
    if (batch_size < 1) throw InvalidInput("TrainConfig: batch_size must be >= 1");
    if (patience_lambda < 1 || patience_stop < 1)
      throw InvalidInput("TrainConfig: patience values must be >= 1");
    if (max_epochs < 1) throw InvalidInput("TrainConfig: max_epochs must be >= 1");
    if (threads < 1) throw InvalidInput("TrainConfig: threads must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Losses (value level; the trainer builds the same quantities on the tape).
// ---------------------------------------------------------------------------

template <typename Real>
double category_loss(const Vec<Real>& cate_dist, CateId target) {
  if (target < 0 || static_cast<std::size_t>(target) >= cate_dist.size())
    throw InvalidInput("category_loss: target out of range");
  const double p = std::max(static_cast<double>(cate_dist[static_cast<std::size_t>(target)]),
                            Tape<Real>::kProbClamp);
  return -std::log(p);
}

template <typename Real>
double item_loss(const Vec<Real>& mixed_dist, std::size_t positive_index) {
  if (positive_index >= mixed_dist.size())
    throw InvalidInput("item_loss: positive index out of range");
  const double p =
      std::max(static_cast<double>(mixed_dist[positive_index]), Tape<Real>::kProbClamp);
  return -std::log(p);
}

inline double joint_loss(double item, double cate, double lambda) {
  if (lambda < 0 || lambda > 1) throw InvalidInput("joint_loss: lambda must be in [0,1]");
  return lambda * item + (1.0 - lambda) * cate;
}

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

template <typename Real>
struct AdamState {
  ModelParams<Real> m;
  ModelParams<Real> v;
  std::int64_t step = 0;

  static AdamState zeros_like(const ModelParams<Real>& p) {
    return {ModelParams<Real>::zeros_like(p), ModelParams<Real>::zeros_like(p), 0};
  }
};

// Bias-corrected Adam update. Throws NumericError naming the parameter if a
// gradient is non-finite.
template <typename Real>
void adam_step(ModelParams<Real>& params, const ModelParams<Real>& grads, AdamState<Real>& state,
               const TrainConfig& cfg) {
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  auto names = ModelParams<Real>::matrix_names();
  auto tp = params.matrices();
  auto tg = grads.matrices();
  auto tm = state.m.matrices();
  auto tv = state.v.matrices();
  for (std::size_t k = 0; k < ModelParams<Real>::kMatrixCount; ++k) {
    Mat<Real>& theta = *tp[k];
    const Mat<Real>& grad = *tg[k];
    Mat<Real>& m = *tm[k];
    Mat<Real>& v = *tv[k];
    for (std::size_t i = 0; i < theta.a.size(); ++i) {
      const double g = static_cast<double>(grad.a[i]);
      if (!std::isfinite(g))
        throw NumericError(std::string("adam_step: non-finite gradient in parameter '") +
                           names[k] + "'");
      const double mi = b1 * static_cast<double>(m.a[i]) + (1.0 - b1) * g;
      const double vi = b2 * static_cast<double>(v.a[i]) + (1.0 - b2) * g * g;
      m.a[i] = static_cast<Real>(mi);
      v.a[i] = static_cast<Real>(vi);
      const double update =
          cfg.learning_rate * (mi / corr1) / (std::sqrt(vi / corr2) + cfg.adam_eps);
      theta.a[i] = static_cast<Real>(static_cast<double>(theta.a[i]) - update);
    }
  }
}

// ---------------------------------------------------------------------------
// Schedules.
// ---------------------------------------------------------------------------

// lambda switches from initial to final, once and permanently, after
// `patience` consecutive epochs in which the validation category loss fails
// to set a new strict minimum (a tie counts as "does not decrease").
struct LambdaSchedule {
  double lambda = 0.5;
  double final_value = 1.0;
  std::int32_t patience = 3;
  double best = std::numeric_limits<double>::infinity();
  std::int32_t stale = 0;
  bool switched = false;

  void observe(double valid_cate_loss) {
    if (switched) return;
    if (valid_cate_loss < best) {
      best = valid_cate_loss;
      stale = 0;
      return;
    }
    if (++stale >= patience) {
      lambda = final_value;
      switched = true;
    }
  }
};

struct EarlyStopMonitor {
  std::int32_t patience = 10;
  double best = std::numeric_limits<double>::infinity();
  std::int32_t stale = 0;
  bool improved_last = false;

  // Returns true when training should stop.
  bool observe(double valid_joint_loss) {
    if (valid_joint_loss < best) {
      best = valid_joint_loss;
      stale = 0;
      improved_last = true;
      return false;
    }
    improved_last = false;
    return ++stale >= patience;
  }
};

// ---------------------------------------------------------------------------
// Trainer.
// ---------------------------------------------------------------------------

struct EpochSummary {
  std::int32_t epoch = 0;
  double train_item = 0, train_cate = 0;
  double valid_item = 0, valid_cate = 0;
  double lambda = 0;
  double seconds = 0;
};

template <typename Real>
struct TrainResult {
  ModelParams<Real> best_params;
  std::int32_t best_epoch = 0;
  double best_valid_joint = std::numeric_limits<double>::infinity();
  std::int32_t epochs_run = 0;
  std::string stop_reason;
  std::vector<EpochSummary> epochs;
};

template <typename Real>
class Trainer {
 public:
  Trainer(const Dataset& ds, HyperParams hp, TrainConfig cfg, Variant variant = Variant::full)
      : ds_(ds), hp_(hp), cfg_(cfg), variant_(variant),
        sampler_(ds.items.train_count, hp.num_negatives),
        params_(ModelParams<Real>::init(hp, ds.num_items(), ds.num_cates(), cfg.seed)),
        adam_(AdamState<Real>::zeros_like(params_)),
        base_rng_(cfg.seed) {
    hp_.validate();
    cfg_.validate();
    if (variant_ == Variant::short_only) {
      // no intent supervision in the short-only ablation: item loss only
      cfg_.lambda_initial = 1.0;
      cfg_.lambda_final = 1.0;
    }
    train_examples_ = make_examples(ds_, Split::train,
                                    static_cast<std::size_t>(hp_.recent_window),
                                    static_cast<std::size_t>(hp_.distant_cap));
    valid_examples_ = make_examples(ds_, Split::valid,
                                    static_cast<std::size_t>(hp_.recent_window),
                                    static_cast<std::size_t>(hp_.distant_cap));
    if (train_examples_.empty()) throw DataError("train: no training targets");
    lambda_.lambda = cfg_.lambda_initial;
    lambda_.final_value = cfg_.lambda_final;
    lambda_.patience = cfg_.patience_lambda;
    stopper_.patience = cfg_.patience_stop;
  }

  ModelParams<Real>& params() { return params_; }
  const std::vector<Example>& train_examples() const { return train_examples_; }
  double lambda() const { return lambda_.lambda; }

  CheckpointMeta meta() const {
    return CheckpointMeta{hp_, ds_.num_items(), ds_.num_cates(), variant_};
  }

  // One pass over the training examples: shuffle, mini-batches with fresh
  // negatives, mean-of-batch gradients, one Adam step per batch.
  std::pair<double, double> train_epoch(std::int32_t epoch) {
    std::vector<std::uint32_t> order(train_examples_.size());
    std::iota(order.begin(), order.end(), 0u);
    Rng shuffle_rng = base_rng_.fork(0xE0u, static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double sum_item = 0, sum_cate = 0;
    const auto n = order.size();
    ModelParams<Real> grads = ModelParams<Real>::zeros_like(params_);
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg_.batch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg_.batch_size));
      grads.zero();
      const auto [bi, bc] = run_batch(order, start, stop, epoch, grads);
      sum_item += bi;
      sum_cate += bc;
      const Real inv = static_cast<Real>(1.0 / static_cast<double>(stop - start));
      for (Mat<Real>* g : grads.matrices())
        for (auto& x : g->a) x *= inv;
      adam_step(params_, grads, adam_, cfg_);
    }
    return {sum_item / static_cast<double>(n), sum_cate / static_cast<double>(n)};
  }

  // Validation losses: dropout off, negatives fixed per example across epochs
  // so the early-stop and lambda signals compare like against like.
  std::pair<double, double> validate() {
    double sum_item = 0, sum_cate = 0;
    Tape<Real> tape;
    for (std::size_t j = 0; j < valid_examples_.size(); ++j) {
      Rng rng = base_rng_.fork(0x7A11Du, j);
      const auto [li, lc] = example_losses(tape, valid_examples_[j], rng, false, nullptr);
      sum_item += li;
      sum_cate += lc;
    }
    const auto n = static_cast<double>(valid_examples_.size());
    return {sum_item / n, sum_cate / n};
  }

  // Full loop with lambda schedule, early stopping and best-checkpointing.
  TrainResult<Real> run(std::ostream* log = nullptr, const std::string& checkpoint_path = "") {
    if (valid_examples_.empty()) throw DataError("train: no validation targets");
    TrainResult<Real> res;
    res.best_params = params_;
    for (std::int32_t epoch = 1; epoch <= cfg_.max_epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto [ti, tc] = train_epoch(epoch);
      const auto [vi, vc] = validate();
      const double lam = lambda_.lambda;
      const double vjoint = joint_loss(vi, vc, lam);
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (cfg_.deterministic_timing) secs = 0.0;

      EpochSummary s{epoch, ti, tc, vi, vc, lam, secs};
      res.epochs.push_back(s);
      res.epochs_run = epoch;
      if (log) {
        char line[256];
        std::snprintf(line, sizeof line,
                      "epoch=%d train_item_loss=%.6f train_cate_loss=%.6f "
                      "valid_item_loss=%.6f valid_cate_loss=%.6f lambda=%.2f lr=%g seconds=%.3f",
                      epoch, ti, tc, vi, vc, lam, cfg_.learning_rate, secs);
        (*log) << line << '\n';
      }

      const bool stop = stopper_.observe(vjoint);
      if (stopper_.improved_last) {
        res.best_params = params_;
        res.best_epoch = epoch;
        res.best_valid_joint = vjoint;
        if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, params_, meta());
      }
      lambda_.observe(vc);
      if (stop) {
        res.stop_reason = "early_stop";
        return res;
      }
    }
    res.stop_reason = "max_epochs";
    return res;
  }

 private:
  // Forward + losses for one example; accumulates gradients when grads != nullptr.
  std::pair<double, double> example_losses(Tape<Real>& tape, const Example& ex, Rng& rng,
                                           bool with_dropout, ModelParams<Real>* grads) {
    tape.clear();
    const std::vector<ItemId> negatives = sampler_.sample(ex.target_item, rng);
    std::vector<ItemId> candidates;
    candidates.reserve(negatives.size() + 1);
    candidates.push_back(ex.target_item);
    candidates.insert(candidates.end(), negatives.begin(), negatives.end());
    DropoutCtx<Real> drop;
    if (with_dropout && hp_.dropout > 0) {
      drop.rate = hp_.dropout;
      drop.rng = &rng;
    }
    const auto nodes = forward_on_tape(tape, params_, grads, hp_, ex,
                                       std::span<const ItemId>(candidates), variant_, drop);
    const auto l_item = tape.neg_log_pick(nodes.mixed, 0);
    const auto l_cate = tape.neg_log_pick(nodes.cate_dist, ex.target_cate);
    const double lam = lambda_.lambda;
    const auto l_joint =
        tape.combine2(l_item, static_cast<Real>(lam), l_cate, static_cast<Real>(1.0 - lam));
    const double li = static_cast<double>(tape.scalar(l_item));
    const double lc = static_cast<double>(tape.scalar(l_cate));
    if (!std::isfinite(li) || !std::isfinite(lc))
      throw NumericError("train: non-finite loss at user=" + ds_.seqs[static_cast<std::size_t>(ex.user)].user +
                         " position=" + std::to_string(ex.position));
    if (grads) tape.backward(l_joint);
    return {li, lc};
  }

  // Examples within a batch may run on several threads; per-thread gradient
  // buffers are reduced in thread order. threads=1 runs inline and is the
  // bit-reproducible mode.
  std::pair<double, double> run_batch(const std::vector<std::uint32_t>& order, std::size_t start,
                                      std::size_t stop, std::int32_t epoch,
                                      ModelParams<Real>& grads) {
    const auto nthreads = static_cast<std::size_t>(cfg_.threads);
    if (nthreads <= 1) {
      double si = 0, sc = 0;
      Tape<Real> tape;
      for (std::size_t i = start; i < stop; ++i) {
        const std::uint32_t id = order[i];
        Rng rng = base_rng_.fork(0xEAu, static_cast<std::uint64_t>(epoch), id);
        const auto [li, lc] = example_losses(tape, train_examples_[id], rng, true, &grads);
        si += li;
        sc += lc;
      }
      return {si, sc};
    }
    std::vector<ModelParams<Real>> tgrads(nthreads, ModelParams<Real>::zeros_like(params_));
    std::vector<double> titem(nthreads, 0), tcate(nthreads, 0);
    std::vector<std::string> errors(nthreads);
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    for (std::size_t w = 0; w < nthreads; ++w) {
      pool.emplace_back([&, w] {
        try {
          Tape<Real> tape;
          for (std::size_t i = start + w; i < stop; i += nthreads) {
            const std::uint32_t id = order[i];
            Rng rng = base_rng_.fork(0xEAu, static_cast<std::uint64_t>(epoch), id);
            const auto [li, lc] = example_losses(tape, train_examples_[id], rng, true, &tgrads[w]);
            titem[w] += li;
            tcate[w] += lc;
          }
        } catch (const std::exception& e) {
          errors[w] = e.what();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (!e.empty()) throw NumericError(e);
    double si = 0, sc = 0;
    for (std::size_t w = 0; w < nthreads; ++w) {
      si += titem[w];
      sc += tcate[w];
      auto dst = grads.matrices();
      auto src = tgrads[w].matrices();
      for (std::size_t k = 0; k < ModelParams<Real>::kMatrixCount; ++k)
        for (std::size_t i = 0; i < dst[k]->a.size(); ++i) dst[k]->a[i] += src[k]->a[i];
    }
    return {si, sc};
  }

  const Dataset& ds_;
  HyperParams hp_;
  TrainConfig cfg_;
  Variant variant_;
  NegativeSampler sampler_;
  ModelParams<Real> params_;
  AdamState<Real> adam_;
  Rng base_rng_;
  std::vector<Example> train_examples_;
  std::vector<Example> valid_examples_;
  LambdaSchedule lambda_;
  EarlyStopMonitor stopper_;
};

}  // namespace glr
