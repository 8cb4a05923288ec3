#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "glr/rng.hpp"

namespace glr {

// Thrown on rejected input: dimension mismatches, empty operands, bad ids.
class InvalidInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown when a numeric op produces NaN/Inf (message names the op).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Real>
using Vec = std::vector<Real>;

// Dense row-major matrix. Also used for gradient and Adam moment buffers,
// which share shapes with their parameters.
template <typename Real>
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Real> a;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, Real(0)) {}

  Real& at(std::size_t r, std::size_t c) { return a[r * cols + c]; }
  const Real& at(std::size_t r, std::size_t c) const { return a[r * cols + c]; }
  std::size_t size() const { return a.size(); }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = Real(1);
    return m;
  }

  void fill(Real v) { std::fill(a.begin(), a.end(), v); }

  // i.i.d. uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)).
  void init_uniform(std::size_t fan_in, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : a) v = static_cast<Real>(rng.uniform(-s, s));
  }

  bool operator==(const Mat& o) const { return rows == o.rows && cols == o.cols && a == o.a; }
};

template <typename Real>
bool all_finite(const Vec<Real>& v) {
  for (Real x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Value-level primitives. These are the single source of forward math; the
// tape ops below reuse them.
// ---------------------------------------------------------------------------

template <typename Real>
Real stable_sigmoid(Real x) {
  if (x >= Real(0)) {
    const Real e = std::exp(-x);
    return Real(1) / (Real(1) + e);
  }
  const Real e = std::exp(x);
  return e / (Real(1) + e);
}

// y = W x
template <typename Real>
Vec<Real> linear_map(const Mat<Real>& w, const Vec<Real>& x) {
  if (w.cols != x.size())
    throw InvalidInput("linear_map: matrix is " + std::to_string(w.rows) + "x" +
                       std::to_string(w.cols) + " but input has length " +
                       std::to_string(x.size()));
  Vec<Real> y(w.rows, Real(0));
  for (std::size_t i = 0; i < w.rows; ++i) {
    Real acc = 0;
    const Real* row = &w.a[i * w.cols];
    for (std::size_t j = 0; j < w.cols; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
  return y;
}

template <typename Real>
Vec<Real> sigmoid(const Vec<Real>& x) {
  Vec<Real> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = stable_sigmoid(x[i]);
  return y;
}

template <typename Real>
Vec<Real> tanh_of(const Vec<Real>& x) {
  Vec<Real> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
  return y;
}

// Max-subtracted softmax; invariant to adding a constant to all logits.
template <typename Real>
Vec<Real> softmax(const Vec<Real>& logits) {
  if (logits.empty()) throw InvalidInput("softmax: empty input");
  const Real m = *std::max_element(logits.begin(), logits.end());
  Vec<Real> y(logits.size());
  Real sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    y[i] = std::exp(logits[i] - m);
    sum += y[i];
  }
  for (auto& v : y) v /= sum;
  return y;
}

template <typename Real>
Vec<Real> elementwise_mul(const Vec<Real>& a, const Vec<Real>& b) {
  if (a.size() != b.size()) throw InvalidInput("elementwise mul: length mismatch");
  Vec<Real> y(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
  return y;
}

template <typename Real>
Vec<Real> elementwise_add(const Vec<Real>& a, const Vec<Real>& b) {
  if (a.size() != b.size()) throw InvalidInput("elementwise add: length mismatch");
  Vec<Real> y(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

// z*a + (1-z)*b, elementwise.
template <typename Real>
Vec<Real> elementwise_blend(const Vec<Real>& z, const Vec<Real>& a, const Vec<Real>& b) {
  if (z.size() != a.size() || z.size() != b.size())
    throw InvalidInput("elementwise blend: length mismatch");
  Vec<Real> y(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) y[i] = z[i] * a[i] + (Real(1) - z[i]) * b[i];
  return y;
}

// ---------------------------------------------------------------------------
// Reverse-mode tape.
//
// A Tape is single-owner: built and consumed by one logical thread. Ids are
// dense and increasing, so iterating nodes in reverse is a valid topological
// order for backward. Parameter matrices are referenced by pointer together
// with an optional gradient buffer; backward() *accumulates* into those
// buffers (callers zero them between steps), while node-local adjoints are
// reset on every call so a second backward over the same tape reproduces the
// same parameter contributions bit for bit.
// ---------------------------------------------------------------------------

template <typename Real>
class Tape {
 public:
  using Id = std::uint32_t;

  enum class Op : std::uint8_t {
    input,
    linear,
    col_lookup,
    dot_cols,
    sigmoid_op,
    tanh_op,
    mul,
    add,
    blend,
    concat,
    softmax_op,
    pick_subset,
    mix,
    neg_log_pick,
    combine2,
  };

  static const char* op_name(Op op) {
    switch (op) {
      case Op::input: return "input";
      case Op::linear: return "linear";
      case Op::col_lookup: return "col_lookup";
      case Op::dot_cols: return "dot_cols";
      case Op::sigmoid_op: return "sigmoid";
      case Op::tanh_op: return "tanh";
      case Op::mul: return "mul";
      case Op::add: return "add";
      case Op::blend: return "blend";
      case Op::concat: return "concat";
      case Op::softmax_op: return "softmax";
      case Op::pick_subset: return "pick_subset";
      case Op::mix: return "mix";
      case Op::neg_log_pick: return "neg_log_pick";
      case Op::combine2: return "combine2";
    }
    return "?";
  }

  // Cross-entropy clamp: probabilities below this contribute a constant loss
  // (and zero gradient).
  static constexpr double kProbClamp = 1e-12;

  void set_check_finite(bool on) { check_finite_ = on; }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  const Vec<Real>& value(Id id) const { return nodes_[id].val; }
  const Vec<Real>& grad(Id id) const { return nodes_[id].grad; }

  Id input(Vec<Real> v) {
    Node n;
    n.op = Op::input;
    n.val = std::move(v);
    return push(std::move(n));
  }

  Id zeros(std::size_t len) { return input(Vec<Real>(len, Real(0))); }

  Id linear(const Mat<Real>& w, Mat<Real>* dw, Id x) {
    Node n;
    n.op = Op::linear;
    n.in0 = x;
    n.mat = &w;
    n.mat_grad = dw;
    n.val = linear_map(w, nodes_[x].val);
    return push(std::move(n));
  }

  Id col_lookup(const Mat<Real>& e, Mat<Real>* de, std::int32_t col) {
    if (col < 0 || static_cast<std::size_t>(col) >= e.cols)
      throw InvalidInput("col_lookup: column " + std::to_string(col) + " out of range");
    Node n;
    n.op = Op::col_lookup;
    n.mat = &e;
    n.mat_grad = de;
    n.cols.push_back(col);
    n.val.resize(e.rows);
    for (std::size_t r = 0; r < e.rows; ++r) n.val[r] = e.at(r, static_cast<std::size_t>(col));
    return push(std::move(n));
  }

  // y[i] = <E[:, cols[i]], h>. Duplicate columns are allowed; their gradients
  // accumulate.
  Id dot_cols(const Mat<Real>& e, Mat<Real>* de, std::vector<std::int32_t> cols, Id h) {
    if (e.rows != nodes_[h].val.size()) throw InvalidInput("dot_cols: dimension mismatch");
    Node n;
    n.op = Op::dot_cols;
    n.in0 = h;
    n.mat = &e;
    n.mat_grad = de;
    n.cols = std::move(cols);
    n.val.resize(n.cols.size());
    const Vec<Real>& hv = nodes_[h].val;
    for (std::size_t i = 0; i < n.cols.size(); ++i) {
      const auto c = static_cast<std::size_t>(n.cols[i]);
      if (c >= e.cols) throw InvalidInput("dot_cols: column out of range");
      Real acc = 0;
      for (std::size_t r = 0; r < e.rows; ++r) acc += e.a[r * e.cols + c] * hv[r];
      n.val[i] = acc;
    }
    return push(std::move(n));
  }

  Id sigmoid(Id x) {
    Node n;
    n.op = Op::sigmoid_op;
    n.in0 = x;
    n.val = glr::sigmoid(nodes_[x].val);
    return push(std::move(n));
  }

  Id tanh(Id x) {
    Node n;
    n.op = Op::tanh_op;
    n.in0 = x;
    n.val = tanh_of(nodes_[x].val);
    return push(std::move(n));
  }

  Id mul(Id a, Id b) {
    Node n;
    n.op = Op::mul;
    n.in0 = a;
    n.in1 = b;
    n.val = elementwise_mul(nodes_[a].val, nodes_[b].val);
    return push(std::move(n));
  }

  Id add(Id a, Id b) {
    Node n;
    n.op = Op::add;
    n.in0 = a;
    n.in1 = b;
    n.val = elementwise_add(nodes_[a].val, nodes_[b].val);
    return push(std::move(n));
  }

  // z*a + (1-z)*b
  Id blend(Id z, Id a, Id b) {
    Node n;
    n.op = Op::blend;
    n.in0 = z;
    n.in1 = a;
    n.in2 = b;
    n.val = elementwise_blend(nodes_[z].val, nodes_[a].val, nodes_[b].val);
    return push(std::move(n));
  }

  Id concat(Id a, Id b) {
    Node n;
    n.op = Op::concat;
    n.in0 = a;
    n.in1 = b;
    n.val = nodes_[a].val;
    n.val.insert(n.val.end(), nodes_[b].val.begin(), nodes_[b].val.end());
    return push(std::move(n));
  }

  Id softmax(Id x) {
    Node n;
    n.op = Op::softmax_op;
    n.in0 = x;
    n.val = glr::softmax(nodes_[x].val);
    return push(std::move(n));
  }

  Id pick_subset(Id x, std::vector<std::int32_t> idx) {
    Node n;
    n.op = Op::pick_subset;
    n.in0 = x;
    n.cols = std::move(idx);
    n.val.resize(n.cols.size());
    const Vec<Real>& xv = nodes_[x].val;
    for (std::size_t i = 0; i < n.cols.size(); ++i) {
      if (n.cols[i] < 0 || static_cast<std::size_t>(n.cols[i]) >= xv.size())
        throw InvalidInput("pick_subset: index out of range");
      n.val[i] = xv[static_cast<std::size_t>(n.cols[i])];
    }
    return push(std::move(n));
  }

  // y = sum_i weights[i] * parts[i]; weights has length |parts|.
  Id mix(Id weights, std::vector<Id> parts) {
    const Vec<Real>& wv = nodes_[weights].val;
    if (wv.size() != parts.size()) throw InvalidInput("mix: weight/part count mismatch");
    if (parts.empty()) throw InvalidInput("mix: no parts");
    const std::size_t len = nodes_[parts[0]].val.size();
    Node n;
    n.op = Op::mix;
    n.in0 = weights;
    n.parts = std::move(parts);
    n.val.assign(len, Real(0));
    for (std::size_t i = 0; i < n.parts.size(); ++i) {
      const Vec<Real>& pv = nodes_[n.parts[i]].val;
      if (pv.size() != len) throw InvalidInput("mix: parts have mismatched candidate sets");
      for (std::size_t j = 0; j < len; ++j) n.val[j] += wv[i] * pv[j];
    }
    return push(std::move(n));
  }

  // -log(max(p[target], clamp)); scalar output.
  Id neg_log_pick(Id probs, std::int32_t target) {
    const Vec<Real>& pv = nodes_[probs].val;
    if (target < 0 || static_cast<std::size_t>(target) >= pv.size())
      throw InvalidInput("neg_log_pick: target index out of range");
    Node n;
    n.op = Op::neg_log_pick;
    n.in0 = probs;
    n.target = target;
    const double p = std::max(static_cast<double>(pv[static_cast<std::size_t>(target)]), kProbClamp);
    n.val = {static_cast<Real>(-std::log(p))};
    return push(std::move(n));
  }

  // ca*a + cb*b elementwise (used for the joint loss on scalars).
  Id combine2(Id a, Real ca, Id b, Real cb) {
    if (nodes_[a].val.size() != nodes_[b].val.size())
      throw InvalidInput("combine2: length mismatch");
    Node n;
    n.op = Op::combine2;
    n.in0 = a;
    n.in1 = b;
    n.c0 = ca;
    n.c1 = cb;
    n.val.resize(nodes_[a].val.size());
    for (std::size_t i = 0; i < n.val.size(); ++i)
      n.val[i] = ca * nodes_[a].val[i] + cb * nodes_[b].val[i];
    return push(std::move(n));
  }

  Real scalar(Id id) const {
    if (nodes_[id].val.size() != 1) throw InvalidInput("scalar: node is not scalar");
    return nodes_[id].val[0];
  }

  void backward(Id root) {
    if (nodes_[root].val.size() != 1)
      throw InvalidInput("backward: root must be scalar; use the seeded overload otherwise");
    backward(root, Vec<Real>{Real(1)});
  }

  void backward(Id root, const Vec<Real>& seed) {
    if (seed.size() != nodes_[root].val.size())
      throw InvalidInput("backward: seed length mismatch");
    for (auto& n : nodes_) n.grad.clear();
    nodes_[root].grad = seed;
    for (std::size_t k = root + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (n.grad.empty()) continue;
      step_backward(n);
    }
  }

 private:
  struct Node {
    Op op{};
    Id in0 = 0, in1 = 0, in2 = 0;
    const Mat<Real>* mat = nullptr;
    Mat<Real>* mat_grad = nullptr;
    std::vector<std::int32_t> cols;
    std::vector<Id> parts;
    std::int32_t target = -1;
    Real c0 = 0, c1 = 0;
    Vec<Real> val;
    Vec<Real> grad;
  };

  Id push(Node&& n) {
    if (check_finite_ && !all_finite(n.val))
      throw NumericError(std::string("non-finite value produced by op '") + op_name(n.op) + "'");
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
  }

  Vec<Real>& grad_of(Id id, std::size_t len) {
    Vec<Real>& g = nodes_[id].grad;
    if (g.empty()) g.assign(len, Real(0));
    return g;
  }

  void step_backward(Node& n) {
    const Vec<Real>& g = n.grad;
    switch (n.op) {
      case Op::input:
        break;
      case Op::linear: {
        const Vec<Real>& x = nodes_[n.in0].val;
        Vec<Real>& gx = grad_of(n.in0, x.size());
        const Mat<Real>& w = *n.mat;
        for (std::size_t i = 0; i < w.rows; ++i) {
          const Real gi = g[i];
          if (n.mat_grad) {
            Real* drow = &n.mat_grad->a[i * w.cols];
            for (std::size_t j = 0; j < w.cols; ++j) drow[j] += gi * x[j];
          }
          const Real* row = &w.a[i * w.cols];
          for (std::size_t j = 0; j < w.cols; ++j) gx[j] += row[j] * gi;
        }
        break;
      }
      case Op::col_lookup: {
        if (n.mat_grad) {
          const auto c = static_cast<std::size_t>(n.cols[0]);
          for (std::size_t r = 0; r < n.mat->rows; ++r)
            n.mat_grad->a[r * n.mat->cols + c] += g[r];
        }
        break;
      }
      case Op::dot_cols: {
        const Vec<Real>& h = nodes_[n.in0].val;
        Vec<Real>& gh = grad_of(n.in0, h.size());
        const Mat<Real>& e = *n.mat;
        for (std::size_t i = 0; i < n.cols.size(); ++i) {
          const auto c = static_cast<std::size_t>(n.cols[i]);
          const Real gi = g[i];
          for (std::size_t r = 0; r < e.rows; ++r) {
            gh[r] += e.a[r * e.cols + c] * gi;
            if (n.mat_grad) n.mat_grad->a[r * e.cols + c] += gi * h[r];
          }
        }
        break;
      }
      case Op::sigmoid_op: {
        Vec<Real>& gx = grad_of(n.in0, n.val.size());
        for (std::size_t i = 0; i < n.val.size(); ++i)
          gx[i] += g[i] * n.val[i] * (Real(1) - n.val[i]);
        break;
      }
      case Op::tanh_op: {
        Vec<Real>& gx = grad_of(n.in0, n.val.size());
        for (std::size_t i = 0; i < n.val.size(); ++i)
          gx[i] += g[i] * (Real(1) - n.val[i] * n.val[i]);
        break;
      }
      case Op::mul: {
        const Vec<Real>& a = nodes_[n.in0].val;
        const Vec<Real>& b = nodes_[n.in1].val;
        Vec<Real>& ga = grad_of(n.in0, a.size());
        Vec<Real>& gb = grad_of(n.in1, b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
          ga[i] += g[i] * b[i];
          gb[i] += g[i] * a[i];
        }
        break;
      }
      case Op::add: {
        Vec<Real>& ga = grad_of(n.in0, n.val.size());
        Vec<Real>& gb = grad_of(n.in1, n.val.size());
        for (std::size_t i = 0; i < n.val.size(); ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::blend: {
        const Vec<Real>& z = nodes_[n.in0].val;
        const Vec<Real>& a = nodes_[n.in1].val;
        const Vec<Real>& b = nodes_[n.in2].val;
        Vec<Real>& gz = grad_of(n.in0, z.size());
        Vec<Real>& ga = grad_of(n.in1, a.size());
        Vec<Real>& gb = grad_of(n.in2, b.size());
        for (std::size_t i = 0; i < z.size(); ++i) {
          gz[i] += g[i] * (a[i] - b[i]);
          ga[i] += g[i] * z[i];
          gb[i] += g[i] * (Real(1) - z[i]);
        }
        break;
      }
      case Op::concat: {
        const std::size_t la = nodes_[n.in0].val.size();
        const std::size_t lb = nodes_[n.in1].val.size();
        Vec<Real>& ga = grad_of(n.in0, la);
        Vec<Real>& gb = grad_of(n.in1, lb);
        for (std::size_t i = 0; i < la; ++i) ga[i] += g[i];
        for (std::size_t i = 0; i < lb; ++i) gb[i] += g[la + i];
        break;
      }
      case Op::softmax_op: {
        Vec<Real>& gx = grad_of(n.in0, n.val.size());
        Real dot = 0;
        for (std::size_t i = 0; i < n.val.size(); ++i) dot += g[i] * n.val[i];
        for (std::size_t i = 0; i < n.val.size(); ++i)
          gx[i] += n.val[i] * (g[i] - dot);
        break;
      }
      case Op::pick_subset: {
        Vec<Real>& gx = grad_of(n.in0, nodes_[n.in0].val.size());
        for (std::size_t i = 0; i < n.cols.size(); ++i)
          gx[static_cast<std::size_t>(n.cols[i])] += g[i];
        break;
      }
      case Op::mix: {
        const Vec<Real>& w = nodes_[n.in0].val;
        Vec<Real>& gw = grad_of(n.in0, w.size());
        for (std::size_t i = 0; i < n.parts.size(); ++i) {
          const Vec<Real>& pv = nodes_[n.parts[i]].val;
          Vec<Real>& gp = grad_of(n.parts[i], pv.size());
          Real acc = 0;
          for (std::size_t j = 0; j < pv.size(); ++j) {
            acc += g[j] * pv[j];
            gp[j] += g[j] * w[i];
          }
          gw[i] += acc;
        }
        break;
      }
      case Op::neg_log_pick: {
        const Vec<Real>& p = nodes_[n.in0].val;
        Vec<Real>& gp = grad_of(n.in0, p.size());
        const auto t = static_cast<std::size_t>(n.target);
        if (static_cast<double>(p[t]) > kProbClamp) gp[t] += -g[0] / p[t];
        break;
      }
      case Op::combine2: {
        Vec<Real>& ga = grad_of(n.in0, n.val.size());
        Vec<Real>& gb = grad_of(n.in1, n.val.size());
        for (std::size_t i = 0; i < n.val.size(); ++i) {
          ga[i] += n.c0 * g[i];
          gb[i] += n.c1 * g[i];
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  bool check_finite_ = false;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checker.
// ---------------------------------------------------------------------------

template <typename Real>
struct GradCheckParam {
  std::string name;
  Mat<Real>* theta = nullptr;      // perturbed in place, restored after
  const Mat<Real>* grad = nullptr; // analytic gradient to verify
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

// Central differences (f(t+eps)-f(t-eps))/(2 eps) against the supplied
// analytic gradients. Relative error per coordinate is
// |a-n| / max(1e-8, |a|+|n|). Checks every coordinate when a parameter has at
// most max_coords entries, otherwise a random sample of max_coords of them.
template <typename Real, typename LossFn>
GradCheckReport gradient_check(LossFn&& loss, std::span<const GradCheckParam<Real>> params,
                               Real eps, std::size_t max_coords, Rng& rng) {
  static_assert(sizeof(Real) >= 8, "gradient_check requires 64-bit precision");
  GradCheckReport rep;
  for (const auto& p : params) {
    const std::size_t n = p.theta->size();
    std::vector<std::size_t> coords;
    if (n <= max_coords) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      coords.reserve(max_coords);
      for (std::size_t i = 0; i < max_coords; ++i)
        coords.push_back(static_cast<std::size_t>(rng.below(n)));
    }
    for (std::size_t idx : coords) {
      const Real saved = p.theta->a[idx];
      p.theta->a[idx] = saved + eps;
      const double fp = static_cast<double>(loss());
      p.theta->a[idx] = saved - eps;
      const double fm = static_cast<double>(loss());
      p.theta->a[idx] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("gradient_check: non-finite loss at parameter '" + p.name + "'");
      const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
      const double analytic = static_cast<double>(p.grad->a[idx]);
      const double rel =
          std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = p.name;
        rep.worst_index = idx;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace glr
