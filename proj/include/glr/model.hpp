#pragma once

#include <array>
#include <bit>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "glr/data.hpp"
#include "glr/numerics.hpp"
#include "glr/rng.hpp"

namespace glr {

// ---------------------------------------------------------------------------
// Parameters.
// ---------------------------------------------------------------------------

// One GRU cell: three affine maps of the concatenated [h_prev, input] (plus a
// trailing constant-1 column when the bias flag is on). No separate bias
// vectors by default.
template <typename Real>
struct GruParams {
  Mat<Real> w_reset;
  Mat<Real> w_update;
  Mat<Real> w_candidate;

  std::size_t hidden() const { return w_reset.rows; }

  static GruParams sized(std::size_t hidden, std::size_t input, bool bias) {
    const std::size_t cols = hidden + input + (bias ? 1 : 0);
    GruParams p;
    p.w_reset = Mat<Real>(hidden, cols);
    p.w_update = Mat<Real>(hidden, cols);
    p.w_candidate = Mat<Real>(hidden, cols);
    return p;
  }
};

struct HyperParams {
  std::int32_t recent_window = 20;    // M
  std::int32_t distant_cap = 20;      // T
  std::int32_t top_k = 3;             // k
  std::int32_t num_negatives = 1024;  // Z
  double dropout = 0.2;
  std::int32_t item_dim = 300;   // d_e
  std::int32_t cate_dim = 64;    // d_c; the intent encoder's hidden size is tied to it
  std::int32_t short_dim = 300;  // d_s
  std::int32_t long_dim = 300;   // d_l
  std::int32_t fuse_dim = 300;   // d_f; must equal item_dim (tied item output layer)
  bool gru_bias = false;

  void validate() const {
    if (recent_window < 1 || distant_cap < 1 || top_k < 1 || num_negatives < 1)
      throw InvalidInput("HyperParams: M, T, k, Z must all be >= 1");
    if (dropout < 0 || dropout >= 1) throw InvalidInput("HyperParams: dropout must be in [0,1)");
    if (item_dim < 1 || cate_dim < 1 || short_dim < 1 || long_dim < 1)
      throw InvalidInput("HyperParams: dimensions must be positive");
    if (fuse_dim != item_dim)
      throw InvalidInput("HyperParams: fuse_dim must equal item_dim (tied item output layer)");
  }
};

enum class Variant { full, short_only, long_only };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::short_only: return "short";
    case Variant::long_only: return "long";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "full" || s.empty()) return Variant::full;
  if (s == "short") return Variant::short_only;
  if (s == "long") return Variant::long_only;
  throw InvalidInput("unknown variant '" + s + "' (expected full|short|long)");
}

// All learnable tensors. Item and category embeddings are tied: the same
// matrix is both the input embedding and the output scoring layer.
template <typename Real>
struct ModelParams {
  Mat<Real> item_embed;  // d_e x |V|
  Mat<Real> cate_embed;  // d_c x |C|
  GruParams<Real> gru_intent;
  GruParams<Real> gru_long;
  GruParams<Real> gru_short;
  Mat<Real> fuse;  // d_f x (d_l + d_s)

  std::int32_t num_items() const { return static_cast<std::int32_t>(item_embed.cols); }
  std::int32_t num_cates() const { return static_cast<std::int32_t>(cate_embed.cols); }

  static constexpr std::size_t kMatrixCount = 12;

  static std::array<const char*, kMatrixCount> matrix_names() {
    return {"item_embed",   "cate_embed",   "intent.reset", "intent.update",
            "intent.candidate", "long.reset", "long.update", "long.candidate",
            "short.reset",  "short.update", "short.candidate", "fuse"};
  }

  std::array<Mat<Real>*, kMatrixCount> matrices() {
    return {&item_embed,          &cate_embed,          &gru_intent.w_reset,
            &gru_intent.w_update, &gru_intent.w_candidate, &gru_long.w_reset,
            &gru_long.w_update,   &gru_long.w_candidate, &gru_short.w_reset,
            &gru_short.w_update,  &gru_short.w_candidate, &fuse};
  }

  std::array<const Mat<Real>*, kMatrixCount> matrices() const {
    return {&item_embed,          &cate_embed,          &gru_intent.w_reset,
            &gru_intent.w_update, &gru_intent.w_candidate, &gru_long.w_reset,
            &gru_long.w_update,   &gru_long.w_candidate, &gru_short.w_reset,
            &gru_short.w_update,  &gru_short.w_candidate, &fuse};
  }

  void zero() {
    for (Mat<Real>* m : matrices()) m->fill(Real(0));
  }

  static ModelParams sized(const HyperParams& hp, std::int32_t num_items, std::int32_t num_cates) {
    hp.validate();
    ModelParams p;
    p.item_embed = Mat<Real>(static_cast<std::size_t>(hp.item_dim), static_cast<std::size_t>(num_items));
    p.cate_embed = Mat<Real>(static_cast<std::size_t>(hp.cate_dim), static_cast<std::size_t>(num_cates));
    p.gru_intent = GruParams<Real>::sized(static_cast<std::size_t>(hp.cate_dim),
                                          static_cast<std::size_t>(hp.cate_dim), hp.gru_bias);
    p.gru_long = GruParams<Real>::sized(static_cast<std::size_t>(hp.long_dim),
                                        static_cast<std::size_t>(hp.item_dim), hp.gru_bias);
    p.gru_short = GruParams<Real>::sized(static_cast<std::size_t>(hp.short_dim),
                                         static_cast<std::size_t>(hp.item_dim), hp.gru_bias);
    p.fuse = Mat<Real>(static_cast<std::size_t>(hp.fuse_dim),
                       static_cast<std::size_t>(hp.long_dim + hp.short_dim));
    return p;
  }

  // Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init; embeddings use their
  // vector length as fan_in, affine maps their input width.
  static ModelParams init(const HyperParams& hp, std::int32_t num_items, std::int32_t num_cates,
                          std::uint64_t seed) {
    ModelParams p = sized(hp, num_items, num_cates);
    Rng rng(seed);
    p.item_embed.init_uniform(p.item_embed.rows, rng);
    p.cate_embed.init_uniform(p.cate_embed.rows, rng);
    for (GruParams<Real>* g : {&p.gru_intent, &p.gru_long, &p.gru_short}) {
      g->w_reset.init_uniform(g->w_reset.cols, rng);
      g->w_update.init_uniform(g->w_update.cols, rng);
      g->w_candidate.init_uniform(g->w_candidate.cols, rng);
    }
    p.fuse.init_uniform(p.fuse.cols, rng);
    return p;
  }

  static ModelParams zeros_like(const ModelParams& o) {
    ModelParams p = o;
    p.zero();
    return p;
  }

  bool operator==(const ModelParams& o) const {
    auto a = matrices();
    auto b = o.matrices();
    for (std::size_t i = 0; i < kMatrixCount; ++i)
      if (!(*a[i] == *b[i])) return false;
    return true;
  }
};

template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& in) {
  ModelParams<To> out;
  auto src = in.matrices();
  auto convert = [](const Mat<From>& m) {
    Mat<To> r(m.rows, m.cols);
    for (std::size_t i = 0; i < m.a.size(); ++i) r.a[i] = static_cast<To>(m.a[i]);
    return r;
  };
  out.item_embed = convert(*src[0]);
  out.cate_embed = convert(*src[1]);
  out.gru_intent.w_reset = convert(*src[2]);
  out.gru_intent.w_update = convert(*src[3]);
  out.gru_intent.w_candidate = convert(*src[4]);
  out.gru_long.w_reset = convert(*src[5]);
  out.gru_long.w_update = convert(*src[6]);
  out.gru_long.w_candidate = convert(*src[7]);
  out.gru_short.w_reset = convert(*src[8]);
  out.gru_short.w_update = convert(*src[9]);
  out.gru_short.w_candidate = convert(*src[10]);
  out.fuse = convert(*src[11]);
  return out;
}

// ---------------------------------------------------------------------------
// Tape-level building blocks.
// ---------------------------------------------------------------------------

// Per-example dropout context. Fresh mask per GRU step, inverted scaling so
// inference needs no rescale. rng == nullptr disables dropout.
template <typename Real>
struct DropoutCtx {
  double rate = 0;
  Rng* rng = nullptr;

  bool active() const { return rng != nullptr && rate > 0; }

  Vec<Real> mask(std::size_t len) const {
    Vec<Real> m(len);
    const Real scale = static_cast<Real>(1.0 / (1.0 - rate));
    for (auto& v : m) v = rng->bernoulli(1.0 - rate) ? scale : Real(0);
    return m;
  }
};

// r = sigmoid(Wr [h, e]); z = sigmoid(Wz [h, e]);
// hc = tanh(Wc [r*h, e]); h' = z*h + (1-z)*hc.
// The update gate keeps the *previous* state.
template <typename Real>
typename Tape<Real>::Id gru_step_on_tape(Tape<Real>& t, const GruParams<Real>& p,
                                         GruParams<Real>* g, typename Tape<Real>::Id h_prev,
                                         typename Tape<Real>::Id e, bool bias,
                                         typename Tape<Real>::Id one = 0) {
  using Id = typename Tape<Real>::Id;
  auto with_bias = [&](Id x) { return bias ? t.concat(x, one) : x; };
  const Id hx = with_bias(t.concat(h_prev, e));
  const Id r = t.sigmoid(t.linear(p.w_reset, g ? &g->w_reset : nullptr, hx));
  const Id z = t.sigmoid(t.linear(p.w_update, g ? &g->w_update : nullptr, hx));
  const Id cx = with_bias(t.concat(t.mul(r, h_prev), e));
  const Id hc = t.tanh(t.linear(p.w_candidate, g ? &g->w_candidate : nullptr, cx));
  return t.blend(z, h_prev, hc);
}

// Left fold of gru_step over a list of embedded inputs; empty list returns h0.
template <typename Real>
typename Tape<Real>::Id encode_sequence_on_tape(Tape<Real>& t, const GruParams<Real>& p,
                                                GruParams<Real>* g,
                                                std::span<const typename Tape<Real>::Id> inputs,
                                                typename Tape<Real>::Id h0, bool bias,
                                                const DropoutCtx<Real>& drop) {
  using Id = typename Tape<Real>::Id;
  const Id one = bias ? t.input({Real(1)}) : 0;
  Id h = h0;
  const std::size_t hidden = p.hidden();
  for (Id e : inputs) {
    h = gru_step_on_tape(t, p, g, h, e, bias, one);
    if (drop.active()) h = t.mul(h, t.input(drop.mask(hidden)));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Value-level operations (thin wrappers over a throwaway tape, so the tape is
// the single implementation of the math).
// ---------------------------------------------------------------------------

template <typename Real>
Vec<Real> gru_step(const GruParams<Real>& p, const Vec<Real>& h_prev, const Vec<Real>& e,
                   bool bias = false) {
  Tape<Real> t;
  const auto h = t.input(h_prev);
  const auto x = t.input(e);
  const auto one = bias ? t.input({Real(1)}) : 0;
  return t.value(gru_step_on_tape(t, p, static_cast<GruParams<Real>*>(nullptr), h, x, bias, one));
}

template <typename Real>
Vec<Real> encode_sequence(const GruParams<Real>& p, std::span<const Vec<Real>> inputs,
                          const Vec<Real>& h0, bool bias = false) {
  Tape<Real> t;
  std::vector<typename Tape<Real>::Id> ids;
  ids.reserve(inputs.size());
  for (const auto& v : inputs) ids.push_back(t.input(v));
  return t.value(encode_sequence_on_tape(t, p, static_cast<GruParams<Real>*>(nullptr),
                                         std::span<const typename Tape<Real>::Id>(ids),
                                         t.input(h0), bias, DropoutCtx<Real>{}));
}

// Intent representation from the categories of the recent window.
template <typename Real>
Vec<Real> intent_encode(const GruParams<Real>& p, const Mat<Real>& cate_embed,
                        std::span<const CateId> recent_cates, bool bias = false) {
  if (recent_cates.empty()) throw InvalidInput("intent_encode: empty recent window");
  std::vector<Vec<Real>> inputs;
  inputs.reserve(recent_cates.size());
  for (CateId c : recent_cates) {
    Vec<Real> e(cate_embed.rows);
    for (std::size_t r = 0; r < cate_embed.rows; ++r) e[r] = cate_embed.at(r, static_cast<std::size_t>(c));
    inputs.push_back(std::move(e));
  }
  return encode_sequence<Real>(p, inputs, Vec<Real>(p.hidden(), Real(0)), bias);
}

// Full softmax over every category, with the tied embedding as output layer.
template <typename Real>
Vec<Real> predict_category(const Vec<Real>& intent, const Mat<Real>& cate_embed) {
  Vec<Real> logits(cate_embed.cols);
  for (std::size_t c = 0; c < cate_embed.cols; ++c) {
    Real acc = 0;
    for (std::size_t r = 0; r < cate_embed.rows; ++r) acc += cate_embed.at(r, c) * intent[r];
    logits[c] = acc;
  }
  return softmax(logits);
}

// Rank order of the top-k gate: positions into the candidate list, highest
// score first, ties broken by lower category index.
template <typename Real>
std::vector<std::int32_t> select_top_k(const Vec<Real>& scores, std::span<const CateId> cates,
                                       std::int32_t k) {
  std::vector<std::int32_t> pos(scores.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i);
  std::sort(pos.begin(), pos.end(), [&](std::int32_t a, std::int32_t b) {
    const auto ia = static_cast<std::size_t>(a), ib = static_cast<std::size_t>(b);
    if (scores[ia] != scores[ib]) return scores[ia] > scores[ib];
    return cates[ia] < cates[ib];
  });
  const auto keep = std::min<std::size_t>(static_cast<std::size_t>(k), pos.size());
  pos.resize(keep);
  return pos;
}

// Attention over the categories present among distant actions: softmax of
// intent-embedding dot products, top-k selected, weights renormalized to sum
// to 1. Empty candidate set returns the sentinel fallback entry (-1, 1).
template <typename Real>
std::vector<std::pair<CateId, Real>> gate_top_k(const Vec<Real>& intent,
                                                const Mat<Real>& cate_embed,
                                                std::span<const CateId> candidates,
                                                std::int32_t k) {
  if (candidates.empty()) return {{CateId(-1), Real(1)}};
  Vec<Real> scores(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = static_cast<std::size_t>(candidates[i]);
    Real acc = 0;
    for (std::size_t r = 0; r < cate_embed.rows; ++r) acc += cate_embed.at(r, c) * intent[r];
    scores[i] = acc;
  }
  const Vec<Real> alpha = softmax(scores);
  const auto sel = select_top_k(scores, candidates, k);
  Real total = 0;
  for (auto p : sel) total += alpha[static_cast<std::size_t>(p)];
  std::vector<std::pair<CateId, Real>> out;
  out.reserve(sel.size());
  for (auto p : sel)
    out.emplace_back(candidates[static_cast<std::size_t>(p)],
                     alpha[static_cast<std::size_t>(p)] / total);
  return out;
}

template <typename Real>
void embed_items(const Mat<Real>& item_embed, std::span<const ItemId> items,
                 std::vector<Vec<Real>>& out) {
  out.clear();
  out.reserve(items.size());
  for (ItemId v : items) {
    Vec<Real> e(item_embed.rows);
    for (std::size_t r = 0; r < item_embed.rows; ++r) e[r] = item_embed.at(r, static_cast<std::size_t>(v));
    out.push_back(std::move(e));
  }
}

// Summary of one gated category's distant items; the same GruParams serve
// every category.
template <typename Real>
Vec<Real> encode_long_term(const GruParams<Real>& p, const Mat<Real>& item_embed,
                           std::span<const ItemId> items, bool bias = false) {
  if (items.empty()) throw InvalidInput("encode_long_term: gated category has no distant actions");
  std::vector<Vec<Real>> inputs;
  embed_items(item_embed, items, inputs);
  return encode_sequence<Real>(p, inputs, Vec<Real>(p.hidden(), Real(0)), bias);
}

template <typename Real>
Vec<Real> encode_short_term(const GruParams<Real>& p, const Mat<Real>& item_embed,
                            std::span<const ItemId> items, bool bias = false) {
  if (items.empty()) throw InvalidInput("encode_short_term: empty recent window");
  std::vector<Vec<Real>> inputs;
  embed_items(item_embed, items, inputs);
  return encode_sequence<Real>(p, inputs, Vec<Real>(p.hidden(), Real(0)), bias);
}

// h = W_f [long, short]; the long part is the zero vector on the empty-gate
// fallback (and in the short-only ablation).
template <typename Real>
Vec<Real> fuse(const Mat<Real>& w_fuse, const Vec<Real>& h_long, const Vec<Real>& h_short) {
  Vec<Real> cat = h_long;
  cat.insert(cat.end(), h_short.begin(), h_short.end());
  return linear_map(w_fuse, cat);
}

// Softmax over exactly the candidate set (positive + Z negatives at training,
// the full catalog at inference), scored against the tied item embeddings.
template <typename Real>
Vec<Real> score_items(const Vec<Real>& fused, const Mat<Real>& item_embed,
                      std::span<const ItemId> candidates) {
  if (candidates.empty()) throw InvalidInput("score_items: empty candidate set");
  Vec<Real> logits(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto v = static_cast<std::size_t>(candidates[i]);
    Real acc = 0;
    for (std::size_t r = 0; r < item_embed.rows; ++r) acc += item_embed.at(r, v) * fused[r];
    logits[i] = acc;
  }
  return softmax(logits);
}

// Convex combination of the per-category conditionals.
template <typename Real>
Vec<Real> mix_predictions(std::span<const Vec<Real>> conditionals, std::span<const Real> weights) {
  if (conditionals.empty() || conditionals.size() != weights.size())
    throw InvalidInput("mix_predictions: conditional/weight count mismatch");
  const std::size_t len = conditionals[0].size();
  Vec<Real> out(len, Real(0));
  for (std::size_t i = 0; i < conditionals.size(); ++i) {
    if (conditionals[i].size() != len)
      throw InvalidInput("mix_predictions: conditionals cover different candidate sets");
    for (std::size_t j = 0; j < len; ++j) out[j] += weights[i] * conditionals[i][j];
  }
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end forward pass.
// ---------------------------------------------------------------------------

enum class Mode { train, infer };

template <typename Real>
struct ForwardNodes {
  using Id = typename Tape<Real>::Id;
  Id cate_dist{};
  Id gate_weights{};                // renormalized, rank order
  std::vector<CateId> gated_cates;  // -1 = empty-gate sentinel
  std::vector<Id> conditionals;
  Id mixed{};
};

template <typename Real>
struct GatedBranch {
  CateId cate = -1;
  Real weight = 1;
  Vec<Real> conditional;
};

template <typename Real>
struct ForwardOutput {
  Vec<Real> cate_dist;
  std::vector<GatedBranch<Real>> gated;
  Vec<Real> mixed;
};

// Composes intent -> category head -> top-k gate -> per-category long-term
// encoder -> short-term encoder -> fusion -> candidate scoring -> mixture.
// The discrete top-k selection is a constant for differentiation; gradients
// flow through the renormalized weights and both encoders.
template <typename Real>
ForwardNodes<Real> forward_on_tape(Tape<Real>& t, const ModelParams<Real>& p,
                                   ModelParams<Real>* g, const HyperParams& hp,
                                   const Example& ex, std::span<const ItemId> candidates,
                                   Variant variant, const DropoutCtx<Real>& drop) {
  using Id = typename Tape<Real>::Id;
  if (ex.recent.empty()) throw InvalidInput("forward: example has an empty recent window");
  ForwardNodes<Real> out;

  Mat<Real>* d_cate = g ? &g->cate_embed : nullptr;
  Mat<Real>* d_item = g ? &g->item_embed : nullptr;

  // intent from recent categories, supervised by the category head
  std::vector<Id> cate_inputs;
  cate_inputs.reserve(ex.recent.size());
  for (const auto& [item, cate] : ex.recent) cate_inputs.push_back(t.col_lookup(p.cate_embed, d_cate, cate));
  const Id h_intent = encode_sequence_on_tape(t, p.gru_intent, g ? &g->gru_intent : nullptr,
                                              std::span<const Id>(cate_inputs),
                                              t.zeros(p.gru_intent.hidden()), hp.gru_bias, drop);
  std::vector<std::int32_t> all_cates(static_cast<std::size_t>(p.num_cates()));
  for (std::size_t i = 0; i < all_cates.size(); ++i) all_cates[i] = static_cast<std::int32_t>(i);
  out.cate_dist = t.softmax(t.dot_cols(p.cate_embed, d_cate, std::move(all_cates), h_intent));

  // short-term summary of recent items (zero vector in the long-only ablation)
  Id h_short;
  if (variant == Variant::long_only) {
    h_short = t.zeros(static_cast<std::size_t>(hp.short_dim));
  } else {
    std::vector<Id> item_inputs;
    item_inputs.reserve(ex.recent.size());
    for (const auto& [item, cate] : ex.recent) item_inputs.push_back(t.col_lookup(p.item_embed, d_item, item));
    h_short = encode_sequence_on_tape(t, p.gru_short, g ? &g->gru_short : nullptr,
                                      std::span<const Id>(item_inputs),
                                      t.zeros(p.gru_short.hidden()), hp.gru_bias, drop);
  }

  std::vector<std::int32_t> cand_cols(candidates.begin(), candidates.end());
  auto conditional_for = [&](Id h_long) {
    const Id fused = t.linear(p.fuse, g ? &g->fuse : nullptr, t.concat(h_long, h_short));
    return t.softmax(t.dot_cols(p.item_embed, d_item, cand_cols, fused));
  };

  const bool gate_active = variant != Variant::short_only && !ex.distant.empty();
  if (gate_active) {
    std::vector<CateId> cand_cates;
    cand_cates.reserve(ex.distant.size());
    for (const auto& h : ex.distant) cand_cates.push_back(h.cate);
    const Id gate_scores =
        t.dot_cols(p.cate_embed, d_cate, std::vector<std::int32_t>(cand_cates.begin(), cand_cates.end()),
                   h_intent);
    const auto sel = select_top_k(t.value(gate_scores), std::span<const CateId>(cand_cates), hp.top_k);
    out.gate_weights = t.softmax(t.pick_subset(gate_scores, sel));
    for (auto pos : sel) {
      const auto& hist = ex.distant[static_cast<std::size_t>(pos)];
      out.gated_cates.push_back(hist.cate);
      std::vector<Id> long_inputs;
      long_inputs.reserve(hist.items.size());
      for (ItemId v : hist.items) long_inputs.push_back(t.col_lookup(p.item_embed, d_item, v));
      const Id h_long = encode_sequence_on_tape(t, p.gru_long, g ? &g->gru_long : nullptr,
                                                std::span<const Id>(long_inputs),
                                                t.zeros(p.gru_long.hidden()), hp.gru_bias, drop);
      out.conditionals.push_back(conditional_for(h_long));
    }
  } else {
    // empty-gate fallback: one sentinel branch with a zero long-term vector
    out.gated_cates.push_back(-1);
    out.gate_weights = t.input({Real(1)});
    out.conditionals.push_back(conditional_for(t.zeros(static_cast<std::size_t>(hp.long_dim))));
  }
  out.mixed = t.mix(out.gate_weights, out.conditionals);
  return out;
}

template <typename Real>
ForwardOutput<Real> collect_forward(const Tape<Real>& t, const ForwardNodes<Real>& n) {
  ForwardOutput<Real> out;
  out.cate_dist = t.value(n.cate_dist);
  const Vec<Real>& w = t.value(n.gate_weights);
  for (std::size_t i = 0; i < n.gated_cates.size(); ++i)
    out.gated.push_back(GatedBranch<Real>{n.gated_cates[i], w[i], t.value(n.conditionals[i])});
  out.mixed = t.value(n.mixed);
  return out;
}

// Value-level forward. Train mode scores positive + negatives (positive at
// index 0); infer mode scores the full catalog and disables dropout.
template <typename Real>
ForwardOutput<Real> forward(const ModelParams<Real>& p, const HyperParams& hp, const Example& ex,
                            std::span<const ItemId> negatives, Mode mode,
                            Variant variant = Variant::full, Rng* dropout_rng = nullptr) {
  std::vector<ItemId> candidates;
  if (mode == Mode::train) {
    candidates.reserve(negatives.size() + 1);
    candidates.push_back(ex.target_item);
    candidates.insert(candidates.end(), negatives.begin(), negatives.end());
  } else {
    candidates.resize(static_cast<std::size_t>(p.num_items()));
    for (std::size_t i = 0; i < candidates.size(); ++i) candidates[i] = static_cast<ItemId>(i);
  }
  DropoutCtx<Real> drop;
  if (mode == Mode::train && dropout_rng != nullptr) {
    drop.rate = hp.dropout;
    drop.rng = dropout_rng;
  }
  Tape<Real> t;
  const auto nodes = forward_on_tape(t, p, static_cast<ModelParams<Real>*>(nullptr), hp, ex,
                                     std::span<const ItemId>(candidates), variant, drop);
  return collect_forward(t, nodes);
}

// ---------------------------------------------------------------------------
// Checkpoints: textual key=value header, then each matrix as little-endian
// IEEE-754 f32, row-major, in the order listed in the header, then a trailing
// little-endian u64 holding the payload byte count.
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  HyperParams hyper;
  std::int32_t num_items = 0;
  std::int32_t num_cates = 0;
  Variant variant = Variant::full;
};

namespace detail {

inline void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little)
    throw IoError("checkpoint format requires a little-endian host");
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

template <typename Real>
void save_checkpoint(const std::string& path, const ModelParams<Real>& params,
                     const CheckpointMeta& meta) {
  detail::require_little_endian();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  const HyperParams& h = meta.hyper;
  out << "glr-checkpoint\n";
  out << "format_version=1\n";
  out << "items=" << meta.num_items << "\ncates=" << meta.num_cates << '\n';
  out << "item_dim=" << h.item_dim << "\ncate_dim=" << h.cate_dim << "\nshort_dim=" << h.short_dim
      << "\nlong_dim=" << h.long_dim << "\nfuse_dim=" << h.fuse_dim << '\n';
  out << "M=" << h.recent_window << "\nT=" << h.distant_cap << "\nk=" << h.top_k
      << "\nZ=" << h.num_negatives << '\n';
  out << "dropout=" << detail::fmt_double(h.dropout) << '\n';
  out << "gru_bias=" << (h.gru_bias ? 1 : 0) << '\n';
  out << "variant=" << variant_name(meta.variant) << '\n';
  out << "matrix_order=";
  const auto names = ModelParams<Real>::matrix_names();
  for (std::size_t i = 0; i < names.size(); ++i) out << (i ? "," : "") << names[i];
  out << "\nend_header\n";
  std::uint64_t payload = 0;
  for (const Mat<Real>* m : params.matrices()) {
    for (Real v : m->a) {
      const float f = static_cast<float>(v);
      out.write(reinterpret_cast<const char*>(&f), sizeof f);
    }
    payload += m->a.size() * sizeof(float);
  }
  out.write(reinterpret_cast<const char*>(&payload), sizeof payload);
  if (!out) throw IoError("short write on checkpoint: " + path);
}

inline std::pair<ModelParams<float>, CheckpointMeta> load_checkpoint(const std::string& path) {
  detail::require_little_endian();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "glr-checkpoint")
    throw DataError("not a checkpoint file: " + path);
  std::unordered_map<std::string, std::string> kv;
  while (std::getline(in, line) && line != "end_header") {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("bad checkpoint header line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (line != "end_header") throw DataError("checkpoint header not terminated: " + path);
  auto geti = [&](const char* k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw DataError(std::string("checkpoint header missing ") + k);
    return static_cast<std::int32_t>(std::stol(it->second));
  };
  if (geti("format_version") != 1) throw DataError("unsupported checkpoint format version");
  CheckpointMeta meta;
  meta.num_items = geti("items");
  meta.num_cates = geti("cates");
  meta.hyper.item_dim = geti("item_dim");
  meta.hyper.cate_dim = geti("cate_dim");
  meta.hyper.short_dim = geti("short_dim");
  meta.hyper.long_dim = geti("long_dim");
  meta.hyper.fuse_dim = geti("fuse_dim");
  meta.hyper.recent_window = geti("M");
  meta.hyper.distant_cap = geti("T");
  meta.hyper.top_k = geti("k");
  meta.hyper.num_negatives = geti("Z");
  meta.hyper.dropout = std::stod(kv.at("dropout"));
  meta.hyper.gru_bias = geti("gru_bias") != 0;
  meta.variant = parse_variant(kv.at("variant"));
  ModelParams<float> params = ModelParams<float>::sized(meta.hyper, meta.num_items, meta.num_cates);
  std::uint64_t payload = 0;
  for (Mat<float>* m : params.matrices()) {
    in.read(reinterpret_cast<char*>(m->a.data()),
            static_cast<std::streamsize>(m->a.size() * sizeof(float)));
    if (!in) throw DataError("checkpoint payload truncated: " + path);
    payload += m->a.size() * sizeof(float);
  }
  std::uint64_t stored = 0;
  in.read(reinterpret_cast<char*>(&stored), sizeof stored);
  if (!in || stored != payload)
    throw DataError("checkpoint length checksum mismatch: " + path);
  return {std::move(params), meta};
}

// History -> query example for recommendation (no target).
inline Example build_query_example(const std::vector<std::pair<ItemId, CateId>>& history,
                                   std::size_t recent_window, std::size_t distant_cap) {
  if (history.empty()) throw InvalidInput("recommend: history must be non-empty");
  Example ex;
  ex.target_item = 0;
  ex.target_cate = 0;
  ex.position = history.size();
  const std::size_t recent_begin =
      history.size() > recent_window ? history.size() - recent_window : 0;
  for (std::size_t i = recent_begin; i < history.size(); ++i) ex.recent.push_back(history[i]);
  std::map<CateId, std::vector<ItemId>> groups;
  for (std::size_t i = 0; i < recent_begin; ++i) groups[history[i].second].push_back(history[i].first);
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

}  // namespace glr
