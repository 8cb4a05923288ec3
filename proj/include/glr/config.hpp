#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "glr/data.hpp"
#include "glr/model.hpp"
#include "glr/training.hpp"

namespace glr {

// Flat key=value run configuration. Sources are layered (defaults, config
// file, command-line overrides) with later assignments winning; unknown keys
// are rejected; the fully-resolved set is written next to every run's
// outputs so a run can be reproduced by feeding that file back in.
struct RunConfig {
  // paths
  std::string input;       // raw action log (prepare)
  std::string data;        // prepared dataset directory
  std::string out;         // output directory (prepare/synth/train)
  std::string checkpoint;  // checkpoint path (evaluate/recommend)
  std::string report;      // report path (evaluate)
  std::string history;     // item:cate pairs (recommend)

  // prepare
  std::int64_t min_item_actions = 20;
  std::int64_t user_min = 20;
  std::int64_t user_max = 300;
  std::int64_t min_cate_items = 100;
  std::int64_t train_begin = 0;
  std::int64_t train_end = 0;
  std::int64_t valid_end = 0;
  std::int64_t test_end = 0;

  // synth
  std::int64_t synth_users = 200;
  std::int64_t synth_cates = 5;
  std::int64_t synth_items_per_cate = 40;
  std::int64_t synth_seq_len = 120;
  std::int64_t synth_window = 10;
  std::int64_t synth_chunk_len = 2;
  double synth_intent_noise = 0.0;
  double synth_train_frac = 0.8;
  double synth_valid_frac = 0.1;

  // model
  std::int64_t M = 20;
  std::int64_t T = 20;
  std::int64_t k = 3;
  std::int64_t Z = 1024;
  std::int64_t d_e = 300;
  std::int64_t d_c = 64;
  std::int64_t d_s = 300;
  std::int64_t d_l = 300;
  double dropout = 0.2;
  bool gru_bias = false;
  std::string variant;  // empty = full for train, checkpoint's own for evaluate

  // training
  double lr = 0.001;
  std::int64_t batch_size = 64;
  std::int64_t max_epochs = 100;
  std::int64_t patience_lambda = 3;
  std::int64_t patience_stop = 10;
  double lambda_initial = 0.5;
  double lambda_final = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool log_timing = true;

  // evaluation
  std::string eval_split = "test";
  std::string baseline;
  std::int64_t item_k = 100;
  std::int64_t cate_k = 3;

  // recommend
  std::int64_t n = 10;

  // shared
  std::int64_t seed = 1;
  std::int64_t threads = 1;

  void set(const std::string& key, const std::string& value);
  std::string serialize() const;
  void load_file(const std::string& path);
  void apply_override(const std::string& assignment);

  HyperParams hyper() const {
    HyperParams h;
    h.recent_window = static_cast<std::int32_t>(M);
    h.distant_cap = static_cast<std::int32_t>(T);
    h.top_k = static_cast<std::int32_t>(k);
    h.num_negatives = static_cast<std::int32_t>(Z);
    h.dropout = dropout;
    h.item_dim = static_cast<std::int32_t>(d_e);
    h.cate_dim = static_cast<std::int32_t>(d_c);
    h.short_dim = static_cast<std::int32_t>(d_s);
    h.long_dim = static_cast<std::int32_t>(d_l);
    h.fuse_dim = static_cast<std::int32_t>(d_e);  // tied item output layer
    h.gru_bias = gru_bias;
    return h;
  }

  TrainConfig train_config() const {
    TrainConfig c;
    c.learning_rate = lr;
    c.batch_size = static_cast<std::int32_t>(batch_size);
    c.lambda_initial = lambda_initial;
    c.lambda_final = lambda_final;
    c.patience_lambda = static_cast<std::int32_t>(patience_lambda);
    c.patience_stop = static_cast<std::int32_t>(patience_stop);
    c.max_epochs = static_cast<std::int32_t>(max_epochs);
    c.seed = static_cast<std::uint64_t>(seed);
    c.adam_beta1 = adam_beta1;
    c.adam_beta2 = adam_beta2;
    c.adam_eps = adam_eps;
    c.threads = static_cast<std::int32_t>(threads);
    c.deterministic_timing = !log_timing;
    return c;
  }

  SynthConfig synth_config() const {
    SynthConfig s;
    s.num_users = static_cast<std::int32_t>(synth_users);
    s.num_cates = static_cast<std::int32_t>(synth_cates);
    s.items_per_cate = static_cast<std::int32_t>(synth_items_per_cate);
    s.seq_len = static_cast<std::int32_t>(synth_seq_len);
    s.window = static_cast<std::int32_t>(synth_window);
    s.chunk_len = static_cast<std::int32_t>(synth_chunk_len);
    s.intent_noise = synth_intent_noise;
    s.train_frac = synth_train_frac;
    s.valid_frac = synth_valid_frac;
    s.seed = static_cast<std::uint64_t>(seed);
    return s;
  }

  FilterThresholds thresholds() const {
    return FilterThresholds{min_item_actions, user_min, user_max, min_cate_items};
  }

  SplitBounds split_bounds() const {
    return SplitBounds{train_begin, train_end, valid_end, test_end};
  }

  Split parse_eval_split() const {
    if (eval_split == "train") return Split::train;
    if (eval_split == "valid") return Split::valid;
    if (eval_split == "test") return Split::test;
    throw InvalidInput("eval_split must be train|valid|test, got '" + eval_split + "'");
  }
};

namespace detail {

inline std::int64_t to_i64(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  if (!parse_i64(v, out)) throw InvalidInput("config key '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

inline double to_f64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw InvalidInput("config key '" + key + "' expects a number, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw InvalidInput("config key '" + key + "' expects 0/1, got '" + v + "'");
}

inline std::string fmt_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  using detail::to_bool;
  using detail::to_f64;
  using detail::to_i64;
  if (key == "input") input = value;
  else if (key == "data") data = value;
  else if (key == "out") out = value;
  else if (key == "checkpoint") checkpoint = value;
  else if (key == "report") report = value;
  else if (key == "history") history = value;
  else if (key == "min_item_actions") min_item_actions = to_i64(key, value);
  else if (key == "user_min") user_min = to_i64(key, value);
  else if (key == "user_max") user_max = to_i64(key, value);
  else if (key == "min_cate_items") min_cate_items = to_i64(key, value);
  else if (key == "train_begin") train_begin = to_i64(key, value);
  else if (key == "train_end") train_end = to_i64(key, value);
  else if (key == "valid_end") valid_end = to_i64(key, value);
  else if (key == "test_end") test_end = to_i64(key, value);
  else if (key == "synth_users") synth_users = to_i64(key, value);
  else if (key == "synth_cates") synth_cates = to_i64(key, value);
  else if (key == "synth_items_per_cate") synth_items_per_cate = to_i64(key, value);
  else if (key == "synth_seq_len") synth_seq_len = to_i64(key, value);
  else if (key == "synth_window") synth_window = to_i64(key, value);
  else if (key == "synth_chunk_len") synth_chunk_len = to_i64(key, value);
  else if (key == "synth_intent_noise") synth_intent_noise = to_f64(key, value);
  else if (key == "synth_train_frac") synth_train_frac = to_f64(key, value);
  else if (key == "synth_valid_frac") synth_valid_frac = to_f64(key, value);
  else if (key == "M") M = to_i64(key, value);
  else if (key == "T") T = to_i64(key, value);
  else if (key == "k") k = to_i64(key, value);
  else if (key == "Z") Z = to_i64(key, value);
  else if (key == "d_e") d_e = to_i64(key, value);
  else if (key == "d_c") d_c = to_i64(key, value);
  else if (key == "d_s") d_s = to_i64(key, value);
  else if (key == "d_l") d_l = to_i64(key, value);
  else if (key == "dropout") dropout = to_f64(key, value);
  else if (key == "gru_bias") gru_bias = to_bool(key, value);
  else if (key == "variant") variant = value;
  else if (key == "lr") lr = to_f64(key, value);
  else if (key == "batch_size") batch_size = to_i64(key, value);
  else if (key == "max_epochs") max_epochs = to_i64(key, value);
  else if (key == "patience_lambda") patience_lambda = to_i64(key, value);
  else if (key == "patience_stop") patience_stop = to_i64(key, value);
  else if (key == "lambda_initial") lambda_initial = to_f64(key, value);
  else if (key == "lambda_final") lambda_final = to_f64(key, value);
  else if (key == "adam_beta1") adam_beta1 = to_f64(key, value);
  else if (key == "adam_beta2") adam_beta2 = to_f64(key, value);
  else if (key == "adam_eps") adam_eps = to_f64(key, value);
  else if (key == "log_timing") log_timing = to_bool(key, value);
  else if (key == "eval_split") eval_split = value;
  else if (key == "baseline") baseline = value;
  else if (key == "item_k") item_k = to_i64(key, value);
  else if (key == "cate_k") cate_k = to_i64(key, value);
  else if (key == "n") n = to_i64(key, value);
  else if (key == "seed") seed = to_i64(key, value);
  else if (key == "threads") threads = to_i64(key, value);
  else throw InvalidInput("unknown config key '" + key + "'");
}

inline std::string RunConfig::serialize() const {
  using detail::fmt_f64;
  std::ostringstream o;
  o << "input=" << input << '\n' << "data=" << data << '\n' << "out=" << out << '\n'
    << "checkpoint=" << checkpoint << '\n' << "report=" << report << '\n'
    << "history=" << history << '\n';
  o << "min_item_actions=" << min_item_actions << '\n' << "user_min=" << user_min << '\n'
    << "user_max=" << user_max << '\n' << "min_cate_items=" << min_cate_items << '\n';
  o << "train_begin=" << train_begin << '\n' << "train_end=" << train_end << '\n'
    << "valid_end=" << valid_end << '\n' << "test_end=" << test_end << '\n';
  o << "synth_users=" << synth_users << '\n' << "synth_cates=" << synth_cates << '\n'
    << "synth_items_per_cate=" << synth_items_per_cate << '\n'
    << "synth_seq_len=" << synth_seq_len << '\n' << "synth_window=" << synth_window << '\n'
    << "synth_chunk_len=" << synth_chunk_len << '\n'
    << "synth_intent_noise=" << fmt_f64(synth_intent_noise) << '\n'
    << "synth_train_frac=" << fmt_f64(synth_train_frac) << '\n'
    << "synth_valid_frac=" << fmt_f64(synth_valid_frac) << '\n';
  o << "M=" << M << '\n' << "T=" << T << '\n' << "k=" << k << '\n' << "Z=" << Z << '\n';
  o << "d_e=" << d_e << '\n' << "d_c=" << d_c << '\n' << "d_s=" << d_s << '\n'
    << "d_l=" << d_l << '\n';
  o << "dropout=" << fmt_f64(dropout) << '\n' << "gru_bias=" << (gru_bias ? 1 : 0) << '\n'
    << "variant=" << variant << '\n';
  o << "lr=" << fmt_f64(lr) << '\n' << "batch_size=" << batch_size << '\n'
    << "max_epochs=" << max_epochs << '\n' << "patience_lambda=" << patience_lambda << '\n'
    << "patience_stop=" << patience_stop << '\n'
    << "lambda_initial=" << fmt_f64(lambda_initial) << '\n'
    << "lambda_final=" << fmt_f64(lambda_final) << '\n'
    << "adam_beta1=" << fmt_f64(adam_beta1) << '\n' << "adam_beta2=" << fmt_f64(adam_beta2) << '\n'
    << "adam_eps=" << fmt_f64(adam_eps) << '\n' << "log_timing=" << (log_timing ? 1 : 0) << '\n';
  o << "eval_split=" << eval_split << '\n' << "baseline=" << baseline << '\n'
    << "item_k=" << item_k << '\n' << "cate_k=" << cate_k << '\n';
  o << "n=" << n << '\n' << "seed=" << seed << '\n' << "threads=" << threads << '\n';
  return o.str();
}

inline void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config file: " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidInput("config " + path + " line " + std::to_string(line_no) +
                         ": expected key=value, got '" + line + "'");
    set(line.substr(0, eq), line.substr(eq + 1));
  }
}

inline void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw InvalidInput("expected key=value override, got '" + assignment + "'");
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

}  // namespace glr
