// gatedlongrec command-line driver: prepare | synth | train | evaluate | recommend
//
// Every option is a flat key=value assignment; a config file supplies
// defaults (--config FILE, or the GLR_CONFIG environment variable), later
// assignments win, and each run writes its fully-resolved configuration next
// to its outputs. Exit codes: 0 success, 1 usage/data error, 2 numerical
// failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "glr/config.hpp"
#include "glr/data.hpp"
#include "glr/eval.hpp"
#include "glr/model.hpp"
#include "glr/training.hpp"

namespace fs = std::filesystem;
using namespace glr;

namespace {

int usage() {
  std::cerr <<
      "usage: glr <command> [--config FILE] [key=value ...]\n"
      "\n"
      "commands:\n"
      "  prepare    parse + filter a raw action log into a dataset directory\n"
      "             (input=LOG out=DIR train_begin= train_end= valid_end= test_end=)\n"
      "  synth      generate a synthetic corpus with planted long-term dependence\n"
      "             (out=DIR synth_users= synth_cates= ... seed=)\n"
      "  train      train on a prepared dataset (data=DIR out=DIR variant=full|short|long)\n"
      "  evaluate   score a checkpoint or baseline on a split\n"
      "             (data=DIR checkpoint=CKPT [variant=] [baseline=] report=FILE)\n"
      "  recommend  top-n next items for an item:cate history\n"
      "             (data=DIR checkpoint=CKPT history=\"i1:c1 i2:c1\" n=10)\n"
      "\n"
      "A config file holds the same key=value lines; GLR_CONFIG names a default one.\n";
  return 1;
}

RunConfig parse_args(int argc, char** argv, int first) {
  RunConfig cfg;
  std::vector<std::string> overrides;
  std::string config_path;
  for (int i = first; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config") {
      if (i + 1 >= argc) throw InvalidInput("--config needs a file argument");
      config_path = argv[++i];
    } else if (arg.find('=') != std::string::npos) {
      overrides.push_back(arg);
    } else {
      throw InvalidInput("unrecognized argument '" + arg + "' (expected key=value)");
    }
  }
  if (config_path.empty()) {
    if (const char* env = std::getenv("GLR_CONFIG"); env && *env) config_path = env;
  }
  if (!config_path.empty()) cfg.load_file(config_path);
  for (const auto& o : overrides) cfg.apply_override(o);
  return cfg;
}

void write_resolved(const RunConfig& cfg, const fs::path& where) {
  std::ofstream out(where, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write resolved config: " + where.string());
  out << cfg.serialize();
}

void print_stats(const Dataset& ds) {
  const DatasetStats s = dataset_stats(ds);
  std::printf("users                %zu\n", s.users);
  std::printf("items                %d\n", s.items);
  std::printf("categories           %d\n", s.cates);
  std::printf("avg actions/user     %.3f\n", s.avg_actions_per_user);
  std::printf("train actions        %zu\n", s.train_actions);
  std::printf("validation actions   %zu\n", s.valid_actions);
  std::printf("test actions         %zu\n", s.test_actions);
}

int cmd_prepare(const RunConfig& cfg) {
  if (cfg.input.empty() || cfg.out.empty())
    throw InvalidInput("prepare needs input= and out=");
  ParseResult parsed = parse_action_log(cfg.input);
  for (const auto& w : parsed.warnings) std::cerr << "warning: " << w << '\n';
  if (parsed.malformed > 0)
    std::cerr << "warning: skipped " << parsed.malformed << " malformed of " << parsed.data_lines
              << " lines\n";
  const SplitBounds bounds = cfg.split_bounds();
  const std::size_t dropped = clamp_to_window(parsed.actions, bounds.train_begin, bounds.test_end);
  if (dropped > 0)
    std::cerr << "note: dropped " << dropped << " actions outside the observation window\n";
  Dataset ds = filter_dataset(parsed.actions, cfg.thresholds());
  temporal_split(ds, bounds);
  std::vector<std::pair<std::string, std::string>> manifest = {
      {"source", cfg.input},
      {"min_item_actions", std::to_string(cfg.min_item_actions)},
      {"user_min", std::to_string(cfg.user_min)},
      {"user_max", std::to_string(cfg.user_max)},
      {"min_cate_items", std::to_string(cfg.min_cate_items)},
  };
  save_dataset(cfg.out, ds, manifest);
  write_resolved(cfg, fs::path(cfg.out) / "config.resolved");
  print_stats(ds);
  return 0;
}

int cmd_synth(const RunConfig& cfg) {
  if (cfg.out.empty()) throw InvalidInput("synth needs out=");
  const SynthConfig sc = cfg.synth_config();
  SynthData synth = generate_synthetic(sc);
  std::vector<std::pair<std::string, std::string>> manifest = {
      {"generator", "synthetic"},
      {"seed", std::to_string(sc.seed)},
      {"synth_users", std::to_string(sc.num_users)},
      {"synth_cates", std::to_string(sc.num_cates)},
      {"synth_items_per_cate", std::to_string(sc.items_per_cate)},
      {"synth_seq_len", std::to_string(sc.seq_len)},
      {"synth_window", std::to_string(sc.window)},
      {"synth_chunk_len", std::to_string(sc.chunk_len)},
      {"synth_intent_noise", std::to_string(sc.intent_noise)},
  };
  save_dataset(cfg.out, synth.dataset, manifest);
  write_resolved(cfg, fs::path(cfg.out) / "config.resolved");
  print_stats(synth.dataset);
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  if (cfg.data.empty() || cfg.out.empty()) throw InvalidInput("train needs data= and out=");
  const Dataset ds = load_dataset(cfg.data);
  const HyperParams hp = cfg.hyper();
  const TrainConfig tc = cfg.train_config();
  const Variant variant = parse_variant(cfg.variant);
  fs::create_directories(cfg.out);
  write_resolved(cfg, fs::path(cfg.out) / "config.resolved");
  std::ofstream log_file(fs::path(cfg.out) / "train.log", std::ios::binary | std::ios::trunc);
  if (!log_file) throw IoError("cannot write train.log in " + cfg.out);
  std::ostringstream tee;
  Trainer<float> trainer(ds, hp, tc, variant);
  const std::string ckpt = (fs::path(cfg.out) / "best.ckpt").string();
  TrainResult<float> res;
  {
    struct Tee : std::streambuf {
      std::streambuf *a, *b;
      int overflow(int c) override {
        if (c != EOF) {
          a->sputc(static_cast<char>(c));
          b->sputc(static_cast<char>(c));
        }
        return c;
      }
    } tee_buf;
    tee_buf.a = log_file.rdbuf();
    tee_buf.b = std::cout.rdbuf();
    std::ostream both(&tee_buf);
    res = trainer.run(&both, ckpt);
  }
  std::printf("stopped: %s after %d epochs; best epoch %d (valid joint loss %.6f)\n",
              res.stop_reason.c_str(), res.epochs_run, res.best_epoch, res.best_valid_joint);
  std::printf("checkpoint: %s\n", ckpt.c_str());
  return 0;
}

int cmd_evaluate(const RunConfig& cfg) {
  if (cfg.data.empty()) throw InvalidInput("evaluate needs data=");
  const Dataset ds = load_dataset(cfg.data);
  const Split split = cfg.parse_eval_split();
  EvalOptions opts{static_cast<std::size_t>(cfg.item_k), static_cast<std::size_t>(cfg.cate_k)};
  EvalReport rep;
  if (!cfg.baseline.empty()) {
    rep = run_baseline(parse_baseline(cfg.baseline), ds, split, opts);
  } else {
    if (cfg.checkpoint.empty()) throw InvalidInput("evaluate needs checkpoint= or baseline=");
    auto [params, meta] = load_checkpoint(cfg.checkpoint);
    // variant= on the command line overrides how forward treats the branches
    const Variant variant = cfg.variant.empty() ? meta.variant : parse_variant(cfg.variant);
    rep = evaluate_model(params, meta.hyper, ds, split, variant, opts);
  }
  rep.print_table(std::cout);
  if (!cfg.report.empty()) {
    rep.save(cfg.report);
    write_resolved(cfg, cfg.report + ".config");
  }
  return 0;
}

int cmd_recommend(const RunConfig& cfg) {
  if (cfg.data.empty() || cfg.checkpoint.empty() || cfg.history.empty())
    throw InvalidInput("recommend needs data=, checkpoint= and history=");
  if (cfg.n < 1) throw InvalidInput("recommend: n must be >= 1");
  const Dataset ds = load_dataset(cfg.data);
  auto [params, meta] = load_checkpoint(cfg.checkpoint);
  if (params.num_items() != ds.num_items() || params.num_cates() != ds.num_cates())
    throw DataError("recommend: checkpoint vocabulary does not match the dataset");

  std::vector<std::pair<ItemId, CateId>> history;
  std::istringstream ss(cfg.history);
  std::string tok;
  while (ss >> tok) {
    const auto colon = tok.rfind(':');
    if (colon == std::string::npos)
      throw InvalidInput("history entries must be item:cate, got '" + tok + "'");
    const std::string item_tok = tok.substr(0, colon);
    const std::string cate_tok = tok.substr(colon + 1);
    const ItemId v = ds.items.lookup(item_tok);
    if (v < 0) throw InvalidInput("unknown item id '" + item_tok + "'");
    const CateId c = ds.cates.lookup(cate_tok);
    if (c < 0) throw InvalidInput("unknown category id '" + cate_tok + "'");
    history.emplace_back(v, c);
  }
  const Example ex = build_query_example(history, static_cast<std::size_t>(meta.hyper.recent_window),
                                         static_cast<std::size_t>(meta.hyper.distant_cap));
  const Variant variant = cfg.variant.empty() ? meta.variant : parse_variant(cfg.variant);
  const ForwardOutput<float> out =
      forward(params, meta.hyper, ex, std::span<const ItemId>{}, Mode::infer, variant);

  std::printf("gated categories:\n");
  for (const auto& b : out.gated) {
    if (b.cate < 0)
      std::printf("  (none: empty-gate fallback)  weight=%.4f\n", static_cast<double>(b.weight));
    else
      std::printf("  %-12s weight=%.4f\n",
                  ds.cates.tokens[static_cast<std::size_t>(b.cate)].c_str(),
                  static_cast<double>(b.weight));
  }
  std::vector<std::size_t> order(out.mixed.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (out.mixed[a] != out.mixed[b]) return out.mixed[a] > out.mixed[b];
    return a < b;
  });
  const auto top = std::min<std::size_t>(static_cast<std::size_t>(cfg.n), order.size());
  std::printf("top-%zu items:\n", top);
  for (std::size_t i = 0; i < top; ++i)
    std::printf("  %-12s p=%.6f\n", ds.items.tokens[order[i]].c_str(),
                static_cast<double>(out.mixed[order[i]]));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) return usage();
  const std::string cmd = argv[1];
  if (cmd == "--help" || cmd == "-h" || cmd == "help") {
    usage();
    return 0;
  }
  try {
    const RunConfig cfg = parse_args(argc, argv, 2);
    if (cmd == "prepare") return cmd_prepare(cfg);
    if (cmd == "synth") return cmd_synth(cfg);
    if (cmd == "train") return cmd_train(cfg);
    if (cmd == "evaluate") return cmd_evaluate(cfg);
    if (cmd == "recommend") return cmd_recommend(cfg);
    std::cerr << "unknown command '" << cmd << "'\n";
    return usage();
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
