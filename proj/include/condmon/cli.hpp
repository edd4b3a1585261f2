#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "condmon/corpus.hpp"
#include "condmon/encoders.hpp"
#include "condmon/errors.hpp"
#include "condmon/evalkit.hpp"
#include "condmon/monitor.hpp"
#include "condmon/net.hpp"
#include "condmon/synthworld.hpp"
#include "condmon/trainkit.hpp"

namespace condmon::cli {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;

// Fully resolved run configuration: config-file values overlaid with flag
// overrides, snapshotted into the run directory before anything executes.
struct RunConfig {
  net::NetConfig net;
  trainkit::TrainConfig train;
  std::size_t encoder_grid_side = 4;
  std::size_t encoder_dim = 32;
  std::uint64_t encoder_seed = 7;

  encoders::EncoderSpec encoder_spec() const {
    return encoders::make_encoder_spec(encoders::EncoderKind::Synthetic, encoder_grid_side,
                                       encoder_dim, encoder_dim, encoder_seed);
  }
};

inline json run_config_to_json(const RunConfig& rc) {
  return json{{"net", net::config_to_json(rc.net)},
              {"train", trainkit::train_config_to_json(rc.train)},
              {"encoder",
               {{"grid_side", rc.encoder_grid_side},
                {"dim", rc.encoder_dim},
                {"seed", rc.encoder_seed}}}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig rc;
  if (j.contains("net")) rc.net = net::config_from_json(j.at("net"));
  if (j.contains("train")) rc.train = trainkit::train_config_from_json(j.at("train"));
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    rc.encoder_grid_side = e.value("grid_side", rc.encoder_grid_side);
    rc.encoder_dim = e.value("dim", rc.encoder_dim);
    rc.encoder_seed = e.value("seed", rc.encoder_seed);
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

// The defaults used for the desk-scale synthetic corpus: small enough to
// train on a laptop CPU in minutes.
inline RunConfig toy_run_config() {
  RunConfig rc;
  rc.net.working_dim = 32;
  rc.net.grid_side = 4;
  rc.net.state_depth = 1;
  rc.net.condition_depth = 1;
  rc.net.heads = 4;
  rc.net.mlp_ratio = 2.0;
  rc.net.head_hidden = 32;
  rc.encoder_grid_side = 4;
  rc.encoder_dim = 32;
  return rc;
}

// ---------------------------------------------------------------------------
// generate: self-contained toy dataset (manifest, frames, paraphrase bank,
// augmentation rules, monitor scripts and trees).

struct GenerateOptions {
  std::filesystem::path out;
  std::size_t sessions = 60;
  std::size_t spill_sessions = 25;
  std::size_t failed = 115;
  std::uint64_t seed = 1234;
  std::filesystem::path data_dir;  // committed bank/scripts/trees to copy
};

inline int cmd_generate(const GenerateOptions& opts) {
  synthworld::ToyCorpusConfig cfg;
  cfg.nominal_sessions = opts.sessions;
  cfg.spill_sessions = opts.spill_sessions;
  cfg.failed_pours = opts.failed;
  cfg.seed = opts.seed;
  const auto set = synthworld::make_toy_corpus(cfg, opts.out);
  corpus::write_rules(synthworld::toy_augmentation_rules(), opts.out / "aug_rules.json");
  if (!opts.data_dir.empty()) {
    for (const char* name : {"paraphrase_bank.json"}) {
      std::filesystem::copy_file(opts.data_dir / name, opts.out / name,
                                 std::filesystem::copy_options::overwrite_existing);
    }
  }
  std::cout << "wrote " << set.demos.size() << " demonstrations to " << opts.out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// prepare: deterministic stratified split plus optional feature
// precomputation.

struct PrepareOptions {
  std::filesystem::path manifest;
  std::filesystem::path out;
  double train_frac = 0.7;
  std::uint64_t seed = 0;
  bool precompute = false;
  std::size_t grid_side = 4;
  std::size_t dim = 32;
  std::uint64_t encoder_seed = 7;
};

inline int cmd_prepare(const PrepareOptions& opts) {
  const auto set = corpus::load_manifest(opts.manifest);
  std::filesystem::create_directories(opts.out);
  const auto split = corpus::stratified_split(set, opts.train_frac, opts.seed);
  corpus::write_split(split, opts.out / "split.json");
  std::cout << "split: " << split.train_ids.size() << " train / " << split.val_ids.size()
            << " val demonstrations\n";
  if (opts.precompute) {
    const auto spec = encoders::make_encoder_spec(encoders::EncoderKind::Synthetic, opts.grid_side,
                                                  opts.dim, opts.dim, opts.encoder_seed);
    const auto index = encoders::precompute_features(spec, set, opts.out / "features");
    std::cout << "precomputed " << index.entries.size() << " feature files\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::filesystem::path manifest;
  std::filesystem::path split;
  std::filesystem::path bank;
  std::filesystem::path rules;  // optional
  std::filesystem::path run_dir;
  RunConfig config;
  std::string variant = "full";  // full | no_state_transformer |
                                 // no_condition_transformer | no_consistency
};

inline void apply_variant(RunConfig& rc, const std::string& variant) {
  if (variant == "no_consistency") {
    rc.net.variant = net::Variant::Full;
    rc.train.use_consistency = false;
  } else {
    rc.net.variant = net::variant_from_string(variant);
  }
}

struct TrainOutcome {
  trainkit::FitResult fit;
  evalkit::TaskReports val_reports;  // for the best checkpoint
};

// Library-level training entry; the CLI wrapper adds process concerns.
inline TrainOutcome run_training(const TrainOptions& opts) {
  RunConfig rc = opts.config;
  apply_variant(rc, opts.variant);
  const auto set = corpus::load_manifest(opts.manifest);
  const auto split = corpus::load_split(opts.split);
  const auto train_set = set.subset(split.train_ids);
  const auto val_set = set.subset(split.val_ids);
  const auto bank = corpus::load_paraphrase_bank(opts.bank);
  std::vector<corpus::AugmentationRule> rules;
  if (!opts.rules.empty()) rules = corpus::load_rules(opts.rules);

  std::filesystem::create_directories(opts.run_dir);
  {
    std::ofstream snap(opts.run_dir / "config.json");
    snap << json{{"run", run_config_to_json(rc)},
                 {"variant", opts.variant},
                 {"manifest", opts.manifest.string()},
                 {"split", opts.split.string()},
                 {"bank", opts.bank.string()},
                 {"rules", opts.rules.string()}}
                .dump(2)
         << "\n";
  }

  encoders::FrameEncoder encoder(rc.encoder_spec());
  net::NetState state = net::init_net(rc.net, rc.train.seed);
  TrainOutcome outcome;
  outcome.fit = trainkit::fit(state, rc.net, rc.train, train_set, val_set, bank, rules, encoder,
                              opts.run_dir);
  evalkit::EvalOptions eopts;
  outcome.val_reports =
      evalkit::evaluate_model(outcome.fit.best_state, rc.net, encoder, val_set, eopts);
  std::ofstream summary(opts.run_dir / "summary.json");
  summary << json{{"best_epoch", outcome.fit.best_epoch},
                  {"best_val_anomaly_f1", outcome.fit.best_val_f1},
                  {"val_phase", evalkit::report_to_json(outcome.val_reports.phase)},
                  {"val_anomaly", evalkit::report_to_json(outcome.val_reports.anomaly)},
                  {"alpha", outcome.fit.weights.alpha},
                  {"beta", outcome.fit.weights.beta}}
                 .dump(2)
          << "\n";
  return outcome;
}

inline int cmd_train(const TrainOptions& opts) {
  const TrainOutcome outcome = run_training(opts);
  std::cout << "best epoch " << outcome.fit.best_epoch << ", val anomaly F1 "
            << outcome.fit.best_val_f1 << ", val phase accuracy "
            << outcome.val_reports.phase.accuracy << "\n";
  std::cout << "run directory: " << opts.run_dir.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::filesystem::path split;  // optional; evaluates the whole set if empty
  std::string partition = "val";
  std::filesystem::path bank;  // needed for --paraphrased
  bool paraphrased = false;
  bool oracle = false;
  bool bench = false;
  std::size_t bench_batches = 1000;
  std::size_t bench_actions = 6;
  std::uint64_t seed = 0;
  std::filesystem::path report_out;  // optional JSON output
  std::size_t encoder_grid_side = 4;
  std::size_t encoder_dim = 32;
  std::uint64_t encoder_seed = 7;
};

inline int cmd_eval(const EvalOptions& opts) {
  const auto ckpt = net::load_checkpoint(opts.checkpoint);
  auto set = corpus::load_manifest(opts.manifest);
  if (!opts.split.empty()) {
    const auto split = corpus::load_split(opts.split);
    if (opts.partition == "val")
      set = set.subset(split.val_ids);
    else if (opts.partition == "train")
      set = set.subset(split.train_ids);
    else
      throw ConfigError("unknown partition '" + opts.partition + "' (use train or val)");
  }
  corpus::ParaphraseBank bank;
  if (opts.paraphrased) bank = corpus::load_paraphrase_bank(opts.bank);
  encoders::FrameEncoder encoder(
      encoders::make_encoder_spec(encoders::EncoderKind::Synthetic, opts.encoder_grid_side,
                                  opts.encoder_dim, opts.encoder_dim, opts.encoder_seed));
  evalkit::EvalOptions eopts;
  eopts.oracle = opts.oracle;
  eopts.paraphrased = opts.paraphrased;
  eopts.bank = opts.paraphrased ? &bank : nullptr;
  eopts.seed = opts.seed;
  evalkit::TaskReports reports = evalkit::evaluate_model(ckpt.state, ckpt.cfg, encoder, set, eopts);
  if (opts.bench) {
    const auto stats =
        evalkit::latency_benchmark(ckpt.state, ckpt.cfg, opts.bench_batches, opts.bench_actions);
    reports.phase.latency = stats;
    reports.anomaly.latency = stats;
    std::cout << "inference latency over " << stats.samples << " batches ("
              << opts.bench_actions << " actions each): " << stats.mean_ms << " +- "
              << stats.std_ms << " ms\n";
  }
  std::cout << evalkit::format_table(opts.oracle ? "oracle" : "model", reports);
  if (!opts.report_out.empty()) {
    std::ofstream out(opts.report_out);
    if (!out) throw IoError("cannot write report: " + opts.report_out.string());
    out << json{{"phase", evalkit::report_to_json(reports.phase)},
                {"anomaly", evalkit::report_to_json(reports.anomaly)}}
               .dump(2)
        << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// monitor-sim

struct MonitorSimOptions {
  std::filesystem::path script;
  std::filesystem::path tree;
  std::filesystem::path checkpoint;  // empty with --oracle
  bool oracle = false;
  std::filesystem::path out;
  std::uint64_t seed = 0;
  std::size_t encoder_grid_side = 4;
  std::size_t encoder_dim = 32;
  std::uint64_t encoder_seed = 7;
};

struct MonitorSimOutcome {
  std::vector<monitor::MonitorEvent> events;
  std::size_t anomaly_episodes = 0;
};

inline std::size_t count_anomaly_episodes(const std::vector<monitor::MonitorEvent>& events) {
  std::size_t episodes = 0;
  bool in_episode = false;
  for (const auto& e : events) {
    if (e.anomaly && !in_episode) ++episodes;
    in_episode = e.anomaly;
  }
  return episodes;
}

inline MonitorSimOutcome run_monitor_sim(const MonitorSimOptions& opts) {
  const auto script = synthworld::load_script(opts.script);
  auto tree = monitor::load_tree(opts.tree);
  const auto stream = synthworld::stream_frames(script, opts.seed);
  MonitorSimOutcome outcome;
  if (opts.oracle) {
    outcome.events = monitor::run_monitor(tree, monitor::make_oracle_predictor(), stream);
  } else {
    const auto ckpt = net::load_checkpoint(opts.checkpoint);
    encoders::FrameEncoder encoder(
        encoders::make_encoder_spec(encoders::EncoderKind::Synthetic, opts.encoder_grid_side,
                                    opts.encoder_dim, opts.encoder_dim, opts.encoder_seed));
    const auto predictor = monitor::make_model_predictor(ckpt.state, ckpt.cfg, encoder);
    outcome.events = monitor::run_monitor(tree, predictor, stream);
  }
  outcome.anomaly_episodes = count_anomaly_episodes(outcome.events);
  if (!opts.out.empty()) {
    std::filesystem::create_directories(opts.out);
    monitor::write_event_log(outcome.events, opts.out / "events.jsonl");
    monitor::write_timeline_svg(outcome.events, opts.out / "timeline.svg");
  }
  return outcome;
}

inline int cmd_monitor_sim(const MonitorSimOptions& opts) {
  const auto outcome = run_monitor_sim(opts);
  std::cout << outcome.events.size() << " frames, " << outcome.anomaly_episodes
            << " anomaly episode(s)\n";
  if (!opts.out.empty()) std::cout << "event log and timeline written to " << opts.out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Exit-code mapping shared by the binary and the subprocess tests.

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
}

}  // namespace condmon::cli
