#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "condmon/corpus.hpp"
#include "condmon/encoders.hpp"
#include "condmon/errors.hpp"
#include "condmon/monitor.hpp"
#include "condmon/net.hpp"

namespace condmon::evalkit {

using corpus::PhaseLabel;
using monitor::ExpectedPhase;
using nlohmann::json;

// Rows are truth, columns are predictions.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;

  explicit ConfusionMatrix(std::size_t n = 0) : classes(n), counts(n * n, 0) {}
  std::size_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  std::size_t at(std::size_t truth, std::size_t pred) const {
    return counts[truth * classes + pred];
  }
  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
  std::size_t trace() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < classes; ++i) n += at(i, i);
    return n;
  }
};

struct PerClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct LatencyStats {
  double mean_ms = 0.0;
  double std_ms = 0.0;
  std::size_t samples = 0;
};

struct EvalReport {
  std::string task;  // "phase" or "anomaly"
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<PerClassMetrics> per_class;
  std::size_t samples = 0;
  LatencyStats latency;
  ConfusionMatrix confusion;
};

namespace detail {

inline PerClassMetrics class_metrics(const ConfusionMatrix& cm, std::size_t k) {
  PerClassMetrics m;
  std::size_t tp = cm.at(k, k), fp = 0, fn = 0;
  for (std::size_t i = 0; i < cm.classes; ++i) {
    if (i == k) continue;
    fp += cm.at(i, k);
    fn += cm.at(k, i);
  }
  m.support = tp + fn;
  m.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  m.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  m.f1 = m.precision + m.recall == 0.0 ? 0.0
                                       : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

}  // namespace detail

// Macro-averaged metrics for the three-class phase task.
inline EvalReport report_from_confusion_macro(const ConfusionMatrix& cm, const std::string& task) {
  EvalReport r;
  r.task = task;
  r.confusion = cm;
  r.samples = cm.total();
  r.accuracy = r.samples == 0 ? 0.0 : static_cast<double>(cm.trace()) / static_cast<double>(r.samples);
  for (std::size_t k = 0; k < cm.classes; ++k) {
    const PerClassMetrics m = detail::class_metrics(cm, k);
    r.per_class.push_back(m);
    r.precision += m.precision;
    r.recall += m.recall;
    r.f1 += m.f1;
  }
  if (cm.classes > 0) {
    r.precision /= static_cast<double>(cm.classes);
    r.recall /= static_cast<double>(cm.classes);
    r.f1 /= static_cast<double>(cm.classes);
  }
  return r;
}

inline EvalReport phase_metrics(const std::vector<PhaseLabel>& preds,
                                const std::vector<PhaseLabel>& truth) {
  if (preds.size() != truth.size())
    throw InputError("phase_metrics: " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(truth.size()) + " labels");
  ConfusionMatrix cm(3);
  for (std::size_t i = 0; i < preds.size(); ++i)
    ++cm.at(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(preds[i]));
  return report_from_confusion_macro(cm, "phase");
}

// Binary metrics with "anomalous" as the positive class.
inline EvalReport anomaly_metrics(const std::vector<bool>& decisions,
                                  const std::vector<bool>& truth) {
  if (decisions.size() != truth.size())
    throw InputError("anomaly_metrics: " + std::to_string(decisions.size()) + " decisions vs " +
                     std::to_string(truth.size()) + " labels");
  ConfusionMatrix cm(2);
  for (std::size_t i = 0; i < decisions.size(); ++i)
    ++cm.at(truth[i] ? 1u : 0u, decisions[i] ? 1u : 0u);
  EvalReport r;
  r.task = "anomaly";
  r.confusion = cm;
  r.samples = cm.total();
  r.accuracy = r.samples == 0 ? 0.0 : static_cast<double>(cm.trace()) / static_cast<double>(r.samples);
  r.per_class = {detail::class_metrics(cm, 0), detail::class_metrics(cm, 1)};
  r.precision = r.per_class[1].precision;
  r.recall = r.per_class[1].recall;
  r.f1 = r.per_class[1].f1;
  return r;
}

// ---------------------------------------------------------------------------
// Offline anomaly protocol: the online expected-vs-predicted rule with the
// same 8-consecutive-frame filter, swept over a demonstration's frames.

inline std::vector<ExpectedPhase> expected_sequence(const corpus::Demonstration& demo) {
  std::vector<ExpectedPhase> out(demo.frame_count());
  for (std::size_t i = 0; i < demo.frame_count(); ++i) {
    if (demo.pre.contains(i))
      out[i] = PhaseLabel::Precondition;
    else if (demo.post.contains(i))
      out[i] = PhaseLabel::Effect;
    else
      out[i] = std::nullopt;  // core: suspended
  }
  return out;
}

inline bool demo_anomaly_decision(const std::vector<PhaseLabel>& per_frame_preds,
                                  const std::vector<ExpectedPhase>& expected) {
  if (per_frame_preds.size() != expected.size())
    throw InputError("demo_anomaly_decision: prediction/expectation length mismatch");
  monitor::FilterState filter;
  for (std::size_t i = 0; i < per_frame_preds.size(); ++i)
    if (monitor::filter_update(filter, expected[i], per_frame_preds[i])) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Model evaluation over a demonstration set

struct EvalOptions {
  bool oracle = false;       // use ground-truth labels as predictions
  bool paraphrased = false;  // query with paraphrased action descriptions
  const corpus::ParaphraseBank* bank = nullptr;
  std::uint64_t seed = 0;
};

struct TaskReports {
  EvalReport phase;
  EvalReport anomaly;
};

inline TaskReports evaluate_model(const net::NetState& state, const net::NetConfig& cfg,
                                  encoders::FrameEncoder& encoder,
                                  const corpus::DemonstrationSet& set, const EvalOptions& opts) {
  if (opts.paraphrased && !opts.bank)
    throw ConfigError("paraphrased evaluation requires a paraphrase bank");
  std::vector<PhaseLabel> preds, truth;
  std::vector<bool> decisions, anomaly_truth;
  for (const auto& demo : set.demos) {
    Rng rng = Rng::split(Rng::hash_combine(opts.seed, "eval"), demo.id);
    const std::string query =
        opts.paraphrased
            ? corpus::sample_paraphrase(*opts.bank, demo.action_text, demo.object_slots, rng)
            : demo.action_text;
    std::vector<PhaseLabel> demo_preds(demo.frame_count());
    const encoders::SemanticVector* sem = opts.oracle ? nullptr : &encoder.text(query);
    for (std::size_t i = 0; i < demo.frame_count(); ++i) {
      const PhaseLabel label = corpus::phase_label(demo, i, demo.action_text);
      PhaseLabel predicted = label;
      if (!opts.oracle) {
        const net::ForwardResult fr = net::forward(state, cfg, encoder.image(demo.frames[i]), *sem);
        const double lse = logsumexp(fr.logits.data(), 3);
        std::array<double, 3> conf{};
        for (int k = 0; k < 3; ++k)
          conf[static_cast<std::size_t>(k)] =
              std::exp(fr.logits[static_cast<std::size_t>(k)] - lse);
        predicted = monitor::argmax_phase(conf);
      }
      demo_preds[i] = predicted;
      preds.push_back(predicted);
      truth.push_back(label);
    }
    decisions.push_back(demo_anomaly_decision(demo_preds, expected_sequence(demo)));
    anomaly_truth.push_back(demo.anomalous());
  }
  TaskReports reports;
  reports.phase = phase_metrics(preds, truth);
  reports.anomaly = anomaly_metrics(decisions, anomaly_truth);
  return reports;
}

// ---------------------------------------------------------------------------
// Inference latency: wall clock per batch of `actions_per_batch` forward
// passes over precomputed token grids (text features are extracted once and
// excluded, matching how per-timestep cost is counted).

inline LatencyStats latency_benchmark(const net::NetState& state, const net::NetConfig& cfg,
                                      std::size_t n_batches = 1000,
                                      std::size_t actions_per_batch = 6) {
  if (n_batches == 0) throw InputError("latency_benchmark: need at least one batch");
  Rng rng(99);
  encoders::TokenGrid grid;
  grid.grid_side = cfg.grid_side;
  grid.dim = cfg.working_dim;
  grid.tokens = Mat::randn(cfg.tokens(), cfg.working_dim, 1.0, rng);
  std::vector<encoders::SemanticVector> sems(actions_per_batch);
  for (auto& s : sems) {
    s.values.resize(cfg.working_dim);
    for (auto& x : s.values) x = rng.normal();
  }
  std::vector<double> per_batch_ms(n_batches);
  for (std::size_t b = 0; b < n_batches; ++b) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t a = 0; a < actions_per_batch; ++a)
      (void)net::forward(state, cfg, grid, sems[a]);
    const auto t1 = std::chrono::steady_clock::now();
    per_batch_ms[b] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  LatencyStats stats;
  stats.samples = n_batches;
  for (double x : per_batch_ms) stats.mean_ms += x;
  stats.mean_ms /= static_cast<double>(n_batches);
  double var = 0.0;
  for (double x : per_batch_ms) var += (x - stats.mean_ms) * (x - stats.mean_ms);
  stats.std_ms = n_batches > 1 ? std::sqrt(var / static_cast<double>(n_batches)) : 0.0;
  return stats;
}

// ---------------------------------------------------------------------------
// Serialization and the side-by-side table

inline json report_to_json(const EvalReport& r) {
  json j;
  j["task"] = r.task;
  j["accuracy"] = r.accuracy;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["samples"] = r.samples;
  json per_class = json::array();
  for (const auto& c : r.per_class)
    per_class.push_back({{"precision", c.precision},
                         {"recall", c.recall},
                         {"f1", c.f1},
                         {"support", c.support}});
  j["per_class"] = per_class;
  json cm = json::array();
  for (std::size_t t = 0; t < r.confusion.classes; ++t) {
    json row = json::array();
    for (std::size_t p = 0; p < r.confusion.classes; ++p) row.push_back(r.confusion.at(t, p));
    cm.push_back(row);
  }
  j["confusion"] = cm;
  if (r.latency.samples > 0)
    j["latency"] = {{"mean_ms", r.latency.mean_ms},
                    {"std_ms", r.latency.std_ms},
                    {"samples", r.latency.samples}};
  return j;
}

// Four metric columns per task, one model per row.
inline std::string format_table(const std::string& model_name, const TaskReports& reports) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "                         Anomaly Detection        Condition Learning\n";
  out << "Model                    Acc   Pre   Rec   F1     Acc   Pre   Rec   F1\n";
  out << std::left << std::setw(24) << model_name << " ";
  const auto row = [&](const EvalReport& r) {
    out << std::setw(6) << r.accuracy << std::setw(6) << r.precision << std::setw(6) << r.recall
        << std::setw(7) << r.f1;
  };
  row(reports.anomaly);
  row(reports.phase);
  out << "\n";
  return out.str();
}

}  // namespace condmon::evalkit
