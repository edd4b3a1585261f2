#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "condmon/corpus.hpp"
#include "condmon/encoders.hpp"
#include "condmon/errors.hpp"
#include "condmon/evalkit.hpp"
#include "condmon/net.hpp"
#include "condmon/objectives.hpp"

namespace condmon::trainkit {

using corpus::PhaseLabel;
using nlohmann::json;

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_demos = 32;
  double peak_lr = 0.0005;
  double weight_decay = 0.2;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double warmup_fraction = 0.05;  // of total steps; the length is unreported upstream
  double min_lr = 1e-6;
  std::uint64_t seed = 0;
  std::size_t triplets_per_demo = 1;
  double augment_probability = 0.5;
  bool use_paraphrasing = true;
  bool use_consistency = true;
  double grad_clip = 0.0;  // 0 disables
};

inline void validate_train_config(const TrainConfig& c) {
  if (c.epochs == 0 || c.batch_demos == 0 || c.triplets_per_demo == 0)
    throw ConfigError("train config: counts must be positive");
  if (c.peak_lr <= 0.0 || c.min_lr < 0.0 || c.min_lr > c.peak_lr)
    throw ConfigError("train config: need 0 <= min_lr <= peak_lr, peak_lr > 0");
  if (c.weight_decay < 0.0) throw ConfigError("train config: weight_decay must be >= 0");
  if (c.beta1 <= 0.0 || c.beta1 >= 1.0 || c.beta2 <= 0.0 || c.beta2 >= 1.0)
    throw ConfigError("train config: momentum decay rates must lie in (0, 1)");
  if (c.warmup_fraction <= 0.0 || c.warmup_fraction >= 0.5)
    throw ConfigError("train config: warmup_fraction must lie in (0, 0.5)");
  if (c.augment_probability < 0.0 || c.augment_probability > 1.0)
    throw ConfigError("train config: augment_probability must lie in [0, 1]");
}

inline json train_config_to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_demos", c.batch_demos},
              {"peak_lr", c.peak_lr},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"warmup_fraction", c.warmup_fraction},
              {"min_lr", c.min_lr},
              {"seed", c.seed},
              {"triplets_per_demo", c.triplets_per_demo},
              {"augment_probability", c.augment_probability},
              {"use_paraphrasing", c.use_paraphrasing},
              {"use_consistency", c.use_consistency},
              {"grad_clip", c.grad_clip}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_demos = j.value("batch_demos", c.batch_demos);
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.seed = j.value("seed", c.seed);
  c.triplets_per_demo = j.value("triplets_per_demo", c.triplets_per_demo);
  c.augment_probability = j.value("augment_probability", c.augment_probability);
  c.use_paraphrasing = j.value("use_paraphrasing", c.use_paraphrasing);
  c.use_consistency = j.value("use_consistency", c.use_consistency);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  return c;
}

// ---------------------------------------------------------------------------
// Schedule: linear ramp 0 -> peak over the warmup steps, then cosine decay
// peak -> min_lr. Both sides evaluate to peak_lr at the boundary.

inline double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (step > total_steps)
    throw BoundsError("lr_at: step " + std::to_string(step) + " beyond total " +
                      std::to_string(total_steps));
  const std::size_t warmup = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::llround(cfg.warmup_fraction * static_cast<double>(total_steps))));
  if (step <= warmup)
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double t = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(M_PI * t));
}

// ---------------------------------------------------------------------------
// Batch plans. Every row classifies one (frame, text) pair; positive rows
// also carry the triplet frames the consistency objective pairs up.

enum class ClassifySide { PreFrame, EffectFrame, Other };

struct TrainRow {
  std::string classify_frame;
  ClassifySide side = ClassifySide::Other;
  std::string query_text;  // action description used for this row
  PhaseLabel label = PhaseLabel::Unsatisfied;
  std::string pre_frame;
  std::string effect_frame;
  bool indicator = false;
};

using TrainingBatch = std::vector<TrainRow>;

namespace detail {

struct DonorEntry {
  const corpus::Demonstration* demo;
};

struct RuleIndex {
  const corpus::AugmentationRule* rule;
  std::map<std::string, std::vector<const corpus::Demonstration*>> donors_by_binding;
};

// Successful donors only: substituted frames also feed classification labels.
inline std::vector<RuleIndex> build_rule_index(const corpus::DemonstrationSet& set,
                                               const std::vector<corpus::AugmentationRule>& rules) {
  std::vector<RuleIndex> out;
  for (const auto& rule : rules) out.push_back({&rule, {}});
  for (const auto& d : set.demos) {
    if (!d.success) continue;
    const std::string tmpl = corpus::canonical_template(d.action_text, d.object_slots);
    for (auto& ri : out) {
      if (tmpl != ri.rule->source_template) continue;
      ri.donors_by_binding[corpus::detail::shared_binding_key(
                               ri.rule->source_template, ri.rule->target_template, tmpl,
                               d.object_slots)]
          .push_back(&d);
    }
  }
  return out;
}

inline std::string sample_text(const corpus::ParaphraseBank& bank,
                               const corpus::Demonstration& d, bool paraphrase, Rng& rng) {
  if (!paraphrase) return d.action_text;
  return corpus::sample_paraphrase(bank, d.action_text, d.object_slots, rng);
}

}  // namespace detail

// Shuffles demonstrations each epoch, draws triplets with fresh augmentation
// and paraphrase randomness, and appends unsatisfied-class rows at a 1:1
// ratio: mismatched-action pairings alternating with own-action core frames.
inline std::vector<TrainingBatch> make_batches(const corpus::DemonstrationSet& set,
                                               const TrainConfig& cfg, std::size_t epoch,
                                               const corpus::ParaphraseBank& bank,
                                               const std::vector<corpus::AugmentationRule>& rules) {
  if (set.demos.empty()) throw InputError("make_batches: empty demonstration set");
  const std::string etag = "epoch" + std::to_string(epoch);
  Rng order_rng = Rng::split(cfg.seed, etag + "|order");
  std::vector<std::size_t> order(set.demos.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  order_rng.shuffle(order);

  const auto rule_index = detail::build_rule_index(set, rules);

  std::vector<TrainingBatch> batches;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_demos) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_demos);
    TrainingBatch positives, negatives;
    std::vector<const corpus::Demonstration*> batch_demos;
    for (std::size_t k = start; k < end; ++k) batch_demos.push_back(&set.demos[order[k]]);

    for (std::size_t p = 0; p < batch_demos.size(); ++p) {
      const corpus::Demonstration& d = *batch_demos[p];
      for (std::size_t t = 0; t < cfg.triplets_per_demo; ++t) {
        Rng rng = Rng::split(cfg.seed, etag + "|" + d.id + "|" + std::to_string(t));
        if (d.pre.empty() || d.post.empty()) continue;
        const std::size_t pre_idx =
            d.pre.begin + static_cast<std::size_t>(rng.uniform_int(d.pre.size()));
        const std::size_t post_idx =
            d.post.begin + static_cast<std::size_t>(rng.uniform_int(d.post.size()));
        TrainRow row;
        row.pre_frame = d.frames[pre_idx];
        row.effect_frame = d.frames[post_idx];
        row.indicator = d.success;
        // Cross-action substitution with fresh randomness each epoch.
        const std::string tmpl = corpus::canonical_template(d.action_text, d.object_slots);
        for (const auto& ri : rule_index) {
          if (tmpl != ri.rule->target_template) continue;
          if (cfg.augment_probability <= 0.0 || !rng.bernoulli(cfg.augment_probability)) continue;
          const std::string key = corpus::detail::shared_binding_key(
              ri.rule->source_template, ri.rule->target_template, tmpl, d.object_slots);
          const auto it = ri.donors_by_binding.find(key);
          if (it == ri.donors_by_binding.end() || it->second.empty()) continue;
          const corpus::Demonstration& donor =
              *it->second[static_cast<std::size_t>(rng.uniform_int(it->second.size()))];
          if (ri.rule->direction == corpus::AugmentDirection::PostAsPre) {
            if (donor.post.empty()) continue;
            row.pre_frame = donor.frames[donor.post.begin + static_cast<std::size_t>(
                                                                rng.uniform_int(donor.post.size()))];
          } else {
            if (donor.pre.empty()) continue;
            row.effect_frame = donor.frames[donor.pre.begin + static_cast<std::size_t>(
                                                                  rng.uniform_int(donor.pre.size()))];
          }
          break;
        }
        const bool pre_side = (p + t) % 2 == 0;
        row.side = pre_side ? ClassifySide::PreFrame : ClassifySide::EffectFrame;
        row.classify_frame = pre_side ? row.pre_frame : row.effect_frame;
        row.label = pre_side ? PhaseLabel::Precondition
                             : corpus::phase_label(d, post_idx, d.action_text);
        row.query_text = detail::sample_text(bank, d, cfg.use_paraphrasing, rng);
        positives.push_back(row);

        // One unsatisfied-class row per positive.
        Rng nrng = Rng::split(cfg.seed, etag + "|neg|" + d.id + "|" + std::to_string(t));
        TrainRow neg;
        neg.indicator = false;
        neg.label = PhaseLabel::Unsatisfied;
        neg.pre_frame = row.pre_frame;
        neg.effect_frame = row.effect_frame;
        neg.side = ClassifySide::Other;
        const bool want_core = (p + t) % 2 == 1 && !d.core.empty();
        if (want_core) {
          const std::size_t core_idx =
              d.core.begin + static_cast<std::size_t>(nrng.uniform_int(d.core.size()));
          neg.classify_frame = d.frames[core_idx];
          neg.query_text = detail::sample_text(bank, d, cfg.use_paraphrasing, nrng);
          negatives.push_back(neg);
          continue;
        }
        // Mismatched action from the same batch.
        const corpus::Demonstration* donor = nullptr;
        const std::size_t offset = static_cast<std::size_t>(nrng.uniform_int(batch_demos.size()));
        for (std::size_t scan = 0; scan < batch_demos.size(); ++scan) {
          const corpus::Demonstration* cand = batch_demos[(offset + scan) % batch_demos.size()];
          if (cand->action_text != d.action_text) {
            donor = cand;
            break;
          }
        }
        if (donor) {
          neg.classify_frame =
              d.frames[static_cast<std::size_t>(nrng.uniform_int(d.frame_count()))];
          neg.query_text = detail::sample_text(bank, *donor, cfg.use_paraphrasing, nrng);
          negatives.push_back(neg);
        } else if (!d.core.empty()) {
          const std::size_t core_idx =
              d.core.begin + static_cast<std::size_t>(nrng.uniform_int(d.core.size()));
          neg.classify_frame = d.frames[core_idx];
          neg.query_text = detail::sample_text(bank, d, cfg.use_paraphrasing, nrng);
          negatives.push_back(neg);
        }
      }
    }
    TrainingBatch batch = positives;
    batch.insert(batch.end(), negatives.begin(), negatives.end());
    if (!batch.empty()) batches.push_back(std::move(batch));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Decoupled-weight-decay adaptive-moment optimizer.

struct AdamW {
  net::NetState m, v;
  std::size_t t = 0;
  static constexpr double kEps = 1e-8;

  explicit AdamW(const net::NetState& params)
      : m(net::zeros_like(params)), v(net::zeros_like(params)) {}

  void step(net::NetState& params, net::NetState& grads, double lr, const TrainConfig& cfg) {
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    auto ps = net::param_spans(params);
    auto gs = net::param_spans(grads);
    auto ms = net::param_spans(m);
    auto vs = net::param_spans(v);
    for (std::size_t s = 0; s < ps.size(); ++s) {
      // The temperature is a learned scale, not a weight; decaying it would
      // drift tau even when no gradient reaches it.
      const double wd = ps[s].name == "log_tau" ? 0.0 : cfg.weight_decay;
      for (std::size_t i = 0; i < ps[s].n; ++i) {
        const double g = gs[s].data[i];
        double& mi = ms[s].data[i];
        double& vi = vs[s].data[i];
        mi = cfg.beta1 * mi + (1.0 - cfg.beta1) * g;
        vi = cfg.beta2 * vi + (1.0 - cfg.beta2) * g * g;
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        double& p = ps[s].data[i];
        p -= lr * (mhat / (std::sqrt(vhat) + kEps) + wd * p);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Train record

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double l_condition = 0.0;
  double l_consistency = 0.0;
  double total = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_phase_accuracy = 0.0;
  double val_anomaly_f1 = 0.0;
  double wall_ms = 0.0;
};

struct TrainRecord {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

inline void write_train_record(const TrainRecord& rec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write train record: " + path.string());
  for (const auto& s : rec.steps)
    out << json{{"kind", "step"},
                {"step", s.step},
                {"lr", s.lr},
                {"l_condition", s.l_condition},
                {"l_consistency", s.l_consistency},
                {"total", s.total}}
               .dump()
        << "\n";
  for (const auto& e : rec.epochs)
    out << json{{"kind", "epoch"},
                {"epoch", e.epoch},
                {"train_loss", e.train_loss},
                {"val_phase_accuracy", e.val_phase_accuracy},
                {"val_anomaly_f1", e.val_anomaly_f1},
                {"wall_ms", e.wall_ms}}
               .dump()
        << "\n";
}

// ---------------------------------------------------------------------------
// One forward/backward over a planned batch.

namespace detail {

struct RowCaches {
  net::StateCache sc_classify;
  net::StateFeatures feats_classify;
  net::StateCache sc_pre, sc_post;
  net::StateFeatures feats_pre, feats_post;
  bool has_pair = false;
  net::CondCache cond;
  net::HeadCache head;
};

struct BatchForward {
  objectives::BatchBundle bundle;
  std::vector<RowCaches> rows;
};

inline BatchForward forward_batch(const net::NetState& state, const net::NetConfig& cfg,
                                  const TrainingBatch& batch, encoders::FrameEncoder& encoder,
                                  bool use_consistency) {
  const std::size_t b = batch.size();
  BatchForward out;
  out.rows.resize(b);
  out.bundle.logits = Mat(b, 3);
  out.bundle.labels = Mat(b, 3);
  out.bundle.cls_plus = Mat(b, cfg.working_dim);
  out.bundle.cls_minus = Mat(b, cfg.working_dim);
  out.bundle.paraphrase_semantics = Mat(b, cfg.working_dim);
  out.bundle.indicators.assign(b, 0);
  for (std::size_t i = 0; i < b; ++i) {
    const TrainRow& row = batch[i];
    RowCaches& rc = out.rows[i];
    rc.feats_classify =
        net::state_forward_cached(state, cfg, encoder.image(row.classify_frame), rc.sc_classify);
    const auto& sem = encoder.text(row.query_text);
    const Vec e = net::condition_forward_cached(state, cfg, rc.feats_classify, sem, rc.cond);
    const Vec logits = net::classify_cached(state, e, rc.head);
    for (int k = 0; k < 3; ++k) out.bundle.logits.at(i, static_cast<std::size_t>(k)) = logits[static_cast<std::size_t>(k)];
    out.bundle.labels.at(i, static_cast<std::size_t>(static_cast<int>(row.label))) = 1.0;
    rc.has_pair = use_consistency && row.indicator;
    if (rc.has_pair) {
      if (row.side == ClassifySide::PreFrame) {
        rc.feats_pre = rc.feats_classify;
        rc.feats_post =
            net::state_forward_cached(state, cfg, encoder.image(row.effect_frame), rc.sc_post);
      } else if (row.side == ClassifySide::EffectFrame) {
        rc.feats_post = rc.feats_classify;
        rc.feats_pre =
            net::state_forward_cached(state, cfg, encoder.image(row.pre_frame), rc.sc_pre);
      } else {
        rc.feats_pre =
            net::state_forward_cached(state, cfg, encoder.image(row.pre_frame), rc.sc_pre);
        rc.feats_post =
            net::state_forward_cached(state, cfg, encoder.image(row.effect_frame), rc.sc_post);
      }
      for (std::size_t c = 0; c < cfg.working_dim; ++c) {
        out.bundle.cls_plus.at(i, c) = rc.feats_post.cls_hat[c];
        out.bundle.cls_minus.at(i, c) = rc.feats_pre.cls_hat[c];
      }
      const auto& psem = encoder.text(row.query_text);
      for (std::size_t c = 0; c < cfg.working_dim; ++c)
        out.bundle.paraphrase_semantics.at(i, c) = psem.values[c];
      out.bundle.indicators[i] = 1;
    }
  }
  return out;
}

inline void backward_batch(const net::NetState& state, const net::NetConfig& cfg,
                           const TrainingBatch& batch, BatchForward& fwd, double alpha,
                           double beta, double tau, net::NetState& grads) {
  Mat d_logits;
  objectives::condition_loss_grad(fwd.bundle.logits, fwd.bundle.labels, d_logits);
  scale_inplace(d_logits, alpha);
  objectives::ConsistencyGrads cons;
  const bool any_pair = beta != 0.0;
  if (any_pair) cons = objectives::consistency_grads_from_bundle(fwd.bundle, tau);
  if (any_pair) grads.log_tau += beta * cons.d_tau * tau;  // tau = exp(log_tau)
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TrainRow& row = batch[i];
    RowCaches& rc = fwd.rows[i];
    Vec dlg(3);
    for (int k = 0; k < 3; ++k) dlg[static_cast<std::size_t>(k)] = d_logits.at(i, static_cast<std::size_t>(k));
    const Vec de = net::classify_backward(state, rc.head, dlg, grads);
    auto cb = net::condition_backward(state, cfg, rc.cond, de, grads);
    Vec d_cls_classify(cfg.working_dim, 0.0);
    if (!cb.d_cls_hat.empty()) d_cls_classify = cb.d_cls_hat;
    if (!rc.has_pair || !any_pair) {
      net::state_backward(state, cfg, rc.sc_classify, d_cls_classify, cb.d_locals, grads);
      continue;
    }
    Vec d_plus(cfg.working_dim), d_minus(cfg.working_dim);
    for (std::size_t c = 0; c < cfg.working_dim; ++c) {
      d_plus[c] = beta * cons.d_cls_plus.at(i, c);
      d_minus[c] = beta * cons.d_cls_minus.at(i, c);
    }
    if (row.side == ClassifySide::PreFrame) {
      for (std::size_t c = 0; c < cfg.working_dim; ++c) d_minus[c] += d_cls_classify[c];
      net::state_backward(state, cfg, rc.sc_classify, d_minus, cb.d_locals, grads);
      net::state_backward(state, cfg, rc.sc_post, d_plus, Mat(), grads);
    } else if (row.side == ClassifySide::EffectFrame) {
      for (std::size_t c = 0; c < cfg.working_dim; ++c) d_plus[c] += d_cls_classify[c];
      net::state_backward(state, cfg, rc.sc_classify, d_plus, cb.d_locals, grads);
      net::state_backward(state, cfg, rc.sc_pre, d_minus, Mat(), grads);
    } else {
      net::state_backward(state, cfg, rc.sc_classify, d_cls_classify, cb.d_locals, grads);
      net::state_backward(state, cfg, rc.sc_pre, d_minus, Mat(), grads);
      net::state_backward(state, cfg, rc.sc_post, d_plus, Mat(), grads);
    }
  }
}

inline double grad_norm(net::NetState& grads) {
  double acc = 0.0;
  for (const auto& span : net::param_spans(grads))
    for (std::size_t i = 0; i < span.n; ++i) acc += span.data[i] * span.data[i];
  return std::sqrt(acc);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Full training recipe.

struct FitResult {
  TrainRecord record;
  net::NetState best_state;
  double best_val_f1 = -1.0;
  std::size_t best_epoch = 0;
  objectives::LossWeights weights;
};

inline FitResult fit(net::NetState& state, const net::NetConfig& net_cfg, const TrainConfig& cfg,
                     const corpus::DemonstrationSet& train_set,
                     const corpus::DemonstrationSet& val_set, const corpus::ParaphraseBank& bank,
                     const std::vector<corpus::AugmentationRule>& rules,
                     encoders::FrameEncoder& encoder,
                     const std::optional<std::filesystem::path>& run_dir = std::nullopt) {
  validate_train_config(cfg);
  net::validate_config(net_cfg);
  // The single-stage ablations drop the consistency objective along with the
  // architecture change.
  const bool use_consistency = cfg.use_consistency && net_cfg.variant == net::Variant::Full;

  const std::size_t batches_per_epoch =
      (train_set.demos.size() + cfg.batch_demos - 1) / cfg.batch_demos;
  const std::size_t total_steps = cfg.epochs * batches_per_epoch;

  FitResult result;
  AdamW opt(state);
  objectives::LossWeights weights;
  std::size_t step = 0;
  Rng ckpt_rng(cfg.seed);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    double epoch_loss = 0.0;
    std::size_t epoch_batches = 0;
    const auto batches = make_batches(train_set, cfg, epoch, bank, rules);
    for (const auto& batch : batches) {
      auto fwd = detail::forward_batch(state, net_cfg, batch, encoder, use_consistency);
      const double tau = net::temperature(state);
      const double lc = objectives::condition_loss(fwd.bundle.logits, fwd.bundle.labels);
      const double lcons =
          use_consistency ? objectives::consistency_from_bundle(fwd.bundle, tau) : 0.0;
      if (!weights.frozen) {
        if (use_consistency) {
          objectives::calibrate_weights(weights, lc, lcons);
        } else {
          weights.alpha = lc < objectives::kCalibrationFloor ? 1.0 : 1.0 / lc;
          weights.beta = 0.0;
          weights.frozen = true;
        }
      }
      const double total = objectives::total_loss(lc, lcons, weights);
      if (!std::isfinite(total)) {
        if (run_dir) {
          std::ofstream abort_out(*run_dir / "abort.json");
          abort_out << json{{"epoch", epoch},
                            {"batch", epoch_batches},
                            {"l_condition", lc},
                            {"l_consistency", lcons}}
                           .dump(2);
        }
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(epoch_batches) + " (condition=" + std::to_string(lc) +
                           ", consistency=" + std::to_string(lcons) + ")");
      }
      net::NetState grads = net::zeros_like(state);
      detail::backward_batch(state, net_cfg, batch, fwd, weights.alpha,
                             use_consistency ? weights.beta : 0.0, tau, grads);
      if (cfg.grad_clip > 0.0) {
        const double gn = detail::grad_norm(grads);
        if (gn > cfg.grad_clip) {
          const double scale = cfg.grad_clip / gn;
          for (auto& span : net::param_spans(grads))
            for (std::size_t i = 0; i < span.n; ++i) span.data[i] *= scale;
        }
      }
      const double lr = lr_at(std::min(step + 1, total_steps), total_steps, cfg);
      opt.step(state, grads, lr, cfg);
      result.record.steps.push_back({step, lr, lc, lcons, total});
      epoch_loss += total;
      ++epoch_batches;
      ++step;
    }

    // Per-epoch validation; the headline metric selects the checkpoint.
    evalkit::EvalOptions opts;
    const evalkit::TaskReports reports =
        evalkit::evaluate_model(state, net_cfg, encoder, val_set, opts);
    const auto epoch_end = std::chrono::steady_clock::now();
    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = epoch_batches > 0 ? epoch_loss / static_cast<double>(epoch_batches) : 0.0;
    er.val_phase_accuracy = reports.phase.accuracy;
    er.val_anomaly_f1 = reports.anomaly.f1;
    er.wall_ms = std::chrono::duration<double, std::milli>(epoch_end - epoch_start).count();
    result.record.epochs.push_back(er);
    if (er.val_anomaly_f1 > result.best_val_f1) {
      result.best_val_f1 = er.val_anomaly_f1;
      result.best_epoch = epoch;
      result.best_state = state;
      if (run_dir)
        net::save_checkpoint(*run_dir / "checkpoint_best.ckpt", net_cfg, state,
                             ckpt_rng.serialize());
    }
  }
  result.weights = weights;
  if (run_dir) {
    net::save_checkpoint(*run_dir / "checkpoint_last.ckpt", net_cfg, state, ckpt_rng.serialize());
    write_train_record(result.record, *run_dir / "train_record.jsonl");
  }
  if (result.best_val_f1 < 0.0) result.best_state = state;
  return result;
}

}  // namespace condmon::trainkit
