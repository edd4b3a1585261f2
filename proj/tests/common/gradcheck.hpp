#pragma once

// Finite-difference check of the full training gradient path: two state
// passes, the condition pass, the classifier head and both losses, composed
// through the same trainkit code the optimizer uses.

#include <filesystem>
#include <string>
#include <vector>

#include "condmon/encoders.hpp"
#include "condmon/net.hpp"
#include "condmon/objectives.hpp"
#include "condmon/trainkit.hpp"

#include "common/testutil.hpp"

namespace condmon::testing {

inline net::NetConfig tiny_net_config() {
  net::NetConfig cfg;
  cfg.working_dim = 16;
  cfg.grid_side = 2;
  cfg.state_depth = 1;
  cfg.condition_depth = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.head_hidden = 8;
  return cfg;
}

// Builds a few random frame files plus a batch plan over them.
struct GradCheckProblem {
  encoders::FrameEncoder encoder;
  trainkit::TrainingBatch batch;

  explicit GradCheckProblem(const std::filesystem::path& dir, std::uint64_t seed)
      : encoder(encoders::make_encoder_spec(encoders::EncoderKind::Synthetic, 2, 16, 16, seed)) {
    Rng rng(Rng::hash_combine(seed, "gradcheck"));
    std::vector<std::string> frames;
    for (int f = 0; f < 6; ++f) {
      nlohmann::json attrs = nlohmann::json::object();
      for (int a = 0; a < 5; ++a)
        attrs["attr" + std::to_string(a)] = rng.normal();
      const std::filesystem::path p = dir / ("frame" + std::to_string(f) + ".json");
      std::ofstream out(p);
      out << nlohmann::json{{"attrs", attrs}}.dump();
      frames.push_back(p.string());
    }
    const char* texts[3] = {"pick up bottle", "pour bottle into cup", "wipe table"};
    for (int i = 0; i < 3; ++i) {
      trainkit::TrainRow row;
      row.pre_frame = frames[static_cast<std::size_t>(2 * i)];
      row.effect_frame = frames[static_cast<std::size_t>(2 * i + 1)];
      row.side = i % 2 == 0 ? trainkit::ClassifySide::PreFrame : trainkit::ClassifySide::EffectFrame;
      row.classify_frame =
          row.side == trainkit::ClassifySide::PreFrame ? row.pre_frame : row.effect_frame;
      row.query_text = texts[i];
      row.label = static_cast<corpus::PhaseLabel>(rng.uniform_int(3));
      row.indicator = i < 2;  // keep the consistency term non-trivial
      batch.push_back(row);
    }
  }
};

inline double gradcheck_loss(const net::NetState& state, const net::NetConfig& cfg,
                             GradCheckProblem& problem, double alpha, double beta) {
  auto fwd = trainkit::detail::forward_batch(state, cfg, problem.batch, problem.encoder, true);
  const double lc = objectives::condition_loss(fwd.bundle.logits, fwd.bundle.labels);
  const double lcons = objectives::consistency_from_bundle(fwd.bundle, net::temperature(state));
  return alpha * lc + beta * lcons;
}

inline net::NetState gradcheck_analytic(const net::NetState& state, const net::NetConfig& cfg,
                                        GradCheckProblem& problem, double alpha, double beta) {
  auto fwd = trainkit::detail::forward_batch(state, cfg, problem.batch, problem.encoder, true);
  net::NetState grads = net::zeros_like(state);
  trainkit::detail::backward_batch(state, cfg, problem.batch, fwd, alpha, beta,
                                   net::temperature(state), grads);
  return grads;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
};

// Central differences over every trainable scalar.
inline GradCheckResult run_gradcheck(std::uint64_t seed, const std::filesystem::path& dir) {
  const net::NetConfig cfg = tiny_net_config();
  net::NetState state = net::init_net(cfg, seed);
  GradCheckProblem problem(dir, seed);
  const double alpha = 0.7, beta = 1.3;
  net::NetState analytic = gradcheck_analytic(state, cfg, problem, alpha, beta);
  auto spans = net::param_spans(state);
  auto gspans = net::param_spans(analytic);
  const double h = 1e-5;
  GradCheckResult result;
  for (std::size_t s = 0; s < spans.size(); ++s) {
    for (std::size_t k = 0; k < spans[s].n; ++k) {
      const double orig = spans[s].data[k];
      spans[s].data[k] = orig + h;
      const double lp = gradcheck_loss(state, cfg, problem, alpha, beta);
      spans[s].data[k] = orig - h;
      const double lm = gradcheck_loss(state, cfg, problem, alpha, beta);
      spans[s].data[k] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = gspans[s].data[k];
      const double rel = std::abs(fd - an) / std::max({1e-6, std::abs(fd), std::abs(an)});
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = spans[s].name + "[" + std::to_string(k) + "]";
      }
    }
  }
  return result;
}

}  // namespace condmon::testing
