#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "condmon/encoders.hpp"
#include "condmon/errors.hpp"
#include "condmon/rng.hpp"
#include "condmon/tensor.hpp"

namespace condmon::net {

using encoders::SemanticVector;
using encoders::TokenGrid;
using nlohmann::json;

enum class Variant { Full, NoStateTransformer, NoConditionTransformer };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoStateTransformer: return "no_state_transformer";
    case Variant::NoConditionTransformer: return "no_condition_transformer";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::Full;
  if (s == "no_state_transformer") return Variant::NoStateTransformer;
  if (s == "no_condition_transformer") return Variant::NoConditionTransformer;
  throw ConfigError("unknown model variant: " + s);
}

struct NetConfig {
  std::size_t working_dim = 384;
  std::size_t grid_side = 16;
  std::size_t state_depth = 8;
  std::size_t condition_depth = 8;
  std::size_t heads = 6;
  double mlp_ratio = 4.0;
  std::size_t head_hidden = 256;
  Variant variant = Variant::Full;

  std::size_t tokens() const { return grid_side * grid_side; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(mlp_ratio * static_cast<double>(working_dim));
  }
  // The single-transformer ablation runs twice the depth so the trainable
  // parameter count stays comparable.
  std::size_t effective_state_depth() const {
    return variant == Variant::NoStateTransformer ? 0 : state_depth;
  }
  std::size_t effective_condition_depth() const {
    if (variant == Variant::NoConditionTransformer) return 0;
    return variant == Variant::NoStateTransformer ? 2 * condition_depth : condition_depth;
  }
};

inline void validate_config(const NetConfig& cfg) {
  if (cfg.working_dim == 0 || cfg.working_dim % cfg.heads != 0)
    throw ConfigError("working_dim must be a positive multiple of heads");
  if (cfg.working_dim % 2 != 0) throw ConfigError("working_dim must be even");
  if (cfg.grid_side == 0) throw ConfigError("grid_side must be positive");
  if (cfg.variant != Variant::NoStateTransformer && cfg.state_depth == 0)
    throw ConfigError("state_depth must be >= 1");
  if (cfg.variant != Variant::NoConditionTransformer && cfg.condition_depth == 0)
    throw ConfigError("condition_depth must be >= 1");
  if (cfg.mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
  if (cfg.head_hidden == 0) throw ConfigError("head_hidden must be positive");
}

inline json config_to_json(const NetConfig& c) {
  return json{{"working_dim", c.working_dim}, {"grid_side", c.grid_side},
              {"state_depth", c.state_depth}, {"condition_depth", c.condition_depth},
              {"heads", c.heads},             {"mlp_ratio", c.mlp_ratio},
              {"head_hidden", c.head_hidden}, {"variant", to_string(c.variant)}};
}

inline NetConfig config_from_json(const json& j) {
  NetConfig c;
  c.working_dim = j.at("working_dim").get<std::size_t>();
  c.grid_side = j.at("grid_side").get<std::size_t>();
  c.state_depth = j.at("state_depth").get<std::size_t>();
  c.condition_depth = j.at("condition_depth").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.head_hidden = j.at("head_hidden").get<std::size_t>();
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

struct LinearParam {
  Mat W;  // in x out
  Vec b;  // out
};

struct LayerNormParam {
  Vec gamma;
  Vec beta;
};

struct Block {
  LayerNormParam ln1;
  LinearParam qkv;   // D x 3D
  LinearParam proj;  // D x D
  LayerNormParam ln2;
  LinearParam fc1;  // D x H
  LinearParam fc2;  // H x D
};

struct Stage {
  std::vector<Block> blocks;
  LayerNormParam final_ln;
};

// All trainable state. The same structure doubles as the gradient container
// and the optimizer moment containers.
struct NetState {
  Vec cls;  // learnable cls token
  Stage state_stage;
  Stage cond_stage;
  LinearParam head1;  // D x head_hidden
  LinearParam head2;  // head_hidden x 3
  double log_tau = 0.0;
};

constexpr double kTauMin = 0.01;
constexpr double kTauMax = 100.0;

inline double temperature(const NetState& s) {
  return std::clamp(std::exp(s.log_tau), kTauMin, kTauMax);
}

namespace detail {

inline LinearParam make_linear(std::size_t in, std::size_t out, Rng& rng) {
  LinearParam p;
  const double std = std::sqrt(2.0 / static_cast<double>(in + out));
  p.W = Mat::randn(in, out, std, rng);
  p.b.assign(out, 0.0);
  return p;
}

inline LayerNormParam make_layernorm(std::size_t dim) {
  LayerNormParam p;
  p.gamma.assign(dim, 1.0);
  p.beta.assign(dim, 0.0);
  return p;
}

inline Block make_block(const NetConfig& cfg, Rng& rng) {
  Block b;
  const std::size_t d = cfg.working_dim;
  const std::size_t h = cfg.mlp_hidden();
  b.ln1 = make_layernorm(d);
  b.qkv = make_linear(d, 3 * d, rng);
  b.proj = make_linear(d, d, rng);
  b.ln2 = make_layernorm(d);
  b.fc1 = make_linear(d, h, rng);
  b.fc2 = make_linear(h, d, rng);
  return b;
}

inline Stage make_stage(const NetConfig& cfg, std::size_t depth, Rng& rng) {
  Stage s;
  for (std::size_t i = 0; i < depth; ++i) s.blocks.push_back(make_block(cfg, rng));
  if (depth > 0) s.final_ln = make_layernorm(cfg.working_dim);
  return s;
}

}  // namespace detail

inline NetState init_net(const NetConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  Rng rng(Rng::hash_combine(seed, "net-init"));
  NetState s;
  // cls token drawn from a zero-mean unit-variance Gaussian.
  s.cls.resize(cfg.working_dim);
  for (auto& x : s.cls) x = rng.normal();
  s.state_stage = detail::make_stage(cfg, cfg.effective_state_depth(), rng);
  s.cond_stage = detail::make_stage(cfg, cfg.effective_condition_depth(), rng);
  s.head1 = detail::make_linear(cfg.working_dim, cfg.head_hidden, rng);
  s.head2 = detail::make_linear(cfg.head_hidden, 3, rng);
  s.log_tau = std::log(1.0 / 0.07);
  return s;
}

// Same structure filled with zeros; used for gradients and optimizer moments.
inline NetState zeros_like(const NetState& s) {
  NetState z = s;
  const auto zero_vec = [](Vec& v) { std::fill(v.begin(), v.end(), 0.0); };
  const auto zero_lin = [&](LinearParam& p) {
    std::fill(p.W.d.begin(), p.W.d.end(), 0.0);
    zero_vec(p.b);
  };
  const auto zero_ln = [&](LayerNormParam& p) {
    zero_vec(p.gamma);
    zero_vec(p.beta);
  };
  const auto zero_stage = [&](Stage& st) {
    for (auto& b : st.blocks) {
      zero_ln(b.ln1);
      zero_lin(b.qkv);
      zero_lin(b.proj);
      zero_ln(b.ln2);
      zero_lin(b.fc1);
      zero_lin(b.fc2);
    }
    zero_ln(st.final_ln);
  };
  zero_vec(z.cls);
  zero_stage(z.state_stage);
  zero_stage(z.cond_stage);
  zero_lin(z.head1);
  zero_lin(z.head2);
  z.log_tau = 0.0;
  return z;
}

// Named flat views over every trainable scalar, visited in a stable order.
struct ParamSpan {
  std::string name;
  double* data;
  std::size_t n;
};

inline std::vector<ParamSpan> param_spans(NetState& s) {
  std::vector<ParamSpan> out;
  const auto add_vec = [&](const std::string& name, Vec& v) {
    out.push_back({name, v.data(), v.size()});
  };
  const auto add_lin = [&](const std::string& name, LinearParam& p) {
    out.push_back({name + ".W", p.W.d.data(), p.W.size()});
    add_vec(name + ".b", p.b);
  };
  const auto add_ln = [&](const std::string& name, LayerNormParam& p) {
    add_vec(name + ".gamma", p.gamma);
    add_vec(name + ".beta", p.beta);
  };
  const auto add_stage = [&](const std::string& name, Stage& st) {
    for (std::size_t i = 0; i < st.blocks.size(); ++i) {
      const std::string bn = name + ".block" + std::to_string(i);
      Block& b = st.blocks[i];
      add_ln(bn + ".ln1", b.ln1);
      add_lin(bn + ".qkv", b.qkv);
      add_lin(bn + ".proj", b.proj);
      add_ln(bn + ".ln2", b.ln2);
      add_lin(bn + ".fc1", b.fc1);
      add_lin(bn + ".fc2", b.fc2);
    }
    if (!st.blocks.empty()) add_ln(name + ".final_ln", st.final_ln);
  };
  add_vec("cls", s.cls);
  add_stage("state", s.state_stage);
  add_stage("cond", s.cond_stage);
  add_lin("head1", s.head1);
  add_lin("head2", s.head2);
  out.push_back({"log_tau", &s.log_tau, 1});
  return out;
}

inline std::size_t count_params(const NetState& s) {
  std::size_t n = 0;
  auto& mutable_s = const_cast<NetState&>(s);
  for (const auto& span : param_spans(mutable_s)) n += span.n;
  return n;
}

// ---------------------------------------------------------------------------
// Sinusoidal positional embedding: position p, channel pair (2k, 2k+1) uses
// frequency 10000^(-2k/dim).

inline Mat sinusoidal_pe(std::size_t length, std::size_t dim) {
  if (dim % 2 != 0) throw ConfigError("positional embedding dim must be even");
  Mat pe(length, dim);
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t k = 0; 2 * k < dim; ++k) {
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
      const double angle = static_cast<double>(p) * freq;
      pe.at(p, 2 * k) = std::sin(angle);
      pe.at(p, 2 * k + 1) = std::cos(angle);
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------
// Forward/backward primitives

namespace detail {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

struct LnCache {
  Mat xhat;
  Vec rstd;
};

constexpr double kLnEps = 1e-5;

inline Mat layernorm_forward(const LayerNormParam& p, const Mat& x, LnCache& cache) {
  const std::size_t d = p.gamma.size();
  check_shape(x.cols == d, "layernorm: dim mismatch");
  Mat y(x.rows, x.cols);
  cache.xhat = Mat(x.rows, x.cols);
  cache.rstd.assign(x.rows, 0.0);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const double* xr = x.row(r);
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double t = xr[c] - mu;
      var += t * t;
    }
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    cache.rstd[r] = rstd;
    double* xh = cache.xhat.row(r);
    double* yr = y.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      xh[c] = (xr[c] - mu) * rstd;
      yr[c] = xh[c] * p.gamma[c] + p.beta[c];
    }
  }
  return y;
}

inline Mat layernorm_backward(const LayerNormParam& p, const LnCache& cache, const Mat& dy,
                              LayerNormParam& grad) {
  const std::size_t d = p.gamma.size();
  Mat dx(dy.rows, dy.cols);
  for (std::size_t r = 0; r < dy.rows; ++r) {
    const double* dyr = dy.row(r);
    const double* xh = cache.xhat.row(r);
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double dxhat = dyr[c] * p.gamma[c];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xh[c];
      grad.gamma[c] += dyr[c] * xh[c];
      grad.beta[c] += dyr[c];
    }
    const double inv_d = 1.0 / static_cast<double>(d);
    double* dxr = dx.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      const double dxhat = dyr[c] * p.gamma[c];
      dxr[c] = cache.rstd[r] * (dxhat - inv_d * sum_dxhat - xh[c] * inv_d * sum_dxhat_xhat);
    }
  }
  return dx;
}

inline Mat linear_forward(const LinearParam& p, const Mat& x) {
  Mat y = mat_mul(x, p.W);
  for (std::size_t r = 0; r < y.rows; ++r) {
    double* yr = y.row(r);
    for (std::size_t c = 0; c < y.cols; ++c) yr[c] += p.b[c];
  }
  return y;
}

inline Mat linear_backward(const LinearParam& p, const Mat& x, const Mat& dy, LinearParam& grad) {
  add_inplace(grad.W, mat_mul_at(x, dy));
  for (std::size_t r = 0; r < dy.rows; ++r) {
    const double* dyr = dy.row(r);
    for (std::size_t c = 0; c < dy.cols; ++c) grad.b[c] += dyr[c];
  }
  return mat_mul_bt(dy, p.W);
}

struct BlockCache {
  Mat x_in;
  LnCache ln1;
  Mat ln1_out;
  Mat qkv;
  std::vector<Mat> probs;  // one N x N softmax matrix per head
  Mat ctx;                 // concatenated attention output, pre-projection
  Mat x_mid;               // after the attention residual
  LnCache ln2;
  Mat ln2_out;
  Mat h;  // fc1 output, pre-gelu
  Mat g;  // post-gelu
};

inline Mat block_forward(const Block& blk, const NetConfig& cfg, const Mat& x, BlockCache& cache) {
  const std::size_t n = x.rows, d = cfg.working_dim;
  const std::size_t heads = cfg.heads, dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  cache.x_in = x;
  cache.ln1_out = layernorm_forward(blk.ln1, x, cache.ln1);
  cache.qkv = linear_forward(blk.qkv, cache.ln1_out);
  cache.probs.assign(heads, Mat());
  cache.ctx = Mat(n, d);
  for (std::size_t a = 0; a < heads; ++a) {
    const std::size_t qo = a * dh, ko = d + a * dh, vo = 2 * d + a * dh;
    Mat scores(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      const double* qi = cache.qkv.row(i) + qo;
      for (std::size_t j = 0; j < n; ++j) {
        const double* kj = cache.qkv.row(j) + ko;
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
        scores.at(i, j) = acc * scale;
      }
    }
    // row softmax
    for (std::size_t i = 0; i < n; ++i) {
      double* sr = scores.row(i);
      double mx = sr[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, sr[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        sr[j] = std::exp(sr[j] - mx);
        sum += sr[j];
      }
      for (std::size_t j = 0; j < n; ++j) sr[j] /= sum;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double* pi = scores.row(i);
      double* ci = cache.ctx.row(i) + a * dh;
      for (std::size_t j = 0; j < n; ++j) {
        const double pij = pi[j];
        const double* vj = cache.qkv.row(j) + vo;
        for (std::size_t c = 0; c < dh; ++c) ci[c] += pij * vj[c];
      }
    }
    cache.probs[a] = std::move(scores);
  }
  Mat attn_out = linear_forward(blk.proj, cache.ctx);
  cache.x_mid = x;
  add_inplace(cache.x_mid, attn_out);
  cache.ln2_out = layernorm_forward(blk.ln2, cache.x_mid, cache.ln2);
  cache.h = linear_forward(blk.fc1, cache.ln2_out);
  cache.g = Mat(cache.h.rows, cache.h.cols);
  for (std::size_t i = 0; i < cache.h.size(); ++i) cache.g.d[i] = gelu(cache.h.d[i]);
  Mat y = linear_forward(blk.fc2, cache.g);
  add_inplace(y, cache.x_mid);
  return y;
}

inline Mat block_backward(const Block& blk, const NetConfig& cfg, const BlockCache& cache,
                          const Mat& dy, Block& grad) {
  const std::size_t n = cache.x_in.rows, d = cfg.working_dim;
  const std::size_t heads = cfg.heads, dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // MLP branch: y = x_mid + fc2(gelu(fc1(ln2(x_mid))))
  Mat dg = linear_backward(blk.fc2, cache.g, dy, grad.fc2);
  Mat dh_mat(dg.rows, dg.cols);
  for (std::size_t i = 0; i < dg.size(); ++i) dh_mat.d[i] = dg.d[i] * gelu_grad(cache.h.d[i]);
  Mat dln2_out = linear_backward(blk.fc1, cache.ln2_out, dh_mat, grad.fc1);
  Mat dx_mid = layernorm_backward(blk.ln2, cache.ln2, dln2_out, grad.ln2);
  add_inplace(dx_mid, dy);  // residual

  // Attention branch: x_mid = x_in + proj(ctx)
  Mat dctx = linear_backward(blk.proj, cache.ctx, dx_mid, grad.proj);
  Mat dqkv(n, 3 * d);
  for (std::size_t a = 0; a < heads; ++a) {
    const std::size_t qo = a * dh, ko = d + a * dh, vo = 2 * d + a * dh;
    const Mat& p = cache.probs[a];
    // dV = P^T * dctx_head; dP = dctx_head * V^T
    Mat dp(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      const double* dci = dctx.row(i) + a * dh;
      const double* pi = p.row(i);
      for (std::size_t j = 0; j < n; ++j) {
        const double* vj = cache.qkv.row(j) + vo;
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) acc += dci[c] * vj[c];
        dp.at(i, j) = acc;
        double* dvj = dqkv.row(j) + vo;
        const double pij = pi[j];
        for (std::size_t c = 0; c < dh; ++c) dvj[c] += pij * dci[c];
      }
    }
    // softmax backward: ds = p .* (dp - rowsum(dp .* p))
    Mat ds(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      const double* pi = p.row(i);
      const double* dpi = dp.row(i);
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += dpi[j] * pi[j];
      double* dsi = ds.row(i);
      for (std::size_t j = 0; j < n; ++j) dsi[j] = pi[j] * (dpi[j] - acc);
    }
    // dQ = ds * K * scale; dK = ds^T * Q * scale
    for (std::size_t i = 0; i < n; ++i) {
      const double* dsi = ds.row(i);
      double* dqi = dqkv.row(i) + qo;
      const double* qi = cache.qkv.row(i) + qo;
      for (std::size_t j = 0; j < n; ++j) {
        const double w = dsi[j] * scale;
        if (w == 0.0) continue;
        const double* kj = cache.qkv.row(j) + ko;
        double* dkj = dqkv.row(j) + ko;
        for (std::size_t c = 0; c < dh; ++c) {
          dqi[c] += w * kj[c];
          dkj[c] += w * qi[c];
        }
      }
    }
  }
  Mat dln1_out = linear_backward(blk.qkv, cache.ln1_out, dqkv, grad.qkv);
  Mat dx = layernorm_backward(blk.ln1, cache.ln1, dln1_out, grad.ln1);
  add_inplace(dx, dx_mid);  // residual
  return dx;
}

struct StageCache {
  std::vector<BlockCache> blocks;
  LnCache final_ln;
  Mat pre_final;  // input to the final layernorm
  bool identity = false;
};

inline Mat stage_forward(const Stage& stage, const NetConfig& cfg, const Mat& input,
                         StageCache& cache) {
  if (stage.blocks.empty()) {
    cache.identity = true;
    return input;
  }
  cache.identity = false;
  cache.blocks.resize(stage.blocks.size());
  Mat x = input;
  for (std::size_t i = 0; i < stage.blocks.size(); ++i)
    x = block_forward(stage.blocks[i], cfg, x, cache.blocks[i]);
  cache.pre_final = x;
  return layernorm_forward(stage.final_ln, x, cache.final_ln);
}

inline Mat stage_backward(const Stage& stage, const NetConfig& cfg, const StageCache& cache,
                          const Mat& d_output, Stage& grad) {
  if (cache.identity) return d_output;
  Mat dx = layernorm_backward(stage.final_ln, cache.final_ln, d_output, grad.final_ln);
  for (std::size_t i = stage.blocks.size(); i-- > 0;)
    dx = block_backward(stage.blocks[i], cfg, cache.blocks[i], dx, grad.blocks[i]);
  return dx;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model-level forward passes

// Global and local state features from stage one.
struct StateFeatures {
  Vec cls_hat;
  Mat locals;  // L^2 x D
};

struct StateCache {
  detail::StageCache stage;
  bool identity = false;
};

struct CondCache {
  detail::StageCache stage;
  bool identity = false;
};

struct HeadCache {
  Vec e;
  Vec h;  // pre-gelu hidden
  Vec g;  // post-gelu hidden
};

namespace detail {

inline Mat assemble_state_input(const NetState& s, const NetConfig& cfg, const TokenGrid& tokens,
                                const Mat& pe) {
  const std::size_t n = cfg.tokens();
  Mat input(n + 1, cfg.working_dim);
  for (std::size_t c = 0; c < cfg.working_dim; ++c) input.at(0, c) = s.cls[c] + pe.at(0, c);
  for (std::size_t t = 0; t < n; ++t) {
    const double* tok = tokens.tokens.row(t);
    const double* per = pe.row(t + 1);
    double* row = input.row(t + 1);
    for (std::size_t c = 0; c < cfg.working_dim; ++c) row[c] = tok[c] + per[c];
  }
  return input;
}

}  // namespace detail

// Stage one over [cls, f_1..f_{L^2}] with sinusoidal PE. The PE can be
// overridden (the permutation-consistency tests permute tokens and embedding
// rows together); pass nullptr for the standard embedding.
inline StateFeatures state_forward_cached(const NetState& s, const NetConfig& cfg,
                                          const TokenGrid& tokens, StateCache& cache,
                                          const Mat* pe_override = nullptr) {
  check_shape(tokens.dim == cfg.working_dim,
              "state_forward: token dim " + std::to_string(tokens.dim) + " != working_dim " +
                  std::to_string(cfg.working_dim));
  check_shape(tokens.tokens.rows == cfg.tokens(),
              "state_forward: expected " + std::to_string(cfg.tokens()) + " tokens, got " +
                  std::to_string(tokens.tokens.rows));
  StateFeatures out;
  if (cfg.variant == Variant::NoStateTransformer) {
    cache.identity = true;
    out.cls_hat = s.cls;
    out.locals = tokens.tokens;
    return out;
  }
  cache.identity = false;
  Mat pe_local;
  const Mat* pe = pe_override;
  if (!pe) {
    pe_local = sinusoidal_pe(cfg.tokens() + 1, cfg.working_dim);
    pe = &pe_local;
  }
  const Mat input = detail::assemble_state_input(s, cfg, tokens, *pe);
  const Mat output = detail::stage_forward(s.state_stage, cfg, input, cache.stage);
  out.cls_hat.assign(output.row(0), output.row(0) + cfg.working_dim);
  out.locals = Mat(cfg.tokens(), cfg.working_dim);
  for (std::size_t t = 0; t < cfg.tokens(); ++t)
    std::memcpy(out.locals.row(t), output.row(t + 1), cfg.working_dim * sizeof(double));
  return out;
}

inline StateFeatures state_forward(const NetState& s, const NetConfig& cfg,
                                   const TokenGrid& tokens) {
  StateCache cache;
  return state_forward_cached(s, cfg, tokens, cache);
}

// Backward through stage one. d_cls_hat/d_locals may be empty when no
// gradient flows from that side. Token gradients are discarded (the backbone
// is frozen) but the cls parameter gradient is accumulated.
inline void state_backward(const NetState& s, const NetConfig& cfg, const StateCache& cache,
                           const Vec& d_cls_hat, const Mat& d_locals, NetState& grad) {
  if (cache.identity) {
    if (!d_cls_hat.empty())
      for (std::size_t c = 0; c < cfg.working_dim; ++c) grad.cls[c] += d_cls_hat[c];
    return;
  }
  Mat d_out(cfg.tokens() + 1, cfg.working_dim);
  if (!d_cls_hat.empty())
    std::memcpy(d_out.row(0), d_cls_hat.data(), cfg.working_dim * sizeof(double));
  if (d_locals.size() > 0)
    for (std::size_t t = 0; t < cfg.tokens(); ++t)
      std::memcpy(d_out.row(t + 1), d_locals.row(t), cfg.working_dim * sizeof(double));
  const Mat d_in = detail::stage_backward(s.state_stage, cfg, cache.stage, d_out, grad.state_stage);
  for (std::size_t c = 0; c < cfg.working_dim; ++c) grad.cls[c] += d_in.at(0, c);
}

// Stage two over [s, f_1..f_{L^2}]; the output at the semantic-token position
// is the condition feature E. Stage-one token order is reused without new PE.
inline Vec condition_forward_cached(const NetState& s, const NetConfig& cfg,
                                    const StateFeatures& features, const SemanticVector& semantic,
                                    CondCache& cache) {
  check_shape(semantic.values.size() == cfg.working_dim,
              "condition_forward: semantic dim " + std::to_string(semantic.values.size()) +
                  " != working_dim " + std::to_string(cfg.working_dim));
  if (cfg.variant == Variant::NoConditionTransformer) {
    cache.identity = true;
    return features.cls_hat;
  }
  cache.identity = false;
  check_shape(features.locals.rows == cfg.tokens() && features.locals.cols == cfg.working_dim,
              "condition_forward: locals shape mismatch");
  Mat input(cfg.tokens() + 1, cfg.working_dim);
  std::memcpy(input.row(0), semantic.values.data(), cfg.working_dim * sizeof(double));
  for (std::size_t t = 0; t < cfg.tokens(); ++t)
    std::memcpy(input.row(t + 1), features.locals.row(t), cfg.working_dim * sizeof(double));
  const Mat output = detail::stage_forward(s.cond_stage, cfg, input, cache.stage);
  return Vec(output.row(0), output.row(0) + cfg.working_dim);
}

inline Vec condition_forward(const NetState& s, const NetConfig& cfg, const StateFeatures& features,
                             const SemanticVector& semantic) {
  CondCache cache;
  return condition_forward_cached(s, cfg, features, semantic, cache);
}

// Backward through stage two: returns gradients w.r.t. the stage-one locals.
// For the no-condition-transformer variant, dE flows straight to cls_hat via
// the returned d_cls_hat.
struct CondBackwardResult {
  Mat d_locals;
  Vec d_cls_hat;
};

inline CondBackwardResult condition_backward(const NetState& s, const NetConfig& cfg,
                                             const CondCache& cache, const Vec& d_e,
                                             NetState& grad) {
  CondBackwardResult res;
  if (cache.identity) {
    res.d_cls_hat = d_e;
    return res;
  }
  Mat d_out(cfg.tokens() + 1, cfg.working_dim);
  std::memcpy(d_out.row(0), d_e.data(), cfg.working_dim * sizeof(double));
  const Mat d_in = detail::stage_backward(s.cond_stage, cfg, cache.stage, d_out, grad.cond_stage);
  res.d_locals = Mat(cfg.tokens(), cfg.working_dim);
  for (std::size_t t = 0; t < cfg.tokens(); ++t)
    std::memcpy(res.d_locals.row(t), d_in.row(t + 1), cfg.working_dim * sizeof(double));
  return res;
}

// Condition MLP: unnormalized scores ordered (precondition, effect,
// unsatisfied).
inline Vec classify_cached(const NetState& s, const Vec& e, HeadCache& cache) {
  check_shape(e.size() == s.head1.W.rows, "classify: condition feature dim mismatch");
  cache.e = e;
  cache.h.assign(s.head1.b.size(), 0.0);
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double ei = e[i];
    if (ei == 0.0) continue;
    const double* wrow = s.head1.W.row(i);
    for (std::size_t j = 0; j < cache.h.size(); ++j) cache.h[j] += ei * wrow[j];
  }
  for (std::size_t j = 0; j < cache.h.size(); ++j) cache.h[j] += s.head1.b[j];
  cache.g.resize(cache.h.size());
  for (std::size_t j = 0; j < cache.h.size(); ++j) cache.g[j] = detail::gelu(cache.h[j]);
  Vec logits(3, 0.0);
  for (std::size_t j = 0; j < cache.g.size(); ++j) {
    const double gj = cache.g[j];
    const double* wrow = s.head2.W.row(j);
    for (std::size_t k = 0; k < 3; ++k) logits[k] += gj * wrow[k];
  }
  for (std::size_t k = 0; k < 3; ++k) logits[k] += s.head2.b[k];
  return logits;
}

inline Vec classify(const NetState& s, const Vec& e) {
  HeadCache cache;
  return classify_cached(s, e, cache);
}

inline Vec classify_backward(const NetState& s, const HeadCache& cache, const Vec& d_logits,
                             NetState& grad) {
  Vec dg(cache.g.size(), 0.0);
  for (std::size_t j = 0; j < cache.g.size(); ++j) {
    double* wgrad = grad.head2.W.row(j);
    const double* wrow = s.head2.W.row(j);
    for (std::size_t k = 0; k < 3; ++k) {
      wgrad[k] += cache.g[j] * d_logits[k];
      dg[j] += wrow[k] * d_logits[k];
    }
  }
  for (std::size_t k = 0; k < 3; ++k) grad.head2.b[k] += d_logits[k];
  Vec dh(cache.h.size());
  for (std::size_t j = 0; j < dh.size(); ++j) dh[j] = dg[j] * detail::gelu_grad(cache.h[j]);
  Vec de(cache.e.size(), 0.0);
  for (std::size_t i = 0; i < cache.e.size(); ++i) {
    double* wgrad = grad.head1.W.row(i);
    const double* wrow = s.head1.W.row(i);
    const double ei = cache.e[i];
    for (std::size_t j = 0; j < dh.size(); ++j) {
      wgrad[j] += ei * dh[j];
      de[i] += wrow[j] * dh[j];
    }
  }
  for (std::size_t j = 0; j < dh.size(); ++j) grad.head1.b[j] += dh[j];
  return de;
}

// End-to-end path: logits plus the global state feature (the latter feeds the
// consistency objective).
struct ForwardResult {
  Vec logits;
  Vec cls_hat;
};

inline ForwardResult forward(const NetState& s, const NetConfig& cfg, const TokenGrid& tokens,
                             const SemanticVector& semantic) {
  const StateFeatures feats = state_forward(s, cfg, tokens);
  const Vec e = condition_forward(s, cfg, feats, semantic);
  ForwardResult out;
  out.logits = classify(s, e);
  out.cls_hat = feats.cls_hat;
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned container with config, weights and rng state.

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[8] = {'C', 'M', 'C', 'K', 'P', 'T', '0', '\0'};

inline void save_checkpoint(const std::filesystem::path& path, const NetConfig& cfg,
                            const NetState& state, const std::array<std::uint64_t, 6>& rng_state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path.string());
  auto& mutable_state = const_cast<NetState&>(state);
  const auto spans = param_spans(mutable_state);
  json header;
  header["config"] = config_to_json(cfg);
  header["rng"] = rng_state;
  json params = json::array();
  for (const auto& s : spans) params.push_back({{"name", s.name}, {"n", s.n}});
  header["params"] = params;
  const std::string header_str = header.dump();
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t header_len = header_str.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& s : spans)
    out.write(reinterpret_cast<const char*>(s.data),
              static_cast<std::streamsize>(s.n * sizeof(double)));
  if (!out) throw IoError("short write on checkpoint: " + path.string());
}

struct Checkpoint {
  NetConfig cfg;
  NetState state;
  std::array<std::uint64_t, 6> rng_state{};
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw ParseError("not a checkpoint file: " + path.string());
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                     std::to_string(kCheckpointVersion) + "): " + path.string());
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw ParseError("truncated checkpoint header: " + path.string());
  json header;
  try {
    header = json::parse(header_str);
  } catch (const json::exception& e) {
    throw ParseError("corrupt checkpoint header: " + std::string(e.what()));
  }
  Checkpoint ckpt;
  ckpt.cfg = config_from_json(header.at("config"));
  const auto rng = header.at("rng").get<std::vector<std::uint64_t>>();
  if (rng.size() != 6) throw ParseError("corrupt rng state in checkpoint");
  std::copy(rng.begin(), rng.end(), ckpt.rng_state.begin());
  ckpt.state = init_net(ckpt.cfg, 0);
  const auto spans = param_spans(ckpt.state);
  const json& params = header.at("params");
  if (params.size() != spans.size())
    throw ParseError("checkpoint parameter census mismatch: " + path.string());
  for (std::size_t i = 0; i < spans.size(); ++i) {
    if (params[i].at("name").get<std::string>() != spans[i].name ||
        params[i].at("n").get<std::size_t>() != spans[i].n)
      throw ParseError("checkpoint parameter layout mismatch at '" + spans[i].name + "'");
    in.read(reinterpret_cast<char*>(spans[i].data),
            static_cast<std::streamsize>(spans[i].n * sizeof(double)));
  }
  if (!in) throw ParseError("truncated checkpoint weights: " + path.string());
  return ckpt;
}

}  // namespace condmon::net
