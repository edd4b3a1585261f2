#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "condmon/errors.hpp"
#include "condmon/tensor.hpp"

namespace condmon::objectives {

// One training batch as seen by the losses. Row i holds the classifier
// logits and one-hot label for the classified frame, the global state
// features of the effect and pre frames, the paraphrased action embedding,
// and the success indicator that gates the consistency term.
struct BatchBundle {
  Mat logits;                 // B x 3
  Mat labels;                 // B x 3, one-hot
  Mat cls_plus;               // B x D
  Mat cls_minus;              // B x D
  Mat paraphrase_semantics;   // B x D
  std::vector<std::uint8_t> indicators;  // B

  std::size_t size() const { return logits.rows; }
};

inline void validate_bundle(const BatchBundle& b) {
  const std::size_t n = b.logits.rows;
  if (b.labels.rows != n || b.cls_plus.rows != n || b.cls_minus.rows != n ||
      b.paraphrase_semantics.rows != n || b.indicators.size() != n)
    throw InputError("batch bundle: inconsistent row counts");
  if (b.logits.cols != 3 || b.labels.cols != 3)
    throw InputError("batch bundle: logits/labels must have 3 columns");
}

struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;
  bool frozen = false;
};

// ---------------------------------------------------------------------------
// Condition loss: batch mean of -log softmax at the true class.

inline void check_one_hot(const Mat& labels) {
  for (std::size_t r = 0; r < labels.rows; ++r) {
    int ones = 0;
    for (std::size_t c = 0; c < labels.cols; ++c) {
      const double v = labels.at(r, c);
      if (v == 1.0)
        ++ones;
      else if (v != 0.0)
        throw InputError("labels row " + std::to_string(r) + " is not one-hot");
    }
    if (ones != 1) throw InputError("labels row " + std::to_string(r) + " is not one-hot");
  }
}

inline double condition_loss(const Mat& logits, const Mat& labels) {
  check_shape(logits.same_shape(labels), "condition_loss: shape mismatch");
  check_one_hot(labels);
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const double lse = logsumexp(logits.row(r), logits.cols);
    for (std::size_t c = 0; c < logits.cols; ++c)
      if (labels.at(r, c) == 1.0) total += lse - logits.at(r, c);
  }
  return total / static_cast<double>(logits.rows);
}

// Loss plus gradient w.r.t. the logits.
inline double condition_loss_grad(const Mat& logits, const Mat& labels, Mat& d_logits) {
  check_shape(logits.same_shape(labels), "condition_loss: shape mismatch");
  check_one_hot(labels);
  d_logits = Mat(logits.rows, logits.cols);
  const double inv_b = 1.0 / static_cast<double>(logits.rows);
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const double lse = logsumexp(logits.row(r), logits.cols);
    for (std::size_t c = 0; c < logits.cols; ++c) {
      const double p = std::exp(logits.at(r, c) - lse);
      d_logits.at(r, c) = (p - labels.at(r, c)) * inv_b;
      if (labels.at(r, c) == 1.0) total += lse - logits.at(r, c);
    }
  }
  return total * inv_b;
}

// ---------------------------------------------------------------------------
// Action feature: difference between the effect-state and pre-state global
// features.

inline Vec action_feature(const Vec& cls_plus, const Vec& cls_minus) {
  check_shape(cls_plus.size() == cls_minus.size(), "action_feature: dim mismatch");
  Vec e(cls_plus.size());
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = cls_plus[i] - cls_minus[i];
  return e;
}

inline Mat action_feature_rows(const Mat& cls_plus, const Mat& cls_minus) {
  check_shape(cls_plus.same_shape(cls_minus), "action_feature: shape mismatch");
  Mat e(cls_plus.rows, cls_plus.cols);
  for (std::size_t i = 0; i < e.size(); ++i) e.d[i] = cls_plus.d[i] - cls_minus.d[i];
  return e;
}

// ---------------------------------------------------------------------------
// Cosine similarity matrix S_ij = <e_i, s_j> / (|e_i| |s_j|). Norms carry an
// epsilon guard; strict mode raises on exactly-zero rows instead.

constexpr double kCosineEps = 1e-8;

inline Mat cosine_sim_matrix(const Mat& ea, const Mat& sp, bool strict = false) {
  check_shape(ea.cols == sp.cols, "cosine_sim_matrix: feature dims differ");
  check_shape(ea.rows == sp.rows, "cosine_sim_matrix: row counts differ");
  const std::size_t b = ea.rows;
  Vec ne(b), ns(b);
  for (std::size_t i = 0; i < b; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < ea.cols; ++c) acc += ea.at(i, c) * ea.at(i, c);
    const double n = std::sqrt(acc);
    if (strict && n == 0.0)
      throw NumericError("cosine_sim_matrix: zero-norm action feature at row " +
                         std::to_string(i));
    ne[i] = std::max(n, kCosineEps);
  }
  for (std::size_t j = 0; j < b; ++j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < sp.cols; ++c) acc += sp.at(j, c) * sp.at(j, c);
    const double n = std::sqrt(acc);
    if (strict && n == 0.0)
      throw NumericError("cosine_sim_matrix: zero-norm semantic feature at row " +
                         std::to_string(j));
    ns[j] = std::max(n, kCosineEps);
  }
  Mat s(b, b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < ea.cols; ++c) acc += ea.at(i, c) * sp.at(j, c);
      s.at(i, j) = acc / (ne[i] * ns[j]);
    }
  return s;
}

// Gradient of a scalar w.r.t. ea given dS (sp is a frozen encoder output).
inline Mat cosine_sim_backward(const Mat& ea, const Mat& sp, const Mat& d_s) {
  const std::size_t b = ea.rows, d = ea.cols;
  Mat d_ea(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) acc += ea.at(i, c) * ea.at(i, c);
    const double raw_ne = std::sqrt(acc);
    const double ne = std::max(raw_ne, kCosineEps);
    const bool ne_active = raw_ne > kCosineEps;  // norm depends on ea only here
    for (std::size_t j = 0; j < b; ++j) {
      const double dsij = d_s.at(i, j);
      if (dsij == 0.0) continue;
      double nacc = 0.0;
      for (std::size_t c = 0; c < d; ++c) nacc += sp.at(j, c) * sp.at(j, c);
      const double ns = std::max(std::sqrt(nacc), kCosineEps);
      double dotv = 0.0;
      for (std::size_t c = 0; c < d; ++c) dotv += ea.at(i, c) * sp.at(j, c);
      for (std::size_t c = 0; c < d; ++c) {
        double g = sp.at(j, c) / (ne * ns);
        if (ne_active) g -= dotv * ea.at(i, c) / (ne * ne * ne * ns);
        d_ea.at(i, c) += dsij * g;
      }
    }
  }
  return d_ea;
}

// ---------------------------------------------------------------------------
// Consistency loss: symmetric InfoNCE over the similarity matrix, with failed
// demonstrations excluded from both the positive terms and the negative
// pools. The mean runs over the unmasked rows so appending a masked row
// leaves the value unchanged; an all-masked batch is defined as 0.

inline double consistency_loss(const Mat& s, const std::vector<std::uint8_t>& indicators,
                               double tau) {
  if (tau <= 0.0) throw InputError("consistency_loss: tau must be positive");
  check_shape(s.rows == s.cols, "consistency_loss: S must be square");
  check_shape(s.rows == indicators.size(), "consistency_loss: indicator count mismatch");
  const std::size_t b = s.rows;
  std::size_t m = 0;
  for (auto v : indicators) m += v ? 1 : 0;
  if (m == 0) return 0.0;
  const double z = 1.0 / tau;
  double total = 0.0;
  Vec row_buf(b);
  std::vector<bool> mask(b);
  for (std::size_t i = 0; i < b; ++i) mask[i] = indicators[i] != 0;
  // image-to-text: softmax over each unmasked row
  for (std::size_t i = 0; i < b; ++i) {
    if (!mask[i]) continue;
    for (std::size_t k = 0; k < b; ++k) row_buf[k] = s.at(i, k) * z;
    double mx = -HUGE_VAL;
    for (std::size_t k = 0; k < b; ++k)
      if (mask[k]) mx = std::max(mx, row_buf[k]);
    double acc = 0.0;
    for (std::size_t k = 0; k < b; ++k)
      if (mask[k]) acc += std::exp(row_buf[k] - mx);
    total -= row_buf[i] - (mx + std::log(acc));
  }
  // text-to-image: softmax over each unmasked column
  for (std::size_t j = 0; j < b; ++j) {
    if (!mask[j]) continue;
    for (std::size_t k = 0; k < b; ++k) row_buf[k] = s.at(k, j) * z;
    double mx = -HUGE_VAL;
    for (std::size_t k = 0; k < b; ++k)
      if (mask[k]) mx = std::max(mx, row_buf[k]);
    double acc = 0.0;
    for (std::size_t k = 0; k < b; ++k)
      if (mask[k]) acc += std::exp(row_buf[k] - mx);
    total -= row_buf[j] - (mx + std::log(acc));
  }
  return total / static_cast<double>(m);
}

// Loss plus gradients w.r.t. S and tau.
inline double consistency_loss_grad(const Mat& s, const std::vector<std::uint8_t>& indicators,
                                    double tau, Mat& d_s, double& d_tau) {
  if (tau <= 0.0) throw InputError("consistency_loss: tau must be positive");
  const std::size_t b = s.rows;
  d_s = Mat(b, b);
  d_tau = 0.0;
  std::size_t m = 0;
  for (auto v : indicators) m += v ? 1 : 0;
  if (m == 0) return 0.0;
  const double z = 1.0 / tau;
  const double inv_m = 1.0 / static_cast<double>(m);
  std::vector<bool> mask(b);
  for (std::size_t i = 0; i < b; ++i) mask[i] = indicators[i] != 0;
  Mat d_a(b, b);  // gradient w.r.t. A = S / tau
  double total = 0.0;
  Vec buf(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (!mask[i]) continue;
    for (std::size_t k = 0; k < b; ++k) buf[k] = s.at(i, k) * z;
    double mx = -HUGE_VAL;
    for (std::size_t k = 0; k < b; ++k)
      if (mask[k]) mx = std::max(mx, buf[k]);
    double acc = 0.0;
    for (std::size_t k = 0; k < b; ++k)
      if (mask[k]) acc += std::exp(buf[k] - mx);
    const double lse = mx + std::log(acc);
    total -= buf[i] - lse;
    for (std::size_t k = 0; k < b; ++k) {
      if (!mask[k]) continue;
      const double p = std::exp(buf[k] - lse);
      d_a.at(i, k) += inv_m * p;
    }
    d_a.at(i, i) -= inv_m;
  }
  for (std::size_t j = 0; j < b; ++j) {
    if (!mask[j]) continue;
    for (std::size_t k = 0; k < b; ++k) buf[k] = s.at(k, j) * z;
    double mx = -HUGE_VAL;
    for (std::size_t k = 0; k < b; ++k)
      if (mask[k]) mx = std::max(mx, buf[k]);
    double acc = 0.0;
    for (std::size_t k = 0; k < b; ++k)
      if (mask[k]) acc += std::exp(buf[k] - mx);
    const double lse = mx + std::log(acc);
    total -= buf[j] - lse;
    for (std::size_t k = 0; k < b; ++k) {
      if (!mask[k]) continue;
      const double p = std::exp(buf[k] - lse);
      d_a.at(k, j) += inv_m * p;
    }
    d_a.at(j, j) -= inv_m;
  }
  // A = S / tau: dS = dA / tau, dtau = sum(dA * (-S / tau^2))
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      const double da = d_a.at(i, j);
      if (da == 0.0) continue;
      d_s.at(i, j) = da * z;
      d_tau -= da * s.at(i, j) * z * z;
    }
  return total * inv_m;
}

// ---------------------------------------------------------------------------
// Loss weights: normalized to 1 on the first batch and frozen afterwards.

constexpr double kCalibrationFloor = 1e-8;

inline LossWeights& calibrate_weights(LossWeights& w, double first_condition_loss,
                                      double first_consistency_loss) {
  if (w.frozen) throw UsageError("loss weights already calibrated for this run");
  w.alpha = first_condition_loss < kCalibrationFloor ? 1.0 : 1.0 / first_condition_loss;
  w.beta = first_consistency_loss < kCalibrationFloor ? 1.0 : 1.0 / first_consistency_loss;
  w.frozen = true;
  return w;
}

inline double total_loss(double condition, double consistency, const LossWeights& w) {
  return w.alpha * condition + w.beta * consistency;
}

// ---------------------------------------------------------------------------
// Bundle-level convenience used by the trainer and the gradient checks.

struct ConsistencyGrads {
  double loss = 0.0;
  Mat d_cls_plus;
  Mat d_cls_minus;
  double d_tau = 0.0;
};

inline double consistency_from_bundle(const BatchBundle& bundle, double tau) {
  const Mat ea = action_feature_rows(bundle.cls_plus, bundle.cls_minus);
  const Mat s = cosine_sim_matrix(ea, bundle.paraphrase_semantics);
  return consistency_loss(s, bundle.indicators, tau);
}

inline ConsistencyGrads consistency_grads_from_bundle(const BatchBundle& bundle, double tau) {
  ConsistencyGrads out;
  const Mat ea = action_feature_rows(bundle.cls_plus, bundle.cls_minus);
  const Mat s = cosine_sim_matrix(ea, bundle.paraphrase_semantics);
  Mat d_s;
  out.loss = consistency_loss_grad(s, bundle.indicators, tau, d_s, out.d_tau);
  const Mat d_ea = cosine_sim_backward(ea, bundle.paraphrase_semantics, d_s);
  out.d_cls_plus = d_ea;
  out.d_cls_minus = d_ea;
  scale_inplace(out.d_cls_minus, -1.0);
  return out;
}

}  // namespace condmon::objectives
