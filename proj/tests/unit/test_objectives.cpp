#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "condmon/objectives.hpp"
#include "condmon/rng.hpp"

using namespace condmon;
using namespace condmon::objectives;

namespace {

Mat one_hot_rows(const std::vector<int>& classes) {
  Mat labels(classes.size(), 3);
  for (std::size_t i = 0; i < classes.size(); ++i)
    labels.at(i, static_cast<std::size_t>(classes[i])) = 1.0;
  return labels;
}

BatchBundle random_bundle(std::size_t b, std::size_t d, Rng& rng, double indicator_p = 0.7) {
  BatchBundle bundle;
  bundle.logits = Mat::randn(b, 3, 1.0, rng);
  bundle.labels = Mat(b, 3);
  for (std::size_t i = 0; i < b; ++i)
    bundle.labels.at(i, static_cast<std::size_t>(rng.uniform_int(3))) = 1.0;
  bundle.cls_plus = Mat::randn(b, d, 1.0, rng);
  bundle.cls_minus = Mat::randn(b, d, 1.0, rng);
  bundle.paraphrase_semantics = Mat::randn(b, d, 1.0, rng);
  bundle.indicators.assign(b, 0);
  for (std::size_t i = 0; i < b; ++i) bundle.indicators[i] = rng.bernoulli(indicator_p) ? 1 : 0;
  return bundle;
}

}  // namespace

TEST_CASE("condition loss hand values") {
  SUBCASE("uniform logits give ln 3") {
    Mat logits(1, 3, 0.0);
    CHECK(condition_loss(logits, one_hot_rows({1})) ==
          doctest::Approx(std::log(3.0)).epsilon(1e-12));
  }
  SUBCASE("confident correct logits give log(1 + 2 e^-20)") {
    Mat logits(1, 3);
    logits.at(0, 0) = 10.0;
    logits.at(0, 1) = -10.0;
    logits.at(0, 2) = -10.0;
    const double expected = std::log1p(2.0 * std::exp(-20.0));  // ~4.12e-9
    CHECK(condition_loss(logits, one_hot_rows({0})) == doctest::Approx(expected).epsilon(1e-9));
    CHECK(condition_loss(logits, one_hot_rows({0})) < 5e-9);
  }
  SUBCASE("the batch value is the mean of per-sample losses") {
    Mat l1(1, 3), l2(1, 3);
    Rng rng(3);
    for (auto* m : {&l1, &l2})
      for (auto& x : m->d) x = rng.normal();
    const double a = condition_loss(l1, one_hot_rows({0}));
    const double b = condition_loss(l2, one_hot_rows({2}));
    Mat both(2, 3);
    for (int c = 0; c < 3; ++c) {
      both.at(0, static_cast<std::size_t>(c)) = l1.at(0, static_cast<std::size_t>(c));
      both.at(1, static_cast<std::size_t>(c)) = l2.at(0, static_cast<std::size_t>(c));
    }
    CHECK(condition_loss(both, one_hot_rows({0, 2})) ==
          doctest::Approx((a + b) / 2.0).epsilon(1e-12));
  }
  SUBCASE("non-one-hot labels are rejected") {
    Mat logits(1, 3, 0.0);
    Mat labels(1, 3, 0.0);
    CHECK_THROWS_AS(condition_loss(logits, labels), InputError);
    labels.at(0, 0) = 0.5;
    labels.at(0, 1) = 0.5;
    CHECK_THROWS_AS(condition_loss(logits, labels), InputError);
  }
  SUBCASE("always non-negative") {
    Rng rng(4);
    for (int t = 0; t < 200; ++t) {
      Mat logits = Mat::randn(4, 3, 3.0, rng);
      Mat labels(4, 3);
      for (std::size_t i = 0; i < 4; ++i)
        labels.at(i, static_cast<std::size_t>(rng.uniform_int(3))) = 1.0;
      CHECK(condition_loss(logits, labels) >= 0.0);
    }
  }
}

TEST_CASE("action feature is the componentwise difference") {
  CHECK(action_feature({1, 2, 3}, {1, 2, 3}) == Vec{0, 0, 0});
  CHECK(action_feature({1, 2, 3}, {0, 2, 5}) == Vec{1, 0, -2});
  // Shift invariance.
  Rng rng(5);
  Vec a(8), b(8), c(8);
  for (auto* v : {&a, &b, &c})
    for (auto& x : *v) x = rng.normal();
  Vec as = a, bs = b;
  for (std::size_t i = 0; i < 8; ++i) {
    as[i] += c[i];
    bs[i] += c[i];
  }
  const Vec base = action_feature(a, b);
  const Vec shifted = action_feature(as, bs);
  for (std::size_t i = 0; i < 8; ++i)
    CHECK(shifted[i] == doctest::Approx(base[i]).epsilon(1e-12));
  CHECK_THROWS_AS(action_feature({1, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("cosine similarity matrix") {
  SUBCASE("hand values") {
    Mat ea(2, 2), sp(2, 2);
    ea.at(0, 0) = 1.0;
    ea.at(0, 1) = 1.0;  // (1,1)
    ea.at(1, 0) = 1.0;  // (1,0)
    sp.at(0, 0) = 1.0;  // (1,0)
    sp.at(1, 1) = 1.0;  // (0,1)
    const Mat s = cosine_sim_matrix(ea, sp);
    CHECK(s.at(0, 0) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(s.at(1, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.at(1, 1) == doctest::Approx(0.0).epsilon(1e-12));
    for (double x : s.d) {
      CHECK(x <= 1.0 + 1e-12);
      CHECK(x >= -1.0 - 1e-12);
    }
  }
  SUBCASE("strict mode raises on exactly-zero rows, naming the row") {
    Mat ea(2, 3), sp(2, 3, 1.0);
    ea.at(0, 0) = 1.0;  // row 1 stays zero
    try {
      cosine_sim_matrix(ea, sp, true);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("row 1") != std::string::npos);
    }
    CHECK_NOTHROW(cosine_sim_matrix(ea, sp, false));
  }
}

TEST_CASE("consistency loss hand values") {
  SUBCASE("single-element batch is exactly zero") {
    Mat s(1, 1);
    s.at(0, 0) = 0.37;
    CHECK(consistency_loss(s, {1}, 0.42) == 0.0);
  }
  SUBCASE("all indicators false gives zero") {
    Mat s = Mat::identity(3);
    CHECK(consistency_loss(s, {0, 0, 0}, 1.0) == 0.0);
  }
  SUBCASE("B=2 identity similarity at tau 1") {
    const Mat s = Mat::identity(2);
    const double expected = 2.0 * std::log1p(std::exp(-1.0));  // ~0.62652
    CHECK(consistency_loss(s, {1, 1}, 1.0) == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("tau must be positive") {
    CHECK_THROWS_AS(consistency_loss(Mat::identity(2), {1, 1}, 0.0), InputError);
  }
}

TEST_CASE("consistency loss invariances") {
  Rng rng(8);
  SUBCASE("simultaneous row/column permutation with indicators") {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t b = 5;
      Mat s = Mat::randn(b, b, 1.0, rng);
      std::vector<std::uint8_t> ind(b);
      for (auto& v : ind) v = rng.bernoulli(0.7) ? 1 : 0;
      std::vector<std::size_t> perm(b);
      for (std::size_t i = 0; i < b; ++i) perm[i] = i;
      rng.shuffle(perm);
      Mat ps(b, b);
      std::vector<std::uint8_t> pind(b);
      for (std::size_t i = 0; i < b; ++i) {
        pind[i] = ind[perm[i]];
        for (std::size_t j = 0; j < b; ++j) ps.at(i, j) = s.at(perm[i], perm[j]);
      }
      CHECK(consistency_loss(ps, pind, 0.8) ==
            doctest::Approx(consistency_loss(s, ind, 0.8)).epsilon(1e-12));
    }
  }
  SUBCASE("transposing S leaves the symmetric loss unchanged") {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t b = 4;
      Mat s = Mat::randn(b, b, 1.0, rng);
      std::vector<std::uint8_t> ind(b);
      for (auto& v : ind) v = rng.bernoulli(0.6) ? 1 : 0;
      Mat st(b, b);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < b; ++j) st.at(i, j) = s.at(j, i);
      CHECK(consistency_loss(st, ind, 1.3) ==
            doctest::Approx(consistency_loss(s, ind, 1.3)).epsilon(1e-12));
    }
  }
  SUBCASE("positive row scaling of the action features cancels in the cosine") {
    for (int trial = 0; trial < 20; ++trial) {
      BatchBundle bundle = random_bundle(4, 6, rng, 1.0);
      const double base = consistency_from_bundle(bundle, 0.9);
      for (std::size_t i = 0; i < 4; ++i) {
        const double scale = 0.1 + 5.0 * rng.uniform();
        for (std::size_t c = 0; c < 6; ++c) {
          // scale e_a rows by scaling both features about their midpoint
          const double plus = bundle.cls_plus.at(i, c), minus = bundle.cls_minus.at(i, c);
          const double mid = 0.5 * (plus + minus);
          bundle.cls_plus.at(i, c) = mid + scale * (plus - mid);
          bundle.cls_minus.at(i, c) = mid + scale * (minus - mid);
        }
      }
      CHECK(consistency_from_bundle(bundle, 0.9) == doctest::Approx(base).epsilon(1e-9));
    }
  }
  SUBCASE("appending a masked row never changes the loss") {
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t b = 2 + rng.uniform_int(5);
      BatchBundle bundle = random_bundle(b, 5, rng);
      const double base = consistency_from_bundle(bundle, 0.7);
      BatchBundle extended = random_bundle(b + 1, 5, rng);
      for (std::size_t i = 0; i < b; ++i) {
        extended.indicators[i] = bundle.indicators[i];
        for (std::size_t c = 0; c < 5; ++c) {
          extended.cls_plus.at(i, c) = bundle.cls_plus.at(i, c);
          extended.cls_minus.at(i, c) = bundle.cls_minus.at(i, c);
          extended.paraphrase_semantics.at(i, c) = bundle.paraphrase_semantics.at(i, c);
        }
      }
      extended.indicators[b] = 0;
      CHECK(std::abs(consistency_from_bundle(extended, 0.7) - base) < 1e-12);
    }
  }
}

TEST_CASE("consistency gradients match finite differences") {
  Rng rng(9);
  const std::size_t b = 4;
  Mat s = Mat::randn(b, b, 0.8, rng);
  std::vector<std::uint8_t> ind = {1, 1, 0, 1};
  const double tau = 0.6;
  Mat d_s;
  double d_tau = 0.0;
  const double base = consistency_loss_grad(s, ind, tau, d_s, d_tau);
  CHECK(base == doctest::Approx(consistency_loss(s, ind, tau)).epsilon(1e-12));
  const double h = 1e-6;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      const double orig = s.at(i, j);
      s.at(i, j) = orig + h;
      const double lp = consistency_loss(s, ind, tau);
      s.at(i, j) = orig - h;
      const double lm = consistency_loss(s, ind, tau);
      s.at(i, j) = orig;
      CHECK(d_s.at(i, j) == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-5));
    }
  const double tp = consistency_loss(s, ind, tau + h);
  const double tm = consistency_loss(s, ind, tau - h);
  CHECK(d_tau == doctest::Approx((tp - tm) / (2 * h)).epsilon(1e-5));
}

TEST_CASE("weight calibration and the total loss") {
  SUBCASE("reciprocal calibration") {
    LossWeights w;
    calibrate_weights(w, 2.0, 0.5);
    CHECK(w.alpha == doctest::Approx(0.5));
    CHECK(w.beta == doctest::Approx(2.0));
    CHECK(w.frozen);
    // Each term normalizes to 1 on the first batch.
    CHECK(w.alpha * 2.0 == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(w.beta * 0.5 == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(total_loss(2.0, 0.5, w) == doctest::Approx(2.0).epsilon(1e-6));
  }
  SUBCASE("degenerate first losses fall back to unit weights") {
    LossWeights w;
    calibrate_weights(w, 1.5, 0.0);
    CHECK(w.beta == doctest::Approx(1.0));
  }
  SUBCASE("re-calibration after freezing is a usage error") {
    LossWeights w;
    calibrate_weights(w, 1.0, 1.0);
    CHECK_THROWS_AS(calibrate_weights(w, 2.0, 2.0), UsageError);
  }
  SUBCASE("total loss arithmetic") {
    LossWeights w;
    w.alpha = 1.0;
    w.beta = 0.0;
    w.frozen = true;
    CHECK(total_loss(1.37, 0.99, w) == doctest::Approx(1.37));
    w.alpha = 0.5;
    w.beta = 2.0;
    CHECK(total_loss(2.0, 0.5, w) == doctest::Approx(2.0));
    CHECK(total_loss(3.0, 0.0, w) == doctest::Approx(1.5));
  }
}

TEST_CASE("bundle validation catches inconsistent row counts") {
  Rng rng(10);
  BatchBundle bundle = random_bundle(3, 4, rng);
  CHECK_NOTHROW(validate_bundle(bundle));
  bundle.indicators.pop_back();
  CHECK_THROWS_AS(validate_bundle(bundle), InputError);
}
