#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "condmon/net.hpp"

#include "common/gradcheck.hpp"
#include "common/testutil.hpp"

using namespace condmon;
using namespace condmon::net;
using condmon::testing::TempDir;

namespace {

encoders::TokenGrid random_grid(const NetConfig& cfg, Rng& rng) {
  encoders::TokenGrid grid;
  grid.grid_side = cfg.grid_side;
  grid.dim = cfg.working_dim;
  grid.tokens = Mat::randn(cfg.tokens(), cfg.working_dim, 1.0, rng);
  return grid;
}

encoders::SemanticVector random_semantic(const NetConfig& cfg, Rng& rng) {
  encoders::SemanticVector s;
  s.values.resize(cfg.working_dim);
  for (auto& x : s.values) x = rng.normal();
  return s;
}

}  // namespace

TEST_CASE("sinusoidal positional embedding") {
  const Mat pe = sinusoidal_pe(5, 8);
  SUBCASE("row zero alternates 0, 1") {
    for (std::size_t k = 0; 2 * k < 8; ++k) {
      CHECK(pe.at(0, 2 * k) == doctest::Approx(0.0));
      CHECK(pe.at(0, 2 * k + 1) == doctest::Approx(1.0));
    }
  }
  SUBCASE("position 1, channel 0 is sin(1)") {
    CHECK(pe.at(1, 0) == doctest::Approx(0.8414709848078965).epsilon(1e-12));
    CHECK(pe.at(1, 1) == doctest::Approx(std::cos(1.0)).epsilon(1e-12));
  }
  SUBCASE("cls-prepended sequence shape") {
    const NetConfig cfg = testing::tiny_net_config();
    const Mat full = sinusoidal_pe(cfg.tokens() + 1, cfg.working_dim);
    CHECK(full.rows == cfg.tokens() + 1);
    CHECK(full.cols == cfg.working_dim);
  }
  SUBCASE("odd dimension is rejected") { CHECK_THROWS_AS(sinusoidal_pe(4, 7), ConfigError); }
}

TEST_CASE("state_forward shapes at the full-scale configuration") {
  NetConfig cfg;
  cfg.working_dim = 384;
  cfg.grid_side = 16;
  cfg.state_depth = 1;  // depth is irrelevant to the shape contract
  cfg.condition_depth = 1;
  cfg.heads = 6;
  NetState state = init_net(cfg, 0);
  Rng rng(1);
  const auto grid = random_grid(cfg, rng);
  const StateFeatures f = state_forward(state, cfg, grid);
  CHECK(f.locals.rows == 256);
  CHECK(f.locals.cols == 384);
  CHECK(f.cls_hat.size() == 384);
}

TEST_CASE("identity stage variants") {
  NetConfig cfg = testing::tiny_net_config();
  Rng rng(2);
  const auto grid = random_grid(cfg, rng);
  const auto sem = random_semantic(cfg, rng);

  SUBCASE("no_state_transformer returns inputs unchanged with cls_hat = cls") {
    cfg.variant = Variant::NoStateTransformer;
    NetState state = init_net(cfg, 0);
    const StateFeatures f = state_forward(state, cfg, grid);
    CHECK(f.locals.d == grid.tokens.d);
    CHECK(f.cls_hat == state.cls);
    CHECK(cfg.effective_condition_depth() == 2 * cfg.condition_depth);
  }

  SUBCASE("no_condition_transformer returns cls_hat bit-for-bit") {
    cfg.variant = Variant::NoConditionTransformer;
    NetState state = init_net(cfg, 0);
    const StateFeatures f = state_forward(state, cfg, grid);
    const Vec e = condition_forward(state, cfg, f, sem);
    CHECK(e == f.cls_hat);
  }
}

TEST_CASE("classifier head") {
  const NetConfig cfg = testing::tiny_net_config();
  NetState state = init_net(cfg, 3);
  Rng rng(4);
  Vec e(cfg.working_dim);
  for (auto& x : e) x = rng.normal();
  const Vec logits = classify(state, e);
  REQUIRE(logits.size() == 3);

  // Softmax normalizes.
  const double lse = logsumexp(logits.data(), 3);
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - lse);
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));

  // A zero head is exactly uniform.
  NetState zero = state;
  std::fill(zero.head1.W.d.begin(), zero.head1.W.d.end(), 0.0);
  std::fill(zero.head1.b.begin(), zero.head1.b.end(), 0.0);
  std::fill(zero.head2.W.d.begin(), zero.head2.W.d.end(), 0.0);
  std::fill(zero.head2.b.begin(), zero.head2.b.end(), 0.0);
  const Vec uniform = classify(zero, e);
  CHECK(uniform[0] == 0.0);
  CHECK(uniform[1] == 0.0);
  CHECK(uniform[2] == 0.0);
}

TEST_CASE("forward is deterministic and exposes cls_hat") {
  const NetConfig cfg = testing::tiny_net_config();
  NetState state = init_net(cfg, 5);
  Rng rng(6);
  const auto grid = random_grid(cfg, rng);
  const auto sem = random_semantic(cfg, rng);
  const ForwardResult a = forward(state, cfg, grid, sem);
  const ForwardResult b = forward(state, cfg, grid, sem);
  CHECK(a.logits == b.logits);
  CHECK(a.cls_hat == b.cls_hat);
  CHECK(a.logits.size() == 3);
  CHECK(a.cls_hat.size() == cfg.working_dim);

  // Two different frames almost surely separate.
  const auto grid2 = random_grid(cfg, rng);
  const ForwardResult c = forward(state, cfg, grid2, sem);
  CHECK(a.cls_hat != c.cls_hat);
}

TEST_CASE("default configuration lands near the reported parameter count") {
  const NetConfig cfg;  // defaults
  const NetState state = init_net(cfg, 0);
  const std::size_t params = count_params(state);
  CHECK(params >= 25'000'000);
  CHECK(params <= 35'000'000);

  // The single-transformer ablation doubles its depth to stay comparable.
  NetConfig ns = cfg;
  ns.variant = Variant::NoStateTransformer;
  const std::size_t ns_params = count_params(init_net(ns, 0));
  CHECK(std::abs(static_cast<double>(ns_params) - static_cast<double>(params)) <
        0.1 * static_cast<double>(params));
}

TEST_CASE("config validation") {
  NetConfig cfg = testing::tiny_net_config();
  cfg.heads = 3;  // 16 % 3 != 0
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = testing::tiny_net_config();
  cfg.state_depth = 0;
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = testing::tiny_net_config();
  cfg.mlp_ratio = 0.0;
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
}

TEST_CASE("permuting patch tokens with their embeddings permutes outputs consistently") {
  const NetConfig cfg = testing::tiny_net_config();
  NetState state = init_net(cfg, 7);
  Rng rng(8);
  const auto grid = random_grid(cfg, rng);
  const Mat pe = sinusoidal_pe(cfg.tokens() + 1, cfg.working_dim);

  std::vector<std::size_t> perm = {2, 0, 3, 1};
  encoders::TokenGrid permuted = grid;
  Mat permuted_pe = pe;
  for (std::size_t t = 0; t < cfg.tokens(); ++t) {
    for (std::size_t c = 0; c < cfg.working_dim; ++c) {
      permuted.tokens.at(t, c) = grid.tokens.at(perm[t], c);
      permuted_pe.at(t + 1, c) = pe.at(perm[t] + 1, c);
    }
  }

  StateCache cache_a, cache_b;
  const StateFeatures a = state_forward_cached(state, cfg, grid, cache_a);
  const StateFeatures b = state_forward_cached(state, cfg, permuted, cache_b, &permuted_pe);

  for (std::size_t c = 0; c < cfg.working_dim; ++c)
    CHECK(a.cls_hat[c] == doctest::Approx(b.cls_hat[c]).epsilon(1e-12));
  for (std::size_t t = 0; t < cfg.tokens(); ++t)
    for (std::size_t c = 0; c < cfg.working_dim; ++c)
      CHECK(b.locals.at(t, c) == doctest::Approx(a.locals.at(perm[t], c)).epsilon(1e-12));
}

TEST_CASE("forward outputs stay finite over random draws") {
  const NetConfig cfg = testing::tiny_net_config();
  NetState state = init_net(cfg, 9);
  Rng rng(10);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto grid = random_grid(cfg, rng);
    const auto sem = random_semantic(cfg, rng);
    const ForwardResult fr = forward(state, cfg, grid, sem);
    REQUIRE(all_finite(fr.logits));
    REQUIRE(all_finite(fr.cls_hat));
  }
}

TEST_CASE("analytic gradients match finite differences on the tiny config") {
  TempDir tmp("grad");
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    const auto result = testing::run_gradcheck(seed, tmp.path());
    INFO("seed ", seed, " worst param ", result.worst_param);
    CHECK(result.max_rel_err < 1e-4);
  }
}

TEST_CASE("checkpoints round-trip and refuse version mismatches") {
  TempDir tmp("ckpt");
  const NetConfig cfg = testing::tiny_net_config();
  NetState state = init_net(cfg, 20);
  Rng rng(21);
  const auto rng_state = rng.serialize();
  const auto path = tmp.path() / "model.ckpt";
  save_checkpoint(path, cfg, state, rng_state);

  Checkpoint back = load_checkpoint(path);
  CHECK(back.cfg.working_dim == cfg.working_dim);
  CHECK(back.cfg.variant == cfg.variant);
  CHECK(back.rng_state == rng_state);
  auto a = param_spans(state);
  auto b = param_spans(back.state);
  REQUIRE(a.size() == b.size());
  for (std::size_t s = 0; s < a.size(); ++s) {
    REQUIRE(a[s].n == b[s].n);
    for (std::size_t i = 0; i < a[s].n; ++i) CHECK(a[s].data[i] == b[s].data[i]);
  }

  SUBCASE("corrupting the version field is refused") {
    auto bytes = condmon::testing::slurp(path);
    bytes[8] = '\x7f';  // version lives after the 8-byte magic
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  }

  SUBCASE("non-checkpoint files are refused") {
    std::ofstream out(tmp.path() / "junk.ckpt", std::ios::binary);
    out << "definitely not a checkpoint";
    out.close();
    CHECK_THROWS_AS(load_checkpoint(tmp.path() / "junk.ckpt"), ParseError);
  }
}
