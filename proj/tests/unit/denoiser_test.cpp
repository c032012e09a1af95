#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "lavi/denoiser.hpp"
#include "lavi/error.hpp"
#include "oracles.hpp"

namespace lavi {
namespace {

// Attention whose four projections are set explicitly; o is the identity so
// cross_attention(z, ...) - z is the raw attention mix.
nn::Attention explicit_attention(std::int64_t d, std::int64_t ctx, const Tensor& wq, const Tensor& wk,
                                 const Tensor& wv) {
  Rng rng(0);
  nn::Attention a(d, ctx, 1, rng);
  a.q().weight().mutable_value() = wq;
  a.k().weight().mutable_value() = wk;
  a.v().weight().mutable_value() = wv;
  Tensor eye({d, d});
  for (std::int64_t i = 0; i < d; ++i) eye[i * d + i] = 1;
  a.o().weight().mutable_value() = eye;
  a.o().bias().mutable_value().fill(0);
  return a;
}

Tensor identity(std::int64_t n) {
  Tensor t({n, n});
  for (std::int64_t i = 0; i < n; ++i) t[i * n + i] = 1;
  return t;
}

Tensor attention_mix(const Var& z, const Var& c, const nn::Attention& w, const ops::Mask& mask) {
  Tensor out = cross_attention(z, c, w, mask).value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= z.value()[i];
  return out;
}

TEST(CrossAttention, SingleKeyReturnsItsValueRow) {
  Rng rng(1);
  auto w = explicit_attention(4, 3, rng.normal_tensor({4, 4}), rng.normal_tensor({4, 3}), rng.normal_tensor({4, 3}));
  const Var z = Var::constant(rng.normal_tensor({1, 5, 4}));
  const Var c = Var::constant(rng.normal_tensor({1, 2, 3}));
  const ops::Mask mask = {0, 1};
  const Tensor mix = attention_mix(z, c, w, mask);
  const Tensor& wv = w.v().weight().value();
  for (int q = 0; q < 5; ++q) {
    for (int j = 0; j < 4; ++j) {
      double v = 0;
      for (int k = 0; k < 3; ++k) v += wv[j * 3 + k] * c.value()[3 + k];
      EXPECT_NEAR(mix[q * 4 + j], v, 1e-12);
    }
  }
}

TEST(CrossAttention, IdenticalKeysAverageValues) {
  Rng rng(2);
  const auto w = explicit_attention(2, 2, rng.normal_tensor({2, 2}), Tensor({2, 2}), identity(2));
  const Var z = Var::constant(rng.normal_tensor({1, 3, 2}));
  const Var c = Var::constant(Tensor({1, 2, 2}, std::vector<Scalar>{1, 2, 5, -4}));
  const Tensor mix = attention_mix(z, c, w, {});
  for (int q = 0; q < 3; ++q) {
    EXPECT_NEAR(mix[q * 2 + 0], 3.0, 1e-12);
    EXPECT_NEAR(mix[q * 2 + 1], -1.0, 1e-12);
  }
}

TEST(CrossAttention, HandChosenTwoByTwoAgainstBruteForce) {
  // Q = z, K = V = c (identity projections), d_head = 2.
  const auto w = explicit_attention(2, 2, identity(2), identity(2), identity(2));
  const std::vector<Scalar> zq = {1.0, 0.0, 0.5, -1.0}, ck = {2.0, 1.0, -1.0, 3.0};
  const Var z = Var::constant(Tensor({1, 2, 2}, zq));
  const Var c = Var::constant(Tensor({1, 2, 2}, ck));
  const Tensor mix = attention_mix(z, c, w, {});
  for (int i = 0; i < 2; ++i) {
    double s[2];
    for (int j = 0; j < 2; ++j) s[j] = (zq[i * 2] * ck[j * 2] + zq[i * 2 + 1] * ck[j * 2 + 1]) / std::sqrt(2.0);
    const double m = std::max(s[0], s[1]);
    const double e0 = std::exp(s[0] - m), e1 = std::exp(s[1] - m);
    for (int k = 0; k < 2; ++k) {
      EXPECT_NEAR(mix[i * 2 + k], (e0 * ck[k] + e1 * ck[2 + k]) / (e0 + e1), 1e-12);
    }
  }
}

TEST(CrossAttention, DimensionMismatch) {
  Rng rng(3);
  nn::Attention a(4, 3, 1, rng);
  EXPECT_THROW(cross_attention(Var::constant(Tensor({1, 2, 4})), Var::constant(Tensor({1, 2, 5})), a, {}),
               ContractViolation);
}

TEST(TimestepEmbedding, ZeroInjectiveAndDeterministic) {
  const Tensor e0 = timestep_embedding(0, 16);
  for (int i = 0; i < 8; ++i) {
    EXPECT_EQ(e0[2 * i], 0.0);
    EXPECT_EQ(e0[2 * i + 1], 1.0);
  }
  std::set<std::vector<double>> rows;
  for (int t = 1; t <= 1000; ++t) {
    const Tensor e = timestep_embedding(t, 8);
    rows.insert(std::vector<double>(e.data().begin(), e.data().end()));
  }
  EXPECT_EQ(rows.size(), 1000u);
  EXPECT_TRUE(timestep_embedding(417, 32).identical(timestep_embedding(417, 32)));
  EXPECT_THROW(timestep_embedding(1, 7), ContractViolation);
}

TEST(Presets, Widths) {
  EXPECT_EQ(denoiser_preset("unet-small").base_channels, 32);
  EXPECT_EQ(denoiser_preset("unet-base").base_channels, 64);
  const auto dit = denoiser_preset("dit-base");
  EXPECT_EQ(dit.kind, DenoiserKind::dit);
  EXPECT_EQ(dit.depth, 6);
  EXPECT_EQ(dit.base_channels, 128);
  EXPECT_EQ(dit.patch_size, 4);
  EXPECT_THROW(denoiser_preset("unet-xl"), ConfigError);
}

TEST(Config, Divisibility) {
  DenoiserConfig c = testing::tiny_denoiser_config();
  c.resolution = 9;
  EXPECT_THROW(c.validate(), ConfigError);
  c = testing::tiny_denoiser_config();
  c.cross_dim = 15;
  EXPECT_THROW(c.validate(), ConfigError);
  c.kind = DenoiserKind::dit;
  c.cross_dim = 16;
  c.patch_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

struct Inputs {
  Var x, ctx;
  ops::Mask mask;
  std::vector<int> t;
};

Inputs fixed_inputs(std::int64_t res = 8, std::int64_t ctx_dim = 16) {
  Rng rng(31);
  Inputs in;
  in.x = Var::constant(rng.normal_tensor({2, 3, res, res}));
  in.ctx = Var::constant(rng.normal_tensor({2, 5, ctx_dim}));
  in.mask = {1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
  in.t = {3, 950};
  return in;
}

DenoiserConfig tiny_dit() {
  DenoiserConfig c = testing::tiny_denoiser_config();
  c.kind = DenoiserKind::dit;
  c.base_channels = 16;
  c.depth = 2;
  c.patch_size = 2;
  return c;
}

void expect_regression(const DenoiserConfig& c, double sum, double sq, double y0, double y77, double ylast) {
  auto m = make_vision_model(c);
  const Inputs in = fixed_inputs();
  NoGradGuard guard;
  const Tensor y = m->forward(in.x, in.t, in.ctx, in.mask).value();
  double s = 0, s2 = 0;
  for (auto v : y.data()) {
    s += v;
    s2 += v * v;
  }
  const auto close = [](double got, double want) { return std::abs(got - want) <= 1e-9 * std::max(1.0, std::abs(want)); };
  EXPECT_PRED2(close, s, sum);
  EXPECT_PRED2(close, s2, sq);
  EXPECT_PRED2(close, y[0], y0);
  EXPECT_PRED2(close, y[77], y77);
  EXPECT_PRED2(close, y[y.numel() - 1], ylast);
}

// Values recorded from the first verified build (seed 2 weights, seed 31 inputs).
TEST(Regression, TinyUNet) {
  expect_regression(testing::tiny_denoiser_config(), -5.50158604696471, 35.677255513844685, -0.2051162135860965,
                    -0.13593117911452984, 0.33446247794430678);
}

TEST(Regression, TinyDiT) {
  expect_regression(tiny_dit(), -41.517189587411004, 148.23101197502632, -0.14352053349449226, -0.41048510807979088,
                    -0.58592835226300988);
}

TEST(Forward, ShapePreservedOnRandomConfigs) {
  Rng rng(4);
  for (int trial = 0; trial < 8; ++trial) {
    DenoiserConfig c;
    c.num_heads = 2;
    c.cross_dim = 2 * rng.uniform_int(2, 8);
    if (trial % 2 == 0) {
      c.kind = DenoiserKind::unet;
      c.base_channels = 4 * rng.uniform_int(1, 3);
      const int levels = static_cast<int>(rng.uniform_int(1, 3));
      c.channel_multipliers.clear();
      for (int l = 0; l < levels; ++l) c.channel_multipliers.push_back(static_cast<int>(rng.uniform_int(1, 2)));
      c.resolution = (1 << (levels - 1)) * static_cast<int>(rng.uniform_int(2, 4));
    } else {
      c.kind = DenoiserKind::dit;
      c.base_channels = 8;
      c.depth = static_cast<int>(rng.uniform_int(0, 2));
      c.patch_size = static_cast<int>(rng.uniform_int(1, 3));
      c.resolution = c.patch_size * static_cast<int>(rng.uniform_int(1, 4));
    }
    auto m = make_vision_model(c);
    const Var x = Var::constant(rng.normal_tensor({2, 3, c.resolution, c.resolution}));
    const Var ctx = Var::constant(rng.normal_tensor({2, 3, c.cross_dim}));
    const std::vector<int> t = {1, 1000};
    const Tensor y = m->forward(x, t, ctx, {}).value();
    EXPECT_EQ(y.shape(), x.shape()) << to_string(c.kind);
    EXPECT_TRUE(all_finite(y));
  }
}

TEST(Forward, MaskedContextRowsAreIgnored) {
  for (const auto& c : {testing::tiny_denoiser_config(), tiny_dit()}) {
    auto m = make_vision_model(c);
    Inputs in = fixed_inputs();
    const Tensor a = m->forward(in.x, in.t, in.ctx, in.mask).value();
    Tensor altered = in.ctx.value();
    for (int l = 3; l < 5; ++l) {
      for (int k = 0; k < 16; ++k) altered[l * 16 + k] = 1e3 * (k + 1);
    }
    const Tensor b = m->forward(in.x, in.t, Var::constant(altered), in.mask).value();
    EXPECT_TRUE(a.identical(b)) << to_string(c.kind);
    Tensor unmasked = in.ctx.value();
    unmasked[0] += 1.0;
    EXPECT_FALSE(a.identical(m->forward(in.x, in.t, Var::constant(unmasked), in.mask).value()));
  }
}

TEST(Forward, RejectsMismatchedInputs) {
  auto m = make_vision_model(testing::tiny_denoiser_config());
  Inputs in = fixed_inputs();
  EXPECT_THROW(m->forward(Var::constant(Tensor({2, 3, 6, 6})), in.t, in.ctx, in.mask), ContractViolation);
  EXPECT_THROW(m->forward(in.x, std::vector<int>{1}, in.ctx, in.mask), ContractViolation);
  EXPECT_THROW(m->forward(in.x, in.t, Var::constant(Tensor({2, 5, 12})), in.mask), ContractViolation);
}

TEST(DiT, TokenCount) {
  DiT d(tiny_dit());
  EXPECT_EQ(d.num_tokens(), 16);
  DiT big(denoiser_preset("dit-base"));
  EXPECT_EQ(big.num_tokens(), 64);
}

TEST(AttentionWeights, RowsAreStochastic) {
  Rng rng(9);
  const ops::Mask mask = {1, 0, 1, 1, 1, 1, 0, 0};
  const Tensor w = ops::attention_weights(rng.normal_tensor({2, 5, 8}), rng.normal_tensor({2, 4, 8}), 2, mask, false);
  for (std::int64_t row = 0; row < w.numel() / 4; ++row) {
    double s = 0;
    for (int k = 0; k < 4; ++k) s += w[row * 4 + k];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

}  // namespace
}  // namespace lavi
