#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "lavi/error.hpp"
#include "lavi/lora.hpp"
#include "lavi/ops.hpp"
#include "lavi/rng.hpp"
#include "oracles.hpp"

namespace lavi {
namespace {

using Build = std::function<Var(const std::vector<Var>&)>;

// Checks d sum(w * f(inputs)) / d inputs against central differences at
// step 1e-3, with a fixed random weighting w so every output element matters.
void expect_gradients(const std::vector<Shape>& shapes, const Build& f, std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<nn::NamedVar> params;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    vars.push_back(Var::leaf(rng.normal_tensor(shapes[i], 0.8), true));
    params.emplace_back("input" + std::to_string(i), vars.back());
  }
  const Tensor out0 = f(vars).value();
  const Var weight = Var::constant(rng.normal_tensor(out0.shape()));
  backward(ops::sum(ops::mul(f(vars), weight)));
  const auto loss = [&] {
    NoGradGuard guard;
    return ops::sum(ops::mul(f(vars), weight)).value().item();
  };
  for (const auto& g : testing::finite_difference_check(params, loss, 1e-3, 24, seed + 7)) {
    EXPECT_LT(g.rel_error, 1e-6) << g.name;
    EXPECT_LT(g.dir_rel_error, 1e-6) << g.name;
  }
}

TEST(OpsGrad, Elementwise) {
  expect_gradients({{3, 4}, {3, 4}}, [](auto& v) { return ops::mul(ops::add(v[0], v[1]), ops::sub(v[0], v[1])); });
  expect_gradients({{2, 5}}, [](auto& v) { return ops::silu(v[0]); });
  expect_gradients({{2, 5}}, [](auto& v) { return ops::gelu(v[0]); });
}

TEST(OpsGrad, LinearAndLora) {
  expect_gradients({{2, 3, 5}, {4, 5}, {4}}, [](auto& v) { return ops::linear(v[0], v[1], v[2]); });
  expect_gradients({{2, 3, 5}, {4, 5}, {4}, {2, 5}, {4, 2}},
                   [](auto& v) { return ops::linear_lora(v[0], v[1], v[2], v[3], v[4], 1.5); });
  expect_gradients({{3, 5}, {4, 5}, {2, 5}, {4, 2}},
                   [](auto& v) { return ops::linear_lora(v[0], v[1], Var(), v[2], v[3], 0.5); });
}

TEST(OpsGrad, ConvAndLora) {
  expect_gradients({{2, 3, 5, 5}, {4, 3, 3, 3}, {4}}, [](auto& v) { return ops::conv2d(v[0], v[1], v[2], 1, 1); });
  expect_gradients({{1, 2, 6, 6}, {3, 2, 3, 3}, {3}}, [](auto& v) { return ops::conv2d(v[0], v[1], v[2], 2, 1); });
  expect_gradients({{2, 3, 5, 5}, {4, 3, 3, 3}, {4}, {2, 3, 3, 3}, {4, 2, 1, 1}},
                   [](auto& v) { return ops::conv2d_lora(v[0], v[1], v[2], 1, 1, v[3], v[4], 2.0); });
  expect_gradients({{1, 2, 6, 6}, {3, 2, 3, 3}, {1, 2, 3, 3}, {3, 1, 1, 1}},
                   [](auto& v) { return ops::conv2d_lora(v[0], v[1], Var(), 2, 1, v[2], v[3], 1.0); });
}

TEST(OpsGrad, Norms) {
  expect_gradients({{2, 3, 6}, {6}, {6}}, [](auto& v) { return ops::layer_norm(v[0], v[1], v[2]); });
  expect_gradients({{2, 4, 3, 3}, {4}, {4}}, [](auto& v) { return ops::group_norm(v[0], 2, v[1], v[2]); });
}

TEST(OpsGrad, Attention) {
  const ops::Mask mask = {1, 1, 0, 1, 0, 0};
  expect_gradients({{2, 4, 6}, {2, 3, 6}, {2, 3, 6}},
                   [&](auto& v) { return ops::attention(v[0], v[1], v[2], 2, mask, false); });
  expect_gradients({{1, 4, 6}, {1, 4, 6}, {1, 4, 6}},
                   [](auto& v) { return ops::attention(v[0], v[1], v[2], 3, {}, true); });
}

TEST(OpsGrad, LayoutOps) {
  expect_gradients({{2, 3, 2, 2}}, [](auto& v) { return ops::tokens_to_nchw(ops::nchw_to_tokens(v[0]), 2, 2); });
  expect_gradients({{1, 3, 4, 4}}, [](auto& v) { return ops::patchify(v[0], 2); });
  expect_gradients({{1, 2, 3, 3}, {1, 1, 3, 3}}, [](auto& v) { return ops::concat_channels(v[0], v[1]); });
  expect_gradients({{1, 2, 2, 3}}, [](auto& v) { return ops::upsample_nearest2x(v[0]); });
  expect_gradients({{5, 3}}, [](auto& v) {
    const std::vector<std::int64_t> ids = {0, 4, 4, 2};
    return ops::embedding(v[0], ids, 2, 2);
  });
  expect_gradients({{2, 3, 4}, {5, 4}}, [](auto& v) { return ops::add_rows(v[0], v[1]); });
  expect_gradients({{2, 3, 2, 2}, {2, 3}}, [](auto& v) { return ops::add_channel_bias(v[0], v[1]); });
  expect_gradients({{2, 3, 4}, {2, 4}}, [](auto& v) { return ops::add_token_bias(v[0], v[1]); });
  expect_gradients({{2, 3}, {2, 3}}, [](auto& v) { return ops::mse(v[0], v[1]); });
}

TEST(Ops, PatchifyRoundTrip) {
  Rng rng(4);
  const Tensor x = rng.normal_tensor({2, 3, 8, 8});
  const Var back = ops::unpatchify(ops::patchify(Var::constant(x), 4), 4, 3, 8, 8);
  EXPECT_TRUE(back.value().identical(x));
}

TEST(Ops, AttentionMaskedKeysHaveZeroWeight) {
  Rng rng(5);
  const ops::Mask mask = {1, 0, 1};
  const Tensor w = ops::attention_weights(rng.normal_tensor({1, 2, 4}), rng.normal_tensor({1, 3, 4}), 2, mask, false);
  for (int h = 0; h < 2; ++h) {
    for (int q = 0; q < 2; ++q) {
      const std::int64_t row = (h * 2 + q) * 3;
      EXPECT_EQ(w[row + 1], 0.0);
      EXPECT_NEAR(w[row] + w[row + 2], 1.0, 1e-12);
    }
  }
}

TEST(Ops, FullyMaskedQueryRowsAreZero) {
  Rng rng(6);
  const ops::Mask mask = {0, 0};
  const Var out = ops::attention(Var::constant(rng.normal_tensor({1, 2, 4})), Var::constant(rng.normal_tensor({1, 2, 4})),
                                 Var::constant(rng.normal_tensor({1, 2, 4})), 1, mask, false);
  EXPECT_EQ(max_abs(out.value()), 0.0);
}

TEST(Ops, ShapeContracts) {
  const Var x = Var::constant(Tensor({2, 3}));
  EXPECT_THROW(ops::add(x, Var::constant(Tensor({3, 2}))), ContractViolation);
  EXPECT_THROW(ops::linear(x, Var::constant(Tensor({4, 5})), Var()), ContractViolation);
  EXPECT_THROW(ops::conv2d(Var::constant(Tensor({1, 2, 4, 4})), Var::constant(Tensor({3, 3, 3, 3})), Var(), 1, 1),
               ContractViolation);
}

TEST(Lora, ZeroBIsBitExactForLinearAndConv) {
  Rng rng(7);
  const Var x = Var::constant(rng.normal_tensor({2, 5, 6}));
  const Var w = Var::constant(rng.normal_tensor({4, 6})), b = Var::constant(rng.normal_tensor({4}));
  LoraDelta d = LoraDelta::for_linear(6, 4, 2, 2.0, rng);
  EXPECT_EQ(max_abs(d.b.value()), 0.0);
  EXPECT_TRUE(lora_linear_forward(w, b, &d, x).value().identical(ops::linear(x, w, b).value()));

  const Var img = Var::constant(rng.normal_tensor({2, 3, 6, 6}));
  const Var cw = Var::constant(rng.normal_tensor({5, 3, 3, 3})), cb = Var::constant(rng.normal_tensor({5}));
  LoraDelta cd = LoraDelta::for_conv(3, 5, 3, 4, 4.0, rng);
  EXPECT_TRUE(lora_conv_forward(cw, cb, 1, 1, &cd, img).value().identical(ops::conv2d(img, cw, cb, 1, 1).value()));
}

TEST(Lora, MatchesMergedWeightAndIsLinearInAlpha) {
  Rng rng(8);
  const Var x = Var::constant(rng.normal_tensor({3, 6}));
  const Var w = Var::constant(rng.normal_tensor({4, 6}));
  LoraDelta d = LoraDelta::for_linear(6, 4, 2, 2.0, rng);
  d.b.mutable_value() = rng.normal_tensor({4, 2});
  const Tensor fused = lora_linear_forward(w, Var(), &d, x).value();
  const Tensor merged = ops::linear(x, Var::constant(merge_lora(w.value(), d)), Var()).value();
  EXPECT_LT(max_abs_diff(fused, merged), 1e-12);

  const Tensor base = ops::linear(x, w, Var()).value();
  LoraDelta d2 = d;
  d2.alpha = 2 * d.alpha;
  const Tensor doubled = lora_linear_forward(w, Var(), &d2, x).value();
  for (std::int64_t i = 0; i < base.numel(); ++i) {
    EXPECT_NEAR(doubled[i] - base[i], 2 * (fused[i] - base[i]), 1e-12);
  }

  const Var img = Var::constant(rng.normal_tensor({1, 3, 5, 5}));
  const Var cw = Var::constant(rng.normal_tensor({2, 3, 3, 3}));
  LoraDelta cd = LoraDelta::for_conv(3, 2, 3, 2, 2.0, rng);
  cd.b.mutable_value() = rng.normal_tensor({2, 2, 1, 1});
  const Tensor cfused = lora_conv_forward(cw, Var(), 1, 1, &cd, img).value();
  const Tensor cmerged = ops::conv2d(img, Var::constant(merge_lora(cw.value(), cd)), Var(), 1, 1).value();
  EXPECT_LT(max_abs_diff(cfused, cmerged), 1e-12);
}

TEST(Lora, InitialisationShapes) {
  Rng rng(9);
  const LoraDelta l = LoraDelta::for_linear(6, 4, 3, 0, rng);
  EXPECT_EQ(l.a.shape(), (Shape{3, 6}));
  EXPECT_EQ(l.b.shape(), (Shape{4, 3}));
  EXPECT_TRUE(l.a.requires_grad());
  EXPECT_GT(max_abs(l.a.value()), 0.0);
  const LoraDelta c = LoraDelta::for_conv(3, 5, 3, 2, 0, rng);
  EXPECT_EQ(c.a.shape(), (Shape{2, 3, 3, 3}));
  EXPECT_EQ(c.b.shape(), (Shape{5, 2, 1, 1}));
  EXPECT_EQ(c.parameter_count(), 2 * 27 + 10);
}

}  // namespace
}  // namespace lavi
