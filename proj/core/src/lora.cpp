#include "lavi/lora.hpp"

#include <cmath>

#include "lavi/error.hpp"
#include "lavi/ops.hpp"

namespace lavi {

LoraDelta LoraDelta::for_linear(std::int64_t in, std::int64_t out, int rank, Scalar alpha, Rng& rng) {
  LAVI_EXPECT(rank >= 1, "LoRA rank must be >= 1");
  LoraDelta d;
  d.rank = rank;
  d.alpha = alpha;
  d.a = Var::leaf(rng.normal_tensor({rank, in}, 1.0 / std::sqrt(static_cast<Scalar>(in))), true);
  d.b = Var::leaf(Tensor({out, rank}), true);
  return d;
}

LoraDelta LoraDelta::for_conv(std::int64_t in, std::int64_t out, int kernel, int rank, Scalar alpha, Rng& rng) {
  LAVI_EXPECT(rank >= 1, "LoRA rank must be >= 1");
  LoraDelta d;
  d.rank = rank;
  d.alpha = alpha;
  const Scalar fan_in = static_cast<Scalar>(in * kernel * kernel);
  d.a = Var::leaf(rng.normal_tensor({rank, in, kernel, kernel}, 1.0 / std::sqrt(fan_in)), true);
  d.b = Var::leaf(Tensor({out, rank, 1, 1}), true);
  return d;
}

Var lora_linear_forward(const Var& weight, const Var& bias, const LoraDelta* delta, const Var& x) {
  if (!delta) return ops::linear(x, weight, bias);
  LAVI_EXPECT(delta->a.value().rank() == 2 && delta->a.dim(1) == weight.dim(1) && delta->b.dim(0) == weight.dim(0) &&
                  delta->b.dim(1) == delta->a.dim(0),
              "lora_linear_forward: delta shapes " + shape_str(delta->a.shape()) + "/" + shape_str(delta->b.shape()) +
                  " incompatible with weight " + shape_str(weight.shape()));
  return ops::linear_lora(x, weight, bias, delta->a, delta->b, delta->scale());
}

Var lora_conv_forward(const Var& weight, const Var& bias, int stride, int padding, const LoraDelta* delta,
                      const Var& x) {
  if (!delta) return ops::conv2d(x, weight, bias, stride, padding);
  LAVI_EXPECT(delta->a.value().rank() == 4 && delta->a.dim(1) == weight.dim(1) && delta->a.dim(2) == weight.dim(2) &&
                  delta->b.dim(0) == weight.dim(0) && delta->b.dim(1) == delta->a.dim(0) && delta->b.dim(2) == 1,
              "lora_conv_forward: delta shapes " + shape_str(delta->a.shape()) + "/" + shape_str(delta->b.shape()) +
                  " incompatible with weight " + shape_str(weight.shape()));
  return ops::conv2d_lora(x, weight, bias, stride, padding, delta->a, delta->b, delta->scale());
}

Tensor merge_lora(const Tensor& weight, const LoraDelta& delta) {
  const std::int64_t out = weight.dim(0);
  const std::int64_t fan_in = weight.numel() / out;
  const std::int64_t r = delta.rank;
  const Tensor& a = delta.a.value();
  const Tensor& b = delta.b.value();
  LAVI_EXPECT(a.numel() == r * fan_in && b.numel() == out * r, "merge_lora: shape mismatch");
  Tensor merged = weight;
  const Scalar s = delta.scale();
  for (std::int64_t o = 0; o < out; ++o)
    for (std::int64_t i = 0; i < fan_in; ++i) {
      Scalar acc = 0;
      for (std::int64_t k = 0; k < r; ++k) acc += b[o * r + k] * a[k * fan_in + i];
      merged[o * fan_in + i] += s * acc;
    }
  return merged;
}

}  // namespace lavi
