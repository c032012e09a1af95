#pragma once

#include <cstdint>

#include "lavi/autograd.hpp"
#include "lavi/rng.hpp"

namespace lavi {

// Low-rank update attached to one frozen linear or convolutional layer.
//   linear: a [r, in],        b [out, r]
//   conv:   a [r, in, k, k],  b [out, r, 1, 1]
// b starts at exactly zero so the delta contributes nothing until trained.
struct LoraDelta {
  Var a;
  Var b;
  int rank = 0;
  Scalar alpha = 0;

  Scalar scale() const { return alpha / static_cast<Scalar>(rank); }
  std::int64_t parameter_count() const { return a.numel() + b.numel(); }

  static LoraDelta for_linear(std::int64_t in, std::int64_t out, int rank, Scalar alpha, Rng& rng);
  static LoraDelta for_conv(std::int64_t in, std::int64_t out, int kernel, int rank, Scalar alpha, Rng& rng);
};

// y = x W^T + b + (alpha/r) * (x A^T) B^T. delta may be null.
Var lora_linear_forward(const Var& weight, const Var& bias, const LoraDelta* delta, const Var& x);

// Base convolution plus (alpha/r) * conv1x1_B(conv_kxk_A(x)), A sharing the
// base layer's stride and padding.
Var lora_conv_forward(const Var& weight, const Var& bias, int stride, int padding, const LoraDelta* delta,
                      const Var& x);

// W + (alpha/r) * B A, the equivalent dense weight (linear or conv).
Tensor merge_lora(const Tensor& weight, const LoraDelta& delta);

}  // namespace lavi
