#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lavi/autograd.hpp"

// Differentiable tensor operations. Every op validates shapes and throws
// ContractViolation on mismatch. Layouts: images are NCHW, sequences are
// [batch, length, features], weights follow the [out, in, ...] convention.
namespace lavi::ops {

// Per-position validity flags, row-major [batch, length]; nonzero = real token.
using Mask = std::vector<std::uint8_t>;

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Scalar s);
Var sum(const Var& a);
Var reshape(const Var& a, Shape shape);

Var silu(const Var& x);
Var gelu(const Var& x);

// y = x W^T + b over the last dimension of x. bias may be undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);

// x (W + scale * B A)^T + b with a [r, in] and b [out, r]. Gradients for A and
// B use the factored form; with B == 0 the output is bit-identical to linear().
Var linear_lora(const Var& x, const Var& weight, const Var& bias, const Var& a, const Var& b, Scalar scale);

// 2-D convolution, NCHW input, weight [out, in, k, k]. bias may be undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);

// Convolution with W + scale * B A, a [r, in, k, k] and b [out, r, 1, 1]: the
// same map as a k x k conv by A followed by a 1 x 1 conv by B, added to the
// base conv. One im2col per item serves every gradient.
Var conv2d_lora(const Var& x, const Var& weight, const Var& bias, int stride, int padding, const Var& a, const Var& b,
                Scalar scale);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Scalar eps = 1e-5);
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, Scalar eps = 1e-5);

// Multi-head scaled dot-product attention over pre-projected q [B,Lq,D],
// k and v [B,Lk,D]. Scores are scaled by 1/sqrt(D/heads). key_mask, when
// non-empty, is [B,Lk]; masked keys get -inf. Query rows with no visible key
// produce zeros.
Var attention(const Var& q, const Var& k, const Var& v, int heads, std::span<const std::uint8_t> key_mask,
              bool causal);

// Softmax probabilities [B, heads, Lq, Lk] of the same computation, no tape.
Tensor attention_weights(const Tensor& q, const Tensor& k, int heads, std::span<const std::uint8_t> key_mask,
                         bool causal);

Var nchw_to_tokens(const Var& x);                                  // [N,C,H,W] -> [N,HW,C]
Var tokens_to_nchw(const Var& x, std::int64_t h, std::int64_t w);  // [N,HW,C] -> [N,C,H,W]
Var patchify(const Var& x, int patch);                             // [N,C,H,W] -> [N,(H/p)(W/p),C*p*p]
Var unpatchify(const Var& x, int patch, std::int64_t channels, std::int64_t h, std::int64_t w);

Var concat_channels(const Var& a, const Var& b);
Var upsample_nearest2x(const Var& x);

// Gathers rows of table [V,d] for ids laid out [batch, length].
Var embedding(const Var& table, std::span<const std::int64_t> ids, std::int64_t batch, std::int64_t length);

Var add_rows(const Var& x, const Var& rows);              // x [B,L,d] + rows[0..L) of [P,d]
Var add_channel_bias(const Var& x, const Var& bias);      // x [N,C,H,W] + bias [N,C]
Var add_token_bias(const Var& x, const Var& bias);        // x [B,L,d] + bias [B,d]
Var zero_masked_rows(const Var& x, std::span<const std::uint8_t> mask);  // x [B,L,d]

// Mean squared error over all elements; scalar result.
Var mse(const Var& prediction, const Var& target);

}  // namespace lavi::ops
