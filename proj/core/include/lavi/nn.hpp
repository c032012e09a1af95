#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lavi/autograd.hpp"
#include "lavi/lora.hpp"
#include "lavi/ops.hpp"
#include "lavi/rng.hpp"

// Building-block layers. Base parameters are created frozen
// (requires_grad == false); only attached LoRA deltas are trainable.
namespace lavi::nn {

class Linear {
 public:
  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng);

  Var forward(const Var& x) const;

  std::int64_t in_features() const { return weight_.dim(1); }
  std::int64_t out_features() const { return weight_.dim(0); }
  Var& weight() { return weight_; }
  Var& bias() { return bias_; }
  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }

  bool has_lora() const { return lora_.has_value(); }
  const LoraDelta* lora() const { return lora_ ? &*lora_ : nullptr; }
  LoraDelta* lora() { return lora_ ? &*lora_ : nullptr; }
  void attach_lora(LoraDelta delta);

 private:
  Var weight_;
  Var bias_;
  std::optional<LoraDelta> lora_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::int64_t in, std::int64_t out, int kernel, int stride, int padding, bool with_bias, Rng& rng);

  Var forward(const Var& x) const;

  std::int64_t in_channels() const { return weight_.dim(1); }
  std::int64_t out_channels() const { return weight_.dim(0); }
  int kernel() const { return static_cast<int>(weight_.dim(2)); }
  int stride() const { return stride_; }
  int padding() const { return padding_; }
  Var& weight() { return weight_; }
  Var& bias() { return bias_; }

  bool has_lora() const { return lora_.has_value(); }
  const LoraDelta* lora() const { return lora_ ? &*lora_ : nullptr; }
  LoraDelta* lora() { return lora_ ? &*lora_ : nullptr; }
  void attach_lora(LoraDelta delta);

 private:
  Var weight_;
  Var bias_;
  int stride_ = 1;
  int padding_ = 0;
  std::optional<LoraDelta> lora_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::int64_t dim);
  Var forward(const Var& x) const { return ops::layer_norm(x, gamma_, beta_); }
  Var& gamma() { return gamma_; }
  Var& beta() { return beta_; }

 private:
  Var gamma_;
  Var beta_;
};

class GroupNorm {
 public:
  GroupNorm() = default;
  // Uses gcd(channels, max_groups) groups.
  explicit GroupNorm(std::int64_t channels, int max_groups = 8);
  Var forward(const Var& x) const { return ops::group_norm(x, groups_, gamma_, beta_); }
  Var& gamma() { return gamma_; }
  Var& beta() { return beta_; }
  int groups() const { return groups_; }

 private:
  int groups_ = 1;
  Var gamma_;
  Var beta_;
};

// Walks a model's named parameters and LoRA-injectable layers in a fixed order.
class Visitor {
 public:
  virtual ~Visitor() = default;
  virtual void linear(const std::string& name, Linear& layer);
  virtual void conv(const std::string& name, Conv2d& layer);
  virtual void norm(const std::string& name, LayerNorm& layer);
  virtual void norm(const std::string& name, GroupNorm& layer);
  virtual void parameter(const std::string& name, Var& param) = 0;
};

class Module {
 public:
  virtual ~Module() = default;
  virtual void visit(Visitor& v) = 0;
};

using NamedVar = std::pair<std::string, Var>;

// All base (non-LoRA) parameters in visit order.
std::vector<NamedVar> base_parameters(Module& m);

// Frozen base tensors copied by name.
std::vector<std::pair<std::string, Tensor>> snapshot(Module& m);

std::int64_t count_elements(const std::vector<NamedVar>& params);

// Multi-head attention projections (q from queries, k/v from context, o back to
// query width). Self-attention uses context == queries.
class Attention {
 public:
  Attention() = default;
  Attention(std::int64_t query_dim, std::int64_t context_dim, int heads, Rng& rng);

  // Attention output projected by o; no residual.
  Var attend(const Var& x, const Var& context, std::span<const std::uint8_t> key_mask, bool causal) const;

  void visit(const std::string& prefix, Visitor& v);
  int heads() const { return heads_; }
  Linear& q() { return q_; }
  Linear& k() { return k_; }
  Linear& v() { return v_; }
  Linear& o() { return o_; }

 private:
  int heads_ = 1;
  Linear q_, k_, v_, o_;
};

}  // namespace lavi::nn
