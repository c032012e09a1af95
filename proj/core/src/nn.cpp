#include "lavi/nn.hpp"

#include <cmath>
#include <numeric>

#include "lavi/error.hpp"

namespace lavi::nn {

Linear::Linear(std::int64_t in, std::int64_t out, bool with_bias, Rng& rng) {
  const Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(in));
  weight_ = Var::leaf(rng.uniform_tensor({out, in}, -bound, bound), false);
  if (with_bias) bias_ = Var::leaf(rng.uniform_tensor({out}, -bound, bound), false);
}

Var Linear::forward(const Var& x) const { return lora_linear_forward(weight_, bias_, lora(), x); }

void Linear::attach_lora(LoraDelta delta) {
  if (lora_) throw ConfigError("layer already carries a LoRA delta");
  lora_ = std::move(delta);
}

Conv2d::Conv2d(std::int64_t in, std::int64_t out, int kernel, int stride, int padding, bool with_bias, Rng& rng)
    : stride_(stride), padding_(padding) {
  const Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(in * kernel * kernel));
  weight_ = Var::leaf(rng.uniform_tensor({out, in, kernel, kernel}, -bound, bound), false);
  if (with_bias) bias_ = Var::leaf(rng.uniform_tensor({out}, -bound, bound), false);
}

Var Conv2d::forward(const Var& x) const { return lora_conv_forward(weight_, bias_, stride_, padding_, lora(), x); }

void Conv2d::attach_lora(LoraDelta delta) {
  if (lora_) throw ConfigError("layer already carries a LoRA delta");
  lora_ = std::move(delta);
}

LayerNorm::LayerNorm(std::int64_t dim)
    : gamma_(Var::leaf(Tensor({dim}, 1.0), false)), beta_(Var::leaf(Tensor({dim}), false)) {}

GroupNorm::GroupNorm(std::int64_t channels, int max_groups)
    : groups_(static_cast<int>(std::gcd(channels, static_cast<std::int64_t>(max_groups)))),
      gamma_(Var::leaf(Tensor({channels}, 1.0), false)),
      beta_(Var::leaf(Tensor({channels}), false)) {}

void Visitor::linear(const std::string& name, Linear& layer) {
  parameter(name + ".weight", layer.weight());
  if (layer.bias().defined()) parameter(name + ".bias", layer.bias());
}

void Visitor::conv(const std::string& name, Conv2d& layer) {
  parameter(name + ".weight", layer.weight());
  if (layer.bias().defined()) parameter(name + ".bias", layer.bias());
}

void Visitor::norm(const std::string& name, LayerNorm& layer) {
  parameter(name + ".gamma", layer.gamma());
  parameter(name + ".beta", layer.beta());
}

void Visitor::norm(const std::string& name, GroupNorm& layer) {
  parameter(name + ".gamma", layer.gamma());
  parameter(name + ".beta", layer.beta());
}

namespace {
class ParamCollector : public Visitor {
 public:
  void parameter(const std::string& name, Var& p) override { out.emplace_back(name, p); }
  std::vector<NamedVar> out;
};
}  // namespace

std::vector<NamedVar> base_parameters(Module& m) {
  ParamCollector c;
  m.visit(c);
  return std::move(c.out);
}

std::vector<std::pair<std::string, Tensor>> snapshot(Module& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& [name, var] : base_parameters(m)) out.emplace_back(name, var.value());
  return out;
}

std::int64_t count_elements(const std::vector<NamedVar>& params) {
  std::int64_t n = 0;
  for (const auto& [name, v] : params) n += v.numel();
  return n;
}

Attention::Attention(std::int64_t query_dim, std::int64_t context_dim, int heads, Rng& rng)
    : heads_(heads),
      q_(query_dim, query_dim, false, rng),
      k_(context_dim, query_dim, false, rng),
      v_(context_dim, query_dim, false, rng),
      o_(query_dim, query_dim, true, rng) {
  LAVI_EXPECT(heads > 0 && query_dim % heads == 0, "attention width " + std::to_string(query_dim) +
                                                        " not divisible by " + std::to_string(heads) + " heads");
}

Var Attention::attend(const Var& x, const Var& context, std::span<const std::uint8_t> key_mask, bool causal) const {
  LAVI_EXPECT(context.dim(-1) == k_.in_features(), "attention context width " + std::to_string(context.dim(-1)) +
                                                        " does not match projection input " +
                                                        std::to_string(k_.in_features()));
  Var q = q_.forward(x);
  Var k = k_.forward(context);
  Var v = v_.forward(context);
  return o_.forward(ops::attention(q, k, v, heads_, key_mask, causal));
}

void Attention::visit(const std::string& prefix, Visitor& vis) {
  vis.linear(prefix + ".q", q_);
  vis.linear(prefix + ".k", k_);
  vis.linear(prefix + ".v", v_);
  vis.linear(prefix + ".o", o_);
}

}  // namespace lavi::nn
