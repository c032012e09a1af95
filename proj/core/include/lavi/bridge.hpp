#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "lavi/denoiser.hpp"
#include "lavi/diffusion.hpp"
#include "lavi/text.hpp"

namespace lavi {

struct LoRAConfig {
  bool enabled = true;  // false leaves the backbone without deltas (adapter-only ablation)
  int rank = 4;
  double alpha = 0;  // 0 means alpha = rank
  std::vector<std::string> target_patterns;  // fnmatch globs over layer names

  double effective_alpha() const { return alpha > 0 ? alpha : rank; }
  void validate() const;
};

// Patterns covering the attention projections of the language model.
// Encoder-decoder decoders are not matched.
std::vector<std::string> default_language_patterns();
// ResBlock convolutions plus every attention projection for the U-Net;
// attention projections for the DiT. Time-embedding projections are excluded.
std::vector<std::string> default_vision_patterns(DenoiserKind kind);

enum class AdapterKind { mlp, linear };

std::string to_string(AdapterKind kind);
AdapterKind parse_adapter_kind(std::string_view name);

struct AdapterSpec {
  std::int64_t d_in = 0;      // language embedding width
  std::int64_t d_hidden = 0;  // 0 means max(d_in, d_out)
  std::int64_t d_out = 0;     // vision cross-attention context width
  AdapterKind kind = AdapterKind::mlp;

  std::int64_t hidden() const { return d_hidden > 0 ? d_hidden : std::max(d_in, d_out); }
  std::int64_t parameter_count() const;
};

// h: fc2(gelu(fc1(c))) row-wise, or a single fc1 for the linear kind.
// All tensors are trainable.
class Adapter {
 public:
  Adapter() = default;
  Adapter(AdapterSpec spec, Rng& rng);

  Var forward(const Var& c) const;
  const AdapterSpec& spec() const { return spec_; }

  nn::Linear& fc1() { return fc1_; }
  nn::Linear& fc2() { return fc2_; }

  // Test hook: replace the nonlinearity with the identity.
  void set_identity_activation(bool on) { identity_ = on; }

  void collect(std::vector<nn::NamedVar>& out);

 private:
  AdapterSpec spec_;
  nn::Linear fc1_, fc2_;
  bool identity_ = false;
};

// Adapted text: rows h(c) with c's mask.
TextEncoding adapt(const TextEncoding& c, const Adapter& h);

struct InjectionSite {
  std::string name;  // layer name, e.g. "lm.blocks.0.attn.q"
  std::string component;  // "language" or "vision"
  bool conv = false;
  Shape weight_shape;
  int rank = 0;
  std::int64_t parameter_count = 0;  // closed form
};

// Attaches a LoRA delta to every linear/conv layer of `module` whose name
// matches one of the patterns. Each pattern must match at least one layer and
// no matched layer may already carry a delta; both failures are ConfigError.
std::vector<InjectionSite> inject_lora(nn::Module& module, const std::string& component, const LoRAConfig& cfg,
                                       Rng& rng);

// Named LoRA tensors ("<layer>.lora_a", "<layer>.lora_b") in visit order.
std::vector<nn::NamedVar> lora_parameters(nn::Module& module);

struct ParameterReport {
  std::int64_t language_base = 0;
  std::int64_t vision_base = 0;
  std::int64_t adapter = 0;
  std::int64_t language_lora = 0;
  std::int64_t vision_lora = 0;

  std::int64_t base_total() const { return language_base + vision_base; }
  std::int64_t trainable_total() const { return adapter + language_lora + vision_lora; }
  double trainable_fraction() const;
};

using Snapshot = std::vector<std::pair<std::string, Tensor>>;

struct FrozenReport {
  bool passed = true;
  double max_abs_diff = 0;
  std::vector<std::string> changed;  // names of tensors that are not bit-identical
  std::string worst;                 // tensor with the largest difference
};

// Bit-level comparison of two base-parameter snapshots. The snapshots must
// list the same names in the same order.
FrozenReport verify_frozen(const Snapshot& before, const Snapshot& after);

class BridgedModel {
 public:
  BridgedModel(std::unique_ptr<LanguageModel> language, std::unique_ptr<VisionModel> vision, LoRAConfig lora_language,
               LoRAConfig lora_vision, AdapterSpec adapter, std::uint64_t seed);

  LanguageModel& language() { return *language_; }
  const LanguageModel& language() const { return *language_; }
  VisionModel& vision() { return *vision_; }
  const VisionModel& vision() const { return *vision_; }
  Adapter& adapter() { return adapter_; }
  const Adapter& adapter() const { return adapter_; }

  const LoRAConfig& lora_language() const { return lora_language_; }
  const LoRAConfig& lora_vision() const { return lora_vision_; }

  TextEncoding encode(const std::vector<std::string>& prompts) const { return language_->encode(prompts); }
  TextEncoding encode(const TokenBatch& tokens) const { return language_->encode(tokens); }
  const TextEncoding& null_encoding() const { return language_->null_encoding(); }

  // eps prediction for x [N,C,H,W] given an un-adapted text encoding of batch N.
  Var predict(const Var& x, std::span<const int> t, const TextEncoding& text) const;
  // Same with an already adapted context.
  Var predict_adapted(const Var& x, std::span<const int> t, const TextEncoding& adapted) const;

  const std::vector<InjectionSite>& sites() const { return sites_; }

  // LoRA deltas (language, then vision) followed by the adapter tensors.
  std::vector<nn::NamedVar> trainable_parameters();
  Snapshot base_snapshot();
  ParameterReport count_parameters();

  // Must be called after an optimizer step so cached encodings are refreshed.
  void parameters_updated() { language_->parameters_updated(); }

 private:
  std::unique_ptr<LanguageModel> language_;
  std::unique_ptr<VisionModel> vision_;
  LoRAConfig lora_language_, lora_vision_;
  Adapter adapter_;
  std::vector<InjectionSite> sites_;
};

// Wires the two frozen backbones together. adapter.d_in / d_out of zero are
// filled from the models; explicit values must match them (ConfigError).
std::unique_ptr<BridgedModel> inject(std::unique_ptr<LanguageModel> language, std::unique_ptr<VisionModel> vision,
                                     const LoRAConfig& cfg_language, const LoRAConfig& cfg_vision,
                                     AdapterSpec adapter, std::uint64_t seed = 3);

// Guided DDIM sampling with the bridged denoiser. cond has one row per image;
// uncond has either the same batch or a single row that is shared.
Tensor sample(const BridgedModel& model, const TextEncoding& cond, const TextEncoding& uncond,
              const NoiseSchedule& sched, const SampleConfig& cfg);

// Plain-text report: per-component counts, trainable fraction and the
// injection-site table.
std::string format_parameter_report(const ParameterReport& report, const std::vector<InjectionSite>& sites);

}  // namespace lavi
