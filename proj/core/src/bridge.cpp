#include "lavi/bridge.hpp"

#include <fnmatch.h>

#include <cstring>
#include <iomanip>
#include <sstream>

#include "lavi/error.hpp"

namespace lavi {

void LoRAConfig::validate() const {
  if (!enabled) return;
  if (rank < 1) throw ConfigError("lora: rank must be >= 1, got " + std::to_string(rank));
  if (alpha < 0) throw ConfigError("lora: alpha must be >= 0 (0 selects alpha = rank)");
  if (target_patterns.empty()) throw ConfigError("lora: target_patterns must not be empty");
}

std::vector<std::string> default_language_patterns() { return {"lm.*.attn.?"}; }

std::vector<std::string> default_vision_patterns(DenoiserKind kind) {
  if (kind == DenoiserKind::dit) return {"dit.*attn.?"};
  return {"unet.*.conv1", "unet.*.conv2", "unet.*.skip", "unet.*attn.?"};
}

std::string to_string(AdapterKind kind) { return kind == AdapterKind::mlp ? "mlp" : "linear"; }

AdapterKind parse_adapter_kind(std::string_view name) {
  if (name == "mlp") return AdapterKind::mlp;
  if (name == "linear") return AdapterKind::linear;
  throw ConfigError("unknown adapter kind '" + std::string(name) + "' (expected mlp or linear)");
}

std::int64_t AdapterSpec::parameter_count() const {
  if (kind == AdapterKind::linear) return d_in * d_out + d_out;
  const auto h = hidden();
  return d_in * h + h + h * d_out + d_out;
}

namespace {
void make_trainable(nn::Linear& l) {
  l.weight().set_requires_grad(true);
  if (l.bias().defined()) l.bias().set_requires_grad(true);
}
}  // namespace

Adapter::Adapter(AdapterSpec spec, Rng& rng) : spec_(spec) {
  if (spec_.d_in < 1 || spec_.d_out < 1) throw ConfigError("adapter: d_in and d_out must be positive");
  if (spec_.kind == AdapterKind::linear) {
    fc1_ = nn::Linear(spec_.d_in, spec_.d_out, true, rng);
    make_trainable(fc1_);
  } else {
    fc1_ = nn::Linear(spec_.d_in, spec_.hidden(), true, rng);
    fc2_ = nn::Linear(spec_.hidden(), spec_.d_out, true, rng);
    make_trainable(fc1_);
    make_trainable(fc2_);
  }
}

Var Adapter::forward(const Var& c) const {
  LAVI_EXPECT(c.value().rank() >= 1 && c.dim(-1) == spec_.d_in,
              "adapter: input width " + std::to_string(c.dim(-1)) + " does not match d_in " +
                  std::to_string(spec_.d_in));
  if (spec_.kind == AdapterKind::linear) return fc1_.forward(c);
  Var h = fc1_.forward(c);
  if (!identity_) h = ops::gelu(h);
  return fc2_.forward(h);
}

void Adapter::collect(std::vector<nn::NamedVar>& out) {
  out.emplace_back("adapter.fc1.weight", fc1_.weight());
  out.emplace_back("adapter.fc1.bias", fc1_.bias());
  if (spec_.kind == AdapterKind::mlp) {
    out.emplace_back("adapter.fc2.weight", fc2_.weight());
    out.emplace_back("adapter.fc2.bias", fc2_.bias());
  }
}

TextEncoding adapt(const TextEncoding& c, const Adapter& h) { return TextEncoding{h.forward(c.embeddings), c.mask}; }

namespace {

bool matches(const std::string& pattern, const std::string& name) {
  return fnmatch(pattern.c_str(), name.c_str(), 0) == 0;
}

// Collects injectable layers in visit order.
class LayerCollector : public nn::Visitor {
 public:
  struct Entry {
    std::string name;
    nn::Linear* linear = nullptr;
    nn::Conv2d* conv = nullptr;
  };

  void linear(const std::string& name, nn::Linear& layer) override { layers.push_back({name, &layer, nullptr}); }
  void conv(const std::string& name, nn::Conv2d& layer) override { layers.push_back({name, nullptr, &layer}); }
  void parameter(const std::string&, Var&) override {}

  std::vector<Entry> layers;
};

}  // namespace

std::vector<InjectionSite> inject_lora(nn::Module& module, const std::string& component, const LoRAConfig& cfg,
                                       Rng& rng) {
  cfg.validate();
  if (!cfg.enabled) return {};
  LayerCollector collector;
  module.visit(collector);

  for (const auto& pattern : cfg.target_patterns) {
    bool any = false;
    for (const auto& e : collector.layers) any = any || matches(pattern, e.name);
    if (!any) throw ConfigError("lora: pattern '" + pattern + "' matches no " + component + " layer");
  }
  std::vector<const LayerCollector::Entry*> selected;
  for (const auto& e : collector.layers) {
    bool hit = false;
    for (const auto& pattern : cfg.target_patterns) hit = hit || matches(pattern, e.name);
    if (!hit) continue;
    const bool has = e.linear ? e.linear->has_lora() : e.conv->has_lora();
    if (has) throw ConfigError("lora: layer '" + e.name + "' already carries a delta; inject only once");
    selected.push_back(&e);
  }

  const int r = cfg.rank;
  const double alpha = cfg.effective_alpha();
  std::vector<InjectionSite> sites;
  for (const auto* e : selected) {
    InjectionSite s;
    s.name = e->name;
    s.component = component;
    s.rank = r;
    if (e->linear) {
      auto& l = *e->linear;
      s.weight_shape = l.weight().shape();
      s.parameter_count = r * (l.in_features() + l.out_features());
      l.attach_lora(LoraDelta::for_linear(l.in_features(), l.out_features(), r, alpha, rng));
    } else {
      auto& c = *e->conv;
      s.conv = true;
      s.weight_shape = c.weight().shape();
      const std::int64_t k = c.kernel();
      s.parameter_count = r * (c.in_channels() * k * k + c.out_channels());
      c.attach_lora(LoraDelta::for_conv(c.in_channels(), c.out_channels(), c.kernel(), r, alpha, rng));
    }
    sites.push_back(std::move(s));
  }
  return sites;
}

std::vector<nn::NamedVar> lora_parameters(nn::Module& module) {
  LayerCollector collector;
  module.visit(collector);
  std::vector<nn::NamedVar> out;
  for (const auto& e : collector.layers) {
    LoraDelta* d = e.linear ? e.linear->lora() : e.conv->lora();
    if (!d) continue;
    out.emplace_back(e.name + ".lora_a", d->a);
    out.emplace_back(e.name + ".lora_b", d->b);
  }
  return out;
}

double ParameterReport::trainable_fraction() const {
  const auto total = base_total() + trainable_total();
  return total == 0 ? 0.0 : static_cast<double>(trainable_total()) / static_cast<double>(total);
}

FrozenReport verify_frozen(const Snapshot& before, const Snapshot& after) {
  LAVI_EXPECT(before.size() == after.size(), "verify_frozen: snapshots hold " + std::to_string(before.size()) +
                                                 " and " + std::to_string(after.size()) + " tensors");
  FrozenReport r;
  for (std::size_t i = 0; i < before.size(); ++i) {
    const auto& [name_a, a] = before[i];
    const auto& [name_b, b] = after[i];
    LAVI_EXPECT(name_a == name_b, "verify_frozen: snapshot key mismatch '" + name_a + "' vs '" + name_b + "'");
    LAVI_EXPECT(a.shape() == b.shape(), "verify_frozen: shape of '" + name_a + "' changed");
    if (a.identical(b)) continue;
    r.passed = false;
    r.changed.push_back(name_a);
    const double d = max_abs_diff(a, b);
    // A NaN difference still counts as the worst offender.
    if (r.worst.empty() || d > r.max_abs_diff || std::isnan(d)) {
      r.max_abs_diff = d;
      r.worst = name_a;
    }
  }
  return r;
}

BridgedModel::BridgedModel(std::unique_ptr<LanguageModel> language, std::unique_ptr<VisionModel> vision,
                           LoRAConfig lora_language, LoRAConfig lora_vision, AdapterSpec adapter, std::uint64_t seed)
    : language_(std::move(language)),
      vision_(std::move(vision)),
      lora_language_(std::move(lora_language)),
      lora_vision_(std::move(lora_vision)) {
  LAVI_EXPECT(language_ && vision_, "bridge: both backbones are required");
  const auto d_l = language_->config().embed_dim;
  const auto d_v = vision_->config().cross_dim;
  if (adapter.d_in == 0) adapter.d_in = d_l;
  if (adapter.d_out == 0) adapter.d_out = d_v;
  if (adapter.d_in != d_l) {
    throw ConfigError("adapter: d_in " + std::to_string(adapter.d_in) + " must equal the language width " +
                      std::to_string(d_l));
  }
  if (adapter.d_out != d_v) {
    throw ConfigError("adapter: d_out " + std::to_string(adapter.d_out) + " must equal the vision cross_dim " +
                      std::to_string(d_v));
  }
  if (adapter.d_hidden < 0) throw ConfigError("adapter: d_hidden must be >= 0");

  Rng lang_rng = Rng::derive(seed, 1);
  Rng vis_rng = Rng::derive(seed, 2);
  Rng adapter_rng = Rng::derive(seed, 3);
  sites_ = inject_lora(*language_, "language", lora_language_, lang_rng);
  auto vsites = inject_lora(*vision_, "vision", lora_vision_, vis_rng);
  sites_.insert(sites_.end(), vsites.begin(), vsites.end());
  adapter_ = Adapter(adapter, adapter_rng);
  language_->parameters_updated();
}

Var BridgedModel::predict_adapted(const Var& x, std::span<const int> t, const TextEncoding& adapted) const {
  return vision_->forward(x, t, adapted.embeddings, adapted.mask);
}

Var BridgedModel::predict(const Var& x, std::span<const int> t, const TextEncoding& text) const {
  return predict_adapted(x, t, adapt(text, adapter_));
}

std::vector<nn::NamedVar> BridgedModel::trainable_parameters() {
  auto out = lora_parameters(*language_);
  auto v = lora_parameters(*vision_);
  out.insert(out.end(), v.begin(), v.end());
  adapter_.collect(out);
  return out;
}

Snapshot BridgedModel::base_snapshot() {
  auto out = nn::snapshot(*language_);
  auto v = nn::snapshot(*vision_);
  out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  return out;
}

ParameterReport BridgedModel::count_parameters() {
  ParameterReport r;
  r.language_base = nn::count_elements(nn::base_parameters(*language_));
  r.vision_base = nn::count_elements(nn::base_parameters(*vision_));
  std::vector<nn::NamedVar> a;
  adapter_.collect(a);
  r.adapter = nn::count_elements(a);
  r.language_lora = nn::count_elements(lora_parameters(*language_));
  r.vision_lora = nn::count_elements(lora_parameters(*vision_));
  return r;
}

std::unique_ptr<BridgedModel> inject(std::unique_ptr<LanguageModel> language, std::unique_ptr<VisionModel> vision,
                                     const LoRAConfig& cfg_language, const LoRAConfig& cfg_vision,
                                     AdapterSpec adapter, std::uint64_t seed) {
  return std::make_unique<BridgedModel>(std::move(language), std::move(vision), cfg_language, cfg_vision, adapter,
                                        seed);
}

namespace {

TextEncoding repeat_rows(const TextEncoding& e, std::int64_t batch) {
  if (e.batch() == batch) return e;
  LAVI_EXPECT(e.batch() == 1, "sample: unconditional encoding batch must be 1 or match the conditional batch");
  const auto& v = e.embeddings.value();
  Tensor out({batch, v.dim(1), v.dim(2)});
  ops::Mask mask;
  for (std::int64_t b = 0; b < batch; ++b) {
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + b * v.numel());
    mask.insert(mask.end(), e.mask.begin(), e.mask.end());
  }
  return TextEncoding{Var::constant(std::move(out)), std::move(mask)};
}

}  // namespace

Tensor sample(const BridgedModel& model, const TextEncoding& cond, const TextEncoding& uncond,
              const NoiseSchedule& sched, const SampleConfig& cfg) {
  NoGradGuard no_grad;
  const auto& vc = model.vision().config();
  LAVI_EXPECT(cfg.resolution == vc.resolution, "sample: resolution " + std::to_string(cfg.resolution) +
                                                   " differs from the model's " + std::to_string(vc.resolution));
  const std::int64_t n = cond.batch();
  const TextEncoding c = adapt(cond, model.adapter());
  const TextEncoding u = adapt(repeat_rows(uncond, n), model.adapter());
  auto eps_with = [&](const TextEncoding& ctx) {
    return [&model, &ctx, n](const Tensor& x, int t) {
      const std::vector<int> ts(static_cast<std::size_t>(n), t);
      return model.predict_adapted(Var::constant(x), ts, ctx).value();
    };
  };
  return ddim_sample_guided(eps_with(c), eps_with(u), {n, vc.in_channels, vc.resolution, vc.resolution}, sched, cfg);
}

std::string format_parameter_report(const ParameterReport& r, const std::vector<InjectionSite>& sites) {
  std::ostringstream os;
  os << "language_base " << r.language_base << '\n'
     << "vision_base " << r.vision_base << '\n'
     << "adapter " << r.adapter << '\n'
     << "language_lora " << r.language_lora << '\n'
     << "vision_lora " << r.vision_lora << '\n'
     << "base_total " << r.base_total() << '\n'
     << "trainable_total " << r.trainable_total() << '\n'
     << "trainable_fraction " << std::fixed << std::setprecision(6) << r.trainable_fraction() << '\n'
     << "sites " << sites.size() << '\n';
  for (const auto& s : sites) {
    os << s.name << " -> (" << shape_str(s.weight_shape) << ", r=" << s.rank << ", " << s.parameter_count << ")\n";
  }
  return os.str();
}

}  // namespace lavi
