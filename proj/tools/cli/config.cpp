#include "cli/config.hpp"

#include <fmt/format.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <sstream>

#include "lavi/error.hpp"

extern char** environ;

namespace lavi::cli {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& where, const std::string& what, const std::string& value) {
  throw ConfigError(fmt::format("config: {}: expected {}, got '{}'", where, what, value));
}

template <typename T>
T parse_integer(const std::string& where, const std::string& value) {
  const std::string v = trim(value);
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(where, "an integer", value);
  return out;
}

double parse_real(const std::string& where, const std::string& value) {
  const std::string v = trim(value);
  double out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(where, "a number", value);
  return out;
}

bool parse_bool(const std::string& where, const std::string& value) {
  const std::string v = trim(value);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(where, "true or false", value);
}

std::vector<std::string> parse_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? ", " : "") + items[i];
  return out;
}

struct Field {
  const char* section;
  const char* key;
  std::function<void(RunConfig&, const std::string& where, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define LAVI_INT_FIELD(sec, key, expr, type)                                                                  \
  Field {                                                                                                     \
    sec, #key, [](RunConfig& c, const std::string& w, const std::string& v) { expr = parse_integer<type>(w, v); }, \
        [](const RunConfig& c) { return fmt::format("{}", expr); }                                            \
  }
#define LAVI_REAL_FIELD(sec, key, expr)                                                              \
  Field {                                                                                            \
    sec, #key, [](RunConfig& c, const std::string& w, const std::string& v) { expr = parse_real(w, v); }, \
        [](const RunConfig& c) { return fmt::format("{}", expr); }                                   \
  }
#define LAVI_BOOL_FIELD(sec, key, expr)                                                              \
  Field {                                                                                            \
    sec, #key, [](RunConfig& c, const std::string& w, const std::string& v) { expr = parse_bool(w, v); }, \
        [](const RunConfig& c) { return std::string(expr ? "true" : "false"); }                      \
  }
#define LAVI_STRING_FIELD(sec, key, expr)                                                       \
  Field {                                                                                       \
    sec, #key, [](RunConfig& c, const std::string&, const std::string& v) { expr = trim(v); }, \
        [](const RunConfig& c) { return expr; }                                                 \
  }
#define LAVI_LIST_FIELD(sec, key, expr)                                                                \
  Field {                                                                                              \
    sec, #key, [](RunConfig& c, const std::string&, const std::string& v) { expr = parse_list(v); }, \
        [](const RunConfig& c) { return join(expr); }                                                  \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      LAVI_STRING_FIELD("model", language, c.model.language),
      Field{"model", "language_arch",
            [](RunConfig& c, const std::string& w, const std::string& v) {
              try {
                c.model.language_arch = parse_arch_kind(trim(v));
              } catch (const ConfigError&) {
                bad_value(w, "encoder_only, encoder_decoder or decoder_only", v);
              }
            },
            [](const RunConfig& c) { return to_string(c.model.language_arch); }},
      LAVI_STRING_FIELD("model", vision, c.model.vision),
      LAVI_INT_FIELD("model", language_seed, c.model.language_seed, std::uint64_t),
      LAVI_INT_FIELD("model", vision_seed, c.model.vision_seed, std::uint64_t),

      LAVI_INT_FIELD("bridge", rank, c.bridge.rank, int),
      LAVI_REAL_FIELD("bridge", alpha, c.bridge.alpha),
      LAVI_BOOL_FIELD("bridge", language_lora, c.bridge.language_lora),
      LAVI_BOOL_FIELD("bridge", vision_lora, c.bridge.vision_lora),
      LAVI_LIST_FIELD("bridge", language_patterns, c.bridge.language_patterns),
      LAVI_LIST_FIELD("bridge", vision_patterns, c.bridge.vision_patterns),
      Field{"bridge", "adapter",
            [](RunConfig& c, const std::string& w, const std::string& v) {
              try {
                c.bridge.adapter = parse_adapter_kind(trim(v));
              } catch (const ConfigError&) {
                bad_value(w, "mlp or linear", v);
              }
            },
            [](const RunConfig& c) { return to_string(c.bridge.adapter); }},
      LAVI_INT_FIELD("bridge", adapter_hidden, c.bridge.adapter_hidden, std::int64_t),
      LAVI_INT_FIELD("bridge", seed, c.bridge.seed, std::uint64_t),

      LAVI_INT_FIELD("schedule", steps, c.schedule.steps, int),
      LAVI_REAL_FIELD("schedule", beta_start, c.schedule.beta_start),
      LAVI_REAL_FIELD("schedule", beta_end, c.schedule.beta_end),

      LAVI_INT_FIELD("train", steps, c.train.steps, int),
      LAVI_INT_FIELD("train", batch_size, c.train.batch_size, int),
      LAVI_REAL_FIELD("train", learning_rate, c.train.learning_rate),
      LAVI_REAL_FIELD("train", weight_decay, c.train.weight_decay),
      LAVI_REAL_FIELD("train", beta1, c.train.beta1),
      LAVI_REAL_FIELD("train", beta2, c.train.beta2),
      LAVI_REAL_FIELD("train", adam_eps, c.train.adam_eps),
      LAVI_REAL_FIELD("train", p_uncond, c.train.p_uncond),
      LAVI_INT_FIELD("train", seed, c.train.seed, std::uint64_t),
      LAVI_INT_FIELD("train", snapshot_every, c.train.snapshot_every, int),
      LAVI_INT_FIELD("train", snapshot_samples, c.snapshot_samples, int),
      LAVI_INT_FIELD("train", resolution, c.train.resolution, int),

      LAVI_INT_FIELD("sample", steps, c.sample.steps, int),
      LAVI_REAL_FIELD("sample", cfg_scale, c.sample.cfg_scale),
      LAVI_REAL_FIELD("sample", eta, c.sample.eta),
      LAVI_INT_FIELD("sample", seed, c.sample.seed, std::uint64_t),

      LAVI_REAL_FIELD("eval", frechet_eps, c.eval.frechet_eps),
      LAVI_INT_FIELD("eval", reference_count, c.eval.reference_count, int),
      LAVI_INT_FIELD("eval", reference_seed, c.eval.reference_seed, std::uint64_t),

      LAVI_INT_FIELD("dataset", seed, c.dataset.seed, std::uint64_t),
      LAVI_INT_FIELD("dataset", count, c.dataset.count, int),
      LAVI_INT_FIELD("dataset", resolution, c.dataset.resolution, int),

      LAVI_STRING_FIELD("output", dir, c.output.dir),
  };
  return table;
}

#undef LAVI_INT_FIELD
#undef LAVI_REAL_FIELD
#undef LAVI_BOOL_FIELD
#undef LAVI_STRING_FIELD
#undef LAVI_LIST_FIELD

bool known_section(const std::string& section) {
  for (const auto& f : fields())
    if (section == f.section) return true;
  return false;
}

}  // namespace

void set_field(RunConfig& cfg, const std::string& section, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (section == f.section && key == f.key) {
      f.set(cfg, "[" + section + "] " + key, value);
      return;
    }
  }
  if (!known_section(section)) throw ConfigError(fmt::format("config: unknown section [{}]", section));
  throw ConfigError(fmt::format("config: unknown key '{}' in section [{}]", key, section));
}

void RunConfig::validate() const {
  text_encoder_preset(model.language, model.language_arch).validate();
  denoiser_preset(model.vision).validate();
  if (bridge.rank < 1) throw ConfigError("config: [bridge] rank must be >= 1");
  if (bridge.alpha < 0) throw ConfigError("config: [bridge] alpha must be >= 0");
  if (bridge.adapter_hidden < 0) throw ConfigError("config: [bridge] adapter_hidden must be >= 0");
  if (schedule.steps < 1) throw ConfigError("config: [schedule] steps must be >= 1");
  if (!(schedule.beta_start > 0 && schedule.beta_start <= schedule.beta_end && schedule.beta_end < 1)) {
    throw ConfigError("config: [schedule] needs 0 < beta_start <= beta_end < 1");
  }
  train.validate();
  if (snapshot_samples < 0) throw ConfigError("config: [train] snapshot_samples must be >= 0");
  if (sample.steps < 1 || sample.steps > schedule.steps) {
    throw ConfigError("config: [sample] steps must be in [1, schedule steps]");
  }
  if (!(sample.eta >= 0)) throw ConfigError("config: [sample] eta must be >= 0");
  if (!(eval.frechet_eps > 0)) throw ConfigError("config: [eval] frechet_eps must be > 0");
  if (eval.reference_count < 2) throw ConfigError("config: [eval] reference_count must be >= 2");
  if (dataset.count < 0) throw ConfigError("config: [dataset] count must be >= 0");
  if (dataset.resolution < 1) throw ConfigError("config: [dataset] resolution must be positive");
  if (output.dir.empty()) throw ConfigError("config: [output] dir must not be empty");
}

RunConfig parse_config(std::string_view text) {
  boost::property_tree::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(fmt::format("config: line {}: {}", e.line(), e.message()));
  }
  RunConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError(fmt::format("config: key '{}' outside any section", section));
    }
    if (!known_section(section)) throw ConfigError(fmt::format("config: unknown section [{}]", section));
    for (const auto& [key, value] : body) set_field(cfg, section, key, value.data());
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::vector<std::pair<std::string, std::string>> process_environment() {
  std::vector<std::pair<std::string, std::string>> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    out.emplace_back(entry.substr(0, eq), entry.substr(eq + 1));
  }
  return out;
}

void apply_env_overrides(RunConfig& cfg, const EnvLookup& env) {
  for (const auto& [name, value] : env()) {
    if (name.rfind("LAVI_", 0) != 0) continue;
    const std::string rest = name.substr(5);
    const auto us = rest.find('_');
    if (us == std::string::npos) continue;
    std::string section = rest.substr(0, us);
    std::string key = rest.substr(us + 1);
    for (auto& ch : section) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    for (auto& ch : key) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (!known_section(section)) continue;
    try {
      set_field(cfg, section, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("environment variable {}: {}", name, e.what()));
    }
  }
}

std::string to_ini(const RunConfig& cfg, bool with_output) {
  std::string out;
  std::string current;
  for (const auto& f : fields()) {
    if (!with_output && std::string_view(f.section) == "output") continue;
    if (current != f.section) {
      if (!current.empty()) out += '\n';
      current = f.section;
      out += fmt::format("[{}]\n", current);
    }
    out += fmt::format("{} = {}\n", f.key, f.get(cfg));
  }
  return out;
}

NoiseSchedule build_schedule(const RunConfig& cfg) {
  return make_linear_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end);
}

std::unique_ptr<BridgedModel> build_model(const RunConfig& cfg) {
  auto lc = text_encoder_preset(cfg.model.language, cfg.model.language_arch);
  lc.seed = cfg.model.language_seed;
  auto vc = denoiser_preset(cfg.model.vision);
  vc.resolution = cfg.train.resolution;
  vc.seed = cfg.model.vision_seed;

  LoRAConfig ll;
  ll.enabled = cfg.bridge.language_lora;
  ll.rank = cfg.bridge.rank;
  ll.alpha = cfg.bridge.alpha;
  ll.target_patterns = cfg.bridge.language_patterns.empty() ? default_language_patterns() : cfg.bridge.language_patterns;
  LoRAConfig lv = ll;
  lv.enabled = cfg.bridge.vision_lora;
  lv.target_patterns = cfg.bridge.vision_patterns.empty() ? default_vision_patterns(vc.kind) : cfg.bridge.vision_patterns;

  AdapterSpec spec;
  spec.kind = cfg.bridge.adapter;
  spec.d_hidden = cfg.bridge.adapter_hidden;
  return inject(std::make_unique<LanguageModel>(lc, Vocabulary::builtin()), make_vision_model(vc), ll, lv, spec,
                cfg.bridge.seed);
}

SampleConfig sample_config(const RunConfig& cfg) {
  SampleConfig s;
  s.num_inference_steps = cfg.sample.steps;
  s.cfg_scale = cfg.sample.cfg_scale;
  s.eta = cfg.sample.eta;
  s.seed = cfg.sample.seed;
  s.resolution = cfg.train.resolution;
  return s;
}

}  // namespace lavi::cli
