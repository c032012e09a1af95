#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "lavi/bridge.hpp"
#include "lavi/train.hpp"

namespace lavi::cli {

// Every field has a default; see configs/default.ini for the documented
// layout. Sections: model, bridge, schedule, train, sample, eval, dataset,
// output.
struct RunConfig {
  struct Model {
    std::string language = "lm-small";
    ArchKind language_arch = ArchKind::encoder_only;
    std::string vision = "unet-small";
    std::uint64_t language_seed = 1;
    std::uint64_t vision_seed = 2;
  } model;

  struct Bridge {
    int rank = 4;
    double alpha = 0;
    bool language_lora = true;
    bool vision_lora = true;
    std::vector<std::string> language_patterns;  // empty: built-in defaults
    std::vector<std::string> vision_patterns;
    AdapterKind adapter = AdapterKind::mlp;
    std::int64_t adapter_hidden = 0;
    std::uint64_t seed = 3;
  } bridge;

  struct Schedule {
    int steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
  } schedule;

  TrainConfig train;
  int snapshot_samples = 4;  // images in each snapshot grid

  struct Sample {
    int steps = 50;
    double cfg_scale = 7.5;
    double eta = 0;
    std::uint64_t seed = 0;
  } sample;

  struct Eval {
    double frechet_eps = 1e-6;
    int reference_count = 256;
    std::uint64_t reference_seed = 1;
  } eval;

  struct Dataset {
    std::uint64_t seed = 0;
    int count = 100;
    int resolution = 32;
  } dataset;

  struct Output {
    std::string dir = "runs/default";
  } output;

  // Cross-field checks; throws ConfigError.
  void validate() const;
};

// INI text to config. Unknown sections or keys, malformed values and
// duplicate keys are ConfigError naming the offending key.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);

// Sets one field from its string form; `section` and `key` as in the file.
void set_field(RunConfig& cfg, const std::string& section, const std::string& key, const std::string& value);

// Applies LAVI_<SECTION>_<KEY>=value overrides, e.g. LAVI_TRAIN_STEPS=200.
// Variables naming a known section but an unknown key are ConfigError; other
// LAVI_ variables are ignored.
using EnvLookup = std::function<std::vector<std::pair<std::string, std::string>>()>;
void apply_env_overrides(RunConfig& cfg, const EnvLookup& env);
std::vector<std::pair<std::string, std::string>> process_environment();

// Canonical INI with every key; parse_config(to_ini(c)) reproduces c.
// Checkpoints store the text without the [output] section so a run can be
// moved or resumed elsewhere without changing its bytes.
std::string to_ini(const RunConfig& cfg, bool with_output = true);

NoiseSchedule build_schedule(const RunConfig& cfg);
std::unique_ptr<BridgedModel> build_model(const RunConfig& cfg);
SampleConfig sample_config(const RunConfig& cfg);

}  // namespace lavi::cli
