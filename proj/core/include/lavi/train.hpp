#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lavi/bridge.hpp"
#include "lavi/diffusion.hpp"
#include "lavi/scene.hpp"

namespace lavi {

struct TrainConfig {
  int steps = 20000;
  int batch_size = 32;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double p_uncond = 0.1;  // probability of training an item on the empty prompt
  std::uint64_t seed = 0;
  int snapshot_every = 1000;
  int resolution = 32;

  void validate() const;
};

// One rendered, captioned batch.
struct Batch {
  Tensor images;  // [B, 3, res, res]
  std::vector<std::string> captions;
  std::vector<SceneSpec> specs;
};

// Items first .. first+count-1 of the synthetic stream for `seed`. Item i is
// drawn from its own derived stream, so a batch never depends on the items
// before it.
Batch make_batch(std::uint64_t seed, std::int64_t first, int count, int resolution);

// Decoupled weight decay Adam over a fixed, ordered parameter list.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const std::vector<nn::NamedVar>& params, const TrainConfig& cfg);

  // Applies one update from the parameters' accumulated gradients.
  // Parameters without a gradient are treated as having a zero gradient.
  void step(std::vector<nn::NamedVar>& params);

  std::int64_t steps() const { return t_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void restore(std::int64_t t, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  double lr_ = 1e-4, wd_ = 0.01, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct StepResult {
  double loss = 0;
  int uncond_items = 0;
};

// Per-item randomness of one training step: a uniform timestep in 1..T and
// whether the caption is replaced by the empty prompt.
struct ItemDraws {
  std::vector<int> timesteps;
  std::vector<bool> uncond;
};
ItemDraws draw_items(Rng& rng, std::int64_t count, int num_steps, double p_uncond);

// Noises the batch at per-item uniform timesteps, drops captions with
// probability p_uncond, and takes one optimizer step on the bridge's trainable
// tensors. Throws NumericalError on a non-finite loss.
StepResult train_step(BridgedModel& model, const Batch& batch, const NoiseSchedule& sched, AdamW& opt, Rng& rng,
                      double p_uncond);

// Everything needed to continue a run; base weights are rebuilt from the
// seeds recorded in config_text.
struct CheckpointRecord {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_text;
  std::int64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;  // trainable only
  std::int64_t adam_steps = 0;
  std::vector<Tensor> adam_m, adam_v;
  std::string rng_state;
};

// Layout (all integers little-endian):
//   "LAVICKPT" | u32 version | u32 crc32(config_text) | u64 payload size | u32 crc32(payload) | payload
// payload:
//   str config_text | i64 step
//   u32 n | n x (str name | tensor)
//   i64 adam steps | u32 n | n x (tensor m | tensor v)
//   str rng_state
// str = u64 length + bytes; tensor = u8 dtype (1 = f64) | u32 rank | rank x i64 dim | f64 data.
void save_checkpoint(const CheckpointRecord& record, const std::string& path);
CheckpointRecord load_checkpoint(const std::string& path);
std::string encode_checkpoint(const CheckpointRecord& record);
CheckpointRecord decode_checkpoint(const std::string& bytes);

// Copies the checkpoint's trainable tensors into the model. Names and shapes
// must match the model's trainable parameters (FormatError otherwise).
void load_trainable(BridgedModel& model, const CheckpointRecord& record);

class Trainer {
 public:
  Trainer(BridgedModel& model, NoiseSchedule sched, TrainConfig cfg);

  StepResult step();
  std::int64_t current_step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }

  CheckpointRecord checkpoint(const std::string& config_text) const;
  // Restores trainable tensors, optimizer and RNG; names and shapes must match.
  void restore(const CheckpointRecord& record);

  std::int64_t uncond_items() const { return uncond_items_; }
  std::int64_t total_items() const { return total_items_; }

 private:
  BridgedModel& model_;
  NoiseSchedule sched_;
  TrainConfig cfg_;
  std::vector<nn::NamedVar> params_;
  AdamW opt_;
  Rng rng_;
  std::int64_t step_ = 0;
  std::int64_t uncond_items_ = 0;
  std::int64_t total_items_ = 0;
};

}  // namespace lavi
