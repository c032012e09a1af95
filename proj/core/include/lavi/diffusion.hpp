#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "lavi/autograd.hpp"
#include "lavi/rng.hpp"
#include "lavi/tensor.hpp"

namespace lavi {

// Discrete noise schedule over timesteps 1..T. alpha_bar(0) is defined as 1
// so the last DDIM step can land on the clean image.
struct NoiseSchedule {
  int num_steps = 0;
  std::vector<double> betas;       // betas[t-1]
  std::vector<double> alphas;      // 1 - beta
  std::vector<double> alpha_bars;  // running product of alphas

  double alpha_bar(int t) const;

  // Builds a schedule whose cumulative products are exactly `alpha_bars`.
  static NoiseSchedule from_alpha_bars(std::vector<double> alpha_bars);
};

NoiseSchedule make_linear_schedule(int num_steps, double beta_start, double beta_end);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, for a single t.
Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

// Batched variant: x0 and eps are [N, ...], one timestep per item.
Tensor forward_noise(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& sched);

// Epsilon-prediction objective: mean squared error.
Var ddpm_loss(const Var& eps_pred, const Var& eps);

// One DDIM update from t to t_prev (< t). eta = 0 is deterministic; eta > 0
// draws the variance term from rng.
Tensor ddim_step(const Tensor& x_t, const Tensor& eps_pred, int t, int t_prev, const NoiseSchedule& sched, double eta,
                 Rng& rng);

// eps_u + s (eps_c - eps_u), evaluated as (1 - s) eps_u + s eps_c so that
// s = 0 and s = 1 return the endpoints exactly.
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s);

struct SampleConfig {
  int num_inference_steps = 50;
  double cfg_scale = 7.5;
  double eta = 0.0;
  std::uint64_t seed = 0;
  int resolution = 32;

  void validate(const NoiseSchedule& sched) const;
};

// Strictly decreasing subsequence of 1..T with uniform stride.
std::vector<int> inference_timesteps(int num_train_steps, int num_inference_steps);

// Predicts eps for a noisy batch at timestep t.
using EpsFn = std::function<Tensor(const Tensor& x_t, int t)>;

// DDIM chain from seeded Gaussian noise of `shape`; output clamped to [-1, 1].
Tensor ddim_sample(const EpsFn& eps_fn, const Shape& shape, const NoiseSchedule& sched, const SampleConfig& cfg);

// Same chain with classifier-free guidance between two predictors, each called
// once per step.
Tensor ddim_sample_guided(const EpsFn& cond, const EpsFn& uncond, const Shape& shape, const NoiseSchedule& sched,
                          const SampleConfig& cfg);

}  // namespace lavi
