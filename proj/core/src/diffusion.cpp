#include "lavi/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "lavi/error.hpp"
#include "lavi/ops.hpp"

namespace lavi {

double NoiseSchedule::alpha_bar(int t) const {
  LAVI_EXPECT(t >= 0 && t <= num_steps, "timestep " + std::to_string(t) + " outside 0.." + std::to_string(num_steps));
  return t == 0 ? 1.0 : alpha_bars[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule NoiseSchedule::from_alpha_bars(std::vector<double> alpha_bars) {
  LAVI_EXPECT(!alpha_bars.empty(), "empty alpha_bar table");
  NoiseSchedule s;
  s.num_steps = static_cast<int>(alpha_bars.size());
  double prev = 1.0;
  for (double ab : alpha_bars) {
    LAVI_EXPECT(ab >= 0.0 && ab <= 1.0, "alpha_bar outside [0, 1]");
    const double a = prev > 0 ? ab / prev : 0.0;
    s.alphas.push_back(a);
    s.betas.push_back(1.0 - a);
    prev = ab;
  }
  s.alpha_bars = std::move(alpha_bars);
  return s;
}

NoiseSchedule make_linear_schedule(int num_steps, double beta_start, double beta_end) {
  if (num_steps < 1) throw ConfigError("noise schedule: num_steps must be >= 1, got " + std::to_string(num_steps));
  if (!(beta_start >= 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    std::ostringstream os;
    os << "noise schedule: require 0 <= beta_start <= beta_end < 1, got beta_start=" << beta_start
       << " beta_end=" << beta_end;
    throw ConfigError(os.str());
  }
  NoiseSchedule s;
  s.num_steps = num_steps;
  s.betas.resize(static_cast<std::size_t>(num_steps));
  s.alphas.resize(s.betas.size());
  s.alpha_bars.resize(s.betas.size());
  double running = 1.0;
  for (int i = 0; i < num_steps; ++i) {
    const double frac = num_steps == 1 ? 0.0 : static_cast<double>(i) / (num_steps - 1);
    const double beta = beta_start + (beta_end - beta_start) * frac;
    s.betas[static_cast<std::size_t>(i)] = beta;
    s.alphas[static_cast<std::size_t>(i)] = 1.0 - beta;
    running *= 1.0 - beta;
    s.alpha_bars[static_cast<std::size_t>(i)] = running;
  }
  return s;
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  LAVI_EXPECT(x0.shape() == eps.shape(),
              "forward_noise: x0 " + shape_str(x0.shape()) + " and eps " + shape_str(eps.shape()) + " differ");
  LAVI_EXPECT(t >= 1 && t <= sched.num_steps, "forward_noise: timestep out of range");
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(x0.shape());
  for (std::int64_t i = 0; i < x0.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor forward_noise(const Tensor& x0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& sched) {
  LAVI_EXPECT(x0.shape() == eps.shape(),
              "forward_noise: x0 " + shape_str(x0.shape()) + " and eps " + shape_str(eps.shape()) + " differ");
  LAVI_EXPECT(x0.rank() >= 1 && static_cast<std::int64_t>(t.size()) == x0.dim(0),
              "forward_noise: need one timestep per batch item");
  const std::int64_t per = x0.numel() / std::max<std::int64_t>(x0.dim(0), 1);
  Tensor out(x0.shape());
  for (std::size_t n = 0; n < t.size(); ++n) {
    LAVI_EXPECT(t[n] >= 1 && t[n] <= sched.num_steps, "forward_noise: timestep out of range");
    const double ab = sched.alpha_bar(t[n]);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    const std::int64_t off = static_cast<std::int64_t>(n) * per;
    for (std::int64_t i = off; i < off + per; ++i) out[i] = a * x0[i] + b * eps[i];
  }
  return out;
}

Var ddpm_loss(const Var& eps_pred, const Var& eps) { return ops::mse(eps_pred, eps); }

Tensor ddim_step(const Tensor& x_t, const Tensor& eps_pred, int t, int t_prev, const NoiseSchedule& sched, double eta,
                 Rng& rng) {
  LAVI_EXPECT(x_t.shape() == eps_pred.shape(), "ddim_step: x_t and eps_pred shapes differ");
  LAVI_EXPECT(t_prev < t, "ddim_step: t_prev (" + std::to_string(t_prev) + ") must be < t (" + std::to_string(t) + ")");
  LAVI_EXPECT(t_prev >= 0, "ddim_step: negative t_prev");
  LAVI_EXPECT(eta >= 0.0 && eta <= 1.0, "ddim_step: eta outside [0, 1]");
  const double ab_t = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t_prev);
  const double sqrt_ab_t = std::sqrt(ab_t);
  const double sqrt_1m_ab_t = std::sqrt(1.0 - ab_t);
  LAVI_EXPECT(sqrt_ab_t > 0.0, "ddim_step: alpha_bar(t) is zero; the clean-image estimate is undefined");

  double sigma = 0.0;
  if (eta > 0.0 && ab_t < 1.0) {
    sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(std::max(0.0, 1.0 - ab_t / ab_prev));
  }
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  const double sqrt_ab_prev = std::sqrt(ab_prev);

  Tensor out(x_t.shape());
  for (std::int64_t i = 0; i < x_t.numel(); ++i) {
    const double x0_hat = (x_t[i] - sqrt_1m_ab_t * eps_pred[i]) / sqrt_ab_t;
    out[i] = sqrt_ab_prev * x0_hat + dir * eps_pred[i];
  }
  if (sigma > 0.0) {
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += sigma * rng.normal();
  }
  return out;
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, double s) {
  LAVI_EXPECT(eps_uncond.shape() == eps_cond.shape(), "cfg_combine: shape mismatch " + shape_str(eps_uncond.shape()) +
                                                          " vs " + shape_str(eps_cond.shape()));
  Tensor out(eps_cond.shape());
  const double w_u = 1.0 - s;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = w_u * eps_uncond[i] + s * eps_cond[i];
  return out;
}

void SampleConfig::validate(const NoiseSchedule& sched) const {
  if (num_inference_steps < 1 || num_inference_steps > sched.num_steps) {
    throw ConfigError("sampling: num_inference_steps must be in 1.." + std::to_string(sched.num_steps));
  }
  if (!(cfg_scale >= 0.0)) throw ConfigError("sampling: cfg_scale must be >= 0");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("sampling: eta must be in [0, 1]");
  if (resolution < 1) throw ConfigError("sampling: resolution must be positive");
}

std::vector<int> inference_timesteps(int num_train_steps, int num_inference_steps) {
  LAVI_EXPECT(num_inference_steps >= 1 && num_inference_steps <= num_train_steps,
              "inference step count must be in 1..T");
  std::vector<int> ts;
  ts.reserve(static_cast<std::size_t>(num_inference_steps));
  for (int i = 0; i < num_inference_steps; ++i) {
    ts.push_back(static_cast<int>(static_cast<std::int64_t>(num_inference_steps - i) * num_train_steps /
                                  num_inference_steps));
  }
  return ts;
}

namespace {

Tensor run_chain(const std::function<Tensor(const Tensor&, int)>& eps_at, const Shape& shape,
                 const NoiseSchedule& sched, const SampleConfig& cfg) {
  cfg.validate(sched);
  Rng rng(cfg.seed);
  Tensor x = rng.normal_tensor(shape);
  const auto ts = inference_timesteps(sched.num_steps, cfg.num_inference_steps);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    Tensor eps = eps_at(x, t);
    LAVI_EXPECT(eps.shape() == x.shape(), "denoiser returned " + shape_str(eps.shape()) + " for input " +
                                              shape_str(x.shape()));
    x = ddim_step(x, eps, t, t_prev, sched, cfg.eta, rng);
  }
  for (auto& v : x.data()) v = std::clamp(v, -1.0, 1.0);
  return x;
}

}  // namespace

Tensor ddim_sample(const EpsFn& eps_fn, const Shape& shape, const NoiseSchedule& sched, const SampleConfig& cfg) {
  return run_chain(eps_fn, shape, sched, cfg);
}

Tensor ddim_sample_guided(const EpsFn& cond, const EpsFn& uncond, const Shape& shape, const NoiseSchedule& sched,
                          const SampleConfig& cfg) {
  return run_chain(
      [&](const Tensor& x, int t) {
        Tensor ec = cond(x, t);
        Tensor eu = uncond(x, t);
        return cfg_combine(eu, ec, cfg.cfg_scale);
      },
      shape, sched, cfg);
}

}  // namespace lavi
