#include "facediff/diffusion.hpp"

#include <cmath>
#include <string>

namespace facediff::diffusion {

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > num_steps) {
    throw StepRangeError("step " + std::to_string(t) + " outside [1, " +
                         std::to_string(num_steps) + "]");
  }
}

namespace {

void fill_derived(NoiseSchedule& s) {
  const auto n = static_cast<std::size_t>(s.num_steps);
  s.signal_scale.resize(n);
  s.noise_scale.resize(n);
  s.snr.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.signal_scale[i] = std::sqrt(s.alpha_bars[i]);
    s.noise_scale[i] = std::sqrt(1.0 - s.alpha_bars[i]);
    s.snr[i] = s.alpha_bars[i] / (1.0 - s.alpha_bars[i]);
  }
}

}  // namespace

NoiseSchedule build_schedule(int num_steps, double beta_start, double beta_end) {
  if (num_steps < 1) {
    throw ConfigError("noise schedule needs at least one step, got " +
                      std::to_string(num_steps));
  }
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end) {
    throw ConfigError("beta bounds must satisfy 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.num_steps = num_steps;
  const auto n = static_cast<std::size_t>(num_steps);
  s.betas.resize(n);
  s.alphas.resize(n);
  s.alpha_bars.resize(n);
  double prod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double frac =
        num_steps == 1 ? 0.0 : static_cast<double>(i) / (num_steps - 1);
    s.betas[i] = beta_start + (beta_end - beta_start) * frac;
    s.alphas[i] = 1.0 - s.betas[i];
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
  fill_derived(s);
  return s;
}

NoiseSchedule schedule_from_alpha_bars(const std::vector<double>& alpha_bars) {
  if (alpha_bars.empty()) {
    throw ConfigError("noise schedule needs at least one step");
  }
  NoiseSchedule s;
  s.num_steps = static_cast<int>(alpha_bars.size());
  s.alpha_bars = alpha_bars;
  s.betas.resize(alpha_bars.size());
  s.alphas.resize(alpha_bars.size());
  double prev = 1.0;
  for (std::size_t i = 0; i < alpha_bars.size(); ++i) {
    const double ab = alpha_bars[i];
    if (!(ab > 0.0) || !(ab < prev)) {
      throw ConfigError("alpha_bar must be strictly decreasing inside (0, 1)");
    }
    s.alphas[i] = ab / prev;
    s.betas[i] = 1.0 - s.alphas[i];
    prev = ab;
  }
  fill_derived(s);
  return s;
}

NoiseSchedule respace(const NoiseSchedule& base, int num_steps) {
  if (num_steps < 1 || num_steps > base.num_steps) {
    throw ConfigError("cannot respace a " + std::to_string(base.num_steps) +
                      "-step schedule to " + std::to_string(num_steps) +
                      " steps");
  }
  std::vector<double> ab(static_cast<std::size_t>(num_steps));
  for (int k = 1; k <= num_steps; ++k) {
    const double pos = static_cast<double>(k) * base.num_steps / num_steps;
    const int idx = static_cast<int>(std::lround(pos));
    ab[static_cast<std::size_t>(k - 1)] = base.alpha_bar(idx);
  }
  return schedule_from_alpha_bars(ab);
}

NoiseSchedule subsample(const NoiseSchedule& teacher, int stride) {
  if (stride < 1 || teacher.num_steps % stride != 0) {
    throw ConfigError("teacher schedule with " +
                      std::to_string(teacher.num_steps) +
                      " steps is not divisible by stride " +
                      std::to_string(stride));
  }
  std::vector<double> ab(static_cast<std::size_t>(teacher.num_steps / stride));
  for (std::size_t k = 0; k < ab.size(); ++k) {
    ab[k] = teacher.alpha_bar(static_cast<int>(k + 1) * stride);
  }
  return schedule_from_alpha_bars(ab);
}

NoiseSchedule make_schedule(const ScheduleSpec& spec) {
  return respace(build_schedule(spec.base_steps, spec.beta_start, spec.beta_end),
                 spec.steps);
}

bool same_tables(const NoiseSchedule& a, const NoiseSchedule& b, double tol) {
  if (a.num_steps != b.num_steps) return false;
  for (std::size_t i = 0; i < a.alpha_bars.size(); ++i) {
    if (std::abs(a.alpha_bars[i] - b.alpha_bars[i]) > tol) return false;
  }
  return true;
}

}  // namespace facediff::diffusion
