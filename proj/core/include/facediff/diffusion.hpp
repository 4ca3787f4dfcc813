#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "facediff/errors.hpp"

namespace facediff::diffusion {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-step tables of a variance-preserving noise schedule. Steps are 1-based
// in the accessors; step 0 denotes clean data (signal 1, noise 0).
struct NoiseSchedule {
  int num_steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<double> signal_scale;  // sqrt(alpha_bar)
  std::vector<double> noise_scale;   // sqrt(1 - alpha_bar)
  std::vector<double> snr;

  void check_step(int t) const;

  double beta(int t) const { check_step(t); return betas[t - 1]; }
  double alpha(int t) const { check_step(t); return alphas[t - 1]; }
  double alpha_bar(int t) const {
    return t == 0 ? 1.0 : (check_step(t), alpha_bars[t - 1]);
  }
  double signal(int t) const {
    return t == 0 ? 1.0 : (check_step(t), signal_scale[t - 1]);
  }
  double noise(int t) const {
    return t == 0 ? 0.0 : (check_step(t), noise_scale[t - 1]);
  }
  // Continuous time in (0, 1]; equal for matching noise levels of a teacher
  // and its stride-2 student.
  double time(int t) const {
    check_step(t);
    return static_cast<double>(t) / num_steps;
  }
};

// Linear beta ramp from beta_start to beta_end inclusive.
NoiseSchedule build_schedule(int num_steps, double beta_start, double beta_end);

// Builds the full table set from cumulative products alone.
NoiseSchedule schedule_from_alpha_bars(const std::vector<double>& alpha_bars);

// Keeps the base schedule's alpha_bar at round(k * base.T / num_steps).
NoiseSchedule respace(const NoiseSchedule& base, int num_steps);

// Student schedule: step k uses the teacher's alpha_bar at stride * k.
NoiseSchedule subsample(const NoiseSchedule& teacher, int stride);

struct ScheduleSpec {
  int steps = 32;
  int base_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

// respace(build_schedule(base_steps, beta_start, beta_end), steps)
NoiseSchedule make_schedule(const ScheduleSpec& spec);

bool same_tables(const NoiseSchedule& a, const NoiseSchedule& b,
                 double tol = 0.0);

template <class S>
struct LatentState {
  Mat<S> x;
  int t = 0;
};

enum class SigmaMode { beta, zero_at_last };

template <class S>
LatentState<S> q_sample(const Mat<S>& x0, int t, const Mat<S>& eps,
                        const NoiseSchedule& schedule) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) {
    throw DimensionError("q_sample: x0 is " + std::to_string(x0.rows()) + "x" +
                         std::to_string(x0.cols()) + " but eps is " +
                         std::to_string(eps.rows()) + "x" +
                         std::to_string(eps.cols()));
  }
  schedule.check_step(t);
  const S a = static_cast<S>(schedule.signal(t));
  const S s = static_cast<S>(schedule.noise(t));
  return {a * x0 + s * eps, t};
}

template <class S>
Mat<S> x0_to_eps(const LatentState<S>& state, const Mat<S>& x0_hat,
                 const NoiseSchedule& schedule) {
  if (state.x.rows() != x0_hat.rows() || state.x.cols() != x0_hat.cols()) {
    throw DimensionError("x0_to_eps: latent and prediction shapes differ");
  }
  const double s = schedule.noise(state.t);
  if (!(s > 0.0)) {
    throw SingularityError("x0_to_eps: noise scale is zero at step " +
                           std::to_string(state.t));
  }
  const double a = schedule.signal(state.t);
  return ((state.x.template cast<double>() - a * x0_hat.template cast<double>()) / s)
      .template cast<S>();
}

template <class S>
double sigma(const NoiseSchedule& schedule, int t, SigmaMode mode) {
  if (mode == SigmaMode::zero_at_last && t == 1) return 0.0;
  return std::sqrt(schedule.beta(t));
}

// One reverse step from t to t - 1 given a clean-data prediction. The noise
// estimate is recovered from x0_hat, then
//   x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)
//             + sigma_t * z.
template <class S>
LatentState<S> ancestral_step(const LatentState<S>& state, const Mat<S>& x0_hat,
                              const NoiseSchedule& schedule, const Mat<S>& z,
                              SigmaMode mode) {
  if (state.t < 1) {
    throw StepRangeError("ancestral_step: step " + std::to_string(state.t) +
                         " is below 1");
  }
  schedule.check_step(state.t);
  const int t = state.t;
  const Eigen::MatrixXd eps_hat =
      x0_to_eps(state, x0_hat, schedule).template cast<double>();
  const double alpha = schedule.alpha(t);
  const double coef = (1.0 - alpha) / schedule.noise(t);
  Eigen::MatrixXd next =
      (state.x.template cast<double>() - coef * eps_hat) / std::sqrt(alpha);
  const double sig = sigma<S>(schedule, t, mode);
  if (sig > 0.0) {
    if (z.rows() != state.x.rows() || z.cols() != state.x.cols()) {
      throw DimensionError("ancestral_step: noise shape differs from latent");
    }
    next += sig * z.template cast<double>();
  }
  return {next.template cast<S>(), t - 1};
}

}  // namespace facediff::diffusion
