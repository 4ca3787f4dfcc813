#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "facediff/autodiff.hpp"
#include "facediff/diffusion.hpp"
#include "facediff/model.hpp"
#include "facediff/personalization.hpp"
#include "facediff/training.hpp"

// Progressive distillation: student step tau sits at the teacher's noise
// level 2 * tau. The teacher is evaluated at steps 2 * tau and 2 * tau - 1,
// each evaluation re-projecting the latent one teacher level down, so two
// teacher steps land on level 2 * tau - 2 (level 0 is clean data).
namespace facediff::distillation {

template <class S>
using Mat = nn::Mat<S>;

// x_to = a_to * x0_hat + (s_to / s_from) * (x_from - a_from * x0_hat)
template <class S>
Mat<S> reproject(const Mat<S>& x_from, const Mat<S>& x0_hat, double a_from, double s_from,
                 double a_to, double s_to);

// Clean-data prediction of a (teacher) denoiser at the given teacher step.
template <class S>
using Denoiser = std::function<Mat<S>(const Mat<S>& x, int teacher_step)>;

template <class S>
struct TwoStep {
  Mat<S> x_mid;  // teacher level 2 * tau - 1
  Mat<S> x_end;  // teacher level 2 * tau - 2
};

template <class S>
TwoStep<S> teacher_two_step(const Denoiser<S>& teacher, const Mat<S>& x_tau, int tau,
                            const diffusion::NoiseSchedule& student_schedule,
                            const diffusion::NoiseSchedule& teacher_schedule);

template <class S>
struct DistillTarget {
  Mat<S> x_tilde;
  double weight = 1.0;
};

// Truncated-SNR weight max(a^2 / s^2, 1) of student step tau.
double distill_weight(const diffusion::NoiseSchedule& student_schedule, int tau);

template <class S>
DistillTarget<S> distill_target(const Mat<S>& x_tau, const Mat<S>& x_end, int tau,
                                const diffusion::NoiseSchedule& student_schedule,
                                const diffusion::NoiseSchedule& teacher_schedule);

template <class S>
double distill_loss(const DistillTarget<S>& target, const Mat<S>& student_out);

// Throws ConfigError unless teacher_steps is even and equals 2 * student_steps.
void check_stage_steps(int teacher_steps, int student_steps);

struct DistillConfig {
  int student_steps = 16;
  int epochs = 25;
  training::TrainConfig train;  // epochs and steps fields are overridden per stage
};

template <class S>
struct StageResult {
  model::DenoiserModel<S> student;
  personalization::IdentityLibrary<S> library;
  training::TrainResult<S> train;
};

// Copies the teacher into a student with half the steps and trains it on
// L_tea + lambda_dis * L_dis.
template <class S>
StageResult<S> distill_stage(const DistillConfig& config,
                             const std::vector<const data::Sample*>& samples,
                             const model::DenoiserModel<S>& teacher,
                             const personalization::IdentityLibrary<S>& teacher_library);

struct StageRecord {
  int teacher_steps = 0;
  int student_steps = 0;
  std::string checkpoint;
  KeyValues metrics;
};

// Key-value text: stage count, chain ("32>16>8") and per-stage entries.
std::string format_stage_manifest(const std::vector<StageRecord>& stages);
std::vector<StageRecord> parse_stage_manifest(const std::string& text);

}  // namespace facediff::distillation
