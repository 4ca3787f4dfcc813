#include "facediff/sampler.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "facediff/errors.hpp"
#include "facediff/rng.hpp"

namespace facediff::sampler {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace

template <class S>
InferenceResult infer(const InferenceRequest& request, const model::DenoiserModel<S>& model,
                      const personalization::IdentityLibrary<S>& library,
                      const SamplerOptions& options) {
  const auto start = Clock::now();
  if (request.audio.frames() == 0) throw InputError("infer: audio sequence is empty");
  InferenceResult result;
  const auto audio = model.encode_audio(request.audio);

  if (request.identity_override) {
    result.speaker_id = *request.identity_override;
    library.index_of(result.speaker_id);  // throws LookupError when not enrolled
  } else {
    const auto match = personalization::match_identity<S>(audio.global, library, model);
    result.speaker_id = match.speaker_id;
    result.match_score = match.score;
    result.matching_invoked = true;
  }

  model::ConditionBundle<S> bundle;
  bundle.audio = &audio;
  bundle.identity = library.embedding(result.speaker_id);

  const auto frames = static_cast<Eigen::Index>(request.audio.frames());
  const int T = model.schedule.num_steps;
  Rng rng(derive_seed(request.seed, "sampler"));
  diffusion::LatentState<S> state{
      standard_normal<nn::Mat<S>>(frames, model.config.output_dim, rng), T};
  nn::Mat<S> x0_hat;
  while (state.t >= 1) {
    const auto step_start = Clock::now();
    const int t = state.t;
    bundle.x_t = state;
    try {
      x0_hat = model::predict_x0(model, bundle);
    } catch (const NumericFault& e) {
      throw NumericFault("infer: step " + std::to_string(t) + ": " + e.what());
    }
    const auto z = standard_normal<nn::Mat<S>>(frames, model.config.output_dim, rng);
    state = diffusion::ancestral_step(state, x0_hat, model.schedule, z, options.sigma_mode);
    if (!state.x.allFinite()) {
      throw NumericFault("infer: non-finite latent after step " + std::to_string(t));
    }
    result.step_timings.push_back({t, seconds_since(step_start)});
  }

  result.output.values = state.x.template cast<double>().cwiseMax(0.0).cwiseMin(1.0);
  result.output.fps = request.audio.fps;
  result.output.speaker_id = result.speaker_id;
  result.output.sequence_id = request.audio.source_id;
  result.total_seconds = seconds_since(start);
  return result;
}

template <class S>
ItfReport measure_itf(const std::vector<InferenceRequest>& batch,
                      const model::DenoiserModel<S>& model,
                      const personalization::IdentityLibrary<S>& library, int warmup_runs,
                      int repetitions) {
  if (batch.empty()) throw InputError("measure_itf: empty request batch");
  if (warmup_runs < 1) throw ConfigError("measure_itf: at least one warmup run is required");
  if (repetitions < 2) throw ConfigError("measure_itf: at least two repetitions are required");
  long frames = 0;
  for (const auto& r : batch) frames += r.audio.frames();
  const auto run_once = [&] {
    const auto start = Clock::now();
    for (const auto& r : batch) infer<S>(r, model, library);
    return seconds_since(start);
  };
  for (int i = 0; i < warmup_runs; ++i) run_once();

  ItfReport report;
  report.steps = model.schedule.num_steps;
  double sum = 0.0;
  for (int i = 0; i < repetitions; ++i) {
    TimingRow row;
    row.run = i;
    row.steps = report.steps;
    row.frames = frames;
    row.seconds = run_once();
    row.itf = row.seconds / static_cast<double>(frames);
    sum += row.itf;
    report.runs.push_back(row);
  }
  report.itf_mean = sum / repetitions;
  double ss = 0.0;
  for (const auto& row : report.runs) ss += (row.itf - report.itf_mean) * (row.itf - report.itf_mean);
  report.itf_std = std::sqrt(ss / (repetitions - 1));
  return report;
}

void write_timing_csv(const std::vector<TimingRow>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "run,steps,frames,seconds,itf\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%ld,%.9g,%.9g\n", r.run, r.steps, r.frames, r.seconds,
                  r.itf);
    out << buf;
  }
  if (!out) throw IoError("write failed for " + path.string());
}

template InferenceResult infer(const InferenceRequest&, const model::DenoiserModel<float>&,
                               const personalization::IdentityLibrary<float>&,
                               const SamplerOptions&);
template InferenceResult infer(const InferenceRequest&, const model::DenoiserModel<double>&,
                               const personalization::IdentityLibrary<double>&,
                               const SamplerOptions&);
template ItfReport measure_itf(const std::vector<InferenceRequest>&,
                               const model::DenoiserModel<float>&,
                               const personalization::IdentityLibrary<float>&, int, int);
template ItfReport measure_itf(const std::vector<InferenceRequest>&,
                               const model::DenoiserModel<double>&,
                               const personalization::IdentityLibrary<double>&, int, int);

}  // namespace facediff::sampler
