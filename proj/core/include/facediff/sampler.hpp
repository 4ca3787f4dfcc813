#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "facediff/data.hpp"
#include "facediff/diffusion.hpp"
#include "facediff/model.hpp"
#include "facediff/personalization.hpp"

namespace facediff::sampler {

struct InferenceRequest {
  data::AudioFeatureSequence audio;
  std::optional<std::string> identity_override;
  std::uint64_t seed = 0;
};

struct StepTiming {
  int t = 0;
  double seconds = 0.0;
};

struct InferenceResult {
  data::BlendshapeSequence output;
  std::string speaker_id;
  double match_score = 0.0;
  // False when an identity override skipped the matching stage.
  bool matching_invoked = false;
  std::vector<StepTiming> step_timings;
  double total_seconds = 0.0;
};

struct SamplerOptions {
  diffusion::SigmaMode sigma_mode = diffusion::SigmaMode::zero_at_last;
};

// Identity from the override or from audio matching, then the ancestral
// chain from seeded Gaussian noise; the final sample is clamped to [0, 1].
template <class S>
InferenceResult infer(const InferenceRequest& request, const model::DenoiserModel<S>& model,
                      const personalization::IdentityLibrary<S>& library,
                      const SamplerOptions& options = {});

struct TimingRow {
  int run = 0;
  int steps = 0;
  long frames = 0;
  double seconds = 0.0;
  double itf = 0.0;
};

struct ItfReport {
  int steps = 0;
  double itf_mean = 0.0;
  double itf_std = 0.0;  // sample standard deviation over repetitions
  std::vector<TimingRow> runs;
};

// Steady-state seconds per frame over the whole batch of requests; warmup
// runs are discarded.
template <class S>
ItfReport measure_itf(const std::vector<InferenceRequest>& batch,
                      const model::DenoiserModel<S>& model,
                      const personalization::IdentityLibrary<S>& library, int warmup_runs = 1,
                      int repetitions = 5);

void write_timing_csv(const std::vector<TimingRow>& rows, const std::filesystem::path& path);

}  // namespace facediff::sampler
