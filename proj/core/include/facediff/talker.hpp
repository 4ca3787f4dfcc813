#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "facediff/checkpoint.hpp"
#include "facediff/data.hpp"
#include "facediff/metrics.hpp"
#include "facediff/model.hpp"
#include "facediff/personalization.hpp"
#include "facediff/sampler.hpp"

namespace facediff {

// A denoiser together with its identity library: the unit that is trained,
// checkpointed, distilled and served.
template <class S>
struct Talker {
  model::DenoiserModel<S> model;
  personalization::IdentityLibrary<S> library;
};

// Fresh model with every corpus speaker enrolled.
Talker<float> make_talker(const model::ModelConfig& config, const std::vector<std::string>& speakers,
                          std::uint64_t seed);

// Metadata keys: kind, model.<config key>, library.temperature, library.dim,
// library.speakers, plus any extra entries.
io::Checkpoint to_checkpoint(const Talker<float>& talker, const KeyValues& extra = {},
                             const nn::AdamState<float>* model_optimizer = nullptr,
                             const nn::AdamState<float>* library_optimizer = nullptr);
Talker<float> from_checkpoint(const io::Checkpoint& ckpt);

// Writes the checkpoint and a "<path>.speakers" sidecar listing the library order.
void save_talker(const std::filesystem::path& path, const Talker<float>& talker,
                 const KeyValues& extra = {},
                 const nn::AdamState<float>* model_optimizer = nullptr,
                 const nn::AdamState<float>* library_optimizer = nullptr);
Talker<float> load_talker(const std::filesystem::path& path);

struct EvalOptions {
  std::uint64_t seed = 11;
  // Quality metrics sample with the ground-truth identity; matching is scored
  // separately on the same audio.
  bool match_for_quality = false;
  int max_sequences = 0;  // 0 = all
};

struct EvalResult {
  metrics::MetricsReport report;
  std::vector<std::pair<std::string, std::string>> matches;  // (predicted, true)
  std::vector<double> lbe_per_sequence;
  std::vector<double> mbe_per_sequence;
};

EvalResult evaluate(const Talker<float>& talker, const std::vector<const data::Sample*>& samples,
                    const EvalOptions& options = {});

}  // namespace facediff
