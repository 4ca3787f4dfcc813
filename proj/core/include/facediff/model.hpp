#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "facediff/autodiff.hpp"
#include "facediff/data.hpp"
#include "facediff/diffusion.hpp"
#include "facediff/kv_text.hpp"

namespace facediff::model {

template <class S>
using Mat = nn::Mat<S>;

struct ModelConfig {
  int steps = 32;
  int base_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  int audio_dim = 64;          // raw synthetic feature width
  int audio_feature_dim = 64;  // frozen encoder output width
  int identity_dim = 32;
  int identity_hidden = 64;
  int identity_feature_dim = 64;
  int step_dim = 32;
  int hidden = 256;
  int gru_layers = 2;
  int output_dim = 52;

  std::uint64_t encoder_seed = 20240501;
  // When false the decoder sees a zero identity feature (ablation).
  bool use_identity = true;

  int decoder_input_dim() const {
    return audio_feature_dim + identity_feature_dim + step_dim + output_dim;
  }
  diffusion::ScheduleSpec schedule_spec() const;
  void validate() const;
  KeyValues to_key_values() const;
  // Unknown keys are rejected.
  static ModelConfig from_key_values(const KeyValues& kv);
};

// Frozen feature extractor: seed-derived projection followed by a causal
// width-5 smoothing kernel (edge frames replicated). Never trained.
struct AudioEncoder {
  Eigen::MatrixXd projection;  // audio_dim x feature_dim
  std::vector<double> kernel;  // weight of frame f - k at index k

  static AudioEncoder create(int audio_dim, int feature_dim, std::uint64_t seed);
};

template <class S>
struct AudioEncoding {
  Mat<S> frames;  // frames x feature_dim
  Mat<S> global;  // 1 x feature_dim, unit norm
};

// Per-frame features are the smoothed projection; the global feature is the
// mean of the unsmoothed projected frames, L2-normalized.
template <class S>
AudioEncoding<S> encode_audio(const AudioEncoder& encoder, const data::Matrix& raw);

template <class S>
class DenoiserModel {
 public:
  DenoiserModel() = default;
  // Builds the schedule and frozen encoder and draws fresh trainable weights.
  DenoiserModel(const ModelConfig& config, std::uint64_t init_seed);

  ModelConfig config;
  AudioEncoder audio_encoder;
  diffusion::NoiseSchedule schedule;
  // Identity encoder ("identity_encoder.*"), step encoder ("step_encoder.*")
  // and decoder ("decoder.*") weights.
  nn::ParameterSet<S> params;

  AudioEncoding<S> encode_audio(const data::AudioFeatureSequence& audio) const;
  // Continuous-time step embedding; t in [1, T].
  Mat<S> encode_step(int t) const;
  // Same schedule and weights, T replaced (used when distilling).
  void set_steps(int steps);

  template <class T>
  DenoiserModel<T> cast() const {
    DenoiserModel<T> out;
    out.config = config;
    out.audio_encoder = audio_encoder;
    out.schedule = schedule;
    out.params = params.template cast<T>();
    return out;
  }
};

// Sinusoidal features of the continuous time t / T.
template <class S>
Mat<S> step_features(int t, int num_steps, int width);

// One batch of sequences in frame-major layout (row f * batch + b).
template <class S>
struct DenoiseInputs {
  Eigen::Index frames = 0;
  Eigen::Index batch = 0;
  nn::Var<S> audio;     // (frames * batch) x audio_feature_dim
  nn::Var<S> identity;  // batch x identity_dim raw embeddings
  std::vector<int> steps;  // per sequence
  nn::Var<S> x_t;       // (frames * batch) x 52
};

template <class S>
struct DenoiseOutputs {
  nn::Var<S> x0_hat;             // (frames * batch) x 52
  nn::Var<S> identity_features;  // batch x identity_feature_dim
};

template <class S>
nn::Var<S> identity_features(nn::Graph<S>& g, const DenoiserModel<S>& model,
                             nn::Var<S> embeddings);

template <class S>
DenoiseOutputs<S> denoise(nn::Graph<S>& g, const DenoiserModel<S>& model,
                          const DenoiseInputs<S>& in);

template <class S>
struct ConditionBundle {
  const AudioEncoding<S>* audio = nullptr;
  Mat<S> identity;  // 1 x identity_dim
  diffusion::LatentState<S> x_t;
};

// Single-sequence clean-data prediction. Checks every stage for non-finite
// values and names the offending one in a NumericFault.
template <class S>
Mat<S> predict_x0(const DenoiserModel<S>& model, const ConditionBundle<S>& w);

// Interleaves per-sequence frames x C matrices into the frame-major layout.
template <class S>
Mat<S> interleave(const std::vector<const Mat<S>*>& sequences);
// Inverse of interleave for sequence b.
template <class S>
Mat<S> deinterleave(const Mat<S>& stacked, Eigen::Index batch, Eigen::Index b);

}  // namespace facediff::model
