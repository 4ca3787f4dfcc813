#include "facediff/model.hpp"

#include <cmath>
#include <set>

#include "facediff/errors.hpp"
#include "facediff/rng.hpp"

namespace facediff::model {

namespace {

template <class S>
void require_finite(const Mat<S>& m, const char* stage) {
  if (!m.allFinite()) {
    throw NumericFault(std::string("predict_x0: non-finite values in ") + stage);
  }
}

}  // namespace

// ---- config ------------------------------------------------------------------

diffusion::ScheduleSpec ModelConfig::schedule_spec() const {
  diffusion::ScheduleSpec spec;
  spec.steps = steps;
  spec.base_steps = base_steps;
  spec.beta_start = beta_start;
  spec.beta_end = beta_end;
  return spec;
}

void ModelConfig::validate() const {
  const auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model.") + name + " must be positive");
  };
  positive(steps, "steps");
  positive(base_steps, "base_steps");
  positive(audio_dim, "audio_dim");
  positive(audio_feature_dim, "audio_feature_dim");
  positive(identity_dim, "identity_dim");
  positive(identity_hidden, "identity_hidden");
  positive(identity_feature_dim, "identity_feature_dim");
  positive(step_dim, "step_dim");
  positive(hidden, "hidden");
  positive(gru_layers, "gru_layers");
  if (output_dim != 52) throw ConfigError("model.output_dim must be 52");
  if (step_dim % 2 != 0) throw ConfigError("model.step_dim must be even");
  if (steps > base_steps) throw ConfigError("model.steps must not exceed model.base_steps");
  if (identity_feature_dim != audio_feature_dim) {
    throw ConfigError("model.identity_feature_dim must equal model.audio_feature_dim");
  }
}

KeyValues ModelConfig::to_key_values() const {
  KeyValues kv;
  kv["steps"] = std::to_string(steps);
  kv["base_steps"] = std::to_string(base_steps);
  kv["beta_start"] = format_double(beta_start);
  kv["beta_end"] = format_double(beta_end);
  kv["audio_dim"] = std::to_string(audio_dim);
  kv["audio_feature_dim"] = std::to_string(audio_feature_dim);
  kv["identity_dim"] = std::to_string(identity_dim);
  kv["identity_hidden"] = std::to_string(identity_hidden);
  kv["identity_feature_dim"] = std::to_string(identity_feature_dim);
  kv["step_dim"] = std::to_string(step_dim);
  kv["hidden"] = std::to_string(hidden);
  kv["gru_layers"] = std::to_string(gru_layers);
  kv["output_dim"] = std::to_string(output_dim);
  kv["encoder_seed"] = std::to_string(encoder_seed);
  kv["use_identity"] = use_identity ? "true" : "false";
  return kv;
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  ModelConfig c;
  for (const auto& [key, value] : kv) {
    const auto as_int = [&] { return static_cast<int>(parse_int(key, value)); };
    if (key == "steps") c.steps = as_int();
    else if (key == "base_steps") c.base_steps = as_int();
    else if (key == "beta_start") c.beta_start = parse_double(key, value);
    else if (key == "beta_end") c.beta_end = parse_double(key, value);
    else if (key == "audio_dim") c.audio_dim = as_int();
    else if (key == "audio_feature_dim") c.audio_feature_dim = as_int();
    else if (key == "identity_dim") c.identity_dim = as_int();
    else if (key == "identity_hidden") c.identity_hidden = as_int();
    else if (key == "identity_feature_dim") c.identity_feature_dim = as_int();
    else if (key == "step_dim") c.step_dim = as_int();
    else if (key == "hidden") c.hidden = as_int();
    else if (key == "gru_layers") c.gru_layers = as_int();
    else if (key == "output_dim") c.output_dim = as_int();
    else if (key == "encoder_seed") c.encoder_seed = std::stoull(value);
    else if (key == "use_identity") c.use_identity = parse_bool(key, value);
    else throw ConfigError("unknown model config key '" + key + "'");
  }
  c.validate();
  return c;
}

// ---- audio encoder -------------------------------------------------------------

AudioEncoder AudioEncoder::create(int audio_dim, int feature_dim, std::uint64_t seed) {
  if (audio_dim < 1 || feature_dim < 1) throw ConfigError("audio encoder widths must be positive");
  Rng rng(derive_seed(seed, "audio_encoder"));
  AudioEncoder enc;
  enc.projection = standard_normal<Eigen::MatrixXd>(audio_dim, feature_dim, rng) /
                   std::sqrt(static_cast<double>(audio_dim));
  enc.kernel = {0.5, 0.25, 0.125, 0.0625, 0.0625};
  return enc;
}

template <class S>
AudioEncoding<S> encode_audio(const AudioEncoder& encoder, const data::Matrix& raw) {
  if (raw.rows() == 0) throw InputError("encode_audio: zero-length audio sequence");
  if (raw.cols() != encoder.projection.rows()) {
    throw DimensionError("encode_audio: audio has " + std::to_string(raw.cols()) +
                         " channels, encoder expects " +
                         std::to_string(encoder.projection.rows()));
  }
  const Eigen::MatrixXd projected = raw * encoder.projection;
  const Eigen::Index frames = projected.rows();
  Eigen::MatrixXd smoothed = Eigen::MatrixXd::Zero(frames, projected.cols());
  for (Eigen::Index f = 0; f < frames; ++f) {
    for (std::size_t k = 0; k < encoder.kernel.size(); ++k) {
      const Eigen::Index src = std::max<Eigen::Index>(0, f - static_cast<Eigen::Index>(k));
      smoothed.row(f) += encoder.kernel[k] * projected.row(src);
    }
  }
  const Eigen::RowVectorXd mean = projected.colwise().mean();
  const double norm = mean.norm();
  if (!(norm > 0.0)) throw NormalizationError("encode_audio: mean audio feature is zero");
  AudioEncoding<S> out;
  out.frames = smoothed.cast<S>();
  out.global = (mean / norm).cast<S>();
  return out;
}

// ---- model ---------------------------------------------------------------------

template <class S>
Mat<S> step_features(int t, int num_steps, int width) {
  if (t < 1 || t > num_steps) {
    throw StepRangeError("step " + std::to_string(t) + " outside [1, " +
                         std::to_string(num_steps) + "]");
  }
  const int half = width / 2;
  const double u = 1000.0 * static_cast<double>(t) / num_steps;
  Mat<S> out(1, width);
  for (int i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / half);
    out(0, i) = static_cast<S>(std::sin(u * freq));
    out(0, half + i) = static_cast<S>(std::cos(u * freq));
  }
  return out;
}

template <class S>
DenoiserModel<S>::DenoiserModel(const ModelConfig& cfg, std::uint64_t init_seed) : config(cfg) {
  config.validate();
  schedule = diffusion::make_schedule(config.schedule_spec());
  audio_encoder = AudioEncoder::create(config.audio_dim, config.audio_feature_dim,
                                       config.encoder_seed);
  Rng rng(derive_seed(init_seed, "model_init"));
  // Bias-free, so the identity feature is positively homogeneous in the embedding.
  nn::init_dense(params, "identity_encoder.l0", config.identity_dim, config.identity_hidden,
                 rng, false);
  nn::init_dense(params, "identity_encoder.l1", config.identity_hidden,
                 config.identity_feature_dim, rng, false);
  nn::init_dense(params, "step_encoder.proj", config.step_dim, config.step_dim, rng);
  nn::init_gru(params, "decoder.gru", config.gru_layers, config.decoder_input_dim(),
               config.hidden, rng);
  nn::init_dense(params, "decoder.head", config.hidden, config.output_dim, rng);
  if (!config.use_identity) {
    for (auto& [name, p] : params) {
      if (name.rfind("identity_encoder.", 0) == 0) p.trainable = false;
    }
  }
}

template <class S>
AudioEncoding<S> DenoiserModel<S>::encode_audio(const data::AudioFeatureSequence& audio) const {
  return model::encode_audio<S>(audio_encoder, audio.values);
}

template <class S>
Mat<S> DenoiserModel<S>::encode_step(int t) const {
  schedule.check_step(t);
  nn::Graph<S> g(nn::Graph<S>::Mode::inference);
  auto x = g.constant(step_features<S>(t, config.steps, config.step_dim));
  return nn::dense(g, params, "step_encoder.proj", x).value();
}

template <class S>
void DenoiserModel<S>::set_steps(int steps) {
  config.steps = steps;
  config.validate();
  schedule = diffusion::make_schedule(config.schedule_spec());
}

template <class S>
nn::Var<S> identity_features(nn::Graph<S>& g, const DenoiserModel<S>& model,
                             nn::Var<S> embeddings) {
  if (embeddings.cols() != model.config.identity_dim) {
    throw DimensionError("identity embedding width " + std::to_string(embeddings.cols()) +
                         ", expected " + std::to_string(model.config.identity_dim));
  }
  auto h = nn::relu(nn::dense(g, model.params, "identity_encoder.l0", embeddings));
  return nn::dense(g, model.params, "identity_encoder.l1", h);
}

template <class S>
DenoiseOutputs<S> denoise(nn::Graph<S>& g, const DenoiserModel<S>& model,
                          const DenoiseInputs<S>& in) {
  const auto& cfg = model.config;
  const Eigen::Index rows = in.frames * in.batch;
  if (in.audio.rows() != rows || in.audio.cols() != cfg.audio_feature_dim) {
    throw DimensionError("denoise: audio features must be " + std::to_string(rows) + "x" +
                         std::to_string(cfg.audio_feature_dim));
  }
  if (in.x_t.rows() != rows || in.x_t.cols() != cfg.output_dim) {
    throw DimensionError("denoise: latent must be " + std::to_string(rows) + "x" +
                         std::to_string(cfg.output_dim) + ", got " +
                         std::to_string(in.x_t.rows()) + "x" + std::to_string(in.x_t.cols()));
  }
  if (in.identity.rows() != in.batch) {
    throw DimensionError("denoise: one identity embedding per sequence required");
  }
  if (static_cast<Eigen::Index>(in.steps.size()) != in.batch) {
    throw DimensionError("denoise: one step index per sequence required");
  }

  DenoiseOutputs<S> out;
  if (cfg.use_identity) {
    out.identity_features = identity_features(g, model, in.identity);
  } else {
    out.identity_features =
        g.constant(Mat<S>::Zero(in.batch, cfg.identity_feature_dim));
  }

  Mat<S> step_in(in.batch, cfg.step_dim);
  for (Eigen::Index b = 0; b < in.batch; ++b) {
    model.schedule.check_step(in.steps[static_cast<std::size_t>(b)]);
    step_in.row(b) = step_features<S>(in.steps[static_cast<std::size_t>(b)], cfg.steps,
                                      cfg.step_dim);
  }
  auto step_emb = nn::dense(g, model.params, "step_encoder.proj", g.constant(step_in));

  std::vector<int> broadcast(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    broadcast[static_cast<std::size_t>(r)] = static_cast<int>(r % in.batch);
  }
  auto features = nn::concat_cols<S>({in.audio,
                                      nn::gather_rows(out.identity_features, broadcast),
                                      nn::gather_rows(step_emb, broadcast), in.x_t});
  auto h0 = g.constant(Mat<S>::Zero(in.batch, cfg.hidden));
  auto hidden = nn::gru_forward(g, model.params, "decoder.gru", cfg.gru_layers, features, h0,
                                in.frames, in.batch);
  out.x0_hat = nn::dense(g, model.params, "decoder.head", hidden);
  return out;
}

template <class S>
Mat<S> predict_x0(const DenoiserModel<S>& model, const ConditionBundle<S>& w) {
  if (w.audio == nullptr) throw ContractError("predict_x0: bundle has no audio encoding");
  const Eigen::Index frames = w.audio->frames.rows();
  if (w.x_t.x.rows() != frames) {
    throw DimensionError("predict_x0: latent has " + std::to_string(w.x_t.x.rows()) +
                         " frames, audio has " + std::to_string(frames));
  }
  if (w.identity.rows() != 1 || w.identity.cols() != model.config.identity_dim) {
    throw DimensionError("predict_x0: identity embedding must be 1x" +
                         std::to_string(model.config.identity_dim));
  }
  require_finite(w.audio->frames, "audio features");
  require_finite(w.identity, "identity embedding");
  require_finite(w.x_t.x, "latent input");

  nn::Graph<S> g(nn::Graph<S>::Mode::inference);
  DenoiseInputs<S> in;
  in.frames = frames;
  in.batch = 1;
  in.audio = g.constant(w.audio->frames);
  in.identity = g.constant(w.identity);
  in.steps = {w.x_t.t};
  in.x_t = g.constant(w.x_t.x);
  auto out = denoise(g, model, in);
  require_finite(out.identity_features.value(), "identity features");
  require_finite(out.x0_hat.value(), "decoder output");
  return out.x0_hat.value();
}

template <class S>
Mat<S> interleave(const std::vector<const Mat<S>*>& sequences) {
  if (sequences.empty()) throw InputError("interleave: no sequences");
  const Eigen::Index frames = sequences.front()->rows();
  const Eigen::Index cols = sequences.front()->cols();
  const auto batch = static_cast<Eigen::Index>(sequences.size());
  Mat<S> out(frames * batch, cols);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto& m = *sequences[static_cast<std::size_t>(b)];
    if (m.rows() != frames || m.cols() != cols) {
      throw DimensionError("interleave: sequences must share one shape");
    }
    for (Eigen::Index f = 0; f < frames; ++f) out.row(f * batch + b) = m.row(f);
  }
  return out;
}

template <class S>
Mat<S> deinterleave(const Mat<S>& stacked, Eigen::Index batch, Eigen::Index b) {
  if (batch < 1 || stacked.rows() % batch != 0 || b < 0 || b >= batch) {
    throw DimensionError("deinterleave: bad batch layout");
  }
  const Eigen::Index frames = stacked.rows() / batch;
  Mat<S> out(frames, stacked.cols());
  for (Eigen::Index f = 0; f < frames; ++f) out.row(f) = stacked.row(f * batch + b);
  return out;
}

#define FACEDIFF_INSTANTIATE_MODEL(S)                                                    \
  template AudioEncoding<S> encode_audio<S>(const AudioEncoder&, const data::Matrix&);   \
  template Mat<S> step_features<S>(int, int, int);                                       \
  template class DenoiserModel<S>;                                                       \
  template nn::Var<S> identity_features(nn::Graph<S>&, const DenoiserModel<S>&,          \
                                        nn::Var<S>);                                     \
  template DenoiseOutputs<S> denoise(nn::Graph<S>&, const DenoiserModel<S>&,             \
                                     const DenoiseInputs<S>&);                           \
  template Mat<S> predict_x0(const DenoiserModel<S>&, const ConditionBundle<S>&);        \
  template Mat<S> interleave(const std::vector<const Mat<S>*>&);                         \
  template Mat<S> deinterleave(const Mat<S>&, Eigen::Index, Eigen::Index);

FACEDIFF_INSTANTIATE_MODEL(float)
FACEDIFF_INSTANTIATE_MODEL(double)

}  // namespace facediff::model
