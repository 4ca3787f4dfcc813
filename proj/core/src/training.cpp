#include "facediff/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>

#include "facediff/blendshapes.hpp"
#include "facediff/errors.hpp"
#include "facediff/rng.hpp"

namespace facediff::training {

namespace {

LossWeights effective_weights(const TrainConfig& config) {
  LossWeights w = config.weights;
  if (config.objective == Objective::expression_only) {
    w.lip = 0.0;
    w.con = 0.0;
    w.vel = 0.0;
    w.dis = 0.0;
  }
  return w;
}

template <class S>
struct BatchLoss {
  nn::Var<S> total;
  LossBreakdown parts;
};

double scalar(nn::Var<float> v) { return static_cast<double>(v.value()(0, 0)); }
double scalar(nn::Var<double> v) { return v.value()(0, 0); }

// Builds x_t, runs the denoiser and assembles the weighted objective for one
// batch whose steps and noise are already fixed in ctx.
template <class S>
BatchLoss<S> batch_loss(const TrainConfig& config, BatchContext<S>& ctx,
                        const model::DenoiserModel<S>& model,
                        const personalization::IdentityLibrary<S>& library,
                        const ExtraLoss<S>* extra) {
  auto& g = *ctx.graph;
  const auto& examples = *ctx.examples;
  const auto frames = ctx.frames;
  const auto batch = ctx.batch;

  std::vector<const Mat<S>*> x0s, audios;
  std::vector<int> rows;
  Mat<S> globals(batch, model.config.audio_feature_dim);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto* ex = examples[static_cast<std::size_t>(b)];
    if (ex->speaker_row < 0) {
      throw DataError("training batch holds unenrolled speaker '" + ex->sample->speaker_id + "'");
    }
    x0s.push_back(&ex->x0);
    audios.push_back(&ex->audio);
    rows.push_back(ex->speaker_row);
    globals.row(b) = ex->audio_global;
  }
  ctx.x0 = model::interleave<S>(x0s);
  ctx.audio = model::interleave<S>(audios);
  ctx.x_t.resize(ctx.x0.rows(), ctx.x0.cols());
  for (Eigen::Index b = 0; b < batch; ++b) {
    const int t = ctx.steps[static_cast<std::size_t>(b)];
    const auto a = static_cast<S>(model.schedule.signal(t));
    const auto s = static_cast<S>(model.schedule.noise(t));
    for (Eigen::Index f = 0; f < frames; ++f) {
      const auto r = f * batch + b;
      ctx.x_t.row(r) = a * ctx.x0.row(r) + s * ctx.eps.row(r);
    }
  }

  auto embeddings = g.param(library.params(), personalization::IdentityLibrary<S>::kParamName);
  model::DenoiseInputs<S> in;
  in.frames = frames;
  in.batch = batch;
  in.audio = g.constant(ctx.audio);
  in.identity = nn::gather_rows(embeddings, rows);
  in.steps = ctx.steps;
  in.x_t = g.constant(ctx.x_t);
  ctx.identity = in.identity.value();
  auto out = model::denoise(g, model, in);
  ctx.x0_hat = out.x0_hat;

  auto x0 = g.constant(ctx.x0);
  auto l_exp = expression_loss(out.x0_hat, x0);
  auto l_lip = lip_loss(out.x0_hat, x0, config.lips());
  auto l_vel = velocity_loss(out.x0_hat, x0, frames, batch);
  nn::Var<S> l_con = g.constant(Mat<S>::Zero(1, 1));
  if (model.config.use_identity) {
    auto logits = personalization::contrast_logits(out.identity_features, g.constant(globals),
                                                   library.temperature());
    l_con = personalization::contrast_loss(logits);
  }

  const LossWeights w = effective_weights(config);
  BatchLoss<S> result;
  result.parts.exp = scalar(l_exp);
  result.parts.lip = scalar(l_lip);
  result.parts.vel = scalar(l_vel);
  result.parts.con = scalar(l_con);
  nn::Var<S> total = nn::scale(l_exp, w.exp);
  if (config.objective == Objective::full) {
    total = nn::add(total, nn::scale(l_lip, w.lip));
    total = nn::add(total, nn::scale(l_con, w.con));
    total = nn::add(total, nn::scale(l_vel, w.vel));
  }
  if (extra && *extra) {
    auto l_dis = (*extra)(ctx);
    result.parts.dis = scalar(l_dis);
    if (config.objective == Objective::full) total = nn::add(total, nn::scale(l_dis, w.dis));
  }
  result.parts.total = result.parts.recompose(w);
  result.parts.graph_total = scalar(total);
  result.total = total;
  return result;
}

void warn_single_frame() {
  static bool warned = false;
  if (!warned) {
    std::fprintf(stderr, "warning: velocity loss undefined for single-frame input; using 0\n");
    warned = true;
  }
}

}  // namespace

// ---- config ----------------------------------------------------------------------

const std::vector<int>& TrainConfig::lips() const {
  return lip_indices.empty() ? blendshapes::lip_channels() : lip_indices;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("train.epochs must be non-negative");
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  if (steps < 1) throw ConfigError("train.steps must be positive");
  for (double w : {weights.exp, weights.lip, weights.con, weights.vel, weights.dis}) {
    if (!(w >= 0.0)) throw ConfigError("loss weights must be non-negative");
  }
  for (int c : lip_indices) {
    if (c < 0 || c >= blendshapes::kChannelCount) {
      throw ConfigError("lip channel index " + std::to_string(c) + " outside [0, 52)");
    }
  }
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv;
  kv["epochs"] = std::to_string(epochs);
  kv["batch_size"] = std::to_string(batch_size);
  kv["learning_rate"] = format_double(learning_rate);
  kv["lambda_exp"] = format_double(weights.exp);
  kv["lambda_lip"] = format_double(weights.lip);
  kv["lambda_con"] = format_double(weights.con);
  kv["lambda_vel"] = format_double(weights.vel);
  kv["lambda_dis"] = format_double(weights.dis);
  kv["steps"] = std::to_string(steps);
  kv["seed"] = std::to_string(seed);
  kv["lip_indices"] = join_ints(lips());
  kv["objective"] = objective == Objective::full ? "full" : "expression_only";
  kv["freeze_model"] = freeze_model ? "true" : "false";
  return kv;
}

// ---- losses ------------------------------------------------------------------------

template <class S>
nn::Var<S> expression_loss(nn::Var<S> x0_hat, nn::Var<S> x0) {
  if (x0_hat.rows() != x0.rows() || x0_hat.cols() != x0.cols()) {
    throw DimensionError("expression_loss: prediction and target shapes differ");
  }
  return nn::mse(x0_hat, x0);
}

template <class S>
nn::Var<S> lip_loss(nn::Var<S> x0_hat, nn::Var<S> x0, const std::vector<int>& lip_indices) {
  if (lip_indices.empty()) throw ConfigError("lip_loss: empty lip channel set");
  if (x0_hat.rows() != x0.rows() || x0_hat.cols() != x0.cols()) {
    throw DimensionError("lip_loss: prediction and target shapes differ");
  }
  return nn::mse(nn::gather_cols(x0_hat, lip_indices), nn::gather_cols(x0, lip_indices));
}

template <class S>
nn::Var<S> velocity_loss(nn::Var<S> x0_hat, nn::Var<S> x0, Eigen::Index frames,
                         Eigen::Index batch) {
  if (x0_hat.rows() != x0.rows() || x0_hat.cols() != x0.cols()) {
    throw DimensionError("velocity_loss: prediction and target shapes differ");
  }
  if (x0_hat.rows() != frames * batch) {
    throw DimensionError("velocity_loss: row count does not match frames x batch");
  }
  if (frames < 2) {
    warn_single_frame();
    return x0_hat.graph->constant(Mat<S>::Zero(1, 1));
  }
  const Eigen::Index n = (frames - 1) * batch;
  auto d_hat = nn::sub(nn::slice_rows(x0_hat, batch, n), nn::slice_rows(x0_hat, 0, n));
  auto d_gt = nn::sub(nn::slice_rows(x0, batch, n), nn::slice_rows(x0, 0, n));
  return nn::mse(d_hat, d_gt);
}

double expression_loss(const data::Matrix& x0_hat, const data::Matrix& x0) {
  nn::Graph<double> g(nn::Graph<double>::Mode::inference);
  return expression_loss(g.constant(x0_hat), g.constant(x0)).value()(0, 0);
}

double lip_loss(const data::Matrix& x0_hat, const data::Matrix& x0,
                const std::vector<int>& lip_indices) {
  nn::Graph<double> g(nn::Graph<double>::Mode::inference);
  return lip_loss(g.constant(x0_hat), g.constant(x0), lip_indices).value()(0, 0);
}

double velocity_loss(const data::Matrix& x0_hat, const data::Matrix& x0) {
  nn::Graph<double> g(nn::Graph<double>::Mode::inference);
  return velocity_loss(g.constant(x0_hat), g.constant(x0), x0_hat.rows(), 1).value()(0, 0);
}

// ---- data plumbing ------------------------------------------------------------------

template <class S>
std::vector<Example<S>> prepare_examples(const std::vector<const data::Sample*>& samples,
                                         const model::DenoiserModel<S>& model,
                                         const personalization::IdentityLibrary<S>& library) {
  std::vector<Example<S>> out;
  out.reserve(samples.size());
  for (const auto* s : samples) {
    if (s->audio.frames() != s->blendshapes.frames()) {
      throw DataError("sequence '" + s->id + "' has mismatched audio and blendshape lengths");
    }
    Example<S> ex;
    ex.sample = s;
    auto enc = model.encode_audio(s->audio);
    ex.audio = std::move(enc.frames);
    ex.audio_global = std::move(enc.global);
    ex.x0 = s->blendshapes.values.cast<S>();
    ex.speaker_row = library.contains(s->speaker_id) ? library.index_of(s->speaker_id) : -1;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<std::vector<int>> make_batches(const std::vector<std::string>& speakers,
                                           const std::vector<int>& frames, int batch_size,
                                           std::uint64_t seed) {
  if (speakers.size() != frames.size()) {
    throw DimensionError("make_batches: speaker and frame lists differ in length");
  }
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  Rng rng(seed);
  // bucket (frame count) -> speaker -> queue of example indices
  std::map<int, std::map<std::string, std::vector<int>>> buckets;
  for (std::size_t i = 0; i < speakers.size(); ++i) {
    buckets[frames[i]][speakers[i]].push_back(static_cast<int>(i));
  }
  std::vector<std::vector<int>> batches;
  for (auto& [len, by_speaker] : buckets) {
    std::vector<std::string> order;
    for (auto& [spk, queue] : by_speaker) {
      std::shuffle(queue.begin(), queue.end(), rng);
      order.push_back(spk);
    }
    std::size_t remaining = 0;
    for (const auto& [spk, queue] : by_speaker) remaining += queue.size();
    while (remaining > 0) {
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<int> batch;
      for (const auto& spk : order) {
        if (static_cast<int>(batch.size()) >= batch_size) break;
        auto& queue = by_speaker[spk];
        if (queue.empty()) continue;
        batch.push_back(queue.back());
        queue.pop_back();
        --remaining;
      }
      batches.push_back(std::move(batch));
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

// ---- loop ---------------------------------------------------------------------------

template <class S>
TrainResult<S> train_loop(const TrainConfig& config, const std::vector<const data::Sample*>& samples,
                          model::DenoiserModel<S>& model,
                          personalization::IdentityLibrary<S>& library,
                          const ExtraLoss<S>& extra) {
  config.validate();
  TrainResult<S> result;
  result.model_optimizer.learning_rate = config.learning_rate;
  result.library_optimizer.learning_rate = config.learning_rate;
  if (config.epochs == 0) return result;
  if (samples.empty()) throw DataError("training set is empty");

  const auto examples = prepare_examples(samples, model, library);
  for (const auto& ex : examples) {
    if (ex.speaker_row < 0) {
      throw DataError("speaker '" + ex.sample->speaker_id + "' is not enrolled");
    }
  }
  std::vector<std::string> speakers;
  std::vector<int> lengths;
  for (const auto& ex : examples) {
    speakers.push_back(ex.sample->speaker_id);
    lengths.push_back(static_cast<int>(ex.x0.rows()));
  }

  // Freezing the model flips trainable flags for the duration of the loop.
  std::vector<std::pair<std::string, bool>> saved_flags;
  if (config.freeze_model) {
    for (auto& [name, p] : model.params) {
      saved_flags.emplace_back(name, p.trainable);
      p.trainable = false;
    }
  }
  const auto restore = [&] {
    for (const auto& [name, flag] : saved_flags) model.params.at(name).trainable = flag;
  };

  const int T = model.schedule.num_steps;
  Rng rng(derive_seed(config.seed, "train_noise"));
  std::uniform_int_distribution<int> step_dist(1, T);
  int step = 0;
  try {
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      const auto batches = make_batches(speakers, lengths, config.batch_size,
                                        derive_seed(config.seed, "batches",
                                                    static_cast<std::uint64_t>(epoch)));
      for (const auto& idx : batches) {
        std::vector<const Example<S>*> batch;
        for (int i : idx) batch.push_back(&examples[static_cast<std::size_t>(i)]);
        nn::Graph<S> g;
        BatchContext<S> ctx;
        ctx.graph = &g;
        ctx.examples = &batch;
        ctx.batch = static_cast<Eigen::Index>(batch.size());
        ctx.frames = batch.front()->x0.rows();
        for (std::size_t b = 0; b < batch.size(); ++b) ctx.steps.push_back(step_dist(rng));
        ctx.eps = standard_normal<Mat<S>>(ctx.frames * ctx.batch, model.config.output_dim, rng);
        auto loss = batch_loss(config, ctx, model, library, &extra);
        ++step;
        if (!std::isfinite(loss.parts.total) || !std::isfinite(loss.parts.graph_total)) {
          char buf[256];
          std::snprintf(buf, sizeof buf,
                        "training: non-finite loss at step %d (exp=%g lip=%g con=%g vel=%g "
                        "dis=%g)",
                        step, loss.parts.exp, loss.parts.lip, loss.parts.con, loss.parts.vel,
                        loss.parts.dis);
          throw NumericFault(buf);
        }
        const auto grads = g.backward(loss.total);
        if (!config.freeze_model) nn::adam_step(model.params, grads, result.model_optimizer);
        if (model.config.use_identity) {
          nn::adam_step(library.params(), grads, result.library_optimizer);
        }
        result.history.push_back({step, epoch, loss.parts});
      }
    }
  } catch (...) {
    restore();
    throw;
  }
  restore();
  return result;
}

template <class S>
TrainResult<S> train_teacher(const TrainConfig& config,
                             const std::vector<const data::Sample*>& samples,
                             model::DenoiserModel<S>& model,
                             personalization::IdentityLibrary<S>& library) {
  if (config.steps != model.schedule.num_steps) {
    throw ConfigError("train.steps = " + std::to_string(config.steps) +
                      " does not match the model schedule (" +
                      std::to_string(model.schedule.num_steps) + " steps)");
  }
  return train_loop<S>(config, samples, model, library);
}

template <class S>
LossBreakdown evaluate_batch(const TrainConfig& config, const std::vector<const Example<S>*>& batch,
                             const std::vector<int>& steps, const Mat<S>& eps_frame_major,
                             const model::DenoiserModel<S>& model,
                             const personalization::IdentityLibrary<S>& library) {
  if (batch.empty()) throw InputError("evaluate_batch: empty batch");
  nn::Graph<S> g(nn::Graph<S>::Mode::inference);
  BatchContext<S> ctx;
  ctx.graph = &g;
  ctx.examples = &batch;
  ctx.batch = static_cast<Eigen::Index>(batch.size());
  ctx.frames = batch.front()->x0.rows();
  ctx.steps = steps;
  ctx.eps = eps_frame_major;
  return batch_loss<S>(config, ctx, model, library, nullptr).parts;
}

void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path,
                       bool with_distill_column) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,exp,lip,con,vel," << (with_distill_column ? "dis," : "") << "total\n";
  char buf[64];
  for (const auto& row : history) {
    out << row.step;
    const auto put = [&](double v) {
      std::snprintf(buf, sizeof buf, ",%.9g", v);
      out << buf;
    };
    put(row.loss.exp);
    put(row.loss.lip);
    put(row.loss.con);
    put(row.loss.vel);
    if (with_distill_column) put(row.loss.dis);
    put(row.loss.total);
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

#define FACEDIFF_INSTANTIATE_TRAINING(S)                                                      \
  template nn::Var<S> expression_loss(nn::Var<S>, nn::Var<S>);                               \
  template nn::Var<S> lip_loss(nn::Var<S>, nn::Var<S>, const std::vector<int>&);              \
  template nn::Var<S> velocity_loss(nn::Var<S>, nn::Var<S>, Eigen::Index, Eigen::Index);      \
  template std::vector<Example<S>> prepare_examples(const std::vector<const data::Sample*>&,  \
                                                    const model::DenoiserModel<S>&,           \
                                                    const personalization::IdentityLibrary<S>&); \
  template TrainResult<S> train_loop(const TrainConfig&, const std::vector<const data::Sample*>&, \
                                     model::DenoiserModel<S>&,                                \
                                     personalization::IdentityLibrary<S>&, const ExtraLoss<S>&); \
  template TrainResult<S> train_teacher(const TrainConfig&,                                   \
                                        const std::vector<const data::Sample*>&,              \
                                        model::DenoiserModel<S>&,                             \
                                        personalization::IdentityLibrary<S>&);                \
  template LossBreakdown evaluate_batch(const TrainConfig&, const std::vector<const Example<S>*>&, \
                                        const std::vector<int>&, const Mat<S>&,               \
                                        const model::DenoiserModel<S>&,                       \
                                        const personalization::IdentityLibrary<S>&);

FACEDIFF_INSTANTIATE_TRAINING(float)
FACEDIFF_INSTANTIATE_TRAINING(double)

}  // namespace facediff::training
