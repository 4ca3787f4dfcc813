#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "facediff/autodiff.hpp"
#include "facediff/data.hpp"
#include "facediff/model.hpp"
#include "facediff/optim.hpp"
#include "facediff/personalization.hpp"

namespace facediff::training {

template <class S>
using Mat = nn::Mat<S>;

struct LossWeights {
  double exp = 1.0;
  double lip = 1.0;
  double con = 0.007;
  double vel = 0.5;
  double dis = 0.1;  // only used while distilling
};

enum class Objective {
  full,             // every weighted term enters the graph
  expression_only,  // only the expression term enters the graph
};

struct TrainConfig {
  int epochs = 50;
  int batch_size = 16;
  double learning_rate = 1e-4;
  LossWeights weights;
  int steps = 32;
  std::uint64_t seed = 1;
  std::vector<int> lip_indices;  // empty selects the default lip set
  Objective objective = Objective::full;
  // Only identity-library rows that are not frozen receive updates.
  bool freeze_model = false;

  const std::vector<int>& lips() const;
  void validate() const;
  KeyValues to_key_values() const;
};

struct LossBreakdown {
  double exp = 0.0;
  double lip = 0.0;
  double con = 0.0;
  double vel = 0.0;
  double dis = 0.0;
  double total = 0.0;
  // The differentiated objective as the graph computed it (working precision).
  double graph_total = 0.0;

  // weighted sum of the components under w
  double recompose(const LossWeights& w) const {
    return w.exp * exp + w.lip * lip + w.con * con + w.vel * vel + w.dis * dis;
  }
};

struct HistoryRow {
  int step = 0;
  int epoch = 0;
  LossBreakdown loss;
};

// ---- component losses (graph) ------------------------------------------------
template <class S>
nn::Var<S> expression_loss(nn::Var<S> x0_hat, nn::Var<S> x0);
template <class S>
nn::Var<S> lip_loss(nn::Var<S> x0_hat, nn::Var<S> x0, const std::vector<int>& lip_indices);
// Inputs in frame-major layout: frame f of sequence b at row f * batch + b.
template <class S>
nn::Var<S> velocity_loss(nn::Var<S> x0_hat, nn::Var<S> x0, Eigen::Index frames,
                         Eigen::Index batch);

// ---- component losses (plain, single sequence) ---------------------------------
double expression_loss(const data::Matrix& x0_hat, const data::Matrix& x0);
double lip_loss(const data::Matrix& x0_hat, const data::Matrix& x0,
                const std::vector<int>& lip_indices);
// Returns 0 (and logs a warning) for single-frame input.
double velocity_loss(const data::Matrix& x0_hat, const data::Matrix& x0);

// Encoded training example; the frozen audio encoder runs once per sequence.
template <class S>
struct Example {
  const data::Sample* sample = nullptr;
  Mat<S> audio;         // frames x audio_feature_dim
  Mat<S> audio_global;  // 1 x audio_feature_dim
  Mat<S> x0;            // frames x 52
  int speaker_row = -1;
};

template <class S>
std::vector<Example<S>> prepare_examples(const std::vector<const data::Sample*>& samples,
                                         const model::DenoiserModel<S>& model,
                                         const personalization::IdentityLibrary<S>& library);

// Per-epoch batches with at most one sequence per speaker and a shared frame
// count; deterministic given the seed.
std::vector<std::vector<int>> make_batches(const std::vector<std::string>& speakers,
                                           const std::vector<int>& frames, int batch_size,
                                           std::uint64_t seed);

// What the loop hands to an extra loss term for the current batch.
template <class S>
struct BatchContext {
  nn::Graph<S>* graph = nullptr;
  const std::vector<const Example<S>*>* examples = nullptr;
  Eigen::Index frames = 0;
  Eigen::Index batch = 0;
  std::vector<int> steps;
  Mat<S> x0;   // frame-major
  Mat<S> eps;  // frame-major
  Mat<S> x_t;  // frame-major
  Mat<S> audio;
  Mat<S> identity;  // batch x identity_dim
  nn::Var<S> x0_hat;
};

// Returns an unweighted scalar loss variable; the loop multiplies it by
// weights.dis and records its value in LossBreakdown::dis.
template <class S>
using ExtraLoss = std::function<nn::Var<S>(BatchContext<S>&)>;

template <class S>
struct TrainResult {
  std::vector<HistoryRow> history;
  nn::AdamState<S> model_optimizer;
  nn::AdamState<S> library_optimizer;
};

// Shared denoise-training loop. The model's schedule decides the step range.
template <class S>
TrainResult<S> train_loop(const TrainConfig& config, const std::vector<const data::Sample*>& samples,
                          model::DenoiserModel<S>& model,
                          personalization::IdentityLibrary<S>& library,
                          const ExtraLoss<S>& extra = {});

template <class S>
TrainResult<S> train_teacher(const TrainConfig& config,
                             const std::vector<const data::Sample*>& samples,
                             model::DenoiserModel<S>& model,
                             personalization::IdentityLibrary<S>& library);

// Loss on one fixed batch without updating anything (used by tests and the
// gradient checks).
template <class S>
LossBreakdown evaluate_batch(const TrainConfig& config, const std::vector<const Example<S>*>& batch,
                             const std::vector<int>& steps, const Mat<S>& eps_frame_major,
                             const model::DenoiserModel<S>& model,
                             const personalization::IdentityLibrary<S>& library);

void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path,
                       bool with_distill_column = false);

}  // namespace facediff::training
