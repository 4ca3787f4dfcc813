#include "facediff/personalization.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "facediff/errors.hpp"
#include "facediff/rng.hpp"

namespace facediff::personalization {

template <class S>
IdentityLibrary<S>::IdentityLibrary(int dim, double temperature)
    : dim_(dim), temperature_(temperature) {
  if (dim < 1) throw ConfigError("identity embedding width must be positive");
  if (!(temperature > 0.0)) throw ConfigError("contrastive temperature must be positive");
  params_.add(kParamName, Mat<S>(0, dim));
}

template <class S>
bool IdentityLibrary<S>::contains(const std::string& speaker_id) const {
  return std::find(speaker_ids_.begin(), speaker_ids_.end(), speaker_id) != speaker_ids_.end();
}

template <class S>
int IdentityLibrary<S>::index_of(const std::string& speaker_id) const {
  const auto it = std::find(speaker_ids_.begin(), speaker_ids_.end(), speaker_id);
  if (it == speaker_ids_.end()) {
    throw LookupError("speaker '" + speaker_id + "' is not enrolled");
  }
  return static_cast<int>(it - speaker_ids_.begin());
}

template <class S>
Mat<S> IdentityLibrary<S>::embedding(const std::string& speaker_id) const {
  return embeddings().row(index_of(speaker_id));
}

template <class S>
void IdentityLibrary<S>::enroll(const std::string& speaker_id, std::uint64_t init_seed) {
  if (speaker_id.empty()) throw EnrollmentError("speaker id must not be empty");
  if (contains(speaker_id)) {
    throw EnrollmentError("speaker '" + speaker_id + "' is already enrolled");
  }
  Rng rng(derive_seed(init_seed, "identity", speaker_ids_.size()));
  const Mat<S> row = standard_normal<Mat<S>>(1, dim_, rng);
  auto& p = params_.at(kParamName);
  Mat<S> grown(p.value.rows() + 1, dim_);
  grown.topRows(p.value.rows()) = p.value;
  grown.bottomRows(1) = row;
  p.value = std::move(grown);
  if (!p.frozen_rows.empty()) p.frozen_rows.push_back(false);
  speaker_ids_.push_back(speaker_id);
}

template <class S>
void IdentityLibrary<S>::assign(std::vector<std::string> speaker_ids, Mat<S> embeddings) {
  if (static_cast<Eigen::Index>(speaker_ids.size()) != embeddings.rows() ||
      embeddings.cols() != dim_) {
    throw DimensionError("identity library: " + std::to_string(speaker_ids.size()) +
                         " speakers but embedding block is " +
                         std::to_string(embeddings.rows()) + "x" +
                         std::to_string(embeddings.cols()));
  }
  std::vector<std::string> sorted = speaker_ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw EnrollmentError("identity library lists a speaker twice");
  }
  if (!embeddings.allFinite()) throw NumericFault("identity library holds non-finite values");
  speaker_ids_ = std::move(speaker_ids);
  auto& p = params_.at(kParamName);
  p.value = std::move(embeddings);
  p.frozen_rows.clear();
}

template <class S>
void IdentityLibrary<S>::freeze_all_except(const std::vector<std::string>& trainable_ids) {
  auto& p = params_.at(kParamName);
  p.frozen_rows.assign(speaker_ids_.size(), true);
  for (const auto& id : trainable_ids) {
    p.frozen_rows[static_cast<std::size_t>(index_of(id))] = false;
  }
}

template <class S>
void IdentityLibrary<S>::unfreeze_all() {
  params_.at(kParamName).frozen_rows.clear();
}

template <class S>
std::string IdentityLibrary<S>::manifest() const {
  std::string out;
  for (const auto& id : speaker_ids_) out += id + "\n";
  return out;
}

std::vector<std::string> parse_library_manifest(const std::string& text) {
  std::vector<std::string> ids;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    ids.push_back(line.substr(b, e - b + 1));
  }
  return ids;
}

// ---- contrastive ---------------------------------------------------------------

template <class S>
nn::Var<S> contrast_logits(nn::Var<S> identity_feats, nn::Var<S> audio_feats,
                           double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("contrastive temperature must be positive");
  if (identity_feats.rows() < 1) throw ContractError("contrast_logits: empty batch");
  if (identity_feats.cols() != audio_feats.cols()) {
    throw DimensionError("contrast_logits: identity and audio feature widths differ");
  }
  auto a = nn::l2_normalize_rows(identity_feats);
  auto b = nn::l2_normalize_rows(audio_feats);
  return nn::scale(nn::matmul(a, nn::transpose(b)), 1.0 / temperature);
}

template <class S>
nn::Var<S> contrast_loss(nn::Var<S> logits) {
  if (logits.rows() != logits.cols()) {
    throw ContractError("contrast_loss: logits must be square, got " +
                        std::to_string(logits.rows()) + "x" + std::to_string(logits.cols()));
  }
  auto rows = nn::cross_entropy_diagonal(logits);
  auto cols = nn::cross_entropy_diagonal(nn::transpose(logits));
  return nn::scale(nn::add(rows, cols), 0.5);
}

Mat<double> contrast_logits(const Mat<double>& identity_feats, const Mat<double>& audio_feats,
                            double temperature) {
  nn::Graph<double> g(nn::Graph<double>::Mode::inference);
  return contrast_logits(g.constant(identity_feats), g.constant(audio_feats), temperature)
      .value();
}

double contrast_loss(const Mat<double>& logits) {
  nn::Graph<double> g(nn::Graph<double>::Mode::inference);
  return contrast_loss(g.constant(logits)).value()(0, 0);
}

// ---- matching ------------------------------------------------------------------

template <class S>
Mat<S> library_features(const model::DenoiserModel<S>& model, const IdentityLibrary<S>& library) {
  if (library.empty()) throw LookupError("identity library is empty");
  nn::Graph<S> g(nn::Graph<S>::Mode::inference);
  auto feats = model::identity_features(g, model, g.constant(library.embeddings()));
  return nn::l2_normalize(feats.value());
}

template <class S>
MatchResult match_features(const Mat<S>& audio_global, const Mat<S>& features,
                           const std::vector<std::string>& speaker_ids) {
  if (speaker_ids.empty()) throw LookupError("identity library is empty");
  if (audio_global.rows() != 1 || audio_global.cols() != features.cols()) {
    throw DimensionError("match_identity: audio feature width " +
                         std::to_string(audio_global.cols()) + " vs identity feature width " +
                         std::to_string(features.cols()));
  }
  const Eigen::VectorXd a = nn::l2_normalize(audio_global).template cast<double>().transpose();
  const Eigen::VectorXd scores = features.template cast<double>() * a;
  std::vector<std::size_t> order(speaker_ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    return scores(static_cast<Eigen::Index>(x)) > scores(static_cast<Eigen::Index>(y));
  });
  MatchResult result;
  for (std::size_t i : order) {
    result.ranked.emplace_back(speaker_ids[i], scores(static_cast<Eigen::Index>(i)));
  }
  result.speaker_id = result.ranked.front().first;
  result.score = result.ranked.front().second;
  return result;
}

template <class S>
MatchResult match_identity(const Mat<S>& audio_global, const IdentityLibrary<S>& library,
                           const model::DenoiserModel<S>& model) {
  return match_features<S>(audio_global, library_features(model, library),
                           library.speaker_ids());
}

#define FACEDIFF_INSTANTIATE_PERSONALIZATION(S)                                           \
  template class IdentityLibrary<S>;                                                      \
  template nn::Var<S> contrast_logits(nn::Var<S>, nn::Var<S>, double);                    \
  template nn::Var<S> contrast_loss(nn::Var<S>);                                          \
  template Mat<S> library_features(const model::DenoiserModel<S>&,                        \
                                   const IdentityLibrary<S>&);                            \
  template MatchResult match_features(const Mat<S>&, const Mat<S>&,                       \
                                      const std::vector<std::string>&);                   \
  template MatchResult match_identity(const Mat<S>&, const IdentityLibrary<S>&,           \
                                      const model::DenoiserModel<S>&);

FACEDIFF_INSTANTIATE_PERSONALIZATION(float)
FACEDIFF_INSTANTIATE_PERSONALIZATION(double)

}  // namespace facediff::personalization
