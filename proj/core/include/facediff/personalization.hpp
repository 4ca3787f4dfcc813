#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "facediff/autodiff.hpp"
#include "facediff/model.hpp"

namespace facediff::personalization {

template <class S>
using Mat = nn::Mat<S>;

inline constexpr double kDefaultTemperature = 0.07;

// Speaker-id -> learnable embedding map. The embeddings live in one
// parameter block (one row per speaker, library order) so they checkpoint
// and optimize like any other weight.
template <class S>
class IdentityLibrary {
 public:
  static constexpr const char* kParamName = "identity.embeddings";

  explicit IdentityLibrary(int dim = 32, double temperature = kDefaultTemperature);

  int dim() const { return dim_; }
  double temperature() const { return temperature_; }
  std::size_t size() const { return speaker_ids_.size(); }
  bool empty() const { return speaker_ids_.empty(); }
  const std::vector<std::string>& speaker_ids() const { return speaker_ids_; }
  bool contains(const std::string& speaker_id) const;
  // Throws LookupError for unknown speakers.
  int index_of(const std::string& speaker_id) const;

  const Mat<S>& embeddings() const { return params_.at(kParamName).value; }
  Mat<S>& embeddings() { return params_.at(kParamName).value; }
  Mat<S> embedding(const std::string& speaker_id) const;

  // Appends a freshly drawn trainable embedding; duplicate ids throw
  // EnrollmentError and leave the library unchanged.
  void enroll(const std::string& speaker_id, std::uint64_t init_seed);
  // Restores a stored library (checkpoint load).
  void assign(std::vector<std::string> speaker_ids, Mat<S> embeddings);

  // Only the listed speakers' rows receive updates.
  void freeze_all_except(const std::vector<std::string>& trainable_ids);
  void unfreeze_all();

  nn::ParameterSet<S>& params() { return params_; }
  const nn::ParameterSet<S>& params() const { return params_; }

  // Sidecar text: one speaker id per line in library order.
  std::string manifest() const;

  template <class T>
  IdentityLibrary<T> cast() const {
    IdentityLibrary<T> out(dim_, temperature_);
    out.assign(speaker_ids_, embeddings().template cast<T>());
    out.params().at(kParamName).frozen_rows = params_.at(kParamName).frozen_rows;
    return out;
  }

 private:
  int dim_;
  double temperature_;
  std::vector<std::string> speaker_ids_;
  nn::ParameterSet<S> params_;
};

std::vector<std::string> parse_library_manifest(const std::string& text);

// Scaled cosine similarities: rows of identity_feats against rows of audio_feats.
template <class S>
nn::Var<S> contrast_logits(nn::Var<S> identity_feats, nn::Var<S> audio_feats,
                           double temperature);
// Mean of the row-wise and column-wise cross-entropy against diagonal labels.
template <class S>
nn::Var<S> contrast_loss(nn::Var<S> logits);

Mat<double> contrast_logits(const Mat<double>& identity_feats, const Mat<double>& audio_feats,
                            double temperature);
double contrast_loss(const Mat<double>& logits);

struct MatchResult {
  std::string speaker_id;
  double score = 0.0;
  std::vector<std::pair<std::string, double>> ranked;  // descending score
};

// Encoded, normalized library features (one row per speaker).
template <class S>
Mat<S> library_features(const model::DenoiserModel<S>& model, const IdentityLibrary<S>& library);

template <class S>
MatchResult match_identity(const Mat<S>& audio_global, const IdentityLibrary<S>& library,
                           const model::DenoiserModel<S>& model);

// Same, with precomputed library_features.
template <class S>
MatchResult match_features(const Mat<S>& audio_global, const Mat<S>& features,
                           const std::vector<std::string>& speaker_ids);

}  // namespace facediff::personalization
