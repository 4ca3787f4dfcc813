#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "facediff/data.hpp"
#include "facediff/kv_text.hpp"

namespace facediff::metrics {

// Mean over frames of the per-frame Euclidean distance.
double mbe(const data::Matrix& pred, const data::Matrix& gt);
double mbe(const data::BlendshapeSequence& pred, const data::BlendshapeSequence& gt);

// mbe restricted to the given channels (default: lip set).
double lbe(const data::Matrix& pred, const data::Matrix& gt, const std::vector<int>& channels);
double lbe(const data::BlendshapeSequence& pred, const data::BlendshapeSequence& gt);

// Mean over channels of std_over_frames(pred) - std_over_frames(gt)
// (population standard deviation). fdd() is its absolute value.
double fdd_signed(const data::Matrix& pred, const data::Matrix& gt,
                  const std::vector<int>& channels);
double fdd(const data::Matrix& pred, const data::Matrix& gt, const std::vector<int>& channels);
double fdd(const data::BlendshapeSequence& pred, const data::BlendshapeSequence& gt);

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  int support = 0;
};

struct IdentityScores {
  double precision = 0.0;  // macro average
  double recall = 0.0;     // macro average
  double f1 = 0.0;         // harmonic mean of the macro averages
  std::map<std::string, ClassScores> per_class;
};

// matches: (predicted speaker, true speaker). Labels are the union of both
// columns; 0/0 counts as 0.
IdentityScores identity_report(const std::vector<std::pair<std::string, std::string>>& matches);

struct MetricsReport {
  double mbe = 0.0;
  double lbe = 0.0;
  double fdd_abs = 0.0;
  double itf = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int steps = 0;
  bool distilled = false;
  std::string checkpoint_id;
  int sequences = 0;

  void validate() const;
  KeyValues to_key_values() const;
  static std::string csv_header();
  std::string csv_row() const;
};

// Appends one row, writing the header first when the file is new.
void append_results_csv(const MetricsReport& report, const std::filesystem::path& path);

}  // namespace facediff::metrics
