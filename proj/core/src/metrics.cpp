#include "facediff/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "facediff/blendshapes.hpp"
#include "facediff/errors.hpp"

namespace facediff::metrics {

namespace {

void require_same_shape(const char* what, const data::Matrix& a, const data::Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(what) + ": shapes " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + " differ");
  }
  if (a.rows() == 0) throw InputError(std::string(what) + ": empty sequence");
}

void require_channels(const char* what, const data::Matrix& m, const std::vector<int>& channels) {
  if (channels.empty()) throw ConfigError(std::string(what) + ": empty channel set");
  for (int c : channels) {
    if (c < 0 || c >= m.cols()) {
      throw DimensionError(std::string(what) + ": channel " + std::to_string(c) +
                           " outside the matrix");
    }
  }
}

double temporal_std(const data::Matrix& m, int c) {
  const double mean = m.col(c).mean();
  return std::sqrt((m.col(c).array() - mean).square().mean());
}

double safe_ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

}  // namespace

double mbe(const data::Matrix& pred, const data::Matrix& gt) {
  require_same_shape("mbe", pred, gt);
  return (pred - gt).rowwise().norm().mean();
}

double mbe(const data::BlendshapeSequence& pred, const data::BlendshapeSequence& gt) {
  return mbe(pred.values, gt.values);
}

double lbe(const data::Matrix& pred, const data::Matrix& gt, const std::vector<int>& channels) {
  require_same_shape("lbe", pred, gt);
  require_channels("lbe", pred, channels);
  double total = 0.0;
  for (Eigen::Index f = 0; f < pred.rows(); ++f) {
    double sq = 0.0;
    for (int c : channels) {
      const double d = pred(f, c) - gt(f, c);
      sq += d * d;
    }
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(pred.rows());
}

double lbe(const data::BlendshapeSequence& pred, const data::BlendshapeSequence& gt) {
  return lbe(pred.values, gt.values, blendshapes::lip_channels());
}

double fdd_signed(const data::Matrix& pred, const data::Matrix& gt,
                  const std::vector<int>& channels) {
  require_same_shape("fdd", pred, gt);
  require_channels("fdd", pred, channels);
  if (pred.rows() < 2) throw InputError("fdd: dynamics need at least two frames");
  double total = 0.0;
  for (int c : channels) total += temporal_std(pred, c) - temporal_std(gt, c);
  return total / static_cast<double>(channels.size());
}

double fdd(const data::Matrix& pred, const data::Matrix& gt, const std::vector<int>& channels) {
  return std::abs(fdd_signed(pred, gt, channels));
}

double fdd(const data::BlendshapeSequence& pred, const data::BlendshapeSequence& gt) {
  return fdd(pred.values, gt.values, blendshapes::upper_face_channels());
}

IdentityScores identity_report(const std::vector<std::pair<std::string, std::string>>& matches) {
  if (matches.empty()) throw InputError("identity_report: no matches");
  std::set<std::string> labels;
  for (const auto& [pred, truth] : matches) {
    labels.insert(pred);
    labels.insert(truth);
  }
  IdentityScores out;
  for (const auto& label : labels) {
    int tp = 0, fp = 0, fn = 0;
    for (const auto& [pred, truth] : matches) {
      if (pred == label && truth == label) ++tp;
      else if (pred == label) ++fp;
      else if (truth == label) ++fn;
    }
    ClassScores cs;
    cs.precision = safe_ratio(tp, tp + fp);
    cs.recall = safe_ratio(tp, tp + fn);
    cs.support = tp + fn;
    out.precision += cs.precision;
    out.recall += cs.recall;
    out.per_class[label] = cs;
  }
  out.precision /= static_cast<double>(labels.size());
  out.recall /= static_cast<double>(labels.size());
  out.f1 = safe_ratio(2.0 * out.precision * out.recall, out.precision + out.recall);
  return out;
}

void MetricsReport::validate() const {
  for (double v : {mbe, lbe, fdd_abs, itf}) {
    if (!(v >= 0.0)) throw NumericFault("metrics report holds a negative or non-finite metric");
  }
  for (double v : {precision, recall, f1}) {
    if (!(v >= 0.0 && v <= 1.0)) throw NumericFault("identity rate outside [0, 1]");
  }
}

KeyValues MetricsReport::to_key_values() const {
  KeyValues kv;
  kv["mbe"] = format_double(mbe);
  kv["lbe"] = format_double(lbe);
  kv["fdd_abs"] = format_double(fdd_abs);
  kv["itf"] = format_double(itf);
  kv["precision"] = format_double(precision);
  kv["recall"] = format_double(recall);
  kv["f1"] = format_double(f1);
  kv["steps"] = std::to_string(steps);
  kv["distilled"] = distilled ? "true" : "false";
  kv["checkpoint_id"] = checkpoint_id;
  kv["sequences"] = std::to_string(sequences);
  return kv;
}

std::string MetricsReport::csv_header() {
  return "checkpoint_id,steps,distilled,sequences,mbe,lbe,fdd_abs,itf,precision,recall,f1";
}

std::string MetricsReport::csv_row() const {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                checkpoint_id.c_str(), steps, distilled ? 1 : 0, sequences, mbe, lbe, fdd_abs,
                itf, precision, recall, f1);
  return buf;
}

void append_results_csv(const MetricsReport& report, const std::filesystem::path& path) {
  const bool fresh = !std::filesystem::exists(path);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot write " + path.string());
  if (fresh) out << MetricsReport::csv_header() << '\n';
  out << report.csv_row() << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace facediff::metrics
