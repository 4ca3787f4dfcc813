#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "facediff/blendshapes.hpp"
#include "facediff/errors.hpp"
#include "facediff/kv_text.hpp"
#include "facediff/metrics.hpp"
#include "facediff/rng.hpp"
#include "tempdir.hpp"

namespace {

using namespace facediff;
using data::Matrix;

double loop_mbe(const Matrix& p, const Matrix& g, const std::vector<int>& channels) {
  double total = 0.0;
  for (Eigen::Index f = 0; f < p.rows(); ++f) {
    double sq = 0.0;
    for (int c : channels) sq += (p(f, c) - g(f, c)) * (p(f, c) - g(f, c));
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(p.rows());
}

std::vector<int> all_channels() {
  std::vector<int> c(52);
  for (int i = 0; i < 52; ++i) c[static_cast<std::size_t>(i)] = i;
  return c;
}

double loop_std(const Matrix& m, int c) {
  double mean = 0.0;
  for (Eigen::Index f = 0; f < m.rows(); ++f) mean += m(f, c);
  mean /= static_cast<double>(m.rows());
  double ss = 0.0;
  for (Eigen::Index f = 0; f < m.rows(); ++f) ss += (m(f, c) - mean) * (m(f, c) - mean);
  return std::sqrt(ss / static_cast<double>(m.rows()));
}

TEST(Mbe, Examples) {
  Rng rng(1);
  const auto g = uniform<Matrix>(12, 52, 0, 1, rng);
  EXPECT_EQ(metrics::mbe(g, g), 0.0);
  EXPECT_NEAR(metrics::mbe(Matrix(g.array() + 0.1), g), 0.1 * std::sqrt(52.0), 1e-12);
  EXPECT_THROW(metrics::mbe(g, Matrix(11, 52)), DimensionError);
  EXPECT_THROW(metrics::mbe(Matrix(0, 52), Matrix(0, 52)), InputError);
}

TEST(Mbe, MatchesLoopOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = uniform<Matrix>(7 + trial, 52, 0, 1, rng);
    const auto g = uniform<Matrix>(7 + trial, 52, 0, 1, rng);
    EXPECT_NEAR(metrics::mbe(p, g), loop_mbe(p, g, all_channels()), 1e-12);
    EXPECT_NEAR(metrics::lbe(p, g, blendshapes::lip_channels()),
                loop_mbe(p, g, blendshapes::lip_channels()), 1e-12);
  }
}

TEST(Lbe, EqualsMbeOnLipSubmatrix) {
  Rng rng(3);
  const auto p = uniform<Matrix>(9, 52, 0, 1, rng);
  const auto g = uniform<Matrix>(9, 52, 0, 1, rng);
  const auto& lips = blendshapes::lip_channels();
  Matrix ps(9, static_cast<Eigen::Index>(lips.size())), gs(ps.rows(), ps.cols());
  for (std::size_t i = 0; i < lips.size(); ++i) {
    ps.col(static_cast<Eigen::Index>(i)) = p.col(lips[i]);
    gs.col(static_cast<Eigen::Index>(i)) = g.col(lips[i]);
  }
  EXPECT_NEAR(metrics::lbe(p, g, lips), metrics::mbe(ps, gs), 1e-13);

  // Errors confined to non-lip channels leave lbe at zero.
  Matrix off = g;
  off.col(blendshapes::channel_index("browDownLeft")).array() += 0.5;
  EXPECT_EQ(metrics::lbe(off, g, lips), 0.0);
  EXPECT_GT(metrics::mbe(off, g), 0.0);
  EXPECT_THROW(metrics::lbe(p, g, {}), ConfigError);
  EXPECT_THROW(metrics::lbe(p, g, {52}), DimensionError);
}

TEST(Fdd, Examples) {
  const auto channels = all_channels();
  const Matrix flat = Matrix::Constant(5, 52, 0.4);
  EXPECT_EQ(metrics::fdd(flat, flat, channels), 0.0);

  // Two channels over four frames, population std by hand.
  const Matrix p = (Matrix(4, 2) << 0, 1, 1, 1, 0, 1, 1, 1).finished();
  const Matrix g = (Matrix(4, 2) << 0, 0, 0, 0, 0, 0, 0, 2).finished();
  // p: std 0.5 and 0. g: std 0 and sqrt(0.75).
  const double expected = 0.5 * ((0.5 - 0.0) + (0.0 - std::sqrt(0.75)));
  EXPECT_NEAR(metrics::fdd_signed(p, g, {0, 1}), expected, 1e-14);
  EXPECT_NEAR(metrics::fdd(p, g, {0, 1}), std::abs(expected), 1e-14);
  EXPECT_THROW(metrics::fdd(Matrix::Zero(1, 2), Matrix::Zero(1, 2), {0}), InputError);
}

TEST(Fdd, OracleAndSymmetries) {
  Rng rng(4);
  const auto channels = blendshapes::upper_face_channels();
  for (int trial = 0; trial < 4; ++trial) {
    const auto p = uniform<Matrix>(20, 52, 0, 1, rng);
    const auto g = uniform<Matrix>(20, 52, 0, 0.5, rng);
    double oracle = 0.0;
    for (int c : channels) oracle += loop_std(p, c) - loop_std(g, c);
    oracle /= static_cast<double>(channels.size());
    EXPECT_NEAR(metrics::fdd_signed(p, g, channels), oracle, 1e-12);
    EXPECT_NEAR(metrics::fdd_signed(g, p, channels), -oracle, 1e-12);
    EXPECT_NEAR(metrics::fdd(g, p, channels), metrics::fdd(p, g, channels), 1e-12);
    // Dynamics are blind to a constant offset.
    EXPECT_NEAR(metrics::fdd(Matrix(p.array() + 0.3), p, channels), 0.0, 1e-12);
  }
}

TEST(IdentityReport, ConfusionMatrixOracle) {
  Rng rng(5);
  const std::vector<std::string> labels{"a", "b", "c", "d"};
  std::uniform_int_distribution<int> pick(0, 3);
  std::bernoulli_distribution correct(0.6);
  std::vector<std::pair<std::string, std::string>> matches;
  for (int i = 0; i < 200; ++i) {
    const auto& truth = labels[static_cast<std::size_t>(pick(rng))];
    matches.emplace_back(correct(rng) ? truth : labels[static_cast<std::size_t>(pick(rng))], truth);
  }
  std::map<std::pair<std::string, std::string>, int> confusion;
  for (const auto& m : matches) ++confusion[m];
  double p_sum = 0.0, r_sum = 0.0;
  for (const auto& l : labels) {
    int tp = confusion[{l, l}], pred = 0, actual = 0;
    for (const auto& o : labels) {
      pred += confusion[{l, o}];
      actual += confusion[{o, l}];
    }
    const double p = pred ? static_cast<double>(tp) / pred : 0.0;
    const double r = actual ? static_cast<double>(tp) / actual : 0.0;
    p_sum += p;
    r_sum += r;
  }
  const auto report = metrics::identity_report(matches);
  const double p = p_sum / 4.0, r = r_sum / 4.0;
  EXPECT_NEAR(report.precision, p, 1e-12);
  EXPECT_NEAR(report.recall, r, 1e-12);
  EXPECT_NEAR(report.f1, 2.0 * p * r / (p + r), 1e-12);
  int support = 0;
  for (const auto& [label, scores] : report.per_class) support += scores.support;
  EXPECT_EQ(support, 200);
}

TEST(IdentityReport, EdgeCases) {
  const auto perfect = metrics::identity_report({{"a", "a"}, {"b", "b"}});
  EXPECT_EQ(perfect.f1, 1.0);
  // "z" is predicted but never true: its recall is 0/0 and counts as 0.
  const auto r = metrics::identity_report({{"z", "a"}, {"a", "a"}});
  EXPECT_EQ(r.per_class.size(), 2u);
  EXPECT_EQ(r.per_class.at("z").precision, 0.0);
  EXPECT_EQ(r.per_class.at("z").recall, 0.0);
  EXPECT_EQ(r.per_class.at("a").precision, 1.0);
  EXPECT_EQ(r.per_class.at("a").recall, 0.5);
  EXPECT_THROW(metrics::identity_report({}), InputError);
}

TEST(Report, ValidateKeyValuesAndCsv) {
  metrics::MetricsReport rep;
  rep.mbe = 0.4;
  rep.lbe = 0.1;
  rep.f1 = 1.0;
  rep.steps = 8;
  rep.distilled = true;
  rep.checkpoint_id = "ck";
  EXPECT_NO_THROW(rep.validate());
  const auto kv = rep.to_key_values();
  EXPECT_EQ(parse_double("lbe", kv.at("lbe")), 0.1);
  EXPECT_EQ(kv.at("distilled"), "true");

  test_support::TempDir dir("metrics");
  metrics::append_results_csv(rep, dir / "r.csv");
  metrics::append_results_csv(rep, dir / "r.csv");
  const auto text = read_text_file(dir / "r.csv");
  EXPECT_EQ(text.rfind(metrics::MetricsReport::csv_header(), 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);

  rep.f1 = 1.5;
  EXPECT_THROW(rep.validate(), NumericFault);
  rep.f1 = 1.0;
  rep.mbe = std::nan("");
  EXPECT_THROW(rep.validate(), NumericFault);
}

}  // namespace
