#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "facediff/blendshapes.hpp"
#include "facediff/data.hpp"
#include "facediff/rng.hpp"
#include "facediff/errors.hpp"
#include "facediff/kv_text.hpp"
#include "tempdir.hpp"

namespace {

using namespace facediff;
using data::Matrix;

const data::SyntheticCorpus& small_corpus() {
  static const auto corpus = data::generate_corpus(8, 12, 100, 7);
  return corpus;
}

double correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::VectorXd x = a.array() - a.mean();
  const Eigen::VectorXd y = b.array() - b.mean();
  const double den = std::sqrt(x.squaredNorm() * y.squaredNorm());
  return den > 0.0 ? x.dot(y) / den : 0.0;
}

Eigen::VectorXd channel_mean(const Matrix& values, const std::vector<int>& channels) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(values.rows());
  for (int c : channels) out += values.col(c);
  return out / static_cast<double>(channels.size());
}

TEST(Blendshapes, ChannelGroups) {
  EXPECT_EQ(blendshapes::lip_channels().size(), 28u);
  EXPECT_EQ(blendshapes::upper_face_channels().size(), 21u);
  std::set<std::string_view> names(blendshapes::kChannelNames.begin(),
                                   blendshapes::kChannelNames.end());
  EXPECT_EQ(names.size(), 52u);
  for (int c : blendshapes::lip_channels()) {
    const auto name = blendshapes::kChannelNames[static_cast<std::size_t>(c)];
    EXPECT_TRUE(name.rfind("mouth", 0) == 0 || name.rfind("jaw", 0) == 0 || name == "tongueOut")
        << name;
  }
  EXPECT_EQ(blendshapes::channel_index("jawOpen"), 17);
}

TEST(Generate, SameSeedBitIdentical) {
  const auto a = data::generate_corpus(3, 4, 40, 99);
  const auto b = data::generate_corpus(3, 4, 40, 99);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    const auto& x = a.samples[i];
    const auto& y = b.samples[i];
    EXPECT_EQ(x.id, y.id);
    EXPECT_EQ(0, std::memcmp(x.blendshapes.values.data(), y.blendshapes.values.data(),
                             sizeof(double) * static_cast<std::size_t>(x.blendshapes.values.size())));
    EXPECT_EQ(0, std::memcmp(x.audio.values.data(), y.audio.values.data(),
                             sizeof(double) * static_cast<std::size_t>(x.audio.values.size())));
  }
  EXPECT_EQ(a.split.test, b.split.test);
  const auto c = data::generate_corpus(3, 4, 40, 100);
  EXPECT_NE(a.samples[0].blendshapes.values, c.samples[0].blendshapes.values);
}

TEST(Generate, ShapesRangesAndIds) {
  const auto& corpus = small_corpus();
  EXPECT_EQ(corpus.samples.size(), 96u);
  EXPECT_EQ(corpus.speaker_ids().size(), 8u);
  for (const auto& s : corpus.samples) {
    EXPECT_EQ(s.blendshapes.values.cols(), 52);
    EXPECT_EQ(s.blendshapes.frames(), 100);
    EXPECT_EQ(s.audio.frames(), s.blendshapes.frames());
    EXPECT_EQ(s.audio.values.cols(), 64);
    EXPECT_GE(s.blendshapes.values.minCoeff(), 0.0);
    EXPECT_LE(s.blendshapes.values.maxCoeff(), 1.0);
    EXPECT_TRUE(s.audio.values.allFinite());
    EXPECT_EQ(s.id.rfind(s.speaker_id + "_", 0), 0u) << s.id;
  }
}

TEST(Generate, StylesAreDistinctAndInRange) {
  const auto& corpus = small_corpus();
  for (std::size_t i = 0; i < corpus.speakers.size(); ++i) {
    const auto& s = corpus.speakers[i];
    EXPECT_GT(s.lip_gain, 0.0);
    EXPECT_GT(s.jaw_gain, 0.0);
    EXPECT_GT(s.brow_gain, 0.0);
    EXPECT_GT(s.eye_gain, 0.0);
    EXPECT_GE(s.lip_exponent, 0.5);
    EXPECT_LE(s.lip_exponent, 2.0);
    for (std::size_t j = 0; j < i; ++j) {
      EXPECT_GE((s.signature() - corpus.speakers[j].signature()).norm(), 0.15);
    }
  }
}

TEST(Generate, ZeroAmplitudeStyleIsConstantBaseline) {
  auto style = data::sample_style("spk00", 3, 64);
  style.lip_gain = style.jaw_gain = style.brow_gain = style.eye_gain = 0.0;
  style.brow_baseline = 0.2;
  const auto e = data::synthesize_excitation(60, 0.1, 5);
  const auto seq = data::render_blendshapes(style, e, 6);
  for (int c = 0; c < 52; ++c) {
    EXPECT_EQ(seq.values.col(c).minCoeff(), seq.values.col(c).maxCoeff()) << c;
  }
  for (int c : blendshapes::brow_channels()) EXPECT_DOUBLE_EQ(seq.values(0, c), 0.2);
}

TEST(Generate, LipsTrackSpeechMoreThanBrows) {
  double lip = 0.0, brow = 0.0;
  for (const auto& s : small_corpus().samples) {
    const Eigen::VectorXd energy = s.excitation.rowwise().sum();
    lip += correlation(channel_mean(s.blendshapes.values, blendshapes::lip_channels()), energy);
    brow += correlation(channel_mean(s.blendshapes.values, blendshapes::brow_channels()), energy);
  }
  const auto n = static_cast<double>(small_corpus().samples.size());
  EXPECT_GT(lip / n, brow / n);
  EXPECT_GT(lip / n, 0.5);
}

TEST(Generate, UpperFaceLessSpeechDetermined) {
  // Same speaker and excitation, different expression draws: the spread that
  // remains is the part of each channel group speech does not explain.
  const auto& style = small_corpus().speakers[2];
  const auto e = data::synthesize_excitation(100, style.timing_jitter, 11);
  std::vector<Matrix> draws;
  for (std::uint64_t k = 0; k < 6; ++k) draws.push_back(data::render_blendshapes(style, e, 100 + k).values);
  const auto spread = [&](const std::vector<int>& channels) {
    double total = 0.0;
    for (int c : channels) {
      for (int f = 0; f < 100; ++f) {
        double mean = 0.0, sq = 0.0;
        for (const auto& d : draws) mean += d(f, c);
        mean /= draws.size();
        for (const auto& d : draws) sq += (d(f, c) - mean) * (d(f, c) - mean);
        total += sq / (draws.size() - 1);
      }
    }
    return total / (channels.size() * 100.0);
  };
  EXPECT_GT(spread(blendshapes::brow_channels()), 2.0 * spread(blendshapes::lip_channels()));
}

TEST(Generate, CentroidClassifierFindsSpeakers) {
  const auto& corpus = small_corpus();
  const auto global = [](const data::Sample& s) {
    Eigen::RowVectorXd m = s.audio.values.colwise().mean();
    return Eigen::RowVectorXd(m / m.norm());
  };
  std::map<std::string, Eigen::RowVectorXd> centroid;
  std::map<std::string, int> count;
  for (const auto* s : corpus.split_samples("train")) {
    auto& c = centroid[s->speaker_id];
    if (c.size() == 0) c = Eigen::RowVectorXd::Zero(64);
    c += global(*s);
    ++count[s->speaker_id];
  }
  int correct = 0, total = 0;
  for (const auto* s : corpus.split_samples("test")) {
    const auto g = global(*s);
    std::string best;
    double best_d = INFINITY;
    for (const auto& [id, c] : centroid) {
      const double d = (g - c / count[id]).norm();
      if (d < best_d) {
        best_d = d;
        best = id;
      }
    }
    correct += best == s->speaker_id;
    ++total;
  }
  EXPECT_GT(static_cast<double>(correct) / total, 1.0 / 8.0 + 0.25);
}

TEST(Split, CountsAndStratification) {
  const auto corpus = data::generate_corpus(8, 50, 8, 3);
  const auto split = data::split_corpus(corpus, 0.2, 17);
  EXPECT_EQ(split.test.size(), 80u);
  EXPECT_EQ(split.train.size(), 320u);
  std::map<std::string, int> per;
  for (const auto& id : split.test) ++per[corpus.sample(id).speaker_id];
  EXPECT_EQ(per.size(), 8u);
  for (const auto& [spk, n] : per) EXPECT_LE(std::abs(n - 10), 1) << spk;
  std::set<std::string> all(split.train.begin(), split.train.end());
  for (const auto& id : split.test) EXPECT_TRUE(all.insert(id).second) << id;
  EXPECT_EQ(all.size(), 400u);

  const auto again = data::split_corpus(corpus, 0.2, 17);
  EXPECT_EQ(again.test, split.test);
  EXPECT_EQ(again.train, split.train);
}

TEST(Split, TwoPerSpeakerHalves) {
  const auto corpus = data::generate_corpus(4, 2, 8, 3);
  const auto split = data::split_corpus(corpus, 0.5, 1);
  std::map<std::string, int> test, train;
  for (const auto& id : split.test) ++test[corpus.sample(id).speaker_id];
  for (const auto& id : split.train) ++train[corpus.sample(id).speaker_id];
  for (const auto& spk : corpus.speaker_ids()) {
    EXPECT_EQ(test[spk], 1);
    EXPECT_EQ(train[spk], 1);
  }
}

TEST(Split, Errors) {
  const auto one = data::generate_corpus(2, 1, 8, 3);
  EXPECT_THROW(data::split_corpus(one, 0.5, 1), SplitError);
  const auto two = data::generate_corpus(2, 4, 8, 3);
  EXPECT_THROW(data::split_corpus(two, 0.0, 1), ConfigError);
  EXPECT_THROW(data::split_corpus(two, 1.0, 1), ConfigError);
}

TEST(SequenceFile, RoundTrip) {
  test_support::TempDir dir("seq");
  data::BlendshapeSequence seq;
  Rng rng(5);
  seq.values = uniform<Matrix>(17, 52, 0.0, 1.0, rng);
  seq.fps = 30.0;
  seq.speaker_id = "spk01";
  seq.sequence_id = "spk01_004";
  data::write_sequence(seq, dir / "a.csv");
  const auto back = data::read_sequence(dir / "a.csv");
  EXPECT_LT((back.values - seq.values).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(back.speaker_id, "spk01");
  EXPECT_EQ(back.sequence_id, "spk01_004");
  EXPECT_DOUBLE_EQ(back.fps, 30.0);

  const auto text = read_text_file(dir / "a.csv");
  const auto header = text.find("timecode,eyeBlinkLeft,");
  EXPECT_NE(header, std::string::npos);
}

TEST(SequenceFile, DurationFromFramesAndFps) {
  test_support::TempDir dir("dur");
  data::BlendshapeSequence seq;
  seq.values = Matrix::Constant(10, 52, 0.5);
  data::write_sequence(seq, dir / "d.csv");
  EXPECT_NEAR(data::read_sequence(dir / "d.csv").duration_seconds(), 0.3333, 1e-4);
}

TEST(SequenceFile, WrongColumnCountNamesTheCount) {
  test_support::TempDir dir("cols");
  std::ofstream out(dir / "bad.csv");
  out << "timecode";
  for (int c = 0; c < 51; ++c) out << "," << blendshapes::kChannelNames[static_cast<std::size_t>(c)];
  out << "\n0";
  for (int c = 0; c < 51; ++c) out << ",0.5";
  out << "\n";
  out.close();
  try {
    data::read_sequence(dir / "bad.csv");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("found 51"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find(":1:"), std::string::npos) << e.what();
  }
}

TEST(SequenceFile, NonNumericCellNamesTheLine) {
  test_support::TempDir dir("cell");
  data::BlendshapeSequence seq;
  seq.values = Matrix::Constant(3, 52, 0.25);
  data::write_sequence(seq, dir / "s.csv");
  auto text = read_text_file(dir / "s.csv");
  const auto last = text.rfind("0.25000000");
  text.replace(last, 10, "abc");
  write_text_file(dir / "s.csv", text);
  std::size_t lines = 0;
  for (char ch : text.substr(0, last)) lines += ch == '\n';
  try {
    data::read_sequence(dir / "s.csv");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":" + std::to_string(lines + 1) + ":"), std::string::npos)
        << e.what();
    EXPECT_NE(std::string(e.what()).find("non-numeric"), std::string::npos);
  }
}

TEST(SequenceFile, RejectsRenamedChannel) {
  test_support::TempDir dir("names");
  data::BlendshapeSequence seq;
  seq.values = Matrix::Constant(2, 52, 0.1);
  data::write_sequence(seq, dir / "n.csv");
  auto text = read_text_file(dir / "n.csv");
  text.replace(text.find("jawOpen"), 7, "jawOpem");
  write_text_file(dir / "n.csv", text);
  EXPECT_THROW(data::read_sequence(dir / "n.csv"), ParseError);
}

TEST(CorpusFiles, SaveLoadRoundTrip) {
  test_support::TempDir dir("corpus");
  const auto corpus = data::generate_corpus(2, 3, 12, 4);
  data::save_corpus(corpus, dir.path());
  const auto back = data::load_corpus(dir.path());
  EXPECT_EQ(back.samples.size(), corpus.samples.size());
  EXPECT_EQ(back.split.test, corpus.split.test);
  EXPECT_EQ(back.speaker_ids(), corpus.speaker_ids());
  for (const auto& s : corpus.samples) {
    const auto& t = back.sample(s.id);
    EXPECT_LT((t.blendshapes.values - s.blendshapes.values).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((t.audio.values - s.audio.values).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_EQ(t.speaker_id, s.speaker_id);
  }
  EXPECT_THROW(back.sample("nope"), LookupError);
}

}  // namespace
