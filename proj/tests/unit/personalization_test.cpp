#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "facediff/data.hpp"
#include "facediff/errors.hpp"
#include "facediff/metrics.hpp"
#include "facediff/model.hpp"
#include "facediff/personalization.hpp"
#include "facediff/training.hpp"

namespace {

using namespace facediff;
using personalization::IdentityLibrary;
using Md = nn::Mat<double>;

// Softmax cross-entropy enumerated entry by entry over rows and columns.
double brute_force_symmetric_ce(const Md& logits) {
  const auto n = logits.rows();
  double rows = 0.0, cols = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double zr = 0.0, zc = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      zr += std::exp(logits(i, j));
      zc += std::exp(logits(j, i));
    }
    rows += -std::log(std::exp(logits(i, i)) / zr);
    cols += -std::log(std::exp(logits(i, i)) / zc);
  }
  return 0.5 * (rows / n + cols / n);
}

TEST(ContrastLogits, Examples) {
  const Md same = (Md(2, 3) << 1, 0, 0, 0, 1, 0).finished();
  const auto l = personalization::contrast_logits(same, same, 1.0);
  EXPECT_NEAR(l(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(l(1, 1), 1.0, 1e-15);
  EXPECT_NEAR(l(0, 1), 0.0, 1e-15);

  const double c = std::cos(M_PI / 3), s = std::sin(M_PI / 3);
  const Md a = (Md(2, 2) << 1, 0, c, s).finished();
  const Md b = (Md(2, 2) << c, s, 1, 0).finished();
  const auto m = personalization::contrast_logits(a, b, 0.07);
  EXPECT_NEAR(m(0, 0), 0.5 / 0.07, 1e-12);
  EXPECT_NEAR(m(1, 1), 0.5 / 0.07, 1e-12);

  // Scale of the inputs does not matter.
  EXPECT_TRUE(personalization::contrast_logits(Md(3.0 * a), Md(0.2 * b), 0.07).isApprox(m, 1e-12));
  EXPECT_THROW(personalization::contrast_logits(Md::Zero(2, 2), b, 0.07), NormalizationError);
}

TEST(ContrastLoss, Examples) {
  EXPECT_NEAR(personalization::contrast_loss(Md::Constant(1, 1, 3.0)), 0.0, 1e-15);
  const double tau = 0.01;
  Md sat = Md::Zero(4, 4);
  sat.diagonal().setConstant(100.0 / tau);
  EXPECT_LT(personalization::contrast_loss(sat), 1e-3);
  const Md eye = Md::Identity(2, 2);
  EXPECT_NEAR(personalization::contrast_loss(eye), std::log(1.0 + std::exp(-1.0)), 1e-14);
  EXPECT_NEAR(personalization::contrast_loss(eye), brute_force_symmetric_ce(eye), 1e-14);
  EXPECT_THROW(personalization::contrast_loss(Md::Zero(2, 3)), ContractError);
}

TEST(ContrastLoss, MatchesBruteForceOnRandomLogits) {
  Rng rng(1);
  for (int n : {2, 3, 5, 8}) {
    const auto l = standard_normal<Md>(n, n, rng);
    EXPECT_NEAR(personalization::contrast_loss(l), brute_force_symmetric_ce(l), 1e-12);
  }
}

TEST(ContrastLoss, PermutationEquivariant) {
  Rng rng(2);
  const auto id = standard_normal<Md>(6, 64, rng);
  const auto au = standard_normal<Md>(6, 64, rng);
  const double base = personalization::contrast_loss(personalization::contrast_logits(id, au, 0.07));
  std::vector<int> perm(6);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    Md pi(6, 64), pa(6, 64);
    for (int i = 0; i < 6; ++i) {
      pi.row(i) = id.row(perm[i]);
      pa.row(i) = au.row(perm[i]);
    }
    EXPECT_NEAR(personalization::contrast_loss(personalization::contrast_logits(pi, pa, 0.07)), base,
                1e-12);
  }
}

TEST(ContrastLoss, AlignedBeatsShuffled) {
  Rng rng(3);
  const Md feats = standard_normal<Md>(5, 64, rng);
  const Md noisy = feats + 0.05 * standard_normal<Md>(5, 64, rng);
  Md shuffled(5, 64);
  for (int i = 0; i < 5; ++i) shuffled.row(i) = noisy.row((i + 1) % 5);
  EXPECT_LT(personalization::contrast_loss(personalization::contrast_logits(feats, noisy, 0.07)),
            personalization::contrast_loss(personalization::contrast_logits(feats, shuffled, 0.07)));
}

TEST(ContrastLoss, GraphAgreesWithPlain) {
  Rng rng(4);
  const auto id = standard_normal<Md>(4, 8, rng);
  const auto au = standard_normal<Md>(4, 8, rng);
  nn::Graph<double> g(nn::Graph<double>::Mode::inference);
  auto logits = personalization::contrast_logits(g.constant(id), g.constant(au), 0.07);
  EXPECT_NEAR(personalization::contrast_loss(logits).value()(0, 0),
              personalization::contrast_loss(personalization::contrast_logits(id, au, 0.07)), 1e-12);
}

TEST(Library, EnrollmentRules) {
  IdentityLibrary<float> lib;
  EXPECT_TRUE(lib.empty());
  lib.enroll("spk00", 5);
  EXPECT_EQ(lib.size(), 1u);
  EXPECT_EQ(lib.embeddings().cols(), 32);
  const auto before = lib.embeddings();
  EXPECT_THROW(lib.enroll("spk00", 6), EnrollmentError);
  EXPECT_EQ(lib.size(), 1u);
  EXPECT_EQ(lib.embeddings(), before);
  lib.enroll("spk01", 5);
  EXPECT_EQ(lib.index_of("spk01"), 1);
  EXPECT_THROW(lib.index_of("spk02"), LookupError);
  EXPECT_EQ(personalization::parse_library_manifest(lib.manifest()), lib.speaker_ids());
  EXPECT_TRUE(lib.embeddings().allFinite());
}

TEST(Library, FreezeMarksRows) {
  IdentityLibrary<float> lib;
  for (const char* id : {"a", "b", "c"}) lib.enroll(id, 1);
  lib.freeze_all_except({"b"});
  const auto& rows = lib.params().at(IdentityLibrary<float>::kParamName).frozen_rows;
  EXPECT_EQ(rows, (std::vector<bool>{true, false, true}));
  lib.enroll("d", 1);
  EXPECT_EQ(lib.params().at(IdentityLibrary<float>::kParamName).frozen_rows.back(), false);
  lib.unfreeze_all();
  EXPECT_TRUE(lib.params().at(IdentityLibrary<float>::kParamName).frozen_rows.empty());
}

TEST(Match, SingleEntryAndExactMatch) {
  Md feats = Md::Zero(3, 4);
  feats(0, 0) = 1.0;
  feats(1, 1) = 1.0;
  feats(2, 2) = 1.0;
  const std::vector<std::string> ids{"a", "b", "c"};
  const Md audio = (Md(1, 4) << 0.0, 2.0, 0.0, 0.0).finished();
  const auto r = personalization::match_features<double>(audio, feats, ids);
  EXPECT_EQ(r.speaker_id, "b");
  EXPECT_NEAR(r.score, 1.0, 1e-15);
  ASSERT_EQ(r.ranked.size(), 3u);
  EXPECT_EQ(r.ranked[1].first, "a");  // tie with "c" broken by library order

  const auto single = personalization::match_features<double>(
      (Md(1, 4) << 0, 0, 0, 1).finished(), Md(feats.topRows(1)), {"only"});
  EXPECT_EQ(single.speaker_id, "only");
  EXPECT_THROW(personalization::match_features<double>(audio, Md(0, 4), {}), LookupError);
}

TEST(Match, ScaleInvariantInStoredEmbeddings) {
  model::ModelConfig cfg;
  cfg.hidden = 8;
  const model::DenoiserModel<double> m(cfg, 3);
  IdentityLibrary<double> lib;
  for (int i = 0; i < 6; ++i) lib.enroll("s" + std::to_string(i), 7);
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Md audio = standard_normal<Md>(1, 64, rng);
    const auto base = personalization::match_identity<double>(audio, lib, m);
    auto scaled = lib;
    const int row = trial % 6;
    scaled.embeddings().row(row) *= 0.1 + 10.0 * (trial % 3);
    EXPECT_EQ(personalization::match_identity<double>(audio, scaled, m).speaker_id, base.speaker_id);
  }
  EXPECT_THROW(personalization::match_identity<double>(Md::Ones(1, 64), IdentityLibrary<double>(), m),
               LookupError);
}

TEST(Library, NinthSpeakerFineTune) {
  // Nine speakers generated together; the ninth is held back from the first
  // training run and enrolled afterwards with every other weight frozen.
  data::CorpusParams cp;
  cp.num_speakers = 9;
  cp.sequences_per_speaker = 12;
  cp.frames = 30;
  cp.seed = 21;
  const auto corpus = data::generate_corpus(cp);
  const std::string newcomer = corpus.speakers.back().speaker_id;
  std::vector<const data::Sample*> base_train, all_train;
  for (const auto* s : corpus.split_samples("train")) {
    all_train.push_back(s);
    if (s->speaker_id != newcomer) base_train.push_back(s);
  }

  model::ModelConfig mc;
  mc.steps = 4;
  mc.hidden = 16;
  model::DenoiserModel<float> m(mc, 1);
  IdentityLibrary<float> lib;
  for (const auto& id : corpus.speaker_ids()) {
    if (id != newcomer) lib.enroll(id, 2);
  }
  training::TrainConfig tc;
  tc.steps = 4;
  tc.epochs = 30;
  tc.learning_rate = 3e-3;
  tc.batch_size = 9;
  training::train_teacher(tc, base_train, m, lib);

  lib.enroll(newcomer, 3);
  lib.freeze_all_except({newcomer});
  const auto frozen_rows = lib.embeddings().topRows(8).eval();
  const auto frozen_params = m.params.at("identity_encoder.l0.w").value;
  tc.freeze_model = true;
  tc.epochs = 60;
  tc.learning_rate = 1e-2;
  training::train_teacher(tc, all_train, m, lib);
  EXPECT_EQ(lib.embeddings().topRows(8), frozen_rows);
  EXPECT_EQ(m.params.at("identity_encoder.l0.w").value, frozen_params);

  std::vector<std::pair<std::string, std::string>> matches;
  const auto features = personalization::library_features(m, lib);
  for (const auto* s : corpus.split_samples("test")) {
    const auto enc = m.encode_audio(s->audio);
    matches.emplace_back(
        personalization::match_features<float>(enc.global, features, lib.speaker_ids()).speaker_id,
        s->speaker_id);
  }
  const auto report = metrics::identity_report(matches);
  ASSERT_TRUE(report.per_class.count(newcomer));
  EXPECT_GE(report.per_class.at(newcomer).precision, 0.9);
  EXPECT_GT(report.per_class.at(newcomer).recall, 0.0);
}

}  // namespace
