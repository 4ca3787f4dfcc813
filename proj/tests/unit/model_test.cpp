#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "facediff/data.hpp"
#include "facediff/errors.hpp"
#include "facediff/model.hpp"
#include "facediff/personalization.hpp"
#include "facediff/training.hpp"
#include "gradcheck.hpp"

namespace {

using namespace facediff;
using model::Mat;

model::ModelConfig small_config(int steps = 8) {
  model::ModelConfig c;
  c.steps = steps;
  c.hidden = 12;
  c.identity_hidden = 10;
  return c;
}

data::AudioFeatureSequence random_audio(int frames, std::uint64_t seed) {
  Rng rng(seed);
  data::AudioFeatureSequence a;
  a.values = standard_normal<data::Matrix>(frames, 64, rng);
  return a;
}

template <class S>
Mat<S> predict(const model::DenoiserModel<S>& m, const data::AudioFeatureSequence& audio,
               const Mat<S>& identity, const Mat<S>& x_t, int t) {
  const auto enc = m.encode_audio(audio);
  model::ConditionBundle<S> w;
  w.audio = &enc;
  w.identity = identity;
  w.x_t = {x_t, t};
  return model::predict_x0(m, w);
}

TEST(Config, KeyValueRoundTripAndUnknownKeys) {
  auto c = small_config();
  c.use_identity = false;
  const auto back = model::ModelConfig::from_key_values(c.to_key_values());
  EXPECT_EQ(back.to_key_values(), c.to_key_values());
  auto kv = c.to_key_values();
  kv["mystery"] = "1";
  EXPECT_THROW(model::ModelConfig::from_key_values(kv), ConfigError);
  auto bad = c;
  bad.output_dim = 51;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(AudioEncoder, ConstantInputGivesConstantFeatures) {
  const auto enc = model::AudioEncoder::create(64, 64, 9);
  data::Matrix raw(12, 64);
  Rng rng(1);
  const auto row = standard_normal<data::Matrix>(1, 64, rng);
  for (int f = 0; f < 12; ++f) raw.row(f) = row;
  const auto out = model::encode_audio<double>(enc, raw);
  for (int f = 1; f < 12; ++f) EXPECT_LT((out.frames.row(f) - out.frames.row(0)).norm(), 1e-12);
  EXPECT_NEAR(out.global.norm(), 1.0, 1e-12);
}

TEST(AudioEncoder, DeterministicAndSeeded) {
  const auto a = model::AudioEncoder::create(64, 64, 9);
  const auto b = model::AudioEncoder::create(64, 64, 9);
  const auto c = model::AudioEncoder::create(64, 64, 10);
  EXPECT_EQ(a.projection, b.projection);
  EXPECT_NE(a.projection, c.projection);
  const auto raw = random_audio(20, 3).values;
  EXPECT_EQ(model::encode_audio<float>(a, raw).frames, model::encode_audio<float>(b, raw).frames);
}

TEST(AudioEncoder, TwoFrameGlobalFeatureByHand) {
  model::AudioEncoder enc;
  enc.projection = (Eigen::MatrixXd(2, 2) << 1.0, 2.0, -1.0, 0.5).finished();
  enc.kernel = {0.5, 0.25, 0.125, 0.0625, 0.0625};
  const data::Matrix raw = (data::Matrix(2, 2) << 1.0, 0.0, 2.0, 2.0).finished();
  // projected rows: [1, 2] and [0, 5]; mean [0.5, 3.5]
  const double norm = std::sqrt(0.25 + 12.25);
  const auto out = model::encode_audio<double>(enc, raw);
  EXPECT_NEAR(out.global(0, 0), 0.5 / norm, 1e-15);
  EXPECT_NEAR(out.global(0, 1), 3.5 / norm, 1e-15);
  // frame 1 of the causal smoothing: 0.5 * p1 + (0.25 + 0.125 + 0.0625 + 0.0625) * p0
  EXPECT_NEAR(out.frames(1, 0), 0.5 * 0.0 + 0.5 * 1.0, 1e-15);
  EXPECT_NEAR(out.frames(1, 1), 0.5 * 5.0 + 0.5 * 2.0, 1e-15);
  EXPECT_THROW(model::encode_audio<double>(enc, data::Matrix(0, 2)), InputError);
}

TEST(StepEncoder, DistinctDeterministicRegenerable) {
  const model::DenoiserModel<double> m(small_config(8), 4);
  const auto first = m.encode_step(1);
  const auto last = m.encode_step(8);
  const double cos = first.row(0).dot(last.row(0)) / (first.norm() * last.norm());
  EXPECT_LT(cos, 0.999);
  EXPECT_EQ(m.encode_step(5), m.encode_step(5));
  const model::DenoiserModel<double> again(small_config(8), 4);
  for (int t = 1; t <= 8; ++t) EXPECT_EQ(again.encode_step(t), m.encode_step(t)) << t;
  EXPECT_THROW(m.encode_step(0), StepRangeError);
  EXPECT_THROW(m.encode_step(9), StepRangeError);
}

TEST(StepEncoder, StudentLevelsShareTeacherFeatures) {
  // Student step k and teacher step 2k sit at the same continuous time.
  for (int k = 1; k <= 8; ++k) {
    EXPECT_EQ(model::step_features<double>(k, 8, 32), model::step_features<double>(2 * k, 16, 32));
  }
}

TEST(Denoiser, ParametersExcludeAudioEncoder) {
  const model::DenoiserModel<float> m(model::ModelConfig{}, 1);
  for (const auto& [name, p] : m.params) {
    EXPECT_TRUE(name.rfind("identity_encoder.", 0) == 0 || name.rfind("step_encoder.", 0) == 0 ||
                name.rfind("decoder.", 0) == 0)
        << name;
  }
  EXPECT_EQ(m.params.at("decoder.head.w").value.cols(), 52);
  EXPECT_EQ(m.params.at("decoder.gru.l0.w_hh").value.rows(), 256);
  EXPECT_EQ(m.params.at("decoder.gru.l0.w_ih").value.rows(), 64 + 64 + 32 + 52);
  EXPECT_TRUE(m.params.contains("decoder.gru.l1.w_ih"));
  EXPECT_EQ(m.params.at("identity_encoder.l0.w").value.rows(), 32);
}

TEST(Denoiser, ZeroNetworkPredictsZero) {
  model::DenoiserModel<double> m(small_config(), 2);
  for (auto& [name, p] : m.params) p.value.setZero();
  Rng rng(3);
  const auto out = predict<double>(m, random_audio(1, 5), standard_normal<Mat<double>>(1, 32, rng),
                                   standard_normal<Mat<double>>(1, 52, rng), 3);
  EXPECT_EQ(out.rows(), 1);
  EXPECT_EQ(out.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Denoiser, OutputShapeFollowsInput) {
  const model::DenoiserModel<float> m(model::ModelConfig{}, 2);
  Rng rng(4);
  for (int frames : {1, 10, 250}) {
    const auto out = predict<float>(m, random_audio(frames, 6), standard_normal<Mat<float>>(1, 32, rng),
                                    standard_normal<Mat<float>>(frames, 52, rng), 17);
    EXPECT_EQ(out.rows(), frames);
    EXPECT_EQ(out.cols(), 52);
    EXPECT_TRUE(out.allFinite());
  }
}

TEST(Denoiser, CausalPerFrame) {
  const model::DenoiserModel<double> m(small_config(), 5);
  Rng rng(6);
  const auto audio = random_audio(30, 7);
  const auto id = standard_normal<Mat<double>>(1, 32, rng);
  const auto x = standard_normal<Mat<double>>(30, 52, rng);
  const auto full = predict<double>(m, audio, id, x, 4);
  for (int k : {1, 7, 19}) {
    data::AudioFeatureSequence head;
    head.values = audio.values.topRows(k);
    const auto part = predict<double>(m, head, id, Mat<double>(x.topRows(k)), 4);
    EXPECT_LT((part - full.topRows(k)).cwiseAbs().maxCoeff(), 1e-12) << k;
  }
}

TEST(Denoiser, IdentityConditioningIsLive) {
  const model::DenoiserModel<float> m(model::ModelConfig{}, 8);
  personalization::IdentityLibrary<float> lib;
  lib.enroll("a", 1);
  lib.enroll("b", 1);
  Rng rng(9);
  double diff = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto audio = random_audio(15, 100 + i);
    const auto x = standard_normal<Mat<float>>(15, 52, rng);
    diff += (predict<float>(m, audio, lib.embedding("a"), x, 10) -
             predict<float>(m, audio, lib.embedding("b"), x, 10))
                .cwiseAbs()
                .mean();
  }
  EXPECT_GT(diff / 20.0, 1e-4);
}

TEST(Denoiser, NumericFaultNamesStage) {
  const model::DenoiserModel<float> m(small_config(), 2);
  Mat<float> id = Mat<float>::Zero(1, 32);
  id(0, 3) = std::numeric_limits<float>::quiet_NaN();
  try {
    predict<float>(m, random_audio(4, 1), id, Mat<float>::Zero(4, 52), 2);
    FAIL() << "expected a numeric fault";
  } catch (const NumericFault& e) {
    EXPECT_NE(std::string(e.what()).find("identity embedding"), std::string::npos) << e.what();
  }
  EXPECT_THROW(predict<float>(m, random_audio(4, 1), Mat<float>::Zero(1, 32), Mat<float>::Zero(5, 52), 2),
               DimensionError);
}

TEST(Denoiser, IdentityEmbeddingGradientMatchesFiniteDifferences) {
  const model::DenoiserModel<double> m(small_config(), 10);
  personalization::IdentityLibrary<double> lib;
  lib.enroll("spk", 3);
  lib.enroll("other", 3);
  const auto audio = m.encode_audio(random_audio(6, 11));
  Rng rng(12);
  const auto x0 = uniform<Mat<double>>(6, 52, 0.0, 1.0, rng);
  const auto xt = diffusion::q_sample<double>(x0, 5, standard_normal<Mat<double>>(6, 52, rng),
                                              m.schedule);
  const auto build = [&](nn::Graph<double>& g) {
    auto emb = g.param(lib.params(), personalization::IdentityLibrary<double>::kParamName);
    model::DenoiseInputs<double> in;
    in.frames = 6;
    in.batch = 1;
    in.audio = g.constant(audio.frames);
    in.identity = nn::gather_rows(emb, {0});
    in.steps = {5};
    in.x_t = g.constant(xt.x);
    auto out = model::denoise(g, m, in);
    return nn::sum(nn::square(nn::sub(out.x0_hat, g.constant(x0))));
  };
  // Only the enrolled speaker's row reaches the loss; probe all 32 of its
  // coordinates plus the unused row.
  const auto r = test_support::grad_check({&lib.params()}, build, 64, 13);
  EXPECT_EQ(r.probed, 64);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Denoiser, EndToEndWeightGradients) {
  auto cfg = small_config();
  model::DenoiserModel<double> m(cfg, 14);
  personalization::IdentityLibrary<double> lib;
  lib.enroll("a", 1);
  lib.enroll("b", 1);
  const auto a0 = m.encode_audio(random_audio(4, 15));
  const auto a1 = m.encode_audio(random_audio(4, 16));
  Rng rng(17);
  const std::vector<const Mat<double>*> audios{&a0.frames, &a1.frames};
  const Mat<double> audio = model::interleave<double>(audios);
  Mat<double> globals(2, 64);
  globals.row(0) = a0.global;
  globals.row(1) = a1.global;
  const auto x0 = uniform<Mat<double>>(8, 52, 0.0, 1.0, rng);
  const auto xt = standard_normal<Mat<double>>(8, 52, rng);
  const auto build = [&](nn::Graph<double>& g) {
    auto emb = g.param(lib.params(), personalization::IdentityLibrary<double>::kParamName);
    model::DenoiseInputs<double> in;
    in.frames = 4;
    in.batch = 2;
    in.audio = g.constant(audio);
    in.identity = emb;
    in.steps = {2, 7};
    in.x_t = g.constant(xt);
    auto out = model::denoise(g, m, in);
    auto target = g.constant(x0);
    auto loss = training::expression_loss(out.x0_hat, target);
    loss = nn::add(loss, training::lip_loss(out.x0_hat, target, blendshapes::lip_channels()));
    loss = nn::add(loss, nn::scale(training::velocity_loss(out.x0_hat, target, 4, 2), 0.5));
    auto logits = personalization::contrast_logits(out.identity_features, g.constant(globals), 0.07);
    return nn::add(loss, nn::scale(personalization::contrast_loss(logits), 0.007));
  };
  const auto r = test_support::grad_check({&m.params, &lib.params()}, build, 128, 18);
  EXPECT_EQ(r.probed, 128);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Interleave, RoundTrip) {
  Rng rng(19);
  const auto a = standard_normal<Mat<float>>(5, 3, rng);
  const auto b = standard_normal<Mat<float>>(5, 3, rng);
  const auto s = model::interleave<float>({&a, &b});
  EXPECT_EQ(s.row(2), a.row(1));
  EXPECT_EQ(s.row(3), b.row(1));
  EXPECT_EQ(model::deinterleave<float>(s, 2, 0), a);
  EXPECT_EQ(model::deinterleave<float>(s, 2, 1), b);
}

}  // namespace
