#include <benchmark/benchmark.h>

#include "facediff/data.hpp"
#include "facediff/rng.hpp"
#include "facediff/sampler.hpp"
#include "facediff/talker.hpp"
#include "facediff/training.hpp"

namespace {

using namespace facediff;

const data::SyntheticCorpus& corpus() {
  static const data::SyntheticCorpus c = data::generate_corpus(4, 4, 120, 8);
  return c;
}

Talker<float> talker(int steps, int hidden = 128) {
  model::ModelConfig mc;
  mc.steps = steps;
  mc.hidden = hidden;
  return make_talker(mc, corpus().speaker_ids(), 3);
}

void BM_EncodeAudio(benchmark::State& state) {
  const auto t = talker(8);
  const auto& audio = corpus().samples[0].audio;
  for (auto _ : state) benchmark::DoNotOptimize(t.model.encode_audio(audio));
  state.SetItemsProcessed(state.iterations() * audio.values.rows());
}
BENCHMARK(BM_EncodeAudio)->Unit(benchmark::kMicrosecond);

void BM_PredictX0(benchmark::State& state) {
  const auto t = talker(8);
  const auto& sample = corpus().samples[0];
  const auto audio = t.model.encode_audio(sample.audio);
  Rng rng(5);
  model::ConditionBundle<float> bundle;
  bundle.audio = &audio;
  bundle.identity = t.library.embedding(sample.speaker_id);
  bundle.x_t = {standard_normal<nn::Mat<float>>(sample.audio.values.rows(), 52, rng), 4};
  for (auto _ : state) benchmark::DoNotOptimize(model::predict_x0(t.model, bundle));
  state.SetItemsProcessed(state.iterations() * sample.audio.values.rows());
}
BENCHMARK(BM_PredictX0)->Unit(benchmark::kMicrosecond);

void BM_Infer(benchmark::State& state) {
  const auto t = talker(static_cast<int>(state.range(0)));
  const sampler::InferenceRequest req{corpus().samples[0].audio, std::nullopt, 1};
  for (auto _ : state) benchmark::DoNotOptimize(sampler::infer<float>(req, t.model, t.library));
  state.SetItemsProcessed(state.iterations() * req.audio.values.rows());
}
BENCHMARK(BM_Infer)->Arg(8)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_TrainEpoch(benchmark::State& state) {
  std::vector<const data::Sample*> samples;
  for (const auto& s : corpus().samples) samples.push_back(&s);
  training::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.steps = 8;
  cfg.learning_rate = 1e-3;
  for (auto _ : state) {
    state.PauseTiming();
    auto t = talker(8, static_cast<int>(state.range(0)));
    state.ResumeTiming();
    benchmark::DoNotOptimize(training::train_teacher<float>(cfg, samples, t.model, t.library));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(samples.size()));
}
BENCHMARK(BM_TrainEpoch)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
