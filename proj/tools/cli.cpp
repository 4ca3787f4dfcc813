#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "facediff/checkpoint.hpp"
#include "facediff/data.hpp"
#include "facediff/distillation.hpp"
#include "facediff/errors.hpp"
#include "facediff/kv_text.hpp"
#include "facediff/metrics.hpp"
#include "facediff/personalization.hpp"
#include "facediff/rng.hpp"
#include "facediff/sampler.hpp"
#include "facediff/talker.hpp"
#include "facediff/training.hpp"

namespace facediff::cli {

namespace fs = std::filesystem;

namespace {

struct Key {
  std::string name;
  std::string fallback;
  std::string help;
};

struct Context {
  KeyValues config;
  fs::path out;
  std::ostream& log;

  const std::string& str(const std::string& key) const { return config.at(key); }
  long long integer(const std::string& key) const { return parse_int(key, str(key)); }
  double real(const std::string& key) const { return parse_double(key, str(key)); }
  bool flag(const std::string& key) const { return parse_bool(key, str(key)); }
  std::uint64_t seed() const { return static_cast<std::uint64_t>(integer("seed")); }

  fs::path required_path(const std::string& key) const {
    if (str(key).empty()) throw ConfigError("missing required key '" + key + "'");
    return str(key);
  }
};

struct Command {
  std::string name;
  std::string help;
  std::vector<Key> keys;
  std::function<void(const Context&)> action;
};

std::string default_out() {
  const char* env = std::getenv("FACEDIFF_OUT");
  return env && *env ? env : "facediff_out";
}

int exit_code_for(const std::string& kind) {
  static const std::set<std::string> usage{"config", "lookup", "enrollment", "step_range", "usage"};
  static const std::set<std::string> data{"data", "parse", "io", "input", "split", "dimension"};
  if (usage.count(kind)) return 1;
  if (data.count(kind)) return 2;
  return 3;
}

int report_failure(std::ostream& err, const std::string& kind, std::string message) {
  std::replace(message.begin(), message.end(), '\n', ' ');
  const int code = exit_code_for(kind);
  err << "facediff: error kind=" << kind << " exit=" << code << ": " << message << '\n';
  return code;
}

// ---------------------------------------------------------------------------
// Shared pieces.

training::LossWeights weights_from(const Context& c) {
  training::LossWeights w;
  w.exp = c.real("lambda_exp");
  w.lip = c.real("lambda_lip");
  w.con = c.real("lambda_con");
  w.vel = c.real("lambda_vel");
  if (c.config.count("lambda_dis")) w.dis = c.real("lambda_dis");
  return w;
}

training::Objective objective_from(const Context& c) {
  const auto& o = c.str("objective");
  if (o == "full") return training::Objective::full;
  if (o == "expression_only") return training::Objective::expression_only;
  throw ConfigError("objective must be 'full' or 'expression_only', got '" + o + "'");
}

std::vector<Key> loss_keys() {
  return {{"lambda_exp", "1", "weight of the expression loss"},
          {"lambda_lip", "1", "weight of the lip loss"},
          {"lambda_con", "0.007", "weight of the contrastive identity loss"},
          {"lambda_vel", "0.5", "weight of the velocity loss"},
          {"objective", "full", "full | expression_only"}};
}

struct LoadedTalker {
  Talker<float> talker;
  KeyValues metadata;
  std::string id;
};

LoadedTalker load(const fs::path& path) {
  const auto ckpt = io::load_checkpoint(path);
  return {from_checkpoint(ckpt), ckpt.metadata, path.stem().string()};
}

std::vector<const data::Sample*> split_of(const data::SyntheticCorpus& corpus,
                                          const std::string& which) {
  if (which == "all") {
    std::vector<const data::Sample*> all;
    for (const auto& s : corpus.samples) all.push_back(&s);
    return all;
  }
  if (which != "train" && which != "test") {
    throw ConfigError("split must be train, test or all, got '" + which + "'");
  }
  return corpus.split_samples(which);
}

std::string stem_for(const Context& c, const fs::path& input) {
  return c.str("name").empty() ? input.stem().string() : c.str("name");
}

// ---------------------------------------------------------------------------
// Subcommands.

void gen_data(const Context& c) {
  data::CorpusParams p;
  p.num_speakers = static_cast<int>(c.integer("speakers"));
  p.sequences_per_speaker = static_cast<int>(c.integer("sequences"));
  p.frames = static_cast<int>(c.integer("frames"));
  p.audio_dim = static_cast<int>(c.integer("audio_dim"));
  p.fps = c.real("fps");
  p.test_fraction = c.real("test_fraction");
  p.seed = c.seed();
  const auto corpus = data::generate_corpus(p);
  const auto dir = c.out / "corpus";
  data::save_corpus(corpus, dir);
  c.log << "corpus " << dir.string() << " speakers=" << corpus.speakers.size()
        << " sequences=" << corpus.samples.size() << " train=" << corpus.split.train.size()
        << " test=" << corpus.split.test.size() << '\n';
}

void train(const Context& c) {
  const auto corpus = data::load_corpus(c.required_path("data"));
  const auto root = c.seed();
  Talker<float> talker;
  std::vector<std::string> newcomers;
  if (c.str("init").empty()) {
    model::ModelConfig mc;
    mc.steps = static_cast<int>(c.integer("steps"));
    mc.hidden = static_cast<int>(c.integer("hidden"));
    mc.gru_layers = static_cast<int>(c.integer("gru_layers"));
    mc.use_identity = c.flag("use_identity");
    mc.audio_dim = corpus.params.audio_dim;
    talker = make_talker(mc, corpus.speaker_ids(), derive_seed(root, "init"));
  } else {
    talker = load(c.str("init")).talker;
    for (const auto& id : corpus.speaker_ids()) {
      if (!talker.library.contains(id)) {
        talker.library.enroll(id, derive_seed(root, "enroll"));
        newcomers.push_back(id);
      }
    }
    if (!newcomers.empty() && c.flag("freeze_model")) talker.library.freeze_all_except(newcomers);
  }

  training::TrainConfig tc;
  tc.epochs = static_cast<int>(c.integer("epochs"));
  tc.batch_size = static_cast<int>(c.integer("batch_size"));
  tc.learning_rate = c.real("learning_rate");
  tc.weights = weights_from(c);
  tc.objective = objective_from(c);
  tc.steps = talker.model.schedule.num_steps;
  tc.seed = derive_seed(root, "train");
  tc.freeze_model = c.flag("freeze_model");
  const auto result =
      training::train_teacher(tc, corpus.split_samples("train"), talker.model, talker.library);
  talker.library.unfreeze_all();

  const auto ckpt = c.out / "teacher.ckpt";
  save_talker(ckpt, talker, {{"role", "teacher"}, {"distilled", "false"}},
              &result.model_optimizer, &result.library_optimizer);
  training::write_history_csv(result.history, c.out / "loss.csv");
  c.log << "checkpoint " << ckpt.string() << " steps=" << talker.model.schedule.num_steps
        << " updates=" << result.history.size();
  if (!result.history.empty()) {
    c.log << " final_loss=" << format_double(result.history.back().loss.total);
  }
  if (!newcomers.empty()) c.log << " enrolled=" << newcomers.size();
  c.log << '\n';
}

void distill(const Context& c) {
  auto teacher = load(c.required_path("teacher"));
  const auto corpus = data::load_corpus(c.required_path("data"));
  const int target = static_cast<int>(c.integer("target_steps"));
  // Validate the whole chain before any training.
  std::vector<int> chain{teacher.talker.model.schedule.num_steps};
  while (chain.back() > target) {
    distillation::check_stage_steps(chain.back(), chain.back() / 2);
    chain.push_back(chain.back() / 2);
  }
  if (chain.back() != target || chain.size() < 2) {
    throw ConfigError("target_steps " + std::to_string(target) + " is not reachable by halving " +
                      std::to_string(chain.front()) + " steps");
  }

  const auto root = c.seed();
  const auto samples = corpus.split_samples("train");
  std::vector<distillation::StageRecord> records;
  Talker<float> current = std::move(teacher.talker);
  for (std::size_t i = 1; i < chain.size(); ++i) {
    distillation::DistillConfig dc;
    dc.student_steps = chain[i];
    dc.epochs = static_cast<int>(c.integer("epochs"));
    dc.train.batch_size = static_cast<int>(c.integer("batch_size"));
    dc.train.learning_rate = c.real("learning_rate");
    dc.train.weights = weights_from(c);
    dc.train.objective = objective_from(c);
    dc.train.seed = derive_seed(root, "stage", i);
    auto stage = distillation::distill_stage<float>(dc, samples, current.model, current.library);
    current = {std::move(stage.student), std::move(stage.library)};

    const std::string base = "stage" + std::to_string(i) + "_" + std::to_string(chain[i]);
    const auto ckpt = c.out / (base + ".ckpt");
    save_talker(ckpt, current,
                {{"role", "student"},
                 {"distilled", "true"},
                 {"teacher_steps", std::to_string(chain[i - 1])}},
                &stage.train.model_optimizer, &stage.train.library_optimizer);
    training::write_history_csv(stage.train.history, c.out / (base + "_loss.csv"), true);
    distillation::StageRecord rec;
    rec.teacher_steps = chain[i - 1];
    rec.student_steps = chain[i];
    rec.checkpoint = ckpt.filename().string();
    rec.metrics["updates"] = std::to_string(stage.train.history.size());
    if (!stage.train.history.empty()) {
      rec.metrics["final_loss"] = format_double(stage.train.history.back().loss.total);
      rec.metrics["final_dis"] = format_double(stage.train.history.back().loss.dis);
    }
    records.push_back(rec);
    c.log << "stage " << i << ": " << chain[i - 1] << " -> " << chain[i] << " steps, checkpoint "
          << ckpt.string() << '\n';
  }
  write_text_file(c.out / "stages.manifest", distillation::format_stage_manifest(records));
}

void infer(const Context& c) {
  const auto model_file = load(c.required_path("checkpoint"));
  const fs::path audio_path = c.required_path("audio");
  sampler::InferenceRequest req;
  req.audio = data::read_audio(audio_path);
  if (!c.str("identity").empty()) req.identity_override = c.str("identity");
  req.seed = c.seed();
  const auto result = sampler::infer<float>(req, model_file.talker.model, model_file.talker.library);

  const auto stem = stem_for(c, audio_path);
  data::write_sequence(result.output, c.out / (stem + "_blendshapes.csv"));
  write_key_values(c.out / (stem + "_identity.txt"),
                   {{"speaker_id", result.speaker_id},
                    {"matching_invoked", result.matching_invoked ? "true" : "false"},
                    {"match_score", format_double(result.match_score)},
                    {"frames", std::to_string(result.output.frames())}});
  std::ofstream timing(c.out / (stem + "_timing.csv"));
  timing << "step,seconds\n";
  for (const auto& st : result.step_timings) timing << st.t << ',' << st.seconds << '\n';
  timing << "total," << result.total_seconds << '\n';
  c.log << "identity " << result.speaker_id << (result.matching_invoked ? " matched" : " override")
        << " score=" << format_double(result.match_score) << " frames=" << result.output.frames()
        << '\n';
}

void match(const Context& c) {
  const auto model_file = load(c.required_path("checkpoint"));
  const fs::path audio_path = c.required_path("audio");
  const auto& talker = model_file.talker;
  const auto enc = talker.model.encode_audio(data::read_audio(audio_path));
  const auto m = personalization::match_identity<float>(enc.global, talker.library, talker.model);
  std::ofstream out(c.out / (stem_for(c, audio_path) + "_match.csv"));
  out << "rank,speaker_id,score\n";
  for (std::size_t i = 0; i < m.ranked.size(); ++i) {
    const auto line = std::to_string(i + 1) + "," + m.ranked[i].first + "," +
                      format_double(m.ranked[i].second);
    out << line << '\n';
    c.log << line << '\n';
  }
}

void eval(const Context& c) {
  const auto model_file = load(c.required_path("checkpoint"));
  const auto corpus = data::load_corpus(c.required_path("data"));
  const auto samples = split_of(corpus, c.str("split"));
  EvalOptions eo;
  eo.seed = c.seed();
  eo.match_for_quality = c.flag("match_for_quality");
  eo.max_sequences = static_cast<int>(c.integer("max_sequences"));
  auto result = evaluate(model_file.talker, samples, eo);
  auto& rep = result.report;
  rep.checkpoint_id = model_file.id;
  const auto d = model_file.metadata.find("distilled");
  rep.distilled = d != model_file.metadata.end() && d->second == "true";

  const auto itf_sequences = static_cast<std::size_t>(c.integer("itf_sequences"));
  const int repetitions = static_cast<int>(c.integer("itf_repetitions"));
  if (itf_sequences > 0 && repetitions >= 2) {
    std::vector<sampler::InferenceRequest> batch;
    for (std::size_t i = 0; i < itf_sequences && i < samples.size(); ++i) {
      batch.push_back({samples[i]->audio, std::nullopt, derive_seed(eo.seed, "itf", i)});
    }
    rep.itf = sampler::measure_itf<float>(batch, model_file.talker.model,
                                          model_file.talker.library, 1, repetitions)
                  .itf_mean;
  }
  rep.validate();
  write_key_values(c.out / "metrics.txt", rep.to_key_values());
  metrics::append_results_csv(rep, c.out / "results.csv");
  std::ofstream per(c.out / "per_sequence.csv");
  per << "index,predicted_speaker,true_speaker,mbe,lbe\n";
  for (std::size_t i = 0; i < result.mbe_per_sequence.size(); ++i) {
    per << i << ',' << result.matches[i].first << ',' << result.matches[i].second << ','
        << format_double(result.mbe_per_sequence[i]) << ','
        << format_double(result.lbe_per_sequence[i]) << '\n';
  }
  c.log << format_key_values(rep.to_key_values());
}

void bench(const Context& c) {
  const auto steps = parse_int_list("steps", c.str("steps"));
  if (steps.empty()) throw ConfigError("steps list is empty");
  const int count = static_cast<int>(c.integer("sequences"));
  if (count < 1) throw ConfigError("sequences must be positive");

  data::SyntheticCorpus corpus;
  std::vector<const data::Sample*> pool;
  if (c.str("data").empty()) {
    data::CorpusParams p;
    p.num_speakers = 2;
    p.sequences_per_speaker = std::max(2, (count + 1) / 2);
    p.frames = static_cast<int>(c.integer("frames"));
    p.seed = derive_seed(c.seed(), "bench_data");
    corpus = data::generate_corpus(p);
    for (const auto& s : corpus.samples) pool.push_back(&s);
  } else {
    corpus = data::load_corpus(c.str("data"));
    pool = corpus.split_samples("test");
  }
  if (static_cast<int>(pool.size()) < count) throw DataError("not enough sequences for the bench");

  Talker<float> talker;
  if (c.str("checkpoint").empty()) {
    model::ModelConfig mc;
    mc.hidden = static_cast<int>(c.integer("hidden"));
    mc.audio_dim = corpus.params.audio_dim;
    talker = make_talker(mc, corpus.speaker_ids(), derive_seed(c.seed(), "init"));
  } else {
    talker = load(c.str("checkpoint")).talker;
  }
  std::vector<sampler::InferenceRequest> batch;
  for (int i = 0; i < count; ++i) {
    batch.push_back({pool[static_cast<std::size_t>(i)]->audio, std::nullopt,
                     derive_seed(c.seed(), "bench", static_cast<std::size_t>(i))});
  }

  std::ofstream out(c.out / "bench.csv");
  out << "steps,itf_mean,itf_std,frames,repetitions\n";
  c.log << "steps,itf_mean,itf_std,frames,repetitions\n";
  std::vector<sampler::TimingRow> runs;
  for (int T : steps) {
    auto model = talker.model;
    model.set_steps(T);
    const auto rep = sampler::measure_itf<float>(batch, model, talker.library,
                                                 static_cast<int>(c.integer("warmup")),
                                                 static_cast<int>(c.integer("repetitions")));
    char line[160];
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%ld,%zu", T, rep.itf_mean, rep.itf_std,
                  rep.runs.front().frames, rep.runs.size());
    out << line << '\n';
    c.log << line << '\n';
    runs.insert(runs.end(), rep.runs.begin(), rep.runs.end());
  }
  sampler::write_timing_csv(runs, c.out / "bench_runs.csv");
}

std::vector<Command> commands() {
  std::vector<Command> cmds;
  cmds.push_back({"gen-data",
                  "generate the synthetic speaker corpus",
                  {{"seed", "7", "corpus seed"},
                   {"speakers", "8", "number of speakers"},
                   {"sequences", "50", "sequences per speaker"},
                   {"frames", "100", "frames per sequence"},
                   {"audio_dim", "64", "audio feature width"},
                   {"fps", "30", "frame rate"},
                   {"test_fraction", "0.2", "held-out fraction per speaker"}},
                  gen_data});

  std::vector<Key> train_keys{{"data", "", "corpus directory (required)"},
                              {"seed", "1", "root seed"},
                              {"steps", "32", "diffusion steps"},
                              {"epochs", "50", "training epochs"},
                              {"batch_size", "16", "upper bound on sequences per batch"},
                              {"learning_rate", "1e-4", "Adam learning rate"},
                              {"hidden", "256", "GRU width"},
                              {"gru_layers", "2", "GRU depth"},
                              {"use_identity", "true", "condition on identity embeddings"},
                              {"init", "", "checkpoint to continue from"},
                              {"freeze_model", "false", "train only newly enrolled identities"}};
  for (const auto& k : loss_keys()) train_keys.push_back(k);
  cmds.push_back({"train", "train a teacher model", train_keys, train});

  std::vector<Key> distill_keys{{"teacher", "", "teacher checkpoint (required)"},
                                {"data", "", "corpus directory (required)"},
                                {"seed", "1", "root seed"},
                                {"target_steps", "8", "final student step count"},
                                {"epochs", "25", "epochs per stage"},
                                {"batch_size", "16", "upper bound on sequences per batch"},
                                {"learning_rate", "1e-4", "Adam learning rate"},
                                {"lambda_dis", "0.1", "weight of the distillation loss"}};
  for (const auto& k : loss_keys()) distill_keys.push_back(k);
  cmds.push_back({"distill", "halve the step count stage by stage", distill_keys, distill});

  cmds.push_back({"infer",
                  "animate one audio feature file",
                  {{"checkpoint", "", "model checkpoint (required)"},
                   {"audio", "", "audio feature CSV (required)"},
                   {"identity", "", "speaker id; skips identity matching"},
                   {"name", "", "output file stem (default: audio file stem)"},
                   {"seed", "0", "sampling seed"}},
                  infer});
  cmds.push_back({"match",
                  "rank enrolled identities for one audio feature file",
                  {{"checkpoint", "", "model checkpoint (required)"},
                   {"audio", "", "audio feature CSV (required)"},
                   {"name", "", "output file stem (default: audio file stem)"},
                   {"seed", "0", "unused; kept for uniform snapshots"}},
                  match});
  cmds.push_back({"eval",
                  "score a checkpoint on a corpus split",
                  {{"checkpoint", "", "model checkpoint (required)"},
                   {"data", "", "corpus directory (required)"},
                   {"split", "test", "train | test | all"},
                   {"seed", "11", "sampling seed"},
                   {"max_sequences", "0", "cap on evaluated sequences (0 = all)"},
                   {"match_for_quality", "false", "sample with the matched identity"},
                   {"itf_sequences", "4", "sequences timed for ITF (0 = skip)"},
                   {"itf_repetitions", "3", "timed repetitions for ITF"}},
                  eval});
  cmds.push_back({"bench",
                  "inference time per frame against step count",
                  {{"steps", "8,16,32,64", "comma-separated step counts"},
                   {"checkpoint", "", "model checkpoint (default: fresh weights)"},
                   {"data", "", "corpus directory (default: generated audio)"},
                   {"hidden", "256", "GRU width for fresh weights"},
                   {"sequences", "4", "sequences per timed run"},
                   {"frames", "100", "frames per generated sequence"},
                   {"warmup", "1", "discarded runs"},
                   {"repetitions", "5", "timed runs"},
                   {"seed", "0", "root seed"}},
                  bench});
  return cmds;
}

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

KeyValues resolve(const Command& cmd, const std::string& config_file,
                  const std::vector<std::string>& sets,
                  const std::map<std::string, std::string>& flags) {
  KeyValues kv;
  for (const auto& k : cmd.keys) kv[k.name] = k.fallback;
  kv["out"] = default_out();
  const auto apply = [&](const std::string& key, const std::string& value,
                         const std::string& source) {
    if (!kv.count(key)) {
      throw ConfigError("unknown key '" + key + "' for " + cmd.name + " (" + source + ")");
    }
    kv[key] = value;
  };
  if (!config_file.empty()) {
    KeyValues file;
    try {
      file = read_key_values(config_file);
    } catch (const ParseError& e) {
      throw ConfigError(e.what());
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
    for (const auto& [k, v] : file) apply(k, v, config_file);
  }
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    const auto trim = [](std::string t) {
      const auto b = t.find_first_not_of(" \t");
      const auto e = t.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : t.substr(b, e - b + 1);
    };
    apply(trim(s.substr(0, eq)), trim(s.substr(eq + 1)), "--set");
  }
  for (const auto& [k, v] : flags) apply(k, v, "flag");
  return kv;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const auto cmds = commands();
  CLI::App app{"facediff: audio-driven blendshape animation with diffusion"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");

  struct Bound {
    CLI::App* sub = nullptr;
    std::string config_file;
    std::vector<std::string> sets;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;
  };
  std::vector<std::unique_ptr<Bound>> bound;
  for (const auto& cmd : cmds) {
    auto b = std::make_unique<Bound>();
    b->sub = app.add_subcommand(cmd.name, cmd.help);
    b->sub->add_option("--config", b->config_file, "key = value file (defaults < file < flags)");
    b->sub->add_option("--set", b->sets, "override one key: --set key=value (repeatable)");
    b->options["out"] =
        b->sub->add_option("--out", b->values["out"], "output directory (env FACEDIFF_OUT)");
    for (const auto& k : cmd.keys) {
      b->options[k.name] = b->sub->add_option(flag_name(k.name), b->values[k.name],
                                              k.help + " [" + k.fallback + "]");
    }
    bound.push_back(std::move(b));
  }

  std::vector<const char*> argv{"facediff"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return report_failure(err, "usage", e.what());
  }

  for (std::size_t i = 0; i < cmds.size(); ++i) {
    const auto& b = *bound[i];
    if (!b.sub->parsed()) continue;
    try {
      std::map<std::string, std::string> flags;
      for (const auto& [name, opt] : b.options) {
        if (opt->count() > 0) flags[name] = b.values.at(name);
      }
      Context ctx{resolve(cmds[i], b.config_file, b.sets, flags), {}, out};
      ctx.out = ctx.config.at("out");
      if (ctx.out.empty()) throw ConfigError("output directory is empty");
      fs::create_directories(ctx.out);
      write_key_values(ctx.out / (cmds[i].name + ".config"), ctx.config);
      cmds[i].action(ctx);
      return 0;
    } catch (const Error& e) {
      return report_failure(err, e.kind(), e.what());
    } catch (const fs::filesystem_error& e) {
      return report_failure(err, "io", e.what());
    } catch (const std::exception& e) {
      return report_failure(err, "internal", e.what());
    }
  }
  return report_failure(err, "usage", "no subcommand");
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace facediff::cli
