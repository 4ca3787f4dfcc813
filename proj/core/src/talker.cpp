#include "facediff/talker.hpp"

#include <sstream>

#include "facediff/errors.hpp"
#include "facediff/rng.hpp"

namespace facediff {

namespace {

std::string join(const std::vector<std::string>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + ids[i];
  return out;
}

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string id;
  while (std::getline(in, id, ',')) {
    if (!id.empty()) out.push_back(id);
  }
  return out;
}

}  // namespace

Talker<float> make_talker(const model::ModelConfig& config, const std::vector<std::string>& speakers,
                          std::uint64_t seed) {
  Talker<float> talker{model::DenoiserModel<float>(config, seed),
                       personalization::IdentityLibrary<float>(config.identity_dim)};
  for (const auto& id : speakers) talker.library.enroll(id, derive_seed(seed, "library"));
  return talker;
}

io::Checkpoint to_checkpoint(const Talker<float>& talker, const KeyValues& extra,
                             const nn::AdamState<float>* model_optimizer,
                             const nn::AdamState<float>* library_optimizer) {
  io::Checkpoint ckpt;
  ckpt.metadata = extra;
  ckpt.metadata["kind"] = "talker";
  for (const auto& [k, v] : talker.model.config.to_key_values()) ckpt.metadata["model." + k] = v;
  ckpt.metadata["library.temperature"] = format_double(talker.library.temperature());
  ckpt.metadata["library.dim"] = std::to_string(talker.library.dim());
  ckpt.metadata["library.speakers"] = join(talker.library.speaker_ids());
  io::put_parameters(ckpt, talker.model.params);
  io::put_parameters(ckpt, talker.library.params());
  if (model_optimizer || library_optimizer) {
    // Both optimizers share one section; their parameter names are disjoint.
    nn::AdamState<float> merged = model_optimizer ? *model_optimizer : *library_optimizer;
    if (model_optimizer && library_optimizer) {
      for (const auto& [name, m] : library_optimizer->first_moment) {
        merged.first_moment[name] = m;
        merged.second_moment[name] = library_optimizer->second_moment.at(name);
      }
    }
    io::put_optimizer(ckpt, merged);
  }
  return ckpt;
}

Talker<float> from_checkpoint(const io::Checkpoint& ckpt) {
  const auto kind = ckpt.metadata.find("kind");
  if (kind == ckpt.metadata.end() || kind->second != "talker") {
    throw DataError("checkpoint is not a talker checkpoint");
  }
  KeyValues model_kv;
  for (const auto& [k, v] : ckpt.metadata) {
    if (k.rfind("model.", 0) == 0) model_kv[k.substr(6)] = v;
  }
  const auto config = model::ModelConfig::from_key_values(model_kv);
  const auto get = [&](const std::string& key) {
    const auto it = ckpt.metadata.find(key);
    if (it == ckpt.metadata.end()) throw DataError("checkpoint metadata lacks '" + key + "'");
    return it->second;
  };
  Talker<float> talker{model::DenoiserModel<float>(config, 0),
                       personalization::IdentityLibrary<float>(
                           static_cast<int>(parse_int("library.dim", get("library.dim"))),
                           parse_double("library.temperature", get("library.temperature")))};
  for (auto& [name, p] : talker.model.params) {
    const auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw DataError("checkpoint lacks tensor '" + name + "'");
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols()) {
      throw DimensionError("checkpoint tensor '" + name + "' has the wrong shape");
    }
    p.value = it->second;
  }
  const auto emb = ckpt.tensors.find(personalization::IdentityLibrary<float>::kParamName);
  if (emb == ckpt.tensors.end()) throw DataError("checkpoint lacks the identity library");
  talker.library.assign(split(get("library.speakers")), emb->second);
  return talker;
}

void save_talker(const std::filesystem::path& path, const Talker<float>& talker,
                 const KeyValues& extra, const nn::AdamState<float>* model_optimizer,
                 const nn::AdamState<float>* library_optimizer) {
  io::save_checkpoint(path, to_checkpoint(talker, extra, model_optimizer, library_optimizer));
  write_text_file(path.string() + ".speakers", talker.library.manifest());
}

Talker<float> load_talker(const std::filesystem::path& path) {
  return from_checkpoint(io::load_checkpoint(path));
}

EvalResult evaluate(const Talker<float>& talker, const std::vector<const data::Sample*>& samples,
                    const EvalOptions& options) {
  if (samples.empty()) throw InputError("evaluate: no sequences");
  EvalResult result;
  const auto features = personalization::library_features(talker.model, talker.library);
  double mbe_sum = 0.0, lbe_sum = 0.0, fdd_sum = 0.0;
  std::size_t count = samples.size();
  if (options.max_sequences > 0) {
    count = std::min<std::size_t>(count, static_cast<std::size_t>(options.max_sequences));
  }
  for (std::size_t i = 0; i < count; ++i) {
    const auto* s = samples[i];
    const auto enc = talker.model.encode_audio(s->audio);
    const auto match =
        personalization::match_features<float>(enc.global, features, talker.library.speaker_ids());
    result.matches.emplace_back(match.speaker_id, s->speaker_id);

    sampler::InferenceRequest req;
    req.audio = s->audio;
    req.seed = derive_seed(options.seed, "eval", i);
    if (!options.match_for_quality) req.identity_override = s->speaker_id;
    const auto out = sampler::infer<float>(req, talker.model, talker.library);
    const double m = metrics::mbe(out.output, s->blendshapes);
    const double l = metrics::lbe(out.output, s->blendshapes);
    result.mbe_per_sequence.push_back(m);
    result.lbe_per_sequence.push_back(l);
    mbe_sum += m;
    lbe_sum += l;
    fdd_sum += metrics::fdd_signed(out.output.values, s->blendshapes.values,
                                   blendshapes::upper_face_channels());
  }
  const auto ids = metrics::identity_report(result.matches);
  auto& r = result.report;
  r.mbe = mbe_sum / static_cast<double>(count);
  r.lbe = lbe_sum / static_cast<double>(count);
  r.fdd_abs = std::abs(fdd_sum / static_cast<double>(count));
  r.precision = ids.precision;
  r.recall = ids.recall;
  r.f1 = ids.f1;
  r.steps = talker.model.schedule.num_steps;
  r.sequences = static_cast<int>(count);
  return result;
}

}  // namespace facediff
