#include "facediff/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>

#include "facediff/errors.hpp"
#include "facediff/rng.hpp"

namespace facediff::data {

namespace {

namespace bs = facediff::blendshapes;

// The "language" shared by all synthetic speakers: one fixed seed for the
// phoneme-to-audio and phoneme-to-viseme bases.
constexpr std::uint64_t kWorldSeed = 0x5EEDFACEull;

constexpr double kAudioNoise = 0.15;
constexpr double kAudioTintScale = 0.35;
constexpr double kLipNoise = 0.01;
constexpr double kMinStyleDistance = 0.15;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Hann bump of the given width centred at `center`, added into `track`.
void add_bump(std::vector<double>& track, double center, double width, double amplitude) {
  const int n = static_cast<int>(track.size());
  const int lo = std::max(0, static_cast<int>(std::floor(center - width / 2)));
  const int hi = std::min(n - 1, static_cast<int>(std::ceil(center + width / 2)));
  for (int f = lo; f <= hi; ++f) {
    const double u = (f - center) / width;
    if (std::abs(u) <= 0.5) track[f] += amplitude * 0.5 * (1.0 + std::cos(2.0 * M_PI * u));
  }
}

// Random event track: bumps arriving at the given mean interval.
std::vector<double> event_track(int frames, double mean_interval, double min_width,
                                double max_width, double min_amp, double max_amp, Rng& rng) {
  std::vector<double> track(static_cast<std::size_t>(frames), 0.0);
  std::exponential_distribution<double> gap(1.0 / mean_interval);
  std::uniform_real_distribution<double> width(min_width, max_width);
  std::uniform_real_distribution<double> amp(min_amp, max_amp);
  double pos = -gap(rng) * 0.5;
  while (true) {
    pos += gap(rng);
    if (pos >= frames + max_width) break;
    add_bump(track, pos, width(rng), amp(rng));
  }
  return track;
}

// Mean-reverting random walk.
std::vector<double> drift_track(int frames, double rho, double scale, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> track(static_cast<std::size_t>(frames));
  double v = n01(rng) * scale;
  const double innov = scale * std::sqrt(1.0 - rho * rho);
  for (int f = 0; f < frames; ++f) {
    v = rho * v + innov * n01(rng);
    track[static_cast<std::size_t>(f)] = v;
  }
  return track;
}

std::string sequence_id_for(const std::string& speaker, int k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "_%03d", k);
  return speaker + buf;
}

std::string speaker_id_for(int s) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "spk%02d", s);
  return buf;
}

// ---- CSV -------------------------------------------------------------------

struct CsvTable {
  KeyValues metadata;
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

CsvTable read_csv(const std::filesystem::path& path, std::size_t expected_columns,
                  const std::string& what) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  CsvTable table;
  std::string line;
  int line_no = 0;
  const std::string src = path.string();
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      if (!table.header.empty()) {
        throw ParseError(src + ":" + std::to_string(line_no) +
                         ": metadata line after the header");
      }
      const std::string body = trim(t.substr(1));
      const auto eq = body.find('=');
      if (eq == std::string::npos) {
        throw ParseError(src + ":" + std::to_string(line_no) +
                         ": metadata line is not 'key = value'");
      }
      table.metadata[trim(body.substr(0, eq))] = trim(body.substr(eq + 1));
      continue;
    }
    auto cells = split_csv(t);
    if (table.header.empty()) {
      if (cells.empty() || trim(cells[0]) != "timecode") {
        throw ParseError(src + ":" + std::to_string(line_no) +
                         ": header must start with 'timecode'");
      }
      if (cells.size() != expected_columns + 1) {
        throw ParseError(src + ":" + std::to_string(line_no) + ": expected " +
                         std::to_string(expected_columns) + " " + what + " columns, found " +
                         std::to_string(cells.size() - 1));
      }
      for (auto& c : cells) table.header.push_back(trim(c));
      continue;
    }
    if (cells.size() != table.header.size()) {
      throw ParseError(src + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(table.header.size()) + " cells, found " +
                       std::to_string(cells.size()));
    }
    std::vector<double> row;
    row.reserve(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string cell = trim(cells[c]);
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (cell.empty() || used != cell.size()) {
        throw ParseError(src + ":" + std::to_string(line_no) + ": non-numeric cell '" +
                         cell + "' in column " + std::to_string(c + 1));
      }
      row.push_back(v);
    }
    table.rows.push_back(std::move(row));
  }
  if (table.header.empty()) throw ParseError(src + ": missing header row");
  return table;
}

Matrix table_values(const CsvTable& table) {
  const auto rows = static_cast<Eigen::Index>(table.rows.size());
  const auto cols = static_cast<Eigen::Index>(table.header.size()) - 1;
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = table.rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c + 1)];
    }
  }
  return m;
}

double table_fps(const CsvTable& table, const std::filesystem::path& path) {
  const auto it = table.metadata.find("fps");
  if (it == table.metadata.end()) return 30.0;
  const double fps = parse_double("fps", it->second);
  if (!(fps > 0.0)) throw ParseError(path.string() + ": fps must be positive");
  return fps;
}

void check_frames(const CsvTable& table, const std::filesystem::path& path) {
  const auto it = table.metadata.find("frames");
  if (it == table.metadata.end()) return;
  const long long frames = parse_int("frames", it->second);
  if (frames != static_cast<long long>(table.rows.size())) {
    throw ParseError(path.string() + ": metadata declares " + it->second +
                     " frames but the file holds " + std::to_string(table.rows.size()));
  }
}

void write_csv(const std::filesystem::path& path, const KeyValues& metadata,
               const std::vector<std::string>& columns, const Matrix& values, double fps) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& [k, v] : metadata) out << "# " << k << " = " << v << '\n';
  out << "timecode";
  for (const auto& c : columns) out << ',' << c;
  out << '\n';
  char buf[32];
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(r) / fps);
    out << buf;
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      std::snprintf(buf, sizeof buf, ",%.8f", values(r, c));
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<std::string> split_ids(const std::string& text) {
  std::vector<std::string> ids;
  std::istringstream in(text);
  std::string id;
  while (std::getline(in, id, ',')) {
    id = trim(id);
    if (!id.empty()) ids.push_back(id);
  }
  return ids;
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ',';
    out += ids[i];
  }
  return out;
}

}  // namespace

// ---- sequences ---------------------------------------------------------------

void BlendshapeSequence::validate() const {
  if (values.cols() != bs::kChannelCount) {
    throw DataError("blendshape sequence has " + std::to_string(values.cols()) +
                    " channels, expected " + std::to_string(bs::kChannelCount));
  }
  if (!(fps > 0.0)) throw DataError("blendshape sequence fps must be positive");
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const double v = values.data()[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError("blendshape value " + std::to_string(v) + " outside [0, 1]");
    }
  }
}

Eigen::VectorXd SpeakerStyle::signature() const {
  Eigen::VectorXd v(7);
  // Each entry divided by the width of its sampling range.
  v << lip_gain / 1.0, jaw_gain / 1.0, brow_gain / 1.0, eye_gain / 1.0,
      brow_baseline / 0.35, lip_exponent / 1.0, timing_jitter / 0.3;
  return v;
}

const Sample& SyntheticCorpus::sample(const std::string& id) const {
  for (const auto& s : samples) {
    if (s.id == id) return s;
  }
  throw LookupError("no sequence with id '" + id + "'");
}

std::vector<std::string> SyntheticCorpus::speaker_ids() const {
  std::vector<std::string> ids;
  ids.reserve(speakers.size());
  for (const auto& s : speakers) ids.push_back(s.speaker_id);
  return ids;
}

std::vector<const Sample*> SyntheticCorpus::split_samples(const std::string& which) const {
  const std::vector<std::string>* ids = nullptr;
  if (which == "train") {
    ids = &split.train;
  } else if (which == "test") {
    ids = &split.test;
  } else {
    throw ConfigError("unknown split '" + which + "' (expected train or test)");
  }
  std::map<std::string, const Sample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  std::vector<const Sample*> out;
  out.reserve(ids->size());
  for (const auto& id : *ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("split lists unknown sequence '" + id + "'");
    out.push_back(it->second);
  }
  return out;
}

// ---- generator ---------------------------------------------------------------

const Matrix& audio_basis(int audio_dim) {
  static std::mutex mu;
  static std::map<int, Matrix> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(audio_dim);
  if (it == cache.end()) {
    Rng rng(derive_seed(kWorldSeed, "audio_basis", static_cast<std::uint64_t>(audio_dim)));
    Matrix basis = standard_normal<Matrix>(kPhonemeClasses, audio_dim, rng) * 0.8;
    it = cache.emplace(audio_dim, std::move(basis)).first;
  }
  return it->second;
}

const Matrix& viseme_basis() {
  static const Matrix basis = [] {
    const int lips = static_cast<int>(bs::lip_channels().size());
    Rng rng(derive_seed(kWorldSeed, "viseme_basis"));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Matrix w = Matrix::Zero(kPhonemeClasses, lips);
    const int jaw_open_pos = static_cast<int>(
        std::find(bs::lip_channels().begin(), bs::lip_channels().end(),
                  bs::channel_index("jawOpen")) -
        bs::lip_channels().begin());
    for (int p = 0; p < kPhonemeClasses; ++p) {
      for (int c = 0; c < lips; ++c) {
        if (u01(rng) < 0.35) w(p, c) = 0.15 + 0.55 * u01(rng);
      }
      // Every phoneme opens the jaw to some degree.
      w(p, jaw_open_pos) = 0.2 + 0.6 * u01(rng);
    }
    return w;
  }();
  return basis;
}

Matrix synthesize_excitation(int frames, double timing_jitter, std::uint64_t seed) {
  if (frames < 1) throw ConfigError("excitation needs at least one frame");
  Rng rng(seed);
  std::uniform_int_distribution<int> phoneme(0, kPhonemeClasses - 1);
  std::uniform_int_distribution<int> base_len(3, 8);
  std::uniform_real_distribution<double> amp(0.6, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix raw = Matrix::Zero(frames, kPhonemeClasses);
  int f = 0;
  while (f < frames) {
    const double stretch = std::max(0.4, 1.0 + timing_jitter * n01(rng));
    const int len = std::max(2, static_cast<int>(std::lround(base_len(rng) * stretch)));
    const bool silence = u01(rng) < 0.15;
    const int p = phoneme(rng);
    const double a = amp(rng);
    for (int k = 0; k < len && f < frames; ++k, ++f) {
      if (!silence) raw(f, p) = a;
    }
  }
  // Short causal smoothing softens segment onsets without looking ahead.
  Matrix e(frames, kPhonemeClasses);
  for (int i = 0; i < frames; ++i) {
    e.row(i) = 0.6 * raw.row(i) + 0.3 * raw.row(std::max(0, i - 1)) +
               0.1 * raw.row(std::max(0, i - 2));
  }
  return e;
}

BlendshapeSequence render_blendshapes(const SpeakerStyle& style, const Matrix& excitation,
                                      std::uint64_t expression_seed, double fps) {
  if (excitation.cols() != kPhonemeClasses) {
    throw DimensionError("excitation must have " + std::to_string(kPhonemeClasses) +
                         " columns");
  }
  const int frames = static_cast<int>(excitation.rows());
  Rng rng(expression_seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix out = Matrix::Zero(frames, bs::kChannelCount);

  // Lower face: sharp, nearly deterministic function of the excitation.
  const auto& lips = bs::lip_channels();
  const Matrix lip_raw = excitation * viseme_basis();
  const auto& jaws = bs::jaw_channels();
  for (std::size_t c = 0; c < lips.size(); ++c) {
    const int ch = lips[c];
    const bool is_jaw = std::find(jaws.begin(), jaws.end(), ch) != jaws.end();
    const double gain = is_jaw ? style.jaw_gain : style.lip_gain;
    for (int f = 0; f < frames; ++f) {
      const double r = std::max(0.0, lip_raw(f, static_cast<Eigen::Index>(c)));
      out(f, ch) = gain * (std::pow(r, style.lip_exponent) + kLipNoise * n01(rng));
    }
  }

  // Speech energy envelope gives the upper face its weak audio coupling.
  std::vector<double> energy(static_cast<std::size_t>(frames));
  for (int f = 0; f < frames; ++f) {
    energy[static_cast<std::size_t>(f)] = excitation.row(f).sum();
  }

  // Brows: style baseline plus random raises only loosely tied to speech.
  const auto raise = event_track(frames, 35.0, 8.0, 20.0, 0.25, 0.6, rng);
  const auto frown = event_track(frames, 60.0, 10.0, 24.0, 0.15, 0.4, rng);
  const int inner = bs::channel_index("browInnerUp");
  const int outer_l = bs::channel_index("browOuterUpLeft");
  const int outer_r = bs::channel_index("browOuterUpRight");
  const int down_l = bs::channel_index("browDownLeft");
  const int down_r = bs::channel_index("browDownRight");
  for (int f = 0; f < frames; ++f) {
    const auto i = static_cast<std::size_t>(f);
    const double up = raise[i] + 0.1 * energy[i];
    out(f, inner) = style.brow_baseline + style.brow_gain * up;
    out(f, outer_l) = style.brow_baseline + style.brow_gain * 0.8 * up;
    out(f, outer_r) = style.brow_baseline + style.brow_gain * 0.75 * up;
    out(f, down_l) = style.brow_baseline + style.brow_gain * frown[i];
    out(f, down_r) = style.brow_baseline + style.brow_gain * 0.9 * frown[i];
  }

  // Eyes: blinks, slow gaze drift, squint/wide following brow activity.
  const auto blink = event_track(frames, 70.0, 4.0, 6.0, 0.8, 1.0, rng);
  const auto gaze_x = drift_track(frames, 0.97, 0.25, rng);
  const auto gaze_y = drift_track(frames, 0.97, 0.2, rng);
  const auto eye_pair = [&](const char* left, const char* right, double value, int f) {
    out(f, bs::channel_index(left)) = style.eye_gain * value;
    out(f, bs::channel_index(right)) = style.eye_gain * value;
  };
  for (int f = 0; f < frames; ++f) {
    const auto i = static_cast<std::size_t>(f);
    eye_pair("eyeBlinkLeft", "eyeBlinkRight", blink[i], f);
    eye_pair("eyeLookUpLeft", "eyeLookUpRight", std::max(0.0, gaze_y[i]), f);
    eye_pair("eyeLookDownLeft", "eyeLookDownRight", std::max(0.0, -gaze_y[i]), f);
    out(f, bs::channel_index("eyeLookOutLeft")) = style.eye_gain * std::max(0.0, gaze_x[i]);
    out(f, bs::channel_index("eyeLookInRight")) = style.eye_gain * std::max(0.0, gaze_x[i]);
    out(f, bs::channel_index("eyeLookInLeft")) = style.eye_gain * std::max(0.0, -gaze_x[i]);
    out(f, bs::channel_index("eyeLookOutRight")) = style.eye_gain * std::max(0.0, -gaze_x[i]);
    eye_pair("eyeWideLeft", "eyeWideRight", 0.5 * raise[i], f);
    eye_pair("eyeSquintLeft", "eyeSquintRight", 0.5 * frown[i], f);
  }

  // Remaining mid-face channels.
  const auto puff = drift_track(frames, 0.95, 0.06, rng);
  const auto sneer = drift_track(frames, 0.95, 0.05, rng);
  const int smile_l = bs::channel_index("mouthSmileLeft");
  const int smile_r = bs::channel_index("mouthSmileRight");
  for (int f = 0; f < frames; ++f) {
    const auto i = static_cast<std::size_t>(f);
    out(f, bs::channel_index("cheekPuff")) = style.brow_gain * std::max(0.0, puff[i]);
    const double sn = style.brow_gain * std::max(0.0, sneer[i]);
    out(f, bs::channel_index("noseSneerLeft")) = sn;
    out(f, bs::channel_index("noseSneerRight")) = sn;
    out(f, bs::channel_index("cheekSquintLeft")) = 0.3 * out(f, smile_l);
    out(f, bs::channel_index("cheekSquintRight")) = 0.3 * out(f, smile_r);
  }

  out = out.unaryExpr([](double v) { return clamp01(v); });
  BlendshapeSequence seq;
  seq.values = std::move(out);
  seq.fps = fps;
  seq.speaker_id = style.speaker_id;
  return seq;
}

AudioFeatureSequence render_audio(const SpeakerStyle& style, const Matrix& excitation,
                                  std::uint64_t noise_seed, int audio_dim, double fps) {
  if (excitation.cols() != kPhonemeClasses) {
    throw DimensionError("excitation must have " + std::to_string(kPhonemeClasses) +
                         " columns");
  }
  if (style.audio_tint.size() != audio_dim) {
    throw DimensionError("speaker audio tint has " + std::to_string(style.audio_tint.size()) +
                         " entries, expected " + std::to_string(audio_dim));
  }
  Rng rng(noise_seed);
  AudioFeatureSequence audio;
  audio.fps = fps;
  audio.values = excitation * audio_basis(audio_dim);
  audio.values.rowwise() += style.audio_tint.transpose();
  audio.values += kAudioNoise * standard_normal<Matrix>(excitation.rows(), audio_dim, rng);
  return audio;
}

SpeakerStyle sample_style(const std::string& speaker_id, std::uint64_t seed, int audio_dim) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const auto in = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  SpeakerStyle s;
  s.speaker_id = speaker_id;
  s.style_seed = seed;
  s.lip_gain = in(0.6, 1.6);
  s.jaw_gain = in(0.6, 1.6);
  s.brow_gain = in(0.5, 1.5);
  s.eye_gain = in(0.5, 1.5);
  s.brow_baseline = in(0.0, 0.35);
  s.lip_exponent = in(0.6, 1.6);
  s.timing_jitter = in(0.0, 0.3);
  // Spectral tilt plus a speaker-specific colouring.
  const double tilt = in(-0.5, 0.5);
  Eigen::VectorXd tint(audio_dim);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (int d = 0; d < audio_dim; ++d) {
    const double pos = audio_dim > 1 ? 2.0 * d / (audio_dim - 1) - 1.0 : 0.0;
    tint(d) = tilt * pos + kAudioTintScale * n01(rng);
  }
  s.audio_tint = tint;
  return s;
}

SyntheticCorpus generate_corpus(const CorpusParams& params) {
  if (params.num_speakers < 1 || params.sequences_per_speaker < 1 || params.frames < 1 ||
      params.audio_dim < 1) {
    throw ConfigError("corpus counts must be positive");
  }
  if (!(params.fps > 0.0)) throw ConfigError("corpus fps must be positive");
  SyntheticCorpus corpus;
  corpus.params = params;

  for (int s = 0; s < params.num_speakers; ++s) {
    const std::string id = speaker_id_for(s);
    SpeakerStyle style;
    for (std::uint64_t attempt = 0;; ++attempt) {
      style = sample_style(
          id, derive_seed(params.seed, "style", static_cast<std::uint64_t>(s) * 1000 + attempt),
          params.audio_dim);
      bool distinct = true;
      for (const auto& other : corpus.speakers) {
        if ((other.signature() - style.signature()).norm() < kMinStyleDistance) {
          distinct = false;
          break;
        }
      }
      if (distinct) break;
      if (attempt > 10000) throw ConfigError("cannot draw pairwise distinct speaker styles");
    }
    corpus.speakers.push_back(style);
  }

  corpus.samples.reserve(static_cast<std::size_t>(params.num_speakers) *
                         static_cast<std::size_t>(params.sequences_per_speaker));
  for (int s = 0; s < params.num_speakers; ++s) {
    const auto& style = corpus.speakers[static_cast<std::size_t>(s)];
    for (int k = 0; k < params.sequences_per_speaker; ++k) {
      const auto index = static_cast<std::uint64_t>(s) *
                             static_cast<std::uint64_t>(params.sequences_per_speaker) +
                         static_cast<std::uint64_t>(k);
      Sample sample;
      sample.speaker_id = style.speaker_id;
      sample.id = sequence_id_for(style.speaker_id, k);
      sample.excitation = synthesize_excitation(
          params.frames, style.timing_jitter, derive_seed(params.seed, "excitation", index));
      sample.blendshapes = render_blendshapes(
          style, sample.excitation, derive_seed(params.seed, "expression", index), params.fps);
      sample.blendshapes.sequence_id = sample.id;
      sample.audio = render_audio(style, sample.excitation,
                                  derive_seed(params.seed, "audio_noise", index),
                                  params.audio_dim, params.fps);
      sample.audio.source_id = sample.id;
      corpus.samples.push_back(std::move(sample));
    }
  }
  if (params.sequences_per_speaker >= 2) {
    corpus.split = split_corpus(corpus, params.test_fraction,
                                derive_seed(params.seed, "split"));
  }
  return corpus;
}

SyntheticCorpus generate_corpus(int num_speakers, int sequences_per_speaker, int frames,
                                std::uint64_t seed) {
  CorpusParams p;
  p.num_speakers = num_speakers;
  p.sequences_per_speaker = sequences_per_speaker;
  p.frames = frames;
  p.seed = seed;
  return generate_corpus(p);
}

SplitManifest split_corpus(const SyntheticCorpus& corpus, double test_fraction,
                           std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must lie in (0, 1)");
  }
  std::map<std::string, std::vector<std::string>> by_speaker;
  for (const auto& s : corpus.samples) by_speaker[s.speaker_id].push_back(s.id);

  // Largest-remainder allocation keeps the total at round(N * fraction) while
  // every speaker stays within one sequence of its proportional share.
  std::size_t total = 0;
  for (const auto& [spk, ids] : by_speaker) {
    if (ids.size() < 2) {
      throw SplitError("speaker '" + spk + "' has fewer than 2 sequences");
    }
    total += ids.size();
  }
  const auto target = static_cast<long>(std::lround(static_cast<double>(total) * test_fraction));
  std::vector<std::pair<double, std::string>> remainders;
  std::map<std::string, long> quota;
  long assigned = 0;
  for (const auto& [spk, ids] : by_speaker) {
    const double exact = static_cast<double>(ids.size()) * test_fraction;
    long q = static_cast<long>(std::floor(exact));
    q = std::clamp<long>(q, 1, static_cast<long>(ids.size()) - 1);
    quota[spk] = q;
    assigned += q;
    remainders.emplace_back(exact - std::floor(exact), spk);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (const auto& [rem, spk] : remainders) {
    if (assigned >= target) break;
    if (quota[spk] + 1 <= static_cast<long>(by_speaker[spk].size()) - 1) {
      ++quota[spk];
      ++assigned;
    }
  }

  SplitManifest manifest;
  Rng rng(seed);
  for (auto& [spk, ids] : by_speaker) {
    std::vector<std::string> shuffled = ids;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto q = static_cast<std::size_t>(quota[spk]);
    std::vector<std::string> test(shuffled.begin(), shuffled.begin() + static_cast<long>(q));
    std::vector<std::string> train(shuffled.begin() + static_cast<long>(q), shuffled.end());
    std::sort(test.begin(), test.end());
    std::sort(train.begin(), train.end());
    manifest.test.insert(manifest.test.end(), test.begin(), test.end());
    manifest.train.insert(manifest.train.end(), train.begin(), train.end());
  }
  return manifest;
}

// ---- files -------------------------------------------------------------------

void write_sequence(const BlendshapeSequence& seq, const std::filesystem::path& path) {
  seq.validate();
  KeyValues meta;
  meta["fps"] = format_double(seq.fps);
  meta["frames"] = std::to_string(seq.frames());
  meta["channel_list_version"] = std::to_string(bs::kChannelListVersion);
  if (!seq.speaker_id.empty()) meta["speaker_id"] = seq.speaker_id;
  if (!seq.sequence_id.empty()) meta["sequence_id"] = seq.sequence_id;
  std::vector<std::string> columns(bs::kChannelNames.begin(), bs::kChannelNames.end());
  write_csv(path, meta, columns, seq.values, seq.fps);
}

BlendshapeSequence read_sequence(const std::filesystem::path& path) {
  const CsvTable table = read_csv(path, bs::kChannelCount, "blendshape");
  for (int c = 0; c < bs::kChannelCount; ++c) {
    if (table.header[static_cast<std::size_t>(c + 1)] != bs::kChannelNames[static_cast<std::size_t>(c)]) {
      throw ParseError(path.string() + ": column " + std::to_string(c + 1) + " is '" +
                       table.header[static_cast<std::size_t>(c + 1)] + "', expected '" +
                       std::string(bs::kChannelNames[static_cast<std::size_t>(c)]) + "'");
    }
  }
  check_frames(table, path);
  BlendshapeSequence seq;
  seq.values = table_values(table);
  seq.fps = table_fps(table, path);
  if (auto it = table.metadata.find("speaker_id"); it != table.metadata.end()) {
    seq.speaker_id = it->second;
  }
  if (auto it = table.metadata.find("sequence_id"); it != table.metadata.end()) {
    seq.sequence_id = it->second;
  }
  seq.validate();
  return seq;
}

void write_audio(const AudioFeatureSequence& audio, const std::filesystem::path& path) {
  KeyValues meta;
  meta["fps"] = format_double(audio.fps);
  meta["frames"] = std::to_string(audio.frames());
  meta["audio_dim"] = std::to_string(audio.values.cols());
  if (!audio.source_id.empty()) meta["source_id"] = audio.source_id;
  std::vector<std::string> columns;
  for (Eigen::Index c = 0; c < audio.values.cols(); ++c) columns.push_back("f" + std::to_string(c));
  write_csv(path, meta, columns, audio.values, audio.fps);
}

AudioFeatureSequence read_audio(const std::filesystem::path& path) {
  // The header carries the width; peek at it before validating.
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t columns = 0;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    columns = split_csv(t).size();
    break;
  }
  if (columns < 2) throw ParseError(path.string() + ": audio file has no feature columns");
  const CsvTable table = read_csv(path, columns - 1, "audio feature");
  check_frames(table, path);
  AudioFeatureSequence audio;
  audio.values = table_values(table);
  audio.fps = table_fps(table, path);
  if (auto it = table.metadata.find("source_id"); it != table.metadata.end()) {
    audio.source_id = it->second;
  }
  if (!audio.values.allFinite()) throw DataError(path.string() + ": non-finite audio feature");
  return audio;
}

std::string format_manifest(const SyntheticCorpus& corpus) {
  KeyValues kv;
  const auto& p = corpus.params;
  kv["format_version"] = "1";
  kv["seed"] = std::to_string(p.seed);
  kv["num_speakers"] = std::to_string(p.num_speakers);
  kv["sequences_per_speaker"] = std::to_string(p.sequences_per_speaker);
  kv["frames"] = std::to_string(p.frames);
  kv["audio_dim"] = std::to_string(p.audio_dim);
  kv["fps"] = format_double(p.fps);
  kv["test_fraction"] = format_double(p.test_fraction);
  kv["speakers"] = join_ids(corpus.speaker_ids());
  kv["train"] = join_ids(corpus.split.train);
  kv["test"] = join_ids(corpus.split.test);
  return format_key_values(kv);
}

void save_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "blendshapes");
  std::filesystem::create_directories(dir / "audio");
  write_text_file(dir / "manifest.txt", format_manifest(corpus));
  KeyValues styles;
  for (const auto& s : corpus.speakers) {
    const std::string p = s.speaker_id + ".";
    styles[p + "lip_gain"] = format_double(s.lip_gain);
    styles[p + "jaw_gain"] = format_double(s.jaw_gain);
    styles[p + "brow_gain"] = format_double(s.brow_gain);
    styles[p + "eye_gain"] = format_double(s.eye_gain);
    styles[p + "brow_baseline"] = format_double(s.brow_baseline);
    styles[p + "lip_exponent"] = format_double(s.lip_exponent);
    styles[p + "timing_jitter"] = format_double(s.timing_jitter);
    styles[p + "style_seed"] = std::to_string(s.style_seed);
  }
  write_key_values(dir / "styles.txt", styles);
  for (const auto& s : corpus.samples) {
    write_sequence(s.blendshapes, dir / "blendshapes" / (s.id + ".csv"));
    write_audio(s.audio, dir / "audio" / (s.id + ".csv"));
  }
}

SyntheticCorpus load_corpus(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw IoError("corpus directory " + dir.string() + " does not exist");
  }
  const KeyValues kv = read_key_values(dir / "manifest.txt");
  const auto get = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw DataError("corpus manifest lacks '" + key + "'");
    return it->second;
  };
  SyntheticCorpus corpus;
  auto& p = corpus.params;
  p.seed = static_cast<std::uint64_t>(std::stoull(get("seed")));
  p.num_speakers = static_cast<int>(parse_int("num_speakers", get("num_speakers")));
  p.sequences_per_speaker =
      static_cast<int>(parse_int("sequences_per_speaker", get("sequences_per_speaker")));
  p.frames = static_cast<int>(parse_int("frames", get("frames")));
  p.audio_dim = static_cast<int>(parse_int("audio_dim", get("audio_dim")));
  p.fps = parse_double("fps", get("fps"));
  p.test_fraction = parse_double("test_fraction", get("test_fraction"));
  corpus.split.train = split_ids(get("train"));
  corpus.split.test = split_ids(get("test"));

  const KeyValues styles = read_key_values(dir / "styles.txt");
  for (const auto& id : split_ids(get("speakers"))) {
    // Styles are reconstructed from their seeds so the audio tint comes back too.
    const auto it = styles.find(id + ".style_seed");
    if (it == styles.end()) throw DataError("styles.txt lacks speaker '" + id + "'");
    corpus.speakers.push_back(
        sample_style(id, static_cast<std::uint64_t>(std::stoull(it->second)), p.audio_dim));
  }

  std::vector<std::string> ids = corpus.split.train;
  ids.insert(ids.end(), corpus.split.test.begin(), corpus.split.test.end());
  std::sort(ids.begin(), ids.end());
  for (const auto& id : ids) {
    Sample s;
    s.id = id;
    s.blendshapes = read_sequence(dir / "blendshapes" / (id + ".csv"));
    s.audio = read_audio(dir / "audio" / (id + ".csv"));
    s.speaker_id = s.blendshapes.speaker_id;
    if (s.audio.frames() != s.blendshapes.frames()) {
      throw DataError("sequence '" + id + "' has mismatched audio and blendshape lengths");
    }
    corpus.samples.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace facediff::data
