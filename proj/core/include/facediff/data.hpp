#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "facediff/blendshapes.hpp"
#include "facediff/kv_text.hpp"

namespace facediff::data {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct BlendshapeSequence {
  Matrix values;  // frames x 52, coefficients in [0, 1]
  double fps = 30.0;
  std::string speaker_id;
  std::string sequence_id;

  int frames() const { return static_cast<int>(values.rows()); }
  double duration_seconds() const { return frames() / fps; }
  // Throws DataError when the channel count or value range is violated.
  void validate() const;
};

struct AudioFeatureSequence {
  Matrix values;  // frames x audio_dim
  double fps = 30.0;
  std::string source_id;

  int frames() const { return static_cast<int>(values.rows()); }
};

struct SpeakerStyle {
  std::string speaker_id;
  double lip_gain = 1.0;
  double jaw_gain = 1.0;
  double brow_gain = 1.0;
  double eye_gain = 1.0;
  double brow_baseline = 0.1;
  double lip_exponent = 1.0;  // in [0.5, 2]
  double timing_jitter = 0.1;
  std::uint64_t style_seed = 0;
  // Per-speaker additive colouring of the audio features.
  Eigen::VectorXd audio_tint;

  // Normalized style-parameter vector used for the pairwise distance check.
  Eigen::VectorXd signature() const;
};

struct Sample {
  std::string id;
  std::string speaker_id;
  AudioFeatureSequence audio;
  BlendshapeSequence blendshapes;
  Matrix excitation;  // frames x phoneme classes; empty when loaded from disk
};

struct SplitManifest {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

struct CorpusParams {
  int num_speakers = 8;
  int sequences_per_speaker = 50;
  int frames = 100;
  int audio_dim = 64;
  double fps = 30.0;
  double test_fraction = 0.2;
  std::uint64_t seed = 7;
};

struct SyntheticCorpus {
  CorpusParams params;
  std::vector<SpeakerStyle> speakers;
  std::vector<Sample> samples;
  SplitManifest split;

  const Sample& sample(const std::string& id) const;
  std::vector<std::string> speaker_ids() const;
  // Samples of the given split ("train" or "test"), in manifest order.
  std::vector<const Sample*> split_samples(const std::string& which) const;
};

inline constexpr int kPhonemeClasses = 12;

// Fixed rendering bases shared by every corpus (independent of corpus seed).
const Matrix& audio_basis(int audio_dim);  // kPhonemeClasses x audio_dim
const Matrix& viseme_basis();              // kPhonemeClasses x lip channel count

// Latent phoneme excitation track: piecewise events over kPhonemeClasses
// channels, values in [0, 1].
Matrix synthesize_excitation(int frames, double timing_jitter, std::uint64_t seed);

// Blendshape response of one speaker to an excitation track. Lip and jaw
// channels follow the excitation sharply; brow and eye channels are driven
// mostly by style and by random events drawn from expression_seed.
BlendshapeSequence render_blendshapes(const SpeakerStyle& style, const Matrix& excitation,
                                      std::uint64_t expression_seed, double fps = 30.0);

AudioFeatureSequence render_audio(const SpeakerStyle& style, const Matrix& excitation,
                                  std::uint64_t noise_seed, int audio_dim,
                                  double fps = 30.0);

SpeakerStyle sample_style(const std::string& speaker_id, std::uint64_t seed, int audio_dim);

SyntheticCorpus generate_corpus(const CorpusParams& params);
SyntheticCorpus generate_corpus(int num_speakers, int sequences_per_speaker, int frames,
                                std::uint64_t seed);

// Stratified by speaker: every speaker lands in both splits.
SplitManifest split_corpus(const SyntheticCorpus& corpus, double test_fraction,
                           std::uint64_t seed);

// ---- files ----------------------------------------------------------------
void write_sequence(const BlendshapeSequence& seq, const std::filesystem::path& path);
BlendshapeSequence read_sequence(const std::filesystem::path& path);

void write_audio(const AudioFeatureSequence& audio, const std::filesystem::path& path);
AudioFeatureSequence read_audio(const std::filesystem::path& path);

// Directory layout: manifest.txt, styles.txt, blendshapes/<id>.csv, audio/<id>.csv
void save_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir);
SyntheticCorpus load_corpus(const std::filesystem::path& dir);

std::string format_manifest(const SyntheticCorpus& corpus);

}  // namespace facediff::data
