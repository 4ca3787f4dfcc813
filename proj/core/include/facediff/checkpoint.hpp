#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "facediff/kv_text.hpp"
#include "facediff/optim.hpp"

// Binary checkpoint layout (all integers and floats little-endian):
//
//   char[8]  magic "FDIFFCKP"
//   u32      format version (1)
//   u32      metadata length, then that many bytes of "key = value" text
//   u32      parameter count, then per parameter (sorted by name):
//              u32 name length, name bytes, u32 rows, u32 cols,
//              rows * cols f32 values in row-major order
//   u8       1 if an optimizer section follows, else 0
//   optimizer section:
//              u64 step, f64 learning rate, f64 beta1, f64 beta2, f64 epsilon
//              u32 record count, then per record (sorted by name):
//                u32 name length, name bytes, u32 rows, u32 cols,
//                first-moment f32 values, second-moment f32 values
namespace facediff::io {

inline constexpr std::string_view kCheckpointMagic = "FDIFFCKP";
inline constexpr std::uint32_t kCheckpointVersion = 1;

using Tensor32 = nn::Mat<float>;

struct OptimizerSnapshot {
  std::uint64_t step = 0;
  double learning_rate = 0.0;
  double beta1 = 0.0;
  double beta2 = 0.0;
  double epsilon = 0.0;
  std::map<std::string, Tensor32> first_moment;
  std::map<std::string, Tensor32> second_moment;
};

struct Checkpoint {
  KeyValues metadata;
  std::map<std::string, Tensor32> tensors;
  std::optional<OptimizerSnapshot> optimizer;
};

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <class S>
void put_parameters(Checkpoint& ckpt, const nn::ParameterSet<S>& params) {
  for (const auto& [name, p] : params) ckpt.tensors[name] = p.value.template cast<float>();
}

template <class S>
void put_optimizer(Checkpoint& ckpt, const nn::AdamState<S>& state) {
  OptimizerSnapshot snap;
  snap.step = state.step;
  snap.learning_rate = state.learning_rate;
  snap.beta1 = state.beta1;
  snap.beta2 = state.beta2;
  snap.epsilon = state.epsilon;
  for (const auto& [name, m] : state.first_moment) {
    snap.first_moment[name] = m.template cast<float>();
    snap.second_moment[name] = state.second_moment.at(name).template cast<float>();
  }
  ckpt.optimizer = std::move(snap);
}

template <class S>
nn::AdamState<S> get_optimizer(const OptimizerSnapshot& snap) {
  nn::AdamState<S> state;
  state.step = snap.step;
  state.learning_rate = snap.learning_rate;
  state.beta1 = snap.beta1;
  state.beta2 = snap.beta2;
  state.epsilon = snap.epsilon;
  for (const auto& [name, m] : snap.first_moment) {
    state.first_moment[name] = m.template cast<S>();
    state.second_moment[name] = snap.second_moment.at(name).template cast<S>();
  }
  return state;
}

// Copies tensors whose names start with prefix into params, replacing any
// existing entries of the same name.
template <class S>
void get_parameters(const Checkpoint& ckpt, const std::string& prefix,
                    nn::ParameterSet<S>& params) {
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    if (params.contains(name)) {
      auto& p = params.at(name);
      if (p.value.rows() != t.rows() || p.value.cols() != t.cols()) {
        throw DimensionError("checkpoint tensor '" + name + "' has shape " +
                             std::to_string(t.rows()) + "x" + std::to_string(t.cols()) +
                             ", model expects " + std::to_string(p.value.rows()) + "x" +
                             std::to_string(p.value.cols()));
      }
      p.value = t.template cast<S>();
    } else {
      params.add(name, t.template cast<S>());
    }
  }
}

}  // namespace facediff::io
