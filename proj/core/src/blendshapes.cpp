#include "facediff/blendshapes.hpp"

#include "facediff/errors.hpp"

namespace facediff::blendshapes {

int channel_index(std::string_view name) {
  for (int i = 0; i < kChannelCount; ++i) {
    if (kChannelNames[static_cast<std::size_t>(i)] == name) return i;
  }
  throw LookupError("unknown blendshape channel '" + std::string(name) + "'");
}

std::vector<int> channels_with_prefix(const std::vector<std::string_view>& prefixes) {
  std::vector<int> out;
  for (int i = 0; i < kChannelCount; ++i) {
    const auto name = kChannelNames[static_cast<std::size_t>(i)];
    for (auto p : prefixes) {
      if (name.substr(0, p.size()) == p) {
        out.push_back(i);
        break;
      }
    }
  }
  return out;
}

const std::vector<int>& lip_channels() {
  static const std::vector<int> v = channels_with_prefix({"mouth", "jaw", "tongue"});
  return v;
}

const std::vector<int>& upper_face_channels() {
  static const std::vector<int> v = channels_with_prefix({"brow", "eye", "cheekSquint"});
  return v;
}

const std::vector<int>& brow_channels() {
  static const std::vector<int> v = channels_with_prefix({"brow"});
  return v;
}

const std::vector<int>& eye_channels() {
  static const std::vector<int> v = channels_with_prefix({"eye"});
  return v;
}

const std::vector<int>& jaw_channels() {
  static const std::vector<int> v = channels_with_prefix({"jaw"});
  return v;
}

}  // namespace facediff::blendshapes
