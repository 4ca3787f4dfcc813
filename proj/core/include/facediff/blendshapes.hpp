#pragma once

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace facediff::blendshapes {

inline constexpr int kChannelCount = 52;
// Bumped whenever the name list or the channel groups below change.
inline constexpr int kChannelListVersion = 1;

// Canonical ARKit blendshape order.
inline constexpr std::array<std::string_view, kChannelCount> kChannelNames = {
    "eyeBlinkLeft",     "eyeLookDownLeft",  "eyeLookInLeft",      "eyeLookOutLeft",
    "eyeLookUpLeft",    "eyeSquintLeft",    "eyeWideLeft",        "eyeBlinkRight",
    "eyeLookDownRight", "eyeLookInRight",   "eyeLookOutRight",    "eyeLookUpRight",
    "eyeSquintRight",   "eyeWideRight",     "jawForward",         "jawLeft",
    "jawRight",         "jawOpen",          "mouthClose",         "mouthFunnel",
    "mouthPucker",      "mouthLeft",        "mouthRight",         "mouthSmileLeft",
    "mouthSmileRight",  "mouthFrownLeft",   "mouthFrownRight",    "mouthDimpleLeft",
    "mouthDimpleRight", "mouthStretchLeft", "mouthStretchRight",  "mouthRollLower",
    "mouthRollUpper",   "mouthShrugLower",  "mouthShrugUpper",    "mouthPressLeft",
    "mouthPressRight",  "mouthLowerDownLeft", "mouthLowerDownRight", "mouthUpperUpLeft",
    "mouthUpperUpRight", "browDownLeft",    "browDownRight",      "browInnerUp",
    "browOuterUpLeft",  "browOuterUpRight", "cheekPuff",          "cheekSquintLeft",
    "cheekSquintRight", "noseSneerLeft",    "noseSneerRight",     "tongueOut",
};

int channel_index(std::string_view name);

// Every "mouth*" and "jaw*" channel plus tongueOut (28 channels).
const std::vector<int>& lip_channels();
// "brow*", "eye*" (blinks included) and the cheekSquint pair (21 channels).
const std::vector<int>& upper_face_channels();
const std::vector<int>& brow_channels();
const std::vector<int>& eye_channels();
const std::vector<int>& jaw_channels();

// Channels whose name starts with any of the given prefixes, in canonical order.
std::vector<int> channels_with_prefix(const std::vector<std::string_view>& prefixes);

}  // namespace facediff::blendshapes
