#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "pmk/error.hpp"

namespace pmk {

// COCO-18 keypoint order followed by the background channel.
enum Joint : std::size_t {
  kNose = 0,
  kNeck,
  kRShoulder,
  kRElbow,
  kRWrist,
  kLShoulder,
  kLElbow,
  kLWrist,
  kRHip,
  kRKnee,
  kRAnkle,
  kLHip,
  kLKnee,
  kLAnkle,
  kREye,
  kLEye,
  kREar,
  kLEar,
  kBackground,
};

inline constexpr std::size_t kNumCocoJoints = 18;
inline constexpr std::size_t kNumChannelsWithBackground = 19;

inline constexpr std::array<std::string_view, kNumChannelsWithBackground> kJointNames = {
    "Nose",   "Neck",  "RShoulder", "RElbow", "RWrist", "LShoulder", "LElbow", "LWrist", "RHip",      "RKnee",
    "RAnkle", "LHip",  "LKnee",     "LAnkle", "REye",   "LEye",      "REar",   "LEar",   "Background"};

[[nodiscard]] inline std::size_t joint_index(std::string_view name) {
  for (std::size_t i = 0; i < kJointNames.size(); ++i) {
    if (kJointNames[i] == name) return i;
  }
  throw ValueError("unknown joint name '" + std::string(name) + "'");
}

struct JointGroup {
  std::string name;
  std::vector<std::size_t> members;
  bool jittered = true;  // false: receives the global offset only
};

// Partition of the joint channels into rigidly jittered groups, plus the
// left/right exchange used by horizontal flipping.
struct JointGroups {
  std::size_t num_joints = 0;
  std::vector<JointGroup> groups;
  std::vector<std::size_t> group_of;  // joint -> group index
  std::vector<std::size_t> mirror;    // joint -> joint after a horizontal flip

  static JointGroups coco19() {
    JointGroups g;
    g.num_joints = kNumChannelsWithBackground;
    g.groups = {
        {"Head", {kNose, kREye, kLEye, kLEar, kREar}, true},
        {"Torso", {kRHip, kLHip, kNeck}, false},
        {"LeftHand", {kLShoulder, kLElbow, kLWrist}, true},
        {"RightHand", {kRShoulder, kRElbow, kRWrist}, true},
        {"LeftLeg", {kLKnee, kLAnkle}, true},
        {"RightLeg", {kRKnee, kRAnkle}, true},
        {"Background", {kBackground}, false},
    };
    g.mirror.resize(g.num_joints);
    for (std::size_t j = 0; j < g.num_joints; ++j) g.mirror[j] = j;
    const std::pair<std::size_t, std::size_t> pairs[] = {{kRShoulder, kLShoulder}, {kRElbow, kLElbow},
                                                         {kRWrist, kLWrist},       {kRHip, kLHip},
                                                         {kRKnee, kLKnee},         {kRAnkle, kLAnkle},
                                                         {kREye, kLEye},           {kREar, kLEar}};
    for (auto [r, l] : pairs) {
      g.mirror[r] = l;
      g.mirror[l] = r;
    }
    g.finalize();
    return g;
  }

  // Fills group_of and checks that groups partition the joints and that the
  // mirror map is an involution.
  void finalize() {
    group_of.assign(num_joints, num_joints);
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      for (std::size_t j : groups[gi].members) {
        if (j >= num_joints) throw ValueError("joint group '" + groups[gi].name + "' has out-of-range joint");
        if (group_of[j] != num_joints) throw ValueError("joint " + std::to_string(j) + " is in two groups");
        group_of[j] = gi;
      }
    }
    for (std::size_t j = 0; j < num_joints; ++j) {
      if (group_of[j] == num_joints) throw ValueError("joint " + std::to_string(j) + " belongs to no group");
    }
    if (mirror.size() != num_joints) throw ValueError("mirror map size does not match joint count");
    for (std::size_t j = 0; j < num_joints; ++j) {
      if (mirror[j] >= num_joints || mirror[mirror[j]] != j) {
        throw ValueError("mirror map is not an involution at joint " + std::to_string(j));
      }
    }
  }
};

}  // namespace pmk
