#pragma once

#include <optional>

#include "metastab/image.hpp"
#include "metastab/rigid.hpp"
#include "metastab/util.hpp"

namespace metastab {

/// Jitter and smooth-path law for synthetic stable/unstable pairs.
/// The jitter is a per-frame mean-reverting random walk:
///   j_t = walk_decay * j_{t-1} + N(0, std)
/// (walk_decay = 1 gives a pure random walk). The smooth path is a sum of
/// slow sinusoids.
struct ShakeProfile {
  double rot_walk_std = 0.004;    // radians per frame
  double trans_walk_std = 1.2;    // pixels per frame
  double walk_decay = 0.5;

  double smooth_amp_x = 3.0;      // pixels
  double smooth_amp_y = 2.0;
  double smooth_amp_theta = 0.01; // radians
  double smooth_period_x = 24.0;  // frames
  double smooth_period_y = 31.0;
  double smooth_period_theta = 27.0;

  uint64_t seed = 0;

  std::string to_json() const;
  static ShakeProfile from_json(const std::string& text);
  static ShakeProfile load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

/// Procedurally textured scene: multi-octave background plus moving
/// sprites carrying independent motion. sprite_mask[t] marks pixels whose
/// ground-truth motion differs from the camera's.
struct SceneResult {
  FrameSequence seq;
  std::vector<std::vector<uint8_t>> sprite_mask;  // per frame, w*h
};

SceneResult procedural_scene(int width, int height, int frames, uint64_t seed,
                             int sprites = 2);

/// Single textured frame (for flow tests and regressor training).
Frame random_texture_frame(int width, int height, uint64_t seed);

struct SynthesizedPair {
  FrameSequence stable;    // smooth-path-warped source
  FrameSequence unstable;  // stable further warped by per-frame rigid jitter
  /// Sampling transform applied to stable frame t to make unstable frame t:
  /// unstable_t = warp(stable_t, jitter[t]). Its inverse re-aligns
  /// unstable_t onto stable_t.
  std::vector<RigidTransform> jitter;
  std::vector<RigidTransform> smooth_path;  // applied to the source

  void save_ground_truth(const std::filesystem::path& path) const;
};

/// Builds a stable/unstable pair sharing exact content. Throws when the
/// profile pushes more than 40% of warped content off the frame.
SynthesizedPair synthesize_pair(const FrameSequence& source, const ShakeProfile& profile);

}  // namespace metastab
