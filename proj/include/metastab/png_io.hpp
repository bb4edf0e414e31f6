#pragma once

#include <filesystem>

#include "metastab/image.hpp"

namespace metastab {

/// 8-bit PNG in/out; values quantized to 1/255 steps on write.
Frame load_png(const std::filesystem::path& path);
void save_png(const std::filesystem::path& path, const Frame& frame);

/// Loads a directory of zero-padded numbered PNGs ("000001.png", ...).
/// Frames are ordered by filename index. Errors: empty directory, a gap in
/// the index run, or mixed resolutions.
FrameSequence load_sequence(const std::filesystem::path& dir);

/// Writes frames as <prefix><index, 6 digits>.png starting at 1.
void save_sequence(const std::filesystem::path& dir, const FrameSequence& seq);

/// k copies of the first and last frame prepended/appended (k >= 0).
FrameSequence pad_boundary_frames(const FrameSequence& seq, int k);

}  // namespace metastab
