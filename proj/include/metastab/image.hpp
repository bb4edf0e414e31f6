#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace metastab {

/// One RGB frame, values in [0,1], interleaved row-major.
struct Frame {
  int width = 0;
  int height = 0;
  int index = 0;
  std::vector<float> rgb;  // height*width*3

  static Frame blank(int w, int h, float fill = 0.f) {
    Frame f;
    f.width = w;
    f.height = h;
    f.rgb.assign(static_cast<size_t>(w) * h * 3, fill);
    return f;
  }

  float& at(int y, int x, int c) {
    return rgb[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  float at(int y, int x, int c) const {
    return rgb[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
  size_t pixels() const { return static_cast<size_t>(width) * height; }
};

enum class SeqRole { Unstable, Stable, Synthesized, Aligned };

struct FrameSequence {
  std::vector<Frame> frames;
  SeqRole role = SeqRole::Unstable;

  int width() const { return frames.empty() ? 0 : frames[0].width; }
  int height() const { return frames.empty() ? 0 : frames[0].height; }
  size_t size() const { return frames.size(); }
  bool empty() const { return frames.empty(); }
  const Frame& operator[](size_t i) const { return frames[i]; }
  Frame& operator[](size_t i) { return frames[i]; }
};

/// Single-channel float plane (luma, pyramid levels).
struct Plane {
  int width = 0;
  int height = 0;
  std::vector<float> v;

  static Plane blank(int w, int h, float fill = 0.f) {
    Plane p;
    p.width = w;
    p.height = h;
    p.v.assign(static_cast<size_t>(w) * h, fill);
    return p;
  }
  float& at(int y, int x) { return v[static_cast<size_t>(y) * width + x]; }
  float at(int y, int x) const { return v[static_cast<size_t>(y) * width + x]; }
};

/// Rec.601 luma of a frame.
Plane luma(const Frame& f);

/// Luma standardized to zero mean / unit variance (photometric-normalized
/// input for flow and transform fits).
Plane luma_standardized(const Frame& f);

/// Edge-clamped bilinear lookup.
float sample_bilinear(const Plane& p, float x, float y);
void sample_bilinear_rgb(const Frame& f, float x, float y, float out[3]);

Plane gaussian_blur3(const Plane& p);
Plane downsample2(const Plane& p);
Plane resize_bilinear(const Plane& p, int w, int h);

double psnr(const Frame& a, const Frame& b, int border = 0);

double mean_abs_diff(const Frame& a, const Frame& b);

}  // namespace metastab
