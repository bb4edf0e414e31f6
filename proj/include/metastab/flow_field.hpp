#pragma once

#include <filesystem>
#include <vector>

namespace metastab {

/// Dense per-pixel displacement between two frames: a(p) ~ b(p + F(p)).
/// conf is a per-pixel estimate in [0,1] (low in flat/occluded regions).
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<float> u, v, conf;

  static FlowField blank(int w, int h) {
    FlowField f;
    f.width = w;
    f.height = h;
    const size_t n = static_cast<size_t>(w) * h;
    f.u.assign(n, 0.f);
    f.v.assign(n, 0.f);
    f.conf.assign(n, 1.f);
    return f;
  }
  size_t pixels() const { return u.size(); }
};

/// MSFL dump: "MSFL" magic, u32 width, u32 height, then row-major
/// interleaved (u,v) little-endian f32. Confidence is not stored; loads
/// come back with conf = 1.
void save_flow(const std::filesystem::path& path, const FlowField& f);
FlowField load_flow(const std::filesystem::path& path);

}  // namespace metastab
