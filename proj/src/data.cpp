#include "metastab/data.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace metastab {

using nlohmann::json;

std::string ShakeProfile::to_json() const {
  json j;
  j["rot_walk_std"] = rot_walk_std;
  j["trans_walk_std"] = trans_walk_std;
  j["walk_decay"] = walk_decay;
  j["smooth_amp_x"] = smooth_amp_x;
  j["smooth_amp_y"] = smooth_amp_y;
  j["smooth_amp_theta"] = smooth_amp_theta;
  j["smooth_period_x"] = smooth_period_x;
  j["smooth_period_y"] = smooth_period_y;
  j["smooth_period_theta"] = smooth_period_theta;
  j["seed"] = seed;
  return j.dump(2);
}

ShakeProfile ShakeProfile::from_json(const std::string& text) {
  const json j = json::parse(text);
  ShakeProfile p;
  p.rot_walk_std = j.value("rot_walk_std", p.rot_walk_std);
  p.trans_walk_std = j.value("trans_walk_std", p.trans_walk_std);
  p.walk_decay = j.value("walk_decay", p.walk_decay);
  p.smooth_amp_x = j.value("smooth_amp_x", p.smooth_amp_x);
  p.smooth_amp_y = j.value("smooth_amp_y", p.smooth_amp_y);
  p.smooth_amp_theta = j.value("smooth_amp_theta", p.smooth_amp_theta);
  p.smooth_period_x = j.value("smooth_period_x", p.smooth_period_x);
  p.smooth_period_y = j.value("smooth_period_y", p.smooth_period_y);
  p.smooth_period_theta = j.value("smooth_period_theta", p.smooth_period_theta);
  p.seed = j.value("seed", p.seed);
  if (p.rot_walk_std < 0 || p.trans_walk_std < 0)
    throw std::invalid_argument("ShakeProfile: std values must be >= 0");
  return p;
}

ShakeProfile ShakeProfile::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("ShakeProfile: cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json(text);
}

void ShakeProfile::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("ShakeProfile: cannot write " + path.string());
  out << to_json() << "\n";
}

namespace {

/// Smooth value-noise octave via bilinear interpolation of a coarse lattice.
void add_noise_octave(Frame& f, Rng& rng, int cells, float amp) {
  const int gw = cells + 2, gh = cells + 2;
  std::vector<float> lattice(static_cast<size_t>(gw) * gh * 3);
  for (auto& v : lattice) v = static_cast<float>(rng.uniform());
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x) {
      const float gx = static_cast<float>(x) / f.width * cells;
      const float gy = static_cast<float>(y) / f.height * cells;
      const int x0 = static_cast<int>(gx), y0 = static_cast<int>(gy);
      const float fx = gx - x0, fy = gy - y0;
      for (int c = 0; c < 3; ++c) {
        auto lat = [&](int yy, int xx) {
          return lattice[(static_cast<size_t>(yy) * gw + xx) * 3 + c];
        };
        const float v = (1 - fy) * ((1 - fx) * lat(y0, x0) + fx * lat(y0, x0 + 1)) +
                        fy * ((1 - fx) * lat(y0 + 1, x0) + fx * lat(y0 + 1, x0 + 1));
        f.at(y, x, c) += amp * (v - 0.5f);
      }
    }
}

struct Sprite {
  float w, h;           // half extents
  float x0, y0;         // start center
  float vx, vy;         // px per frame
  float amp, period;    // oscillation on top of the linear drift
  float color[3];
  uint64_t tex_seed;
};

}  // namespace

Frame random_texture_frame(int width, int height, uint64_t seed) {
  // random-orientation sinusoid field: isotropic, band-limited, and smooth
  // enough for gradient-based registration at every pyramid level
  Rng rng(seed);
  Frame f = Frame::blank(width, height, 0.5f);
  const float gx = static_cast<float>(rng.uniform(-0.2, 0.2));
  const float gy = static_cast<float>(rng.uniform(-0.2, 0.2));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        f.at(y, x, c) += gx * (static_cast<float>(x) / width - 0.5f) +
                         gy * (static_cast<float>(y) / height - 0.5f);
  const double two_pi = 2.0 * 3.14159265358979;
  const double max_wl = std::max(28.0, std::min(width, height) / 3.0);
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < 10; ++k) {
      const double wavelength = rng.uniform(4.0, max_wl);
      const double omega = two_pi / wavelength;
      const double phi = rng.uniform(0.0, two_pi);
      const double rho = rng.uniform(0.0, two_pi);
      const double amp = rng.uniform(0.03, 0.10);
      const double dx = std::cos(phi), dy = std::sin(phi);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
          f.at(y, x, c) +=
              static_cast<float>(amp * std::sin(omega * (x * dx + y * dy) + rho));
    }
  add_noise_octave(f, rng, 7, 0.15f);
  for (auto& v : f.rgb) v = std::clamp(v, 0.02f, 0.98f);
  return f;
}

SceneResult procedural_scene(int width, int height, int frames, uint64_t seed,
                             int sprites) {
  Rng rng(seed);
  // background larger than the viewport so camera warps stay in content
  Frame bg = random_texture_frame(width, height, rng.next_u64());

  std::vector<Sprite> sp;
  for (int i = 0; i < sprites; ++i) {
    Sprite s;
    s.w = static_cast<float>(rng.uniform(0.10, 0.16)) * width;
    s.h = static_cast<float>(rng.uniform(0.10, 0.16)) * height;
    s.x0 = static_cast<float>(rng.uniform(0.25, 0.75)) * width;
    s.y0 = static_cast<float>(rng.uniform(0.25, 0.75)) * height;
    s.vx = static_cast<float>(rng.uniform(-0.8, 0.8));
    s.vy = static_cast<float>(rng.uniform(-0.8, 0.8));
    // keep sprite motion distinct from camera motion
    if (std::abs(s.vx) + std::abs(s.vy) < 0.4f) s.vx += s.vx >= 0 ? 0.5f : -0.5f;
    s.amp = static_cast<float>(rng.uniform(1.0, 3.0));
    s.period = static_cast<float>(rng.uniform(9.0, 17.0));
    for (float& c : s.color) c = static_cast<float>(rng.uniform(0.1, 0.9));
    s.tex_seed = rng.next_u64();
    sp.push_back(s);
  }

  SceneResult out;
  out.seq.role = SeqRole::Stable;
  out.seq.frames.reserve(static_cast<size_t>(frames));
  out.sprite_mask.resize(static_cast<size_t>(frames));

  std::vector<Frame> sprite_tex;
  for (const auto& s : sp)
    sprite_tex.push_back(random_texture_frame(
        std::max(8, static_cast<int>(2 * s.w)), std::max(8, static_cast<int>(2 * s.h)),
        s.tex_seed));

  for (int t = 0; t < frames; ++t) {
    Frame f = bg;
    f.index = t;
    auto& mask = out.sprite_mask[static_cast<size_t>(t)];
    mask.assign(f.pixels(), 0);
    for (size_t si = 0; si < sp.size(); ++si) {
      const Sprite& s = sp[si];
      const float phase = 2.f * 3.14159265f * static_cast<float>(t) / s.period;
      const float cxs = s.x0 + s.vx * static_cast<float>(t) + s.amp * std::sin(phase);
      const float cys = s.y0 + s.vy * static_cast<float>(t) + s.amp * std::cos(phase);
      const int xa = std::max(0, static_cast<int>(cxs - s.w));
      const int xb = std::min(width - 1, static_cast<int>(cxs + s.w));
      const int ya = std::max(0, static_cast<int>(cys - s.h));
      const int yb = std::min(height - 1, static_cast<int>(cys + s.h));
      const Frame& tex = sprite_tex[si];
      for (int y = ya; y <= yb; ++y)
        for (int x = xa; x <= xb; ++x) {
          const float u = (static_cast<float>(x) - (cxs - s.w)) / (2 * s.w) *
                          static_cast<float>(tex.width - 1);
          const float v = (static_cast<float>(y) - (cys - s.h)) / (2 * s.h) *
                          static_cast<float>(tex.height - 1);
          float rgb[3];
          sample_bilinear_rgb(tex, u, v, rgb);
          for (int c = 0; c < 3; ++c)
            f.at(y, x, c) = 0.5f * rgb[c] + 0.5f * s.color[c];
          mask[static_cast<size_t>(y) * width + x] = 1;
        }
    }
    out.seq.frames.push_back(std::move(f));
  }
  return out;
}

void SynthesizedPair::save_ground_truth(const std::filesystem::path& path) const {
  json j;
  json jt = json::array();
  for (const auto& t : jitter)
    jt.push_back({{"theta", t.theta}, {"tx", t.tx}, {"ty", t.ty}});
  j["jitter"] = jt;
  json js = json::array();
  for (const auto& t : smooth_path)
    js.push_back({{"theta", t.theta}, {"tx", t.tx}, {"ty", t.ty}});
  j["smooth_path"] = js;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write ground truth " + path.string());
  out << j.dump(2) << "\n";
}

SynthesizedPair synthesize_pair(const FrameSequence& source, const ShakeProfile& profile) {
  if (source.empty()) throw std::invalid_argument("synthesize_pair: empty source");
  const int w = source.width(), h = source.height();
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  Rng rng(profile.seed);

  SynthesizedPair out;
  out.stable.role = SeqRole::Stable;
  out.unstable.role = SeqRole::Unstable;

  double jt = 0, jx = 0, jy = 0;  // jitter state
  const double two_pi = 2.0 * 3.14159265358979323846;

  for (size_t t = 0; t < source.size(); ++t) {
    RigidTransform smooth = RigidTransform::identity(cx, cy);
    const double ft = static_cast<double>(t);
    smooth.tx = profile.smooth_amp_x * std::sin(two_pi * ft / profile.smooth_period_x);
    smooth.ty = profile.smooth_amp_y * std::sin(two_pi * ft / profile.smooth_period_y);
    smooth.theta =
        profile.smooth_amp_theta * std::sin(two_pi * ft / profile.smooth_period_theta);

    jt = profile.walk_decay * jt + rng.normal(0.0, profile.rot_walk_std);
    jx = profile.walk_decay * jx + rng.normal(0.0, profile.trans_walk_std);
    jy = profile.walk_decay * jy + rng.normal(0.0, profile.trans_walk_std);
    RigidTransform jitter = RigidTransform::identity(cx, cy);
    jitter.theta = jt;
    jitter.tx = jx;
    jitter.ty = jy;

    // probe how much of the combined warp samples off-frame
    const RigidTransform combined = jitter.compose(smooth);
    int off = 0, total = 0;
    for (int py = 0; py < 8; ++py)
      for (int px = 0; px < 8; ++px) {
        const double x = (px + 0.5) * w / 8.0, y = (py + 0.5) * h / 8.0;
        double ox, oy;
        combined.apply(x, y, ox, oy);
        ++total;
        if (ox < 0 || ox > w - 1 || oy < 0 || oy > h - 1) ++off;
      }
    if (off > 0.4 * total)
      throw std::runtime_error("synthesize_pair: profile pushes >40% of content off frame at t=" +
                               std::to_string(t));

    Frame stable_f = warp(source[t], smooth);
    stable_f.index = static_cast<int>(t);
    Frame unstable_f = warp(stable_f, jitter);
    unstable_f.index = static_cast<int>(t);

    out.stable.frames.push_back(std::move(stable_f));
    out.unstable.frames.push_back(std::move(unstable_f));
    out.smooth_path.push_back(smooth);
    out.jitter.push_back(jitter);
  }
  return out;
}

}  // namespace metastab
