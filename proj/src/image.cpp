#include "metastab/image.hpp"

#include <algorithm>
#include <cmath>

namespace metastab {

Plane luma(const Frame& f) {
  Plane p = Plane::blank(f.width, f.height);
  const float* src = f.rgb.data();
  for (size_t i = 0; i < f.pixels(); ++i) {
    p.v[i] = 0.299f * src[3 * i] + 0.587f * src[3 * i + 1] + 0.114f * src[3 * i + 2];
  }
  return p;
}

Plane luma_standardized(const Frame& f) {
  Plane p = luma(f);
  double mean = 0;
  for (float v : p.v) mean += v;
  mean /= static_cast<double>(p.v.size());
  double var = 0;
  for (float v : p.v) var += (v - mean) * (v - mean);
  var /= static_cast<double>(p.v.size());
  const float inv = static_cast<float>(1.0 / std::sqrt(var + 1e-8));
  for (float& v : p.v) v = (v - static_cast<float>(mean)) * inv;
  return p;
}

float sample_bilinear(const Plane& p, float x, float y) {
  x = std::clamp(x, 0.f, static_cast<float>(p.width - 1));
  y = std::clamp(y, 0.f, static_cast<float>(p.height - 1));
  int x0 = std::min(static_cast<int>(x), p.width - 2);
  int y0 = std::min(static_cast<int>(y), p.height - 2);
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  const float fx = x - static_cast<float>(x0);
  const float fy = y - static_cast<float>(y0);
  const float* v = &p.v[static_cast<size_t>(y0) * p.width + x0];
  return (1.f - fy) * ((1.f - fx) * v[0] + fx * v[1]) +
         fy * ((1.f - fx) * v[p.width] + fx * v[p.width + 1]);
}

void sample_bilinear_rgb(const Frame& f, float x, float y, float out[3]) {
  x = std::clamp(x, 0.f, static_cast<float>(f.width - 1));
  y = std::clamp(y, 0.f, static_cast<float>(f.height - 1));
  int x0 = std::min(static_cast<int>(x), f.width - 2);
  int y0 = std::min(static_cast<int>(y), f.height - 2);
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  const float fx = x - static_cast<float>(x0);
  const float fy = y - static_cast<float>(y0);
  const float* p00 = &f.rgb[(static_cast<size_t>(y0) * f.width + x0) * 3];
  const float* p10 = p00 + static_cast<size_t>(f.width) * 3;
  for (int c = 0; c < 3; ++c) {
    out[c] = (1.f - fy) * ((1.f - fx) * p00[c] + fx * p00[3 + c]) +
             fy * ((1.f - fx) * p10[c] + fx * p10[3 + c]);
  }
}

Plane gaussian_blur3(const Plane& p) {
  // separable 1-2-1
  Plane tmp = Plane::blank(p.width, p.height);
  Plane out = Plane::blank(p.width, p.height);
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x) {
      const int xm = std::max(x - 1, 0), xp = std::min(x + 1, p.width - 1);
      tmp.at(y, x) = 0.25f * p.at(y, xm) + 0.5f * p.at(y, x) + 0.25f * p.at(y, xp);
    }
  for (int y = 0; y < p.height; ++y) {
    const int ym = std::max(y - 1, 0), yp = std::min(y + 1, p.height - 1);
    for (int x = 0; x < p.width; ++x)
      out.at(y, x) = 0.25f * tmp.at(ym, x) + 0.5f * tmp.at(y, x) + 0.25f * tmp.at(yp, x);
  }
  return out;
}

Plane downsample2(const Plane& p) {
  Plane b = gaussian_blur3(p);
  Plane out = Plane::blank(p.width / 2, p.height / 2);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      const float* i = &b.v[static_cast<size_t>(2 * y) * p.width + 2 * x];
      out.at(y, x) = 0.25f * (i[0] + i[1] + i[p.width] + i[p.width + 1]);
    }
  return out;
}

Plane resize_bilinear(const Plane& p, int w, int h) {
  Plane out = Plane::blank(w, h);
  const float sx = static_cast<float>(p.width) / static_cast<float>(w);
  const float sy = static_cast<float>(p.height) / static_cast<float>(h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out.at(y, x) = sample_bilinear(p, (static_cast<float>(x) + 0.5f) * sx - 0.5f,
                                     (static_cast<float>(y) + 0.5f) * sy - 0.5f);
  return out;
}

double psnr(const Frame& a, const Frame& b, int border) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("psnr: resolution mismatch");
  double mse = 0;
  int64_t n = 0;
  for (int y = border; y < a.height - border; ++y)
    for (int x = border; x < a.width - border; ++x)
      for (int c = 0; c < 3; ++c) {
        const double d = a.at(y, x, c) - b.at(y, x, c);
        mse += d * d;
        ++n;
      }
  mse /= static_cast<double>(n);
  if (mse <= 0) return 99.0;
  return 10.0 * std::log10(1.0 / mse);
}

double mean_abs_diff(const Frame& a, const Frame& b) {
  double acc = 0;
  for (size_t i = 0; i < a.rgb.size(); ++i) acc += std::abs(a.rgb[i] - b.rgb[i]);
  return acc / static_cast<double>(a.rgb.size());
}

}  // namespace metastab
