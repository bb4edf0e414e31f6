#include "metastab/flow.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace metastab {

int pyramid_levels(int width, int height) {
  const int m = std::min(width, height);
  int levels = 1;
  while ((m >> levels) >= 32) ++levels;
  return levels;
}

namespace {

/// Box sums over a (2r+1)^2 window via an integral image, edge-truncated.
void box_sum(const Plane& src, int r, Plane& dst) {
  const int w = src.width, h = src.height;
  std::vector<double> integral(static_cast<size_t>(w + 1) * (h + 1), 0.0);
  for (int y = 0; y < h; ++y) {
    double row = 0;
    for (int x = 0; x < w; ++x) {
      row += src.v[static_cast<size_t>(y) * w + x];
      integral[static_cast<size_t>(y + 1) * (w + 1) + x + 1] =
          integral[static_cast<size_t>(y) * (w + 1) + x + 1] + row;
    }
  }
  auto at = [&](int y, int x) { return integral[static_cast<size_t>(y) * (w + 1) + x]; };
  for (int y = 0; y < h; ++y) {
    const int y0 = std::max(0, y - r), y1 = std::min(h, y + r + 1);
    for (int x = 0; x < w; ++x) {
      const int x0 = std::max(0, x - r), x1 = std::min(w, x + r + 1);
      dst.v[static_cast<size_t>(y) * w + x] =
          static_cast<float>(at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0));
    }
  }
}

struct LkScratch {
  Plane bw, it, gx, gy, sxx, syy, sxy, sxt, syt, lmin;
  double mean_trace = 0;
};

void lk_refine(const Plane& a, const Plane& b, std::vector<float>& u,
               std::vector<float>& v, std::vector<uint8_t>& oob, const FlowOptions& opt,
               int iters, LkScratch& s) {
  const int w = a.width, h = a.height;
  const int r = opt.window / 2;
  const float area = static_cast<float>((2 * r + 1) * (2 * r + 1));
  const float eps = opt.tikhonov * area;
  const float max_step = static_cast<float>(opt.window);

  auto ensure = [&](Plane& p) {
    if (p.width != w || p.height != h) p = Plane::blank(w, h);
  };
  ensure(s.bw); ensure(s.it); ensure(s.gx); ensure(s.gy);
  ensure(s.sxx); ensure(s.syy); ensure(s.sxy); ensure(s.sxt); ensure(s.syt);
  ensure(s.lmin);

  for (int iter = 0; iter < iters; ++iter) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const size_t i = static_cast<size_t>(y) * w + x;
        const float sx = static_cast<float>(x) + u[i];
        const float sy = static_cast<float>(y) + v[i];
        oob[i] = (sx < 0 || sx > w - 1 || sy < 0 || sy > h - 1) ? 1 : 0;
        s.bw.v[i] = sample_bilinear(b, sx, sy);
        s.it.v[i] = s.bw.v[i] - a.v[i];
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int xm = std::max(x - 1, 0), xp = std::min(x + 1, w - 1);
        const int ym = std::max(y - 1, 0), yp = std::min(y + 1, h - 1);
        s.gx.at(y, x) = 0.5f * (s.bw.at(y, xp) - s.bw.at(y, xm));
        s.gy.at(y, x) = 0.5f * (s.bw.at(yp, x) - s.bw.at(ym, x));
      }
    Plane prod = Plane::blank(w, h);
    auto sum_of = [&](auto f, Plane& out) {
      for (size_t i = 0; i < prod.v.size(); ++i) prod.v[i] = f(i);
      box_sum(prod, r, out);
    };
    sum_of([&](size_t i) { return s.gx.v[i] * s.gx.v[i]; }, s.sxx);
    sum_of([&](size_t i) { return s.gy.v[i] * s.gy.v[i]; }, s.syy);
    sum_of([&](size_t i) { return s.gx.v[i] * s.gy.v[i]; }, s.sxy);
    sum_of([&](size_t i) { return s.gx.v[i] * s.it.v[i]; }, s.sxt);
    sum_of([&](size_t i) { return s.gy.v[i] * s.it.v[i]; }, s.syt);

    for (size_t i = 0; i < u.size(); ++i) {
      const float a11 = s.sxx.v[i] + eps, a22 = s.syy.v[i] + eps, a12 = s.sxy.v[i];
      const float det = a11 * a22 - a12 * a12;
      const float b1 = -s.sxt.v[i], b2 = -s.syt.v[i];
      float du = (a22 * b1 - a12 * b2) / det;
      float dv = (a11 * b2 - a12 * b1) / det;
      du = std::clamp(du, -max_step, max_step);
      dv = std::clamp(dv, -max_step, max_step);
      u[i] += du;
      v[i] += dv;
    }
    // per-pixel solutions are noisy under the aperture problem; smoothing
    // the field is unbiased for locally linear (rigid-like) flow
    Plane fu, fv;
    fu.width = w;
    fu.height = h;
    fu.v = std::move(u);
    fv.width = w;
    fv.height = h;
    fv.v = std::move(v);
    for (int pass = 0; pass < opt.smooth_passes; ++pass) {
      fu = gaussian_blur3(fu);
      fv = gaussian_blur3(fv);
    }
    u = std::move(fu.v);
    v = std::move(fv.v);
  }
  // minimal eigenvalue of the (unregularized) structure tensor for confidence
  s.mean_trace = 0;
  for (size_t i = 0; i < u.size(); ++i) {
    const float a11 = s.sxx.v[i], a22 = s.syy.v[i], a12 = s.sxy.v[i];
    const float tr = 0.5f * (a11 + a22);
    const float d = std::sqrt(std::max(0.f, tr * tr - (a11 * a22 - a12 * a12)));
    s.lmin.v[i] = tr - d;
    s.mean_trace += a11 + a22;
  }
  s.mean_trace /= static_cast<double>(u.size());
}

/// Exhaustive integer translation search at the coarsest level; widens the
/// basin for displacements beyond the window radius.
void coarse_translation_init(const Plane& a, const Plane& b, std::vector<float>& u,
                             std::vector<float>& v, int range) {
  const int w = a.width, h = a.height;
  double best = 1e30;
  int bu = 0, bv = 0;
  for (int dy = -range; dy <= range; ++dy)
    for (int dx = -range; dx <= range; ++dx) {
      double ssd = 0;
      int n = 0;
      for (int y = 0; y < h; y += 2)
        for (int x = 0; x < w; x += 2) {
          const int sx = x + dx, sy = y + dy;
          if (sx < 0 || sx >= w || sy < 0 || sy >= h) continue;
          const double d = a.v[static_cast<size_t>(y) * w + x] -
                           b.v[static_cast<size_t>(sy) * w + sx];
          ssd += std::min(d * d, 4.0);  // truncated; occlusions don't bias the argmin
          ++n;
        }
      if (n < w * h / 8) continue;
      ssd /= n;
      if (ssd < best) {
        best = ssd;
        bu = dx;
        bv = dy;
      }
    }
  std::fill(u.begin(), u.end(), static_cast<float>(bu));
  std::fill(v.begin(), v.end(), static_cast<float>(bv));
}

}  // namespace

FlowField dense_flow(const Frame& a, const Frame& b, const FlowOptions& opt) {
  if (a.width != b.width || a.height != b.height)
    throw std::invalid_argument("dense_flow: resolution mismatch " +
                                std::to_string(a.width) + "x" + std::to_string(a.height) +
                                " vs " + std::to_string(b.width) + "x" +
                                std::to_string(b.height));
  const int levels = pyramid_levels(a.width, a.height);
  std::vector<Plane> pa(static_cast<size_t>(levels)), pb(static_cast<size_t>(levels));
  pa[0] = luma_standardized(a);
  pb[0] = luma_standardized(b);
  for (int l = 1; l < levels; ++l) {
    pa[static_cast<size_t>(l)] = downsample2(pa[static_cast<size_t>(l - 1)]);
    pb[static_cast<size_t>(l)] = downsample2(pb[static_cast<size_t>(l - 1)]);
  }
  // presmooth every level so gradient linearization holds near Nyquist
  for (int l = 0; l < levels; ++l) {
    pa[static_cast<size_t>(l)] = gaussian_blur3(pa[static_cast<size_t>(l)]);
    pb[static_cast<size_t>(l)] = gaussian_blur3(pb[static_cast<size_t>(l)]);
  }

  std::vector<float> u, v;
  std::vector<uint8_t> oob;
  LkScratch scratch;
  for (int l = levels - 1; l >= 0; --l) {
    const Plane& la = pa[static_cast<size_t>(l)];
    const Plane& lb = pb[static_cast<size_t>(l)];
    const size_t n = la.v.size();
    if (l == levels - 1) {
      u.assign(n, 0.f);
      v.assign(n, 0.f);
      if (opt.coarse_search_range > 0)
        coarse_translation_init(la, lb, u, v, opt.coarse_search_range);
    } else {
      // upscale previous level's flow to this resolution, values doubled
      Plane pu, pv;
      pu.width = pa[static_cast<size_t>(l + 1)].width;
      pu.height = pa[static_cast<size_t>(l + 1)].height;
      pu.v = u;
      pv.width = pu.width;
      pv.height = pu.height;
      pv.v = v;
      Plane nu = resize_bilinear(pu, la.width, la.height);
      Plane nv = resize_bilinear(pv, la.width, la.height);
      u = std::move(nu.v);
      v = std::move(nv.v);
      for (auto& x : u) x *= 2.f;
      for (auto& x : v) x *= 2.f;
    }
    oob.assign(n, 0);
    const int iters = opt.iters_per_level + (l == levels - 1 ? opt.extra_coarse_iters : 0);
    lk_refine(la, lb, u, v, oob, opt, iters, scratch);
  }

  FlowField f = FlowField::blank(a.width, a.height);
  f.u = std::move(u);
  f.v = std::move(v);
  // confidence relative to the frame's own gradient energy: textured pixels
  // approach 1, flat or off-frame pixels approach 0
  const float floor_t = static_cast<float>(opt.conf_scale * scratch.mean_trace) + 1e-12f;
  for (size_t i = 0; i < f.conf.size(); ++i) {
    const float lmin = std::max(0.f, scratch.lmin.v[i]);
    float c = lmin / (lmin + floor_t);
    if (oob[i]) c *= 0.1f;
    f.conf[i] = c;
  }
  return f;
}

namespace {

float weighted_median(std::vector<std::pair<float, float>>& vw) {
  std::sort(vw.begin(), vw.end());
  double total = 0;
  for (const auto& [v, w] : vw) total += w;
  double acc = 0;
  for (const auto& [v, w] : vw) {
    acc += w;
    if (acc >= 0.5 * total) return v;
  }
  return vw.empty() ? 0.f : vw.back().first;
}

}  // namespace

RobustFitResult fit_rigid_robust(const FlowField& flow, const GlobalFlowOptions& opt) {
  const size_t n = flow.pixels();
  std::vector<float> w(n);

  // robust start: confidence-weighted median translation, so a large
  // minority of corrupted flow (crops, sprites) cannot torque the first fit
  RigidTransform fit = RigidTransform::identity((flow.width - 1) / 2.0,
                                                (flow.height - 1) / 2.0);
  {
    std::vector<std::pair<float, float>> uu, vv;
    uu.reserve(n);
    vv.reserve(n);
    for (size_t i = 0; i < n; ++i) {
      uu.emplace_back(flow.u[i], flow.conf[i]);
      vv.emplace_back(flow.v[i], flow.conf[i]);
    }
    fit.tx = weighted_median(uu);
    fit.ty = weighted_median(vv);
  }

  for (int iter = 0; iter < opt.irls_iters; ++iter) {
    const FlowField pred = rigid_flow(fit, flow.width, flow.height);
    for (size_t i = 0; i < n; ++i) {
      const float dx = flow.u[i] - pred.u[i];
      const float dy = flow.v[i] - pred.v[i];
      const float r = std::hypot(dx, dy);
      const float hub = r <= opt.huber_delta ? 1.f : opt.huber_delta / r;
      w[i] = flow.conf[i] * hub;
    }
    fit = fit_rigid_procrustes(flow, w);
  }
  const FlowField pred = rigid_flow(fit, flow.width, flow.height);
  size_t inliers = 0;
  for (size_t i = 0; i < n; ++i) {
    const float dx = flow.u[i] - pred.u[i];
    const float dy = flow.v[i] - pred.v[i];
    if (std::hypot(dx, dy) <= opt.tau_out && flow.conf[i] >= opt.c_min) ++inliers;
  }
  RobustFitResult res;
  res.fit = fit;
  res.inlier_fraction = static_cast<double>(inliers) / static_cast<double>(n);
  if (res.inlier_fraction < opt.min_inlier_fraction)
    throw std::runtime_error("global_flow: no dominant rigid motion (inliers " +
                             std::to_string(res.inlier_fraction * 100.0) + "%)");
  return res;
}

GlobalFlowResult global_flow_detail(const Frame& a, const Frame& b,
                                    const GlobalFlowOptions& opt) {
  GlobalFlowResult res;
  res.flow = dense_flow(a, b, opt.flow);
  RobustFitResult fit = fit_rigid_robust(res.flow, opt);
  res.fit = fit.fit;
  res.inlier_fraction = fit.inlier_fraction;

  const FlowField pred = rigid_flow(res.fit, res.flow.width, res.flow.height);
  for (size_t i = 0; i < res.flow.pixels(); ++i) {
    const float dx = res.flow.u[i] - pred.u[i];
    const float dy = res.flow.v[i] - pred.v[i];
    if (std::hypot(dx, dy) > opt.tau_out || res.flow.conf[i] < opt.c_min) {
      res.flow.u[i] = pred.u[i];
      res.flow.v[i] = pred.v[i];
    }
  }
  return res;
}

FlowField global_flow(const Frame& a, const Frame& b, const GlobalFlowOptions& opt) {
  return global_flow_detail(a, b, opt).flow;
}

static_assert(std::endian::native == std::endian::little);

void save_flow(const std::filesystem::path& path, const FlowField& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("MSFL: cannot open for write: " + path.string());
  os.write("MSFL", 4);
  const uint32_t w = static_cast<uint32_t>(f.width), h = static_cast<uint32_t>(f.height);
  os.write(reinterpret_cast<const char*>(&w), 4);
  os.write(reinterpret_cast<const char*>(&h), 4);
  for (size_t i = 0; i < f.pixels(); ++i) {
    os.write(reinterpret_cast<const char*>(&f.u[i]), 4);
    os.write(reinterpret_cast<const char*>(&f.v[i]), 4);
  }
  if (!os) throw std::runtime_error("MSFL: write failed: " + path.string());
}

FlowField load_flow(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("MSFL: cannot open: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MSFL", 4) != 0)
    throw std::runtime_error("MSFL: bad magic in " + path.string());
  uint32_t w = 0, h = 0;
  is.read(reinterpret_cast<char*>(&w), 4);
  is.read(reinterpret_cast<char*>(&h), 4);
  if (!is) throw std::runtime_error("MSFL: truncated header");
  FlowField f = FlowField::blank(static_cast<int>(w), static_cast<int>(h));
  for (size_t i = 0; i < f.pixels(); ++i) {
    is.read(reinterpret_cast<char*>(&f.u[i]), 4);
    is.read(reinterpret_cast<char*>(&f.v[i]), 4);
  }
  if (!is) throw std::runtime_error("MSFL: truncated payload");
  return f;
}

}  // namespace metastab
