#include "metastab/rigid.hpp"

#include <cmath>

#include "metastab/data.hpp"
#include "metastab/flow.hpp"

namespace metastab {

RigidTransform RigidTransform::compose(const RigidTransform& other) const {
  // this(other(p)) = R_t R_o (p-c) + c + R_t t_o + t_t
  const double c = std::cos(theta), s = std::sin(theta);
  RigidTransform out;
  out.theta = theta + other.theta;
  out.tx = c * other.tx - s * other.ty + tx;
  out.ty = s * other.tx + c * other.ty + ty;
  out.cx = cx;
  out.cy = cy;
  return out;
}

RigidTransform fit_rigid_procrustes(const FlowField& flow, std::span<const float> weights) {
  const size_t n = flow.pixels();
  if (!weights.empty() && weights.size() != n)
    throw std::invalid_argument("fit_rigid_procrustes: weight count mismatch");
  const double cx = (flow.width - 1) / 2.0, cy = (flow.height - 1) / 2.0;

  auto wt = [&](size_t i) -> double { return weights.empty() ? 1.0 : weights[i]; };

  double sw = 0, sx = 0, sy = 0, fx = 0, fy = 0;
  size_t support = 0;
  for (size_t i = 0; i < n; ++i) {
    const double w = wt(i);
    if (w <= 0) continue;
    ++support;
    const double px = static_cast<double>(i % flow.width) - cx;
    const double py = static_cast<double>(i / flow.width) - cy;
    sw += w;
    sx += w * px;
    sy += w * py;
    fx += w * flow.u[i];
    fy += w * flow.v[i];
  }
  if (support < 3 || sw <= 0)
    throw std::runtime_error("fit_rigid_procrustes: fewer than 3 weighted pixels");
  sx /= sw;
  sy /= sw;
  fx /= sw;
  fy /= sw;

  // cross/dot moments of centered source against centered flow; writing the
  // target as s + F keeps pure translations exactly rotation-free
  double cross = 0, dot = 0, cxx = 0, cyy = 0, cxy = 0;
  for (size_t i = 0; i < n; ++i) {
    const double w = wt(i);
    if (w <= 0) continue;
    const double px = static_cast<double>(i % flow.width) - cx - sx;
    const double py = static_cast<double>(i / flow.width) - cy - sy;
    const double dfx = flow.u[i] - fx;
    const double dfy = flow.v[i] - fy;
    cross += w * (px * dfy - py * dfx);
    dot += w * (px * (px + dfx) + py * (py + dfy));
    cxx += w * px * px;
    cyy += w * py * py;
    cxy += w * px * py;
  }
  // degeneracy: weighted support collinear (or a single point)
  const double tr = 0.5 * (cxx + cyy);
  const double disc = std::sqrt(std::max(0.0, tr * tr - (cxx * cyy - cxy * cxy)));
  const double lmin = tr - disc, lmax = tr + disc;
  if (lmax <= 0 || lmin <= 1e-9 * lmax)
    throw std::runtime_error("fit_rigid_procrustes: degenerate (collinear) support");

  RigidTransform t;
  t.cx = cx;
  t.cy = cy;
  t.theta = std::atan2(cross, dot);
  const double c = std::cos(t.theta), s = std::sin(t.theta);
  // t = mean(q) - R mean(s), with mean(q) = mean(s) + mean(F)
  t.tx = (sx + fx) - (c * sx - s * sy);
  t.ty = (sy + fy) - (s * sx + c * sy);
  return t;
}

Frame warp(const Frame& frame, const RigidTransform& t) {
  Frame out = Frame::blank(frame.width, frame.height);
  out.index = frame.index;
  float rgb[3];
  for (int y = 0; y < frame.height; ++y)
    for (int x = 0; x < frame.width; ++x) {
      double ox, oy;
      t.apply(x, y, ox, oy);
      sample_bilinear_rgb(frame, static_cast<float>(ox), static_cast<float>(oy), rgb);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = rgb[c];
    }
  return out;
}

Plane warp(const Plane& plane, const RigidTransform& t) {
  Plane out = Plane::blank(plane.width, plane.height);
  for (int y = 0; y < plane.height; ++y)
    for (int x = 0; x < plane.width; ++x) {
      double ox, oy;
      t.apply(x, y, ox, oy);
      out.at(y, x) = sample_bilinear(plane, static_cast<float>(ox), static_cast<float>(oy));
    }
  return out;
}

FlowField rigid_flow(const RigidTransform& t, int width, int height) {
  FlowField f = FlowField::blank(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double ox, oy;
      t.apply(x, y, ox, oy);
      const size_t i = static_cast<size_t>(y) * width + x;
      f.u[i] = static_cast<float>(ox - x);
      f.v[i] = static_cast<float>(oy - y);
    }
  return f;
}

// ---------------------------------------------------------------------------
// AffineRegressor
// ---------------------------------------------------------------------------

AffineRegressor AffineRegressor::init(uint64_t seed) {
  Rng rng(seed);
  AffineRegressor reg;
  reg.c1_ = nn::Conv2d<float>::make(2, 16, 3, 2, 1, rng);
  reg.c2_ = nn::Conv2d<float>::make(16, 32, 3, 2, 1, rng);
  reg.c3_ = nn::Conv2d<float>::make(32, 64, 3, 2, 1, rng);
  reg.head_ = nn::Conv2d<float>::make(64, 3, 1, 1, 0, rng);
  // start near identity output
  for (auto& v : reg.head_.w.value()) v *= 0.1f;
  reg.rebuild_params();
  return reg;
}

void AffineRegressor::rebuild_params() {
  params_ = nn::ParamSet<float>();
  c1_.register_params(params_, "affine.c1");
  c2_.register_params(params_, "affine.c2");
  c3_.register_params(params_, "affine.c3");
  head_.register_params(params_, "affine.head");
}

Tensor<float> AffineRegressor::forward(const Tensor<float>& input) const {
  auto h1 = leaky_relu(c1_(input));
  auto h2 = leaky_relu(c2_(h1));
  auto h3 = leaky_relu(c3_(h2));
  return head_(global_avg_pool(h3));
}

Tensor<float> AffineRegressor::normalize_input(const FlowField& flow) {
  Plane pu, pv;
  pu.width = flow.width;
  pu.height = flow.height;
  pu.v = flow.u;
  pv.width = flow.width;
  pv.height = flow.height;
  pv.v = flow.v;
  const Plane ru = resize_bilinear(pu, 32, 32);
  const Plane rv = resize_bilinear(pv, 32, 32);
  Tensor<float> in = Tensor<float>::zeros({1, 2, 32, 32});
  const float inv_w = 1.f / static_cast<float>(flow.width);
  const float inv_h = 1.f / static_cast<float>(flow.height);
  for (int i = 0; i < 32 * 32; ++i) {
    in.value()[static_cast<size_t>(i)] = ru.v[static_cast<size_t>(i)] * inv_w;
    in.value()[static_cast<size_t>(1024 + i)] = rv.v[static_cast<size_t>(i)] * inv_h;
  }
  return in;
}

RigidTransform AffineRegressor::predict(const FlowField& flow) const {
  GradPause pause;
  const Tensor<float> out = forward(normalize_input(flow));
  RigidTransform t;
  t.cx = (flow.width - 1) / 2.0;
  t.cy = (flow.height - 1) / 2.0;
  t.theta = static_cast<double>(out.value()[0]);
  t.tx = static_cast<double>(out.value()[1]) * flow.width;
  t.ty = static_cast<double>(out.value()[2]) * flow.height;
  return t;
}

void AffineRegressor::save(const std::filesystem::path& path) const {
  nn::save_params(path, params_);
}

AffineRegressor AffineRegressor::load(const std::filesystem::path& path) {
  AffineRegressor reg = init(0);
  nn::load_params(path, reg.params_);
  return reg;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

struct WarpSample {
  Tensor<float> input;   // [1,2,32,32]
  float target[3];       // theta, tx_n, ty_n
};

WarpSample make_sample(int size, double max_rot_rad, double max_trans, uint64_t seed) {
  Rng rng(seed);
  const Frame base = random_texture_frame(size, size, rng.next_u64());
  RigidTransform a = RigidTransform::identity((size - 1) / 2.0, (size - 1) / 2.0);
  a.theta = rng.uniform(-max_rot_rad, max_rot_rad);
  a.tx = rng.uniform(-max_trans, max_trans);
  a.ty = rng.uniform(-max_trans, max_trans);
  const Frame warped = warp(base, a);
  const FlowField gf = global_flow(base, warped);
  const RigidTransform target = a.inverse();
  WarpSample s;
  s.input = AffineRegressor::normalize_input(gf);
  s.target[0] = static_cast<float>(target.theta);
  s.target[1] = static_cast<float>(target.tx / size);
  s.target[2] = static_cast<float>(target.ty / size);
  return s;
}

double eval_regressor(const AffineRegressor& reg, const std::vector<WarpSample>& samples,
                      int size, double& rot_err_deg, double& trans_err_px) {
  GradPause pause;
  double rot = 0, trans = 0;
  for (const auto& s : samples) {
    const Tensor<float> out = reg.forward(s.input);
    rot += std::abs(static_cast<double>(out.value()[0]) - s.target[0]);
    const double dx = (static_cast<double>(out.value()[1]) - s.target[1]) * size;
    const double dy = (static_cast<double>(out.value()[2]) - s.target[2]) * size;
    trans += std::hypot(dx, dy);
  }
  rot_err_deg = rot / static_cast<double>(samples.size()) * 180.0 / 3.14159265358979;
  trans_err_px = trans / static_cast<double>(samples.size());
  return rot_err_deg;
}

}  // namespace

RegressorTrainReport train_affine_regressor(AffineRegressor& reg,
                                            const RegressorTrainConfig& cfg) {
  const double max_rot = cfg.max_rotation_deg * 3.14159265358979 / 180.0;
  const int workers = cfg.workers > 0 ? cfg.workers : default_workers();
  Rng rng(cfg.seed);

  // sample seeds drawn sequentially, generation parallel and order-stable
  const int total = cfg.train_samples + cfg.heldout_samples;
  std::vector<uint64_t> seeds(static_cast<size_t>(total));
  for (auto& s : seeds) s = rng.next_u64();
  std::vector<WarpSample> samples(static_cast<size_t>(total));
  parallel_for(0, total, workers, [&](int64_t i) {
    samples[static_cast<size_t>(i)] = make_sample(cfg.image_size, max_rot,
                                                  cfg.max_translation, seeds[static_cast<size_t>(i)]);
  });
  std::vector<WarpSample> heldout(samples.begin() + cfg.train_samples, samples.end());
  samples.resize(static_cast<size_t>(cfg.train_samples));

  RegressorTrainReport report;
  eval_regressor(reg, heldout, cfg.image_size, report.initial_rot_err_deg,
                 report.initial_trans_err_px);

  nn::Adam<float> adam(cfg.lr);
  double initial_loss = -1;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // seeded shuffle
    std::vector<int> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);

    double epoch_loss = 0;
    int batches = 0;
    for (size_t off = 0; off + cfg.batch <= order.size(); off += cfg.batch) {
      Tape<float> tape;
      Tensor<float> input = Tensor<float>::zeros({cfg.batch, 2, 32, 32});
      for (int b = 0; b < cfg.batch; ++b) {
        const WarpSample& s = samples[static_cast<size_t>(order[off + b])];
        std::copy(s.input.value().begin(), s.input.value().end(),
                  input.value().begin() + static_cast<size_t>(b) * 2 * 32 * 32);
      }
      Tensor<float> out = reg.forward(input);  // [B,3,1,1]
      Tensor<float> tgt = Tensor<float>::zeros({cfg.batch, 3, 1, 1});
      for (int b = 0; b < cfg.batch; ++b) {
        const WarpSample& s = samples[static_cast<size_t>(order[off + b])];
        for (int c = 0; c < 3; ++c)
          tgt.value()[static_cast<size_t>(b) * 3 + c] = s.target[c];
      }
      Tensor<float> loss = mean_all(square(sub(out, tgt)));
      const double lv = static_cast<double>(loss.item());
      epoch_loss += lv;
      ++batches;
      tape.backward(loss);
      adam.step(reg.params(), reg.params().flatten_grads());
      reg.params().zero_grad();
    }
    epoch_loss /= std::max(1, batches);
    report.epoch_loss.push_back(epoch_loss);
    if (initial_loss < 0) initial_loss = epoch_loss;
    if (epoch > cfg.epochs / 5 && epoch_loss > initial_loss)
      throw std::runtime_error("train_affine_regressor: diverged (loss " +
                               std::to_string(epoch_loss) + " > initial " +
                               std::to_string(initial_loss) + ")");
  }

  eval_regressor(reg, heldout, cfg.image_size, report.heldout_rot_err_deg,
                 report.heldout_trans_err_px);
  return report;
}

AlignedSequence align_sequence(const FrameSequence& seq, const AffineRegressor& reg) {
  if (seq.size() < 2)
    throw std::invalid_argument("align_sequence: need at least 2 frames");
  AlignedSequence out;
  out.frames.role = SeqRole::Aligned;
  out.frames.frames.push_back(seq[0]);
  out.transforms.push_back(
      RigidTransform::identity((seq.width() - 1) / 2.0, (seq.height() - 1) / 2.0));
  for (size_t t = 1; t < seq.size(); ++t) {
    const FlowField gf = global_flow(seq[0], seq[t]);
    const RigidTransform a = reg.predict(gf);
    out.frames.frames.push_back(warp(seq[t], a));
    out.frames.frames.back().index = seq[t].index;
    out.transforms.push_back(a);
  }
  return out;
}

}  // namespace metastab
