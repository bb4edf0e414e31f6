#pragma once

#include <optional>
#include <span>

#include "metastab/flow_field.hpp"
#include "metastab/image.hpp"
#include "metastab/nn.hpp"
#include "metastab/tensor.hpp"

namespace metastab {

/// Rotation + translation about a pivot (no scale or shear). Acts as the
/// sampling map of the warp operator: warp(I, A)(p) = I(A(p)) with
/// A(p) = R(p - c) + c + t, so A takes reference-frame coordinates into the
/// source frame.
struct RigidTransform {
  double theta = 0;  // radians
  double tx = 0, ty = 0;
  double cx = 0, cy = 0;  // pivot (image center)

  static RigidTransform identity(double cx, double cy) { return {0, 0, 0, cx, cy}; }

  void apply(double x, double y, double& ox, double& oy) const {
    const double c = std::cos(theta), s = std::sin(theta);
    const double dx = x - cx, dy = y - cy;
    ox = c * dx - s * dy + cx + tx;
    oy = s * dx + c * dy + cy + ty;
  }

  RigidTransform inverse() const {
    const double c = std::cos(theta), s = std::sin(theta);
    // p' = R(p-c)+c+t  =>  p = R^T(p'-c) + c - R^T t
    return {-theta, -(c * tx + s * ty), -(-s * tx + c * ty), cx, cy};
  }

  /// this after other: result(p) = this(other(p)).
  RigidTransform compose(const RigidTransform& other) const;

  double translation_norm() const { return std::hypot(tx, ty); }
};

/// Weighted closed-form rigid fit to a flow field: minimizes
/// sum_p w_p ||R(p-c)+c+t - (p+F(p))||^2 with the pivot at the image
/// center. Rotation comes from atan2 of the weighted cross/dot moments.
/// Throws when the weighted points are degenerate (collinear support).
RigidTransform fit_rigid_procrustes(const FlowField& flow,
                                    std::span<const float> weights = {});

/// Spatial warp operator: inverse-mapped bilinear resampling with
/// edge-replicated out-of-frame pixels.
Frame warp(const Frame& frame, const RigidTransform& t);
Plane warp(const Plane& plane, const RigidTransform& t);

/// Differentiable variant (grid_sample under the hood): gradients reach the
/// input pixels when `img` requires grad. img is [N,C,H,W].
template <class S>
Tensor<S> warp_tensor(const Tensor<S>& img, const RigidTransform& t) {
  const int h = img.dim(2), w = img.dim(3), n = img.dim(0);
  Tensor<S> gx = Tensor<S>::zeros({n, 1, h, w});
  Tensor<S> gy = Tensor<S>::zeros({n, 1, h, w});
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double ox, oy;
        t.apply(x, y, ox, oy);
        gx.value()[(static_cast<size_t>(b) * h + y) * w + x] = static_cast<S>(ox);
        gy.value()[(static_cast<size_t>(b) * h + y) * w + x] = static_cast<S>(oy);
      }
  return grid_sample(img, gx, gy);
}

/// Analytic flow field of a rigid transform: F(p) = A(p) - p.
FlowField rigid_flow(const RigidTransform& t, int width, int height);

/// Small trainable regressor h(F) -> (theta, tx, ty). The flow is resized
/// to 32x32 and value-normalized by frame size; translations are predicted
/// in normalized units and rescaled on output.
class AffineRegressor {
 public:
  static AffineRegressor init(uint64_t seed);

  RigidTransform predict(const FlowField& flow) const;

  /// Forward pass on an already-normalized [1,2,32,32] input; returns
  /// [1,3,1,1] (theta, tx_n, ty_n). Used by training.
  Tensor<float> forward(const Tensor<float>& input) const;

  nn::ParamSet<float>& params() { return params_; }
  const nn::ParamSet<float>& params() const { return params_; }

  void save(const std::filesystem::path& path) const;
  static AffineRegressor load(const std::filesystem::path& path);

  static Tensor<float> normalize_input(const FlowField& flow);

 private:
  AffineRegressor() = default;
  void rebuild_params();
  nn::Conv2d<float> c1_, c2_, c3_, head_;
  nn::ParamSet<float> params_;
};

struct RegressorTrainConfig {
  int train_samples = 1024;
  int heldout_samples = 200;
  int epochs = 60;
  int batch = 16;
  double lr = 2e-3;
  int image_size = 96;      // synthetic frames used to render warps
  double max_rotation_deg = 5.0;
  double max_translation = 20.0;
  uint64_t seed = 7;
  int workers = 0;  // 0 = default_workers()
};

struct RegressorTrainReport {
  double heldout_rot_err_deg = 0;     // mean |theta error|
  double heldout_trans_err_px = 0;    // mean translation error (L2)
  double initial_rot_err_deg = 0;     // same metrics before training
  double initial_trans_err_px = 0;
  std::vector<double> epoch_loss;
};

/// Trains the regressor on global flows of randomly rigid-warped synthetic
/// frames (theta in +-max_rotation_deg, t in +-max_translation px).
/// Throws if the loss diverges (exceeds its initial value after 20% of the
/// epochs).
RegressorTrainReport train_affine_regressor(AffineRegressor& reg,
                                            const RegressorTrainConfig& cfg);

struct AlignedSequence {
  FrameSequence frames;  // role Aligned; frame 0 is the untouched reference
  std::vector<RigidTransform> transforms;  // [0] = identity
};

/// Aligns every frame to the first frame of the window via the regressor on
/// global flow (reference frame passes through unchanged).
AlignedSequence align_sequence(const FrameSequence& seq, const AffineRegressor& reg);

}  // namespace metastab
