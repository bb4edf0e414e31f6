#pragma once

#include "metastab/flow_field.hpp"
#include "metastab/image.hpp"
#include "metastab/rigid.hpp"

namespace metastab {

struct FlowOptions {
  int iters_per_level = 6;
  int extra_coarse_iters = 6;  // added at the coarsest level
  int window = 7;              // odd; local system window
  int smooth_passes = 2;       // flow-field smoothing after each iteration
  int coarse_search_range = 8; // integer pre-search at the coarsest level (px)
  float tikhonov = 1e-4f;
  float conf_scale = 0.05f;    // confidence floor relative to mean gradient energy
};

struct GlobalFlowOptions {
  FlowOptions flow;
  float tau_out = 1.5f;   // px; residual beyond this is replaced
  float c_min = 0.2f;     // confidence below this is replaced
  float huber_delta = 1.0f;
  int irls_iters = 5;
  float min_inlier_fraction = 0.10f;
};

/// floor(log2(min_dim/32)) + 1, clamped to at least 1.
int pyramid_levels(int width, int height);

/// Coarse-to-fine pyramidal gradient flow on standardized luma.
/// a(p) ~ b(p + F(p)) where textured; confidence low in flat regions.
FlowField dense_flow(const Frame& a, const Frame& b, const FlowOptions& opt = {});

struct GlobalFlowResult {
  FlowField flow;
  RigidTransform fit;
  double inlier_fraction = 0;
};

/// Camera-motion flow: dense flow, a Huber-IRLS rigid fit, then pixels that
/// deviate from the rigid prediction by more than tau_out px or fall below
/// c_min confidence are replaced by the rigid prediction. Throws when fewer
/// than 10% of pixels support a dominant rigid motion.
GlobalFlowResult global_flow_detail(const Frame& a, const Frame& b,
                                    const GlobalFlowOptions& opt = {});
FlowField global_flow(const Frame& a, const Frame& b, const GlobalFlowOptions& opt = {});

/// IRLS rigid fit over an existing flow field (exposed for tests).
struct RobustFitResult {
  RigidTransform fit;
  double inlier_fraction = 0;
};
RobustFitResult fit_rigid_robust(const FlowField& flow, const GlobalFlowOptions& opt = {});

}  // namespace metastab
