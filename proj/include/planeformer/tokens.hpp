#pragma once

#include <Eigen/Dense>
#include <vector>

#include "planeformer/geometry.hpp"
#include "planeformer/synth.hpp"

namespace pf {

struct TokenConfig {
  int grid_rows = 24;
  int grid_cols = 32;
};

// Tokens for one view pair under one pose hypothesis. Row r of `features` is
// the r-th token: appearance | o'.n' plane feature | flattened warped mask.
// View-1 tokens come first (ascending detection index), then view-2; view 2
// is the reference frame, so its tokens use the identity pose.
struct TokenBatch {
  Eigen::MatrixXd features;
  int m1 = 0, m2 = 0;
  int d_app = 0;
  int grid_rows = 0, grid_cols = 0;
  Pose hypothesis;               // maps view-1 camera coordinates into view 2
  bool degenerate_warp = false;  // some mask feature collapsed to zeros

  int d_model() const { return d_app + 3 + grid_rows * grid_cols; }
  int size() const { return m1 + m2; }
};

// Detection's plane carried into the hypothesized common frame, returned as
// the offset-scaled normal o'.n'.
Vec3 plane_feature(const PlaneDetection& det, const Pose& pose);

// Detection's mask warped through its own plane's homography into the
// reference view and pooled to the token grid. `degenerate` (optional) is set
// instead of throwing when the warp collapses.
Eigen::VectorXd mask_feature(const PlaneDetection& det, const Pose& src_to_ref,
                             const Intrinsics& k_src, const Intrinsics& k_ref,
                             const TokenConfig& cfg, bool* degenerate = nullptr);

TokenBatch assemble_tokens(const std::vector<PlaneDetection>& dets1,
                           const std::vector<PlaneDetection>& dets2,
                           const Pose& hyp, const Intrinsics& k1,
                           const Intrinsics& k2, const TokenConfig& cfg);

}  // namespace pf
