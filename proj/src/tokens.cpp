#include "planeformer/tokens.hpp"

#include <stdexcept>

namespace pf {

namespace {

bool is_identity(const Pose& p) {
  return p.q.w == 1.0 && p.q.x == 0.0 && p.q.y == 0.0 && p.q.z == 0.0 &&
         p.t.x() == 0.0 && p.t.y() == 0.0 && p.t.z() == 0.0;
}

bool same_intrinsics(const Intrinsics& a, const Intrinsics& b) {
  return a.fx == b.fx && a.fy == b.fy && a.cx == b.cx && a.cy == b.cy &&
         a.width == b.width && a.height == b.height;
}

}  // namespace

Vec3 plane_feature(const PlaneDetection& det, const Pose& pose) {
  const Plane p = transform_plane(det.plane, pose);
  return p.o * p.n;
}

Eigen::VectorXd mask_feature(const PlaneDetection& det, const Pose& src_to_ref,
                             const Intrinsics& k_src, const Intrinsics& k_ref,
                             const TokenConfig& cfg, bool* degenerate) {
  Homography h;  // identity short-circuit keeps the reference view's masks exact
  if (!(is_identity(src_to_ref) && same_intrinsics(k_src, k_ref))) {
    try {
      h = plane_homography(src_to_ref, det.plane, k_src, k_ref);
    } catch (const DegeneratePlaneError&) {
      if (degenerate) *degenerate = true;
      return Eigen::VectorXd::Zero(cfg.grid_rows * cfg.grid_cols);
    }
  }
  WarpedGrid grid = warp_and_downsample_mask(det.mask, h, k_ref.height, k_ref.width,
                                             cfg.grid_rows, cfg.grid_cols);
  if (grid.degenerate && degenerate) *degenerate = true;
  Eigen::VectorXd flat(cfg.grid_rows * cfg.grid_cols);
  for (int r = 0; r < cfg.grid_rows; ++r)
    for (int c = 0; c < cfg.grid_cols; ++c) flat[r * cfg.grid_cols + c] = grid.values(r, c);
  return flat;
}

TokenBatch assemble_tokens(const std::vector<PlaneDetection>& dets1,
                           const std::vector<PlaneDetection>& dets2,
                           const Pose& hyp, const Intrinsics& k1,
                           const Intrinsics& k2, const TokenConfig& cfg) {
  if (dets1.empty() || dets2.empty())
    throw std::invalid_argument("assemble_tokens: both views need detections");

  const int d_app = static_cast<int>(dets1[0].embedding.size());
  for (const auto* dets : {&dets1, &dets2})
    for (const PlaneDetection& d : *dets)
      if (static_cast<int>(d.embedding.size()) != d_app)
        throw std::invalid_argument("assemble_tokens: inconsistent embedding size");

  TokenBatch batch;
  batch.m1 = static_cast<int>(dets1.size());
  batch.m2 = static_cast<int>(dets2.size());
  batch.d_app = d_app;
  batch.grid_rows = cfg.grid_rows;
  batch.grid_cols = cfg.grid_cols;
  batch.hypothesis = hyp;
  batch.features.resize(batch.size(), batch.d_model());

  const Pose identity = Pose::identity();
  for (int r = 0; r < batch.size(); ++r) {
    const bool first = r < batch.m1;
    const PlaneDetection& det = first ? dets1[r] : dets2[r - batch.m1];
    const Pose& pose = first ? hyp : identity;
    const Intrinsics& k_src = first ? k1 : k2;

    batch.features.row(r).segment(0, d_app) = det.embedding.transpose();
    batch.features.row(r).segment(d_app, 3) = plane_feature(det, pose).transpose();
    bool degenerate = false;
    batch.features.row(r).segment(d_app + 3, cfg.grid_rows * cfg.grid_cols) =
        mask_feature(det, pose, k_src, k2, cfg, &degenerate).transpose();
    if (degenerate) batch.degenerate_warp = true;
  }
  return batch;
}

}  // namespace pf
