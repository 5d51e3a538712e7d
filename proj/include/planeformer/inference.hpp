#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "planeformer/episode_io.hpp"
#include "planeformer/model.hpp"

namespace pf {

struct DegenerateResidualError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MatchEdge {
  int j1 = 0, j2 = 0;
  double score = 0.0;  // the Pi entry behind the match
};

// Two-view inference result for an ordered pair (view_a -> view_b).
struct PairResult {
  int view_a = 0, view_b = 1;
  int selected_index = -1;  // codebook entry with the best C score
  int selected_rank = -1;   // its rank in the stub ordering
  Pose selected_pose;       // raw codebook pose
  Pose refined;             // after the residual correction (if any)
  std::vector<MatchEdge> matches;  // injective both ways
  std::vector<double> c_scores;    // per hypothesis, stub-rank order
  Mat pi;                          // selected hypothesis's match scores
  Eigen::Vector4d delta_q = Eigen::Vector4d(1, 0, 0, 0);
  Vec3 delta_t = Vec3::Zero();
  bool has_residual = false;
};

struct InferenceConfig {
  int h = 9;           // hypotheses taken from the top of the stub ranking
  double tau = 0.5;    // match-score threshold
  double sigma = 0.5;  // visibility-score bandwidth
};

// Left-composes the normalized rotation residual and adds the translation
// residual. Throws DegenerateResidualError when ||delta_q|| <= 1e-6.
Pose apply_residual(const Pose& hyp, const Eigen::Vector4d& delta_q,
                    const Vec3& delta_t);

// Maximum-total-score assignment (Hungarian on cost 1 - pi, padded square),
// keeping only pairs with pi >= tau. Entries must lie in (0, 1).
std::vector<MatchEdge> match_planes(const Mat& pi, double tau);

// Evaluates the top-h stub hypotheses with one forward pass each, selects the
// highest camera-correspondence score (ties break toward the lower stub
// rank), matches planes under the winner, and applies its residual.
PairResult score_hypotheses(const PlaneFormer& model,
                            const std::vector<PlaneDetection>& dets1,
                            const std::vector<PlaneDetection>& dets2,
                            const std::vector<StubEntry>& stub,
                            const CameraCodebook& codebook,
                            const Intrinsics& k1, const Intrinsics& k2,
                            const InferenceConfig& cfg);

// Soft symmetric count of close embedding correspondences:
// sum_j exp(-d_j^2/sigma^2) in both directions.
double visibility_score(const std::vector<PlaneDetection>& dets_a,
                        const std::vector<PlaneDetection>& dets_b,
                        double sigma);

struct ViewGraphEdge {
  int a = 0, b = 0;  // a < b
  double score = 0.0;
};

struct ViewGraph {
  int n_views = 0;
  std::vector<ViewGraphEdge> edges;  // n_views - 1, acyclic
  int root = 0;  // highest total incident score over all pairs, ties -> lowest
};

ViewGraph build_view_graph(const Episode& episode, double sigma);

// Global poses (root = identity) by composing edge poses along the tree, and
// a detection partition from union-find over the edge matches. Group ids are
// canonical: numbered by each group's smallest (view, detection) member.
struct ChainResult {
  std::vector<Pose> view_to_global;
  std::vector<std::vector<int>> group_of;  // [view][detection] -> group id
  int n_groups = 0;
};

ChainResult chain_to_global(const ViewGraph& graph,
                            const std::vector<PairResult>& edge_results,
                            const std::vector<int>& dets_per_view);

struct GlobalPlane {
  Plane plane;  // global frame
  std::vector<std::pair<int, int>> members;  // (view, detection), ascending
  double confidence = 0.0;
  bool degenerate = false;  // fusion fell back to the largest member
};

struct GlobalScene {
  std::vector<Pose> view_poses;  // camera -> global
  std::vector<GlobalPlane> planes;
  std::vector<std::vector<int>> detection_to_plane;
  int root = 0;
};

// Mask-area-weighted average of each group's o.n vectors in the global frame;
// confidence is the best member's. A collapsing average keeps the
// largest-area member's plane and flags the group.
GlobalScene fuse_planes(const std::vector<ViewData>& views,
                        const ChainResult& chain);

// Full multiview pipeline: view graph, per-edge two-view inference, chaining,
// fusion.
GlobalScene reconstruct_scene(const PlaneFormer& model, const Episode& episode,
                              const CameraCodebook& codebook,
                              const InferenceConfig& cfg);

// ASCII PLY with one colored convex polygon per global plane, clipped to the
// union of contributing masks back-projected at plane depth. Vertices are
// snapped onto their fused plane.
void export_scene(const GlobalScene& scene, const std::vector<ViewData>& views,
                  const Intrinsics& k, const std::string& path);

Json pair_result_to_json(const PairResult& r);
PairResult pair_result_from_json(const Json& j);

}  // namespace pf
