#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "planeformer/geometry.hpp"
#include "planeformer/mask.hpp"
#include "planeformer/rng.hpp"

namespace pf {

struct GenerationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SceneConfig {
  int n_interior = 6;           // patches beyond the room shell
  double room_min = 5.0;        // side length range (meters)
  double room_max = 7.0;
  double height_min = 2.6;
  double height_max = 3.2;
  double patch_min = 1.0;       // patch side range
  double patch_max = 2.4;
  double p_duplicate = 0.0;     // chance a patch reuses an earlier appearance seed
  int d_app = 128;
};

struct NoiseConfig {
  double sigma_app = 0.1;       // per-detection embedding noise
  double sigma_view = 0.05;     // per-view embedding shift
  double sigma_n_deg = 0.0;     // angular noise on detected normals
  double sigma_o = 0.0;         // offset noise (meters)
  int min_area_px = 50;         // detections smaller than this are dropped
};

struct BaselineConfig {
  double rot_min_deg = 25.0;    // consecutive-view relative rotation window
  double rot_max_deg = 70.0;
  double trans_min = 1.0;       // consecutive-view translation window (meters)
  double trans_max = 3.2;
  int min_matches = 3;          // per view pair
  int min_unique = 3;           // per view
  double stub_tau = 0.25;       // softmax temperature over codebook distances
  double corruption = 0.0;      // chance the true entry is demoted out of rank 1
  int stub_top = 9;             // demotion lands uniformly within ranks 2..stub_top
  int max_tries = 4000;         // rejection budget per episode
};

struct ScenePlane {
  Plane plane;                   // world frame
  std::vector<Vec3> polygon;     // convex, on the plane
  Eigen::VectorXd appearance_seed;
};

struct SyntheticScene {
  std::vector<ScenePlane> planes;
  Vec3 room_lo = Vec3::Zero();   // axis-aligned interior extent
  Vec3 room_hi = Vec3::Zero();
  std::uint64_t seed = 0;
  int d_app = 0;
};

struct PlaneDetection {
  Mask mask;
  Plane plane;                   // camera frame
  Eigen::VectorXd embedding;
  std::optional<int> gt_plane_id;
  double confidence = 1.0;
};

struct ViewData {
  Pose cam_to_world;
  std::vector<PlaneDetection> detections;
};

struct StubEntry {
  int codebook_index = 0;
  double prob = 0.0;
};

// One ordered view pair (a -> b): gt_rel maps view-a camera coordinates into
// view b's frame; matches are (detection index in a, detection index in b).
struct PairData {
  int view_a = 0;
  int view_b = 1;
  Pose gt_rel;
  std::vector<std::pair<int, int>> gt_matches;
  std::vector<StubEntry> stub;   // ranked, probabilities descending, sums to 1
};

struct Episode {
  std::vector<ViewData> views;
  std::vector<PairData> pairs;   // all ordered pairs, lexicographic (a, b)
  Intrinsics intrinsics;
  std::uint64_t seed = 0;
  int d_app = 0;

  const PairData& pair(int a, int b) const;
};

SyntheticScene generate_scene(const SceneConfig& config, std::uint64_t seed);

// Renders the scene into one camera: per-pixel nearest-plane ray casting, one
// detection per scene plane covering at least min_area_px pixels.
std::vector<PlaneDetection> render_view(const SyntheticScene& scene,
                                        const Pose& cam_to_world,
                                        const Intrinsics& k,
                                        const NoiseConfig& noise, Rng& rng);

Episode make_episode(const SyntheticScene& scene, int n_views,
                     const BaselineConfig& baseline, const NoiseConfig& noise,
                     const Intrinsics& k, const CameraCodebook& codebook,
                     std::uint64_t seed);

// Codebook of k relative poses spread over the baseline distribution by
// k-means++ seeding on the codebook metric.
CameraCodebook make_codebook(const SceneConfig& scene_config,
                             const BaselineConfig& baseline, int k,
                             std::uint64_t seed);

}  // namespace pf
