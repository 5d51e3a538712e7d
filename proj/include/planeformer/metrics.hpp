#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "planeformer/inference.hpp"
#include "planeformer/mask.hpp"
#include "planeformer/synth.hpp"

namespace pf {

struct UndefinedMetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PairEvaluation {
  double ipaa_fraction = 0.0;  // in [0, 1]
  double rot_err_deg = 0.0;
  double trans_err_m = 0.0;
};

// Fraction of planes associated correctly: a plane counts when its predicted
// partner — or predicted absence of one — agrees with ground truth.
// Denominator = all planes in both views.
double ipaa(const std::vector<std::pair<int, int>>& pred_matches,
            const std::vector<std::pair<int, int>>& gt_matches, int m1, int m2);

// Percentage of pairs whose fraction reaches x/100.
double aggregate_ipaa(const std::vector<double>& fractions, int x);

struct CameraStats {
  double rot_median_deg = 0.0;
  double rot_mean_deg = 0.0;
  double pct_rot_within = 0.0;  // <= rot threshold (default 30 deg)
  double trans_median_m = 0.0;
  double trans_mean_m = 0.0;
  double pct_trans_within = 0.0;  // <= trans threshold (default 1 m)
};

CameraStats camera_stats(const std::vector<PairEvaluation>& evals,
                         double rot_thresh_deg = 30.0,
                         double trans_thresh_m = 1.0);

// Intersection over union; two empty masks give 0.
double mask_iou(const Mask& a, const Mask& b);

enum class ApVariant { All, MinusOffset, MinusNormal };

struct ApConfig {
  ApVariant variant = ApVariant::All;
  double iou_min = 0.5;
  double normal_max_deg = 30.0;
  double offset_max_m = 1.0;
};

// One plane in the shared evaluation frame: geometry, rendered mask, and (for
// predictions) a confidence.
struct ApPlane {
  Plane plane;
  Mask mask;
  double confidence = 1.0;
};

// Average precision over the confidence-ranked predictions, greedy one-to-one
// matching under the config's active conditions, all-point PR interpolation.
double scene_ap(const std::vector<ApPlane>& predictions,
                const std::vector<ApPlane>& gt, const ApConfig& cfg);

// Projects a fused scene into the evaluation (root) frame: per global plane,
// the union of member masks warped into the root view plus the fused plane.
std::vector<ApPlane> scene_to_ap_planes(const GlobalScene& scene,
                                        const std::vector<ViewData>& views,
                                        const Intrinsics& k);

// Ground-truth chain for an episode: gt camera poses relative to `root` and
// the partition induced by gt plane identities (unidentified detections stay
// singletons).
ChainResult ground_truth_chain(const Episode& episode, int root);

// Evaluates every unordered view pair against the episode's ground truth:
// relative pose implied by the chained global poses, correspondence implied by
// the global partition.
std::vector<PairEvaluation> multiview_evaluate(const Episode& episode,
                                               const ChainResult& chain);

struct EvaluationSummary {
  int n_pairs = 0;
  std::vector<int> ipaa_levels;
  std::vector<double> ipaa_values;
  CameraStats cameras;
};

EvaluationSummary summarize_pairs(const std::vector<PairEvaluation>& evals,
                                  const std::vector<int>& levels = {100, 90,
                                                                    80, 70});
Json summary_to_json(const EvaluationSummary& s);
std::string summary_to_table(const EvaluationSummary& s);

}  // namespace pf
