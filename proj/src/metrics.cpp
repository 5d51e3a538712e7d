#include "planeformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace pf {

namespace {

// partner[i] = matched index in the other view, or -1.
std::vector<int> partners(const std::vector<std::pair<int, int>>& matches,
                          int m, bool first, const char* what) {
  std::vector<int> p(m, -1);
  for (const auto& [a, b] : matches) {
    const int self = first ? a : b;
    const int other = first ? b : a;
    if (self < 0 || self >= m)
      throw std::invalid_argument(std::string(what) + ": match index out of range");
    if (p[self] != -1)
      throw std::invalid_argument(std::string(what) + ": matches are not injective");
    p[self] = other;
  }
  return p;
}

}  // namespace

double ipaa(const std::vector<std::pair<int, int>>& pred_matches,
            const std::vector<std::pair<int, int>>& gt_matches, int m1,
            int m2) {
  if (m1 < 0 || m2 < 0 || m1 + m2 == 0)
    throw std::invalid_argument("ipaa: need a non-empty plane set");
  const std::vector<int> p1 = partners(pred_matches, m1, true, "ipaa pred");
  const std::vector<int> p2 = partners(pred_matches, m2, false, "ipaa pred");
  const std::vector<int> g1 = partners(gt_matches, m1, true, "ipaa gt");
  const std::vector<int> g2 = partners(gt_matches, m2, false, "ipaa gt");
  int correct = 0;
  for (int i = 0; i < m1; ++i) correct += p1[i] == g1[i];
  for (int j = 0; j < m2; ++j) correct += p2[j] == g2[j];
  return static_cast<double>(correct) / (m1 + m2);
}

double aggregate_ipaa(const std::vector<double>& fractions, int x) {
  if (fractions.empty())
    throw UndefinedMetricError("aggregate_ipaa: no pairs to aggregate");
  const double cut = x / 100.0;
  const auto hits = std::count_if(fractions.begin(), fractions.end(),
                                  [&](double f) { return f >= cut; });
  return 100.0 * static_cast<double>(hits) / fractions.size();
}

namespace {

double median_sorted(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[(n - 1) / 2] + v[n / 2]);
}

}  // namespace

CameraStats camera_stats(const std::vector<PairEvaluation>& evals,
                         double rot_thresh_deg, double trans_thresh_m) {
  if (evals.empty()) throw UndefinedMetricError("camera_stats: no pairs");
  std::vector<double> rot, trans;
  int rot_in = 0, trans_in = 0;
  for (const PairEvaluation& e : evals) {
    rot.push_back(e.rot_err_deg);
    trans.push_back(e.trans_err_m);
    rot_in += e.rot_err_deg <= rot_thresh_deg;
    trans_in += e.trans_err_m <= trans_thresh_m;
  }
  CameraStats s;
  s.rot_median_deg = median_sorted(rot);
  s.rot_mean_deg = std::accumulate(rot.begin(), rot.end(), 0.0) / rot.size();
  s.pct_rot_within = 100.0 * rot_in / evals.size();
  s.trans_median_m = median_sorted(trans);
  s.trans_mean_m =
      std::accumulate(trans.begin(), trans.end(), 0.0) / trans.size();
  s.pct_trans_within = 100.0 * trans_in / evals.size();
  return s;
}

double mask_iou(const Mask& a, const Mask& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw std::invalid_argument("mask_iou: raster sizes differ");
  std::size_t inter = 0, uni = 0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) {
      const bool va = a.get(y, x), vb = b.get(y, x);
      inter += va && vb;
      uni += va || vb;
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

double scene_ap(const std::vector<ApPlane>& predictions,
                const std::vector<ApPlane>& gt, const ApConfig& cfg) {
  if (gt.empty()) throw UndefinedMetricError("scene_ap: no ground-truth planes");

  std::vector<int> order(predictions.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
    return predictions[i].confidence > predictions[j].confidence;
  });

  std::vector<bool> taken(gt.size(), false);
  std::vector<int> tp_flags;
  tp_flags.reserve(order.size());
  for (int pi : order) {
    const ApPlane& pred = predictions[pi];
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t gi = 0; gi < gt.size(); ++gi) {
      if (taken[gi]) continue;
      const double iou = mask_iou(pred.mask, gt[gi].mask);
      if (iou < cfg.iou_min) continue;
      if (cfg.variant != ApVariant::MinusNormal) {
        const double cosang =
            std::clamp(pred.plane.n.dot(gt[gi].plane.n), -1.0, 1.0);
        if (std::acos(cosang) * 180.0 / M_PI > cfg.normal_max_deg) continue;
      }
      if (cfg.variant != ApVariant::MinusOffset &&
          std::abs(pred.plane.o - gt[gi].plane.o) >= cfg.offset_max_m)
        continue;
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(gi);
      }
    }
    if (best >= 0) {
      taken[best] = true;
      tp_flags.push_back(1);
    } else {
      tp_flags.push_back(0);
    }
  }

  // All-point interpolated area under the precision-recall curve.
  const double n_gt = static_cast<double>(gt.size());
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (int flag : tp_flags) {
    tp += flag;
    fp += 1 - flag;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(tp / n_gt);
  }
  double ap = 0.0, max_prec = 0.0;
  for (std::size_t i = precision.size(); i-- > 0;) {
    max_prec = std::max(max_prec, precision[i]);
    const double r_lo = i == 0 ? 0.0 : recall[i - 1];
    if (recall[i] > r_lo) ap += (recall[i] - r_lo) * max_prec;
  }
  return ap;
}

std::vector<ApPlane> scene_to_ap_planes(const GlobalScene& scene,
                                        const std::vector<ViewData>& views,
                                        const Intrinsics& k) {
  std::vector<ApPlane> out;
  out.reserve(scene.planes.size());
  for (const GlobalPlane& group : scene.planes) {
    ApPlane ap;
    ap.plane = group.plane;
    ap.confidence = group.confidence;
    ap.mask = Mask(k.height, k.width);
    for (const auto& [v, d] : group.members) {
      const PlaneDetection& det = views[v].detections[d];
      Mask warped;
      try {
        const Homography h =
            plane_homography(scene.view_poses[v], det.plane, k, k);
        warped = warp_mask_binary(det.mask, h, k.height, k.width);
      } catch (const DegeneratePlaneError&) {
        continue;
      }
      for (int y = 0; y < k.height; ++y)
        for (int x = 0; x < k.width; ++x)
          if (warped.get(y, x)) ap.mask.set(y, x, true);
    }
    out.push_back(std::move(ap));
  }
  return out;
}

ChainResult ground_truth_chain(const Episode& episode, int root) {
  const int n = static_cast<int>(episode.views.size());
  if (root < 0 || root >= n)
    throw std::invalid_argument("ground_truth_chain: root out of range");
  ChainResult chain;
  const Pose to_root = invert_pose(episode.views[root].cam_to_world);
  for (const ViewData& view : episode.views)
    chain.view_to_global.push_back(compose_pose(to_root, view.cam_to_world));

  // Group by gt plane identity; unidentified detections stay singletons.
  std::vector<int> label_of_gt;  // gt plane id -> group label
  chain.group_of.assign(n, {});
  int next = 0;
  for (int v = 0; v < n; ++v) {
    chain.group_of[v].resize(episode.views[v].detections.size());
    for (std::size_t d = 0; d < episode.views[v].detections.size(); ++d) {
      const auto& gt_id = episode.views[v].detections[d].gt_plane_id;
      if (gt_id.has_value()) {
        if (*gt_id >= static_cast<int>(label_of_gt.size()))
          label_of_gt.resize(*gt_id + 1, -1);
        if (label_of_gt[*gt_id] < 0) label_of_gt[*gt_id] = next++;
        chain.group_of[v][d] = label_of_gt[*gt_id];
      } else {
        chain.group_of[v][d] = next++;
      }
    }
  }
  chain.n_groups = next;
  return chain;
}

std::vector<PairEvaluation> multiview_evaluate(const Episode& episode,
                                               const ChainResult& chain) {
  const int n = static_cast<int>(episode.views.size());
  std::vector<PairEvaluation> evals;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      const PairData& pd = episode.pair(a, b);
      // Relative pose implied by the chained globals.
      const Pose implied = compose_pose(invert_pose(chain.view_to_global[b]),
                                        chain.view_to_global[a]);
      PairEvaluation e;
      const auto [rot, trans] = pose_error(implied, pd.gt_rel);
      e.rot_err_deg = rot;
      e.trans_err_m = trans;

      // Correspondence implied by the global partition.
      const std::vector<int>& ga = chain.group_of[a];
      const std::vector<int>& gb = chain.group_of[b];
      std::vector<std::pair<int, int>> implied_matches;
      for (std::size_t i = 0; i < ga.size(); ++i)
        for (std::size_t j = 0; j < gb.size(); ++j)
          if (ga[i] == gb[j])
            implied_matches.push_back(
                {static_cast<int>(i), static_cast<int>(j)});
      e.ipaa_fraction = ipaa(implied_matches, pd.gt_matches,
                             static_cast<int>(ga.size()),
                             static_cast<int>(gb.size()));
      evals.push_back(e);
    }
  return evals;
}

EvaluationSummary summarize_pairs(const std::vector<PairEvaluation>& evals,
                                  const std::vector<int>& levels) {
  EvaluationSummary s;
  s.n_pairs = static_cast<int>(evals.size());
  std::vector<double> fractions;
  for (const PairEvaluation& e : evals) fractions.push_back(e.ipaa_fraction);
  s.ipaa_levels = levels;
  for (int x : levels) s.ipaa_values.push_back(aggregate_ipaa(fractions, x));
  s.cameras = camera_stats(evals);
  return s;
}

Json summary_to_json(const EvaluationSummary& s) {
  Json ipaa_obj = Json::object();
  for (std::size_t i = 0; i < s.ipaa_levels.size(); ++i)
    ipaa_obj["ipaa_" + std::to_string(s.ipaa_levels[i])] = s.ipaa_values[i];
  return {{"n_pairs", s.n_pairs},
          {"ipaa", ipaa_obj},
          {"rotation",
           {{"median_deg", s.cameras.rot_median_deg},
            {"mean_deg", s.cameras.rot_mean_deg},
            {"pct_within_30deg", s.cameras.pct_rot_within}}},
          {"translation",
           {{"median_m", s.cameras.trans_median_m},
            {"mean_m", s.cameras.trans_mean_m},
            {"pct_within_1m", s.cameras.pct_trans_within}}}};
}

std::string summary_to_table(const EvaluationSummary& s) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << std::left << std::setw(22) << "pairs" << s.n_pairs << "\n";
  for (std::size_t i = 0; i < s.ipaa_levels.size(); ++i)
    out << std::left << std::setw(22)
        << ("IPAA-" + std::to_string(s.ipaa_levels[i])) << s.ipaa_values[i]
        << "\n";
  out << std::left << std::setw(22) << "rot median (deg)"
      << s.cameras.rot_median_deg << "\n";
  out << std::left << std::setw(22) << "rot mean (deg)"
      << s.cameras.rot_mean_deg << "\n";
  out << std::left << std::setw(22) << "rot <= 30 deg (%)"
      << s.cameras.pct_rot_within << "\n";
  out << std::left << std::setw(22) << "trans median (m)"
      << s.cameras.trans_median_m << "\n";
  out << std::left << std::setw(22) << "trans mean (m)"
      << s.cameras.trans_mean_m << "\n";
  out << std::left << std::setw(22) << "trans <= 1 m (%)"
      << s.cameras.pct_trans_within << "\n";
  return out.str();
}

}  // namespace pf
