#include "planeformer/synth.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "planeformer/inference.hpp"

namespace pf {

namespace {

// Rectangle centered at c spanned by half-extent vectors u, v; the four
// vertices wind consistently so the polygon is convex.
ScenePlane make_rect(const Vec3& c, const Vec3& u, const Vec3& v) {
  ScenePlane sp;
  Vec3 n = u.cross(v).normalized();
  sp.plane = Plane(n, n.dot(c));
  sp.polygon = {c - u - v, c + u - v, c + u + v, c - u + v};
  return sp;
}

}  // namespace

SyntheticScene generate_scene(const SceneConfig& config, std::uint64_t seed) {
  if (config.n_interior < 0) throw std::invalid_argument("n_interior must be >= 0");
  if (config.d_app < 1) throw std::invalid_argument("d_app must be >= 1");
  if (config.room_min > config.room_max || config.room_min <= 0)
    throw std::invalid_argument("bad room size range");
  if (config.patch_min > config.patch_max || config.patch_min <= 0)
    throw std::invalid_argument("bad patch size range");
  if (config.height_min > config.height_max || config.height_min < 2.2)
    throw std::invalid_argument("bad room height range");

  Rng rng(seed);
  SyntheticScene scene;
  scene.seed = seed;
  scene.d_app = config.d_app;

  const double sx = rng.uniform(config.room_min, config.room_max);
  const double sy = rng.uniform(config.room_min, config.room_max);
  const double h = rng.uniform(config.height_min, config.height_max);
  scene.room_lo = Vec3(-sx / 2, -sy / 2, -h / 2);
  scene.room_hi = Vec3(sx / 2, sy / 2, h / 2);

  // Shell: floor plus four walls (no ceiling; cameras look mostly level).
  scene.planes.push_back(make_rect(Vec3(0, 0, -h / 2), Vec3(sx / 2, 0, 0), Vec3(0, sy / 2, 0)));
  scene.planes.push_back(make_rect(Vec3(-sx / 2, 0, 0), Vec3(0, sy / 2, 0), Vec3(0, 0, h / 2)));
  scene.planes.push_back(make_rect(Vec3(sx / 2, 0, 0), Vec3(0, sy / 2, 0), Vec3(0, 0, h / 2)));
  scene.planes.push_back(make_rect(Vec3(0, -sy / 2, 0), Vec3(sx / 2, 0, 0), Vec3(0, 0, h / 2)));
  scene.planes.push_back(make_rect(Vec3(0, sy / 2, 0), Vec3(sx / 2, 0, 0), Vec3(0, 0, h / 2)));

  for (int i = 0; i < config.n_interior; ++i) {
    const double margin = 0.6;
    Vec3 c(rng.uniform(scene.room_lo.x() + margin, scene.room_hi.x() - margin),
           rng.uniform(scene.room_lo.y() + margin, scene.room_hi.y() - margin),
           rng.uniform(scene.room_lo.z() + 0.5, scene.room_hi.z() - 0.5));
    Vec3 n;
    if (rng.bernoulli(0.6)) {
      // Wall-like: near-horizontal normal, visible from eye-level cameras.
      const double theta = rng.uniform(0.0, 2 * M_PI);
      n = Vec3(std::cos(theta), std::sin(theta), rng.uniform(-0.25, 0.25)).normalized();
    } else {
      n = random_unit_vector(rng);
    }
    Vec3 helper = std::abs(n.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitX();
    Vec3 u_dir = n.cross(helper).normalized();
    Vec3 v_dir = n.cross(u_dir);
    const double a = rng.uniform(config.patch_min, config.patch_max) / 2;
    const double b = rng.uniform(config.patch_min, config.patch_max) / 2;
    scene.planes.push_back(make_rect(c, u_dir * a, v_dir * b));
  }

  for (std::size_t i = 0; i < scene.planes.size(); ++i) {
    if (i > 0 && config.p_duplicate > 0 && rng.bernoulli(config.p_duplicate)) {
      const std::size_t src = rng.uniform_index(i);
      scene.planes[i].appearance_seed = scene.planes[src].appearance_seed;
    } else {
      Eigen::VectorXd seed_vec(config.d_app);
      for (int d = 0; d < config.d_app; ++d) seed_vec[d] = rng.normal();
      scene.planes[i].appearance_seed = seed_vec;
    }
  }
  return scene;
}

namespace {

struct CamPlane {
  Plane plane;                  // camera frame
  std::vector<Vec3> verts;      // polygon in camera frame
  Vec3 n_poly;                  // polygon normal (camera frame, unnormalized ok)
};

bool inside_polygon(const std::vector<Vec3>& verts, const Vec3& n, const Vec3& p) {
  const std::size_t m = verts.size();
  double ref = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const Vec3& a = verts[i];
    const Vec3& b = verts[(i + 1) % m];
    const double s = (b - a).cross(p - a).dot(n);
    if (i == 0)
      ref = s;
    else if (s * ref < 0)
      return false;
  }
  return true;
}

Quat small_rotation(Rng& rng, double angle_rad) {
  Vec3 axis = random_unit_vector(rng);
  const double half = angle_rad / 2;
  return canonicalized(Quat(std::cos(half), axis.x() * std::sin(half),
                            axis.y() * std::sin(half), axis.z() * std::sin(half)));
}

}  // namespace

std::vector<PlaneDetection> render_view(const SyntheticScene& scene,
                                        const Pose& cam_to_world,
                                        const Intrinsics& k,
                                        const NoiseConfig& noise, Rng& rng) {
  const Pose world_to_cam = invert_pose(cam_to_world);
  const std::size_t n_planes = scene.planes.size();

  std::vector<CamPlane> cam_planes(n_planes);
  for (std::size_t i = 0; i < n_planes; ++i) {
    const ScenePlane& sp = scene.planes[i];
    CamPlane& cp = cam_planes[i];
    cp.plane = transform_plane(sp.plane, world_to_cam);
    cp.verts.reserve(sp.polygon.size());
    for (const Vec3& v : sp.polygon) cp.verts.push_back(world_to_cam.apply(v));
    cp.n_poly = (cp.verts[1] - cp.verts[0]).cross(cp.verts[2] - cp.verts[0]);
  }

  std::vector<Mask> masks(n_planes, Mask(k.height, k.width));
  std::vector<std::size_t> areas(n_planes, 0);
  for (int y = 0; y < k.height; ++y) {
    for (int x = 0; x < k.width; ++x) {
      const Vec3 dir((x + 0.5 - k.cx) / k.fx, (y + 0.5 - k.cy) / k.fy, 1.0);
      double best_t = std::numeric_limits<double>::infinity();
      int best = -1;
      for (std::size_t i = 0; i < n_planes; ++i) {
        const CamPlane& cp = cam_planes[i];
        const double denom = cp.plane.n.dot(dir);
        if (std::abs(denom) < 1e-12) continue;
        const double t = cp.plane.o / denom;
        if (t <= 1e-6 || t >= best_t) continue;
        if (inside_polygon(cp.verts, cp.n_poly, t * dir)) {
          best_t = t;
          best = static_cast<int>(i);
        }
      }
      if (best >= 0) {
        masks[best].set(y, x, true);
        ++areas[best];
      }
    }
  }

  Eigen::VectorXd view_shift = Eigen::VectorXd::Zero(scene.d_app);
  if (noise.sigma_view > 0)
    for (int d = 0; d < scene.d_app; ++d) view_shift[d] = rng.normal(0.0, noise.sigma_view);

  std::vector<PlaneDetection> dets;
  const double total_px = static_cast<double>(k.width) * k.height;
  for (std::size_t i = 0; i < n_planes; ++i) {
    if (areas[i] < static_cast<std::size_t>(noise.min_area_px)) continue;
    PlaneDetection det;
    det.mask = std::move(masks[i]);
    det.gt_plane_id = static_cast<int>(i);

    Plane p = cam_planes[i].plane;
    if (noise.sigma_n_deg > 0) {
      Quat dq = small_rotation(rng, rng.normal(0.0, noise.sigma_n_deg * M_PI / 180.0));
      p = Plane(quat_rotate(dq, p.n), p.o);
    }
    if (noise.sigma_o > 0) {
      double o = p.o + rng.normal(0.0, noise.sigma_o);
      p = Plane(p.n, std::max(o, 0.05));
    }
    det.plane = p;

    det.embedding = scene.planes[i].appearance_seed + view_shift;
    if (noise.sigma_app > 0)
      for (int d = 0; d < scene.d_app; ++d) det.embedding[d] += rng.normal(0.0, noise.sigma_app);

    const double frac = static_cast<double>(areas[i]) / total_px;
    det.confidence = std::clamp(0.35 + 1.5 * std::sqrt(frac) + 0.05 * rng.normal(), 0.05, 1.0);
    dets.push_back(std::move(det));
  }
  return dets;
}

namespace {

Pose sample_camera(Rng& rng, const Vec3& lo, const Vec3& hi) {
  const double margin = 0.7;
  Vec3 pos(rng.uniform(lo.x() + margin, hi.x() - margin),
           rng.uniform(lo.y() + margin, hi.y() - margin),
           lo.z() + rng.uniform(1.1, 1.7));
  const double yaw = rng.uniform(0.0, 2 * M_PI);
  const double pitch = rng.uniform(-0.05, 0.30);  // mostly level, slightly down
  const double roll = rng.normal(0.0, 0.02);

  // Forward in the world (z up); pitch > 0 tips the view downward.
  Vec3 f(std::cos(yaw) * std::cos(pitch), std::sin(yaw) * std::cos(pitch), -std::sin(pitch));
  Vec3 r = f.cross(Vec3::UnitZ()).normalized();
  Vec3 d = f.cross(r);
  // Camera axes: x right, y down, z forward. Roll spins r, d about f.
  Mat3 rot_roll = quat_to_rotmat(Quat(std::cos(roll / 2), f.x() * std::sin(roll / 2),
                                      f.y() * std::sin(roll / 2), f.z() * std::sin(roll / 2)));
  r = rot_roll * r;
  d = rot_roll * d;
  Mat3 c2w;
  c2w.col(0) = r;
  c2w.col(1) = d;
  c2w.col(2) = f;
  return Pose(rotmat_to_quat(c2w), pos);
}

int count_matches(const std::vector<PlaneDetection>& a, const std::vector<PlaneDetection>& b) {
  int n = 0;
  for (const auto& da : a)
    for (const auto& db : b)
      if (da.gt_plane_id && db.gt_plane_id && *da.gt_plane_id == *db.gt_plane_id) ++n;
  return n;
}

// Chaining merges detections of the same plane only along spanning-tree edges,
// so a camera set with 3+ views is usable only if every plane's visible-view
// set stays connected through the tree the visibility scorer would pick.
// Mirrors the scorer's tree construction: candidates in (a < b) lexicographic
// order, stable-sorted by score descending, greedy acyclic acceptance.
bool partition_chainable(const std::vector<ViewData>& views) {
  const int n = static_cast<int>(views.size());
  struct Cand {
    int a, b;
    double score;
  };
  std::vector<Cand> cand;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b)
      cand.push_back({a, b,
                      visibility_score(views[a].detections, views[b].detections,
                                       /*sigma=*/0.5)});
  std::stable_sort(cand.begin(), cand.end(),
                   [](const Cand& x, const Cand& y) { return x.score > y.score; });

  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  std::vector<std::pair<int, int>> tree;
  for (const Cand& e : cand) {
    int ra = find(e.a), rb = find(e.b);
    if (ra == rb) continue;
    parent[std::max(ra, rb)] = std::min(ra, rb);
    tree.emplace_back(e.a, e.b);
  }

  std::map<int, std::vector<int>> seen_in;  // plane id -> views observing it
  for (int v = 0; v < n; ++v)
    for (const PlaneDetection& d : views[v].detections)
      if (d.gt_plane_id) seen_in[*d.gt_plane_id].push_back(v);

  for (const auto& [id, vs] : seen_in) {
    if (vs.size() <= 1) continue;
    std::vector<char> in_set(n, 0);
    for (int v : vs) in_set[v] = 1;
    std::vector<int> comp(n);
    std::iota(comp.begin(), comp.end(), 0);
    auto croot = [&](int x) {
      while (comp[x] != x) {
        comp[x] = comp[comp[x]];
        x = comp[x];
      }
      return x;
    };
    // Merging along a tree edge requires the plane visible at both ends.
    for (const auto& [a, b] : tree)
      if (in_set[a] && in_set[b]) comp[std::max(croot(a), croot(b))] = std::min(croot(a), croot(b));
    const int first = croot(vs.front());
    for (int v : vs)
      if (croot(v) != first) return false;
  }
  return true;
}

std::vector<StubEntry> make_stub(const Pose& gt_rel, const CameraCodebook& codebook,
                                 const BaselineConfig& cfg, Rng& rng) {
  const std::size_t k = codebook.size();
  std::vector<double> logits(k);
  for (std::size_t i = 0; i < k; ++i)
    logits[i] = -codebook_distance(codebook[i], gt_rel) / cfg.stub_tau;
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) z += (l = std::exp(l - m));

  std::vector<int> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
    if (logits[x] != logits[y]) return logits[x] > logits[y];
    return x < y;
  });

  // Corruption permutes which entries occupy the ranks; the rank-probability
  // profile itself stays sorted so the stub still looks like a confident
  // camera branch, just a wrong one.
  if (cfg.corruption > 0 && k > 1 && rng.bernoulli(cfg.corruption)) {
    const std::size_t top = std::min<std::size_t>(std::max(cfg.stub_top, 2), k);
    const std::size_t target = 1 + rng.uniform_index(top - 1);  // rank in [1, top-1]
    const int true_entry = order[0];
    for (std::size_t r = 0; r < target; ++r) order[r] = order[r + 1];
    order[target] = true_entry;
  }

  std::vector<double> rank_probs(k);
  {
    std::vector<double> sorted = logits;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    for (std::size_t r = 0; r < k; ++r) rank_probs[r] = sorted[r] / z;
  }
  std::vector<StubEntry> stub(k);
  for (std::size_t r = 0; r < k; ++r) stub[r] = {order[r], rank_probs[r]};
  return stub;
}

}  // namespace

const PairData& Episode::pair(int a, int b) const {
  for (const PairData& p : pairs)
    if (p.view_a == a && p.view_b == b) return p;
  throw std::invalid_argument("episode has no such view pair");
}

Episode make_episode(const SyntheticScene& scene, int n_views,
                     const BaselineConfig& baseline, const NoiseConfig& noise,
                     const Intrinsics& k, const CameraCodebook& codebook,
                     std::uint64_t seed) {
  if (n_views < 2) throw std::invalid_argument("make_episode needs n_views >= 2");
  Rng rng(seed);

  int attempts = 0;
  const int per_view_tries = std::max(50, baseline.max_tries / (4 * n_views));
  std::vector<ViewData> views;

  while (attempts < baseline.max_tries) {
    views.clear();
    bool restart = false;
    for (int v = 0; v < n_views && !restart; ++v) {
      bool placed = false;
      for (int t = 0; t < per_view_tries && attempts < baseline.max_tries; ++t) {
        ++attempts;
        Pose cam = sample_camera(rng, scene.room_lo, scene.room_hi);
        if (v > 0) {
          Pose rel = compose_pose(invert_pose(cam), views[v - 1].cam_to_world);
          double rot_deg = quat_angle_deg(rel.q, Quat::identity());
          double tr = rel.t.norm();
          if (rot_deg < baseline.rot_min_deg || rot_deg > baseline.rot_max_deg ||
              tr < baseline.trans_min || tr > baseline.trans_max)
            continue;
        }
        auto dets = render_view(scene, cam, k, noise, rng);
        if (static_cast<int>(dets.size()) < baseline.min_unique) continue;
        bool ok = true;
        for (const ViewData& prev : views)
          if (count_matches(prev.detections, dets) < baseline.min_matches) {
            ok = false;
            break;
          }
        if (!ok) continue;
        views.push_back(ViewData{cam, std::move(dets)});
        placed = true;
        break;
      }
      if (!placed) restart = true;
    }
    if (!restart && static_cast<int>(views.size()) == n_views) {
      if (n_views <= 2 || partition_chainable(views)) break;
      views.clear();  // some plane's view set is not tree-connected; resample
    }
  }
  if (static_cast<int>(views.size()) != n_views) {
    std::ostringstream oss;
    oss << "episode generation exhausted " << attempts << " attempts (placed "
        << views.size() << "/" << n_views << " views; scene has " << scene.planes.size()
        << " planes; need >= " << baseline.min_matches << " matches per pair)";
    throw GenerationFailure(oss.str());
  }

  Episode ep;
  ep.views = std::move(views);
  ep.intrinsics = k;
  ep.seed = seed;
  ep.d_app = scene.d_app;
  for (int a = 0; a < n_views; ++a) {
    for (int b = 0; b < n_views; ++b) {
      if (a == b) continue;
      PairData pd;
      pd.view_a = a;
      pd.view_b = b;
      pd.gt_rel = compose_pose(invert_pose(ep.views[b].cam_to_world), ep.views[a].cam_to_world);
      const auto& da = ep.views[a].detections;
      const auto& db = ep.views[b].detections;
      for (std::size_t i = 0; i < da.size(); ++i)
        for (std::size_t j = 0; j < db.size(); ++j)
          if (da[i].gt_plane_id && db[j].gt_plane_id &&
              *da[i].gt_plane_id == *db[j].gt_plane_id)
            pd.gt_matches.emplace_back(static_cast<int>(i), static_cast<int>(j));
      if (codebook.size() > 0) pd.stub = make_stub(pd.gt_rel, codebook, baseline, rng);
      ep.pairs.push_back(std::move(pd));
    }
  }
  return ep;
}

CameraCodebook make_codebook(const SceneConfig& scene_config,
                             const BaselineConfig& baseline, int k,
                             std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("codebook needs k >= 2");
  Rng rng(seed);
  const double sx = (scene_config.room_min + scene_config.room_max) / 2;
  const double h = (scene_config.height_min + scene_config.height_max) / 2;
  const Vec3 lo(-sx / 2, -sx / 2, -h / 2), hi(sx / 2, sx / 2, h / 2);

  std::vector<Pose> pool;
  const std::size_t want = std::max<std::size_t>(500, 40 * static_cast<std::size_t>(k));
  int guard = 0;
  while (pool.size() < want && guard < 200000) {
    ++guard;
    Pose a = sample_camera(rng, lo, hi);
    Pose b = sample_camera(rng, lo, hi);
    Pose rel = compose_pose(invert_pose(b), a);
    const double rot = quat_angle_deg(rel.q, Quat::identity());
    const double tr = rel.t.norm();
    if (rot < baseline.rot_min_deg || rot > baseline.rot_max_deg ||
        tr < baseline.trans_min || tr > baseline.trans_max)
      continue;
    pool.push_back(rel);
  }
  if (pool.size() < static_cast<std::size_t>(k))
    throw GenerationFailure("codebook pool too small for requested size");

  // k-means++ seeding on the codebook metric.
  CameraCodebook book;
  book.entries.push_back(pool[rng.uniform_index(pool.size())]);
  std::vector<double> d2(pool.size(), 0.0);
  while (static_cast<int>(book.entries.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const Pose& e : book.entries)
        best = std::min(best, codebook_distance(pool[i], e));
      d2[i] = best * best;
      total += d2[i];
    }
    if (total <= 0) throw GenerationFailure("codebook candidates collapsed");
    double r = rng.uniform(0.0, total);
    std::size_t pick = 0;
    for (; pick + 1 < pool.size(); ++pick) {
      if (r < d2[pick]) break;
      r -= d2[pick];
    }
    // Keep entries distinct: > 1 degree or > 5 cm apart.
    const Pose& cand = pool[pick];
    bool distinct = true;
    for (const Pose& e : book.entries)
      if (quat_angle_deg(cand.q, e.q) <= 1.0 && pose_translation_distance(cand, e) <= 0.05) {
        distinct = false;
        break;
      }
    if (distinct) book.entries.push_back(cand);
  }
  return book;
}

}  // namespace pf
