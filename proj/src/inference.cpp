#include "planeformer/inference.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <numeric>

#include "planeformer/hungarian.hpp"

namespace pf {

Pose apply_residual(const Pose& hyp, const Eigen::Vector4d& delta_q,
                    const Vec3& delta_t) {
  if (delta_q.norm() <= 1e-6)
    throw DegenerateResidualError("apply_residual: rotation residual is numerically zero");
  const Quat dq =
      normalized(Quat(delta_q(0), delta_q(1), delta_q(2), delta_q(3)));
  return Pose(quat_multiply(dq, hyp.q), hyp.t + delta_t);
}

std::vector<MatchEdge> match_planes(const Mat& pi, double tau) {
  const int m1 = static_cast<int>(pi.rows());
  const int m2 = static_cast<int>(pi.cols());
  if (m1 == 0 || m2 == 0) return {};
  const std::vector<int> col_of_row = solve_assignment_rect(Mat::Ones(m1, m2) - pi);
  std::vector<MatchEdge> matches;
  for (int i = 0; i < m1; ++i) {
    const int j = col_of_row[i];
    if (j >= 0 && j < m2 && pi(i, j) >= tau)
      matches.push_back({i, j, pi(i, j)});
  }
  return matches;
}

PairResult score_hypotheses(const PlaneFormer& model,
                            const std::vector<PlaneDetection>& dets1,
                            const std::vector<PlaneDetection>& dets2,
                            const std::vector<StubEntry>& stub,
                            const CameraCodebook& codebook,
                            const Intrinsics& k1, const Intrinsics& k2,
                            const InferenceConfig& cfg) {
  if (cfg.h < 1) throw std::invalid_argument("score_hypotheses: h must be >= 1");
  if (stub.empty()) throw std::invalid_argument("score_hypotheses: empty hypothesis ranking");
  const int h = std::min<int>(cfg.h, static_cast<int>(stub.size()));

  PairResult r;
  PlaneFormerOutputs best;
  double best_c = -std::numeric_limits<double>::infinity();
  for (int rank = 0; rank < h; ++rank) {
    const int idx = stub[rank].codebook_index;
    const TokenBatch batch =
        assemble_tokens(dets1, dets2, codebook.entries[idx], k1, k2,
                        model.config().token_config());
    const PlaneFormerOutputs out = model.forward(batch, false, nullptr);
    r.c_scores.push_back(out.c);
    if (out.c > best_c) {  // strict: ties keep the lower stub rank
      best_c = out.c;
      r.selected_rank = rank;
      r.selected_index = idx;
      best = out;
    }
  }

  r.selected_pose = codebook.entries[r.selected_index];
  r.pi = best.pi;
  r.delta_q = best.delta_q;
  r.delta_t = best.delta_t;
  r.has_residual = best.has_residual;
  r.refined = (best.has_residual && best.delta_q.norm() > 1e-6)
                  ? apply_residual(r.selected_pose, best.delta_q, best.delta_t)
                  : r.selected_pose;
  r.matches = match_planes(best.pi, cfg.tau);
  return r;
}

double visibility_score(const std::vector<PlaneDetection>& dets_a,
                        const std::vector<PlaneDetection>& dets_b,
                        double sigma) {
  if (dets_a.empty() || dets_b.empty())
    throw std::invalid_argument("visibility_score: empty detection list");
  if (sigma <= 0.0) throw std::invalid_argument("visibility_score: sigma must be positive");
  auto directional = [&](const std::vector<PlaneDetection>& from,
                         const std::vector<PlaneDetection>& to) {
    double total = 0.0;
    for (const PlaneDetection& f : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const PlaneDetection& t : to)
        best = std::min(best, (f.embedding - t.embedding).norm());
      total += std::exp(-best * best / (sigma * sigma));
    }
    return total;
  };
  return directional(dets_a, dets_b) + directional(dets_b, dets_a);
}

namespace {

// Union-find with path halving.
struct DisjointSets {
  std::vector<int> parent;
  explicit DisjointSets(int n) : parent(n) {
    std::iota(parent.begin(), parent.end(), 0);
  }
  int find(int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (a > b) std::swap(a, b);  // keep the smaller index as root
    parent[b] = a;
    return true;
  }
};

}  // namespace

ViewGraph build_view_graph(const Episode& episode, double sigma) {
  const int n = static_cast<int>(episode.views.size());
  if (n < 2) throw std::invalid_argument("build_view_graph: need at least two views");

  std::vector<ViewGraphEdge> candidates;
  std::vector<double> incident(n, 0.0);
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      const double s = visibility_score(episode.views[a].detections,
                                        episode.views[b].detections, sigma);
      candidates.push_back({a, b, s});
      incident[a] += s;
      incident[b] += s;
    }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const ViewGraphEdge& x, const ViewGraphEdge& y) {
                     return x.score > y.score;
                   });

  ViewGraph graph;
  graph.n_views = n;
  DisjointSets sets(n);
  for (const ViewGraphEdge& e : candidates)
    if (sets.unite(e.a, e.b)) graph.edges.push_back(e);

  graph.root = 0;
  for (int v = 1; v < n; ++v)
    if (incident[v] > incident[graph.root]) graph.root = v;
  return graph;
}

ChainResult chain_to_global(const ViewGraph& graph,
                            const std::vector<PairResult>& edge_results,
                            const std::vector<int>& dets_per_view) {
  const int n = graph.n_views;
  if (static_cast<int>(edge_results.size()) != static_cast<int>(graph.edges.size()))
    throw std::invalid_argument("chain_to_global: one pair result per edge required");
  if (static_cast<int>(dets_per_view.size()) != n)
    throw std::invalid_argument("chain_to_global: detection counts must cover every view");

  // Adjacency: (neighbor, edge index).
  std::vector<std::vector<std::pair<int, int>>> adj(n);
  for (std::size_t e = 0; e < graph.edges.size(); ++e) {
    adj[graph.edges[e].a].push_back({graph.edges[e].b, static_cast<int>(e)});
    adj[graph.edges[e].b].push_back({graph.edges[e].a, static_cast<int>(e)});
  }
  for (auto& list : adj) std::sort(list.begin(), list.end());

  ChainResult chain;
  chain.view_to_global.assign(n, Pose::identity());
  std::vector<bool> seen(n, false);
  std::deque<int> queue{graph.root};
  seen[graph.root] = true;
  int reached = 1;
  while (!queue.empty()) {
    const int i = queue.front();
    queue.pop_front();
    for (const auto& [j, e] : adj[i]) {
      if (seen[j]) continue;
      const PairResult& pr = edge_results[e];
      // pr.refined maps view_a coordinates into view_b's frame.
      const Pose& rel = pr.refined;
      if (pr.view_a == j && pr.view_b == i)
        chain.view_to_global[j] = compose_pose(chain.view_to_global[i], rel);
      else if (pr.view_a == i && pr.view_b == j)
        chain.view_to_global[j] =
            compose_pose(chain.view_to_global[i], invert_pose(rel));
      else
        throw std::invalid_argument("chain_to_global: pair result does not match its edge");
      seen[j] = true;
      ++reached;
      queue.push_back(j);
    }
  }
  if (reached != n)
    throw std::invalid_argument("chain_to_global: view graph is not connected");

  // Global detection indices, then union-find over every edge's matches.
  std::vector<int> offset(n + 1, 0);
  for (int v = 0; v < n; ++v) offset[v + 1] = offset[v] + dets_per_view[v];
  DisjointSets sets(offset[n]);
  for (std::size_t e = 0; e < graph.edges.size(); ++e) {
    const PairResult& pr = edge_results[e];
    for (const MatchEdge& m : pr.matches)
      sets.unite(offset[pr.view_a] + m.j1, offset[pr.view_b] + m.j2);
  }

  // Canonical labels: groups numbered by their smallest member.
  std::vector<int> label(offset[n], -1);
  chain.group_of.assign(n, {});
  int next = 0;
  for (int v = 0; v < n; ++v) {
    chain.group_of[v].resize(dets_per_view[v]);
    for (int d = 0; d < dets_per_view[v]; ++d) {
      const int root = sets.find(offset[v] + d);
      if (label[root] < 0) label[root] = next++;
      chain.group_of[v][d] = label[root];
    }
  }
  chain.n_groups = next;
  return chain;
}

GlobalScene fuse_planes(const std::vector<ViewData>& views,
                        const ChainResult& chain) {
  GlobalScene scene;
  scene.view_poses = chain.view_to_global;
  scene.detection_to_plane = chain.group_of;
  scene.planes.resize(chain.n_groups);

  for (std::size_t v = 0; v < views.size(); ++v)
    for (std::size_t d = 0; d < views[v].detections.size(); ++d)
      scene.planes[chain.group_of[v][d]].members.push_back(
          {static_cast<int>(v), static_cast<int>(d)});

  for (GlobalPlane& group : scene.planes) {
    Vec3 sum = Vec3::Zero();
    double weight_sum = 0.0;
    double best_area = -1.0;
    Plane largest;
    for (const auto& [v, d] : group.members) {
      const PlaneDetection& det = views[v].detections[d];
      const Plane global = transform_plane(det.plane, chain.view_to_global[v]);
      const double w = static_cast<double>(det.mask.count());
      sum += w * global.o * global.n;
      weight_sum += w;
      group.confidence = std::max(group.confidence, det.confidence);
      if (w > best_area) {
        best_area = w;
        largest = global;
      }
    }
    const Vec3 avg = weight_sum > 0.0 ? Vec3(sum / weight_sum) : sum;
    if (avg.norm() < 1e-9) {
      group.plane = largest;
      group.degenerate = true;
    } else {
      group.plane = Plane(avg.normalized(), avg.norm());
    }
  }
  return scene;
}

GlobalScene reconstruct_scene(const PlaneFormer& model, const Episode& episode,
                              const CameraCodebook& codebook,
                              const InferenceConfig& cfg) {
  const ViewGraph graph = build_view_graph(episode, cfg.sigma);
  std::vector<PairResult> results;
  results.reserve(graph.edges.size());
  for (const ViewGraphEdge& e : graph.edges) {
    const PairData& pd = episode.pair(e.a, e.b);
    PairResult r = score_hypotheses(
        model, episode.views[e.a].detections, episode.views[e.b].detections,
        pd.stub, codebook, episode.intrinsics, episode.intrinsics, cfg);
    r.view_a = e.a;
    r.view_b = e.b;
    results.push_back(std::move(r));
  }
  std::vector<int> dets_per_view;
  for (const ViewData& view : episode.views)
    dets_per_view.push_back(static_cast<int>(view.detections.size()));
  ChainResult chain = chain_to_global(graph, results, dets_per_view);
  GlobalScene scene = fuse_planes(episode.views, chain);
  scene.root = graph.root;
  return scene;
}

// ---------------------------------------------------------------------------

namespace {

// Andrew's monotone chain; returns hull point indices in CCW order.
std::vector<int> convex_hull(const std::vector<Eigen::Vector2d>& pts) {
  const int n = static_cast<int>(pts.size());
  if (n < 3) return {};
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    return pts[i].x() < pts[j].x() ||
           (pts[i].x() == pts[j].x() && pts[i].y() < pts[j].y());
  });
  auto cross = [&](int o, int a, int b) {
    return (pts[a].x() - pts[o].x()) * (pts[b].y() - pts[o].y()) -
           (pts[a].y() - pts[o].y()) * (pts[b].x() - pts[o].x());
  };
  std::vector<int> hull(2 * n);
  int k = 0;
  for (int idx = 0; idx < n; ++idx) {
    const int i = order[idx];
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], i) <= 0) --k;
    hull[k++] = i;
  }
  const int lower = k + 1;
  for (int idx = n - 2; idx >= 0; --idx) {
    const int i = order[idx];
    while (k >= lower && cross(hull[k - 2], hull[k - 1], i) <= 0) --k;
    hull[k++] = i;
  }
  hull.resize(k - 1);
  return hull.size() >= 3 ? hull : std::vector<int>{};
}

void palette_color(int id, int& r, int& g, int& b) {
  const double hue = std::fmod(0.12 + id * 0.61803398875, 1.0) * 6.0;
  const double s = 0.65, v = 0.95;
  const int sector = static_cast<int>(hue);
  const double f = hue - sector;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  double rd, gd, bd;
  switch (sector % 6) {
    case 0: rd = v; gd = t; bd = p; break;
    case 1: rd = q; gd = v; bd = p; break;
    case 2: rd = p; gd = v; bd = t; break;
    case 3: rd = p; gd = q; bd = v; break;
    case 4: rd = t; gd = p; bd = v; break;
    default: rd = v; gd = p; bd = q; break;
  }
  r = static_cast<int>(rd * 255);
  g = static_cast<int>(gd * 255);
  b = static_cast<int>(bd * 255);
}

}  // namespace

void export_scene(const GlobalScene& scene, const std::vector<ViewData>& views,
                  const Intrinsics& k, const std::string& path) {
  struct Face {
    std::vector<Vec3> verts;
    int r, g, b;
  };
  std::vector<Face> faces;

  for (std::size_t gid = 0; gid < scene.planes.size(); ++gid) {
    const GlobalPlane& group = scene.planes[gid];
    const Vec3& n = group.plane.n;
    // Orthonormal basis in the plane.
    Vec3 seed = std::abs(n.z()) < 0.9 ? Vec3(0, 0, 1) : Vec3(1, 0, 0);
    const Vec3 e1 = n.cross(seed).normalized();
    const Vec3 e2 = n.cross(e1);
    const Vec3 origin = group.plane.o * n;

    std::vector<Eigen::Vector2d> uv;
    std::vector<Vec3> pts;
    for (const auto& [v, d] : group.members) {
      const PlaneDetection& det = views[v].detections[d];
      const Pose& g = scene.view_poses[v];
      for (int y = 0; y < det.mask.height(); ++y)
        for (int x = 0; x < det.mask.width(); ++x) {
          if (!det.mask.get(y, x)) continue;
          const Vec3 dir((x + 0.5 - k.cx) / k.fx, (y + 0.5 - k.cy) / k.fy, 1.0);
          const double denom = det.plane.n.dot(dir);
          if (std::abs(denom) < 1e-9) continue;
          const double t = det.plane.o / denom;
          if (t <= 0.0) continue;
          Vec3 p = g.apply(t * dir);
          p -= (n.dot(p) - group.plane.o) * n;  // snap onto the fused plane
          uv.push_back({e1.dot(p - origin), e2.dot(p - origin)});
          pts.push_back(p);
        }
    }
    const std::vector<int> hull = convex_hull(uv);
    if (hull.empty()) continue;
    Face face;
    for (int idx : hull) face.verts.push_back(pts[idx]);
    palette_color(static_cast<int>(gid), face.r, face.g, face.b);
    faces.push_back(std::move(face));
  }

  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_scene: cannot write " + path);
  std::size_t n_verts = 0;
  for (const Face& f : faces) n_verts += f.verts.size();
  out << "ply\nformat ascii 1.0\n";
  out << "element vertex " << n_verts << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "element face " << faces.size() << "\n";
  out << "property list uchar int vertex_indices\nend_header\n";
  out.precision(17);
  for (const Face& f : faces)
    for (const Vec3& p : f.verts)
      out << p.x() << " " << p.y() << " " << p.z() << " " << f.r << " " << f.g
          << " " << f.b << "\n";
  std::size_t base = 0;
  for (const Face& f : faces) {
    out << f.verts.size();
    for (std::size_t i = 0; i < f.verts.size(); ++i) out << " " << (base + i);
    out << "\n";
    base += f.verts.size();
  }
  if (!out.good()) throw std::runtime_error("export_scene: write failed for " + path);
}

// ---------------------------------------------------------------------------

Json pair_result_to_json(const PairResult& r) {
  Json matches = Json::array();
  for (const MatchEdge& m : r.matches)
    matches.push_back({m.j1, m.j2, m.score});
  return {{"view_a", r.view_a},
          {"view_b", r.view_b},
          {"selected_index", r.selected_index},
          {"selected_rank", r.selected_rank},
          {"selected_pose", pose_to_json(r.selected_pose)},
          {"refined", pose_to_json(r.refined)},
          {"matches", matches},
          {"c_scores", r.c_scores},
          {"delta_q", {r.delta_q(0), r.delta_q(1), r.delta_q(2), r.delta_q(3)}},
          {"delta_t", {r.delta_t.x(), r.delta_t.y(), r.delta_t.z()}},
          {"has_residual", r.has_residual}};
}

PairResult pair_result_from_json(const Json& j) {
  PairResult r;
  r.view_a = j.at("view_a").get<int>();
  r.view_b = j.at("view_b").get<int>();
  r.selected_index = j.at("selected_index").get<int>();
  r.selected_rank = j.at("selected_rank").get<int>();
  r.selected_pose = pose_from_json(j.at("selected_pose"));
  r.refined = pose_from_json(j.at("refined"));
  for (const auto& m : j.at("matches"))
    r.matches.push_back({m.at(0).get<int>(), m.at(1).get<int>(), m.at(2).get<double>()});
  r.c_scores = j.at("c_scores").get<std::vector<double>>();
  for (int i = 0; i < 4; ++i) r.delta_q(i) = j.at("delta_q").at(i).get<double>();
  for (int i = 0; i < 3; ++i) r.delta_t(i) = j.at("delta_t").at(i).get<double>();
  r.has_residual = j.at("has_residual").get<bool>();
  return r;
}

}  // namespace pf
