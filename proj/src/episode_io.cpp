#include "planeformer/episode_io.hpp"

#include <fstream>
#include <sstream>

namespace pf {

namespace {

std::vector<double> to_vector(const Eigen::VectorXd& v) {
  return {v.data(), v.data() + v.size()};
}

Eigen::VectorXd from_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Json mask_to_json(const Mask& m) {
  return Json{{"size", {m.height(), m.width()}}, {"counts", m.rle_counts()}};
}

Mask mask_from_json(const Json& j) {
  const auto& size = j.at("size");
  return Mask::from_rle(size.at(0).get<int>(), size.at(1).get<int>(),
                        j.at("counts").get<std::vector<std::int64_t>>());
}

}  // namespace

Json pose_to_json(const Pose& p) {
  return Json{{"q", {p.q.w, p.q.x, p.q.y, p.q.z}}, {"t", {p.t.x(), p.t.y(), p.t.z()}}};
}

Pose pose_from_json(const Json& j) {
  const auto& q = j.at("q");
  const auto& t = j.at("t");
  if (q.size() != 4 || t.size() != 3)
    throw EpisodeParseError("pose requires 4-element q and 3-element t");
  return Pose(Quat(q.at(0), q.at(1), q.at(2), q.at(3)), Vec3(t.at(0), t.at(1), t.at(2)));
}

Json plane_to_json(const Plane& p) {
  return Json{{"n", {p.n.x(), p.n.y(), p.n.z()}}, {"o", p.o}};
}

Plane plane_from_json(const Json& j) {
  const auto& n = j.at("n");
  if (n.size() != 3) throw EpisodeParseError("plane normal must have 3 elements");
  return Plane(Vec3(n.at(0), n.at(1), n.at(2)), j.at("o").get<double>());
}

Json intrinsics_to_json(const Intrinsics& k) {
  return Json{{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx},
              {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

Intrinsics intrinsics_from_json(const Json& j) {
  Intrinsics k;
  k.fx = j.at("fx");
  k.fy = j.at("fy");
  k.cx = j.at("cx");
  k.cy = j.at("cy");
  k.width = j.at("width");
  k.height = j.at("height");
  if (!k.valid()) throw EpisodeParseError("invalid intrinsics");
  return k;
}

Json codebook_to_json(const CameraCodebook& book) {
  Json arr = Json::array();
  for (const Pose& p : book.entries) arr.push_back(pose_to_json(p));
  return arr;
}

CameraCodebook codebook_from_json(const Json& j) {
  CameraCodebook book;
  for (const auto& e : j) book.entries.push_back(pose_from_json(e));
  return book;
}

std::string serialize_episode(const Episode& e) {
  Json j;
  j["seed"] = e.seed;
  j["d_app"] = e.d_app;
  j["intrinsics"] = intrinsics_to_json(e.intrinsics);
  Json views = Json::array();
  for (const ViewData& v : e.views) {
    Json dets = Json::array();
    for (const PlaneDetection& d : v.detections) {
      Json dj;
      dj["mask"] = mask_to_json(d.mask);
      dj["plane"] = plane_to_json(d.plane);
      dj["embedding"] = to_vector(d.embedding);
      if (d.gt_plane_id)
        dj["gt_plane_id"] = *d.gt_plane_id;
      else
        dj["gt_plane_id"] = nullptr;
      dj["confidence"] = d.confidence;
      dets.push_back(std::move(dj));
    }
    views.push_back(Json{{"cam_to_world", pose_to_json(v.cam_to_world)},
                         {"detections", std::move(dets)}});
  }
  j["views"] = std::move(views);
  Json pairs = Json::array();
  for (const PairData& p : e.pairs) {
    Json pj;
    pj["a"] = p.view_a;
    pj["b"] = p.view_b;
    pj["gt_rel"] = pose_to_json(p.gt_rel);
    Json matches = Json::array();
    for (const auto& [i, k] : p.gt_matches) matches.push_back({i, k});
    pj["matches"] = std::move(matches);
    Json stub = Json::array();
    for (const StubEntry& s : p.stub) stub.push_back(Json{{"k", s.codebook_index}, {"p", s.prob}});
    pj["stub"] = std::move(stub);
    pairs.push_back(std::move(pj));
  }
  j["pairs"] = std::move(pairs);
  return j.dump();
}

Episode deserialize_episode(const std::string& line, std::size_t base_offset) {
  Json j;
  try {
    j = Json::parse(line);
  } catch (const Json::parse_error& err) {
    std::ostringstream oss;
    oss << "episode parse error at byte " << (base_offset + err.byte) << ": " << err.what();
    throw EpisodeParseError(oss.str());
  }
  try {
    Episode e;
    e.seed = j.at("seed").get<std::uint64_t>();
    e.d_app = j.at("d_app").get<int>();
    e.intrinsics = intrinsics_from_json(j.at("intrinsics"));
    for (const auto& vj : j.at("views")) {
      ViewData v;
      v.cam_to_world = pose_from_json(vj.at("cam_to_world"));
      for (const auto& dj : vj.at("detections")) {
        PlaneDetection d;
        d.mask = mask_from_json(dj.at("mask"));
        d.plane = plane_from_json(dj.at("plane"));
        d.embedding = from_vector(dj.at("embedding").get<std::vector<double>>());
        if (static_cast<int>(d.embedding.size()) != e.d_app)
          throw EpisodeParseError("embedding length disagrees with d_app");
        if (!dj.at("gt_plane_id").is_null()) d.gt_plane_id = dj.at("gt_plane_id").get<int>();
        d.confidence = dj.at("confidence");
        v.detections.push_back(std::move(d));
      }
      e.views.push_back(std::move(v));
    }
    for (const auto& pj : j.at("pairs")) {
      PairData p;
      p.view_a = pj.at("a");
      p.view_b = pj.at("b");
      const int n = static_cast<int>(e.views.size());
      if (p.view_a < 0 || p.view_a >= n || p.view_b < 0 || p.view_b >= n || p.view_a == p.view_b)
        throw EpisodeParseError("pair references a missing view");
      p.gt_rel = pose_from_json(pj.at("gt_rel"));
      for (const auto& mj : pj.at("matches")) {
        if (mj.size() != 2) throw EpisodeParseError("match must be a 2-element pair");
        p.gt_matches.emplace_back(mj.at(0).get<int>(), mj.at(1).get<int>());
      }
      for (const auto& sj : pj.at("stub"))
        p.stub.push_back(StubEntry{sj.at("k").get<int>(), sj.at("p").get<double>()});
      e.pairs.push_back(std::move(p));
    }
    return e;
  } catch (const EpisodeParseError&) {
    throw;
  } catch (const Json::exception& err) {
    std::ostringstream oss;
    oss << "episode schema error near byte " << base_offset << ": " << err.what();
    throw EpisodeParseError(oss.str());
  }
}

void save_episodes(const std::string& path, const std::vector<Episode>& episodes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const Episode& e : episodes) out << serialize_episode(e) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<Episode> load_episodes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<Episode> episodes;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    const std::size_t line_start = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    episodes.push_back(deserialize_episode(line, line_start));
  }
  return episodes;
}

void save_manifest(const std::string& path, const Json& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << manifest.dump(2) << '\n';
}

Json load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& err) {
    throw EpisodeParseError(std::string("manifest parse error: ") + err.what());
  }
}

namespace {

bool poses_equal(const Pose& a, const Pose& b) {
  return a.q.w == b.q.w && a.q.x == b.q.x && a.q.y == b.q.y && a.q.z == b.q.z &&
         (a.t.array() == b.t.array()).all();
}

}  // namespace

bool episodes_equal(const Episode& a, const Episode& b) {
  if (a.seed != b.seed || a.d_app != b.d_app) return false;
  const Intrinsics &ka = a.intrinsics, &kb = b.intrinsics;
  if (ka.fx != kb.fx || ka.fy != kb.fy || ka.cx != kb.cx || ka.cy != kb.cy ||
      ka.width != kb.width || ka.height != kb.height)
    return false;
  if (a.views.size() != b.views.size() || a.pairs.size() != b.pairs.size()) return false;
  for (std::size_t v = 0; v < a.views.size(); ++v) {
    const ViewData &va = a.views[v], &vb = b.views[v];
    if (!poses_equal(va.cam_to_world, vb.cam_to_world)) return false;
    if (va.detections.size() != vb.detections.size()) return false;
    for (std::size_t d = 0; d < va.detections.size(); ++d) {
      const PlaneDetection &da = va.detections[d], &db = vb.detections[d];
      if (!(da.mask == db.mask)) return false;
      if (!(da.plane.n.array() == db.plane.n.array()).all() || da.plane.o != db.plane.o)
        return false;
      if (da.embedding.size() != db.embedding.size() ||
          !(da.embedding.array() == db.embedding.array()).all())
        return false;
      if (da.gt_plane_id != db.gt_plane_id || da.confidence != db.confidence) return false;
    }
  }
  for (std::size_t p = 0; p < a.pairs.size(); ++p) {
    const PairData &pa = a.pairs[p], &pb = b.pairs[p];
    if (pa.view_a != pb.view_a || pa.view_b != pb.view_b) return false;
    if (!poses_equal(pa.gt_rel, pb.gt_rel)) return false;
    if (pa.gt_matches != pb.gt_matches) return false;
    if (pa.stub.size() != pb.stub.size()) return false;
    for (std::size_t s = 0; s < pa.stub.size(); ++s)
      if (pa.stub[s].codebook_index != pb.stub[s].codebook_index ||
          pa.stub[s].prob != pb.stub[s].prob)
        return false;
  }
  return true;
}

}  // namespace pf
