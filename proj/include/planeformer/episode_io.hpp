#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "planeformer/synth.hpp"

namespace pf {

struct EpisodeParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Json = nlohmann::json;

// Pose <-> {"q":[w,x,y,z],"t":[x,y,z]}; Plane <-> {"n":[nx,ny,nz],"o":o}.
Json pose_to_json(const Pose& p);
Pose pose_from_json(const Json& j);
Json plane_to_json(const Plane& p);
Plane plane_from_json(const Json& j);
Json intrinsics_to_json(const Intrinsics& k);
Intrinsics intrinsics_from_json(const Json& j);
Json codebook_to_json(const CameraCodebook& book);
CameraCodebook codebook_from_json(const Json& j);

// One episode as a single-line JSON object; masks are RLE
// {"size":[H,W],"counts":[...]}.
std::string serialize_episode(const Episode& e);
// Throws EpisodeParseError (message includes the byte offset within `line`,
// shifted by `base_offset`) on malformed input.
Episode deserialize_episode(const std::string& line, std::size_t base_offset = 0);

// episodes.jsonl: one episode per line.
void save_episodes(const std::string& path, const std::vector<Episode>& episodes);
std::vector<Episode> load_episodes(const std::string& path);

void save_manifest(const std::string& path, const Json& manifest);
Json load_manifest(const std::string& path);

bool episodes_equal(const Episode& a, const Episode& b);

}  // namespace pf
