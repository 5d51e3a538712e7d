#include "planeformer/geometry.hpp"

#include <cmath>

#include "planeformer/rng.hpp"

namespace pf {

Quat normalized(const Quat& q) {
  const double n = q.norm();
  if (n <= 0.0) throw std::invalid_argument("cannot normalize zero quaternion");
  // Bit-level idempotence: re-normalizing an already-unit quaternion must not
  // perturb it, so serialized poses reload exactly.
  if (std::abs(n - 1.0) < 1e-12) return q;
  return Quat(q.w / n, q.x / n, q.y / n, q.z / n);
}

Quat canonicalized(const Quat& q) {
  double sign = 1.0;
  if (q.w < 0.0) {
    sign = -1.0;
  } else if (q.w == 0.0) {
    if (q.x != 0.0) {
      sign = q.x > 0.0 ? 1.0 : -1.0;
    } else if (q.y != 0.0) {
      sign = q.y > 0.0 ? 1.0 : -1.0;
    } else {
      sign = q.z >= 0.0 ? 1.0 : -1.0;
    }
  }
  return Quat(sign * q.w, sign * q.x, sign * q.y, sign * q.z);
}

Quat quat_multiply(const Quat& a, const Quat& b) {
  return Quat(a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
              a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
              a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
              a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w);
}

Quat quat_conjugate(const Quat& q) { return Quat(q.w, -q.x, -q.y, -q.z); }

double quat_dot(const Quat& a, const Quat& b) {
  return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}

double quat_angle_deg(const Quat& a, const Quat& b) {
  // atan2 of the relative rotation keeps full precision near 0 and 180
  // degrees, where acos(dot) loses half the significant digits.
  const Quat rel = quat_multiply(quat_conjugate(b), a);
  const double vec = std::sqrt(rel.x * rel.x + rel.y * rel.y + rel.z * rel.z);
  return 2.0 * std::atan2(vec, std::abs(rel.w)) * 180.0 / M_PI;
}

Vec3 quat_rotate(const Quat& q, const Vec3& v) {
  // v' = v + 2 u x (u x v + w v), u = (x, y, z)
  const Vec3 u(q.x, q.y, q.z);
  const Vec3 uv = u.cross(v);
  return v + 2.0 * u.cross(uv + q.w * v);
}

Mat3 quat_to_rotmat(const Quat& q) {
  if (std::abs(q.norm() - 1.0) > 1e-6)
    throw std::invalid_argument("quat_to_rotmat: quaternion is not unit");
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

Quat rotmat_to_quat(const Mat3& r) {
  // Shepperd's method: pick the dominant diagonal combination.
  const double trace = r.trace();
  Quat q;
  if (trace > 0.0) {
    double s = std::sqrt(trace + 1.0) * 2.0;
    q.w = 0.25 * s;
    q.x = (r(2, 1) - r(1, 2)) / s;
    q.y = (r(0, 2) - r(2, 0)) / s;
    q.z = (r(1, 0) - r(0, 1)) / s;
  } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2.0;
    q.w = (r(2, 1) - r(1, 2)) / s;
    q.x = 0.25 * s;
    q.y = (r(0, 1) + r(1, 0)) / s;
    q.z = (r(0, 2) + r(2, 0)) / s;
  } else if (r(1, 1) > r(2, 2)) {
    double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2.0;
    q.w = (r(0, 2) - r(2, 0)) / s;
    q.x = (r(0, 1) + r(1, 0)) / s;
    q.y = 0.25 * s;
    q.z = (r(1, 2) + r(2, 1)) / s;
  } else {
    double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2.0;
    q.w = (r(1, 0) - r(0, 1)) / s;
    q.x = (r(0, 2) + r(2, 0)) / s;
    q.y = (r(1, 2) + r(2, 1)) / s;
    q.z = 0.25 * s;
  }
  return canonicalized(normalized(q));
}

Pose compose_pose(const Pose& a, const Pose& b) {
  return Pose(quat_multiply(a.q, b.q), quat_rotate(a.q, b.t) + a.t);
}

Pose invert_pose(const Pose& p) {
  const Quat qi = quat_conjugate(p.q);
  return Pose(qi, -quat_rotate(qi, p.t));
}

double pose_translation_distance(const Pose& a, const Pose& b) {
  return (a.t - b.t).norm();
}

std::pair<double, double> pose_error(const Pose& pred, const Pose& gt) {
  return {quat_angle_deg(pred.q, gt.q), pose_translation_distance(pred, gt)};
}

Plane::Plane(const Vec3& n_, double o_) {
  const double len = n_.norm();
  if (len <= 0.0) throw std::invalid_argument("plane normal must be nonzero");
  // n.x = o is scale-invariant: normalize both sides together. Unit normals
  // pass through untouched so reloaded planes stay bit-identical.
  if (std::abs(len - 1.0) < 1e-12) {
    n = n_;
    o = o_;
  } else {
    n = n_ / len;
    o = o_ / len;
  }
  if (o < 0.0) {
    n = -n;
    o = -o;
  }
}

Plane transform_plane(const Plane& plane, const Pose& pose) {
  Plane out;
  out.n = quat_rotate(pose.q, plane.n);
  out.o = plane.o + out.n.dot(pose.t);
  if (out.o < 0.0) {
    out.n = -out.n;
    out.o = -out.o;
  }
  return out;
}

Mat3 Intrinsics::matrix() const {
  Mat3 k;
  k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return k;
}

Mat3 Intrinsics::inverse_matrix() const {
  Mat3 ki;
  ki << 1.0 / fx, 0, -cx / fx, 0, 1.0 / fy, -cy / fy, 0, 0, 1;
  return ki;
}

Homography plane_homography(const Pose& rel_pose, const Plane& plane,
                            const Intrinsics& k_src, const Intrinsics& k_dst) {
  constexpr double kMinOffset = 1e-9;
  if (plane.o <= kMinOffset)
    throw DegeneratePlaneError("plane_homography: plane offset at or below tolerance");
  const Mat3 r = quat_to_rotmat(rel_pose.q);
  const Mat3 h_cam = r + rel_pose.t * plane.n.transpose() / plane.o;
  Homography h;
  h.h = k_dst.matrix() * h_cam * k_src.inverse_matrix();
  return h;
}

double codebook_distance(const Pose& a, const Pose& b) {
  return quat_angle_deg(a.q, b.q) / 30.0 + pose_translation_distance(a, b);
}

int nearest_codebook_entry(const Pose& pose, const CameraCodebook& codebook) {
  if (codebook.entries.empty())
    throw std::invalid_argument("nearest_codebook_entry: empty codebook");
  int best = 0;
  double best_d = codebook_distance(pose, codebook.entries[0]);
  for (std::size_t k = 1; k < codebook.entries.size(); ++k) {
    const double d = codebook_distance(pose, codebook.entries[k]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}


Vec3 normal3(Rng& rng) { return Vec3(rng.normal(), rng.normal(), rng.normal()); }

Vec3 random_unit_vector(Rng& rng) {
  for (;;) {
    Vec3 v = normal3(rng);
    const double n = v.norm();
    if (n > 1e-6) return v / n;
  }
}

Quat random_unit_quat(Rng& rng) {
  for (;;) {
    Quat q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    if (q.norm() > 1e-6) return canonicalized(normalized(q));
  }
}

Pose random_pose(Rng& rng, double t_scale) {
  return Pose(random_unit_quat(rng), normal3(rng) * t_scale);
}

}  // namespace pf
