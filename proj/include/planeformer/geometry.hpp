#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

namespace pf {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;

struct DegeneratePlaneError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Unit quaternion stored as (w, x, y, z), sign-canonicalized to w >= 0.
struct Quat {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  Quat() = default;
  Quat(double w_, double x_, double y_, double z_) : w(w_), x(x_), y(y_), z(z_) {}

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  Vec4 coeffs() const { return Vec4(w, x, y, z); }

  static Quat identity() { return Quat(); }
};

Quat normalized(const Quat& q);
// Flips sign so w >= 0; a zero-w quaternion is flipped so its first nonzero
// vector component is positive.
Quat canonicalized(const Quat& q);
Quat quat_multiply(const Quat& a, const Quat& b);
Quat quat_conjugate(const Quat& q);
double quat_dot(const Quat& a, const Quat& b);
// Geodesic angle between the rotations encoded by two unit quaternions, degrees in [0, 180].
double quat_angle_deg(const Quat& a, const Quat& b);
Vec3 quat_rotate(const Quat& q, const Vec3& v);

// Rigid transform x -> R(q) x + t. Also the codebook entry type.
struct Pose {
  Quat q;
  Vec3 t = Vec3::Zero();

  Pose() = default;
  Pose(const Quat& q_, const Vec3& t_) : q(canonicalized(normalized(q_))), t(t_) {}

  Vec3 apply(const Vec3& p) const { return quat_rotate(q, p) + t; }

  static Pose identity() { return Pose(); }
};

// q must be unit within 1e-6.
Mat3 quat_to_rotmat(const Quat& q);
// Inverse of quat_to_rotmat; result is sign-canonical. R must be a rotation.
Quat rotmat_to_quat(const Mat3& r);

// Applying the result is applying b then a: x -> R_a (R_b x + t_b) + t_a.
Pose compose_pose(const Pose& a, const Pose& b);
Pose invert_pose(const Pose& p);
double pose_translation_distance(const Pose& a, const Pose& b);
// (rotation geodesic in degrees, translation distance in meters).
std::pair<double, double> pose_error(const Pose& pred, const Pose& gt);

// Plane n.x - o = 0 with unit n, canonicalized to o >= 0.
struct Plane {
  Vec3 n = Vec3::UnitZ();
  double o = 1.0;

  Plane() = default;
  Plane(const Vec3& n_, double o_);
};

// Maps a plane given in the source frame of `pose` into its target frame.
Plane transform_plane(const Plane& plane, const Pose& pose);

struct Intrinsics {
  double fx = 517.0, fy = 517.0;
  double cx = 320.0, cy = 240.0;
  int width = 640, height = 480;

  Mat3 matrix() const;
  Mat3 inverse_matrix() const;
  bool valid() const {
    return fx > 0 && fy > 0 && cx > 0 && cx < width && cy > 0 && cy < height;
  }
};

// 3x3 projective map, scale-free.
struct Homography {
  Mat3 h = Mat3::Identity();
};

// Plane-induced homography in pixel coordinates: K_dst (R + t n^T / o) K_src^-1.
// rel_pose maps source-camera coordinates into destination-camera coordinates
// and the plane is expressed in the source camera frame. Throws
// DegeneratePlaneError when the plane offset is at or below tolerance.
Homography plane_homography(const Pose& rel_pose, const Plane& plane,
                            const Intrinsics& k_src, const Intrinsics& k_dst);

struct CameraCodebook {
  std::vector<Pose> entries;

  std::size_t size() const { return entries.size(); }
  const Pose& operator[](std::size_t k) const { return entries[k]; }
};

// Rotation/translation are mixed at 30 degrees per meter; ties break low.
double codebook_distance(const Pose& a, const Pose& b);
int nearest_codebook_entry(const Pose& pose, const CameraCodebook& codebook);

class Rng;

// Sampling helpers shared by the data generator and tests.
Vec3 normal3(Rng& rng);
Vec3 random_unit_vector(Rng& rng);
Quat random_unit_quat(Rng& rng);
// Rotation uniform on SO(3); translation is isotropic normal scaled by t_scale.
Pose random_pose(Rng& rng, double t_scale = 1.0);

}  // namespace pf
