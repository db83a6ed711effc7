// Rigid-body math on SO(3)/SE(3) and the calibration error metrics.
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <stdexcept>
#include <string>

namespace dlc {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

/// Raised by log_se3 when the rotation angle is too close to pi for a
/// well-conditioned logarithm.
class AngleNearPi : public std::runtime_error {
 public:
  explicit AngleNearPi(double angle);
  double angle() const { return angle_; }

 private:
  double angle_;
};

/// Rigid transform: x -> rotation * x + translation.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }
  static Pose from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }
  static Pose from_matrix(const Mat4& m);

  Mat4 matrix() const;
  Pose inverse() const;
  Pose operator*(const Pose& rhs) const;
  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }

  /// Frobenius deviation from orthonormality and |det - 1| both below tol.
  bool is_valid(double tol = 1e-9) const;
};

/// Tangent vector of SE(3), ordered (rotation, translation).
struct Twist {
  Vec3 rot = Vec3::Zero();
  Vec3 trans = Vec3::Zero();

  static Twist from_vector(const Vec6& v) { return {v.head<3>(), v.tail<3>()}; }
  Vec6 vector() const {
    Vec6 v;
    v << rot, trans;
    return v;
  }
  Twist operator*(double s) const { return {rot * s, trans * s}; }
};

/// Roll/pitch/yaw in radians; rotation = Rz(yaw) * Ry(pitch) * Rx(roll).
struct EulerZYX {
  double roll = 0.0;
  double pitch = 0.0;
  double yaw = 0.0;
};

struct EulerExtraction {
  EulerZYX angles;
  bool gimbal_lock = false;
};

Mat3 skew(const Vec3& v);
Vec3 vee(const Mat3& m);

Mat3 exp_so3(const Vec3& omega);
/// Rotation vector of r; throws AngleNearPi when the angle is >= pi - 1e-6.
Vec3 log_so3(const Mat3& r);
/// Rotation angle in [0, pi], computed stably for both small and large angles.
double rotation_angle(const Mat3& r);

Pose exp_se3(const Twist& xi);
Twist log_se3(const Pose& p);

inline Pose compose(const Pose& a, const Pose& b) { return a * b; }
inline Pose inverse(const Pose& a) { return a.inverse(); }
inline Vec3 apply(const Pose& a, const Vec3& p) { return a * p; }

/// Constant-twist interpolation: a * exp(s * log(a^-1 b)).
Pose interpolate(const Pose& a, const Pose& b, double s);

Mat3 rot_x(double angle);
Mat3 rot_y(double angle);
Mat3 rot_z(double angle);

Pose euler_zyx_to_pose(const EulerZYX& e, const Vec3& t);
EulerExtraction pose_to_euler_zyx(const Pose& p);

double deg2rad(double deg);
double rad2deg(double rad);

/// Euclidean distance between translations.
double translation_error(const Pose& est, const Pose& gt);
/// Angle of R_gt^T R_est in radians, in [0, pi].
double rotation_error(const Pose& est, const Pose& gt);

/// Rotation as unit quaternion (x, y, z, w) with w >= 0.
Eigen::Quaterniond to_quaternion(const Mat3& r);
Mat3 from_quaternion(double qx, double qy, double qz, double qw);

}  // namespace dlc
