#include "dlc/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace dlc {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kSmallAngle = 1e-3;
constexpr double kNearPiMargin = 1e-6;

// Coefficients of the Rodrigues-type series, with Taylor branches for tiny
// angles where the closed forms lose precision.
double sinc(double t) {
  if (t < kSmallAngle) {
    const double t2 = t * t;
    return 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
  }
  return std::sin(t) / t;
}

double one_minus_cos_over_t2(double t) {
  if (t < kSmallAngle) {
    const double t2 = t * t;
    return 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
  }
  return (1.0 - std::cos(t)) / (t * t);
}

double t_minus_sin_over_t3(double t) {
  if (t < kSmallAngle) {
    const double t2 = t * t;
    return 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
  }
  return (t - std::sin(t)) / (t * t * t);
}

// Left Jacobian of SO(3): maps rho to the SE(3) translation.
Mat3 left_jacobian(const Vec3& omega) {
  const double t = omega.norm();
  const Mat3 w = skew(omega);
  return Mat3::Identity() + one_minus_cos_over_t2(t) * w + t_minus_sin_over_t3(t) * w * w;
}

Mat3 left_jacobian_inverse(const Vec3& omega) {
  const double t = omega.norm();
  const Mat3 w = skew(omega);
  double c;
  if (t < kSmallAngle) {
    const double t2 = t * t;
    c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
  } else {
    c = (1.0 - t * std::sin(t) / (2.0 * (1.0 - std::cos(t)))) / (t * t);
  }
  return Mat3::Identity() - 0.5 * w + c * w * w;
}

}  // namespace

AngleNearPi::AngleNearPi(double angle)
    : std::runtime_error("rotation angle " + std::to_string(angle) +
                         " rad is too close to pi for a stable logarithm"),
      angle_(angle) {}

Pose Pose::from_matrix(const Mat4& m) {
  return {m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>()};
}

Mat4 Pose::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

Pose Pose::inverse() const {
  const Mat3 rt = rotation.transpose();
  return {rt, -(rt * translation)};
}

Pose Pose::operator*(const Pose& rhs) const {
  return {rotation * rhs.rotation, rotation * rhs.translation + translation};
}

bool Pose::is_valid(double tol) const {
  const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).norm();
  return ortho < tol && std::abs(rotation.determinant() - 1.0) < tol &&
         translation.allFinite();
}

Mat3 skew(const Vec3& v) {
  Mat3 s;
  // clang-format off
  s <<  0.0,  -v.z(),  v.y(),
        v.z(),  0.0,  -v.x(),
       -v.y(),  v.x(),  0.0;
  // clang-format on
  return s;
}

Vec3 vee(const Mat3& m) { return {m(2, 1), m(0, 2), m(1, 0)}; }

Mat3 exp_so3(const Vec3& omega) {
  const double t = omega.norm();
  const Mat3 w = skew(omega);
  return Mat3::Identity() + sinc(t) * w + one_minus_cos_over_t2(t) * w * w;
}

double rotation_angle(const Mat3& r) {
  // atan2 of (sin, cos) is accurate at both ends, unlike acos of the trace.
  const double s = 0.5 * vee(r - r.transpose()).norm();
  const double c = 0.5 * (r.trace() - 1.0);
  return std::atan2(s, c);
}

Vec3 log_so3(const Mat3& r) {
  const double angle = rotation_angle(r);
  if (angle >= kPi - kNearPiMargin) throw AngleNearPi(angle);

  const Vec3 s = 0.5 * vee(r - r.transpose());  // sin(angle) * axis
  if (angle < kPi / 2.0) {
    return s / sinc(angle);
  }
  // Large angles: recover the axis from the symmetric part,
  // (R + R^T)/2 - cos I = (1 - cos) a a^T, and take the sign from s.
  const double c = std::cos(angle);
  const Mat3 b = 0.5 * (r + r.transpose()) - c * Mat3::Identity();
  Eigen::Index k = 0;
  b.diagonal().maxCoeff(&k);
  Vec3 axis = b.col(k).normalized();
  if (axis.dot(s) < 0.0) axis = -axis;
  return angle * axis;
}

Pose exp_se3(const Twist& xi) {
  return {exp_so3(xi.rot), left_jacobian(xi.rot) * xi.trans};
}

Twist log_se3(const Pose& p) {
  const Vec3 omega = log_so3(p.rotation);
  return {omega, left_jacobian_inverse(omega) * p.translation};
}

Pose interpolate(const Pose& a, const Pose& b, double s) {
  return a * exp_se3(log_se3(a.inverse() * b) * s);
}

Mat3 rot_x(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitX()).toRotationMatrix();
}
Mat3 rot_y(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitY()).toRotationMatrix();
}
Mat3 rot_z(double angle) {
  return Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
}

Pose euler_zyx_to_pose(const EulerZYX& e, const Vec3& t) {
  return {rot_z(e.yaw) * rot_y(e.pitch) * rot_x(e.roll), t};
}

EulerExtraction pose_to_euler_zyx(const Pose& p) {
  const Mat3& r = p.rotation;
  EulerExtraction out;
  out.angles.pitch = std::atan2(-r(2, 0), std::hypot(r(0, 0), r(1, 0)));
  if (std::abs(std::abs(out.angles.pitch) - kPi / 2.0) < 1e-9) {
    // Only yaw - roll (or yaw + roll) is defined; report roll = 0.
    out.gimbal_lock = true;
    out.angles.roll = 0.0;
    out.angles.yaw = std::atan2(-r(0, 1), r(1, 1));
    return out;
  }
  out.angles.roll = std::atan2(r(2, 1), r(2, 2));
  out.angles.yaw = std::atan2(r(1, 0), r(0, 0));
  return out;
}

double deg2rad(double deg) { return deg * kPi / 180.0; }
double rad2deg(double rad) { return rad * 180.0 / kPi; }

double translation_error(const Pose& est, const Pose& gt) {
  return (est.translation - gt.translation).norm();
}

double rotation_error(const Pose& est, const Pose& gt) {
  // Same quantity as acos(clamp((trace(R_gt^T R_est) - 1) / 2)), evaluated
  // through atan2 so that small angles keep full precision.
  return rotation_angle(gt.rotation.transpose() * est.rotation);
}

Eigen::Quaterniond to_quaternion(const Mat3& r) {
  Eigen::Quaterniond q(r);
  q.normalize();
  if (q.w() < 0.0) q.coeffs() *= -1.0;
  return q;
}

Mat3 from_quaternion(double qx, double qy, double qz, double qw) {
  Eigen::Quaterniond q(qw, qx, qy, qz);
  q.normalize();
  return q.toRotationMatrix();
}

}  // namespace dlc
