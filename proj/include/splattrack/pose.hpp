#pragma once

#include <Eigen/Dense>

namespace splattrack {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;

/// Rigid SE(3) transform: x' = R x + t. Rotation stays orthonormal with
/// det +1; compose() renormalizes periodically to bound drift.
struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();
  int compositions = 0;

  static Pose identity() { return {}; }

  Vec3 apply(const Vec3& x) const { return R * x + t; }

  Pose inverse() const {
    Pose p;
    p.R = R.transpose();
    p.t = -p.R * t;
    return p;
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.block<3, 3>(0, 0) = R;
    m.block<3, 1>(0, 3) = t;
    return m;
  }

  static Pose from_matrix(const Mat4& m) {
    Pose p;
    p.R = m.block<3, 3>(0, 0);
    p.t = m.block<3, 1>(0, 3);
    return p;
  }

  /// Camera/sensor center expressed in the source frame: -R^T t.
  Vec3 center() const { return -R.transpose() * t; }
};

/// Decoupled tangent parameterization: translation (meters) stacked over
/// rotation axis-angle (radians). Not a full se(3) twist.
struct PoseTangent {
  Vec3 trans = Vec3::Zero();
  Vec3 rot = Vec3::Zero();

  Vec6 vec() const {
    Vec6 v;
    v << trans, rot;
    return v;
  }
  static PoseTangent from_vec(const Vec6& v) {
    return {v.head<3>(), v.tail<3>()};
  }
};

Mat3 skew(const Vec3& v);

/// Rodrigues formula, numerically stable near zero angle.
Mat3 so3_exp(const Vec3& axis_angle);

/// Inverse of so3_exp; angle returned in [0, pi].
Vec3 so3_log(const Mat3& R);

/// exp of the decoupled tangent: Rodrigues rotation, translation verbatim.
Pose se3_exp(const PoseTangent& v);
PoseTangent se3_log(const Pose& p);

/// a then... composition: (a*b).apply(x) = a.apply(b.apply(x)).
Pose compose(const Pose& a, const Pose& b);

/// Nearest orthonormal matrix with det +1 (polar decomposition via SVD).
Mat3 orthonormalize(const Mat3& R);

/// Geodesic rotation distance in radians.
double rotation_distance(const Pose& a, const Pose& b);

/// Translation distance in meters.
double translation_distance(const Pose& a, const Pose& b);

}  // namespace splattrack
