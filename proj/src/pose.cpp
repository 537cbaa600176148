#include "splattrack/pose.hpp"

#include <cmath>

namespace splattrack {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

Mat3 so3_exp(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 K = skew(w);
  double a, b;
  if (theta < 1e-8) {
    // Taylor expansions of sin(t)/t and (1-cos(t))/t^2.
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  return Mat3::Identity() + a * K + b * K * K;
}

Vec3 so3_log(const Mat3& R) {
  const double cos_theta = std::clamp((R.trace() - 1.0) * 0.5, -1.0, 1.0);
  const double theta = std::acos(cos_theta);
  Vec3 axis(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
  if (theta < 1e-8) {
    return 0.5 * axis;
  }
  if (theta > M_PI - 1e-6) {
    // Near pi the skew part degenerates; recover the axis from the
    // symmetric part, A = cos*I + (1-cos) * axis axis^T.
    Mat3 A = 0.5 * (R + R.transpose()) - cos_theta * Mat3::Identity();
    int k;
    A.diagonal().maxCoeff(&k);
    Vec3 u = A.col(k);
    u.normalize();
    if (axis.dot(u) < 0) u = -u;
    return theta * u;
  }
  return axis * (theta / (2.0 * std::sin(theta)));
}

Pose se3_exp(const PoseTangent& v) {
  Pose p;
  p.R = so3_exp(v.rot);
  p.t = v.trans;
  return p;
}

PoseTangent se3_log(const Pose& p) {
  PoseTangent v;
  v.rot = so3_log(p.R);
  v.trans = p.t;
  return v;
}

Pose compose(const Pose& a, const Pose& b) {
  Pose p;
  p.R = a.R * b.R;
  p.t = a.R * b.t + a.t;
  p.compositions = a.compositions + b.compositions + 1;
  if (p.compositions >= 50) {
    p.R = orthonormalize(p.R);
    p.compositions = 0;
  }
  return p;
}

Mat3 orthonormalize(const Mat3& R) {
  Eigen::JacobiSVD<Mat3> svd(R, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 U = svd.matrixU();
  Mat3 V = svd.matrixV();
  Mat3 D = Mat3::Identity();
  D(2, 2) = (U * V.transpose()).determinant() < 0 ? -1.0 : 1.0;
  return U * D * V.transpose();
}

double rotation_distance(const Pose& a, const Pose& b) {
  return so3_log(a.R.transpose() * b.R).norm();
}

double translation_distance(const Pose& a, const Pose& b) {
  return (a.t - b.t).norm();
}

}  // namespace splattrack
