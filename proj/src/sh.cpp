#include "splattrack/sh.hpp"

#include <algorithm>

namespace splattrack {

namespace {
constexpr double kC1 = 0.4886025119029199;
constexpr double kC2[5] = {1.0925484305920792, -1.0925484305920792,
                           0.31539156525252005, -1.0925484305920792,
                           0.5462742152960396};
}  // namespace

std::array<double, 9> sh_basis(const Vec3& d) {
  const double x = d.x(), y = d.y(), z = d.z();
  return {kShC0,
          -kC1 * y,
          kC1 * z,
          -kC1 * x,
          kC2[0] * x * y,
          kC2[1] * y * z,
          kC2[2] * (2.0 * z * z - x * x - y * y),
          kC2[3] * x * z,
          kC2[4] * (x * x - y * y)};
}

void sh_basis_and_grad(const Vec3& d, std::array<double, 9>& basis,
                       std::array<Vec3, 9>& grad) {
  const double x = d.x(), y = d.y(), z = d.z();
  basis = sh_basis(d);
  grad[0] = Vec3::Zero();
  grad[1] = Vec3(0, -kC1, 0);
  grad[2] = Vec3(0, 0, kC1);
  grad[3] = Vec3(-kC1, 0, 0);
  grad[4] = kC2[0] * Vec3(y, x, 0);
  grad[5] = kC2[1] * Vec3(0, z, y);
  grad[6] = kC2[2] * Vec3(-2 * x, -2 * y, 4 * z);
  grad[7] = kC2[3] * Vec3(z, 0, x);
  grad[8] = kC2[4] * Vec3(2 * x, -2 * y, 0);
}

Vec3 eval_sh(const std::array<double, 27>& coeffs, int degree, const Vec3& view_dir) {
  const auto basis = sh_basis(view_dir);
  const int terms = sh_terms(degree);
  Vec3 c = Vec3::Zero();
  for (int k = 0; k < terms; ++k) {
    for (int ch = 0; ch < 3; ++ch) c[ch] += basis[k] * coeffs[k * 3 + ch];
  }
  c.array() += 0.5;
  return c.cwiseMax(0.0);
}

}  // namespace splattrack
