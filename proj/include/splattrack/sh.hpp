#pragma once

#include <array>

#include "splattrack/pose.hpp"

namespace splattrack {

inline constexpr double kShC0 = 0.28209479177387814;

/// Real SH basis values up to degree 2 at unit direction d, in the usual
/// splatting ordering (1 + 3 + 5 terms).
std::array<double, 9> sh_basis(const Vec3& d);

/// Basis values plus their gradients w.r.t. the direction components.
void sh_basis_and_grad(const Vec3& d, std::array<double, 9>& basis,
                       std::array<Vec3, 9>& grad);

/// Contracts coefficients (layout [basis][channel]) with the basis up to
/// `degree`, offsets by +0.5 and clamps at 0.
Vec3 eval_sh(const std::array<double, 27>& coeffs, int degree, const Vec3& view_dir);

inline int sh_terms(int degree) { return (degree + 1) * (degree + 1); }

}  // namespace splattrack
