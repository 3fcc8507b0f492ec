#pragma once

#include "hsplat/common.hpp"

#include <array>

namespace hsplat {

inline constexpr int kShDim = 16;

/// Real spherical harmonics of a unit direction, bands 0 through 3, ordered
/// m = -l..l within each band (Condon-Shortley phase).
std::array<double, kShDim> sh_encode(const Vec3& d);

}  // namespace hsplat
