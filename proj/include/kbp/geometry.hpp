#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>

namespace kbp {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  constexpr Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  constexpr Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  constexpr Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  constexpr double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  double norm() const { return std::sqrt(dot(*this)); }
};

struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  constexpr std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  constexpr bool operator==(const Dims&) const = default;
};

/// Voxel edge lengths in mm.
struct Spacing {
  double x = 4.0;
  double y = 4.0;
  double z = 2.0;

  constexpr bool operator==(const Spacing&) const = default;
};

struct Index3 {
  int x = 0;
  int y = 0;
  int z = 0;
};

}  // namespace kbp
