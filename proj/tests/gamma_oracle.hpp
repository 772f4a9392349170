#pragma once

// Test-only oracle: exhaustive gamma over every reference voxel, no search
// radius, no early exit.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "kbp/planeval.hpp"

namespace kbp::testing {

/// Gamma per voxel, -1 where the voxel is not evaluated.
inline std::vector<double> brute_force_gamma(const std::vector<double>& eval, const std::vector<double>& ref, Dims dims,
                                             Spacing sp, const GammaOptions& o) {
  const double ref_max = *std::max_element(ref.begin(), ref.end());
  std::vector<double> g(ref.size(), -1.0);
  for (int z = 0; z < dims.nz; ++z)
    for (int y = 0; y < dims.ny; ++y)
      for (int x = 0; x < dims.nx; ++x) {
        const std::size_t v = static_cast<std::size_t>(x + dims.nx * (y + dims.ny * z));
        if (!(ref[v] > o.low_dose_cutoff * ref_max)) continue;
        const double dd = o.normalization == GammaNormalization::Global ? o.dose_tolerance * ref_max
                                                                         : o.dose_tolerance * ref[v];
        double best = std::numeric_limits<double>::infinity();
        for (int qz = 0; qz < dims.nz; ++qz)
          for (int qy = 0; qy < dims.ny; ++qy)
            for (int qx = 0; qx < dims.nx; ++qx) {
              const std::size_t q = static_cast<std::size_t>(qx + dims.nx * (qy + dims.ny * qz));
              const double ex = (qx - x) * sp.x, ey = (qy - y) * sp.y, ez = (qz - z) * sp.z;
              const double r2 = (ex * ex + ey * ey + ez * ez) / (o.distance_mm * o.distance_mm);
              const double diff = (eval[v] - ref[q]) / dd;
              best = std::min(best, r2 + diff * diff);
            }
        g[v] = std::sqrt(best);
      }
  return g;
}

/// Gaussian blob plus uniform noise: enough structure for gamma to be non-trivial.
inline std::vector<double> smooth_field(Dims d, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double cx = u(rng) * d.nx, cy = u(rng) * d.ny, cz = u(rng) * d.nz, w = 2.0 + 4.0 * u(rng);
  std::vector<double> f(d.count());
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy) + (z - cz) * (z - cz);
        f[static_cast<std::size_t>(x + d.nx * (y + d.ny * z))] = scale * std::exp(-r2 / (2 * w * w)) + 2.0 * u(rng);
      }
  return f;
}

/// Reference field and a shifted, noisy evaluation field.
inline std::pair<std::vector<double>, std::vector<double>> random_gamma_pair(Dims d, std::mt19937_64& rng, int shift,
                                                                             double noise_gy) {
  auto ref = smooth_field(d, rng, 70.0);
  std::vector<double> eval(ref.size());
  std::normal_distribution<double> noise(0.0, noise_gy);
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const int xs = std::clamp(x + shift, 0, d.nx - 1);
        eval[static_cast<std::size_t>(x + d.nx * (y + d.ny * z))] =
            ref[static_cast<std::size_t>(xs + d.nx * (y + d.ny * z))] + noise(rng);
      }
  return {std::move(eval), std::move(ref)};
}

}  // namespace kbp::testing
