#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include "kbp/geometry.hpp"
#include "kbp/phantom.hpp"

namespace kbp {

/// One coplanar beam with a rectangular grid of parallel pencil beamlets.
/// Beamlet b = row * cols + col; rows run along z, columns along the
/// in-plane lateral axis, so a fluence-map row is one leaf-travel line.
struct Beam {
  double gantry_deg = 0.0;
  double source_distance_mm = 1000.0;
  int rows = 1;
  int cols = 1;
  double beamlet_width_mm = 8.0;
  Vec3 isocenter;
  double lateral_center_mm = 0.0;  // beamlet-grid center offset along lateral()
  double axial_center_mm = 0.0;    // ... and along z

  int beamlet_count() const { return rows * cols; }
  /// Unit vector from source toward isocenter.
  Vec3 direction() const;
  /// Unit in-plane vector perpendicular to direction().
  Vec3 lateral() const;
  /// Start point (at the source plane) of a beamlet's central ray.
  Vec3 beamlet_origin(int beamlet) const;
};

struct BeamConfig {
  int count = 9;
  double source_distance_mm = 1000.0;
  double beamlet_width_mm = 8.0;
};

struct PhysicsConfig {
  double mu_per_mm = 0.005;      // linear attenuation in water
  double f0 = 1.0;               // Gy per unit fluence on the central axis at zero depth
  double cutoff_sigmas = 3.0;    // lateral profile truncation
  double prune_below = 1e-8;     // entries smaller than this are dropped
};

/// Nine equidistant coplanar beams (0, 40, ..., 320 degrees) aimed at the
/// PTV70 centroid, each with a beamlet grid covering the union of targets.
std::vector<Beam> make_beams(const Phantom& phantom, const BeamConfig& config = {});

struct RaySegment {
  std::size_t voxel = 0;
  double t_enter = 0.0;  // mm along the ray
  double length = 0.0;   // mm inside the voxel
};

/// Voxel-exact traversal of the grid box (incremental parametric stepping
/// through grid planes). Segments are ordered along the ray.
std::vector<RaySegment> traverse_ray(const VoxelGrid& grid, const Vec3& origin, const Vec3& direction);

struct SparseColumn {
  std::vector<std::uint32_t> voxels;  // ascending
  std::vector<float> values;
};

SparseColumn trace_beamlet(const VoxelGrid& grid, const Beam& beam, int beamlet, const PhysicsConfig& physics = {});

/// Compressed-column dose-influence matrix (voxels x beamlets), Gy per unit fluence.
class InfluenceMatrix {
 public:
  InfluenceMatrix() = default;
  InfluenceMatrix(Dims dims, Spacing spacing, std::vector<Beam> beams, std::vector<SparseColumn> columns);

  std::size_t num_voxels() const { return dims_.count(); }
  std::size_t num_beamlets() const { return col_ptr_.empty() ? 0 : col_ptr_.size() - 1; }
  std::size_t nnz() const { return voxels_.size(); }
  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  const std::vector<Beam>& beams() const { return beams_; }

  std::span<const std::uint32_t> column_voxels(std::size_t b) const {
    return {voxels_.data() + col_ptr_[b], col_ptr_[b + 1] - col_ptr_[b]};
  }
  std::span<const float> column_values(std::size_t b) const {
    return {values_.data() + col_ptr_[b], col_ptr_[b + 1] - col_ptr_[b]};
  }

  /// Sum over beamlets of A[v, b] for every voxel.
  std::vector<double> row_sums() const;

  /// Dense rows (one per requested voxel, num_beamlets wide), row-major.
  std::vector<double> dense_rows(std::span<const std::size_t> voxels) const;

  /// y = A^T r
  std::vector<double> transpose_multiply(std::span<const double> r) const;

 private:
  Dims dims_{};
  Spacing spacing_{};
  std::vector<Beam> beams_;
  std::vector<std::size_t> col_ptr_;
  std::vector<std::uint32_t> voxels_;
  std::vector<float> values_;
};

/// Builds all columns; beamlets are traced on up to `threads` workers and
/// merged in beamlet order, so the result does not depend on the thread count.
InfluenceMatrix influence_matrix(const VoxelGrid& grid, const std::vector<Beam>& beams,
                                 const PhysicsConfig& physics = {}, int threads = 1);

struct DoseDistribution {
  Dims dims;
  Spacing spacing;
  std::vector<double> values;
};

/// d = A w. Throws std::invalid_argument on negative or mis-sized fluence.
DoseDistribution compute_dose(const InfluenceMatrix& a, std::span<const double> fluence);

void write_influence(std::ostream& os, const InfluenceMatrix& a);
InfluenceMatrix read_influence(std::istream& is);
void write_influence_file(const std::filesystem::path& path, const InfluenceMatrix& a);
InfluenceMatrix read_influence_file(const std::filesystem::path& path);

}  // namespace kbp
