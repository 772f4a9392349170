#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "kbp/geometry.hpp"

namespace kbp {

enum class StructureId : std::uint8_t {
  PTV70 = 0,
  PTV63,
  PTV56,
  Brainstem,
  SpinalCord,
  RightParotid,
  LeftParotid,
  Larynx,
  Esophagus,
  Mandible,
  LimPostNeck,
  Unclassified,
};

inline constexpr std::size_t kNumStructures = 12;

inline constexpr std::array<StructureId, 3> kTargets = {StructureId::PTV70, StructureId::PTV63,
                                                         StructureId::PTV56};

inline constexpr std::array<StructureId, 8> kOrgansAtRisk = {
    StructureId::Brainstem, StructureId::SpinalCord, StructureId::RightParotid,
    StructureId::LeftParotid, StructureId::Larynx, StructureId::Esophagus,
    StructureId::Mandible, StructureId::LimPostNeck};

constexpr bool is_target(StructureId s) {
  return s == StructureId::PTV70 || s == StructureId::PTV63 || s == StructureId::PTV56;
}

constexpr bool is_oar(StructureId s) { return !is_target(s) && s != StructureId::Unclassified; }

/// Prescription in Gy; throws for non-target structures.
double prescription_gy(StructureId s);

std::string_view structure_name(StructureId s);
std::optional<StructureId> structure_from_name(std::string_view name);

/// RGB contour color for a structure. Unclassified has no palette color and
/// is rendered as density grayscale instead.
std::array<float, 3> structure_color(StructureId s);

class VoxelGrid {
 public:
  VoxelGrid() = default;
  VoxelGrid(Dims dims, Spacing spacing);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  std::size_t size() const { return dims_.count(); }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims_.nx) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims_.ny) * static_cast<std::size_t>(z));
  }
  Index3 coords(std::size_t i) const;
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims_.nx && y < dims_.ny && z < dims_.nz;
  }

  /// Voxel center in mm; the grid occupies [0, n*spacing) on each axis.
  Vec3 center_mm(std::size_t i) const;
  Vec3 extent_mm() const {
    return {dims_.nx * spacing_.x, dims_.ny * spacing_.y, dims_.nz * spacing_.z};
  }

  std::span<float> density() { return density_; }
  std::span<const float> density() const { return density_; }
  std::span<StructureId> labels() { return labels_; }
  std::span<const StructureId> labels() const { return labels_; }

  /// Flat voxel indices carrying label s, ascending.
  std::vector<std::size_t> voxels_of(StructureId s) const;
  std::vector<std::uint8_t> mask_of(StructureId s) const;

 private:
  Dims dims_{};
  Spacing spacing_{};
  std::vector<float> density_;
  std::vector<StructureId> labels_;
};

struct Phantom {
  VoxelGrid grid;
  std::map<StructureId, double> prescriptions;
  std::uint64_t seed = 0;

  /// Center of mass of the PTV70 voxels in mm.
  Vec3 centroid_mm(StructureId s) const;
};

struct PhantomSpec {
  Dims dims{32, 32, 16};
  Spacing spacing{};
};

class PhantomError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Builds a head-and-neck-like synthetic patient: an elliptic body cylinder,
/// three nested target ellipsoids near the center and eight organ ellipsoids
/// around them. Deterministic in (seed, spec).
Phantom generate_phantom(std::uint64_t seed, const PhantomSpec& spec = {});

/// Channel-first RGB image of one axial plane, values in [0,1].
struct ContouredSlice {
  int width = 0;
  int height = 0;
  int plane = 0;
  std::vector<float> pixels;  // [3][height][width]

  float at(int channel, int row, int col) const {
    return pixels[(static_cast<std::size_t>(channel) * height + row) * width + col];
  }
};

ContouredSlice render_contoured_slice(const Phantom& phantom, int z, int size = 64);

/// Grid voxel (x or y) that an output pixel of a size-S slice samples.
int slice_pixel_to_voxel(int pixel, int size, int n);

/// Exact Euclidean distance (mm, honoring anisotropic spacing) from every
/// voxel center to the nearest voxel of structure s; 0 inside the structure.
std::vector<double> distance_to_surface(const VoxelGrid& grid, StructureId s);

/// Returns true when the voxels labeled s form one 6-connected component.
bool is_connected(const VoxelGrid& grid, StructureId s);

}  // namespace kbp
