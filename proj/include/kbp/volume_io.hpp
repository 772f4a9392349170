#pragma once

// "KBPV" volume files: 4-byte magic, u32 version, u32 nx ny nz,
// f32 spacing x y z, u8 payload kind, then the payload little-endian with
// x varying fastest.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "kbp/geometry.hpp"
#include "kbp/phantom.hpp"

namespace kbp {

enum class PayloadKind : std::uint8_t { Density = 0, Labels = 1, Dose = 2 };

struct VolumeFile {
  Dims dims;
  Spacing spacing;
  PayloadKind kind = PayloadKind::Dose;
  std::vector<float> values;         // Density / Dose
  std::vector<std::uint8_t> labels;  // Labels
};

inline constexpr std::uint32_t kVolumeVersion = 1;

void write_volume(std::ostream& os, const VolumeFile& v);
VolumeFile read_volume(std::istream& is);

void write_volume_file(const std::filesystem::path& path, const VolumeFile& v);
VolumeFile read_volume_file(const std::filesystem::path& path);

VolumeFile dose_volume(const VoxelGrid& grid, std::span<const double> dose);
VolumeFile density_volume(const VoxelGrid& grid);
VolumeFile label_volume(const VoxelGrid& grid);

/// Rebuilds a grid from a density and a label volume of matching geometry.
VoxelGrid grid_from_volumes(const VolumeFile& density, const VolumeFile& labels);

}  // namespace kbp
