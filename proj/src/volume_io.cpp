#include "kbp/volume_io.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "kbp/binary_io.hpp"

namespace kbp {

void write_volume(std::ostream& os, const VolumeFile& v) {
  const std::size_t n = v.dims.count();
  const bool is_labels = v.kind == PayloadKind::Labels;
  if ((is_labels ? v.labels.size() : v.values.size()) != n) {
    throw std::invalid_argument("volume payload length does not match dims");
  }
  io::put_magic(os, "KBPV");
  io::put_u32(os, kVolumeVersion);
  io::put_u32(os, static_cast<std::uint32_t>(v.dims.nx));
  io::put_u32(os, static_cast<std::uint32_t>(v.dims.ny));
  io::put_u32(os, static_cast<std::uint32_t>(v.dims.nz));
  io::put_f32(os, static_cast<float>(v.spacing.x));
  io::put_f32(os, static_cast<float>(v.spacing.y));
  io::put_f32(os, static_cast<float>(v.spacing.z));
  io::put_u8(os, static_cast<std::uint8_t>(v.kind));
  if (is_labels) {
    os.write(reinterpret_cast<const char*>(v.labels.data()), static_cast<std::streamsize>(n));
  } else {
    for (float x : v.values) io::put_f32(os, x);
  }
}

VolumeFile read_volume(std::istream& is) {
  io::expect_magic(is, "KBPV");
  const auto version = io::get_u32(is);
  if (version != kVolumeVersion) throw io::FormatError("unsupported KBPV version " + std::to_string(version));
  VolumeFile v;
  v.dims.nx = static_cast<int>(io::get_u32(is));
  v.dims.ny = static_cast<int>(io::get_u32(is));
  v.dims.nz = static_cast<int>(io::get_u32(is));
  v.spacing.x = io::get_f32(is);
  v.spacing.y = io::get_f32(is);
  v.spacing.z = io::get_f32(is);
  const auto kind = io::get_u8(is);
  if (kind > 2) throw io::FormatError("unknown KBPV payload kind " + std::to_string(kind));
  v.kind = static_cast<PayloadKind>(kind);
  const std::size_t n = v.dims.count();
  if (v.kind == PayloadKind::Labels) {
    v.labels.resize(n);
    io::read_exact(is, reinterpret_cast<char*>(v.labels.data()), n);
  } else {
    v.values.resize(n);
    for (auto& x : v.values) x = io::get_f32(is);
  }
  return v;
}

void write_volume_file(const std::filesystem::path& path, const VolumeFile& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_volume(os, v);
}

VolumeFile read_volume_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_volume(is);
}

VolumeFile dose_volume(const VoxelGrid& grid, std::span<const double> dose) {
  if (dose.size() != grid.size()) throw std::invalid_argument("dose length does not match grid");
  VolumeFile v{grid.dims(), grid.spacing(), PayloadKind::Dose, {}, {}};
  v.values.assign(dose.begin(), dose.end());
  return v;
}

VolumeFile density_volume(const VoxelGrid& grid) {
  VolumeFile v{grid.dims(), grid.spacing(), PayloadKind::Density, {}, {}};
  v.values.assign(grid.density().begin(), grid.density().end());
  return v;
}

VolumeFile label_volume(const VoxelGrid& grid) {
  VolumeFile v{grid.dims(), grid.spacing(), PayloadKind::Labels, {}, {}};
  v.labels.reserve(grid.size());
  for (auto l : grid.labels()) v.labels.push_back(static_cast<std::uint8_t>(l));
  return v;
}

VoxelGrid grid_from_volumes(const VolumeFile& density, const VolumeFile& labels) {
  if (density.kind != PayloadKind::Density || labels.kind != PayloadKind::Labels) {
    throw std::invalid_argument("grid_from_volumes needs a density and a label volume");
  }
  if (!(density.dims == labels.dims)) throw std::invalid_argument("density/label dims differ");
  VoxelGrid g(density.dims, density.spacing);
  std::copy(density.values.begin(), density.values.end(), g.density().begin());
  auto out = g.labels();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (labels.labels[i] >= kNumStructures) throw io::FormatError("label value out of range");
    out[i] = static_cast<StructureId>(labels.labels[i]);
  }
  return g;
}

}  // namespace kbp
