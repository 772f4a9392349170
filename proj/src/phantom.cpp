#include "kbp/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <queue>
#include <random>
#include <string>

namespace kbp {
namespace {

constexpr std::array<std::string_view, kNumStructures> kNames = {
    "PTV70",        "PTV63",       "PTV56",  "Brainstem", "SpinalCord", "RightParotid",
    "LeftParotid",  "Larynx",      "Esophagus", "Mandible", "LimPostNeck", "Unclassified"};

// Every classified entry has unequal channels so contours never read as grayscale.
constexpr std::array<std::array<float, 3>, kNumStructures> kPalette = {{
    {1.00f, 0.00f, 0.00f},  // PTV70
    {1.00f, 0.50f, 0.00f},  // PTV63
    {1.00f, 1.00f, 0.00f},  // PTV56
    {0.00f, 0.00f, 1.00f},  // Brainstem
    {0.00f, 1.00f, 0.00f},  // SpinalCord
    {1.00f, 0.00f, 1.00f},  // RightParotid
    {0.50f, 0.00f, 1.00f},  // LeftParotid
    {0.00f, 1.00f, 1.00f},  // Larynx
    {0.00f, 0.50f, 0.50f},  // Esophagus
    {0.60f, 0.30f, 0.10f},  // Mandible
    {0.30f, 0.80f, 0.30f},  // LimPostNeck
    {0.50f, 0.50f, 0.50f},  // Unclassified (unused; grayscale from density)
}};

// Sector (degrees from +x, +y posterior) each organ is placed in.
constexpr std::array<double, 8> kOarSectorDeg = {90, 135, 180, 0, 270, 315, 225, 45};

struct Ellipsoid {
  Vec3 center;
  Vec3 radii;

  bool contains(const Vec3& p) const {
    const double dx = (p.x - center.x) / radii.x;
    const double dy = (p.y - center.y) / radii.y;
    const double dz = (p.z - center.z) / radii.z;
    return dx * dx + dy * dy + dz * dz <= 1.0;
  }
};

// Distance from an ellipse center to its boundary along unit direction (c, s).
double ellipse_radius_along(double rx, double ry, double c, double s) {
  return 1.0 / std::sqrt((c / rx) * (c / rx) + (s / ry) * (s / ry));
}

void paint(VoxelGrid& grid, const Ellipsoid& e, StructureId id, bool only_unclassified) {
  auto labels = grid.labels();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (only_unclassified && labels[i] != StructureId::Unclassified) continue;
    if (e.contains(grid.center_mm(i))) labels[i] = id;
  }
}

// 1-D squared Euclidean distance transform of sampled function f at
// positions k*step (lower envelope of parabolas).
void edt_1d(std::span<double> f, double step, std::vector<double>& out, std::vector<int>& v,
            std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double kInf = std::numeric_limits<double>::infinity();
  out.assign(n, kInf);
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    const double pq = q * step;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s = 0.0;
    while (true) {
      const double pv = v[k] * step;
      s = ((f[q] + pq * pq) - (f[v[k]] + pv * pv)) / (2.0 * (pq - pv));
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    if (s <= z[k]) {
      // k == 0 and the new parabola dominates everywhere
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (k < 0) return;
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double p = q * step;
    while (z[j + 1] < p) ++j;
    const double d = p - v[j] * step;
    out[q] = d * d + f[v[j]];
  }
}

}  // namespace

double prescription_gy(StructureId s) {
  switch (s) {
    case StructureId::PTV70: return 70.0;
    case StructureId::PTV63: return 63.0;
    case StructureId::PTV56: return 56.0;
    default: throw std::invalid_argument("structure " + std::string(structure_name(s)) + " has no prescription");
  }
}

std::string_view structure_name(StructureId s) { return kNames.at(static_cast<std::size_t>(s)); }

std::optional<StructureId> structure_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (kNames[i] == name) return static_cast<StructureId>(i);
  }
  return std::nullopt;
}

std::array<float, 3> structure_color(StructureId s) { return kPalette.at(static_cast<std::size_t>(s)); }

VoxelGrid::VoxelGrid(Dims dims, Spacing spacing)
    : dims_(dims),
      spacing_(spacing),
      density_(dims.count(), 0.0f),
      labels_(dims.count(), StructureId::Unclassified) {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) throw std::invalid_argument("grid dims must be positive");
  if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0)) throw std::invalid_argument("grid spacing must be positive");
}

Index3 VoxelGrid::coords(std::size_t i) const {
  const auto nx = static_cast<std::size_t>(dims_.nx);
  const auto ny = static_cast<std::size_t>(dims_.ny);
  return {static_cast<int>(i % nx), static_cast<int>((i / nx) % ny), static_cast<int>(i / (nx * ny))};
}

Vec3 VoxelGrid::center_mm(std::size_t i) const {
  const Index3 c = coords(i);
  return {(c.x + 0.5) * spacing_.x, (c.y + 0.5) * spacing_.y, (c.z + 0.5) * spacing_.z};
}

std::vector<std::size_t> VoxelGrid::voxels_of(StructureId s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] == s) out.push_back(i);
  }
  return out;
}

std::vector<std::uint8_t> VoxelGrid::mask_of(StructureId s) const {
  std::vector<std::uint8_t> m(labels_.size(), 0);
  for (std::size_t i = 0; i < labels_.size(); ++i) m[i] = labels_[i] == s ? 1 : 0;
  return m;
}

Vec3 Phantom::centroid_mm(StructureId s) const {
  const auto voxels = grid.voxels_of(s);
  if (voxels.empty()) throw std::invalid_argument("structure " + std::string(structure_name(s)) + " is empty");
  Vec3 sum;
  for (auto v : voxels) sum = sum + grid.center_mm(v);
  return sum * (1.0 / static_cast<double>(voxels.size()));
}

Phantom generate_phantom(std::uint64_t seed, const PhantomSpec& spec) {
  const Dims d = spec.dims;
  if (d.nx < 16 || d.ny < 16 || d.nz < 8) {
    throw PhantomError("phantom dims (" + std::to_string(d.nx) + "," + std::to_string(d.ny) + "," +
                       std::to_string(d.nz) + ") too small: need nx,ny >= 16 and nz >= 8");
  }

  Phantom ph;
  ph.seed = seed;
  ph.grid = VoxelGrid(d, spec.spacing);
  for (auto t : kTargets) ph.prescriptions[t] = prescription_gy(t);

  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  const Vec3 ext = ph.grid.extent_mm();
  const Spacing sp = spec.spacing;

  // Body: elliptic cylinder along z.
  const double body_rx = 0.44 * ext.x;
  const double body_ry = 0.40 * ext.y;
  const Vec3 mid{ext.x / 2, ext.y / 2, ext.z / 2};
  auto density = ph.grid.density();
  for (std::size_t i = 0; i < ph.grid.size(); ++i) {
    const Vec3 p = ph.grid.center_mm(i);
    const double dx = (p.x - mid.x) / body_rx;
    const double dy = (p.y - mid.y) / body_ry;
    density[i] = dx * dx + dy * dy <= 1.0 ? 1.0f : 0.0f;
  }

  // Nested targets; each inner ellipsoid is offset by at most 8% of the
  // enclosing radii and shrunk, which keeps it strictly inside the outer one.
  Ellipsoid ptv56{mid + Vec3{uniform(-0.04, 0.04) * ext.x, uniform(-0.04, 0.04) * ext.y,
                             uniform(-0.05, 0.05) * ext.z},
                  {uniform(0.20, 0.24) * ext.x, uniform(0.17, 0.21) * ext.y, uniform(0.32, 0.38) * ext.z}};
  auto nested = [&](const Ellipsoid& outer, double shrink) {
    Ellipsoid e;
    e.radii = outer.radii * shrink;
    e.center = outer.center + Vec3{uniform(-0.08, 0.08) * outer.radii.x, uniform(-0.08, 0.08) * outer.radii.y,
                                   uniform(-0.08, 0.08) * outer.radii.z};
    return e;
  };
  const Ellipsoid ptv63 = nested(ptv56, 0.72);
  const Ellipsoid ptv70 = nested(ptv63, 0.52);
  if (ptv70.radii.x < 0.9 * sp.x || ptv70.radii.y < 0.9 * sp.y || ptv70.radii.z < 0.9 * sp.z) {
    throw PhantomError("phantom dims too small to fit nested targets: PTV70 semi-axes (" +
                       std::to_string(ptv70.radii.x) + "," + std::to_string(ptv70.radii.y) + "," +
                       std::to_string(ptv70.radii.z) + ") mm are below 0.9 voxel");
  }

  // Highest prescription first; later targets only claim unlabeled voxels.
  paint(ph.grid, ptv70, StructureId::PTV70, true);
  paint(ph.grid, ptv63, StructureId::PTV63, true);
  paint(ph.grid, ptv56, StructureId::PTV56, true);

  const double plane_scale = std::min(ext.x, ext.y);
  for (std::size_t k = 0; k < kOrgansAtRisk.size(); ++k) {
    const StructureId oar = kOrgansAtRisk[k];
    bool placed = false;
    for (int attempt = 0; attempt < 32 && !placed; ++attempt) {
      const double ang = (kOarSectorDeg[k] + uniform(-8.0, 8.0)) * std::numbers::pi / 180.0;
      const double c = std::cos(ang);
      const double s = std::sin(ang);
      Ellipsoid e;
      e.radii = {uniform(0.05, 0.07) * plane_scale, uniform(0.05, 0.07) * plane_scale, uniform(0.25, 0.40) * ext.z};
      e.radii.x = std::max(e.radii.x, 1.2 * sp.x);
      e.radii.y = std::max(e.radii.y, 1.2 * sp.y);
      e.radii.z = std::max(e.radii.z, 1.2 * sp.z);
      const double boundary = ellipse_radius_along(ptv56.radii.x, ptv56.radii.y, c, s);
      const double own = ellipse_radius_along(e.radii.x, e.radii.y, c, s);
      // Penetrate the outer target by at most 60% of the organ radius so the
      // precedence rule fires without swallowing the organ.
      const double dist = boundary + uniform(0.4, 0.9) * own + 0.25 * attempt * own;
      e.center = ptv56.center + Vec3{dist * c, dist * s, uniform(-0.25, 0.25) * ext.z};

      std::vector<std::size_t> before;
      const auto labels = ph.grid.labels();
      for (std::size_t i = 0; i < ph.grid.size(); ++i) {
        if (labels[i] == StructureId::Unclassified && e.contains(ph.grid.center_mm(i))) before.push_back(i);
      }
      if (before.empty()) continue;
      for (auto i : before) labels[i] = oar;
      if (is_connected(ph.grid, oar)) {
        placed = true;
      } else {
        for (auto i : before) labels[i] = StructureId::Unclassified;
      }
    }
    if (!placed) {
      throw PhantomError("could not place " + std::string(structure_name(oar)) +
                         " as a connected structure; phantom dims too small");
    }
  }
  return ph;
}

int slice_pixel_to_voxel(int pixel, int size, int n) {
  const int v = static_cast<int>((static_cast<long long>(2 * pixel + 1) * n) / (2LL * size));
  return std::clamp(v, 0, n - 1);
}

ContouredSlice render_contoured_slice(const Phantom& phantom, int z, int size) {
  const VoxelGrid& g = phantom.grid;
  if (z < 0 || z >= g.dims().nz) {
    throw std::out_of_range("slice plane " + std::to_string(z) + " outside [0," + std::to_string(g.dims().nz) + ")");
  }
  if (size < 4 || (size & (size - 1)) != 0) throw std::invalid_argument("slice size must be a power of two >= 4");

  ContouredSlice out;
  out.width = size;
  out.height = size;
  out.plane = z;
  out.pixels.assign(3 * static_cast<std::size_t>(size) * size, 0.0f);
  const auto labels = g.labels();
  const auto density = g.density();
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int r = 0; r < size; ++r) {
    const int y = slice_pixel_to_voxel(r, size, g.dims().ny);
    for (int c = 0; c < size; ++c) {
      const int x = slice_pixel_to_voxel(c, size, g.dims().nx);
      const std::size_t v = g.index(x, y, z);
      std::array<float, 3> rgb;
      if (labels[v] == StructureId::Unclassified) {
        const float gray = std::clamp(density[v] / 2.0f, 0.0f, 1.0f);
        rgb = {gray, gray, gray};
      } else {
        rgb = structure_color(labels[v]);
      }
      const std::size_t p = static_cast<std::size_t>(r) * size + c;
      for (int ch = 0; ch < 3; ++ch) out.pixels[ch * plane + p] = rgb[ch];
    }
  }
  return out;
}

std::vector<double> distance_to_surface(const VoxelGrid& grid, StructureId s) {
  const Dims d = grid.dims();
  const auto labels = grid.labels();
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> f(grid.size(), kInf);
  bool any = false;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (labels[i] == s) {
      f[i] = 0.0;
      any = true;
    }
  }
  if (!any) throw std::invalid_argument("distance_to_surface: structure " + std::string(structure_name(s)) + " is empty");

  std::vector<double> line, out, z;
  std::vector<int> v;
  const Spacing sp = grid.spacing();
  // x pass
  line.resize(d.nx);
  for (int zz = 0; zz < d.nz; ++zz)
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x) line[x] = f[grid.index(x, y, zz)];
      edt_1d(line, sp.x, out, v, z);
      for (int x = 0; x < d.nx; ++x) f[grid.index(x, y, zz)] = out[x];
    }
  line.resize(d.ny);
  for (int zz = 0; zz < d.nz; ++zz)
    for (int x = 0; x < d.nx; ++x) {
      for (int y = 0; y < d.ny; ++y) line[y] = f[grid.index(x, y, zz)];
      edt_1d(line, sp.y, out, v, z);
      for (int y = 0; y < d.ny; ++y) f[grid.index(x, y, zz)] = out[y];
    }
  line.resize(d.nz);
  for (int y = 0; y < d.ny; ++y)
    for (int x = 0; x < d.nx; ++x) {
      for (int zz = 0; zz < d.nz; ++zz) line[zz] = f[grid.index(x, y, zz)];
      edt_1d(line, sp.z, out, v, z);
      for (int zz = 0; zz < d.nz; ++zz) f[grid.index(x, y, zz)] = out[zz];
    }
  for (auto& x : f) x = std::sqrt(x);
  return f;
}

bool is_connected(const VoxelGrid& grid, StructureId s) {
  const auto labels = grid.labels();
  const auto voxels = grid.voxels_of(s);
  if (voxels.empty()) return false;
  std::vector<std::uint8_t> seen(grid.size(), 0);
  std::queue<std::size_t> q;
  q.push(voxels.front());
  seen[voxels.front()] = 1;
  std::size_t reached = 0;
  constexpr int kSteps[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  while (!q.empty()) {
    const std::size_t i = q.front();
    q.pop();
    ++reached;
    const Index3 c = grid.coords(i);
    for (const auto& st : kSteps) {
      const int x = c.x + st[0], y = c.y + st[1], z = c.z + st[2];
      if (!grid.contains(x, y, z)) continue;
      const std::size_t j = grid.index(x, y, z);
      if (!seen[j] && labels[j] == s) {
        seen[j] = 1;
        q.push(j);
      }
    }
  }
  return reached == voxels.size();
}

}  // namespace kbp
