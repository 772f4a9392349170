#include "kbp/dosecalc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <string>
#include <thread>

#include "kbp/binary_io.hpp"

namespace kbp {

Vec3 Beam::direction() const {
  const double a = gantry_deg * std::numbers::pi / 180.0;
  return {-std::sin(a), std::cos(a), 0.0};
}

Vec3 Beam::lateral() const {
  const double a = gantry_deg * std::numbers::pi / 180.0;
  return {std::cos(a), std::sin(a), 0.0};
}

Vec3 Beam::beamlet_origin(int beamlet) const {
  if (beamlet < 0 || beamlet >= beamlet_count()) {
    throw std::out_of_range("beamlet " + std::to_string(beamlet) + " outside [0," + std::to_string(beamlet_count()) + ")");
  }
  const int r = beamlet / cols;
  const int c = beamlet % cols;
  const double u = lateral_center_mm + (c - 0.5 * (cols - 1)) * beamlet_width_mm;
  const double w = axial_center_mm + (r - 0.5 * (rows - 1)) * beamlet_width_mm;
  return isocenter + lateral() * u + Vec3{0, 0, w} - direction() * source_distance_mm;
}

std::vector<Beam> make_beams(const Phantom& phantom, const BeamConfig& config) {
  if (config.count != 9) throw std::invalid_argument("the beam arrangement uses exactly nine beams");
  if (!(config.beamlet_width_mm > 0)) throw std::invalid_argument("beamlet width must be positive");
  const Vec3 iso = phantom.centroid_mm(StructureId::PTV70);

  std::vector<Vec3> target_points;
  const auto labels = phantom.grid.labels();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (is_target(labels[i])) target_points.push_back(phantom.grid.center_mm(i));
  }

  std::vector<Beam> beams;
  beams.reserve(9);
  for (int k = 0; k < 9; ++k) {
    Beam b;
    b.gantry_deg = 40.0 * k;
    b.source_distance_mm = config.source_distance_mm;
    b.beamlet_width_mm = config.beamlet_width_mm;
    b.isocenter = iso;
    const Vec3 lat = b.lateral();
    double umin = std::numeric_limits<double>::infinity(), umax = -umin;
    double zmin = umin, zmax = -umin;
    for (const auto& p : target_points) {
      const double u = (p - iso).dot(lat);
      umin = std::min(umin, u);
      umax = std::max(umax, u);
      zmin = std::min(zmin, p.z - iso.z);
      zmax = std::max(zmax, p.z - iso.z);
    }
    const double bw = config.beamlet_width_mm;
    b.cols = std::max(1, static_cast<int>(std::ceil((umax - umin + bw) / bw - 1e-9)));
    b.rows = std::max(1, static_cast<int>(std::ceil((zmax - zmin + bw) / bw - 1e-9)));
    b.lateral_center_mm = 0.5 * (umin + umax);
    b.axial_center_mm = 0.5 * (zmin + zmax);
    beams.push_back(b);
  }
  return beams;
}

std::vector<RaySegment> traverse_ray(const VoxelGrid& grid, const Vec3& origin, const Vec3& direction) {
  const double len = direction.norm();
  if (!(len > 0.0) || !std::isfinite(len)) throw std::invalid_argument("degenerate ray direction");
  const Vec3 d = direction * (1.0 / len);
  const Dims dims = grid.dims();
  const double o[3] = {origin.x, origin.y, origin.z};
  const double dv[3] = {d.x, d.y, d.z};
  const double sp[3] = {grid.spacing().x, grid.spacing().y, grid.spacing().z};
  const int n[3] = {dims.nx, dims.ny, dims.nz};

  double t0 = 0.0;
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double hi = n[a] * sp[a];
    if (dv[a] == 0.0) {
      if (o[a] < 0.0 || o[a] >= hi) return {};
      continue;
    }
    double ta = (0.0 - o[a]) / dv[a];
    double tb = (hi - o[a]) / dv[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (!(t0 < t1)) return {};

  int idx[3], step[3];
  double t_next[3], t_delta[3];
  const double tmid = t0 + 0.5 * std::min(t1 - t0, 1e-9);
  for (int a = 0; a < 3; ++a) {
    const double p = o[a] + dv[a] * tmid;
    idx[a] = std::clamp(static_cast<int>(std::floor(p / sp[a])), 0, n[a] - 1);
    if (dv[a] > 0) {
      step[a] = 1;
      t_next[a] = ((idx[a] + 1) * sp[a] - o[a]) / dv[a];
      t_delta[a] = sp[a] / dv[a];
    } else if (dv[a] < 0) {
      step[a] = -1;
      t_next[a] = (idx[a] * sp[a] - o[a]) / dv[a];
      t_delta[a] = -sp[a] / dv[a];
    } else {
      step[a] = 0;
      t_next[a] = std::numeric_limits<double>::infinity();
      t_delta[a] = std::numeric_limits<double>::infinity();
    }
  }

  std::vector<RaySegment> out;
  double t = t0;
  while (t < t1) {
    int a = 0;
    if (t_next[1] < t_next[a]) a = 1;
    if (t_next[2] < t_next[a]) a = 2;
    const double t_exit = std::min(t_next[a], t1);
    if (t_exit > t) out.push_back({grid.index(idx[0], idx[1], idx[2]), t, t_exit - t});
    t = std::max(t, t_exit);
    if (t_exit >= t1) break;
    idx[a] += step[a];
    if (idx[a] < 0 || idx[a] >= n[a]) break;
    t_next[a] += t_delta[a];
  }
  return out;
}

SparseColumn trace_beamlet(const VoxelGrid& grid, const Beam& beam, int beamlet, const PhysicsConfig& physics) {
  const Vec3 origin = beam.beamlet_origin(beamlet);
  const Vec3 dir = beam.direction();
  const auto segments = traverse_ray(grid, origin, dir);
  const auto density = grid.density();

  // Cumulative radiological depth at each segment entry.
  std::vector<double> depth_at_entry(segments.size() + 1, 0.0);
  for (std::size_t k = 0; k < segments.size(); ++k) {
    depth_at_entry[k + 1] = depth_at_entry[k] + density[segments[k].voxel] * segments[k].length;
  }
  auto radiological_depth = [&](double t) {
    if (segments.empty() || t <= segments.front().t_enter) return 0.0;
    // first segment whose entry exceeds t
    auto it = std::upper_bound(segments.begin(), segments.end(), t,
                               [](double tv, const RaySegment& s) { return tv < s.t_enter; });
    const std::size_t k = static_cast<std::size_t>(it - segments.begin()) - 1;
    const RaySegment& s = segments[k];
    const double inside = std::min(t - s.t_enter, s.length);
    return depth_at_entry[k] + density[s.voxel] * inside;
  };

  const double sigma = beam.beamlet_width_mm / 2.0;
  const double cutoff2 = (physics.cutoff_sigmas * sigma) * (physics.cutoff_sigmas * sigma);
  SparseColumn col;
  for (std::size_t v = 0; v < grid.size(); ++v) {
    const Vec3 rel = grid.center_mm(v) - origin;
    const double t = rel.dot(dir);
    const Vec3 perp = rel - dir * t;
    const double r2 = perp.dot(perp);
    if (r2 > cutoff2) continue;
    const double value =
        physics.f0 * std::exp(-physics.mu_per_mm * radiological_depth(t)) * std::exp(-r2 / (2.0 * sigma * sigma));
    if (value < physics.prune_below) continue;
    col.voxels.push_back(static_cast<std::uint32_t>(v));
    col.values.push_back(static_cast<float>(value));
  }
  return col;
}

InfluenceMatrix::InfluenceMatrix(Dims dims, Spacing spacing, std::vector<Beam> beams,
                                 std::vector<SparseColumn> columns)
    : dims_(dims), spacing_(spacing), beams_(std::move(beams)) {
  col_ptr_.reserve(columns.size() + 1);
  col_ptr_.push_back(0);
  for (const auto& c : columns) {
    if (c.voxels.size() != c.values.size()) throw std::invalid_argument("column voxel/value length mismatch");
    for (std::size_t k = 0; k < c.voxels.size(); ++k) {
      if (c.voxels[k] >= dims_.count()) throw std::invalid_argument("influence voxel index out of range");
      if (!(c.values[k] >= 0.0f) || !std::isfinite(c.values[k])) {
        throw std::invalid_argument("influence entries must be finite and nonnegative");
      }
    }
    voxels_.insert(voxels_.end(), c.voxels.begin(), c.voxels.end());
    values_.insert(values_.end(), c.values.begin(), c.values.end());
    col_ptr_.push_back(voxels_.size());
  }
}

std::vector<double> InfluenceMatrix::row_sums() const {
  std::vector<double> out(num_voxels(), 0.0);
  for (std::size_t k = 0; k < voxels_.size(); ++k) out[voxels_[k]] += values_[k];
  return out;
}

std::vector<double> InfluenceMatrix::dense_rows(std::span<const std::size_t> voxels) const {
  const std::size_t nb = num_beamlets();
  std::vector<double> out(voxels.size() * nb, 0.0);
  std::vector<std::int64_t> row_of(num_voxels(), -1);
  for (std::size_t k = 0; k < voxels.size(); ++k) row_of.at(voxels[k]) = static_cast<std::int64_t>(k);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t k = col_ptr_[b]; k < col_ptr_[b + 1]; ++k) {
      const auto r = row_of[voxels_[k]];
      if (r >= 0) out[static_cast<std::size_t>(r) * nb + b] = values_[k];
    }
  }
  return out;
}

std::vector<double> InfluenceMatrix::transpose_multiply(std::span<const double> r) const {
  if (r.size() != num_voxels()) throw std::invalid_argument("transpose_multiply: length mismatch");
  std::vector<double> out(num_beamlets(), 0.0);
  for (std::size_t b = 0; b < out.size(); ++b) {
    double s = 0.0;
    for (std::size_t k = col_ptr_[b]; k < col_ptr_[b + 1]; ++k) s += values_[k] * r[voxels_[k]];
    out[b] = s;
  }
  return out;
}

InfluenceMatrix influence_matrix(const VoxelGrid& grid, const std::vector<Beam>& beams,
                                 const PhysicsConfig& physics, int threads) {
  if (beams.empty()) throw std::invalid_argument("influence_matrix needs at least one beam");
  struct Job {
    std::size_t beam;
    int beamlet;
  };
  std::vector<Job> jobs;
  for (std::size_t k = 0; k < beams.size(); ++k) {
    for (int b = 0; b < beams[k].beamlet_count(); ++b) jobs.push_back({k, b});
  }
  std::vector<SparseColumn> columns(jobs.size());
  auto work = [&](std::size_t start, std::size_t stride) {
    for (std::size_t j = start; j < jobs.size(); j += stride) {
      columns[j] = trace_beamlet(grid, beams[jobs[j].beam], jobs[j].beamlet, physics);
    }
  };
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
  }
  return InfluenceMatrix(grid.dims(), grid.spacing(), beams, std::move(columns));
}

DoseDistribution compute_dose(const InfluenceMatrix& a, std::span<const double> fluence) {
  if (fluence.size() != a.num_beamlets()) {
    throw std::invalid_argument("fluence length " + std::to_string(fluence.size()) + " != beamlets " +
                                std::to_string(a.num_beamlets()));
  }
  DoseDistribution d{a.dims(), a.spacing(), std::vector<double>(a.num_voxels(), 0.0)};
  for (std::size_t b = 0; b < fluence.size(); ++b) {
    const double w = fluence[b];
    if (w < 0.0 || !std::isfinite(w)) throw std::invalid_argument("fluence must be finite and nonnegative");
    if (w == 0.0) continue;
    const auto vox = a.column_voxels(b);
    const auto val = a.column_values(b);
    for (std::size_t k = 0; k < vox.size(); ++k) d.values[vox[k]] += val[k] * w;
  }
  return d;
}

void write_influence(std::ostream& os, const InfluenceMatrix& a) {
  io::put_magic(os, "KBPI");
  io::put_u32(os, 1);
  io::put_u32(os, static_cast<std::uint32_t>(a.dims().nx));
  io::put_u32(os, static_cast<std::uint32_t>(a.dims().ny));
  io::put_u32(os, static_cast<std::uint32_t>(a.dims().nz));
  io::put_f32(os, static_cast<float>(a.spacing().x));
  io::put_f32(os, static_cast<float>(a.spacing().y));
  io::put_f32(os, static_cast<float>(a.spacing().z));
  io::put_u32(os, static_cast<std::uint32_t>(a.num_beamlets()));
  io::put_u32(os, static_cast<std::uint32_t>(a.beams().size()));
  for (const auto& b : a.beams()) {
    io::put_f64(os, b.gantry_deg);
    io::put_f64(os, b.source_distance_mm);
    io::put_u32(os, static_cast<std::uint32_t>(b.rows));
    io::put_u32(os, static_cast<std::uint32_t>(b.cols));
    io::put_f64(os, b.beamlet_width_mm);
    io::put_f64(os, b.isocenter.x);
    io::put_f64(os, b.isocenter.y);
    io::put_f64(os, b.isocenter.z);
    io::put_f64(os, b.lateral_center_mm);
    io::put_f64(os, b.axial_center_mm);
  }
  for (std::size_t c = 0; c < a.num_beamlets(); ++c) {
    const auto vox = a.column_voxels(c);
    const auto val = a.column_values(c);
    io::put_u32(os, static_cast<std::uint32_t>(vox.size()));
    for (std::size_t k = 0; k < vox.size(); ++k) {
      io::put_u32(os, vox[k]);
      io::put_f32(os, val[k]);
    }
  }
}

InfluenceMatrix read_influence(std::istream& is) {
  io::expect_magic(is, "KBPI");
  if (io::get_u32(is) != 1) throw io::FormatError("unsupported KBPI version");
  Dims dims;
  dims.nx = static_cast<int>(io::get_u32(is));
  dims.ny = static_cast<int>(io::get_u32(is));
  dims.nz = static_cast<int>(io::get_u32(is));
  Spacing sp;
  sp.x = io::get_f32(is);
  sp.y = io::get_f32(is);
  sp.z = io::get_f32(is);
  const auto nb = io::get_u32(is);
  const auto nbeams = io::get_u32(is);
  std::vector<Beam> beams(nbeams);
  for (auto& b : beams) {
    b.gantry_deg = io::get_f64(is);
    b.source_distance_mm = io::get_f64(is);
    b.rows = static_cast<int>(io::get_u32(is));
    b.cols = static_cast<int>(io::get_u32(is));
    b.beamlet_width_mm = io::get_f64(is);
    b.isocenter.x = io::get_f64(is);
    b.isocenter.y = io::get_f64(is);
    b.isocenter.z = io::get_f64(is);
    b.lateral_center_mm = io::get_f64(is);
    b.axial_center_mm = io::get_f64(is);
  }
  std::vector<SparseColumn> cols(nb);
  for (auto& c : cols) {
    const auto n = io::get_u32(is);
    c.voxels.resize(n);
    c.values.resize(n);
    for (std::uint32_t k = 0; k < n; ++k) {
      c.voxels[k] = io::get_u32(is);
      c.values[k] = io::get_f32(is);
    }
  }
  return InfluenceMatrix(dims, sp, std::move(beams), std::move(cols));
}

void write_influence_file(const std::filesystem::path& path, const InfluenceMatrix& a) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_influence(os, a);
}

InfluenceMatrix read_influence_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_influence(is);
}

}  // namespace kbp
