// Copyright 2026 The cdflow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "cdflow/geometry.hpp"
#include "cdflow/io.hpp"

namespace cdflow {

/// Dense census of the colliding set over the joint box: the brute-force
/// ground truth that sampling and learning are validated against. Never used
/// for training.
class CollisionGrid {
 public:
  CollisionGrid() = default;

  CollisionGrid(std::vector<int> resolution, Configuration lower, Configuration upper,
                std::vector<std::uint64_t> flag_words, std::size_t cell_count)
      : resolution_(std::move(resolution)),
        lower_(std::move(lower)),
        upper_(std::move(upper)),
        flags_(std::move(flag_words)),
        cells_(cell_count) {
    rebuild_cache();
  }

  int dof() const { return static_cast<int>(resolution_.size()); }
  const std::vector<int>& resolution() const { return resolution_; }
  const Configuration& lower() const { return lower_; }
  const Configuration& upper() const { return upper_; }
  std::size_t cell_count() const { return cells_; }

  double step(int axis) const { return (upper_[axis] - lower_[axis]) / resolution_[axis]; }

  /// Diagonal of one grid cell; the resolution scale of every oracle bound.
  double cell_diagonal() const {
    double s = 0.0;
    for (int a = 0; a < dof(); ++a) s += step(a) * step(a);
    return std::sqrt(s);
  }

  bool flag(std::size_t idx) const { return (flags_[idx >> 6] >> (idx & 63)) & 1u; }

  std::size_t colliding_count() const { return colliding_count_; }
  double colliding_fraction() const {
    return cells_ == 0 ? 0.0 : static_cast<double>(colliding_count_) / static_cast<double>(cells_);
  }

  /// Colliding cell centers, flattened row-major (stride = dof).
  const std::vector<double>& colliding_points() const { return colliding_points_; }

  Configuration cell_center(std::size_t idx) const {
    Configuration q(dof());
    for (int a = dof() - 1; a >= 0; --a) {
      const std::size_t n = static_cast<std::size_t>(resolution_[a]);
      const std::size_t i = idx % n;
      idx /= n;
      q[a] = lower_[a] + (static_cast<double>(i) + 0.5) * step(a);
    }
    return q;
  }

  std::size_t cell_index(const Configuration& q) const {
    std::size_t idx = 0;
    for (int a = 0; a < dof(); ++a) {
      double t = (q[a] - lower_[a]) / step(a);
      long i = static_cast<long>(std::floor(t));
      i = std::min<long>(std::max<long>(i, 0), resolution_[a] - 1);
      idx = idx * static_cast<std::size_t>(resolution_[a]) + static_cast<std::size_t>(i);
    }
    return idx;
  }

  bool inside_bounds(const Configuration& q) const {
    for (int a = 0; a < dof(); ++a) {
      if (q[a] < lower_[a] || q[a] > upper_[a]) return false;
    }
    return true;
  }

  const std::vector<std::uint64_t>& flag_words() const { return flags_; }

  void save(const std::string& path) const {
    BinaryWriter w(path);
    w.u32(kMagic);
    w.u32(1);  // format version
    w.u32(static_cast<std::uint32_t>(dof()));
    for (int a = 0; a < dof(); ++a) w.u32(static_cast<std::uint32_t>(resolution_[a]));
    for (int a = 0; a < dof(); ++a) w.f64(lower_[a]);
    for (int a = 0; a < dof(); ++a) w.f64(upper_[a]);
    w.u64(cells_);
    w.u64(flags_.size());
    for (std::uint64_t word : flags_) w.u64(word);
  }

  static CollisionGrid load(const std::string& path) {
    BinaryReader r(path);
    if (r.u32() != kMagic) throw IoError("not a collision grid file: " + path);
    if (r.u32() != 1) throw IoError("unsupported grid version in " + path);
    const int dof = static_cast<int>(r.u32());
    std::vector<int> res(dof);
    for (auto& n : res) n = static_cast<int>(r.u32());
    Configuration lo(dof), hi(dof);
    for (int a = 0; a < dof; ++a) lo[a] = r.f64();
    for (int a = 0; a < dof; ++a) hi[a] = r.f64();
    const std::size_t cells = r.u64();
    std::vector<std::uint64_t> words(r.u64());
    for (auto& word : words) word = r.u64();
    return CollisionGrid(std::move(res), std::move(lo), std::move(hi), std::move(words), cells);
  }

 private:
  static constexpr std::uint32_t kMagic = 0x47464443;  // "CDFG"

  void rebuild_cache() {
    colliding_count_ = 0;
    colliding_points_.clear();
    for (std::size_t i = 0; i < cells_; ++i) {
      if (!flag(i)) continue;
      ++colliding_count_;
      const Configuration c = cell_center(i);
      colliding_points_.insert(colliding_points_.end(), c.data(), c.data() + c.size());
    }
  }

  std::vector<int> resolution_;
  Configuration lower_;
  Configuration upper_;
  std::vector<std::uint64_t> flags_;
  std::size_t cells_ = 0;
  std::size_t colliding_count_ = 0;
  std::vector<double> colliding_points_;
};

/// Exhaustive collision census of the joint box at the given per-axis
/// resolution. Deterministic; refuses more than 1e8 cells.
inline CollisionGrid build_collision_grid(const RobotModel& model, const Scene& scene,
                                          const std::vector<int>& resolution) {
  if (static_cast<int>(resolution.size()) != model.dof()) {
    throw std::invalid_argument("build_collision_grid: resolution size must equal dof");
  }
  std::size_t cells = 1;
  for (int n : resolution) {
    if (n < 2) throw std::invalid_argument("build_collision_grid: resolution must be >= 2 per axis");
    cells *= static_cast<std::size_t>(n);
    if (cells > 100000000ULL) throw GridSizeError("build_collision_grid: more than 1e8 cells");
  }
  const Configuration lo = model.lower_limits();
  const Configuration hi = model.upper_limits();
  std::vector<std::uint64_t> words((cells + 63) / 64, 0);

  const int dof = model.dof();
  std::vector<double> steps(dof);
  for (int a = 0; a < dof; ++a) steps[a] = (hi[a] - lo[a]) / resolution[a];
  std::vector<std::size_t> ix(dof, 0);
  Configuration q(dof);
  for (int a = 0; a < dof; ++a) q[a] = lo[a] + 0.5 * steps[a];
  for (std::size_t idx = 0; idx < cells; ++idx) {
    if (is_colliding(model, scene, q)) words[idx >> 6] |= (1ULL << (idx & 63));
    // Advance the odometer over cell indices, last axis fastest.
    for (int a = dof - 1; a >= 0; --a) {
      if (++ix[a] < static_cast<std::size_t>(resolution[a])) {
        q[a] = lo[a] + (static_cast<double>(ix[a]) + 0.5) * steps[a];
        break;
      }
      ix[a] = 0;
      q[a] = lo[a] + 0.5 * steps[a];
    }
  }
  return CollisionGrid(resolution, lo, hi, std::move(words), cells);
}

/// Exact-within-resolution answer for one query: the minimal distance to the
/// colliding census and every census point attaining it within `tol`.
struct OracleAnswer {
  double d_min = kInf;
  std::vector<Configuration> minimal_set;
  Configuration query;
};

/// Default minimal-set tolerance: 1.5 grid cell diagonals.
inline double default_oracle_tol(const CollisionGrid& grid) { return 1.5 * grid.cell_diagonal(); }

inline OracleAnswer oracle_cdf(const CollisionGrid& grid, const Configuration& q, double tol) {
  if (grid.cell_count() == 0 || grid.dof() != q.size()) {
    throw std::invalid_argument("oracle_cdf: degenerate grid or dimension mismatch");
  }
  if (!grid.inside_bounds(q)) throw std::invalid_argument("oracle_cdf: query outside grid bounds");
  OracleAnswer ans;
  ans.query = q;
  if (grid.colliding_count() == 0) {
    ans.d_min = kInf;  // free scene
    return ans;
  }
  if (grid.flag(grid.cell_index(q))) {
    ans.d_min = 0.0;
    ans.minimal_set.push_back(grid.cell_center(grid.cell_index(q)));
    return ans;
  }
  const int dof = grid.dof();
  const auto& pts = grid.colliding_points();
  const std::size_t n = pts.size() / dof;
  double best = kInf;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int a = 0; a < dof; ++a) {
      const double d = q[a] - pts[i * dof + a];
      s += d * d;
    }
    best = std::min(best, s);
  }
  ans.d_min = std::sqrt(best);
  const double cutoff = ans.d_min + tol;
  const double cutoff2 = cutoff * cutoff;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int a = 0; a < dof; ++a) {
      const double d = q[a] - pts[i * dof + a];
      s += d * d;
    }
    if (s <= cutoff2) {
      Configuration c(dof);
      for (int a = 0; a < dof; ++a) c[a] = pts[i * dof + a];
      ans.minimal_set.push_back(std::move(c));
    }
  }
  return ans;
}

/// Expected unit direction away from the minimal-distance census points,
/// uniform weights. Undefined on the colliding set.
inline Eigen::VectorXd oracle_gradient(const CollisionGrid& grid, const Configuration& q,
                                       double tol) {
  const OracleAnswer ans = oracle_cdf(grid, q, tol);
  if (!(ans.d_min > 0.0) || !std::isfinite(ans.d_min)) {
    throw GradientUndefinedError("oracle_gradient: query colliding or scene free");
  }
  Eigen::VectorXd g = Eigen::VectorXd::Zero(q.size());
  for (const auto& p : ans.minimal_set) {
    g += (q - p).normalized();
  }
  return g / static_cast<double>(ans.minimal_set.size());
}

inline Eigen::VectorXd oracle_gradient(const CollisionGrid& grid, const Configuration& q) {
  return oracle_gradient(grid, q, default_oracle_tol(grid));
}

inline OracleAnswer oracle_cdf(const CollisionGrid& grid, const Configuration& q) {
  return oracle_cdf(grid, q, default_oracle_tol(grid));
}

}  // namespace cdflow
