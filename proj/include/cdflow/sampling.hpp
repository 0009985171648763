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

#include <array>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cdflow/field.hpp"
#include "cdflow/geometry.hpp"
#include "cdflow/io.hpp"
#include "cdflow/parallel.hpp"
#include "cdflow/rng.hpp"

namespace cdflow {

struct SamplerConfig {
  int n_global = 16;             // global exploration seeds
  int n_local = 8;               // refinement re-seeds per kept solution
  double radius = 0.3;           // refinement ball radius, radians
  int max_opt_iters = 120;       // descent iteration budget per seed
  double boundary_tol = 1e-4;    // |clearance| band accepted as "on boundary", meters
  double equality_tol_rel = 0.01;  // relative tolerance of the near-minimal test
  std::uint64_t rng_seed = 0;
  int max_samples = 64;          // cap on |S| per query

  /// Deduplication resolution; refinement concentrates samples on purpose and
  /// this keeps that concentration from distorting mode weights.
  double dedup_radius() const { return radius / 10.0; }
};

/// Empirical approximation of the minimal-distance collision set for one
/// query.
struct CollisionSampleSet {
  Configuration query;
  std::vector<Configuration> samples;
  double d_min_est = kInf;
  std::string scene_id;
};

struct SampleDiagnostics {
  int optimizer_calls = 0;
  int global_failures = 0;
  int refinement_accepted = 0;
};

/// Projects q_init onto the collision boundary while locally minimizing the
/// distance to q_query: exterior-penalty gradient descent on
/// |x - q_query|^2 + mu * max(0, clearance(x))^2 with mu ramped, finite
/// difference clearance gradients and backtracking line search, finished by a
/// bisection onto the zero-clearance level set. Returns nothing when the seed
/// fails to converge within the iteration budget.
inline std::optional<Configuration> optimize_to_boundary(const RobotModel& model,
                                                         const Scene& scene,
                                                         const Configuration& q_init,
                                                         const Configuration& q_query,
                                                         const SamplerConfig& cfg) {
  if (scene.obstacles.empty()) return std::nullopt;
  auto clearance = [&](const Configuration& x) { return robot_scene_distance(model, scene, x); };
  if (clearance(q_query) <= 0.0) return q_query;  // degenerate: query already colliding

  const int dof = model.dof();
  const double limit_margin = 1e-5;  // keeps finite-difference probes inside limits
  const double fd_h = 1e-6;
  Configuration x = model.clamp_to_limits(q_init, limit_margin);

  auto clearance_gradient = [&](const Configuration& p) {
    Eigen::VectorXd g(dof);
    Configuration probe = p;
    for (int i = 0; i < dof; ++i) {
      probe[i] = p[i] + fd_h;
      const double dp = clearance(probe);
      probe[i] = p[i] - fd_h;
      const double dm = clearance(probe);
      probe[i] = p[i];
      g[i] = (dp - dm) / (2.0 * fd_h);
    }
    return g;
  };
  auto objective = [&](const Configuration& p, double mu) {
    const double d = std::max(0.0, clearance(p));
    return (p - q_query).squaredNorm() + mu * d * d;
  };

  const std::array<double, 3> mu_levels = {1e2, 1e4, 1e6};
  const int iters_per_level = std::max(1, cfg.max_opt_iters / static_cast<int>(mu_levels.size()));
  double step_hint = 0.25;
  Eigen::VectorXd last_dir = Eigen::VectorXd::Zero(dof);
  for (const double mu : mu_levels) {
    for (int it = 0; it < iters_per_level; ++it) {
      const double d = clearance(x);
      Eigen::VectorXd grad = 2.0 * (x - q_query);
      if (d > 0.0) grad += (2.0 * mu * d) * clearance_gradient(x);
      const double gn = grad.norm();
      if (gn < 1e-12) break;
      const Eigen::VectorXd dir = -grad / gn;
      const double f0 = objective(x, mu);
      double step = std::min(2.0 * step_hint, 0.5);
      bool accepted = false;
      for (int ls = 0; ls < 40; ++ls) {
        const Configuration trial = model.clamp_to_limits(x + step * dir, limit_margin);
        if (objective(trial, mu) <= f0 - 1e-4 * step * gn) {
          x = trial;
          step_hint = step;
          last_dir = dir;
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) break;  // stationary at this penalty level
    }
  }

  // Land exactly on the boundary along the last descent direction.
  auto bisect_to_boundary = [&](Configuration free_pt, Configuration hit_pt) {
    for (int k = 0; k < 48; ++k) {
      const Configuration mid = 0.5 * (free_pt + hit_pt);
      const double dm = clearance(mid);
      if (dm <= 0.0) {
        hit_pt = mid;
        if (dm > -0.25 * cfg.boundary_tol) break;
      } else {
        free_pt = mid;
      }
      if ((free_pt - hit_pt).norm() < 1e-13) break;
    }
    return std::abs(clearance(hit_pt)) <= std::abs(clearance(free_pt)) ? hit_pt : free_pt;
  };
  // Crossing search from a free point along dir; returns the boundary point.
  auto cross_and_bisect = [&](const Configuration& from,
                              const Eigen::VectorXd& dir) -> std::optional<Configuration> {
    const double d0 = clearance(from);
    if (d0 <= 0.0) return from;
    double t = std::max(d0, 1e-9) / chain_lipschitz_bound(model);
    const double t_cap = 2.0 * (model.upper_limits() - model.lower_limits()).norm();
    Configuration free_pt = from;
    for (int k = 0; k < 48 && t <= t_cap; ++k) {
      const Configuration probe = model.clamp_to_limits(from + t * dir, limit_margin);
      if (clearance(probe) <= 0.0) return bisect_to_boundary(free_pt, probe);
      free_pt = probe;
      t *= 1.6;
    }
    return std::nullopt;
  };

  double dx = clearance(x);
  if (std::abs(dx) > cfg.boundary_tol) {
    if (dx > 0.0) {
      Eigen::VectorXd dir = last_dir;
      if (dir.norm() < 1e-12) {
        const Eigen::VectorXd cg = clearance_gradient(x);
        if (cg.norm() < 1e-12) return std::nullopt;
        dir = -cg / cg.norm();
      }
      auto hit = cross_and_bisect(x, dir);
      if (!hit) return std::nullopt;
      x = *hit;
    } else {
      x = bisect_to_boundary(q_query, x);  // clearance(q_query) > 0 was checked above
    }
    dx = clearance(x);
  }
  if (std::abs(dx) > cfg.boundary_tol || !model.within_limits(x, 1e-9)) return std::nullopt;

  // Tangential slide: local descent of |x - q_query| constrained to the
  // boundary, so returned points sit near a local minimizer along their
  // island rather than wherever the penalty phase happened to stall. The
  // coarse improvement cutoff keeps solutions scattered at the near-minimal
  // shell scale instead of collapsing every seed onto the exact minimizer;
  // that scatter is what local refinement is meant to densify.
  const double slide_armijo = 0.1;  // stop offset ~0.1 * d: distance excess ~0.5% of d
  double slide_step = 0.25;
  for (int it = 0; it < 10 && slide_step > 1e-3; ++it) {
    const Eigen::VectorXd normal = clearance_gradient(x);
    const double nn = normal.norm();
    if (nn < 1e-10) break;
    const Eigen::VectorXd unit_normal = normal / nn;
    Eigen::VectorXd pull = q_query - x;
    Eigen::VectorXd tangent = pull - pull.dot(unit_normal) * unit_normal;
    const double tn = tangent.norm();
    if (tn < 1e-10) break;
    tangent /= tn;
    bool improved = false;
    while (slide_step > 1e-7) {
      Configuration trial = model.clamp_to_limits(x + slide_step * tangent, limit_margin);
      // Re-project onto the boundary along the clearance normal.
      const double dt = clearance(trial);
      std::optional<Configuration> back;
      if (dt > 0.0) {
        back = cross_and_bisect(trial, -unit_normal);
      } else {
        double t = std::max(-dt, 1e-9) / std::max(nn, 1e-6);
        back.reset();
        for (int k = 0; k < 24; ++k) {
          const Configuration probe = model.clamp_to_limits(trial + t * unit_normal, limit_margin);
          if (clearance(probe) > 0.0) {
            back = bisect_to_boundary(probe, trial);
            break;
          }
          t *= 1.6;
        }
      }
      if (back.has_value() && std::abs(clearance(*back)) <= cfg.boundary_tol &&
          (*back - q_query).norm() < (x - q_query).norm() - slide_armijo * slide_step) {
        x = *back;
        improved = true;
        slide_step = std::min(2.0 * slide_step, 0.25);
        break;
      }
      slide_step *= 0.5;
    }
    if (!improved) break;
  }

  dx = clearance(x);
  if (std::abs(dx) <= cfg.boundary_tol && model.within_limits(x, 1e-9)) return x;
  return std::nullopt;
}

namespace detail {
inline constexpr std::uint64_t kGlobalSalt = 0x41;
inline constexpr std::uint64_t kLocalSalt = 0x42;
}  // namespace detail

/// Two-stage adaptive refinement: global exploration seeds projected to the
/// boundary, a near-minimal filter, then dense re-seeding inside an eps-ball
/// around each kept solution. Refinement seeds derive from the parent's
/// global seed index so nested seed ladders stay comparable.
inline CollisionSampleSet adaptive_refinement_sample(const RobotModel& model, const Scene& scene,
                                                     const Configuration& q,
                                                     const SamplerConfig& cfg,
                                                     std::uint64_t stream_seed,
                                                     SampleDiagnostics* diag = nullptr) {
  model.require_within_limits(q);
  CollisionSampleSet out;
  out.query = q;
  out.scene_id = scene.id;
  SampleDiagnostics local_diag;

  if (is_colliding(model, scene, q)) {
    // d_min = 0: the set degenerates to the query itself.
    out.samples = {q};
    out.d_min_est = 0.0;
    if (diag != nullptr) *diag = local_diag;
    return out;
  }

  // Global exploration.
  std::vector<std::pair<Configuration, int>> global_solutions;
  for (int i = 0; i < cfg.n_global; ++i) {
    Rng rng = Rng::stream(stream_seed, detail::kGlobalSalt, static_cast<std::uint64_t>(i));
    const Configuration seed = rng.uniform_box(model.lower_limits(), model.upper_limits());
    ++local_diag.optimizer_calls;
    if (auto sol = optimize_to_boundary(model, scene, seed, q, cfg)) {
      global_solutions.emplace_back(std::move(*sol), i);
    } else {
      ++local_diag.global_failures;
    }
  }
  if (global_solutions.empty()) {
    std::ostringstream os;
    os << "adaptive_refinement_sample: all " << cfg.n_global
       << " global seeds failed (scene '" << scene.id << "', max_opt_iters=" << cfg.max_opt_iters
       << "); the scene may have no reachable obstacle";
    throw EmptySampleSetError(os.str());
  }

  double d_min = kInf;
  for (const auto& [sol, idx] : global_solutions) d_min = std::min(d_min, (q - sol).norm());
  const double keep_tol = d_min * (1.0 + cfg.equality_tol_rel);

  std::vector<std::pair<Configuration, int>> kept;
  for (const auto& entry : global_solutions) {
    if ((q - entry.first).norm() <= keep_tol) kept.push_back(entry);
  }

  // Local refinement (single pass over the kept global solutions).
  std::vector<Configuration> collected;
  collected.reserve(kept.size() * static_cast<std::size_t>(1 + cfg.n_local));
  for (const auto& [sol, idx] : kept) collected.push_back(sol);
  for (const auto& [parent, gi] : kept) {
    for (int j = 0; j < cfg.n_local; ++j) {
      Rng rng = Rng::stream(stream_seed, detail::kLocalSalt, static_cast<std::uint64_t>(gi),
                            static_cast<std::uint64_t>(j));
      const Configuration seed = model.clamp_to_limits(rng.uniform_ball(parent, cfg.radius));
      ++local_diag.optimizer_calls;
      if (auto sol = optimize_to_boundary(model, scene, seed, q, cfg)) {
        if ((q - *sol).norm() <= keep_tol) {
          collected.push_back(std::move(*sol));
          ++local_diag.refinement_accepted;
        }
      }
    }
  }

  // Refinement may have found strictly better points; re-center the estimate
  // and keep the set self-consistent with it.
  double d_est = kInf;
  for (const auto& s : collected) d_est = std::min(d_est, (q - s).norm());
  const double final_tol = d_est * (1.0 + cfg.equality_tol_rel);
  const double dedup = cfg.dedup_radius();
  std::vector<Configuration> samples;
  for (const auto& s : collected) {
    if ((q - s).norm() > final_tol) continue;
    bool duplicate = false;
    for (const auto& kept_sample : samples) {
      if ((s - kept_sample).norm() < dedup) {
        duplicate = true;
        break;
      }
    }
    if (!duplicate) samples.push_back(s);
    if (static_cast<int>(samples.size()) >= cfg.max_samples) break;
  }
  out.samples = std::move(samples);
  out.d_min_est = d_est;
  if (diag != nullptr) *diag = local_diag;
  return out;
}

inline CollisionSampleSet adaptive_refinement_sample(const RobotModel& model, const Scene& scene,
                                                     const Configuration& q,
                                                     const SamplerConfig& cfg) {
  return adaptive_refinement_sample(model, scene, q, cfg, cfg.rng_seed);
}

/// Sparse, query-independent boundary sample set: free random seeds projected
/// onto the collision boundary. This is what the single-nearest baseline
/// consumes.
inline std::vector<Configuration> sample_boundary_set(const RobotModel& model, const Scene& scene,
                                                      int count, const SamplerConfig& cfg,
                                                      std::uint64_t seed) {
  std::vector<Configuration> out;
  if (scene.obstacles.empty()) return out;
  const double dedup = cfg.dedup_radius();
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::stream(seed, 0x62, static_cast<std::uint64_t>(i));
    Configuration start;
    bool found_free = false;
    for (int tries = 0; tries < 64; ++tries) {
      start = rng.uniform_box(model.lower_limits(), model.upper_limits());
      if (!is_colliding(model, scene, start)) {
        found_free = true;
        break;
      }
    }
    if (!found_free) continue;
    if (auto sol = optimize_to_boundary(model, scene, start, start, cfg)) {
      bool duplicate = false;
      for (const auto& s : out) {
        if ((s - *sol).norm() < dedup) {
          duplicate = true;
          break;
        }
      }
      if (!duplicate) out.push_back(std::move(*sol));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset construction
// ---------------------------------------------------------------------------

struct TrainingRecord {
  Configuration q;
  int scene_index = 0;
  std::vector<Configuration> samples;
  double y_d = 0.0;
  std::optional<Eigen::VectorXd> y_g;  // absent for colliding / boundary queries
};

struct Dataset {
  explicit Dataset(RobotModel r) : robot(std::move(r)) {}

  RobotModel robot;
  std::vector<Scene> scenes;
  SamplerConfig sampler;
  int queries_per_scene = 0;
  std::vector<TrainingRecord> records;
  std::uint64_t requested = 0;
  std::uint64_t dropped = 0;
  std::vector<std::string> free_scene_ids;

  const Scene& scene_of(const TrainingRecord& rec) const {
    return scenes[static_cast<std::size_t>(rec.scene_index)];
  }
};

inline bool scene_reachable(const RobotModel& model, const Scene& scene) {
  double max_link_radius = 0.0;
  for (double r : model.link_radii()) max_link_radius = std::max(max_link_radius, r);
  for (const auto& ob : scene.obstacles) {
    if (ob.center.norm() - ob.radius - max_link_radius <= model.reach()) return true;
  }
  return false;
}

/// Uniform random queries per scene, each answered by adaptive refinement;
/// regression targets are the empirical distance/direction over the sample
/// set. Scenes with no reachable obstacle are skipped and reported; queries
/// whose sampler fails are dropped, and more than 50% drops is an error.
inline Dataset build_dataset(const RobotModel& model, const std::vector<Scene>& scenes,
                             int n_queries_per_scene, const SamplerConfig& cfg, int threads = 1) {
  if (n_queries_per_scene < 1) {
    throw std::invalid_argument("build_dataset: n_queries_per_scene must be >= 1");
  }
  Dataset ds(model);
  ds.sampler = cfg;
  ds.queries_per_scene = n_queries_per_scene;

  std::vector<int> active;
  for (std::size_t si = 0; si < scenes.size(); ++si) {
    ds.scenes.push_back(scenes[si]);
    if (scene_reachable(model, scenes[si])) {
      active.push_back(static_cast<int>(si));
    } else {
      ds.free_scene_ids.push_back(scenes[si].id);
    }
  }

  const std::size_t total = active.size() * static_cast<std::size_t>(n_queries_per_scene);
  ds.requested = total;
  std::vector<std::optional<TrainingRecord>> slots(total);
  parallel_for(total, threads, [&](std::size_t k) {
    const int scene_index = active[k / static_cast<std::size_t>(n_queries_per_scene)];
    const auto query_index = static_cast<std::uint64_t>(k % static_cast<std::size_t>(n_queries_per_scene));
    const Scene& scene = scenes[static_cast<std::size_t>(scene_index)];
    Rng qrng = Rng::stream(cfg.rng_seed, 0x71, static_cast<std::uint64_t>(scene_index), query_index);
    const Configuration q = qrng.uniform_box(model.lower_limits(), model.upper_limits());
    const std::uint64_t sampler_seed =
        Rng::stream(cfg.rng_seed, 0x73, static_cast<std::uint64_t>(scene_index), query_index).next_u64();
    try {
      CollisionSampleSet set = adaptive_refinement_sample(model, scene, q, cfg, sampler_seed);
      TrainingRecord rec;
      rec.q = q;
      rec.scene_index = scene_index;
      rec.samples = std::move(set.samples);
      if (set.d_min_est == 0.0) {
        rec.y_d = 0.0;
      } else {
        rec.y_d = empirical_distance(q, rec.samples);
        try {
          rec.y_g = empirical_gradient(q, rec.samples);
        } catch (const GradientUndefinedError&) {
          rec.y_g.reset();  // query on the boundary: direction undefined
        }
      }
      slots[k] = std::move(rec);
    } catch (const EmptySampleSetError&) {
      slots[k].reset();
    }
  });

  for (auto& slot : slots) {
    if (slot.has_value()) {
      ds.records.push_back(std::move(*slot));
    } else {
      ++ds.dropped;
    }
  }
  if (total > 0 && ds.dropped * 2 > total) {
    std::ostringstream os;
    os << "build_dataset: " << ds.dropped << " of " << total << " records dropped";
    throw DatasetQualityError(os.str());
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset persistence
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::string& path) {
  BinaryWriter w(path);
  w.u32(0x44464443);  // "CDFD"
  w.u32(1);
  const auto& model = ds.robot;
  w.u32(static_cast<std::uint32_t>(model.dof()));
  for (double l : model.link_lengths()) w.f64(l);
  for (double r : model.link_radii()) w.f64(r);
  for (const auto& jl : model.joint_limits()) {
    w.f64(jl.lo);
    w.f64(jl.hi);
  }
  w.u32(static_cast<std::uint32_t>(ds.sampler.n_global));
  w.u32(static_cast<std::uint32_t>(ds.sampler.n_local));
  w.f64(ds.sampler.radius);
  w.u32(static_cast<std::uint32_t>(ds.sampler.max_opt_iters));
  w.f64(ds.sampler.boundary_tol);
  w.f64(ds.sampler.equality_tol_rel);
  w.u32(static_cast<std::uint32_t>(ds.sampler.max_samples));
  w.u64(ds.sampler.rng_seed);
  w.u32(static_cast<std::uint32_t>(ds.queries_per_scene));
  w.u32(static_cast<std::uint32_t>(ds.scenes.size()));
  for (const auto& scene : ds.scenes) {
    w.str(scene.id);
    w.u32(static_cast<std::uint32_t>(scene.obstacles.size()));
    for (const auto& ob : scene.obstacles) {
      w.f64(ob.center.x());
      w.f64(ob.center.y());
      w.f64(ob.radius);
    }
  }
  w.u64(ds.requested);
  w.u64(ds.dropped);
  w.u32(static_cast<std::uint32_t>(ds.free_scene_ids.size()));
  for (const auto& id : ds.free_scene_ids) w.str(id);
  w.u64(ds.records.size());
  for (const auto& rec : ds.records) {
    w.u32(static_cast<std::uint32_t>(rec.scene_index));
    w.f64s(rec.q.data(), static_cast<std::size_t>(rec.q.size()));
    w.f64(rec.y_d);
    w.u32(rec.y_g.has_value() ? 1u : 0u);
    if (rec.y_g.has_value()) w.f64s(rec.y_g->data(), static_cast<std::size_t>(rec.y_g->size()));
    w.u32(static_cast<std::uint32_t>(rec.samples.size()));
    for (const auto& s : rec.samples) w.f64s(s.data(), static_cast<std::size_t>(s.size()));
  }
}

inline Dataset load_dataset(const std::string& path) {
  BinaryReader r(path);
  if (r.u32() != 0x44464443) throw IoError("not a dataset file: " + path);
  if (r.u32() != 1) throw IoError("unsupported dataset version: " + path);
  const int dof = static_cast<int>(r.u32());
  std::vector<double> lengths(static_cast<std::size_t>(dof));
  std::vector<double> radii(static_cast<std::size_t>(dof));
  std::vector<JointLimit> limits(static_cast<std::size_t>(dof));
  for (auto& l : lengths) l = r.f64();
  for (auto& rad : radii) rad = r.f64();
  for (auto& jl : limits) {
    jl.lo = r.f64();
    jl.hi = r.f64();
  }
  Dataset ds(RobotModel(std::move(lengths), std::move(radii), std::move(limits)));
  ds.sampler.n_global = static_cast<int>(r.u32());
  ds.sampler.n_local = static_cast<int>(r.u32());
  ds.sampler.radius = r.f64();
  ds.sampler.max_opt_iters = static_cast<int>(r.u32());
  ds.sampler.boundary_tol = r.f64();
  ds.sampler.equality_tol_rel = r.f64();
  ds.sampler.max_samples = static_cast<int>(r.u32());
  ds.sampler.rng_seed = r.u64();
  ds.queries_per_scene = static_cast<int>(r.u32());
  const std::uint32_t n_scenes = r.u32();
  for (std::uint32_t i = 0; i < n_scenes; ++i) {
    Scene s;
    s.id = r.str();
    const std::uint32_t n_obs = r.u32();
    for (std::uint32_t k = 0; k < n_obs; ++k) {
      const double cx = r.f64();
      const double cy = r.f64();
      const double rad = r.f64();
      s.obstacles.push_back({Vec2(cx, cy), rad});
    }
    ds.scenes.push_back(std::move(s));
  }
  ds.requested = r.u64();
  ds.dropped = r.u64();
  const std::uint32_t n_free = r.u32();
  for (std::uint32_t i = 0; i < n_free; ++i) ds.free_scene_ids.push_back(r.str());
  const std::uint64_t n_records = r.u64();
  ds.records.reserve(n_records);
  for (std::uint64_t i = 0; i < n_records; ++i) {
    TrainingRecord rec;
    rec.scene_index = static_cast<int>(r.u32());
    rec.q = Configuration(dof);
    r.f64s(rec.q.data(), static_cast<std::size_t>(dof));
    rec.y_d = r.f64();
    if (r.u32() == 1u) {
      Eigen::VectorXd g(dof);
      r.f64s(g.data(), static_cast<std::size_t>(dof));
      rec.y_g = std::move(g);
    }
    const std::uint32_t n_samples = r.u32();
    rec.samples.reserve(n_samples);
    for (std::uint32_t k = 0; k < n_samples; ++k) {
      Configuration s(dof);
      r.f64s(s.data(), static_cast<std::size_t>(dof));
      rec.samples.push_back(std::move(s));
    }
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

/// Human-readable tabular export: one row per (record, sample).
inline void export_dataset_csv(const Dataset& ds, std::ostream& out) {
  const int dof = ds.robot.dof();
  out << "record,scene_id";
  for (int a = 0; a < dof; ++a) out << ",q" << a;
  out << ",y_d,grad_defined";
  for (int a = 0; a < dof; ++a) out << ",y_g" << a;
  out << ",sample";
  for (int a = 0; a < dof; ++a) out << ",s" << a;
  out << "\n";
  out.precision(17);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& rec = ds.records[i];
    for (std::size_t k = 0; k < rec.samples.size(); ++k) {
      out << i << "," << ds.scene_of(rec).id;
      for (int a = 0; a < dof; ++a) out << "," << rec.q[a];
      out << "," << rec.y_d << "," << (rec.y_g.has_value() ? 1 : 0);
      for (int a = 0; a < dof; ++a) out << "," << (rec.y_g.has_value() ? (*rec.y_g)[a] : 0.0);
      out << "," << k;
      for (int a = 0; a < dof; ++a) out << "," << rec.samples[k][a];
      out << "\n";
    }
  }
}

}  // namespace cdflow
