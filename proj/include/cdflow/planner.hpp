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

#include <chrono>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cdflow/field.hpp"
#include "cdflow/geometry.hpp"
#include "cdflow/neural.hpp"
#include "cdflow/oracle.hpp"

namespace cdflow {

/// A distance/gradient field bound to one scene; what the planners consume.
class FieldProvider {
 public:
  virtual ~FieldProvider() = default;
  virtual FieldAnswer query(const Configuration& q) = 0;
  virtual std::string name() const = 0;
};

class OracleProvider : public FieldProvider {
 public:
  OracleProvider(const RobotModel& model, const Scene& scene, int resolution_per_axis = 128)
      : grid_(build_collision_grid(model, scene,
                                   std::vector<int>(static_cast<std::size_t>(model.dof()),
                                                    resolution_per_axis))) {}
  explicit OracleProvider(CollisionGrid grid) : grid_(std::move(grid)) {}

  FieldAnswer query(const Configuration& q) override {
    FieldAnswer ans;
    ans.provenance = Provenance::kOracle;
    const OracleAnswer oracle = oracle_cdf(grid_, q);
    ans.distance = oracle.d_min;
    if (oracle.d_min > 0.0 && std::isfinite(oracle.d_min)) {
      ans.gradient = oracle_gradient(grid_, q);
    }
    return ans;
  }

  std::string name() const override { return "oracle"; }
  const CollisionGrid& grid() const { return grid_; }

 private:
  CollisionGrid grid_;
};

class BaselineCdfProvider : public FieldProvider {
 public:
  explicit BaselineCdfProvider(std::vector<Configuration> boundary_samples)
      : samples_(std::move(boundary_samples)) {}

  FieldAnswer query(const Configuration& q) override { return baseline_cdf(q, samples_); }
  std::string name() const override { return "baseline_cdf"; }

 private:
  std::vector<Configuration> samples_;
};

class SdfPullbackProvider : public FieldProvider {
 public:
  SdfPullbackProvider(const RobotModel& model, Scene scene, std::vector<ControlPoint> points)
      : model_(model), scene_(std::move(scene)), points_(std::move(points)) {}

  FieldAnswer query(const Configuration& q) override {
    return sdf_pullback_gradient(model_, scene_, q, points_);
  }
  std::string name() const override { return "sdf_pullback"; }

 private:
  RobotModel model_;
  Scene scene_;
  std::vector<ControlPoint> points_;
};

class LearnedDirectProvider : public FieldProvider {
 public:
  LearnedDirectProvider(const FlowModel& model, Scene scene)
      : model_(model), scene_(std::move(scene)) {}

  FieldAnswer query(const Configuration& q) override {
    FieldAnswer ans;
    ans.provenance = Provenance::kLearnedDirect;
    ans.distance = std::max(0.0, predict_distance(model_, q, scene_));
    Eigen::VectorXd g = predict_gradient(model_, q, scene_);
    if (g.norm() > 1e-12) ans.gradient = std::move(g);
    return ans;
  }
  std::string name() const override { return "learned_direct"; }

 private:
  const FlowModel& model_;
  Scene scene_;
};

class LearnedMcProvider : public FieldProvider {
 public:
  LearnedMcProvider(const FlowModel& model, Scene scene, int draws, std::uint64_t seed)
      : model_(model), scene_(std::move(scene)), draws_(draws), seed_(seed) {}

  FieldAnswer query(const Configuration& q) override {
    // Per-query substream: deterministic across identical call sequences.
    Rng rng = Rng::stream(seed_, 0x4D, counter_++);
    return monte_carlo_field(model_, q, scene_, draws_, rng);
  }
  std::string name() const override { return "learned_mc"; }

 private:
  const FlowModel& model_;
  Scene scene_;
  int draws_;
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Projection to contact
// ---------------------------------------------------------------------------

struct ProjectionResult {
  bool success = false;
  int steps = 0;
  Configuration final_q;
  double wall_time_s = 0.0;
  std::vector<Configuration> trace;
};

/// Iterates q <- clamp(q - d * dir) until the robot touches the scene, where
/// d and the direction come from the provider. Directions are normalized
/// only above a norm threshold: a shrinking expected gradient signals mode
/// conflict and the step is damped proportionally instead.
inline ProjectionResult project_to_contact(FieldProvider& provider, const RobotModel& model,
                                           const Scene& scene, const Configuration& q0,
                                           int max_steps = 100, double contact_tol = 0.01) {
  const auto t0 = std::chrono::steady_clock::now();
  ProjectionResult result;
  Configuration q = model.clamp_to_limits(q0);
  result.trace.push_back(q);
  auto touching = [&](const Configuration& c) {
    return robot_scene_distance(model, scene, c) <= contact_tol;
  };
  if (touching(q)) {
    result.success = true;
    result.final_q = q;
    result.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
  }
  int consecutive_undefined = 0;
  for (int step = 1; step <= max_steps; ++step) {
    const FieldAnswer ans = provider.query(q);
    result.steps = step;
    if (!ans.gradient.has_value() || !std::isfinite(ans.distance)) {
      if (++consecutive_undefined >= 3) break;
      continue;
    }
    consecutive_undefined = 0;
    const Eigen::VectorXd& g = *ans.gradient;
    const double norm = g.norm();
    const Eigen::VectorXd dir = norm > 0.1 ? Eigen::VectorXd(g / norm) : g;
    q = model.clamp_to_limits(q - ans.distance * dir);
    result.trace.push_back(q);
    if (touching(q)) {
      result.success = true;
      break;
    }
  }
  result.final_q = q;
  result.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Trajectory optimization
// ---------------------------------------------------------------------------

struct TrajectoryResult {
  bool success = false;
  double tracking_error = kInf;
  int opt_steps = 0;
  std::vector<Configuration> trajectory;
};

struct TrajOptConfig {
  int max_iters = 250;
  double step_size = 0.05;
  double w_collision = 4.0;
  double margin = 0.15;    // radians of clearance demanded by the penalty
  double w_terminal = 8.0;
  double goal_tol = 0.15;  // success threshold on |q_final - q_target|
  double max_bow = 2.0;    // largest lateral bow tried during initialization
};

/// Penalty-based descent over waypoints: smoothness + hinge collision cost
/// through the provider's distance/gradient + terminal attraction. The first
/// waypoint stays fixed at q_start.
///
/// The field is zero with no gradient inside the colliding set, so a path
/// initialized across an obstacle gets no escape signal there. Initialization
/// therefore scores a family of laterally bowed interpolations with the
/// provider's own distances and starts from the least-penalized one.
inline TrajectoryResult optimize_trajectory(FieldProvider& provider, const RobotModel& model,
                                            const Scene& scene, const Configuration& q_start,
                                            const Configuration& q_target, int n_waypoints,
                                            const TrajOptConfig& cfg = {}) {
  if (n_waypoints < 2) throw std::invalid_argument("optimize_trajectory: need at least 2 waypoints");
  const int dof = model.dof();

  auto bowed_path = [&](double amplitude) {
    std::vector<Configuration> p(static_cast<std::size_t>(n_waypoints));
    Eigen::VectorXd lateral = Eigen::VectorXd::Zero(dof);
    const Eigen::VectorXd chord = q_target - q_start;
    if (chord.norm() > 1e-9 && dof >= 2) {
      // Any unit direction orthogonal to the chord (first two axes rotated).
      lateral.setZero();
      lateral[0] = -chord[1];
      lateral[1] = chord[0];
      const double n = lateral.norm();
      lateral = n > 1e-9 ? Eigen::VectorXd(lateral / n) : Eigen::VectorXd::Unit(dof, 0);
    }
    for (int i = 0; i < n_waypoints; ++i) {
      const double t = static_cast<double>(i) / (n_waypoints - 1);
      const double bow = amplitude * std::sin(kPi * t);
      p[static_cast<std::size_t>(i)] =
          model.clamp_to_limits(q_start + t * (q_target - q_start) + bow * lateral);
    }
    p[0] = model.clamp_to_limits(q_start);
    return p;
  };

  // Score candidate initializations by the provider's own collision penalty.
  std::vector<std::pair<double, std::vector<Configuration>>> candidates;
  for (const double a : {0.0, 0.5, -0.5, 1.0, -1.0, 1.5, -1.5, 2.0, -2.0}) {
    const double amplitude = a * cfg.max_bow / 2.0;
    auto candidate = bowed_path(amplitude);
    double score = 0.0;
    for (int i = 1; i < n_waypoints; ++i) {
      const FieldAnswer ans = provider.query(candidate[static_cast<std::size_t>(i)]);
      const double d = std::isfinite(ans.distance) ? ans.distance : 1e6;
      const double hinge = std::max(0.0, cfg.margin - d);
      score += hinge * hinge;
    }
    candidates.emplace_back(score, std::move(candidate));
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });

  struct Eval {
    double distance;
    std::optional<Eigen::VectorXd> gradient;
  };
  auto evaluate = [&](const std::vector<Configuration>& p, std::vector<Eval>* evals) {
    double cost = 0.0;
    for (int i = 0; i + 1 < n_waypoints; ++i) {
      cost += (p[static_cast<std::size_t>(i + 1)] - p[static_cast<std::size_t>(i)]).squaredNorm();
    }
    for (int i = 1; i < n_waypoints; ++i) {
      const FieldAnswer ans = provider.query(p[static_cast<std::size_t>(i)]);
      const double d = std::isfinite(ans.distance) ? ans.distance : 1e6;
      const double hinge = std::max(0.0, cfg.margin - d);
      cost += cfg.w_collision * hinge * hinge;
      if (evals != nullptr) (*evals)[static_cast<std::size_t>(i)] = {d, ans.gradient};
    }
    cost += cfg.w_terminal * (p.back() - q_target).squaredNorm();
    return cost;
  };

  int total_iters = 0;
  bool diverged = false;
  // Runs the descent from one init; reports whether the provider itself
  // considers every waypoint clear of the set at convergence.
  auto interior_count = [&](const std::vector<Eval>& evals) {
    int n = 0;
    for (int i = 1; i < n_waypoints; ++i) {
      if (evals[static_cast<std::size_t>(i)].distance <= 1e-9) ++n;
    }
    return n;
  };
  auto descend = [&](std::vector<Configuration> path, TrajectoryResult* out) {
    std::vector<Eval> evals(static_cast<std::size_t>(n_waypoints));
    double step = cfg.step_size;
    double cost = evaluate(path, &evals);
    int interior = interior_count(evals);
    for (int iter = 0; iter < cfg.max_iters; ++iter) {
      ++total_iters;
      if (!std::isfinite(cost)) {
        diverged = true;
        break;
      }
      std::vector<Configuration> grad(static_cast<std::size_t>(n_waypoints),
                                      Configuration::Zero(dof));
      for (int i = 1; i < n_waypoints; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        Eigen::VectorXd g = 2.0 * (path[idx] - path[idx - 1]);
        if (i + 1 < n_waypoints) g += 2.0 * (path[idx] - path[idx + 1]);
        const double hinge = std::max(0.0, cfg.margin - evals[idx].distance);
        if (hinge > 0.0) {
          if (evals[idx].gradient.has_value()) {
            g -= 2.0 * cfg.w_collision * hinge * (*evals[idx].gradient);
          } else {
            // Interior waypoint: the field is flat here, so borrow the
            // nearest free neighbor's direction as the escape direction.
            for (int off : {1, -1, 2, -2, 3, -3}) {
              const int j = i + off;
              if (j < 1 || j >= n_waypoints) continue;
              const auto& nb = evals[static_cast<std::size_t>(j)];
              if (nb.distance > 1e-9 && nb.gradient.has_value() && nb.gradient->norm() > 1e-9) {
                g -= 2.0 * cfg.w_collision * hinge * (*nb.gradient / nb.gradient->norm());
                break;
              }
            }
          }
        }
        if (i == n_waypoints - 1) g += 2.0 * cfg.w_terminal * (path[idx] - q_target);
        grad[idx] = g;
      }
      // Per-waypoint trust region: a jump past the thin boundary band would
      // strand the waypoint inside the set where the field carries no
      // gradient.
      const double max_move = 0.6 * cfg.margin;
      std::vector<Configuration> trial(static_cast<std::size_t>(n_waypoints));
      bool improved = false;
      for (int attempt = 0; attempt < 8; ++attempt) {
        trial[0] = path[0];
        for (int i = 1; i < n_waypoints; ++i) {
          const auto idx = static_cast<std::size_t>(i);
          Eigen::VectorXd delta = -step * grad[idx];
          const double mag = delta.norm();
          if (mag > max_move) delta *= max_move / mag;
          trial[idx] = model.clamp_to_limits(path[idx] + delta);
        }
        std::vector<Eval> trial_evals(static_cast<std::size_t>(n_waypoints));
        const double trial_cost = evaluate(trial, &trial_evals);
        const int trial_interior = interior_count(trial_evals);
        // Freeing a trapped waypoint outranks a lower cost.
        if (trial_interior < interior || (trial_interior == interior && trial_cost < cost)) {
          path = std::move(trial);
          evals = std::move(trial_evals);
          cost = trial_cost;
          interior = trial_interior;
          step = std::min(step * 1.25, 4.0 * cfg.step_size);
          improved = true;
          break;
        }
        step *= 0.5;
      }
      if (!improved && step < 1e-6) break;
    }
    out->trajectory = path;
    out->tracking_error = (path.back() - q_target).norm();
    bool collision_free = true;
    for (const auto& wp : path) {
      if (is_colliding(model, scene, wp)) {
        collision_free = false;
        break;
      }
    }
    out->success = !diverged && collision_free && out->tracking_error <= cfg.goal_tol;
    bool provider_clear = true;
    for (int i = 1; i < n_waypoints; ++i) {
      provider_clear = provider_clear && evals[static_cast<std::size_t>(i)].distance > 1e-9;
    }
    return std::make_pair(provider_clear, cost);
  };

  // Restart from the next-best init while the provider's own field reports a
  // waypoint stuck inside the set. A provider whose field cannot detect the
  // problem does not get to retry.
  TrajectoryResult best;
  double best_cost = kInf;
  const std::size_t max_attempts = std::min<std::size_t>(3, candidates.size());
  for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
    TrajectoryResult res;
    const auto [clear, final_cost] = descend(candidates[attempt].second, &res);
    res.opt_steps = total_iters;
    if (diverged) return res;
    if (clear) return res;
    if (final_cost < best_cost) {
      best_cost = final_cost;
      best = std::move(res);
    }
  }
  best.opt_steps = total_iters;
  return best;
}

}  // namespace cdflow
