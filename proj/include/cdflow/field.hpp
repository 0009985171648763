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

#include <optional>
#include <string>
#include <vector>

#include "cdflow/geometry.hpp"

namespace cdflow {

enum class Provenance {
  kOracle,
  kEmpirical,
  kBaselineCdf,
  kSdfPullback,
  kLearnedDirect,
  kLearnedMc,
};

inline const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::kOracle: return "oracle";
    case Provenance::kEmpirical: return "empirical";
    case Provenance::kBaselineCdf: return "baseline_cdf";
    case Provenance::kSdfPullback: return "sdf_pullback";
    case Provenance::kLearnedDirect: return "learned_direct";
    case Provenance::kLearnedMc: return "learned_mc";
  }
  return "unknown";
}

/// Distance plus (possibly undefined) gradient, tagged with where it came
/// from. Distances are configuration-space radians for every provenance
/// except sdf_pullback, whose distance is the workspace clearance in meters;
/// that mismatch is inherent to the baseline.
struct FieldAnswer {
  double distance = kInf;
  std::optional<Eigen::VectorXd> gradient;
  Provenance provenance = Provenance::kEmpirical;
};

/// Mean distance from q to a sample set: the expectation-based distance.
inline double empirical_distance(const Configuration& q,
                                 const std::vector<Configuration>& samples) {
  if (samples.empty()) throw std::invalid_argument("empirical_distance: empty sample set");
  double sum = 0.0;
  for (const auto& s : samples) sum += (q - s).norm();
  return sum / static_cast<double>(samples.size());
}

/// Mean unit direction from the samples toward q. Deliberately not
/// renormalized: the norm shrinks when modes disagree and that shrinkage is
/// the signal planners use to damp steps.
inline Eigen::VectorXd empirical_gradient(const Configuration& q,
                                          const std::vector<Configuration>& samples) {
  if (samples.empty()) throw std::invalid_argument("empirical_gradient: empty sample set");
  Eigen::VectorXd g = Eigen::VectorXd::Zero(q.size());
  for (const auto& s : samples) {
    const Eigen::VectorXd diff = q - s;
    const double norm = diff.norm();
    if (norm <= 1e-12) {
      throw GradientUndefinedError("empirical_gradient: sample coincides with the query");
    }
    g += diff / norm;
  }
  return g / static_cast<double>(samples.size());
}

/// The original single-nearest field over a sparse precomputed boundary set:
/// distance to the nearest sample, gradient the unit vector toward it. Ties
/// break to the lowest index; that arbitrariness is the behavior under study,
/// kept reproducible on purpose.
inline FieldAnswer baseline_cdf(const Configuration& q,
                                const std::vector<Configuration>& boundary_samples) {
  if (boundary_samples.empty()) {
    throw std::invalid_argument("baseline_cdf: empty boundary sample set");
  }
  std::size_t best = 0;
  double best_dist = kInf;
  for (std::size_t i = 0; i < boundary_samples.size(); ++i) {
    const double d = (q - boundary_samples[i]).norm();
    if (d < best_dist) {
      best_dist = d;
      best = i;
    }
  }
  FieldAnswer ans;
  ans.provenance = Provenance::kBaselineCdf;
  ans.distance = best_dist;
  if (best_dist > 1e-12) {
    ans.gradient = Eigen::VectorXd((q - boundary_samples[best]) / best_dist);
  }
  return ans;
}

/// A control point along the chain: (link index, parameter in [0, 1]).
using ControlPoint = std::pair<int, double>;

inline std::vector<ControlPoint> tip_only(const RobotModel& model) {
  return {{model.dof() - 1, 1.0}};
}

/// Task-space SDF pulled back through the kinematic Jacobian at the control
/// point with the smallest clearance. The classic end-effector-only baseline.
inline FieldAnswer sdf_pullback_gradient(const RobotModel& model, const Scene& scene,
                                         const Configuration& q,
                                         const std::vector<ControlPoint>& control_points) {
  if (control_points.empty()) {
    throw std::invalid_argument("sdf_pullback_gradient: no control points");
  }
  FieldAnswer ans;
  ans.provenance = Provenance::kSdfPullback;
  if (scene.obstacles.empty()) {
    ans.distance = kInf;
    return ans;
  }
  const LinkPose pose = forward_kinematics(model, q);
  double best = kInf;
  ControlPoint best_cp = control_points.front();
  Vec2 best_pos = Vec2::Zero();
  for (const auto& cp : control_points) {
    const auto& [a, b] = pose.segments[static_cast<std::size_t>(cp.first)];
    const Vec2 pos = a + cp.second * (b - a);
    const double d = task_sdf(scene, pos);
    if (d < best) {
      best = d;
      best_cp = cp;
      best_pos = pos;
    }
  }
  ans.distance = best;
  // Workspace SDF direction at the argmin control point.
  double nearest = kInf;
  Vec2 grad_x = Vec2::Zero();
  for (const auto& ob : scene.obstacles) {
    const Vec2 diff = best_pos - ob.center;
    const double d = diff.norm() - ob.radius;
    if (d < nearest) {
      nearest = d;
      grad_x = diff.norm() > 1e-12 ? Vec2(diff / diff.norm()) : Vec2::Zero();
    }
  }
  const Eigen::MatrixXd jac = jacobian_point(model, q, best_cp.first, best_cp.second);
  Eigen::VectorXd pullback = jac * grad_x;
  if (pullback.norm() > 1e-10) {
    ans.gradient = Eigen::VectorXd(pullback / pullback.norm());
  }
  return ans;
}

}  // namespace cdflow
