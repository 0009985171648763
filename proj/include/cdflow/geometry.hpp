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

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cdflow/errors.hpp"

namespace cdflow {

/// Joint vector in radians. Plain Eigen vector; limit checks live in the
/// operations that state them as preconditions.
using Configuration = Eigen::VectorXd;
using Vec2 = Eigen::Vector2d;

inline constexpr double kInf = std::numeric_limits<double>::infinity();
inline constexpr double kPi = 3.14159265358979323846;

struct JointLimit {
  double lo;
  double hi;
};

struct Obstacle {
  Vec2 center;
  double radius;  // meters, > 0
};

/// Workspace description: the conditioning input of every field.
struct Scene {
  std::vector<Obstacle> obstacles;
  std::string id;
};

/// Planar n-link serial chain with capsule links, base fixed at the origin.
/// Joint i rotates the chain by the cumulative sum of q[0..i].
class RobotModel {
 public:
  RobotModel(std::vector<double> link_lengths, std::vector<double> link_radii,
             std::vector<JointLimit> joint_limits)
      : lengths_(std::move(link_lengths)),
        radii_(std::move(link_radii)),
        limits_(std::move(joint_limits)) {
    if (lengths_.empty() || lengths_.size() != radii_.size() ||
        lengths_.size() != limits_.size()) {
      throw std::invalid_argument("RobotModel: lengths, radii and limits must have equal nonzero size");
    }
    for (std::size_t i = 0; i < lengths_.size(); ++i) {
      if (!(lengths_[i] > 0.0)) throw std::invalid_argument("RobotModel: link length must be positive");
      if (radii_[i] < 0.0) throw std::invalid_argument("RobotModel: link radius must be non-negative");
      const auto& jl = limits_[i];
      if (!(jl.lo < jl.hi) || jl.lo < -kPi - 1e-12 || jl.hi > kPi + 1e-12) {
        throw std::invalid_argument("RobotModel: joint limit must be a non-empty interval within [-pi, pi]");
      }
    }
  }

  /// Convenience: limits [-pi, pi] on every joint.
  static RobotModel planar(std::vector<double> link_lengths, std::vector<double> link_radii) {
    std::vector<JointLimit> lim(link_lengths.size(), JointLimit{-kPi, kPi});
    return RobotModel(std::move(link_lengths), std::move(link_radii), std::move(lim));
  }

  int dof() const { return static_cast<int>(lengths_.size()); }
  const std::vector<double>& link_lengths() const { return lengths_; }
  const std::vector<double>& link_radii() const { return radii_; }
  const std::vector<JointLimit>& joint_limits() const { return limits_; }

  double reach() const {
    double r = 0.0;
    for (double l : lengths_) r += l;
    return r;
  }

  Configuration lower_limits() const {
    Configuration lo(dof());
    for (int i = 0; i < dof(); ++i) lo[i] = limits_[i].lo;
    return lo;
  }

  Configuration upper_limits() const {
    Configuration hi(dof());
    for (int i = 0; i < dof(); ++i) hi[i] = limits_[i].hi;
    return hi;
  }

  bool within_limits(const Configuration& q, double slack = 1e-12) const {
    if (q.size() != dof()) return false;
    for (int i = 0; i < dof(); ++i) {
      if (q[i] < limits_[i].lo - slack || q[i] > limits_[i].hi + slack) return false;
    }
    return true;
  }

  void require_within_limits(const Configuration& q) const {
    if (q.size() != dof()) {
      throw LimitViolationError("configuration has wrong dimension");
    }
    for (int i = 0; i < dof(); ++i) {
      if (q[i] < limits_[i].lo - 1e-12 || q[i] > limits_[i].hi + 1e-12) {
        std::ostringstream os;
        os << "joint " << i << " value " << q[i] << " outside [" << limits_[i].lo << ", "
           << limits_[i].hi << "]";
        throw LimitViolationError(os.str());
      }
    }
  }

  Configuration clamp_to_limits(const Configuration& q, double margin = 0.0) const {
    Configuration out = q;
    for (int i = 0; i < dof(); ++i) {
      const double lo = limits_[i].lo + margin;
      const double hi = limits_[i].hi - margin;
      out[i] = std::min(std::max(out[i], lo), hi);
    }
    return out;
  }

 private:
  std::vector<double> lengths_;
  std::vector<double> radii_;
  std::vector<JointLimit> limits_;
};

/// Forward-kinematics result: one segment per link, chained from the origin.
struct LinkPose {
  std::vector<std::pair<Vec2, Vec2>> segments;
  /// Joint positions, size dof + 1 (joints_[0] is the base, joints_[dof] the tip).
  std::vector<Vec2> joints;
};

inline LinkPose forward_kinematics(const RobotModel& model, const Configuration& q) {
  model.require_within_limits(q);
  LinkPose pose;
  pose.joints.reserve(model.dof() + 1);
  pose.segments.reserve(model.dof());
  Vec2 p = Vec2::Zero();
  pose.joints.push_back(p);
  double angle = 0.0;
  for (int i = 0; i < model.dof(); ++i) {
    angle += q[i];
    const Vec2 next = p + model.link_lengths()[i] * Vec2(std::cos(angle), std::sin(angle));
    pose.segments.emplace_back(p, next);
    pose.joints.push_back(next);
    p = next;
  }
  return pose;
}

inline double segment_point_distance(const Vec2& a, const Vec2& b, const Vec2& p) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 <= 0.0) return (p - a).norm();
  double t = (p - a).dot(ab) / len2;
  t = std::min(std::max(t, 0.0), 1.0);
  return (p - (a + t * ab)).norm();
}

/// Signed distance from p to the nearest obstacle boundary: positive outside,
/// negative inside, zero on the boundary. Empty scene yields +inf.
inline double task_sdf(const Scene& scene, const Vec2& p) {
  double d = kInf;
  for (const auto& ob : scene.obstacles) {
    d = std::min(d, (p - ob.center).norm() - ob.radius);
  }
  return d;
}

/// Workspace clearance between the capsule chain and the scene: the smallest
/// (segment-to-center distance - link radius - obstacle radius) over all
/// link/obstacle pairs. <= 0 means collision. Empty scene yields +inf.
inline double robot_scene_distance(const RobotModel& model, const Scene& scene,
                                   const Configuration& q) {
  if (scene.obstacles.empty()) return kInf;
  const LinkPose pose = forward_kinematics(model, q);
  double d = kInf;
  for (int i = 0; i < model.dof(); ++i) {
    const auto& [a, b] = pose.segments[i];
    const double rl = model.link_radii()[i];
    for (const auto& ob : scene.obstacles) {
      d = std::min(d, segment_point_distance(a, b, ob.center) - rl - ob.radius);
    }
  }
  return d;
}

/// Membership test for the colliding set; the boundary counts as colliding.
inline bool is_colliding(const RobotModel& model, const Scene& scene, const Configuration& q) {
  return robot_scene_distance(model, scene, q) <= 0.0;
}

/// Partial derivatives of the workspace point at `point_param` in [0, 1] along
/// link `link_index`, with respect to each joint angle. Row j of the returned
/// dof x 2 matrix is the velocity of the point per unit motion of joint j.
inline Eigen::MatrixXd jacobian_point(const RobotModel& model, const Configuration& q,
                                      int link_index, double point_param) {
  if (link_index < 0 || link_index >= model.dof()) {
    throw std::invalid_argument("jacobian_point: link_index out of range");
  }
  if (point_param < 0.0 || point_param > 1.0) {
    throw std::invalid_argument("jacobian_point: point_param must be in [0, 1]");
  }
  const LinkPose pose = forward_kinematics(model, q);
  const auto& [a, b] = pose.segments[link_index];
  const Vec2 x = a + point_param * (b - a);
  Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(model.dof(), 2);
  // Joint j rotates everything distal to it rigidly about pose.joints[j].
  for (int j = 0; j <= link_index; ++j) {
    const Vec2 r = x - pose.joints[j];
    jac(j, 0) = -r.y();
    jac(j, 1) = r.x();
  }
  return jac;
}

/// Lipschitz constant of robot_scene_distance with respect to the Euclidean
/// metric on q: sqrt(sum_j R_j^2) where R_j is the chain length distal to
/// joint j. (The plain sum of link lengths bounds the 1-norm rate only.)
inline double chain_lipschitz_bound(const RobotModel& model) {
  double sum = 0.0;
  double tail = 0.0;
  for (int j = model.dof() - 1; j >= 0; --j) {
    tail += model.link_lengths()[j];
    sum += tail * tail;
  }
  return std::sqrt(sum);
}

}  // namespace cdflow
