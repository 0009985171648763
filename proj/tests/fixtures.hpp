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

#include <cmath>
#include <string>

#include "cdflow/geometry.hpp"

namespace cdflow::fixtures {

/// Canonical 2-DoF test arm: unit links, 5 cm capsule radii, full [-pi, pi]
/// joint range.
inline RobotModel arm2() { return RobotModel::planar({1.0, 1.0}, {0.05, 0.05}); }

/// One disc in front of the arm; the workhorse single-obstacle scene.
inline Scene front_disc() {
  Scene s;
  s.obstacles.push_back({Vec2(1.2, 0.0), 0.3});
  s.id = "front_disc";
  return s;
}

/// One disc behind the base. The colliding set is symmetric under q -> -q and
/// splits into two well-separated fold-left / fold-right islands, so the
/// origin query has a two-mode minimal set by construction.
inline Scene behind_disc() {
  Scene s;
  s.obstacles.push_back({Vec2(-1.2, 0.0), 0.3});
  s.id = "behind_disc";
  return s;
}

/// Rotated copy of behind_disc: disc on the ray at angle (phi + pi). The
/// induced configuration-space symmetry is the point reflection about
/// (phi, 0), so the query (phi, 0) sits at equal distance from both islands.
/// Valid while both islands stay inside the joint box (|phi| <~ 0.7).
inline Scene behind_disc_rotated(double phi) {
  Scene s;
  const double a = phi + kPi;
  s.obstacles.push_back({1.2 * Vec2(std::cos(a), std::sin(a)), 0.3});
  s.id = "behind_disc_phi_" + std::to_string(phi);
  return s;
}

inline Configuration on_axis_query(double phi) {
  Configuration q(2);
  q << phi, 0.0;
  return q;
}

/// Two discs just beyond the first link's reach, leaving a narrow diagonal
/// free channel between their configuration-space ribbons; the trajectory
/// benchmark threads it.
inline Scene narrow_gap() {
  Scene s;
  const double reach = 1.45;
  const double half_angle = 0.42;
  s.obstacles.push_back({reach * Vec2(std::cos(half_angle), std::sin(half_angle)), 0.26});
  s.obstacles.push_back({reach * Vec2(std::cos(-half_angle), std::sin(-half_angle)), 0.26});
  s.id = "narrow_gap";
  return s;
}

}  // namespace cdflow::fixtures
