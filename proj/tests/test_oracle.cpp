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

#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>

#include "cdflow/oracle.hpp"
#include "cdflow/rng.hpp"
#include "fixtures.hpp"

using namespace cdflow;

namespace {

Configuration conf2(double a, double b) {
  Configuration q(2);
  q << a, b;
  return q;
}

/// Hand-built grid over [-pi, pi]^2 with explicit colliding cells; lets the
/// pure distance/gradient arithmetic be tested independently of geometry.
CollisionGrid synthetic_grid(const std::vector<std::size_t>& colliding, int n = 8) {
  const std::size_t cells = static_cast<std::size_t>(n) * n;
  std::vector<std::uint64_t> words((cells + 63) / 64, 0);
  for (std::size_t idx : colliding) words[idx >> 6] |= (1ULL << (idx & 63));
  Configuration lo = conf2(-kPi, -kPi);
  Configuration hi = conf2(kPi, kPi);
  return CollisionGrid({n, n}, lo, hi, std::move(words), cells);
}

std::size_t cell(int i, int j, int n = 8) {
  return static_cast<std::size_t>(i) * n + static_cast<std::size_t>(j);
}

}  // namespace

TEST_CASE("empty scene yields zero colliding cells and a free-scene answer") {
  auto model = fixtures::arm2();
  auto grid = build_collision_grid(model, Scene{}, {16, 16});
  CHECK(grid.colliding_count() == 0);
  auto ans = oracle_cdf(grid, conf2(0.1, -0.2));
  CHECK(ans.d_min == kInf);
  CHECK(ans.minimal_set.empty());
  CHECK_THROWS_AS(oracle_gradient(grid, conf2(0.1, -0.2)), GradientUndefinedError);
}

TEST_CASE("engulfing obstacle marks every cell colliding") {
  auto model = fixtures::arm2();
  Scene s;
  s.obstacles.push_back({Vec2(0.0, 0.0), 3.0});
  auto grid = build_collision_grid(model, s, {16, 16});
  CHECK(grid.colliding_count() == grid.cell_count());
}

TEST_CASE("front fixture census is reproducible") {
  auto model = fixtures::arm2();
  auto grid = build_collision_grid(model, fixtures::front_disc(), {256, 256});
  // Regression pin from the first build of this census.
  CHECK(grid.colliding_count() == 8988);
  CHECK(grid.cell_count() == 65536);
}

TEST_CASE("grid flags agree with direct per-cell evaluation") {
  auto model = fixtures::arm2();
  auto scene = fixtures::front_disc();
  auto grid = build_collision_grid(model, scene, {32, 32});
  for (std::size_t i = 0; i < grid.cell_count(); ++i) {
    CHECK(grid.flag(i) == is_colliding(model, scene, grid.cell_center(i)));
  }
}

TEST_CASE("grid construction guards against oversized requests") {
  auto model = fixtures::arm2();
  CHECK_THROWS_AS(build_collision_grid(model, fixtures::front_disc(), {20000, 20000}),
                  GridSizeError);
  CHECK_THROWS_AS(build_collision_grid(model, fixtures::front_disc(), {1, 16}),
                  std::invalid_argument);
}

TEST_CASE("oracle_cdf on a colliding query returns its own cell") {
  auto grid = synthetic_grid({cell(2, 3)});
  const Configuration q = grid.cell_center(cell(2, 3)) + conf2(0.01, -0.02);
  auto ans = oracle_cdf(grid, q);
  CHECK(ans.d_min == 0.0);
  REQUIRE(ans.minimal_set.size() == 1);
  CHECK(ans.minimal_set[0].isApprox(grid.cell_center(cell(2, 3)), 1e-12));
}

TEST_CASE("oracle_cdf single colliding cell") {
  auto grid = synthetic_grid({cell(6, 6)});
  const Configuration target = grid.cell_center(cell(6, 6));
  const Configuration q = conf2(0.0, 0.0);
  auto ans = oracle_cdf(grid, q);
  CHECK(ans.d_min == Catch::Approx((q - target).norm()));
  REQUIRE(ans.minimal_set.size() == 1);
  auto g = oracle_gradient(grid, q);
  CHECK(g.isApprox((q - target).normalized(), 1e-12));
  CHECK(g.norm() == Catch::Approx(1.0));
}

TEST_CASE("antipodal equidistant modes cancel the oracle gradient") {
  // Cells (1,1) and (6,6) have centers symmetric about the origin.
  auto grid = synthetic_grid({cell(1, 1), cell(6, 6)});
  const Configuration q = conf2(0.0, 0.0);
  auto ans = oracle_cdf(grid, q);
  CHECK(ans.minimal_set.size() == 2);
  auto g = oracle_gradient(grid, q);
  CHECK(g.norm() < 1e-12);
}

TEST_CASE("asymmetric two-mode gradient is the direct average") {
  auto grid = synthetic_grid({cell(1, 1), cell(1, 6)});
  const Configuration q = conf2(0.0, 0.0);
  auto ans = oracle_cdf(grid, q, 1e-9);
  REQUIRE(ans.minimal_set.size() == 2);
  Eigen::VectorXd expected = Eigen::VectorXd::Zero(2);
  for (const auto& p : ans.minimal_set) expected += (q - p).normalized();
  expected /= 2.0;
  auto g = oracle_gradient(grid, q, 1e-9);
  CHECK(g.isApprox(expected, 1e-12));
  CHECK(g.norm() < 1.0);
  CHECK(g.norm() > 0.0);
}

TEST_CASE("symmetric behind-disc scene witnesses multi-modality") {
  auto model = fixtures::arm2();
  auto grid = build_collision_grid(model, fixtures::behind_disc(), {128, 128});
  const Configuration q = conf2(0.0, 0.0);
  REQUIRE_FALSE(is_colliding(model, fixtures::behind_disc(), q));
  auto ans = oracle_cdf(grid, q);
  CHECK(ans.minimal_set.size() >= 2);
  int pos = 0, neg = 0;
  for (const auto& p : ans.minimal_set) (p[0] > 0 ? pos : neg)++;
  CHECK(pos >= 1);
  CHECK(neg >= 1);
  // Perfect symmetry: the expected direction cancels.
  auto g = oracle_gradient(grid, q);
  CHECK(g.norm() < 1e-9);
}

TEST_CASE("oracle gradient norm never exceeds one") {
  auto model = fixtures::arm2();
  auto grid = build_collision_grid(model, fixtures::front_disc(), {64, 64});
  Rng rng(5);
  int checked = 0;
  while (checked < 100) {
    Configuration q = rng.uniform_box(grid.lower(), grid.upper());
    auto ans = oracle_cdf(grid, q);
    if (ans.d_min <= 0.0) continue;
    auto g = oracle_gradient(grid, q);
    CHECK(g.norm() <= 1.0 + 1e-12);
    ++checked;
  }
}

TEST_CASE("oracle distance is 1-Lipschitz up to one cell diagonal") {
  auto model = fixtures::arm2();
  auto grid = build_collision_grid(model, fixtures::front_disc(), {64, 64});
  const double diag = grid.cell_diagonal();
  Rng rng(6);
  for (int k = 0; k < 200; ++k) {
    Configuration q1 = rng.uniform_box(grid.lower(), grid.upper());
    Configuration q2 = rng.uniform_box(grid.lower(), grid.upper());
    const double d1 = oracle_cdf(grid, q1).d_min;
    const double d2 = oracle_cdf(grid, q2).d_min;
    CHECK(std::abs(d1 - d2) <= (q1 - q2).norm() + diag + 1e-12);
  }
}

TEST_CASE("refinement never moves the oracle distance by more than a coarse cell diagonal") {
  auto model = fixtures::arm2();
  auto coarse = build_collision_grid(model, fixtures::front_disc(), {64, 64});
  auto fine = build_collision_grid(model, fixtures::front_disc(), {128, 128});
  const double diag = coarse.cell_diagonal();
  Rng rng(8);
  for (int k = 0; k < 100; ++k) {
    Configuration q = rng.uniform_box(coarse.lower(), coarse.upper());
    const double dc = oracle_cdf(coarse, q).d_min;
    const double df = oracle_cdf(fine, q).d_min;
    CHECK(df <= dc + diag + 1e-12);
    CHECK(dc <= df + diag + 1e-12);
  }
}

TEST_CASE("grid round-trips through the binary format") {
  auto model = fixtures::arm2();
  auto grid = build_collision_grid(model, fixtures::front_disc(), {48, 40});
  const std::string path = (std::filesystem::temp_directory_path() / "cdflow_grid_test.bin").string();
  grid.save(path);
  auto loaded = CollisionGrid::load(path);
  CHECK(loaded.resolution() == grid.resolution());
  CHECK(loaded.cell_count() == grid.cell_count());
  CHECK(loaded.colliding_count() == grid.colliding_count());
  CHECK(loaded.flag_words() == grid.flag_words());
  CHECK(loaded.lower().isApprox(grid.lower()));
  CHECK(loaded.upper().isApprox(grid.upper()));
  std::filesystem::remove(path);
}
