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
#include <filesystem>
#include <fstream>

#include "cdflow/oracle.hpp"
#include "cdflow/sampling.hpp"
#include "fixtures.hpp"

using namespace cdflow;

namespace {

Configuration conf2(double a, double b) {
  Configuration q(2);
  q << a, b;
  return q;
}

int single_linkage_clusters(const std::vector<Configuration>& pts, double radius) {
  std::vector<int> label(pts.size(), -1);
  int clusters = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (label[i] >= 0) continue;
    label[i] = clusters;
    std::vector<std::size_t> stack{i};
    while (!stack.empty()) {
      const std::size_t u = stack.back();
      stack.pop_back();
      for (std::size_t v = 0; v < pts.size(); ++v) {
        if (label[v] < 0 && (pts[u] - pts[v]).norm() <= radius) {
          label[v] = clusters;
          stack.push_back(v);
        }
      }
    }
    ++clusters;
  }
  return clusters;
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("optimize_to_boundary returns a colliding query unchanged") {
  auto model = fixtures::arm2();
  auto scene = fixtures::front_disc();
  const Configuration q = conf2(0.0, 0.0);  // straight into the front disc
  REQUIRE(is_colliding(model, scene, q));
  SamplerConfig cfg;
  auto sol = optimize_to_boundary(model, scene, conf2(1.0, 1.0), q, cfg);
  REQUIRE(sol.has_value());
  CHECK((*sol - q).norm() == 0.0);
}

TEST_CASE("optimize_to_boundary is a fixed point on locally optimal boundary points") {
  auto model = fixtures::arm2();
  auto scene = fixtures::front_disc();
  SamplerConfig cfg;
  const Configuration q_query = conf2(1.2, -0.4);
  auto first = optimize_to_boundary(model, scene, conf2(0.1, 0.1), q_query, cfg);
  REQUIRE(first.has_value());
  CHECK(std::abs(robot_scene_distance(model, scene, *first)) <= cfg.boundary_tol);
  auto again = optimize_to_boundary(model, scene, *first, q_query, cfg);
  REQUIRE(again.has_value());
  CHECK(std::abs(robot_scene_distance(model, scene, *again)) <= cfg.boundary_tol);
  // Stays at the same local solution up to the tangential-slide resolution.
  CHECK((*again - *first).norm() < 0.05);
  CHECK((*again - q_query).norm() <= (*first - q_query).norm() + 1e-9);
  CHECK((*first - q_query).norm() - (*again - q_query).norm() < 5e-3);
}

TEST_CASE("optimize_to_boundary finds the nearest interval endpoint in 1-DoF") {
  auto model = RobotModel::planar({1.0}, {0.05});
  Scene s;
  s.obstacles.push_back({Vec2(0.8 * std::cos(0.9), 0.8 * std::sin(0.9)), 0.2});
  s.id = "one_dof";
  // Brute-force the colliding angle set.
  const int n = 200000;
  double best_boundary = kInf;
  const Configuration q_query = Configuration::Constant(1, -0.5);
  double prev_d = robot_scene_distance(model, s, Configuration::Constant(1, -kPi));
  for (int i = 1; i < n; ++i) {
    const double angle = -kPi + 2.0 * kPi * i / (n - 1);
    const double d = robot_scene_distance(model, s, Configuration::Constant(1, angle));
    if ((prev_d > 0) != (d > 0)) {
      const double crossing = angle - kPi / (n - 1);  // midpoint of the sign change
      best_boundary = std::min(best_boundary, std::abs(crossing - q_query[0]));
    }
    prev_d = d;
  }
  REQUIRE(std::isfinite(best_boundary));
  SamplerConfig cfg;
  double found = kInf;
  for (int i = 0; i < 8; ++i) {
    Rng rng = Rng::stream(3, 0x11, i);
    const Configuration seed = rng.uniform_box(model.lower_limits(), model.upper_limits());
    if (auto sol = optimize_to_boundary(model, s, seed, q_query, cfg)) {
      found = std::min(found, std::abs((*sol)[0] - q_query[0]));
    }
  }
  CHECK(found == Catch::Approx(best_boundary).margin(1e-3));
}

TEST_CASE("adaptive sampling tracks the oracle distance on the front fixture") {
  auto model = fixtures::arm2();
  auto scene = fixtures::front_disc();
  auto grid = build_collision_grid(model, scene, {128, 128});
  const double diag = grid.cell_diagonal();
  SamplerConfig cfg;
  cfg.rng_seed = 21;
  int in_band = 0;
  const int n = 30;
  for (int k = 0; k < n; ++k) {
    Rng rng = Rng::stream(21, 0x20, k);
    const Configuration q = rng.uniform_box(model.lower_limits(), model.upper_limits());
    auto set = adaptive_refinement_sample(model, scene, q, cfg, Rng::stream(21, 0x21, k).next_u64());
    const double oracle = oracle_cdf(grid, q).d_min;
    if (set.d_min_est >= oracle - diag && set.d_min_est <= oracle * 1.01 + diag) ++in_band;
    // Every sample is colliding; boundary samples of free queries sit inside
    // the clearance band, a colliding query keeps itself as the sample.
    for (const auto& s : set.samples) {
      CHECK(robot_scene_distance(model, scene, s) <= cfg.boundary_tol);
    }
    if (set.d_min_est > 0.0) {
      for (const auto& s : set.samples) {
        CHECK(robot_scene_distance(model, scene, s) >= -cfg.boundary_tol - 1e-12);
        CHECK((q - s).norm() <= set.d_min_est * (1.0 + cfg.equality_tol_rel) + 1e-12);
      }
    }
  }
  CHECK(in_band == n);
}

TEST_CASE("adaptive sampling captures both modes of the symmetric fixture") {
  auto model = fixtures::arm2();
  SamplerConfig cfg;
  int multi = 0;
  const int n = 10;
  for (int k = 0; k < n; ++k) {
    const double phi = -0.6 + 1.2 * k / (n - 1);
    auto scene = fixtures::behind_disc_rotated(phi);
    auto set = adaptive_refinement_sample(model, scene, fixtures::on_axis_query(phi), cfg,
                                          Rng::stream(9, 0x32, k).next_u64());
    if (single_linkage_clusters(set.samples, cfg.radius) >= 2) ++multi;
  }
  CHECK(multi >= 9);
}

TEST_CASE("n_local = 0 reduces to global exploration") {
  auto model = fixtures::arm2();
  auto scene = fixtures::front_disc();
  SamplerConfig cfg;
  cfg.n_local = 0;
  SampleDiagnostics diag;
  auto set = adaptive_refinement_sample(model, scene, conf2(2.0, 2.0), cfg, 77, &diag);
  CHECK(diag.optimizer_calls == cfg.n_global);
  CHECK(diag.refinement_accepted == 0);
  CHECK_FALSE(set.samples.empty());
}

TEST_CASE("colliding query yields the degenerate singleton set") {
  auto model = fixtures::arm2();
  auto scene = fixtures::front_disc();
  const Configuration q = conf2(0.0, 0.0);
  REQUIRE(is_colliding(model, scene, q));
  SamplerConfig cfg;
  auto set = adaptive_refinement_sample(model, scene, q, cfg, 5);
  CHECK(set.d_min_est == 0.0);
  REQUIRE(set.samples.size() == 1);
  CHECK(set.samples[0] == q);
}

TEST_CASE("unreachable scene raises an empty-set error with diagnostics") {
  auto model = fixtures::arm2();
  Scene far;
  far.obstacles.push_back({Vec2(10.0, 0.0), 0.2});
  far.id = "far";
  SamplerConfig cfg;
  cfg.n_global = 4;
  CHECK_THROWS_AS(adaptive_refinement_sample(model, far, conf2(0.5, 0.5), cfg, 1),
                  EmptySampleSetError);
}

TEST_CASE("refinement matches or beats global-only at the same optimizer budget") {
  auto model = fixtures::arm2();
  Scene scene;
  scene.obstacles.push_back({Vec2(1.2, 0.0), 0.3});
  scene.obstacles.push_back({Vec2(-1.2, 0.0), 0.3});
  scene.obstacles.push_back({Vec2(0.2, 1.1), 0.25});
  scene.id = "mixed3";
  std::size_t refined_total = 0;
  std::size_t global_total = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Configuration q(2);
    Rng qr = Rng::stream(seed, 0x5, 0);
    q << qr.uniform(-0.6, 1.8), qr.uniform(-1.5, 1.5);
    if (is_colliding(model, scene, q)) continue;
    SamplerConfig with_local;
    with_local.n_global = 8;
    with_local.n_local = 8;
    with_local.radius = 0.15;
    with_local.max_samples = 256;
    with_local.max_opt_iters = 45;
    SampleDiagnostics diag;
    auto refined = adaptive_refinement_sample(model, scene, q, with_local, seed, &diag);
    SamplerConfig global_only = with_local;
    global_only.n_global = diag.optimizer_calls;  // same total budget
    global_only.n_local = 0;
    auto global_set = adaptive_refinement_sample(model, scene, q, global_only, seed);
    CHECK(refined.samples.size() >= global_set.samples.size());
    refined_total += refined.samples.size();
    global_total += global_set.samples.size();
  }
  CHECK(refined_total > global_total);
}

TEST_CASE("d_min_est is monotone non-increasing in the global seed count") {
  auto model = fixtures::arm2();
  auto scene = fixtures::front_disc();
  const Configuration q = conf2(2.5, 1.0);
  double prev = kInf;
  for (int ng : {2, 4, 8, 16}) {
    SamplerConfig cfg;
    cfg.n_global = ng;
    auto set = adaptive_refinement_sample(model, scene, q, cfg, 31);
    CHECK(set.d_min_est <= prev + 1e-12);
    prev = set.d_min_est;
  }
}

TEST_CASE("sample_boundary_set produces deduplicated boundary points") {
  auto model = fixtures::arm2();
  auto scene = fixtures::front_disc();
  SamplerConfig cfg;
  auto set = sample_boundary_set(model, scene, 32, cfg, 4);
  REQUIRE(set.size() >= 10);
  for (const auto& s : set) {
    CHECK(std::abs(robot_scene_distance(model, scene, s)) <= cfg.boundary_tol);
  }
  for (std::size_t i = 0; i < set.size(); ++i) {
    for (std::size_t j = i + 1; j < set.size(); ++j) {
      CHECK((set[i] - set[j]).norm() >= cfg.dedup_radius() - 1e-12);
    }
  }
}

TEST_CASE("build_dataset is reproducible byte for byte and thread-count independent") {
  auto model = fixtures::arm2();
  SamplerConfig cfg;
  cfg.rng_seed = 7;
  std::vector<Scene> scenes{fixtures::front_disc()};
  auto ds1 = build_dataset(model, scenes, 12, cfg, 1);
  auto ds2 = build_dataset(model, scenes, 12, cfg, 2);
  const auto dir = std::filesystem::temp_directory_path();
  const std::string p1 = (dir / "cdflow_ds1.bin").string();
  const std::string p2 = (dir / "cdflow_ds2.bin").string();
  save_dataset(ds1, p1);
  save_dataset(ds2, p2);
  CHECK(file_bytes(p1) == file_bytes(p2));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("dataset targets agree with the oracle on a held-out check") {
  auto model = fixtures::arm2();
  auto scene = fixtures::front_disc();
  auto grid = build_collision_grid(model, scene, {256, 256});
  const double diag = grid.cell_diagonal();
  SamplerConfig cfg;
  cfg.rng_seed = 55;
  auto ds = build_dataset(model, {scene}, 25, cfg, 2);
  REQUIRE(ds.records.size() >= 20);
  for (const auto& rec : ds.records) {
    const double oracle = oracle_cdf(grid, rec.q).d_min;
    if (oracle == 0.0) {
      CHECK(rec.y_d == 0.0);
      CHECK_FALSE(rec.y_g.has_value());
      REQUIRE(rec.samples.size() == 1);
      CHECK(rec.samples[0] == rec.q);
    } else {
      // y_d is a mean over near-minimal points: within two cell diagonals.
      CHECK(std::abs(rec.y_d - oracle) <= 2.0 * diag);
      REQUIRE(rec.y_g.has_value());
      CHECK(rec.y_g->norm() <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("build_dataset raises a quality error when most records drop") {
  auto model = fixtures::arm2();
  auto scene = fixtures::front_disc();
  SamplerConfig cfg;
  cfg.boundary_tol = 1e-300;  // unattainable: every free-query sampler run fails
  cfg.n_global = 2;
  cfg.max_opt_iters = 9;
  CHECK_THROWS_AS(build_dataset(model, {scene}, 10, cfg, 1), DatasetQualityError);
}

TEST_CASE("free scenes are skipped and reported, not errors") {
  auto model = fixtures::arm2();
  Scene empty;
  empty.id = "empty";
  SamplerConfig cfg;
  auto ds = build_dataset(model, {empty}, 10, cfg, 1);
  CHECK(ds.records.empty());
  CHECK(ds.requested == 0);
  REQUIRE(ds.free_scene_ids.size() == 1);
  CHECK(ds.free_scene_ids[0] == "empty");
}

TEST_CASE("dataset round-trips through the binary format and exports csv") {
  auto model = fixtures::arm2();
  SamplerConfig cfg;
  cfg.rng_seed = 3;
  auto ds = build_dataset(model, {fixtures::front_disc(), fixtures::behind_disc()}, 6, cfg, 2);
  const auto dir = std::filesystem::temp_directory_path();
  const std::string path = (dir / "cdflow_ds_rt.bin").string();
  save_dataset(ds, path);
  auto loaded = load_dataset(path);
  REQUIRE(loaded.records.size() == ds.records.size());
  CHECK(loaded.robot.dof() == ds.robot.dof());
  CHECK(loaded.scenes.size() == ds.scenes.size());
  CHECK(loaded.sampler.rng_seed == ds.sampler.rng_seed);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    CHECK(loaded.records[i].q == ds.records[i].q);
    CHECK(loaded.records[i].y_d == ds.records[i].y_d);
    CHECK(loaded.records[i].y_g.has_value() == ds.records[i].y_g.has_value());
    REQUIRE(loaded.records[i].samples.size() == ds.records[i].samples.size());
    for (std::size_t k = 0; k < ds.records[i].samples.size(); ++k) {
      CHECK(loaded.records[i].samples[k] == ds.records[i].samples[k]);
    }
  }
  // Round-trip of the file itself is bit-stable.
  const std::string path2 = (dir / "cdflow_ds_rt2.bin").string();
  save_dataset(loaded, path2);
  CHECK(file_bytes(path) == file_bytes(path2));
  std::ostringstream csv;
  export_dataset_csv(ds, csv);
  const std::string csv_text = csv.str();
  CHECK(csv_text.find("record,scene_id,q0,q1,y_d") == 0);
  CHECK(std::count(csv_text.begin(), csv_text.end(), '\n') >= 2);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}
