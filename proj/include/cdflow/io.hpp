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

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdflow/errors.hpp"
#include "cdflow/geometry.hpp"

namespace cdflow {

// ---------------------------------------------------------------------------
// Little-endian binary primitives. All persisted formats in this project are
// written on and for little-endian hosts; a magic/version header guards reads.
// ---------------------------------------------------------------------------

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot open for writing: " + path);
  }

  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }

  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

  void f64s(const double* data, std::size_t n) { raw(data, n * sizeof(double)); }

  void bytes(const std::uint8_t* data, std::size_t n) { raw(data, n); }

  void close() { out_.close(); }

 private:
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed");
  }

  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("cannot open for reading: " + path);
  }

  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  double f64() {
    double v;
    raw(&v, sizeof v);
    return v;
  }

  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 24)) throw IoError("string too large in " + path_);
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  void f64s(double* data, std::size_t n) { raw(data, n * sizeof(double)); }
  void bytes(std::uint8_t* data, std::size_t n) { raw(data, n); }

 private:
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw IoError("unexpected end of file: " + path_);
  }

  std::ifstream in_;
  std::string path_;
};

/// FNV-1a over a byte stream; used as the trailing checksum of checkpoints.
class Fnv1a {
 public:
  void update(const void* p, std::size_t n) {
    auto* b = static_cast<const std::uint8_t*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= b[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  void update_f64(double v) { update(&v, sizeof v); }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

// ---------------------------------------------------------------------------
// Robot / scene text files (JSON). Schema:
//
//   robot file: {"link_lengths": [..], "link_radii": [..],
//                "joint_limits": [[lo, hi], ..]}
//   scene file: {"id": "name", "obstacles": [{"center": [x, y], "radius": r}, ..]}
//
// All angles are radians, all lengths meters.
// ---------------------------------------------------------------------------

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError("bad JSON in " + path + ": " + e.what());
  }
  return j;
}

inline RobotModel robot_from_json(const nlohmann::json& j) {
  std::vector<double> lengths = j.at("link_lengths").get<std::vector<double>>();
  std::vector<double> radii = j.at("link_radii").get<std::vector<double>>();
  std::vector<JointLimit> limits;
  for (const auto& pair : j.at("joint_limits")) {
    limits.push_back(JointLimit{pair.at(0).get<double>(), pair.at(1).get<double>()});
  }
  return RobotModel(std::move(lengths), std::move(radii), std::move(limits));
}

inline nlohmann::json robot_to_json(const RobotModel& model) {
  nlohmann::json j;
  j["link_lengths"] = model.link_lengths();
  j["link_radii"] = model.link_radii();
  auto limits = nlohmann::json::array();
  for (const auto& jl : model.joint_limits()) limits.push_back({jl.lo, jl.hi});
  j["joint_limits"] = limits;
  return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  s.id = j.value("id", "");
  if (j.contains("obstacles")) {
    for (const auto& ob : j.at("obstacles")) {
      const auto& c = ob.at("center");
      const double r = ob.at("radius").get<double>();
      if (!(r > 0.0)) throw IoError("obstacle radius must be positive");
      s.obstacles.push_back({Vec2(c.at(0).get<double>(), c.at(1).get<double>()), r});
    }
  }
  return s;
}

inline nlohmann::json scene_to_json(const Scene& s) {
  nlohmann::json j;
  j["id"] = s.id;
  auto obs = nlohmann::json::array();
  for (const auto& ob : s.obstacles) {
    obs.push_back({{"center", {ob.center.x(), ob.center.y()}}, {"radius", ob.radius}});
  }
  j["obstacles"] = obs;
  return j;
}

inline RobotModel load_robot(const std::string& path) { return robot_from_json(load_json_file(path)); }
inline Scene load_scene(const std::string& path) { return scene_from_json(load_json_file(path)); }

inline void save_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace cdflow
