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

#include <stdexcept>
#include <string>

namespace cdflow {

/// A configuration component lies outside its joint limit interval.
class LimitViolationError : public std::invalid_argument {
 public:
  explicit LimitViolationError(const std::string& what) : std::invalid_argument(what) {}
};

/// A gradient was requested where it is undefined (query on or inside the
/// collision set, or a sample coincident with the query).
class GradientUndefinedError : public std::runtime_error {
 public:
  explicit GradientUndefinedError(const std::string& what) : std::runtime_error(what) {}
};

/// Adaptive sampling produced no boundary solution for a query.
class EmptySampleSetError : public std::runtime_error {
 public:
  explicit EmptySampleSetError(const std::string& what) : std::runtime_error(what) {}
};

/// More than half of the requested dataset records had to be dropped.
class DatasetQualityError : public std::runtime_error {
 public:
  explicit DatasetQualityError(const std::string& what) : std::runtime_error(what) {}
};

/// ODE state or loss became non-finite.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

/// Grid construction would exceed the cell-count memory guard.
class GridSizeError : public std::length_error {
 public:
  explicit GridSizeError(const std::string& what) : std::length_error(what) {}
};

/// File format or serialization failure.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace cdflow
