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
#include <cmath>
#include <optional>
#include <vector>

#include "cdflow/ad.hpp"
#include "cdflow/field.hpp"
#include "cdflow/geometry.hpp"
#include "cdflow/rng.hpp"

namespace cdflow {

using ad::Mat;

/// Network shape: a shared conditioning trunk feeding both the CNF dynamics
/// and the distance regression head.
struct FlowArch {
  int dof = 2;
  int width = 64;
  int trunk_layers = 4;
  int dynamics_layers = 4;
  int head_layers = 2;
  int posenc_freqs = 6;   // octave-spaced sin/cos pairs per joint
  int max_obstacles = 5;  // fixed conditioning slots

  int scene_feature_dim() const { return 4 * max_obstacles; }  // cx, cy, r per slot + mask
  int query_feature_dim() const { return dof * (1 + 2 * posenc_freqs); }
  int trunk_input_dim() const { return query_feature_dim() + scene_feature_dim(); }
  int dynamics_input_dim() const { return dof + 1 + width; }

  bool operator==(const FlowArch&) const = default;
};

struct OdeConfig {
  int steps = 20;  // fixed-step RK4 over t in [0, 1]

  bool operator==(const OdeConfig&) const = default;
};

/// Flattened obstacle slots in canonical order plus a presence mask.
/// Canonicalization makes the encoding a function of the scene as a set.
inline Eigen::VectorXd scene_features(const Scene& scene, int max_obstacles) {
  if (static_cast<int>(scene.obstacles.size()) > max_obstacles) {
    throw std::invalid_argument("scene_features: scene has more obstacles than conditioning slots");
  }
  std::vector<Obstacle> sorted = scene.obstacles;
  std::sort(sorted.begin(), sorted.end(), [](const Obstacle& a, const Obstacle& b) {
    if (a.center.x() != b.center.x()) return a.center.x() < b.center.x();
    if (a.center.y() != b.center.y()) return a.center.y() < b.center.y();
    return a.radius < b.radius;
  });
  Eigen::VectorXd f = Eigen::VectorXd::Zero(4 * max_obstacles);
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    f[3 * static_cast<int>(i) + 0] = sorted[i].center.x();
    f[3 * static_cast<int>(i) + 1] = sorted[i].center.y();
    f[3 * static_cast<int>(i) + 2] = sorted[i].radius;
    f[3 * max_obstacles + static_cast<int>(i)] = 1.0;
  }
  return f;
}

/// The unified network: parameter tensors plus immutable architecture and
/// integrator configuration. Parameter order is part of the checkpoint
/// contract: trunk (W, b per layer), dynamics, head.
class FlowModel {
 public:
  FlowModel(FlowArch arch, OdeConfig ode, std::uint64_t init_seed)
      : arch_(arch), ode_(ode), init_seed_(init_seed) {
    Rng rng(splitmix_of(init_seed));
    auto push_layer = [&](int in, int out, double scale) {
      Mat w(out, in);
      for (int r = 0; r < out; ++r)
        for (int c = 0; c < in; ++c) w(r, c) = scale * rng.normal();
      params_.push_back(std::move(w));
      params_.push_back(Mat::Zero(out, 1));
    };
    for (int l = 0; l < arch_.trunk_layers; ++l) {
      const int in = l == 0 ? arch_.trunk_input_dim() : arch_.width;
      push_layer(in, arch_.width, 1.0 / std::sqrt(static_cast<double>(in)));
    }
    for (int l = 0; l < arch_.dynamics_layers; ++l) {
      const int in = l == 0 ? arch_.dynamics_input_dim() : arch_.width;
      const int out = l == arch_.dynamics_layers - 1 ? arch_.dof : arch_.width;
      // Zero-initialized output layer: the flow starts as the identity map.
      const double scale = l == arch_.dynamics_layers - 1 ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
      push_layer(in, out, scale);
    }
    for (int l = 0; l < arch_.head_layers; ++l) {
      const int in = arch_.width;
      const int out = l == arch_.head_layers - 1 ? 1 : arch_.width;
      push_layer(in, out, 1.0 / std::sqrt(static_cast<double>(in)));
    }
  }

  const FlowArch& arch() const { return arch_; }
  const OdeConfig& ode() const { return ode_; }
  std::uint64_t init_seed() const { return init_seed_; }

  const std::vector<Mat>& params() const { return params_; }
  std::vector<Mat>& mutable_params() { return params_; }

  int trunk_w(int layer) const { return 2 * layer; }
  int trunk_b(int layer) const { return 2 * layer + 1; }
  int dyn_w(int layer) const { return 2 * (arch_.trunk_layers + layer); }
  int dyn_b(int layer) const { return 2 * (arch_.trunk_layers + layer) + 1; }
  int head_w(int layer) const { return 2 * (arch_.trunk_layers + arch_.dynamics_layers + layer); }
  int head_b(int layer) const { return 2 * (arch_.trunk_layers + arch_.dynamics_layers + layer) + 1; }
  int param_count() const { return static_cast<int>(params_.size()); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
    return n;
  }

 private:
  static std::uint64_t splitmix_of(std::uint64_t seed) {
    std::uint64_t s = seed;
    return splitmix64(s);
  }

  FlowArch arch_;
  OdeConfig ode_;
  std::uint64_t init_seed_;
  std::vector<Mat> params_;
};

// ---------------------------------------------------------------------------
// Plain (double) evaluation paths used at inference time. Rows batch.
// ---------------------------------------------------------------------------

namespace detail {

inline Mat linear_rows(const Mat& x, const Mat& w, const Mat& b) {
  Mat y = x * w.transpose();
  y.rowwise() += b.col(0).transpose();
  return y;
}

/// Trunk forward: tanh after every layer.
inline Mat trunk_forward(const FlowModel& m, const Mat& trunk_in) {
  Mat h = trunk_in;
  for (int l = 0; l < m.arch().trunk_layers; ++l) {
    h = linear_rows(h, m.params()[m.trunk_w(l)], m.params()[m.trunk_b(l)]);
    h = h.array().tanh().matrix();
  }
  return h;
}

inline Mat head_forward(const FlowModel& m, const Mat& ctx) {
  Mat h = ctx;
  for (int l = 0; l < m.arch().head_layers; ++l) {
    h = linear_rows(h, m.params()[m.head_w(l)], m.params()[m.head_b(l)]);
    if (l + 1 < m.arch().head_layers) h = h.array().tanh().matrix();
  }
  return h;
}

/// Dynamics forward; optionally also the exact divergence trace computed by
/// dof tangent passes through the cached activations.
inline void dynamics_forward(const FlowModel& m, const Mat& z, double t, const Mat& ctx, Mat* h_out,
                             Mat* trace_out) {
  const int dof = m.arch().dof;
  const Eigen::Index rows = z.rows();
  Mat in(rows, m.arch().dynamics_input_dim());
  in.leftCols(dof) = z;
  in.col(dof).setConstant(t);
  in.rightCols(m.arch().width) = ctx;

  const int layers = m.arch().dynamics_layers;
  std::vector<Mat> acts;  // tanh outputs per hidden layer
  acts.reserve(static_cast<std::size_t>(layers));
  Mat h = in;
  for (int l = 0; l < layers; ++l) {
    h = linear_rows(h, m.params()[m.dyn_w(l)], m.params()[m.dyn_b(l)]);
    if (l + 1 < layers) {
      h = h.array().tanh().matrix();
      acts.push_back(h);
    }
  }
  if (h_out != nullptr) *h_out = h;
  if (trace_out == nullptr) return;

  Mat trace = Mat::Zero(rows, 1);
  for (int i = 0; i < dof; ++i) {
    Mat dot = Mat::Zero(rows, m.arch().dynamics_input_dim());
    dot.col(i).setOnes();
    Mat td = dot;
    for (int l = 0; l < layers; ++l) {
      td = td * m.params()[m.dyn_w(l)].transpose();
      if (l + 1 < layers) {
        td = (td.array() * (1.0 - acts[static_cast<std::size_t>(l)].array().square())).matrix();
      }
    }
    trace += td.col(i);
  }
  *trace_out = trace;
}

inline void require_finite(const Mat& m, const char* where) {
  if (!m.allFinite()) throw DivergenceError(std::string("non-finite state in ") + where);
}

}  // namespace detail

/// Conditioning vector for (q, scene): positional encoding of q concatenated
/// with the scene slots, passed through the shared trunk.
inline Eigen::VectorXd encode_input(const FlowModel& m, const Configuration& q, const Scene& scene) {
  if (q.size() != m.arch().dof) throw std::invalid_argument("encode_input: dof mismatch");
  Mat qrow = q.transpose();
  Mat enc = ad::Graph::encode(qrow, m.arch().posenc_freqs);
  Mat in(1, m.arch().trunk_input_dim());
  in.leftCols(enc.cols()) = enc;
  in.rightCols(m.arch().scene_feature_dim()) = scene_features(scene, m.arch().max_obstacles).transpose();
  return detail::trunk_forward(m, in).row(0).transpose();
}

/// Batched conditioning for many query rows sharing one scene.
inline Mat encode_rows(const FlowModel& m, const Mat& q_rows, const Scene& scene) {
  Mat enc = ad::Graph::encode(q_rows, m.arch().posenc_freqs);
  Mat in(q_rows.rows(), m.arch().trunk_input_dim());
  in.leftCols(enc.cols()) = enc;
  in.rightCols(m.arch().scene_feature_dim()) =
      scene_features(scene, m.arch().max_obstacles).transpose().replicate(q_rows.rows(), 1);
  return detail::trunk_forward(m, in);
}

/// Pushes latent rows z0 through the flow conditioned on (q, scene):
/// integrates dz/dt = h(z, t, ctx) from t = 0 to 1 with fixed-step RK4.
inline Mat cnf_sample_rows(const FlowModel& m, const Configuration& q, const Scene& scene,
                           const Mat& z0_rows) {
  const Mat ctx_row = encode_input(m, q, scene).transpose();
  const Mat ctx = ctx_row.replicate(z0_rows.rows(), 1);
  const int steps = m.ode().steps;
  const double dt = 1.0 / steps;
  Mat z = z0_rows;
  Mat k1, k2, k3, k4;
  for (int s = 0; s < steps; ++s) {
    const double t = s * dt;
    detail::dynamics_forward(m, z, t, ctx, &k1, nullptr);
    detail::dynamics_forward(m, z + (0.5 * dt) * k1, t + 0.5 * dt, ctx, &k2, nullptr);
    detail::dynamics_forward(m, z + (0.5 * dt) * k2, t + 0.5 * dt, ctx, &k3, nullptr);
    detail::dynamics_forward(m, z + dt * k3, t + dt, ctx, &k4, nullptr);
    z += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    detail::require_finite(z, "cnf_sample");
  }
  return z;
}

inline Configuration cnf_sample(const FlowModel& m, const Configuration& q, const Scene& scene,
                                const Eigen::VectorXd& z0) {
  return cnf_sample_rows(m, q, scene, Mat(z0.transpose())).row(0).transpose();
}

/// Exact log-density of target rows under the flow conditioned on (q, scene):
/// backward integration from t = 1 to 0 jointly with the exact divergence
/// (dof directional passes per stage, no stochastic estimator).
inline Eigen::VectorXd cnf_logprob_rows(const FlowModel& m, const Configuration& q,
                                        const Scene& scene, const Mat& target_rows) {
  const Mat ctx_row = encode_input(m, q, scene).transpose();
  const Mat ctx = ctx_row.replicate(target_rows.rows(), 1);
  const int steps = m.ode().steps;
  const double dt = -1.0 / steps;
  Mat z = target_rows;
  Mat acc = Mat::Zero(target_rows.rows(), 1);
  Mat k1, k2, k3, k4, t1, t2, t3, t4;
  for (int s = 0; s < steps; ++s) {
    const double t = 1.0 + s * dt;
    detail::dynamics_forward(m, z, t, ctx, &k1, &t1);
    detail::dynamics_forward(m, z + (0.5 * dt) * k1, t + 0.5 * dt, ctx, &k2, &t2);
    detail::dynamics_forward(m, z + (0.5 * dt) * k2, t + 0.5 * dt, ctx, &k3, &t3);
    detail::dynamics_forward(m, z + dt * k3, t + dt, ctx, &k4, &t4);
    z += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    acc += (dt / 6.0) * (t1 + 2.0 * t2 + 2.0 * t3 + t4);
    detail::require_finite(z, "cnf_logprob");
  }
  // log p(x) = log N(z(0)) - int_0^1 Tr dt; acc integrated 1 -> 0 equals the
  // negated integral, so it enters with a plus sign.
  const double log_norm = -0.5 * m.arch().dof * std::log(2.0 * kPi);
  return (-0.5 * z.array().square().rowwise().sum() + log_norm + acc.col(0).array()).matrix();
}

inline double cnf_logprob(const FlowModel& m, const Configuration& q, const Scene& scene,
                          const Configuration& target) {
  return cnf_logprob_rows(m, q, scene, Mat(target.transpose()))[0];
}

/// Scalar distance prediction from the regression head.
inline double predict_distance(const FlowModel& m, const Configuration& q, const Scene& scene) {
  const Mat ctx = encode_input(m, q, scene).transpose();
  return detail::head_forward(m, ctx)(0, 0);
}

/// Gradient of the predicted distance with respect to q, by a reverse sweep
/// through head, trunk and positional encoding.
inline Eigen::VectorXd predict_gradient(const FlowModel& m, const Configuration& q,
                                        const Scene& scene) {
  ad::Graph g(&m.params());
  const int qi = g.input(q.transpose());
  const int enc = g.posenc(qi, m.arch().posenc_freqs);
  const int feats = g.constant(scene_features(scene, m.arch().max_obstacles).transpose());
  int h = g.concat({enc, feats});
  for (int l = 0; l < m.arch().trunk_layers; ++l) {
    h = g.tanh_(g.linear(h, g.param(m.trunk_w(l)), g.param(m.trunk_b(l))));
  }
  for (int l = 0; l < m.arch().head_layers; ++l) {
    h = g.linear(h, g.param(m.head_w(l)), g.param(m.head_b(l)));
    if (l + 1 < m.arch().head_layers) h = g.tanh_(h);
  }
  g.backward(h);
  return g.adjoint(qi).row(0).transpose();
}

/// Monte Carlo field estimate: M prior draws pushed through the flow, then
/// the empirical distance/direction over the generated set.
inline FieldAnswer monte_carlo_field(const FlowModel& m, const Configuration& q, const Scene& scene,
                                     int draws, Rng& rng) {
  if (draws < 1) throw std::invalid_argument("monte_carlo_field: draws must be >= 1");
  Mat z0(draws, m.arch().dof);
  for (int i = 0; i < draws; ++i)
    for (int d = 0; d < m.arch().dof; ++d) z0(i, d) = rng.normal();
  const Mat samples = cnf_sample_rows(m, q, scene, z0);
  FieldAnswer ans;
  ans.provenance = Provenance::kLearnedMc;
  double dist_sum = 0.0;
  Eigen::VectorXd dir_sum = Eigen::VectorXd::Zero(m.arch().dof);
  int valid = 0;
  for (int i = 0; i < draws; ++i) {
    const Eigen::VectorXd diff = q - samples.row(i).transpose();
    const double norm = diff.norm();
    dist_sum += norm;
    if (norm > 1e-12) {
      dir_sum += diff / norm;
      ++valid;
    }
  }
  ans.distance = dist_sum / draws;
  if (valid > 0) ans.gradient = Eigen::VectorXd(dir_sum / valid);
  return ans;
}

/// The spec-level op: expected unit direction only, with the undefined flag
/// when every generated sample coincides with the query.
inline std::optional<Eigen::VectorXd> monte_carlo_gradient(const FlowModel& m,
                                                           const Configuration& q,
                                                           const Scene& scene, int draws,
                                                           Rng& rng) {
  return monte_carlo_field(m, q, scene, draws, rng).gradient;
}

}  // namespace cdflow
