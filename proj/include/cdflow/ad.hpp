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
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace cdflow::ad {

using Mat = Eigen::MatrixXd;

// Reverse-mode tape over matrix-valued nodes. Values are computed eagerly at
// node creation; backward() runs once from a scalar (1x1) root. Rows act as a
// batch dimension throughout.
//
// Derivative quantities that must themselves appear in a loss (gradients of
// the network output, divergence traces) are built with forward tangent
// nodes (linear_nb / dtanh_mul / posenc_tangent) sharing the same parameter
// nodes, so one reverse sweep differentiates through them exactly.
class Graph {
 public:
  explicit Graph(const std::vector<Mat>* params = nullptr) : params_(params) {}

  int constant(Mat v) { return push(Op::kConst, std::move(v), -1, -1, -1, false); }

  int input(Mat v) { return push(Op::kInput, std::move(v), -1, -1, -1, true); }

  int param(int param_id) {
    auto it = param_nodes_.find(param_id);
    if (it != param_nodes_.end()) return it->second;
    if (params_ == nullptr) throw std::logic_error("Graph has no parameter store");
    const int id = push(Op::kParam, (*params_)[static_cast<std::size_t>(param_id)], -1, -1, -1, true);
    nodes_[id].param_id = param_id;
    param_nodes_.emplace(param_id, id);
    return id;
  }

  // Y = X W^T + 1 b^T, with W of shape (out x in) and b of shape (out x 1).
  int linear(int x, int w, int b) {
    Mat y = val(x) * val(w).transpose();
    y.rowwise() += val(b).col(0).transpose();
    return push(Op::kLinear, std::move(y), x, w, b);
  }

  // Tangent of a linear layer: Y = X W^T (no bias).
  int linear_nb(int x, int w) {
    return push(Op::kLinearNoBias, val(x) * val(w).transpose(), x, w);
  }

  int tanh_(int x) { return push(Op::kTanh, val(x).array().tanh().matrix(), x); }

  // Tangent through tanh: Y = (1 - T.^2) .* X where T is the tanh output.
  int dtanh_mul(int t, int x) {
    Mat y = ((1.0 - val(t).array().square()) * val(x).array()).matrix();
    return push(Op::kDtanhMul, std::move(y), t, x);
  }

  int add(int a, int b) { return push(Op::kAdd, val(a) + val(b), a, b); }
  int sub(int a, int b) { return push(Op::kSub, val(a) - val(b), a, b); }
  int hadamard(int a, int b) { return push(Op::kHadamard, (val(a).array() * val(b).array()).matrix(), a, b); }

  // Y = alpha * X + beta (elementwise).
  int affine(int x, double alpha, double beta) {
    Mat y = (alpha * val(x).array() + beta).matrix();
    const int id = push(Op::kAffine, std::move(y), x);
    nodes_[id].alpha = alpha;
    return id;
  }

  int concat(std::initializer_list<int> parts) {
    std::array<int, 3> p{-1, -1, -1};
    int n = 0;
    Eigen::Index rows = 0, cols = 0;
    for (int id : parts) {
      if (n >= 3) throw std::logic_error("concat supports up to 3 parts; chain for more");
      p[static_cast<std::size_t>(n++)] = id;
      rows = val(id).rows();
      cols += val(id).cols();
    }
    Mat y(rows, cols);
    Eigen::Index at = 0;
    for (int i = 0; i < n; ++i) {
      y.middleCols(at, val(p[static_cast<std::size_t>(i)]).cols()) = val(p[static_cast<std::size_t>(i)]);
      at += val(p[static_cast<std::size_t>(i)]).cols();
    }
    return push(Op::kConcatCols, std::move(y), p[0], p[1], p[2]);
  }

  int slice_cols(int x, int start, int count) {
    const int id = push(Op::kSliceCols, val(x).middleCols(start, count), x);
    nodes_[id].i0 = start;
    nodes_[id].i1 = count;
    return id;
  }

  // Row-wise dot product -> R x 1.
  int row_dot(int a, int b) {
    Mat y = (val(a).array() * val(b).array()).rowwise().sum().matrix();
    return push(Op::kRowDot, std::move(y), a, b);
  }

  // Y = X .* (s * ones(1, C)) with s of shape R x 1.
  int row_scale(int x, int s) {
    Mat y = (val(x).array().colwise() * val(s).col(0).array()).matrix();
    return push(Op::kRowScale, std::move(y), x, s);
  }

  // Elementwise sqrt(max(X, eps)); derivative zero where clamped.
  int sqrt_guard(int x, double eps = 1e-30) {
    Mat y = val(x).array().max(eps).sqrt().matrix();
    const int id = push(Op::kSqrtGuard, std::move(y), x);
    nodes_[id].alpha = eps;
    return id;
  }

  int abs_(int x) { return push(Op::kAbs, val(x).array().abs().matrix(), x); }

  int divide(int a, int b) { return push(Op::kDivide, (val(a).array() / val(b).array()).matrix(), a, b); }

  int sum_all(int x) {
    Mat y(1, 1);
    y(0, 0) = val(x).sum();
    return push(Op::kSumAll, std::move(y), x);
  }

  // Positional encoding: for each input column q, emit
  // [q, sin(2^f q), cos(2^f q) for f in 0..freqs-1]. freqs == 0 passes through.
  int posenc(int q, int freqs) {
    const Mat& x = val(q);
    const int id = push(Op::kPosEnc, encode(x, freqs), q);
    nodes_[id].i0 = freqs;
    return id;
  }

  // Directional derivative of posenc at q in direction seed (same shape as q).
  int posenc_tangent(int q, int seed, int freqs) {
    const Mat& x = val(q);
    const Mat& s = val(seed);
    const int dims = static_cast<int>(x.cols());
    const int block = 1 + 2 * freqs;
    Mat y(x.rows(), static_cast<Eigen::Index>(dims) * block);
    for (int d = 0; d < dims; ++d) {
      const int base = d * block;
      y.col(base) = s.col(d);
      for (int f = 0; f < freqs; ++f) {
        const double w = std::pow(2.0, f);
        y.col(base + 1 + 2 * f) = w * (x.col(d).array() * w).cos() * s.col(d).array();
        y.col(base + 2 + 2 * f) = -w * (x.col(d).array() * w).sin() * s.col(d).array();
      }
    }
    const int id = push(Op::kPosEncTangent, std::move(y), q, seed);
    nodes_[id].i0 = freqs;
    return id;
  }

  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  // Reverse sweep from a 1x1 root node.
  void backward(int root) {
    auto& r = nodes_[static_cast<std::size_t>(root)];
    if (r.value.rows() != 1 || r.value.cols() != 1) {
      throw std::logic_error("backward root must be a scalar node");
    }
    touch_adj(root)(0, 0) = 1.0;
    for (int id = root; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.adj.size() == 0 || !n.needs_grad) continue;
      propagate(n);
    }
  }

  // Adjoint of a leaf after backward(); zero matrix if never touched.
  Mat adjoint(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.adj.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.adj;
  }

  Mat param_gradient(int param_id) const {
    auto it = param_nodes_.find(param_id);
    if (it == param_nodes_.end()) {
      return Mat::Zero((*params_)[static_cast<std::size_t>(param_id)].rows(),
                       (*params_)[static_cast<std::size_t>(param_id)].cols());
    }
    return adjoint(it->second);
  }

  std::size_t size() const { return nodes_.size(); }

  static Mat encode(const Mat& x, int freqs) {
    const int dims = static_cast<int>(x.cols());
    const int block = 1 + 2 * freqs;
    Mat y(x.rows(), static_cast<Eigen::Index>(dims) * block);
    for (int d = 0; d < dims; ++d) {
      const int base = d * block;
      y.col(base) = x.col(d);
      for (int f = 0; f < freqs; ++f) {
        const double w = std::pow(2.0, f);
        y.col(base + 1 + 2 * f) = (x.col(d).array() * w).sin();
        y.col(base + 2 + 2 * f) = (x.col(d).array() * w).cos();
      }
    }
    return y;
  }

 private:
  enum class Op : std::uint8_t {
    kConst,
    kParam,
    kInput,
    kLinear,
    kLinearNoBias,
    kTanh,
    kDtanhMul,
    kAdd,
    kSub,
    kHadamard,
    kAffine,
    kConcatCols,
    kSliceCols,
    kRowDot,
    kRowScale,
    kSqrtGuard,
    kAbs,
    kDivide,
    kSumAll,
    kPosEnc,
    kPosEncTangent,
  };

  struct Node {
    Op op;
    int a = -1, b = -1, c = -1;
    double alpha = 0.0;
    int i0 = 0, i1 = 0;
    int param_id = -1;
    bool needs_grad = true;
    Mat value;
    Mat adj;
  };

  const Mat& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  Mat& touch_adj(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.adj.size() == 0) n.adj = Mat::Zero(n.value.rows(), n.value.cols());
    return n.adj;
  }

  bool wants_grad(int id) const {
    return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad;
  }

  int push(Op op, Mat value, int a = -1, int b = -1, int c = -1, bool force_grad = false) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.c = c;
    n.value = std::move(value);
    n.needs_grad = force_grad || wants_grad(a) || wants_grad(b) || wants_grad(c);
    if (op == Op::kConst) n.needs_grad = false;
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void propagate(Node& n) {
    const Mat& g = n.adj;
    switch (n.op) {
      case Op::kConst:
      case Op::kParam:
      case Op::kInput:
        break;
      case Op::kLinear: {
        if (wants_grad(n.a)) touch_adj(n.a).noalias() += g * val(n.b);
        if (wants_grad(n.b)) touch_adj(n.b).noalias() += g.transpose() * val(n.a);
        if (wants_grad(n.c)) touch_adj(n.c).col(0).noalias() += g.colwise().sum().transpose();
        break;
      }
      case Op::kLinearNoBias: {
        if (wants_grad(n.a)) touch_adj(n.a).noalias() += g * val(n.b);
        if (wants_grad(n.b)) touch_adj(n.b).noalias() += g.transpose() * val(n.a);
        break;
      }
      case Op::kTanh: {
        if (wants_grad(n.a)) {
          touch_adj(n.a).array() += g.array() * (1.0 - n.value.array().square());
        }
        break;
      }
      case Op::kDtanhMul: {
        const Mat& t = val(n.a);
        const Mat& x = val(n.b);
        if (wants_grad(n.a)) touch_adj(n.a).array() += g.array() * (-2.0 * t.array() * x.array());
        if (wants_grad(n.b)) touch_adj(n.b).array() += g.array() * (1.0 - t.array().square());
        break;
      }
      case Op::kAdd: {
        if (wants_grad(n.a)) touch_adj(n.a) += g;
        if (wants_grad(n.b)) touch_adj(n.b) += g;
        break;
      }
      case Op::kSub: {
        if (wants_grad(n.a)) touch_adj(n.a) += g;
        if (wants_grad(n.b)) touch_adj(n.b) -= g;
        break;
      }
      case Op::kHadamard: {
        if (wants_grad(n.a)) touch_adj(n.a).array() += g.array() * val(n.b).array();
        if (wants_grad(n.b)) touch_adj(n.b).array() += g.array() * val(n.a).array();
        break;
      }
      case Op::kAffine: {
        if (wants_grad(n.a)) touch_adj(n.a) += n.alpha * g;
        break;
      }
      case Op::kConcatCols: {
        Eigen::Index at = 0;
        for (int pid : {n.a, n.b, n.c}) {
          if (pid < 0) break;
          const Eigen::Index w = val(pid).cols();
          if (wants_grad(pid)) touch_adj(pid) += g.middleCols(at, w);
          at += w;
        }
        break;
      }
      case Op::kSliceCols: {
        if (wants_grad(n.a)) touch_adj(n.a).middleCols(n.i0, n.i1) += g;
        break;
      }
      case Op::kRowDot: {
        if (wants_grad(n.a)) {
          touch_adj(n.a).array() += val(n.b).array().colwise() * g.col(0).array();
        }
        if (wants_grad(n.b)) {
          touch_adj(n.b).array() += val(n.a).array().colwise() * g.col(0).array();
        }
        break;
      }
      case Op::kRowScale: {
        if (wants_grad(n.a)) {
          touch_adj(n.a).array() += g.array().colwise() * val(n.b).col(0).array();
        }
        if (wants_grad(n.b)) {
          touch_adj(n.b).col(0).array() += (g.array() * val(n.a).array()).rowwise().sum();
        }
        break;
      }
      case Op::kSqrtGuard: {
        if (wants_grad(n.a)) {
          auto mask = (val(n.a).array() > n.alpha).cast<double>();
          touch_adj(n.a).array() += g.array() * mask * 0.5 / n.value.array();
        }
        break;
      }
      case Op::kAbs: {
        if (wants_grad(n.a)) {
          touch_adj(n.a).array() += g.array() * val(n.a).array().sign();
        }
        break;
      }
      case Op::kDivide: {
        if (wants_grad(n.a)) touch_adj(n.a).array() += g.array() / val(n.b).array();
        if (wants_grad(n.b)) {
          touch_adj(n.b).array() -= g.array() * n.value.array() / val(n.b).array();
        }
        break;
      }
      case Op::kSumAll: {
        if (wants_grad(n.a)) touch_adj(n.a).array() += g(0, 0);
        break;
      }
      case Op::kPosEnc: {
        if (!wants_grad(n.a)) break;
        const Mat& x = val(n.a);
        const int dims = static_cast<int>(x.cols());
        const int freqs = n.i0;
        const int block = 1 + 2 * freqs;
        Mat& ax = touch_adj(n.a);
        for (int d = 0; d < dims; ++d) {
          const int base = d * block;
          ax.col(d) += g.col(base);
          for (int f = 0; f < freqs; ++f) {
            const double w = std::pow(2.0, f);
            auto arg = x.col(d).array() * w;
            ax.col(d).array() += w * (g.col(base + 1 + 2 * f).array() * arg.cos() -
                                      g.col(base + 2 + 2 * f).array() * arg.sin());
          }
        }
        break;
      }
      case Op::kPosEncTangent: {
        const Mat& x = val(n.a);
        const Mat& s = val(n.b);
        const int dims = static_cast<int>(x.cols());
        const int freqs = n.i0;
        const int block = 1 + 2 * freqs;
        for (int d = 0; d < dims; ++d) {
          const int base = d * block;
          if (wants_grad(n.b)) {
            Mat& as = touch_adj(n.b);
            as.col(d) += g.col(base);
            for (int f = 0; f < freqs; ++f) {
              const double w = std::pow(2.0, f);
              auto arg = x.col(d).array() * w;
              as.col(d).array() += w * (g.col(base + 1 + 2 * f).array() * arg.cos() -
                                        g.col(base + 2 + 2 * f).array() * arg.sin());
            }
          }
          if (wants_grad(n.a)) {
            Mat& ax = touch_adj(n.a);
            for (int f = 0; f < freqs; ++f) {
              const double w = std::pow(2.0, f);
              auto arg = x.col(d).array() * w;
              ax.col(d).array() -= w * w * s.col(d).array() *
                                   (g.col(base + 1 + 2 * f).array() * arg.sin() +
                                    g.col(base + 2 + 2 * f).array() * arg.cos());
            }
          }
        }
        break;
      }
    }
  }

  const std::vector<Mat>* params_;
  std::vector<Node> nodes_;
  std::unordered_map<int, int> param_nodes_;
};

}  // namespace cdflow::ad
