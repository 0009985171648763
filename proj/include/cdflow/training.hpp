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

#include <array>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cdflow/neural.hpp"
#include "cdflow/parallel.hpp"
#include "cdflow/sampling.hpp"

namespace cdflow {

struct TrainingConfig {
  std::array<double, 5> lambdas{1.0, 1.0, 0.5, 0.1, 0.01};  // nll, dist, grad, eik, ten
  double lr = 1e-3;
  double lr_decay = 0.5;
  int decay_every = 2000;
  int steps = 5000;
  int batch_size = 32;
  std::uint64_t seed = 0;
  double grad_clip = 10.0;   // global parameter-gradient norm
  int nll_pairs = 1;         // NLL targets drawn per record per step
  int ode_steps = 10;        // integrator steps of the training NLL estimator
  int checkpoint_every = 1000;
  int threads = 1;

  void validate() const {
    double sum = 0.0;
    for (double l : lambdas) {
      if (l < 0.0) throw std::invalid_argument("TrainingConfig: loss weights must be >= 0");
      sum += l;
    }
    if (sum <= 0.0) throw std::invalid_argument("TrainingConfig: at least one loss weight must be > 0");
    if (steps < 1 || batch_size < 1 || nll_pairs < 0 || ode_steps < 1) {
      throw std::invalid_argument("TrainingConfig: counts must be positive");
    }
  }
};

struct LossReport {
  double nll = 0.0;
  double dist = 0.0;
  double grad = 0.0;
  double eik = 0.0;
  double ten = 0.0;
  double total = 0.0;
};

namespace detail {

/// One prepared loss batch: records plus per-record NLL target rows and
/// collocation rows for the field regularizers.
struct LossBatch {
  std::vector<const TrainingRecord*> records;
  std::vector<const Scene*> scenes;                       // parallel to records
  std::vector<std::vector<const Configuration*>> targets; // per record, may be empty
  Mat collocation;                 // extra eik/ten rows, 0 x dof allowed
  std::vector<bool> collocation_free;  // eik/ten apply only to free rows
};

/// Sum-form loss terms of one chunk, plus the weighted-equivalent node layout
/// used to run one backward sweep.
struct LossTerms {
  double nll_sum = 0.0;
  double dist_sum = 0.0;
  double grad_sum = 0.0;
  double eik_sum = 0.0;
  double ten_sum = 0.0;
};

struct LossCounts {
  std::size_t nll = 0;   // records carrying at least one target
  std::size_t dist = 0;  // records
  std::size_t grad = 0;  // records with defined y_g
  std::size_t field = 0; // rows entering eik/ten (records + collocation)
};

inline LossCounts count_terms(const LossBatch& batch) {
  LossCounts n;
  n.dist = batch.records.size();
  for (std::size_t i = 0; i < batch.records.size(); ++i) {
    if (!batch.targets[i].empty()) ++n.nll;
    if (batch.records[i]->y_g.has_value()) ++n.grad;
    // The true field is flat on the colliding set, so the eikonal/tension
    // regularizers apply to free queries only (mirrors the L_grad exclusion).
    if (batch.records[i]->y_d > 0.0) ++n.field;
  }
  for (Eigen::Index c = 0; c < batch.collocation.rows(); ++c) {
    if (batch.collocation_free.empty() || batch.collocation_free[static_cast<std::size_t>(c)]) ++n.field;
  }
  return n;
}

/// Builds the regression/field half (dist, grad, eik, ten) and the CNF NLL
/// half of the loss on one graph, as weighted sums with the caller-supplied
/// per-term weights (weight = lambda / global count). Returns the scalar root
/// plus the raw per-term sums for reporting.
class LossGraphBuilder {
 public:
  LossGraphBuilder(const FlowModel& model, const TrainingConfig& cfg, int ode_steps)
      : model_(model), cfg_(cfg), ode_steps_(ode_steps) {}

  /// weights: lambda_i / count_i for nll, dist, grad, eik, ten.
  /// Returns the 1x1 root node; term sums via `terms()` after the call.
  int build(ad::Graph& g, const LossBatch& batch, const std::array<double, 5>& weights) {
    const auto& arch = model_.arch();
    const int dof = arch.dof;
    const std::size_t n_rec = batch.records.size();
    const Eigen::Index n_col = batch.collocation.rows();
    const Eigen::Index rows = static_cast<Eigen::Index>(n_rec) + n_col;

    // Field rows: training queries then collocation points.
    Mat q_rows(rows, dof);
    Mat feat_rows(rows, arch.scene_feature_dim());
    Mat y_d = Mat::Zero(rows, 1);
    Mat y_g = Mat::Zero(rows, dof);
    Mat y_g_norm = Mat::Ones(rows, 1);
    Mat dist_mask = Mat::Zero(rows, 1);
    Mat grad_mask = Mat::Zero(rows, 1);
    Mat field_mask = Mat::Zero(rows, 1);
    for (std::size_t i = 0; i < n_rec; ++i) {
      const auto& rec = *batch.records[i];
      q_rows.row(static_cast<Eigen::Index>(i)) = rec.q.transpose();
      feat_rows.row(static_cast<Eigen::Index>(i)) =
          scene_features(*batch.scenes[i], arch.max_obstacles).transpose();
      y_d(static_cast<Eigen::Index>(i), 0) = rec.y_d;
      dist_mask(static_cast<Eigen::Index>(i), 0) = 1.0;
      if (rec.y_d > 0.0) field_mask(static_cast<Eigen::Index>(i), 0) = 1.0;
      if (rec.y_g.has_value()) {
        y_g.row(static_cast<Eigen::Index>(i)) = rec.y_g->transpose();
        y_g_norm(static_cast<Eigen::Index>(i), 0) = std::max(rec.y_g->norm(), 1e-12);
        grad_mask(static_cast<Eigen::Index>(i), 0) = 1.0;
      }
    }
    for (Eigen::Index c = 0; c < n_col; ++c) {
      q_rows.row(static_cast<Eigen::Index>(n_rec) + c) = batch.collocation.row(c);
      if (batch.collocation_free.empty() || batch.collocation_free[static_cast<std::size_t>(c)]) {
        field_mask(static_cast<Eigen::Index>(n_rec) + c, 0) = 1.0;
      }
      // Collocation rows reuse the scene of the record they were drawn for,
      // cycling when the batch has fewer records than collocation rows.
      const std::size_t src = n_rec == 0 ? 0 : static_cast<std::size_t>(c) % n_rec;
      if (n_rec > 0) {
        feat_rows.row(static_cast<Eigen::Index>(n_rec) + c) =
            scene_features(*batch.scenes[src], arch.max_obstacles).transpose();
      }
    }

    const auto [d_hat, grad_node] = field_eval(g, q_rows, feat_rows);

    // L_dist: squared error on the record rows.
    const int dist_diff = g.sub(d_hat, g.constant(y_d));
    const int dist_rows = g.hadamard(dist_diff, dist_diff);
    const int dist_sum = g.sum_all(g.hadamard(dist_rows, g.constant(dist_mask)));

    // L_grad: 1 - cosine on rows with defined targets.
    const int g_norm = g.sqrt_guard(g.row_dot(grad_node, grad_node), 1e-24);
    const int cos_den = g.hadamard(g_norm, g.constant(y_g_norm));
    const int cos_rows = g.divide(g.row_dot(grad_node, g.constant(y_g)), cos_den);
    const int grad_rows = g.affine(cos_rows, -1.0, 1.0);
    const int grad_sum = g.sum_all(g.hadamard(grad_rows, g.constant(grad_mask)));

    // L_eik on the free rows.
    const int field_mask_node = g.constant(field_mask);
    const int eik_rows = g.abs_(g.affine(g_norm, 1.0, -1.0));
    const int eik_sum = g.sum_all(g.hadamard(eik_rows, field_mask_node));

    // L_ten: Frobenius norm of the finite-difference Hessian of d_hat,
    // columns from central differences of the gradient at step h.
    const double h_fd = 1e-3;
    int ten_sum = -1;
    if (weights[4] != 0.0) {
      std::vector<int> hess_cols;
      for (int j = 0; j < dof; ++j) {
        Mat qp = q_rows;
        qp.col(j).array() += h_fd;
        Mat qm = q_rows;
        qm.col(j).array() -= h_fd;
        const int gp = field_eval(g, qp, feat_rows).second;
        const int gm = field_eval(g, qm, feat_rows).second;
        const int col = g.affine(g.sub(gp, gm), 1.0 / (2.0 * h_fd), 0.0);
        hess_cols.push_back(g.row_dot(col, col));
      }
      int ten_rows = hess_cols[0];
      for (int j = 1; j < dof; ++j) ten_rows = g.add(ten_rows, hess_cols[static_cast<std::size_t>(j)]);
      ten_sum = g.sum_all(g.hadamard(ten_rows, field_mask_node));
    }

    // L_NLL over the prepared target rows.
    int nll_sum = -1;
    if (weights[0] != 0.0) nll_sum = build_nll(g, batch);

    // Weighted root. Each term enters as weight * sum.
    int root = g.affine(dist_sum, weights[1], 0.0);
    root = g.add(root, g.affine(grad_sum, weights[2], 0.0));
    root = g.add(root, g.affine(eik_sum, weights[3], 0.0));
    if (ten_sum >= 0) root = g.add(root, g.affine(ten_sum, weights[4], 0.0));
    if (nll_sum >= 0) root = g.add(root, g.affine(nll_sum, weights[0], 0.0));

    terms_.dist_sum = g.value(dist_sum)(0, 0);
    terms_.grad_sum = g.value(grad_sum)(0, 0);
    terms_.eik_sum = g.value(eik_sum)(0, 0);
    terms_.ten_sum = ten_sum >= 0 ? g.value(ten_sum)(0, 0) : 0.0;
    terms_.nll_sum = nll_sum >= 0 ? g.value(nll_sum)(0, 0) : 0.0;
    return root;
  }

  const LossTerms& terms() const { return terms_; }
  /// Per-target negative log-likelihoods of the last build (for diagnostics).
  const Mat& nll_rows() const { return nll_rows_value_; }

 private:
  int trunk(ad::Graph& g, int q_node, int feat_node) {
    int h = g.concat({g.posenc(q_node, model_.arch().posenc_freqs), feat_node});
    for (int l = 0; l < model_.arch().trunk_layers; ++l) {
      h = g.tanh_(g.linear(h, g.param(model_.trunk_w(l)), g.param(model_.trunk_b(l))));
    }
    return h;
  }

  /// Distance prediction and its q-gradient for a block of rows: one value
  /// chain with dof forward tangent channels riding along. Returns
  /// (value node rows x 1, gradient node rows x dof).
  std::pair<int, int> field_eval(ad::Graph& g, const Mat& q_rows, const Mat& feat_rows) {
    const auto& arch = model_.arch();
    const int dof = arch.dof;
    const int q_node = g.constant(q_rows);
    const int feat_node = g.constant(feat_rows);
    const int enc = g.posenc(q_node, arch.posenc_freqs);
    int h = g.concat({enc, feat_node});
    const int feat_zeros = g.constant(Mat::Zero(q_rows.rows(), arch.scene_feature_dim()));
    std::vector<int> hd(static_cast<std::size_t>(dof));
    for (int i = 0; i < dof; ++i) {
      Mat seed = Mat::Zero(q_rows.rows(), dof);
      seed.col(i).setOnes();
      const int enc_dot = g.posenc_tangent(q_node, g.constant(seed), arch.posenc_freqs);
      hd[static_cast<std::size_t>(i)] = g.concat({enc_dot, feat_zeros});
    }
    for (int l = 0; l < arch.trunk_layers; ++l) {
      const int wl = g.param(model_.trunk_w(l));
      h = g.tanh_(g.linear(h, wl, g.param(model_.trunk_b(l))));
      for (auto& channel : hd) channel = g.dtanh_mul(h, g.linear_nb(channel, wl));
    }
    for (int l = 0; l < arch.head_layers; ++l) {
      const int wl = g.param(model_.head_w(l));
      const int lin = g.linear(h, wl, g.param(model_.head_b(l)));
      for (auto& channel : hd) channel = g.linear_nb(channel, wl);
      if (l + 1 < arch.head_layers) {
        h = g.tanh_(lin);
        for (auto& channel : hd) channel = g.dtanh_mul(h, channel);
      } else {
        h = lin;
      }
    }
    int grad = hd[0];
    for (int i = 1; i < dof; ++i) grad = g.concat({grad, hd[static_cast<std::size_t>(i)]});
    return {h, grad};
  }

  /// Mean negative log-likelihood, weighted per record (each record's targets
  /// average to one unit, records then sum). Returns the sum node; the mean
  /// normalization happens in the caller's weight.
  int build_nll(ad::Graph& g, const LossBatch& batch) {
    const auto& arch = model_.arch();
    const int dof = arch.dof;
    std::vector<Eigen::Index> row_of_record;
    Eigen::Index n_rows = 0;
    for (const auto& t : batch.targets) n_rows += static_cast<Eigen::Index>(t.size());
    if (n_rows == 0) {
      nll_rows_value_ = Mat();
      return g.constant(Mat::Zero(1, 1));
    }
    Mat q_rows(n_rows, dof);
    Mat feat_rows(n_rows, arch.scene_feature_dim());
    Mat z_rows(n_rows, dof);
    Mat weight_rows(n_rows, 1);
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < batch.records.size(); ++i) {
      const auto& targets = batch.targets[i];
      if (targets.empty()) continue;
      const Mat feat = scene_features(*batch.scenes[i], arch.max_obstacles).transpose();
      for (const Configuration* t : targets) {
        q_rows.row(at) = batch.records[i]->q.transpose();
        feat_rows.row(at) = feat;
        z_rows.row(at) = t->transpose();
        weight_rows(at, 0) = 1.0 / static_cast<double>(targets.size());
        ++at;
      }
    }

    const int ctx = trunk(g, g.constant(q_rows), g.constant(feat_rows));
    const double dt = -1.0 / ode_steps_;
    int z = g.constant(z_rows);
    int acc = g.constant(Mat::Zero(n_rows, 1));
    for (int s = 0; s < ode_steps_; ++s) {
      const double t = 1.0 + s * dt;
      auto [k1, t1] = dynamics_with_trace(g, z, t, ctx, n_rows);
      auto [k2, t2] = dynamics_with_trace(g, g.add(z, g.affine(k1, 0.5 * dt, 0.0)), t + 0.5 * dt, ctx, n_rows);
      auto [k3, t3] = dynamics_with_trace(g, g.add(z, g.affine(k2, 0.5 * dt, 0.0)), t + 0.5 * dt, ctx, n_rows);
      auto [k4, t4] = dynamics_with_trace(g, g.add(z, g.affine(k3, dt, 0.0)), t + dt, ctx, n_rows);
      const int ksum = g.add(g.add(k1, g.affine(k2, 2.0, 0.0)), g.add(g.affine(k3, 2.0, 0.0), k4));
      z = g.add(z, g.affine(ksum, dt / 6.0, 0.0));
      const int tsum = g.add(g.add(t1, g.affine(t2, 2.0, 0.0)), g.add(g.affine(t3, 2.0, 0.0), t4));
      acc = g.add(acc, g.affine(tsum, dt / 6.0, 0.0));
    }
    // -log p = 0.5 |z0|^2 + (dof/2) log(2 pi) - acc.
    const double log_norm = 0.5 * dof * std::log(2.0 * kPi);
    const int neg_logp =
        g.sub(g.affine(g.row_dot(z, z), 0.5, log_norm), acc);
    nll_rows_value_ = g.value(neg_logp);
    return g.sum_all(g.hadamard(neg_logp, g.constant(weight_rows)));
  }

  /// Dynamics stage value plus exact trace, as graph nodes.
  std::pair<int, int> dynamics_with_trace(ad::Graph& g, int z_node, double t, int ctx_node,
                                          Eigen::Index rows) {
    const auto& arch = model_.arch();
    const int dof = arch.dof;
    const int t_node = g.constant(Mat::Constant(rows, 1, t));
    int h = g.concat({z_node, t_node, ctx_node});
    std::vector<int> value_chain;  // tanh outputs, for the tangent channels
    const int layers = arch.dynamics_layers;
    for (int l = 0; l < layers; ++l) {
      h = g.linear(h, g.param(model_.dyn_w(l)), g.param(model_.dyn_b(l)));
      if (l + 1 < layers) {
        h = g.tanh_(h);
        value_chain.push_back(h);
      }
    }
    int trace = -1;
    for (int i = 0; i < dof; ++i) {
      Mat seed = Mat::Zero(rows, arch.dynamics_input_dim());
      seed.col(i).setOnes();
      int hd = g.constant(seed);
      for (int l = 0; l < layers; ++l) {
        hd = g.linear_nb(hd, g.param(model_.dyn_w(l)));
        if (l + 1 < layers) hd = g.dtanh_mul(value_chain[static_cast<std::size_t>(l)], hd);
      }
      const int diag = g.slice_cols(hd, i, 1);
      trace = trace < 0 ? diag : g.add(trace, diag);
    }
    return {h, trace};
  }

  const FlowModel& model_;
  const TrainingConfig& cfg_;
  int ode_steps_;
  LossTerms terms_;
  Mat nll_rows_value_;
};

inline void fill_collocation_flags(const RobotModel& robot, LossBatch& batch) {
  batch.collocation_free.assign(static_cast<std::size_t>(batch.collocation.rows()), true);
  if (batch.records.empty()) return;
  for (Eigen::Index c = 0; c < batch.collocation.rows(); ++c) {
    const Scene& scene = *batch.scenes[static_cast<std::size_t>(c) % batch.scenes.size()];
    batch.collocation_free[static_cast<std::size_t>(c)] =
        !is_colliding(robot, scene, batch.collocation.row(c).transpose());
  }
}

inline LossBatch full_pair_batch(const Dataset& ds, const std::vector<std::size_t>& indices,
                                 const Mat& collocation) {
  LossBatch batch;
  for (std::size_t idx : indices) {
    const auto& rec = ds.records[idx];
    batch.records.push_back(&rec);
    batch.scenes.push_back(&ds.scene_of(rec));
    std::vector<const Configuration*> targets;
    for (const auto& s : rec.samples) targets.push_back(&s);
    batch.targets.push_back(std::move(targets));
  }
  batch.collocation = collocation;
  fill_collocation_flags(ds.robot, batch);
  return batch;
}

}  // namespace detail

/// Full-fidelity loss evaluation per the loss definitions: every (q, q' in S)
/// pair enters the NLL, the integrator runs at the model's configured step
/// count, and eik/ten collocation points are drawn from `collocation_seed`.
inline LossReport compute_losses(const FlowModel& model, const Dataset& ds,
                                 const std::vector<std::size_t>& indices,
                                 const TrainingConfig& cfg,
                                 std::uint64_t collocation_seed) {
  cfg.validate();
  const int dof = model.arch().dof;
  Rng rng = Rng::stream(collocation_seed, 0xC0);
  Mat collocation(indices.size(), dof);
  const Configuration lo = ds.robot.lower_limits();
  const Configuration hi = ds.robot.upper_limits();
  for (Eigen::Index r = 0; r < collocation.rows(); ++r) {
    for (int d = 0; d < dof; ++d) collocation(r, d) = rng.uniform(lo[d], hi[d]);
  }
  detail::LossBatch batch = detail::full_pair_batch(ds, indices, collocation);
  const auto counts = detail::count_terms(batch);
  ad::Graph g(&model.params());
  detail::LossGraphBuilder builder(model, cfg, model.ode().steps);
  std::array<double, 5> weights{};
  weights[0] = counts.nll > 0 ? 1.0 / static_cast<double>(counts.nll) : 0.0;
  weights[1] = counts.dist > 0 ? 1.0 / static_cast<double>(counts.dist) : 0.0;
  weights[2] = counts.grad > 0 ? 1.0 / static_cast<double>(counts.grad) : 0.0;
  weights[3] = counts.field > 0 ? 1.0 / static_cast<double>(counts.field) : 0.0;
  weights[4] = counts.field > 0 ? 1.0 / static_cast<double>(counts.field) : 0.0;
  // Terms with zero lambda are skipped during the build; keep them active
  // here so the report always carries every component.
  std::array<double, 5> active = weights;
  builder.build(g, batch, active);
  const auto& t = builder.terms();
  LossReport rep;
  rep.nll = t.nll_sum * weights[0];
  rep.dist = t.dist_sum * weights[1];
  rep.grad = t.grad_sum * weights[2];
  rep.eik = t.eik_sum * weights[3];
  rep.ten = t.ten_sum * weights[4];
  rep.total = cfg.lambdas[0] * rep.nll + cfg.lambdas[1] * rep.dist + cfg.lambdas[2] * rep.grad +
              cfg.lambdas[3] * rep.eik + cfg.lambdas[4] * rep.ten;
  if (!std::isfinite(rep.total)) {
    std::ostringstream os;
    os << "compute_losses: non-finite loss";
    const Mat& rows = builder.nll_rows();
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
      if (!std::isfinite(rows(r, 0))) {
        os << "; nll row " << r << " diverged";
        break;
      }
    }
    throw DivergenceError(os.str());
  }
  return rep;
}

inline LossReport compute_losses(const FlowModel& model, const Dataset& ds,
                                 const TrainingConfig& cfg) {
  std::vector<std::size_t> all(ds.records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return compute_losses(model, ds, all, cfg, cfg.seed);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<Mat> m;
  std::vector<Mat> v;
  std::uint64_t t = 0;

  static AdamState zeros_like(const std::vector<Mat>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.push_back(Mat::Zero(p.rows(), p.cols()));
      s.v.push_back(Mat::Zero(p.rows(), p.cols()));
    }
    return s;
  }
};

struct TrainResult {
  std::vector<LossReport> history;  // one row per step
  bool aborted = false;
  int abort_step = -1;
  int restored_checkpoint_step = -1;
};

namespace detail {

struct ChunkOutput {
  std::vector<Mat> grads;
  LossTerms terms;
  Mat nll_rows;
};

}  // namespace detail

/// One SGD step's gradient and loss estimate. Exposed for tests; train()
/// loops this. The NLL term is a per-record subsample (cfg.nll_pairs targets
/// per record) integrated at cfg.ode_steps, a stochastic estimator of the
/// full objective.
inline LossReport training_step_gradients(const FlowModel& model, const Dataset& ds,
                                          const std::vector<std::size_t>& batch_indices,
                                          const TrainingConfig& cfg, int step,
                                          std::vector<Mat>* grads_out) {
  const int dof = model.arch().dof;
  const Configuration lo = ds.robot.lower_limits();
  const Configuration hi = ds.robot.upper_limits();

  // Per-record NLL target subsample.
  std::vector<std::vector<const Configuration*>> targets(batch_indices.size());
  for (std::size_t slot = 0; slot < batch_indices.size(); ++slot) {
    const auto& rec = ds.records[batch_indices[slot]];
    const std::size_t avail = rec.samples.size();
    if (avail == 0 || cfg.nll_pairs == 0) continue;
    Rng rng = Rng::stream(cfg.seed, 0xA2, static_cast<std::uint64_t>(step), slot);
    const std::size_t want = std::min<std::size_t>(static_cast<std::size_t>(cfg.nll_pairs), avail);
    std::vector<std::size_t> picked;
    while (picked.size() < want) {
      const std::size_t c = rng.below(avail);
      bool dup = false;
      for (std::size_t p : picked) dup = dup || (p == c);
      if (!dup) picked.push_back(c);
    }
    for (std::size_t p : picked) targets[slot].push_back(&rec.samples[p]);
  }

  // Collocation rows, one per record slot.
  Rng crng = Rng::stream(cfg.seed, 0xA3, static_cast<std::uint64_t>(step));
  Mat collocation(batch_indices.size(), dof);
  for (Eigen::Index r = 0; r < collocation.rows(); ++r) {
    for (int d = 0; d < dof; ++d) collocation(r, d) = crng.uniform(lo[d], hi[d]);
  }

  detail::LossBatch full;
  for (std::size_t slot = 0; slot < batch_indices.size(); ++slot) {
    const auto& rec = ds.records[batch_indices[slot]];
    full.records.push_back(&rec);
    full.scenes.push_back(&ds.scene_of(rec));
    full.targets.push_back(targets[slot]);
  }
  full.collocation = collocation;
  detail::fill_collocation_flags(ds.robot, full);
  const auto counts = detail::count_terms(full);

  std::array<double, 5> weights{};
  weights[0] = counts.nll > 0 ? cfg.lambdas[0] / static_cast<double>(counts.nll) : 0.0;
  weights[1] = counts.dist > 0 ? cfg.lambdas[1] / static_cast<double>(counts.dist) : 0.0;
  weights[2] = counts.grad > 0 ? cfg.lambdas[2] / static_cast<double>(counts.grad) : 0.0;
  weights[3] = counts.field > 0 ? cfg.lambdas[3] / static_cast<double>(counts.field) : 0.0;
  weights[4] = counts.field > 0 ? cfg.lambdas[4] / static_cast<double>(counts.field) : 0.0;

  // Data-parallel chunks over record slots; gradient accumulation in chunk
  // order keeps results deterministic for a given thread count.
  const int n_chunks = std::max(1, std::min<int>(cfg.threads, static_cast<int>(full.records.size())));
  std::vector<detail::ChunkOutput> outputs(static_cast<std::size_t>(n_chunks));
  const std::size_t per = (full.records.size() + static_cast<std::size_t>(n_chunks) - 1) /
                          static_cast<std::size_t>(n_chunks);
  parallel_for(static_cast<std::size_t>(n_chunks), cfg.threads, [&](std::size_t ci) {
    const std::size_t begin = ci * per;
    const std::size_t end = std::min(full.records.size(), begin + per);
    detail::LossBatch chunk;
    for (std::size_t i = begin; i < end; ++i) {
      chunk.records.push_back(full.records[i]);
      chunk.scenes.push_back(full.scenes[i]);
      chunk.targets.push_back(full.targets[i]);
    }
    const Eigen::Index col_begin = static_cast<Eigen::Index>(begin);
    const Eigen::Index col_end = static_cast<Eigen::Index>(end);
    chunk.collocation = full.collocation.middleRows(col_begin, col_end - col_begin);
    chunk.collocation_free.assign(full.collocation_free.begin() + static_cast<long>(begin),
                                  full.collocation_free.begin() + static_cast<long>(end));
    ad::Graph g(&model.params());
    detail::LossGraphBuilder builder(model, cfg, cfg.ode_steps);
    const int root = builder.build(g, chunk, weights);
    g.backward(root);
    detail::ChunkOutput out;
    out.terms = builder.terms();
    out.nll_rows = builder.nll_rows();
    out.grads.reserve(static_cast<std::size_t>(model.param_count()));
    for (int p = 0; p < model.param_count(); ++p) out.grads.push_back(g.param_gradient(p));
    outputs[ci] = std::move(out);
  });

  detail::LossTerms sums;
  grads_out->clear();
  for (int p = 0; p < model.param_count(); ++p) {
    grads_out->push_back(Mat::Zero(model.params()[static_cast<std::size_t>(p)].rows(),
                                   model.params()[static_cast<std::size_t>(p)].cols()));
  }
  for (const auto& out : outputs) {
    sums.nll_sum += out.terms.nll_sum;
    sums.dist_sum += out.terms.dist_sum;
    sums.grad_sum += out.terms.grad_sum;
    sums.eik_sum += out.terms.eik_sum;
    sums.ten_sum += out.terms.ten_sum;
    for (int p = 0; p < model.param_count(); ++p) {
      (*grads_out)[static_cast<std::size_t>(p)] += out.grads[static_cast<std::size_t>(p)];
    }
  }

  LossReport rep;
  rep.nll = counts.nll > 0 ? sums.nll_sum / static_cast<double>(counts.nll) : 0.0;
  rep.dist = counts.dist > 0 ? sums.dist_sum / static_cast<double>(counts.dist) : 0.0;
  rep.grad = counts.grad > 0 ? sums.grad_sum / static_cast<double>(counts.grad) : 0.0;
  rep.eik = counts.field > 0 ? sums.eik_sum / static_cast<double>(counts.field) : 0.0;
  rep.ten = counts.field > 0 ? sums.ten_sum / static_cast<double>(counts.field) : 0.0;
  rep.total = cfg.lambdas[0] * rep.nll + cfg.lambdas[1] * rep.dist + cfg.lambdas[2] * rep.grad +
              cfg.lambdas[3] * rep.eik + cfg.lambdas[4] * rep.ten;
  return rep;
}

/// First-order adaptive-moment training with step decay, gradient clipping,
/// and periodic parameter snapshots. Deterministic for a fixed seed and
/// thread count. On a non-finite loss the last snapshot is restored and the
/// run stops early.
inline TrainResult train(FlowModel& model, const Dataset& ds, const TrainingConfig& cfg,
                         AdamState* adam_io = nullptr, int start_step = 0) {
  cfg.validate();
  if (ds.records.empty()) throw std::invalid_argument("train: empty dataset");
  TrainResult result;
  AdamState local_adam = AdamState::zeros_like(model.params());
  AdamState& adam = adam_io != nullptr ? *adam_io : local_adam;
  if (adam.m.empty()) adam = AdamState::zeros_like(model.params());

  const double beta1 = 0.9;
  const double beta2 = 0.999;
  const double eps = 1e-8;

  std::vector<Mat> checkpoint_params = model.params();
  int checkpoint_step = start_step - 1;
  AdamState checkpoint_adam = adam;

  std::vector<Mat> grads;
  for (int step = start_step; step < cfg.steps; ++step) {
    Rng brng = Rng::stream(cfg.seed, 0xA1, static_cast<std::uint64_t>(step));
    std::vector<std::size_t> batch(static_cast<std::size_t>(cfg.batch_size));
    for (auto& idx : batch) idx = brng.below(ds.records.size());

    const LossReport rep = training_step_gradients(model, ds, batch, cfg, step, &grads);
    if (!std::isfinite(rep.total)) {
      model.mutable_params() = checkpoint_params;
      adam = checkpoint_adam;
      result.aborted = true;
      result.abort_step = step;
      result.restored_checkpoint_step = checkpoint_step;
      return result;
    }
    result.history.push_back(rep);

    // Global-norm gradient clip.
    double norm2 = 0.0;
    for (const auto& gm : grads) norm2 += gm.squaredNorm();
    const double norm = std::sqrt(norm2);
    const double scale = (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

    const double lr = cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(step / cfg.decay_every));
    adam.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(adam.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(adam.t));
    for (int p = 0; p < model.param_count(); ++p) {
      const auto pi = static_cast<std::size_t>(p);
      const Mat g = scale * grads[pi];
      adam.m[pi] = beta1 * adam.m[pi] + (1.0 - beta1) * g;
      adam.v[pi] = beta2 * adam.v[pi] + (1.0 - beta2) * g.cwiseProduct(g);
      const Mat mhat = adam.m[pi] / bc1;
      const Mat vhat = adam.v[pi] / bc2;
      model.mutable_params()[pi].array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
    }

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      checkpoint_params = model.params();
      checkpoint_adam = adam;
      checkpoint_step = step;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint format: versioned binary with a trailing FNV-1a checksum.
// ---------------------------------------------------------------------------

struct Checkpoint {
  Checkpoint(FlowModel m, TrainingConfig c) : model(std::move(m)), config(c) {}
  FlowModel model;
  TrainingConfig config;
  std::uint64_t trained_steps = 0;
  std::optional<AdamState> adam;
};

namespace detail {

inline void append_u32(std::string& buf, std::uint32_t v) { buf.append(reinterpret_cast<const char*>(&v), 4); }
inline void append_u64(std::string& buf, std::uint64_t v) { buf.append(reinterpret_cast<const char*>(&v), 8); }
inline void append_f64(std::string& buf, double v) { buf.append(reinterpret_cast<const char*>(&v), 8); }
inline void append_mat(std::string& buf, const Mat& m) {
  append_u32(buf, static_cast<std::uint32_t>(m.rows()));
  append_u32(buf, static_cast<std::uint32_t>(m.cols()));
  buf.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * 8);
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::string buf;
  detail::append_u32(buf, 0x43464443);  // "CDFC"
  detail::append_u32(buf, 1);
  const auto& a = ck.model.arch();
  for (int v : {a.dof, a.width, a.trunk_layers, a.dynamics_layers, a.head_layers, a.posenc_freqs,
                a.max_obstacles, ck.model.ode().steps}) {
    detail::append_u32(buf, static_cast<std::uint32_t>(v));
  }
  detail::append_u64(buf, ck.model.init_seed());
  for (double l : ck.config.lambdas) detail::append_f64(buf, l);
  detail::append_f64(buf, ck.config.lr);
  detail::append_f64(buf, ck.config.lr_decay);
  detail::append_u32(buf, static_cast<std::uint32_t>(ck.config.decay_every));
  detail::append_u32(buf, static_cast<std::uint32_t>(ck.config.steps));
  detail::append_u32(buf, static_cast<std::uint32_t>(ck.config.batch_size));
  detail::append_u64(buf, ck.config.seed);
  detail::append_f64(buf, ck.config.grad_clip);
  detail::append_u32(buf, static_cast<std::uint32_t>(ck.config.nll_pairs));
  detail::append_u32(buf, static_cast<std::uint32_t>(ck.config.ode_steps));
  detail::append_u32(buf, static_cast<std::uint32_t>(ck.config.checkpoint_every));
  detail::append_u64(buf, ck.trained_steps);
  detail::append_u32(buf, static_cast<std::uint32_t>(ck.model.param_count()));
  for (const auto& p : ck.model.params()) detail::append_mat(buf, p);
  detail::append_u32(buf, ck.adam.has_value() ? 1u : 0u);
  if (ck.adam.has_value()) {
    detail::append_u64(buf, ck.adam->t);
    for (const auto& m : ck.adam->m) detail::append_mat(buf, m);
    for (const auto& v : ck.adam->v) detail::append_mat(buf, v);
  }
  Fnv1a hash;
  hash.update(buf.data(), buf.size());
  detail::append_u64(buf, hash.value());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12) throw IoError("truncated checkpoint: " + path);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
  Fnv1a hash;
  hash.update(buf.data(), buf.size() - 8);
  if (hash.value() != stored) throw IoError("checkpoint checksum mismatch: " + path);

  std::size_t at = 0;
  auto u32 = [&]() {
    std::uint32_t v;
    std::memcpy(&v, buf.data() + at, 4);
    at += 4;
    return v;
  };
  auto u64 = [&]() {
    std::uint64_t v;
    std::memcpy(&v, buf.data() + at, 8);
    at += 8;
    return v;
  };
  auto f64 = [&]() {
    double v;
    std::memcpy(&v, buf.data() + at, 8);
    at += 8;
    return v;
  };
  auto mat = [&]() {
    const std::uint32_t rows = u32();
    const std::uint32_t cols = u32();
    Mat m(rows, cols);
    std::memcpy(m.data(), buf.data() + at, static_cast<std::size_t>(m.size()) * 8);
    at += static_cast<std::size_t>(m.size()) * 8;
    return m;
  };

  if (u32() != 0x43464443) throw IoError("not a checkpoint file: " + path);
  if (u32() != 1) throw IoError("unsupported checkpoint version: " + path);
  FlowArch arch;
  arch.dof = static_cast<int>(u32());
  arch.width = static_cast<int>(u32());
  arch.trunk_layers = static_cast<int>(u32());
  arch.dynamics_layers = static_cast<int>(u32());
  arch.head_layers = static_cast<int>(u32());
  arch.posenc_freqs = static_cast<int>(u32());
  arch.max_obstacles = static_cast<int>(u32());
  OdeConfig ode;
  ode.steps = static_cast<int>(u32());
  const std::uint64_t init_seed = u64();
  TrainingConfig cfg;
  for (auto& l : cfg.lambdas) l = f64();
  cfg.lr = f64();
  cfg.lr_decay = f64();
  cfg.decay_every = static_cast<int>(u32());
  cfg.steps = static_cast<int>(u32());
  cfg.batch_size = static_cast<int>(u32());
  cfg.seed = u64();
  cfg.grad_clip = f64();
  cfg.nll_pairs = static_cast<int>(u32());
  cfg.ode_steps = static_cast<int>(u32());
  cfg.checkpoint_every = static_cast<int>(u32());
  const std::uint64_t trained_steps = u64();

  FlowModel model(arch, ode, init_seed);
  const std::uint32_t n_params = u32();
  if (static_cast<int>(n_params) != model.param_count()) {
    throw IoError("checkpoint parameter count mismatch: " + path);
  }
  for (int p = 0; p < model.param_count(); ++p) model.mutable_params()[static_cast<std::size_t>(p)] = mat();
  Checkpoint ck(std::move(model), cfg);
  ck.trained_steps = trained_steps;
  if (u32() == 1u) {
    AdamState adam;
    adam.t = u64();
    for (int p = 0; p < ck.model.param_count(); ++p) adam.m.push_back(mat());
    for (int p = 0; p < ck.model.param_count(); ++p) adam.v.push_back(mat());
    ck.adam = std::move(adam);
  }
  return ck;
}

}  // namespace cdflow
