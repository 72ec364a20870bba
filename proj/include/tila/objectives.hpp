#pragma once

// Training objectives with hand-derived gradients:
//   * pairwise sigmoid contrastive loss on original-order pairs,
//   * change-aware sigmoid loss on inverted pairs,
//   * the staged pretraining total,
//   * bidirectional cross-entropy, temporal consistency loss and the staged
//     fine-tuning total.
//
// Logit convention for the contrastive heads: logit = exp(log_scale) * v.t + bias,
// with the bias stored as an additive offset (initialised to -10).

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "tila/labels.hpp"
#include "tila/numerics.hpp"

namespace tila {

struct LossParams {
  double log_scale = 2.302585092994045684;
  double bias = -10.0;
  double swap_log_scale = 2.302585092994045684;
  double swap_bias = -10.0;
  double change_weight = 1.0;  // W
  double tcl_weight = 50.0;    // lambda

  void validate() const {
    if (!(change_weight >= 0.0)) fail_domain("LossParams: change weight W must be >= 0");
    if (!(tcl_weight >= 0.0)) fail_domain("LossParams: TCL weight lambda must be >= 0");
  }
};

// Loss components switch on strictly after their activation epoch (epochs are
// counted from 1, so activation 10 means epochs 1..10 run without the term).
struct StageSchedule {
  int change_activation_epoch = 10;
  int tcl_activation_epoch = 20;

  double change_weight_at(int epoch, double w) const { return epoch > change_activation_epoch ? w : 0.0; }
  double tcl_weight_at(int epoch, double lambda) const { return epoch > tcl_activation_epoch ? lambda : 0.0; }
};

struct PretrainBatch {
  Matrix v;       // forward-order image embeddings, |B| x D
  Matrix v_swap;  // inverted-order image embeddings
  Matrix t;       // report embeddings
  std::vector<int> change;  // c_i in {0, 1}
};

inline constexpr double kUnitNormTolerance = 1e-9;

inline void require_unit_rows(const Matrix& m, const char* what) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double n = l2_norm(m.row(i));
    if (std::abs(n - 1.0) > kUnitNormTolerance) fail_domain(what, " row ", i, " has norm ", n, ", expected 1");
  }
}

inline void require_change_flags(std::span<const int> c) {
  for (std::size_t i = 0; i < c.size(); ++i)
    if (c[i] != 0 && c[i] != 1) fail_domain("change flag c[", i, "] = ", c[i], " is not in {0,1}");
}

// Sign of pair (i,j) in the base loss: positive only on the diagonal.
inline int siglip_sign(std::size_t i, std::size_t j) { return i == j ? 1 : -1; }

// Sign of pair (i,j) in the change-aware loss: positive only for a matched
// pair whose study has no interval change.
inline int change_sign(std::size_t i, std::size_t j, int change_i) {
  return (i == j && change_i == 0) ? 1 : -1;
}

struct ContrastiveResult {
  double value = 0.0;
  Matrix grad_v;  // dL/dV
  Matrix grad_t;  // dL/dT
  double grad_log_scale = 0.0;
  double grad_bias = 0.0;
};

// -(1/|B|) sum_ij log sigma(z_ij (exp(log_scale) v_i.t_j + bias)), for a
// caller-supplied sign grid z (row-major |B| x |B|).
inline ContrastiveResult pairwise_sigmoid_loss(const Matrix& v, const Matrix& t, std::span<const int> signs,
                                               double log_scale, double bias) {
  const std::size_t n = v.rows();
  if (n == 0) fail_domain("pairwise_sigmoid_loss: empty batch");
  if (t.rows() != n || t.cols() != v.cols()) fail_domain("pairwise_sigmoid_loss: image/text shape mismatch");
  if (signs.size() != n * n) fail_domain("pairwise_sigmoid_loss: sign grid has wrong size");
  if (!std::isfinite(log_scale) || !std::isfinite(bias)) fail_domain("pairwise_sigmoid_loss: non-finite logit parameters");

  const double scale = std::exp(log_scale);
  const double inv_b = 1.0 / static_cast<double>(n);
  ContrastiveResult r;
  r.grad_v = Matrix(n, v.cols());
  r.grad_t = Matrix(n, t.cols());
  const Matrix sim = matmul_transposed(v, t);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double z = signs[i * n + j];
      const double logit = scale * sim(i, j) + bias;
      r.value -= log_sigmoid(z * logit);
      // d/dlogit of -log sigma(z*logit) = -z * sigma(-z*logit)
      const double g = -z * stable_sigmoid(-z * logit) * inv_b;
      r.grad_bias += g;
      r.grad_log_scale += g * scale * sim(i, j);
      auto gv = r.grad_v.row(i);
      auto gt = r.grad_t.row(j);
      const auto vi = v.row(i);
      const auto tj = t.row(j);
      for (std::size_t k = 0; k < v.cols(); ++k) {
        gv[k] += g * scale * tj[k];
        gt[k] += g * scale * vi[k];
      }
    }
  }
  r.value *= inv_b;
  return r;
}

inline ContrastiveResult siglip_loss(const Matrix& v, const Matrix& t, const LossParams& params) {
  require_unit_rows(v, "siglip_loss: V");
  require_unit_rows(t, "siglip_loss: T");
  const std::size_t n = v.rows();
  std::vector<int> signs(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) signs[i * n + j] = siglip_sign(i, j);
  return pairwise_sigmoid_loss(v, t, signs, params.log_scale, params.bias);
}

inline ContrastiveResult change_aware_loss(const Matrix& v_swap, const Matrix& t, std::span<const int> change,
                                           const LossParams& params) {
  require_change_flags(change);
  if (change.size() != v_swap.rows()) fail_domain("change_aware_loss: ", change.size(), " flags for ", v_swap.rows(), " rows");
  require_unit_rows(v_swap, "change_aware_loss: V_swap");
  require_unit_rows(t, "change_aware_loss: T");
  const std::size_t n = v_swap.rows();
  std::vector<int> signs(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) signs[i * n + j] = change_sign(i, j, change[i]);
  return pairwise_sigmoid_loss(v_swap, t, signs, params.swap_log_scale, params.swap_bias);
}

struct PretrainLoss {
  double total = 0.0;
  double siglip = 0.0;
  double change = 0.0;
  double change_weight = 0.0;  // effective W at this epoch
  ContrastiveResult siglip_terms;
  ContrastiveResult change_terms;  // gradients NOT yet scaled by the weight
};

// L_siglip + W_eff * L_change. The change term is always evaluated so it can
// be logged; it contributes to the total only once activated.
inline PretrainLoss pretrain_total(const PretrainBatch& batch, const LossParams& params, int epoch,
                                   const StageSchedule& schedule) {
  if (epoch < 0) fail_domain("pretrain_total: negative epoch");
  params.validate();
  PretrainLoss out;
  out.siglip_terms = siglip_loss(batch.v, batch.t, params);
  out.change_terms = change_aware_loss(batch.v_swap, batch.t, batch.change, params);
  out.siglip = out.siglip_terms.value;
  out.change = out.change_terms.value;
  out.change_weight = schedule.change_weight_at(epoch, params.change_weight);
  out.total = out.siglip + out.change_weight * out.change;
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning objectives

using Logits = std::array<double, 3>;

inline ProbTriple softmax3(const Logits& z) { return to_triple(softmax(z)); }

// dL/dz given dL/dp for p = softmax(z).
inline Logits softmax_backward(const ProbTriple& p, const ProbTriple& dp) {
  const double s = p[0] * dp[0] + p[1] * dp[1] + p[2] * dp[2];
  return {p[0] * (dp[0] - s), p[1] * (dp[1] - s), p[2] * (dp[2] - s)};
}

struct BiceResult {
  double value = 0.0;
  Logits grad_fwd{};
  Logits grad_bwd{};
};

// 1/2 [CE(softmax(fwd), y) + CE(softmax(bwd), I(y))]
inline BiceResult bice_loss(const Logits& logits_fwd, const Logits& logits_bwd, ProgressionLabel y) {
  const auto yi = index_of(y);
  if (yi > 2) fail_domain("bice_loss: invalid label");
  const auto yr = index_of(invert_label(y));
  const ProbTriple pf = softmax3(logits_fwd), pb = softmax3(logits_bwd);
  BiceResult r;
  r.value = 0.5 * (cross_entropy(pf, yi) + cross_entropy(pb, yr));
  for (std::size_t k = 0; k < 3; ++k) {
    r.grad_fwd[k] = 0.5 * (pf[k] - (k == yi ? 1.0 : 0.0));
    r.grad_bwd[k] = 0.5 * (pb[k] - (k == yr ? 1.0 : 0.0));
  }
  return r;
}

// Forward-order cross-entropy only; the comparator for the bidirectional loss.
inline BiceResult forward_ce_loss(const Logits& logits_fwd, ProgressionLabel y) {
  const auto yi = index_of(y);
  const ProbTriple pf = softmax3(logits_fwd);
  BiceResult r;
  r.value = cross_entropy(pf, yi);
  for (std::size_t k = 0; k < 3; ++k) r.grad_fwd[k] = pf[k] - (k == yi ? 1.0 : 0.0);
  return r;
}

struct TclResult {
  double value = 0.0;
  std::vector<ProbTriple> grad_fwd;  // dL/dp_fwd
  std::vector<ProbTriple> grad_bwd;  // dL/dp_bwd
};

// (1/|B|) sum_i || p_fwd_i - S(p_bwd_i) ||^2
inline TclResult tcl_loss(std::span<const ProbTriple> p_fwd, std::span<const ProbTriple> p_bwd) {
  if (p_fwd.size() != p_bwd.size())
    fail_domain("tcl_loss: ", p_fwd.size(), " forward rows vs ", p_bwd.size(), " reversed rows");
  if (p_fwd.empty()) fail_domain("tcl_loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(p_fwd.size());
  TclResult r;
  r.grad_fwd.resize(p_fwd.size());
  r.grad_bwd.resize(p_fwd.size());
  for (std::size_t i = 0; i < p_fwd.size(); ++i) {
    const ProbTriple mirrored = swap_coordinates(p_bwd[i]);
    ProbTriple diff{};
    for (std::size_t k = 0; k < 3; ++k) {
      diff[k] = p_fwd[i][k] - mirrored[k];
      r.value += diff[k] * diff[k] * inv_b;
    }
    for (std::size_t k = 0; k < 3; ++k) r.grad_fwd[i][k] = 2.0 * diff[k] * inv_b;
    // S is a self-inverse permutation, so S^T = S.
    const ProbTriple g = swap_coordinates(diff);
    for (std::size_t k = 0; k < 3; ++k) r.grad_bwd[i][k] = -2.0 * g[k] * inv_b;
  }
  return r;
}

struct FinetuneLoss {
  double total = 0.0;
  double bice = 0.0;
  double tcl = 0.0;
  double tcl_weight = 0.0;  // effective lambda at this epoch
  std::vector<Logits> grad_fwd;
  std::vector<Logits> grad_bwd;
};

// Mean BiCE over the batch + lambda_eff * TCL, gradients w.r.t. both logit sets.
inline FinetuneLoss finetune_total(std::span<const Logits> logits_fwd, std::span<const Logits> logits_bwd,
                                   std::span<const ProgressionLabel> y, const LossParams& params, int epoch,
                                   const StageSchedule& schedule) {
  if (epoch < 0) fail_domain("finetune_total: negative epoch");
  params.validate();
  const std::size_t n = logits_fwd.size();
  if (logits_bwd.size() != n || y.size() != n) fail_domain("finetune_total: batch size mismatch");
  if (n == 0) fail_domain("finetune_total: empty batch");
  const double inv_b = 1.0 / static_cast<double>(n);

  FinetuneLoss out;
  out.grad_fwd.assign(n, Logits{});
  out.grad_bwd.assign(n, Logits{});
  std::vector<ProbTriple> pf(n), pb(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto b = bice_loss(logits_fwd[i], logits_bwd[i], y[i]);
    out.bice += b.value * inv_b;
    for (std::size_t k = 0; k < 3; ++k) {
      out.grad_fwd[i][k] = b.grad_fwd[k] * inv_b;
      out.grad_bwd[i][k] = b.grad_bwd[k] * inv_b;
    }
    pf[i] = softmax3(logits_fwd[i]);
    pb[i] = softmax3(logits_bwd[i]);
  }
  const auto t = tcl_loss(pf, pb);
  out.tcl = t.value;
  out.tcl_weight = schedule.tcl_weight_at(epoch, params.tcl_weight);
  out.total = out.bice + out.tcl_weight * out.tcl;
  if (out.tcl_weight != 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto gf = softmax_backward(pf[i], t.grad_fwd[i]);
      const auto gb = softmax_backward(pb[i], t.grad_bwd[i]);
      for (std::size_t k = 0; k < 3; ++k) {
        out.grad_fwd[i][k] += out.tcl_weight * gf[k];
        out.grad_bwd[i][k] += out.tcl_weight * gb[k];
      }
    }
  }
  return out;
}

}  // namespace tila
