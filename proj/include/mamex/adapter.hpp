// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
//
// Modality-specific mixture-of-experts adaptation: K affine experts behind a
// sparse top-k gate, plus the KL load-balancing loss over batch-mean gate
// distributions. Also provides the joint-router and shared-expert variants.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "mamex/numerics.hpp"

namespace mamex::adapter {

using num::Matrix;
using num::Vector;

// K experts (affine d_in -> d_out) and a gating map (d_in -> K logits).
// The gate consumes the same input the experts do.
struct MoEAdapter {
  std::string modality;
  int num_experts = 1;
  int top_k = 1;
  Matrix gate_w;                 // K x d_in
  Vector gate_b;                 // K
  std::vector<Matrix> expert_w;  // K of d_out x d_in
  std::vector<Vector> expert_b;  // K of d_out (empty vectors when bias disabled)

  int input_dim() const { return gate_w.cols; }
  int output_dim() const { return expert_w.empty() ? 0 : expert_w[0].rows; }

  void validate() const {
    if (top_k < 1 || top_k > num_experts)
      throw std::invalid_argument("MoEAdapter: top_k out of range");
    if (static_cast<int>(expert_w.size()) != num_experts || gate_w.rows != num_experts)
      throw std::invalid_argument("MoEAdapter: expert/gate count mismatch");
    for (const Matrix& w : expert_w)
      if (w.cols != gate_w.cols || w.rows != expert_w[0].rows)
        throw std::invalid_argument("MoEAdapter: inconsistent expert shapes");
  }
};

struct AdapterOutput {
  Vector z;                   // adapted embedding
  Vector dense_gate;          // full softmax over K (batch statistics)
  std::vector<int> selected;  // routed expert indices, ascending
  Vector sparse_gate;         // renormalized weights, zero off-selection
};

// Mixture of the selected experts under a frozen gate; exposed separately so
// routing can be held fixed when testing linearity in h.
inline Vector expert_mixture(const MoEAdapter& a, const Vector& sparse_gate,
                             std::span<const int> selected, const Vector& h) {
  Vector z(a.output_dim(), 0.0);
  for (int k : selected) {
    const Vector out = num::affine_map(a.expert_w[k], a.expert_b[k], h);
    const double w = sparse_gate[k];
    for (std::size_t c = 0; c < z.size(); ++c) z[c] += w * out[c];
  }
  return z;
}

inline AdapterOutput adapt(const MoEAdapter& a, const Vector& h) {
  if (static_cast<int>(h.size()) != a.input_dim())
    throw std::invalid_argument("adapt: feature length " + std::to_string(h.size()) +
                                " does not match adapter input dim " +
                                std::to_string(a.input_dim()));
  AdapterOutput out;
  const Vector logits = num::affine_map(a.gate_w, a.gate_b, h);
  num::TopK routed = num::top_k_renormalized(logits, a.top_k);
  out.dense_gate = std::move(routed.dense_probs);
  out.selected = std::move(routed.indices);
  out.sparse_gate = std::move(routed.weights);
  out.z = expert_mixture(a, out.sparse_gate, out.selected, h);
  return out;
}

// Single router over the concatenation of all modality features; experts map
// |M|*d -> d. Contract identical to adapt.
inline AdapterOutput adapt_joint_router(const MoEAdapter& shared, const Vector& h_all) {
  return adapt(shared, h_all);
}

// Common expert set with per-modality routers.
struct SharedExperts {
  std::vector<Matrix> w;
  std::vector<Vector> b;
};

struct ModalityRouter {
  std::string modality;
  int top_k = 1;
  Matrix gate_w;  // K x d_in
  Vector gate_b;  // K
};

inline AdapterOutput adapt_shared_experts(const ModalityRouter& router,
                                          const SharedExperts& experts, const Vector& h) {
  MoEAdapter view;
  view.modality = router.modality;
  view.num_experts = static_cast<int>(experts.w.size());
  view.top_k = router.top_k;
  view.gate_w = router.gate_w;
  view.gate_b = router.gate_b;
  view.expert_w = experts.w;
  view.expert_b = experts.b;
  return adapt(view, h);
}

// Load-balancing loss: sum over modalities of KL(batch-mean dense gate ||
// uniform over K). The mean is taken over the dense (pre-sparsification)
// distributions.
inline double adapter_balance_loss(
    std::span<const std::vector<Vector>> batch_dense_gates_per_modality) {
  double total = 0.0;
  for (const std::vector<Vector>& batch : batch_dense_gates_per_modality) {
    if (batch.empty()) throw std::invalid_argument("adapter_balance_loss: empty batch");
    Vector mean(batch[0].size(), 0.0);
    for (const Vector& g : batch) {
      if (g.size() != mean.size())
        throw std::invalid_argument("adapter_balance_loss: mixed gate lengths");
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += g[i];
    }
    for (double& v : mean) v /= static_cast<double>(batch.size());
    total += num::kl_to_uniform(mean);
  }
  return total;
}

}  // namespace mamex::adapter
