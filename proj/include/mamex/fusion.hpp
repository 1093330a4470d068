// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
//
// Adaptive modality fusion: a learned gate over the concatenated adapted
// embeddings produces per-modality weights; the item embedding is their
// weighted sum. Includes the balance regularizer, the MSE alignment loss,
// and the uniform-average ablation.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "mamex/numerics.hpp"

namespace mamex::fusion {

using num::Matrix;
using num::Vector;

// Gate over the concatenation of all modality embeddings (absent slots are
// zero-filled before the gate; their logits are excluded from the softmax).
struct FusionGate {
  std::vector<std::string> modality_order;
  Matrix gate_w;  // |M| x (|M| * d)
  Vector gate_b;  // |M|

  int modality_count() const { return static_cast<int>(modality_order.size()); }
};

struct FusedItem {
  Vector e;                   // fused item embedding
  Vector alpha;               // weights over modalities; zero where absent
  std::vector<char> present;  // availability flags
};

namespace detail {

inline std::vector<int> present_indices(std::span<const char> present) {
  std::vector<int> idx;
  for (std::size_t m = 0; m < present.size(); ++m)
    if (present[m]) idx.push_back(static_cast<int>(m));
  if (idx.empty()) throw std::domain_error("fuse: all modalities absent");
  return idx;
}

inline Vector concat_with_zeros(std::span<const Vector> z, std::span<const char> present,
                                int dim) {
  Vector cat;
  cat.reserve(static_cast<std::size_t>(dim) * z.size());
  for (std::size_t m = 0; m < z.size(); ++m) {
    if (present[m]) {
      if (static_cast<int>(z[m].size()) != dim)
        throw std::invalid_argument("fuse: embedding length mismatch");
      cat.insert(cat.end(), z[m].begin(), z[m].end());
    } else {
      cat.insert(cat.end(), dim, 0.0);
    }
  }
  return cat;
}

inline Vector mix(std::span<const Vector> z, const Vector& alpha,
                  std::span<const int> idx) {
  Vector e(z[idx[0]].size(), 0.0);
  for (int m : idx)
    for (std::size_t c = 0; c < e.size(); ++c) e[c] += alpha[m] * z[m][c];
  return e;
}

}  // namespace detail

inline FusedItem fuse(const FusionGate& gate, std::span<const Vector> z,
                      std::span<const char> present) {
  if (static_cast<int>(z.size()) != gate.modality_count())
    throw std::invalid_argument("fuse: modality count mismatch");
  const std::vector<int> idx = detail::present_indices(present);
  const int dim = static_cast<int>(z[idx[0]].size());
  const Vector cat = detail::concat_with_zeros(z, present, dim);
  const Vector logits = num::affine_map(gate.gate_w, gate.gate_b, cat);

  FusedItem out;
  out.present.assign(present.begin(), present.end());
  out.alpha = num::softmax_over(logits, idx);
  out.e = detail::mix(z, out.alpha, idx);
  return out;
}

// w/o-MMF ablation: uniform weights over the present modalities.
inline FusedItem fuse_uniform(std::span<const Vector> z, std::span<const char> present) {
  const std::vector<int> idx = detail::present_indices(present);
  FusedItem out;
  out.present.assign(present.begin(), present.end());
  out.alpha.assign(z.size(), 0.0);
  for (int m : idx) out.alpha[m] = 1.0 / static_cast<double>(idx.size());
  out.e = detail::mix(z, out.alpha, idx);
  return out;
}

// KL(batch-mean alpha || uniform over modalities).
inline double fusion_balance_loss(std::span<const Vector> batch_alphas) {
  if (batch_alphas.empty()) throw std::invalid_argument("fusion_balance_loss: empty batch");
  Vector mean(batch_alphas[0].size(), 0.0);
  for (const Vector& a : batch_alphas) {
    if (a.size() != mean.size())
      throw std::invalid_argument("fusion_balance_loss: mixed alpha lengths");
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += a[i];
  }
  for (double& v : mean) v /= static_cast<double>(batch_alphas.size());
  return num::kl_to_uniform(mean);
}

// Sum over present modalities of ||e - z_m||^2 (no dimension normalization).
inline double alignment_loss(const Vector& e, std::span<const Vector> z,
                             std::span<const char> present) {
  double total = 0.0;
  for (std::size_t m = 0; m < z.size(); ++m) {
    if (!present[m]) continue;
    if (z[m].size() != e.size())
      throw std::invalid_argument("alignment_loss: embedding length mismatch");
    for (std::size_t c = 0; c < e.size(); ++c) {
      const double d = e[c] - z[m][c];
      total += d * d;
    }
  }
  return total;
}

}  // namespace mamex::fusion
