// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
//
// Cold-start ranking evaluation: every user is scored against all cold items
// of a partition (full ranking, no sampled candidates) and Recall@K / NDCG@K
// are macro-averaged over users with at least one held-out interaction.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mamex/data.hpp"
#include "mamex/errors.hpp"
#include "mamex/log.hpp"
#include "mamex/model.hpp"

namespace mamex::eval {

using data::Partition;
using num::Vector;

// Binary relevance, log base 2, 1-indexed positions, IDCG truncated at
// min(K, |GT|). Pinned here for bit-exact reproducibility.
inline double recall_at_k(std::span<const int> ranked, const std::vector<int>& truth_sorted,
                          int k) {
  if (k < 1) throw std::invalid_argument("recall_at_k: K must be >= 1");
  if (truth_sorted.empty()) throw std::invalid_argument("recall_at_k: empty ground truth");
  const int limit = std::min<int>(k, static_cast<int>(ranked.size()));
  int hits = 0;
  for (int p = 0; p < limit; ++p)
    if (std::binary_search(truth_sorted.begin(), truth_sorted.end(), ranked[p])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(truth_sorted.size());
}

inline double ndcg_at_k(std::span<const int> ranked, const std::vector<int>& truth_sorted,
                        int k) {
  if (k < 1) throw std::invalid_argument("ndcg_at_k: K must be >= 1");
  if (truth_sorted.empty()) throw std::invalid_argument("ndcg_at_k: empty ground truth");
  const int limit = std::min<int>(k, static_cast<int>(ranked.size()));
  double dcg = 0.0;
  for (int p = 1; p <= limit; ++p)
    if (std::binary_search(truth_sorted.begin(), truth_sorted.end(), ranked[p - 1]))
      dcg += 1.0 / std::log2(static_cast<double>(p) + 1.0);
  double idcg = 0.0;
  const int ideal = std::min<int>(k, static_cast<int>(truth_sorted.size()));
  for (int p = 1; p <= ideal; ++p) idcg += 1.0 / std::log2(static_cast<double>(p) + 1.0);
  return dcg / idcg;
}

// Embedded cold candidates of one partition, shared across users.
struct ColdIndex {
  std::vector<int> items;          // candidate item indices, ascending
  std::vector<Vector> embeddings;  // parallel to items
  std::vector<int> excluded;       // items dropped for lacking all features
  Vector mean_alpha;               // per modality over candidates (NaN if n/a)
};

inline ColdIndex embed_partition(const model::ModelParams& params,
                                 const data::InteractionSet& interactions,
                                 const data::FeatureView& features, Partition partition) {
  if (partition == Partition::kTrain)
    throw std::invalid_argument("embed_partition: expected a cold partition");
  ColdIndex index;
  index.mean_alpha.assign(params.modality_count(),
                          std::numeric_limits<double>::quiet_NaN());
  Vector alpha_acc(params.modality_count(), 0.0);
  int alpha_count = 0;
  for (int item : interactions.items_in(partition)) {
    if (!features.any_present[item]) {
      index.excluded.push_back(item);
      log_warn("item " + interactions.item_ids[item] +
               " lacks all modality features; excluded from ranking");
      continue;
    }
    model::ItemEmbedding emb = model::embed_item(params, features.per_item[item]);
    index.items.push_back(item);
    index.embeddings.push_back(std::move(emb.e));
    if (!emb.alpha.empty()) {
      for (int m = 0; m < params.modality_count(); ++m) alpha_acc[m] += emb.alpha[m];
      ++alpha_count;
    }
  }
  if (alpha_count > 0) {
    for (int m = 0; m < params.modality_count(); ++m)
      index.mean_alpha[m] = alpha_acc[m] / alpha_count;
  }
  return index;
}

// All candidates scored for one user, sorted by descending score with ties
// broken toward the lower item index. Returns item indices.
inline std::vector<int> rank_cold_items(const model::ModelParams& params,
                                        const ColdIndex& index, int user) {
  if (user < 0 || user >= params.n_users)
    throw std::invalid_argument("rank_cold_items: unknown user index");
  const num::ParamBlock& table = params.block(params.user_table);
  const Vector e_u(table.value.begin() + static_cast<std::size_t>(user) * params.cfg.d,
                   table.value.begin() + static_cast<std::size_t>(user + 1) * params.cfg.d);
  std::vector<std::pair<double, int>> scored;
  scored.reserve(index.items.size());
  for (std::size_t j = 0; j < index.items.size(); ++j)
    scored.emplace_back(model::score(e_u, index.embeddings[j]), index.items[j]);
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<int> ranked(scored.size());
  for (std::size_t j = 0; j < scored.size(); ++j) ranked[j] = scored[j].second;
  return ranked;
}

struct RankingResult {
  Partition partition = Partition::kTestCold;
  std::vector<int> ks;
  Vector recall;  // macro averages, parallel to ks
  Vector ndcg;
  int users_evaluated = 0;
  int users_skipped = 0;   // no ground truth in this partition
  int users_untrained = 0; // evaluated but without any training record
  int candidates = 0;
  int excluded_items = 0;
  Vector mean_alpha;  // per modality

  struct PerUser {
    int user = -1;
    bool untrained = false;
    Vector recall;
    Vector ndcg;
  };
  std::vector<PerUser> per_user;
};

inline RankingResult evaluate(const model::ModelParams& params,
                              const data::InteractionSet& interactions,
                              const data::FeatureView& features, Partition partition,
                              std::vector<int> ks = {10, 20}) {
  if (!interactions.split_done) throw std::logic_error("evaluate: split not performed");
  const auto& truth = interactions.ground_truth(partition);
  const ColdIndex index = embed_partition(params, interactions, features, partition);
  if (index.items.empty())
    throw DataError(std::string("evaluate: partition `") + data::partition_name(partition) +
                    "` has no candidates");

  RankingResult result;
  result.partition = partition;
  result.ks = std::move(ks);
  result.recall.assign(result.ks.size(), 0.0);
  result.ndcg.assign(result.ks.size(), 0.0);
  result.candidates = static_cast<int>(index.items.size());
  result.excluded_items = static_cast<int>(index.excluded.size());
  result.mean_alpha = index.mean_alpha;

  for (int user = 0; user < interactions.user_count(); ++user) {
    // Truth restricted to candidates that were actually embeddable.
    std::vector<int> gt;
    for (int item : truth[user])
      if (std::binary_search(index.items.begin(), index.items.end(), item)) gt.push_back(item);
    if (gt.empty()) {
      ++result.users_skipped;
      continue;
    }
    const std::vector<int> ranked = rank_cold_items(params, index, user);
    RankingResult::PerUser pu;
    pu.user = user;
    pu.untrained = !interactions.user_has_train_records(user);
    if (pu.untrained) ++result.users_untrained;
    for (std::size_t j = 0; j < result.ks.size(); ++j) {
      pu.recall.push_back(recall_at_k(ranked, gt, result.ks[j]));
      pu.ndcg.push_back(ndcg_at_k(ranked, gt, result.ks[j]));
      result.recall[j] += pu.recall.back();
      result.ndcg[j] += pu.ndcg.back();
    }
    result.per_user.push_back(std::move(pu));
    ++result.users_evaluated;
  }
  if (result.users_evaluated > 0) {
    for (double& v : result.recall) v /= result.users_evaluated;
    for (double& v : result.ndcg) v /= result.users_evaluated;
  }
  return result;
}

// TSV report mirroring the usual Rec@K / NDCG@K table layout, plus the
// per-modality mean fusion weights.
inline std::string report_tsv(const RankingResult& r, const std::string& variant,
                              std::span<const std::string> modalities) {
  std::ostringstream out;
  out << "variant\tpartition";
  for (int k : r.ks) out << "\tRec@" << k;
  for (int k : r.ks) out << "\tNDCG@" << k;
  out << "\tusers_evaluated\tusers_skipped\tusers_untrained\tcandidates";
  for (const std::string& m : modalities) out << "\tmean_alpha_" << m;
  out << '\n';
  out << variant << '\t' << data::partition_name(r.partition);
  for (double v : r.recall) out << '\t' << data::format_double(v);
  for (double v : r.ndcg) out << '\t' << data::format_double(v);
  out << '\t' << r.users_evaluated << '\t' << r.users_skipped << '\t' << r.users_untrained
      << '\t' << r.candidates;
  for (std::size_t m = 0; m < modalities.size(); ++m)
    out << '\t' << data::format_double(r.mean_alpha[m]);
  out << '\n';
  return out.str();
}

}  // namespace mamex::eval
