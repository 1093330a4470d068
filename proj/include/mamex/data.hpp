// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
//
// Interaction logs, per-modality feature tables, the item cold-start split,
// synthetic benchmark generation, and BPR triplet sampling.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mamex/errors.hpp"
#include "mamex/log.hpp"
#include "mamex/numerics.hpp"
#include "mamex/rng.hpp"

namespace mamex::data {

using num::Matrix;
using num::Vector;

enum class Partition { kTrain = 0, kValidCold = 1, kTestCold = 2 };

inline const char* partition_name(Partition p) {
  switch (p) {
    case Partition::kTrain: return "train";
    case Partition::kValidCold: return "valid";
    default: return "test";
  }
}

struct Record {
  int user = -1;
  int item = -1;
  bool operator==(const Record&) const = default;
};

// Sparse implicit-feedback log. String ids are interned to dense integer
// indices in first-appearance order; the originals are retained for
// reporting and audit files.
struct InteractionSet {
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  std::unordered_map<std::string, int> user_index;
  std::unordered_map<std::string, int> item_index;
  std::vector<Record> records;  // deduplicated, original order

  // Filled by cold_start_split.
  bool split_done = false;
  std::vector<Partition> item_partition;        // per item
  std::vector<Record> train_records;            // records whose item is train
  std::vector<std::vector<int>> valid_truth;    // per user, items (ascending)
  std::vector<std::vector<int>> test_truth;     // per user, items (ascending)
  std::vector<std::vector<int>> user_train_items;  // per user, sorted

  int user_count() const { return static_cast<int>(user_ids.size()); }
  int item_count() const { return static_cast<int>(item_ids.size()); }

  int intern_user(const std::string& id) {
    auto [it, inserted] = user_index.try_emplace(id, user_count());
    if (inserted) user_ids.push_back(id);
    return it->second;
  }
  int intern_item(const std::string& id) {
    auto [it, inserted] = item_index.try_emplace(id, item_count());
    if (inserted) item_ids.push_back(id);
    return it->second;
  }

  std::vector<int> items_in(Partition p) const {
    std::vector<int> out;
    for (int i = 0; i < item_count(); ++i)
      if (item_partition[i] == p) out.push_back(i);
    return out;
  }

  const std::vector<std::vector<int>>& ground_truth(Partition p) const {
    if (p == Partition::kValidCold) return valid_truth;
    if (p == Partition::kTestCold) return test_truth;
    throw std::invalid_argument("ground_truth: train partition has no held-out truth");
  }

  bool user_has_train_records(int user) const {
    return !user_train_items[user].empty();
  }
};

// Per-item dense feature vectors for each modality, keyed by the original
// string item id so feature-only cold items are representable.
struct ModalityFeatureTable {
  std::vector<std::string> modalities;  // fixed order
  std::vector<int> dims;
  std::vector<std::unordered_map<std::string, Vector>> vectors;  // per modality

  int modality_count() const { return static_cast<int>(modalities.size()); }

  int modality_index(const std::string& name) const {
    for (int m = 0; m < modality_count(); ++m)
      if (modalities[m] == name) return m;
    return -1;
  }

  bool present(int m, const std::string& item_id) const {
    return vectors[m].count(item_id) > 0;
  }

  const Vector* find(int m, const std::string& item_id) const {
    auto it = vectors[m].find(item_id);
    return it == vectors[m].end() ? nullptr : &it->second;
  }
};

struct Triplet {
  int user = -1, pos = -1, neg = -1;
};

struct TripletBatch {
  std::vector<Triplet> triplets;
};

// ---------------------------------------------------------------------------
// Loaders. Formats are plain UTF-8 TSV, one entity per line.
// ---------------------------------------------------------------------------

inline InteractionSet load_interactions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open interactions file: " + path.string());
  InteractionSet set;
  std::unordered_set<std::int64_t> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": expected exactly `user<TAB>item`");
    const std::string user = line.substr(0, tab);
    const std::string item = line.substr(tab + 1);
    if (user.empty() || item.empty())
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": empty id");
    const int u = set.intern_user(user);
    const int i = set.intern_item(item);
    const std::int64_t key = static_cast<std::int64_t>(u) << 32 | static_cast<std::uint32_t>(i);
    if (seen.insert(key).second) set.records.push_back({u, i});
  }
  if (set.records.empty()) throw DataError("empty dataset: " + path.string());
  return set;
}

// Lines are `item<TAB>v1,v2,...,vd`; d is inferred from the first line and
// enforced afterwards. Items absent from the interaction log are retained —
// cold items may be feature-only.
inline void load_features(ModalityFeatureTable& table, const std::filesystem::path& path,
                          const std::string& modality_name) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open features file: " + path.string());
  int m = table.modality_index(modality_name);
  if (m < 0) {
    m = table.modality_count();
    table.modalities.push_back(modality_name);
    table.dims.push_back(-1);
    table.vectors.emplace_back();
  }
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError(path.string() + ":" + std::to_string(line_no) +
                      ": expected `item<TAB>v1,v2,...`");
    const std::string item = line.substr(0, tab);
    Vector v;
    std::size_t start = tab + 1;
    while (start <= line.size()) {
      std::size_t comma = line.find(',', start);
      if (comma == std::string::npos) comma = line.size();
      const std::string tok = line.substr(start, comma - start);
      try {
        std::size_t used = 0;
        v.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw DataError(path.string() + ":" + std::to_string(line_no) +
                        ": non-numeric value `" + tok + "`");
      }
      start = comma + 1;
    }
    if (table.dims[m] < 0) table.dims[m] = static_cast<int>(v.size());
    if (static_cast<int>(v.size()) != table.dims[m])
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": dimension " +
                      std::to_string(v.size()) + " conflicts with established dimension " +
                      std::to_string(table.dims[m]) + " for modality " + modality_name);
    table.vectors[m][item] = std::move(v);
  }
}

// ---------------------------------------------------------------------------
// Cold-start split. Items (not records) are shuffled and partitioned; every
// interaction touching a held-out item is removed from the training set and
// kept as that partition's ground truth.
// ---------------------------------------------------------------------------

inline void cold_start_split(InteractionSet& set,
                             std::array<double, 3> ratios,
                             std::uint64_t seed) {
  const double rsum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(rsum - 1.0) > 1e-9)
    throw std::invalid_argument("cold_start_split: ratios sum to " + std::to_string(rsum));
  const int n = set.item_count();
  if (n < 10) throw DataError("cold_start_split: need at least 10 items, have " +
                              std::to_string(n));

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = fork_stream(seed, "split");
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(order[i], order[j]);
  }

  const int n_train = static_cast<int>(std::llround(ratios[0] * n));
  const int n_valid = static_cast<int>(std::llround(ratios[1] * n));

  set.item_partition.assign(n, Partition::kTrain);
  for (int pos = 0; pos < n; ++pos) {
    if (pos < n_train) set.item_partition[order[pos]] = Partition::kTrain;
    else if (pos < n_train + n_valid) set.item_partition[order[pos]] = Partition::kValidCold;
    else set.item_partition[order[pos]] = Partition::kTestCold;
  }

  set.train_records.clear();
  set.valid_truth.assign(set.user_count(), {});
  set.test_truth.assign(set.user_count(), {});
  set.user_train_items.assign(set.user_count(), {});
  for (const Record& r : set.records) {
    switch (set.item_partition[r.item]) {
      case Partition::kTrain:
        set.train_records.push_back(r);
        set.user_train_items[r.user].push_back(r.item);
        break;
      case Partition::kValidCold:
        set.valid_truth[r.user].push_back(r.item);
        break;
      case Partition::kTestCold:
        set.test_truth[r.user].push_back(r.item);
        break;
    }
  }
  for (auto& v : set.user_train_items) std::sort(v.begin(), v.end());
  for (auto& v : set.valid_truth) std::sort(v.begin(), v.end());
  for (auto& v : set.test_truth) std::sort(v.begin(), v.end());
  set.split_done = true;
}

// ---------------------------------------------------------------------------
// BPR triplet sampling: positives uniform over training records, negatives
// uniform over train items the user has not interacted with.
// ---------------------------------------------------------------------------

inline TripletBatch sample_triplets(const InteractionSet& set, int batch_size, Rng& rng) {
  if (!set.split_done) throw std::logic_error("sample_triplets: split not performed");
  if (set.train_records.empty()) throw DataError("sample_triplets: no training records");

  std::vector<int> train_items;
  for (int i = 0; i < set.item_count(); ++i)
    if (set.item_partition[i] == Partition::kTrain) train_items.push_back(i);

  // Users whose train-item set saturates the catalog can never yield a
  // negative; they are skipped (warned once per call).
  std::unordered_set<int> warned;
  TripletBatch batch;
  batch.triplets.reserve(batch_size);
  int guard = 0;
  while (static_cast<int>(batch.triplets.size()) < batch_size) {
    if (++guard > batch_size * 1000)
      throw DataError("sample_triplets: could not draw negatives (all users saturated?)");
    const Record& pos =
        set.train_records[rng.below(set.train_records.size())];
    const auto& owned = set.user_train_items[pos.user];
    if (owned.size() >= train_items.size()) {
      if (warned.insert(pos.user).second)
        log_warn("user " + set.user_ids[pos.user] +
                 " interacts with every train item; skipped in sampling");
      continue;
    }
    int neg;
    do {
      neg = train_items[rng.below(train_items.size())];
    } while (std::binary_search(owned.begin(), owned.end(), neg));
    batch.triplets.push_back({pos.user, pos.item, neg});
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark. Latent user/item vectors are standard Gaussian; each
// modality feature is signal * latent_item + unit Gaussian noise; each user
// interacts with their top-scoring items by latent dot product.
// ---------------------------------------------------------------------------

struct SyntheticData {
  InteractionSet interactions;
  ModalityFeatureTable features;
  Matrix latent_users;  // diagnostics only; not written to disk
  Matrix latent_items;
};

struct SyntheticSpec {
  int n_users = 200;
  int n_items = 500;
  int dim = 32;
  double text_signal = 1.0;
  double image_signal = 1.0;
  int interactions_per_user = 10;
  std::uint64_t seed = 1;
};

inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  if (spec.dim < 1) throw std::invalid_argument("generate_synthetic: dim must be >= 1");
  if (spec.n_users < 1 || spec.n_items < 1)
    throw std::invalid_argument("generate_synthetic: need at least one user and one item");
  if (spec.text_signal < 0.0 || spec.image_signal < 0.0)
    throw std::invalid_argument("generate_synthetic: signal weights must be >= 0");
  if (spec.interactions_per_user < 1 || spec.interactions_per_user > spec.n_items)
    throw std::invalid_argument("generate_synthetic: interactions_per_user out of range");

  SyntheticData out;
  out.latent_users = Matrix(spec.n_users, spec.dim);
  out.latent_items = Matrix(spec.n_items, spec.dim);
  {
    Rng rng = fork_stream(spec.seed, "synthetic/latent_users");
    for (double& v : out.latent_users.a) v = rng.gaussian();
  }
  {
    Rng rng = fork_stream(spec.seed, "synthetic/latent_items");
    for (double& v : out.latent_items.a) v = rng.gaussian();
  }

  const auto item_name = [](int i) { return "i" + std::to_string(i); };
  const auto user_name = [](int u) { return "u" + std::to_string(u); };

  out.features.modalities = {"image", "text"};
  out.features.dims = {spec.dim, spec.dim};
  out.features.vectors.resize(2);
  const double signals[2] = {spec.image_signal, spec.text_signal};
  const char* streams[2] = {"synthetic/noise_image", "synthetic/noise_text"};
  for (int m = 0; m < 2; ++m) {
    Rng rng = fork_stream(spec.seed, streams[m]);
    for (int i = 0; i < spec.n_items; ++i) {
      Vector v(spec.dim);
      for (int c = 0; c < spec.dim; ++c)
        v[c] = signals[m] * out.latent_items.at(i, c) + rng.gaussian();
      out.features.vectors[m][item_name(i)] = std::move(v);
    }
  }

  // Interactions: per user, the top interactions_per_user items by latent
  // dot product, ties broken by item index. Only interacted items enter the
  // interaction universe (in record order, matching a reload from disk);
  // the rest stay feature-only.
  for (int u = 0; u < spec.n_users; ++u) {
    std::vector<std::pair<double, int>> scored(spec.n_items);
    for (int i = 0; i < spec.n_items; ++i) {
      double s = 0.0;
      for (int c = 0; c < spec.dim; ++c) s += out.latent_users.at(u, c) * out.latent_items.at(i, c);
      scored[i] = {s, i};
    }
    std::partial_sort(scored.begin(), scored.begin() + spec.interactions_per_user, scored.end(),
                      [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return a.second < b.second;
                      });
    const int uid = out.interactions.intern_user(user_name(u));
    for (int k = 0; k < spec.interactions_per_user; ++k)
      out.interactions.records.push_back({uid, out.interactions.intern_item(
                                                   item_name(scored[k].second))});
  }
  return out;
}

// Generator item number behind a synthetic item id ("i<n>"), for joining
// against the diagnostic latent matrices.
inline int synthetic_item_number(const std::string& item_id) {
  return std::stoi(item_id.substr(1));
}

// ---------------------------------------------------------------------------
// On-disk dataset layout: interactions.tsv, features_<modality>.tsv, and a
// key-value manifest naming the modalities and their dimensions.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_interactions(const InteractionSet& set, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const Record& r : set.records)
    out << set.user_ids[r.user] << '\t' << set.item_ids[r.item] << '\n';
}

inline void write_features(const ModalityFeatureTable& table, int m,
                           const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  // Deterministic file contents: emit items in sorted id order.
  std::vector<const std::string*> ids;
  ids.reserve(table.vectors[m].size());
  for (const auto& [id, _] : table.vectors[m]) ids.push_back(&id);
  std::sort(ids.begin(), ids.end(), [](const auto* a, const auto* b) { return *a < *b; });
  for (const std::string* id : ids) {
    out << *id << '\t';
    const Vector& v = table.vectors[m].at(*id);
    for (std::size_t c = 0; c < v.size(); ++c) {
      if (c) out << ',';
      out << format_double(v[c]);
    }
    out << '\n';
  }
}

inline void write_manifest(const ModalityFeatureTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (int m = 0; m < table.modality_count(); ++m)
    out << "modality=" << table.modalities[m] << '\n' << "dim=" << table.dims[m] << '\n';
}

struct ManifestEntry {
  std::string modality;
  int dim = -1;
};

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected key=value");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "modality") {
      entries.push_back({value, -1});
    } else if (key == "dim") {
      if (entries.empty() || entries.back().dim >= 0)
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": dim before modality");
      entries.back().dim = std::stoi(value);
    } else {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": unknown key `" + key +
                      "`");
    }
  }
  if (entries.empty()) throw DataError("manifest lists no modalities: " + path.string());
  return entries;
}

struct Dataset {
  InteractionSet interactions;
  ModalityFeatureTable features;
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.interactions = load_interactions(dir / "interactions.tsv");
  for (const ManifestEntry& e : read_manifest(dir / "manifest.txt")) {
    const auto feature_path = dir / ("features_" + e.modality + ".tsv");
    if (!std::filesystem::exists(feature_path))
      throw DataError("manifest names modality `" + e.modality + "` but " +
                      feature_path.string() + " is missing");
    load_features(ds.features, feature_path, e.modality);
    const int m = ds.features.modality_index(e.modality);
    if (e.dim >= 0 && ds.features.dims[m] != e.dim)
      throw DataError("manifest dim " + std::to_string(e.dim) + " conflicts with " +
                      feature_path.string() + " dim " + std::to_string(ds.features.dims[m]));
  }
  return ds;
}

inline void write_dataset(const InteractionSet& set, const ModalityFeatureTable& table,
                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_interactions(set, dir / "interactions.tsv");
  for (int m = 0; m < table.modality_count(); ++m)
    write_features(table, m, dir / ("features_" + table.modalities[m] + ".tsv"));
  write_manifest(table, dir / "manifest.txt");
}

inline void write_split_files(const InteractionSet& set, const std::filesystem::path& dir) {
  if (!set.split_done) throw std::logic_error("write_split_files: split not performed");
  const std::pair<Partition, const char*> outputs[] = {
      {Partition::kTrain, "split_train.txt"},
      {Partition::kValidCold, "split_valid.txt"},
      {Partition::kTestCold, "split_test.txt"},
  };
  for (const auto& [p, name] : outputs) {
    std::ofstream out(dir / name);
    if (!out) throw DataError("cannot write split file in " + dir.string());
    for (int i : set.items_in(p)) out << set.item_ids[i] << '\n';
  }
}

// Combined content hash of a dataset directory, recorded in checkpoints and
// run manifests so evaluation can refuse mismatched data.
inline std::uint64_t dataset_hash(const std::filesystem::path& dir) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  const auto eat = [&h](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot open " + p.string());
    char buf[1 << 14];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
      h = fnv1a64(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
  };
  eat(dir / "manifest.txt");
  eat(dir / "interactions.tsv");
  for (const ManifestEntry& e : read_manifest(dir / "manifest.txt"))
    eat(dir / ("features_" + e.modality + ".tsv"));
  return h;
}

// Resolved per-item feature pointers in interaction index space. Items with
// no present modality are recorded; training treats them as a data error,
// evaluation excludes them with a warning.
struct FeatureView {
  std::vector<std::vector<const Vector*>> per_item;  // [item][modality], null if absent
  std::vector<char> any_present;

  int present_count(int item) const {
    int n = 0;
    for (const Vector* v : per_item[item])
      if (v != nullptr) ++n;
    return n;
  }
};

inline FeatureView resolve_features(const InteractionSet& set,
                                    const ModalityFeatureTable& table) {
  FeatureView view;
  const int n = set.item_count();
  const int m = table.modality_count();
  view.per_item.assign(n, std::vector<const Vector*>(m, nullptr));
  view.any_present.assign(n, 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      view.per_item[i][j] = table.find(j, set.item_ids[i]);
      if (view.per_item[i][j] != nullptr) view.any_present[i] = 1;
    }
  }
  return view;
}

}  // namespace mamex::data
