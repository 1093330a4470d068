// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
//
// Model assembly: configuration, the trainable parameter layout for every
// variant, and construction of the per-item and per-batch computation graphs
// (dot-product scoring, BPR, alignment, balance regularizers, L2).
#pragma once

#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mamex/adapter.hpp"
#include "mamex/data.hpp"
#include "mamex/errors.hpp"
#include "mamex/fusion.hpp"
#include "mamex/numerics.hpp"
#include "mamex/rng.hpp"

namespace mamex::model {

using num::Matrix;
using num::Node;
using num::ParamBlock;
using num::Tape;
using num::Vector;

enum class Variant {
  kFull,
  kNoMoe,
  kNoAlign,
  kNoMmf,
  kJointRouter,
  kModSpecificRouter,
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoMoe: return "no_moe";
    case Variant::kNoAlign: return "no_align";
    case Variant::kNoMmf: return "no_mmf";
    case Variant::kJointRouter: return "joint_router";
    default: return "mod_specific_router";
  }
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::kFull, Variant::kNoMoe, Variant::kNoAlign, Variant::kNoMmf,
                    Variant::kJointRouter, Variant::kModSpecificRouter})
    if (s == variant_name(v)) return v;
  throw ConfigError("unknown variant `" + s + "`");
}

inline std::vector<Variant> all_variants() {
  return {Variant::kFull,   Variant::kNoMoe,       Variant::kNoAlign,
          Variant::kNoMmf,  Variant::kJointRouter, Variant::kModSpecificRouter};
}

struct ModelConfig {
  int d = 32;
  int num_experts = 4;
  int top_k = 2;
  double lambda1 = 0.1;   // alignment
  double lambda2 = 0.01;  // adapter balance
  double lambda3 = 0.01;  // fusion balance
  double lambda4 = 0.01;  // L2
  double lr = 0.001;
  int batch_size = 256;
  int epochs = 30;
  std::uint64_t seed = 1;
  Variant variant = Variant::kFull;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool expert_bias = true;

  // no_align zeroes the alignment weight; everything else is untouched.
  double effective_lambda1() const { return variant == Variant::kNoAlign ? 0.0 : lambda1; }

  void validate() const {
    if (d < 1) throw ConfigError("d must be >= 1");
    if (num_experts < 1) throw ConfigError("num_experts must be >= 1");
    if (top_k < 1 || top_k > num_experts)
      throw ConfigError("top_k must satisfy 1 <= top_k <= num_experts");
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0 || lambda4 < 0)
      throw ConfigError("loss weights must be >= 0");
    if (lr <= 0) throw ConfigError("lr must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
  }

  std::string serialize() const {
    std::ostringstream out;
    out << "d = " << d << '\n'
        << "num_experts = " << num_experts << '\n'
        << "top_k = " << top_k << '\n'
        << "lambda1 = " << data::format_double(lambda1) << '\n'
        << "lambda2 = " << data::format_double(lambda2) << '\n'
        << "lambda3 = " << data::format_double(lambda3) << '\n'
        << "lambda4 = " << data::format_double(lambda4) << '\n'
        << "lr = " << data::format_double(lr) << '\n'
        << "batch_size = " << batch_size << '\n'
        << "epochs = " << epochs << '\n'
        << "seed = " << seed << '\n'
        << "variant = " << variant_name(variant) << '\n'
        << "adam_beta1 = " << data::format_double(adam_beta1) << '\n'
        << "adam_beta2 = " << data::format_double(adam_beta2) << '\n'
        << "adam_eps = " << data::format_double(adam_eps) << '\n'
        << "expert_bias = " << (expert_bias ? "true" : "false") << '\n';
    return out.str();
  }

  static ModelConfig parse(std::istream& in) {
    ModelConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto strip = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      const std::string stripped = strip(line);
      if (stripped.empty() || stripped[0] == '#') continue;
      const auto eq = stripped.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
      const std::string key = strip(stripped.substr(0, eq));
      const std::string value = strip(stripped.substr(eq + 1));
      try {
        if (key == "d") cfg.d = std::stoi(value);
        else if (key == "num_experts") cfg.num_experts = std::stoi(value);
        else if (key == "top_k") cfg.top_k = std::stoi(value);
        else if (key == "lambda1") cfg.lambda1 = std::stod(value);
        else if (key == "lambda2") cfg.lambda2 = std::stod(value);
        else if (key == "lambda3") cfg.lambda3 = std::stod(value);
        else if (key == "lambda4") cfg.lambda4 = std::stod(value);
        else if (key == "lr") cfg.lr = std::stod(value);
        else if (key == "batch_size") cfg.batch_size = std::stoi(value);
        else if (key == "epochs") cfg.epochs = std::stoi(value);
        else if (key == "seed") cfg.seed = std::stoull(value);
        else if (key == "variant") cfg.variant = parse_variant(value);
        else if (key == "adam_beta1") cfg.adam_beta1 = std::stod(value);
        else if (key == "adam_beta2") cfg.adam_beta2 = std::stod(value);
        else if (key == "adam_eps") cfg.adam_eps = std::stod(value);
        else if (key == "expert_bias") cfg.expert_bias = (value == "true" || value == "1");
        else throw ConfigError("unknown config key `" + key + "`");
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception&) {
        throw ConfigError("config line " + std::to_string(line_no) + ": bad value for `" + key +
                          "`");
      }
    }
    cfg.validate();
    return cfg;
  }

  static ModelConfig parse_string(const std::string& text) {
    std::istringstream in(text);
    return parse(in);
  }
};

// ---------------------------------------------------------------------------
// Parameter layout. Blocks are declared in a fixed order that also defines
// the checkpoint serialization order.
// ---------------------------------------------------------------------------

struct AdapterLayout {
  int gate_w = -1, gate_b = -1;
  std::vector<int> expert_w, expert_b;  // expert_b empty when bias disabled
  int proj_w = -1, proj_b = -1;         // no_moe replacement map
};

struct ModelParams {
  ModelConfig cfg;
  std::vector<std::string> modalities;
  std::vector<int> feat_dims;
  int n_users = 0;

  std::vector<ParamBlock> blocks;
  int user_table = -1;
  std::vector<AdapterLayout> adapters;  // per modality (unused for joint)
  AdapterLayout joint;                  // joint_router
  std::vector<int> shared_expert_w, shared_expert_b;  // mod_specific_router
  int fusion_w = -1, fusion_b = -1;

  int modality_count() const { return static_cast<int>(modalities.size()); }
  bool has_fusion_gate() const { return fusion_w >= 0; }

  const ParamBlock& block(int idx) const { return blocks[idx]; }
  ParamBlock& block(int idx) { return blocks[idx]; }

  std::vector<Node> stage(Tape& tape) const {
    std::vector<Node> nodes;
    nodes.reserve(blocks.size());
    for (const ParamBlock& b : blocks) nodes.push_back(tape.constant(b.value, b.rows, b.cols));
    return nodes;
  }

  void collect_grads(const Tape& tape, const std::vector<Node>& nodes) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].grad = tape.grad(nodes[i]);
  }

  std::vector<Vector> snapshot_values() const {
    std::vector<Vector> out;
    out.reserve(blocks.size());
    for (const ParamBlock& b : blocks) out.push_back(b.value);
    return out;
  }

  void restore_values(const std::vector<Vector>& snap) {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].value = snap[i];
  }
};

namespace detail {

inline int add_block(ModelParams& p, const std::string& name, int rows, int cols) {
  p.blocks.push_back(ParamBlock::make(name, rows, cols));
  return static_cast<int>(p.blocks.size()) - 1;
}

inline AdapterLayout add_moe_blocks(ModelParams& p, const std::string& prefix, int K, int d_in,
                                    int d_out, bool bias) {
  AdapterLayout layout;
  layout.gate_w = add_block(p, prefix + ".gate_w", K, d_in);
  layout.gate_b = add_block(p, prefix + ".gate_b", K, 1);
  for (int k = 0; k < K; ++k) {
    layout.expert_w.push_back(add_block(p, prefix + ".expert" + std::to_string(k) + ".w", d_out,
                                        d_in));
    if (bias)
      layout.expert_b.push_back(
          add_block(p, prefix + ".expert" + std::to_string(k) + ".b", d_out, 1));
  }
  return layout;
}

}  // namespace detail

// Declares all trainable blocks for the variant and initializes them:
// Gaussian (std 0.01) weights, zero biases, drawn from the "init" stream of
// the run seed.
inline ModelParams build_model(const ModelConfig& cfg, std::vector<std::string> modalities,
                               std::vector<int> feat_dims, int n_users) {
  cfg.validate();
  if (modalities.empty()) throw ConfigError("model needs at least one modality");
  if (modalities.size() != feat_dims.size())
    throw ConfigError("modalities/dims mismatch");

  ModelParams p;
  p.cfg = cfg;
  p.modalities = std::move(modalities);
  p.feat_dims = std::move(feat_dims);
  p.n_users = n_users;

  const int M = p.modality_count();
  const int d = cfg.d;
  const int K = cfg.num_experts;

  p.user_table = detail::add_block(p, "user_emb", n_users, d);

  switch (cfg.variant) {
    case Variant::kFull:
    case Variant::kNoAlign:
    case Variant::kNoMmf:
      for (int m = 0; m < M; ++m)
        p.adapters.push_back(detail::add_moe_blocks(p, "adapter." + p.modalities[m], K,
                                                    p.feat_dims[m], d, cfg.expert_bias));
      break;
    case Variant::kNoMoe:
      for (int m = 0; m < M; ++m) {
        AdapterLayout layout;
        layout.proj_w = detail::add_block(p, "adapter." + p.modalities[m] + ".proj_w", d,
                                          p.feat_dims[m]);
        layout.proj_b = detail::add_block(p, "adapter." + p.modalities[m] + ".proj_b", d, 1);
        p.adapters.push_back(layout);
      }
      break;
    case Variant::kJointRouter: {
      int total_dim = 0;
      for (int dm : p.feat_dims) total_dim += dm;
      p.joint = detail::add_moe_blocks(p, "adapter.joint", K, total_dim, d, cfg.expert_bias);
      break;
    }
    case Variant::kModSpecificRouter: {
      for (int m = 1; m < M; ++m)
        if (p.feat_dims[m] != p.feat_dims[0])
          throw ConfigError(
              "mod_specific_router shares experts across modalities and requires equal "
              "feature dimensions");
      for (int m = 0; m < M; ++m) {
        AdapterLayout layout;
        layout.gate_w = detail::add_block(p, "adapter." + p.modalities[m] + ".gate_w", K,
                                          p.feat_dims[m]);
        layout.gate_b = detail::add_block(p, "adapter." + p.modalities[m] + ".gate_b", K, 1);
        p.adapters.push_back(layout);
      }
      for (int k = 0; k < K; ++k) {
        p.shared_expert_w.push_back(
            detail::add_block(p, "shared.expert" + std::to_string(k) + ".w", d, p.feat_dims[0]));
        if (cfg.expert_bias)
          p.shared_expert_b.push_back(
              detail::add_block(p, "shared.expert" + std::to_string(k) + ".b", d, 1));
      }
      break;
    }
  }

  // Fusion gate exists wherever modality embeddings are adaptively mixed.
  if (cfg.variant != Variant::kNoMmf && cfg.variant != Variant::kJointRouter) {
    p.fusion_w = detail::add_block(p, "fusion.gate_w", M, M * d);
    p.fusion_b = detail::add_block(p, "fusion.gate_b", M, 1);
  }

  Rng rng = fork_stream(cfg.seed, "init");
  for (ParamBlock& b : p.blocks) {
    const bool is_bias = b.name.ends_with("_b") || b.name.ends_with(".b");
    if (is_bias) continue;  // biases stay zero
    for (double& v : b.value) v = 0.01 * rng.gaussian();
  }

  // Expert maps start at a (wrapped, input-averaging) identity so the
  // adapters pass features through from step one; cold-start transfer
  // degrades badly when the feature map has to be relearned from a
  // near-zero map. Gates keep the small random init that holds early
  // routing near-uniform.
  const auto add_passthrough = [&p](int block_idx) {
    if (block_idx < 0) return;
    ParamBlock& b = p.block(block_idx);
    const double scale = static_cast<double>(b.rows) / b.cols;
    for (int c = 0; c < b.cols; ++c)
      b.value[static_cast<std::size_t>(c % b.rows) * b.cols + c] += scale;
  };
  for (const AdapterLayout& a : p.adapters) {
    for (int idx : a.expert_w) add_passthrough(idx);
    add_passthrough(a.proj_w);
  }
  for (int idx : p.joint.expert_w) add_passthrough(idx);
  for (int idx : p.shared_expert_w) add_passthrough(idx);
  return p;
}

// ---------------------------------------------------------------------------
// Graph construction.
// ---------------------------------------------------------------------------

struct ItemGraph {
  Node e;
  std::vector<Node> dense_gates;  // one per router that saw this item
  std::vector<int> gate_group;    // parallel: which balance group (modality)
  bool has_alpha = false;
  Node alpha;
  bool has_align = false;
  Node align;
  std::vector<char> present;
};

namespace detail {

inline Node moe_forward(Tape& tape, const std::vector<Node>& blocks, const AdapterLayout& a,
                        int top_k, Node h, Node* dense_gate_out) {
  const Node logits = tape.affine(blocks[a.gate_w], blocks[a.gate_b], h);
  *dense_gate_out = tape.softmax_node(logits);
  const num::TopK routed = num::top_k_renormalized(tape.value(logits), top_k);
  const Node sparse = tape.softmax_subset(logits, routed.indices);
  std::vector<Node> outs;
  outs.reserve(routed.indices.size());
  for (int k : routed.indices) {
    const Node bias = a.expert_b.empty() ? Node{} : blocks[a.expert_b[k]];
    outs.push_back(tape.affine(blocks[a.expert_w[k]], bias, h));
  }
  return tape.weighted_sum(sparse, routed.indices, outs);
}

inline Node shared_moe_forward(Tape& tape, const std::vector<Node>& blocks,
                               const ModelParams& p, const AdapterLayout& gate_only, Node h,
                               Node* dense_gate_out) {
  const Node logits = tape.affine(blocks[gate_only.gate_w], blocks[gate_only.gate_b], h);
  *dense_gate_out = tape.softmax_node(logits);
  const num::TopK routed = num::top_k_renormalized(tape.value(logits), p.cfg.top_k);
  const Node sparse = tape.softmax_subset(logits, routed.indices);
  std::vector<Node> outs;
  for (int k : routed.indices) {
    const Node bias = p.shared_expert_b.empty() ? Node{} : blocks[p.shared_expert_b[k]];
    outs.push_back(tape.affine(blocks[p.shared_expert_w[k]], bias, h));
  }
  return tape.weighted_sum(sparse, routed.indices, outs);
}

}  // namespace detail

// Builds the feature -> item-embedding subgraph for one item. `feats` holds
// one pointer per modality, null where the modality is absent.
inline ItemGraph build_item_graph(Tape& tape, const ModelParams& p,
                                  const std::vector<Node>& blocks,
                                  const std::vector<const Vector*>& feats) {
  const int M = p.modality_count();
  ItemGraph g;
  g.present.assign(M, 0);
  int n_present = 0;
  for (int m = 0; m < M; ++m) {
    g.present[m] = feats[m] != nullptr ? 1 : 0;
    n_present += g.present[m];
  }
  if (n_present == 0) throw DataError("item has no present modality features");

  if (p.cfg.variant == Variant::kJointRouter) {
    // One router over the concatenation; absent slots are zero-filled.
    std::vector<Node> parts;
    for (int m = 0; m < M; ++m) {
      parts.push_back(g.present[m] ? tape.constant(*feats[m])
                                   : tape.constant(Vector(p.feat_dims[m], 0.0)));
    }
    const Node h_all = tape.concat(parts);
    Node dense;
    g.e = detail::moe_forward(tape, blocks, p.joint, p.cfg.top_k, h_all, &dense);
    g.dense_gates.push_back(dense);
    g.gate_group.push_back(0);
    return g;
  }

  // Per-modality adapted embeddings.
  std::vector<Node> z(M);
  for (int m = 0; m < M; ++m) {
    if (!g.present[m]) continue;
    const Node h = tape.constant(*feats[m]);
    switch (p.cfg.variant) {
      case Variant::kNoMoe: {
        const AdapterLayout& a = p.adapters[m];
        z[m] = tape.affine(blocks[a.proj_w], blocks[a.proj_b], h);
        break;
      }
      case Variant::kModSpecificRouter: {
        Node dense;
        z[m] = detail::shared_moe_forward(tape, blocks, p, p.adapters[m], h, &dense);
        g.dense_gates.push_back(dense);
        g.gate_group.push_back(m);
        break;
      }
      default: {
        Node dense;
        z[m] = detail::moe_forward(tape, blocks, p.adapters[m], p.cfg.top_k, h, &dense);
        g.dense_gates.push_back(dense);
        g.gate_group.push_back(m);
        break;
      }
    }
  }

  std::vector<int> present_idx;
  std::vector<Node> present_z;
  for (int m = 0; m < M; ++m)
    if (g.present[m]) {
      present_idx.push_back(m);
      present_z.push_back(z[m]);
    }

  if (p.cfg.variant == Variant::kNoMmf) {
    Vector uniform(M, 0.0);
    for (int m : present_idx) uniform[m] = 1.0 / static_cast<double>(n_present);
    g.alpha = tape.constant(uniform);
    g.has_alpha = true;
    g.e = tape.weighted_sum(g.alpha, present_idx, present_z);
  } else {
    // Adaptive fusion: concatenate in modality order with zero padding for
    // absent slots, gate, softmax over present logits only.
    std::vector<Node> parts;
    for (int m = 0; m < M; ++m)
      parts.push_back(g.present[m] ? z[m] : tape.constant(Vector(p.cfg.d, 0.0)));
    const Node cat = tape.concat(parts);
    const Node logits = tape.affine(blocks[p.fusion_w], blocks[p.fusion_b], cat);
    g.alpha = tape.softmax_subset(logits, present_idx);
    g.has_alpha = true;
    g.e = tape.weighted_sum(g.alpha, present_idx, present_z);
  }

  // Alignment: sum over present modalities of ||e - z_m||^2.
  std::vector<Node> terms;
  for (std::size_t j = 0; j < present_idx.size(); ++j)
    terms.push_back(tape.sum_squares(tape.sub(g.e, present_z[j])));
  const std::vector<double> ones(terms.size(), 1.0);
  g.align = tape.combine(terms, ones);
  g.has_align = true;
  return g;
}

// Value-level item embedding on a scratch tape (used by evaluation).
struct ItemEmbedding {
  Vector e;
  Vector alpha;  // empty when the variant has no fusion weights
};

inline ItemEmbedding embed_item(const ModelParams& p, const std::vector<const Vector*>& feats) {
  Tape tape;
  const std::vector<Node> blocks = p.stage(tape);
  const ItemGraph g = build_item_graph(tape, p, blocks, feats);
  ItemEmbedding out;
  out.e = tape.value(g.e);
  if (g.has_alpha) out.alpha = tape.value(g.alpha);
  return out;
}

// ---------------------------------------------------------------------------
// Batch objective.
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double total = 0.0;  // optimization objective (mean-form BPR and alignment)
  double bpr_sum = 0.0;
  double bpr_mean = 0.0;
  double align_sum = 0.0;
  double align_mean = 0.0;
  double adapter_kl = 0.0;
  double fusion_kl = 0.0;
  double l2 = 0.0;
  Vector mean_alpha;  // per modality, over the batch's unique items
  int n_triplets = 0;
  int n_items = 0;
};

struct BatchGraph {
  Node total;
  LossBreakdown breakdown;
};

// Builds the full objective for one triplet batch. Regularizer statistics
// (Eq.-style batch means) are taken over the unique items of the batch; BPR
// and alignment enter the optimization objective in mean form so the
// objective scale is batch-size invariant.
inline BatchGraph build_batch_graph(Tape& tape, const ModelParams& p,
                                    const std::vector<Node>& blocks,
                                    const data::TripletBatch& batch,
                                    const data::FeatureView& features) {
  if (batch.triplets.empty()) throw std::invalid_argument("build_batch_graph: empty batch");
  const ModelConfig& cfg = p.cfg;

  // Unique items, in first-appearance order for determinism.
  std::vector<int> unique_items;
  std::map<int, int> item_slot;
  for (const data::Triplet& t : batch.triplets) {
    for (int item : {t.pos, t.neg}) {
      if (item_slot.emplace(item, static_cast<int>(unique_items.size())).second)
        unique_items.push_back(item);
    }
  }

  std::vector<ItemGraph> items;
  items.reserve(unique_items.size());
  for (int item : unique_items) {
    if (!features.any_present[item])
      throw DataError("item index " + std::to_string(item) +
                      " has no modality features; cannot embed");
    items.push_back(build_item_graph(tape, p, blocks, features.per_item[item]));
  }

  // BPR terms: softplus(s_neg - s_pos) per triplet.
  std::vector<Node> bpr_terms;
  bpr_terms.reserve(batch.triplets.size());
  for (const data::Triplet& t : batch.triplets) {
    const Node eu = tape.row(blocks[p.user_table], t.user);
    const Node s_pos = tape.dot(eu, items[item_slot[t.pos]].e);
    const Node s_neg = tape.dot(eu, items[item_slot[t.neg]].e);
    bpr_terms.push_back(tape.softplus_node(tape.sub(s_neg, s_pos)));
  }
  const Node bpr_mean = tape.mean_scalar(bpr_terms);

  // Alignment over batch items.
  std::vector<Node> align_terms;
  for (const ItemGraph& g : items)
    if (g.has_align) align_terms.push_back(g.align);
  Node align_mean;
  bool has_align = !align_terms.empty();
  if (has_align) align_mean = tape.mean_scalar(align_terms);

  // Adapter balance: per gate group, KL(mean dense gate || uniform).
  std::map<int, std::vector<Node>> gates_by_group;
  for (const ItemGraph& g : items)
    for (std::size_t j = 0; j < g.dense_gates.size(); ++j)
      gates_by_group[g.gate_group[j]].push_back(g.dense_gates[j]);
  std::vector<Node> kl_terms;
  for (const auto& [group, gates] : gates_by_group)
    kl_terms.push_back(tape.kl_to_uniform_node(tape.mean_of(gates)));
  Node adapter_kl;
  const bool has_adapter_kl = !kl_terms.empty();
  if (has_adapter_kl) {
    const std::vector<double> ones(kl_terms.size(), 1.0);
    adapter_kl = tape.combine(kl_terms, ones);
  }

  // Fusion balance: KL(mean alpha || uniform over modalities).
  std::vector<Node> alphas;
  for (const ItemGraph& g : items)
    if (g.has_alpha) alphas.push_back(g.alpha);
  Node fusion_kl;
  const bool has_fusion_kl = !alphas.empty();
  if (has_fusion_kl) fusion_kl = tape.kl_to_uniform_node(tape.mean_of(alphas));

  // L2 over every trainable parameter.
  std::vector<Node> sq;
  sq.reserve(blocks.size());
  for (const Node& b : blocks) sq.push_back(tape.sum_squares(b));
  const std::vector<double> ones(sq.size(), 1.0);
  const Node l2 = tape.combine(sq, ones);

  std::vector<Node> parts{bpr_mean};
  std::vector<double> coeffs{1.0};
  if (has_align) {
    parts.push_back(align_mean);
    coeffs.push_back(cfg.effective_lambda1());
  }
  if (has_adapter_kl) {
    parts.push_back(adapter_kl);
    coeffs.push_back(cfg.lambda2);
  }
  if (has_fusion_kl) {
    parts.push_back(fusion_kl);
    coeffs.push_back(cfg.lambda3);
  }
  parts.push_back(l2);
  coeffs.push_back(cfg.lambda4);

  BatchGraph out;
  out.total = tape.combine(parts, coeffs);

  LossBreakdown& b = out.breakdown;
  b.n_triplets = static_cast<int>(batch.triplets.size());
  b.n_items = static_cast<int>(unique_items.size());
  b.bpr_mean = tape.scalar(bpr_mean);
  b.bpr_sum = b.bpr_mean * b.n_triplets;
  if (has_align) {
    b.align_mean = tape.scalar(align_mean);
    b.align_sum = b.align_mean * static_cast<double>(align_terms.size());
  }
  if (has_adapter_kl) b.adapter_kl = tape.scalar(adapter_kl);
  if (has_fusion_kl) b.fusion_kl = tape.scalar(fusion_kl);
  b.l2 = tape.scalar(l2);
  b.total = tape.scalar(out.total);
  b.mean_alpha.assign(p.modality_count(), std::numeric_limits<double>::quiet_NaN());
  if (has_fusion_kl) {
    b.mean_alpha.assign(p.modality_count(), 0.0);
    int count = 0;
    for (const ItemGraph& g : items)
      if (g.has_alpha) {
        const Vector& a = tape.value(g.alpha);
        for (int m = 0; m < p.modality_count(); ++m) b.mean_alpha[m] += a[m];
        ++count;
      }
    for (double& v : b.mean_alpha) v /= static_cast<double>(count);
  }
  return out;
}

// Dot-product relevance score.
inline double score(const Vector& e_u, const Vector& e_i) {
  if (e_u.size() != e_i.size())
    throw std::invalid_argument("score: length mismatch " + std::to_string(e_u.size()) +
                                " vs " + std::to_string(e_i.size()));
  double s = 0.0;
  for (std::size_t c = 0; c < e_u.size(); ++c) s += e_u[c] * e_i[c];
  return s;
}

// Stable BPR loss over per-triplet score pairs; returns (sum, mean).
struct BprLoss {
  double sum = 0.0;
  double mean = 0.0;
};

inline BprLoss bpr_loss(std::span<const std::pair<double, double>> triplet_scores) {
  if (triplet_scores.empty()) throw std::invalid_argument("bpr_loss: empty batch");
  BprLoss out;
  for (const auto& [s_pos, s_neg] : triplet_scores) out.sum += num::softplus(s_neg - s_pos);
  out.mean = out.sum / static_cast<double>(triplet_scores.size());
  return out;
}

}  // namespace mamex::model
