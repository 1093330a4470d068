// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end optimization: Adam with bias correction, the epoch loop with
// per-epoch validation and best-checkpoint selection, and the versioned
// binary checkpoint format.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mamex/data.hpp"
#include "mamex/errors.hpp"
#include "mamex/evaluation.hpp"
#include "mamex/log.hpp"
#include "mamex/model.hpp"

namespace mamex::train {

using model::ModelConfig;
using model::ModelParams;
using num::ParamBlock;
using num::Vector;

// ---------------------------------------------------------------------------
// Adam.
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<Vector> m, v;
  long step = 0;

  void init(const ModelParams& params) {
    m.clear();
    v.clear();
    for (const ParamBlock& b : params.blocks) {
      m.emplace_back(b.value.size(), 0.0);
      v.emplace_back(b.value.size(), 0.0);
    }
    step = 0;
  }
};

// One bias-corrected Adam update from the gradients currently stored in the
// blocks. NaN gradients abort with the offending block named.
inline void adam_step(ModelParams& params, AdamState& state) {
  const ModelConfig& cfg = params.cfg;
  for (const ParamBlock& b : params.blocks)
    if (!num::all_finite(b.grad))
      throw std::runtime_error("adam_step: non-finite gradient in block `" + b.name + "`");

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    ParamBlock& b = params.blocks[i];
    Vector& mi = state.m[i];
    Vector& vi = state.v[i];
    for (std::size_t j = 0; j < b.value.size(); ++j) {
      const double g = b.grad[j];
      mi[j] = cfg.adam_beta1 * mi[j] + (1.0 - cfg.adam_beta1) * g;
      vi[j] = cfg.adam_beta2 * vi[j] + (1.0 - cfg.adam_beta2) * g * g;
      const double m_hat = mi[j] / bc1;
      const double v_hat = vi[j] / bc2;
      b.value[j] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct EpochRow {
  int epoch = 0;
  double loss = 0.0, bpr = 0.0, align = 0.0, adapter = 0.0, fusion = 0.0, l2 = 0.0;
  double rec10 = 0.0, rec20 = 0.0, ndcg10 = 0.0, ndcg20 = 0.0;
  Vector mean_alpha;
};

inline std::string epoch_log_header() {
  return "epoch\tloss\tbpr\talign\tadapter\tfusion\tl2\tvalid_rec@10\tvalid_rec@20\t"
         "valid_ndcg@10\tvalid_ndcg@20\tmean_alpha_per_modality";
}

inline std::string format_epoch_row(const EpochRow& r) {
  std::ostringstream out;
  out << r.epoch;
  for (double v : {r.loss, r.bpr, r.align, r.adapter, r.fusion, r.l2, r.rec10, r.rec20,
                   r.ndcg10, r.ndcg20})
    out << '\t' << data::format_double(v);
  out << '\t';
  for (std::size_t m = 0; m < r.mean_alpha.size(); ++m) {
    if (m) out << ',';
    out << data::format_double(r.mean_alpha[m]);
  }
  return out.str();
}

struct TrainResult {
  ModelParams params;  // best-validation parameters
  AdamState adam;
  std::vector<EpochRow> log;
  int best_epoch = 0;
  double best_rec20 = 0.0;
  bool diverged = false;
  eval::RankingResult test_result;
};

// Full training run. The split must already be performed; all randomness is
// derived from cfg.seed via named streams, so a run is a pure function of
// (config, data).
inline TrainResult train(const ModelConfig& cfg, const data::InteractionSet& interactions,
                         const data::ModalityFeatureTable& features) {
  cfg.validate();
  if (!interactions.split_done) throw std::logic_error("train: split not performed");
  if (interactions.train_records.empty()) throw DataError("train: no training records");

  const data::FeatureView view = data::resolve_features(interactions, features);

  TrainResult result;
  result.params =
      model::build_model(cfg, features.modalities, features.dims, interactions.user_count());
  result.adam.init(result.params);

  // Best-so-far snapshot; epochs == 0 keeps the initialization.
  std::vector<Vector> best_values = result.params.snapshot_values();
  result.best_epoch = 0;
  result.best_rec20 = -1.0;

  Rng sampling = fork_stream(cfg.seed, "sampling");
  const int batches_per_epoch = static_cast<int>(
      (interactions.train_records.size() + cfg.batch_size - 1) / cfg.batch_size);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::vector<Vector> epoch_start = result.params.snapshot_values();
    EpochRow row;
    row.epoch = epoch;
    row.mean_alpha.assign(result.params.modality_count(), 0.0);
    int alpha_batches = 0;
    bool nan_hit = false;

    for (int b = 0; b < batches_per_epoch; ++b) {
      const data::TripletBatch batch =
          data::sample_triplets(interactions, cfg.batch_size, sampling);
      num::Tape tape;
      const std::vector<num::Node> blocks = result.params.stage(tape);
      model::LossBreakdown breakdown;
      num::Node total;
      try {
        model::BatchGraph graph =
            model::build_batch_graph(tape, result.params, blocks, batch, view);
        breakdown = graph.breakdown;
        total = graph.total;
      } catch (const std::invalid_argument&) {
        // Exploded parameters surface as non-finite intermediates (the
        // kernels reject them); treat like a NaN loss.
        nan_hit = true;
        break;
      }
      if (!std::isfinite(breakdown.total)) {
        nan_hit = true;
        break;
      }
      tape.backward(total);
      result.params.collect_grads(tape, blocks);
      adam_step(result.params, result.adam);

      row.loss += breakdown.total;
      row.bpr += breakdown.bpr_mean;
      row.align += breakdown.align_mean;
      row.adapter += breakdown.adapter_kl;
      row.fusion += breakdown.fusion_kl;
      row.l2 += breakdown.l2;
      if (!breakdown.mean_alpha.empty() && std::isfinite(breakdown.mean_alpha[0])) {
        for (std::size_t m = 0; m < row.mean_alpha.size(); ++m)
          row.mean_alpha[m] += breakdown.mean_alpha[m];
        ++alpha_batches;
      }
    }

    if (nan_hit) {
      // Divergence: restore the last finished epoch and stop.
      result.params.restore_values(epoch_start);
      result.diverged = true;
      log_warn("training diverged at epoch " + std::to_string(epoch) +
               "; keeping last good parameters");
      break;
    }

    const double inv_b = 1.0 / static_cast<double>(batches_per_epoch);
    row.loss *= inv_b;
    row.bpr *= inv_b;
    row.align *= inv_b;
    row.adapter *= inv_b;
    row.fusion *= inv_b;
    row.l2 *= inv_b;
    if (alpha_batches > 0)
      for (double& v : row.mean_alpha) v /= static_cast<double>(alpha_batches);
    else
      row.mean_alpha.assign(result.params.modality_count(),
                            std::numeric_limits<double>::quiet_NaN());

    const eval::RankingResult valid =
        eval::evaluate(result.params, interactions, view, data::Partition::kValidCold, {10, 20});
    row.rec10 = valid.recall[0];
    row.rec20 = valid.recall[1];
    row.ndcg10 = valid.ndcg[0];
    row.ndcg20 = valid.ndcg[1];
    result.log.push_back(row);

    if (row.rec20 > result.best_rec20) {  // ties keep the earlier epoch
      result.best_rec20 = row.rec20;
      result.best_epoch = epoch;
      best_values = result.params.snapshot_values();
    }
    log_debug("epoch " + std::to_string(epoch) + " loss " + std::to_string(row.loss) +
              " valid rec@20 " + std::to_string(row.rec20));
  }

  result.params.restore_values(best_values);
  result.test_result = eval::evaluate(result.params, interactions, view,
                                      data::Partition::kTestCold, {10, 20});
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint: magic, version, config text, modality metadata, data hash,
// parameter blocks in declared order, trailing FNV-1a checksum.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_double(std::string& out, double d) {
  std::uint64_t bits;
  static_assert(sizeof(bits) == sizeof(d));
  std::memcpy(&bits, &d, sizeof(bits));
  put_u64(out, bits);
}
inline void put_string(std::string& out, const std::string& s) {
  put_u64(out, s.size());
  out += s;
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw DataError("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(
        static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(
        static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
  }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

inline constexpr char kMagic[9] = "MAMEXCP1";

}  // namespace detail

inline void save_checkpoint(const ModelParams& params, std::uint64_t data_hash,
                            const std::filesystem::path& path) {
  std::string buf;
  buf.append(detail::kMagic, 8);
  detail::put_u32(buf, 1);  // format version
  detail::put_string(buf, params.cfg.serialize());
  detail::put_u32(buf, static_cast<std::uint32_t>(params.modality_count()));
  for (int m = 0; m < params.modality_count(); ++m) {
    detail::put_string(buf, params.modalities[m]);
    detail::put_u32(buf, static_cast<std::uint32_t>(params.feat_dims[m]));
  }
  detail::put_u32(buf, static_cast<std::uint32_t>(params.n_users));
  detail::put_u64(buf, data_hash);
  detail::put_u32(buf, static_cast<std::uint32_t>(params.blocks.size()));
  for (const ParamBlock& b : params.blocks) {
    detail::put_string(buf, b.name);
    detail::put_u32(buf, static_cast<std::uint32_t>(b.rows));
    detail::put_u32(buf, static_cast<std::uint32_t>(b.cols));
    for (double v : b.value) detail::put_double(buf, v);
  }
  detail::put_u64(buf, fnv1a64(buf));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

struct Checkpoint {
  ModelParams params;
  std::uint64_t data_hash = 0;
};

// Loads and verifies a checkpoint. When `expected` is given, structural
// config fields must match or the load is refused with an explicit diff.
inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const ModelConfig* expected = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  if (buf.size() < 16 || buf.compare(0, 8, detail::kMagic, 8) != 0)
    throw DataError("not a checkpoint file (bad magic): " + path.string());
  // Verify trailing checksum over everything before it.
  const std::string body = buf.substr(0, buf.size() - 8);
  detail::Reader tail{buf, buf.size() - 8};
  if (fnv1a64(body) != tail.u64())
    throw DataError("checkpoint integrity check failed: " + path.string());

  detail::Reader r{body, 8};
  const std::uint32_t version = r.u32();
  if (version != 1)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  const ModelConfig cfg = ModelConfig::parse_string(r.str());

  if (expected != nullptr) {
    std::vector<std::string> diffs;
    const auto check = [&](const std::string& key, auto got, auto want) {
      if (got != want) {
        std::ostringstream d;
        d << key << ": checkpoint=" << got << " requested=" << want;
        diffs.push_back(d.str());
      }
    };
    check("d", cfg.d, expected->d);
    check("num_experts", cfg.num_experts, expected->num_experts);
    check("top_k", cfg.top_k, expected->top_k);
    check("variant", std::string(model::variant_name(cfg.variant)),
          std::string(model::variant_name(expected->variant)));
    check("expert_bias", cfg.expert_bias, expected->expert_bias);
    if (!diffs.empty()) {
      std::string msg = "checkpoint/config mismatch:";
      for (const std::string& d : diffs) msg += "\n  " + d;
      throw ConfigError(msg);
    }
  }

  const std::uint32_t n_modalities = r.u32();
  std::vector<std::string> modalities;
  std::vector<int> dims;
  for (std::uint32_t m = 0; m < n_modalities; ++m) {
    modalities.push_back(r.str());
    dims.push_back(static_cast<int>(r.u32()));
  }
  const int n_users = static_cast<int>(r.u32());

  Checkpoint ck;
  ck.data_hash = r.u64();
  ck.params = model::build_model(cfg, modalities, dims, n_users);

  const std::uint32_t n_blocks = r.u32();
  if (n_blocks != ck.params.blocks.size())
    throw DataError("checkpoint block count mismatch");
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    ParamBlock& b = ck.params.blocks[i];
    const std::string name = r.str();
    const int rows = static_cast<int>(r.u32());
    const int cols = static_cast<int>(r.u32());
    if (name != b.name || rows != b.rows || cols != b.cols)
      throw DataError("checkpoint block `" + name + "` does not match expected layout `" +
                      b.name + "`");
    for (double& v : b.value) v = r.f64();
  }
  return ck;
}

}  // namespace mamex::train
