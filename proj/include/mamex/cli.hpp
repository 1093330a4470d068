// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the `mamex` binary: dataset synthesis,
// standalone splitting, training, evaluation, and ablation sweeps. Every
// command is a pure function of (inputs, seed); the run manifest records
// enough to reproduce any run.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mamex/data.hpp"
#include "mamex/errors.hpp"
#include "mamex/evaluation.hpp"
#include "mamex/log.hpp"
#include "mamex/model.hpp"
#include "mamex/training.hpp"

namespace mamex::cli {

namespace fs = std::filesystem;
using model::ModelConfig;

inline constexpr const char* kEngineVersion = "1.0.0";

// Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime.
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitRuntime = 4;

inline std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Run manifest. The manifest hash covers only the reproducibility-relevant
// fields; the timestamp is informational.
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string command;
  std::string config_text;
  std::uint64_t data_hash = 0;
  std::vector<std::string> outputs;

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a64(kEngineVersion);
    h = fnv1a64(command, h);
    h = fnv1a64(config_text, h);
    h = fnv1a64(hex64(data_hash), h);
    return h;
  }

  void write(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest: " + path.string());
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    out << "engine_version = " << kEngineVersion << '\n'
        << "command = " << command << '\n'
        << "data_hash = " << hex64(data_hash) << '\n'
        << "manifest_hash = " << hex64(hash()) << '\n'
        << "timestamp = " << stamp << '\n';
    for (const std::string& o : outputs) out << "output = " << o << '\n';
    out << "[config]\n" << config_text;
  }
};

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthOptions {
  data::SyntheticSpec spec;
  std::string out_dir;
  bool force = false;
};

inline void run_synth(const SynthOptions& opt) {
  const fs::path dir(opt.out_dir);
  if (fs::exists(dir) && !fs::is_empty(dir) && !opt.force)
    throw DataError("output directory " + dir.string() +
                    " is not empty; pass --force to overwrite");
  const data::SyntheticData d = data::generate_synthetic(opt.spec);
  data::write_dataset(d.interactions, d.features, dir);

  RunManifest manifest;
  manifest.command = "synth";
  std::ostringstream cfg;
  cfg << "n_users = " << opt.spec.n_users << '\n'
      << "n_items = " << opt.spec.n_items << '\n'
      << "dim = " << opt.spec.dim << '\n'
      << "text_signal = " << data::format_double(opt.spec.text_signal) << '\n'
      << "image_signal = " << data::format_double(opt.spec.image_signal) << '\n'
      << "interactions_per_user = " << opt.spec.interactions_per_user << '\n'
      << "seed = " << opt.spec.seed << '\n';
  manifest.config_text = cfg.str();
  manifest.data_hash = data::dataset_hash(dir);
  manifest.outputs = {"interactions.tsv", "manifest.txt"};
  for (const std::string& m : d.features.modalities)
    manifest.outputs.push_back("features_" + m + ".tsv");
  manifest.write(dir / "run_manifest.txt");
  log_info("wrote synthetic dataset to " + dir.string() + " (hash " +
           hex64(manifest.data_hash) + ")");
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

struct SplitOptions {
  std::string data_dir;
  std::string out_dir;  // defaults to data_dir
  std::uint64_t seed = 1;
};

inline void run_split(const SplitOptions& opt) {
  data::Dataset ds = data::load_dataset(opt.data_dir);
  data::cold_start_split(ds.interactions, {0.8, 0.1, 0.1}, opt.seed);
  const fs::path dir(opt.out_dir.empty() ? opt.data_dir : opt.out_dir);
  fs::create_directories(dir);
  data::write_split_files(ds.interactions, dir);
  log_info("split " + std::to_string(ds.interactions.item_count()) + " items 8:1:1 (seed " +
           std::to_string(opt.seed) + ") into " + dir.string());
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string config_path;  // empty -> defaults
  std::string data_dir;
  std::string out_dir;
  std::optional<std::uint64_t> seed;     // overrides config
  std::optional<std::string> variant;    // overrides config
};

inline ModelConfig load_config(const std::string& path) {
  if (path.empty()) return ModelConfig{};
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  return ModelConfig::parse(in);
}

// Shared by train and ablate so both produce identical numbers for identical
// (config, data).
inline train::TrainResult train_on_dataset(const ModelConfig& cfg, data::Dataset& ds) {
  data::cold_start_split(ds.interactions, {0.8, 0.1, 0.1}, cfg.seed);
  return train::train(cfg, ds.interactions, ds.features);
}

struct TrainOutcome {
  train::TrainResult result;
  ModelConfig cfg;
  std::uint64_t data_hash = 0;
  fs::path epoch_log, checkpoint, report, manifest;
};

inline TrainOutcome run_train(const TrainOptions& opt) {
  ModelConfig cfg = load_config(opt.config_path);
  if (opt.seed) cfg.seed = *opt.seed;
  if (opt.variant) cfg.variant = model::parse_variant(*opt.variant);
  cfg.validate();

  data::Dataset ds = data::load_dataset(opt.data_dir);
  const std::uint64_t hash = data::dataset_hash(opt.data_dir);

  const fs::path out(opt.out_dir);
  fs::create_directories(out);

  TrainOutcome outcome;
  outcome.cfg = cfg;
  outcome.data_hash = hash;
  outcome.result = train_on_dataset(cfg, ds);
  data::write_split_files(ds.interactions, out);

  outcome.epoch_log = out / "epoch_log.tsv";
  {
    std::ofstream log_out(outcome.epoch_log);
    if (!log_out) throw DataError("cannot write " + outcome.epoch_log.string());
    log_out << train::epoch_log_header() << '\n';
    for (const train::EpochRow& row : outcome.result.log)
      log_out << train::format_epoch_row(row) << '\n';
  }

  outcome.checkpoint = out / "checkpoint.bin";
  train::save_checkpoint(outcome.result.params, hash, outcome.checkpoint);

  outcome.report = out / "report.tsv";
  {
    std::ofstream rep(outcome.report);
    // The config echo reflects the weights actually optimized (no_align
    // zeroes lambda1).
    rep << "# engine mamex " << kEngineVersion << '\n';
    rep << "# effective_lambda1 = " << data::format_double(cfg.effective_lambda1()) << '\n';
    rep << "# best_epoch = " << outcome.result.best_epoch << '\n';
    rep << eval::report_tsv(outcome.result.test_result, model::variant_name(cfg.variant),
                            ds.features.modalities);
  }

  RunManifest manifest;
  manifest.command = "train";
  manifest.config_text = cfg.serialize();
  manifest.data_hash = hash;
  manifest.outputs = {"epoch_log.tsv", "checkpoint.bin", "report.tsv",
                      "split_train.txt", "split_valid.txt", "split_test.txt"};
  outcome.manifest = out / "run_manifest.txt";
  manifest.write(outcome.manifest);

  const eval::RankingResult& t = outcome.result.test_result;
  std::cout << "test Rec@10 " << t.recall[0] << "  Rec@20 " << t.recall[1] << "  NDCG@10 "
            << t.ndcg[0] << "  NDCG@20 " << t.ndcg[1] << "  (best epoch "
            << outcome.result.best_epoch << ")\n";
  return outcome;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOptions {
  std::string checkpoint_path;
  std::string data_dir;
  std::string partition = "test";  // "valid" or "test"
  std::string out_dir;             // optional; report printed regardless
};

inline eval::RankingResult run_eval(const EvalOptions& opt) {
  const train::Checkpoint ck = train::load_checkpoint(opt.checkpoint_path);
  const std::uint64_t hash = data::dataset_hash(opt.data_dir);
  if (hash != ck.data_hash)
    throw DataError("data/checkpoint mismatch: checkpoint was trained on data hash " +
                    hex64(ck.data_hash) + " but " + opt.data_dir + " hashes to " + hex64(hash));

  data::Partition partition;
  if (opt.partition == "valid") partition = data::Partition::kValidCold;
  else if (opt.partition == "test") partition = data::Partition::kTestCold;
  else throw ConfigError("unknown partition `" + opt.partition + "` (use valid|test)");

  data::Dataset ds = data::load_dataset(opt.data_dir);
  // Re-derive the exact training-time split from the checkpointed seed.
  data::cold_start_split(ds.interactions, {0.8, 0.1, 0.1}, ck.params.cfg.seed);
  const data::FeatureView view = data::resolve_features(ds.interactions, ds.features);
  const eval::RankingResult result =
      eval::evaluate(ck.params, ds.interactions, view, partition, {10, 20});

  const std::string table = eval::report_tsv(result, model::variant_name(ck.params.cfg.variant),
                                             ds.features.modalities);
  std::cout << table;
  if (!opt.out_dir.empty()) {
    fs::create_directories(opt.out_dir);
    std::ofstream rep(fs::path(opt.out_dir) / "report.tsv");
    rep << table;
    // per-user dump for debugging
    std::ofstream dump(fs::path(opt.out_dir) / "per_user.tsv");
    dump << "user\tuntrained";
    for (int k : result.ks) dump << "\trec@" << k;
    for (int k : result.ks) dump << "\tndcg@" << k;
    dump << '\n';
    for (const auto& pu : result.per_user) {
      dump << ds.interactions.user_ids[pu.user] << '\t' << (pu.untrained ? 1 : 0);
      for (double v : pu.recall) dump << '\t' << data::format_double(v);
      for (double v : pu.ndcg) dump << '\t' << data::format_double(v);
      dump << '\n';
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateOptions {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  int seeds = 5;
  std::vector<std::string> variants;  // empty -> the full published sweep
};

struct AblateRow {
  std::string variant;
  double rec20_mean = 0, rec20_std = 0;
  double ndcg20_mean = 0, ndcg20_std = 0;
  std::vector<double> rec20_runs, ndcg20_runs;
};

struct AblateOutcome {
  std::vector<AblateRow> rows;
  fs::path table_path;
};

inline AblateOutcome run_ablate(const AblateOptions& opt) {
  if (opt.seeds < 1) throw ConfigError("--seeds must be >= 1");
  const ModelConfig base = load_config(opt.config_path);

  std::vector<std::string> variants = opt.variants;
  if (variants.empty()) {
    // Component ablations plus the router comparison, deduplicated.
    variants = {"full", "no_moe", "no_align", "no_mmf", "joint_router", "mod_specific_router"};
  }

  const fs::path out(opt.out_dir);
  fs::create_directories(out);
  std::ofstream runs_out(out / "ablation_runs.tsv");
  runs_out << "variant\tseed\trec@20\tndcg@20\n";

  AblateOutcome outcome;
  for (const std::string& name : variants) {
    AblateRow row;
    row.variant = name;
    for (int s = 0; s < opt.seeds; ++s) {
      ModelConfig cfg = base;
      cfg.variant = model::parse_variant(name);
      cfg.seed = base.seed + static_cast<std::uint64_t>(s);
      data::Dataset ds = data::load_dataset(opt.data_dir);
      const train::TrainResult r = train_on_dataset(cfg, ds);
      const double rec20 = r.test_result.recall[1];
      const double ndcg20 = r.test_result.ndcg[1];
      row.rec20_runs.push_back(rec20);
      row.ndcg20_runs.push_back(ndcg20);
      runs_out << name << '\t' << cfg.seed << '\t' << data::format_double(rec20) << '\t'
               << data::format_double(ndcg20) << '\n';
      log_info("ablate " + name + " seed " + std::to_string(cfg.seed) + ": rec@20 " +
               std::to_string(rec20));
    }
    const auto stats = [](const std::vector<double>& xs) {
      double mean = 0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      double var = 0;
      for (double x : xs) var += (x - mean) * (x - mean);
      if (xs.size() > 1) var /= static_cast<double>(xs.size() - 1);
      return std::pair<double, double>(mean, std::sqrt(var));
    };
    std::tie(row.rec20_mean, row.rec20_std) = stats(row.rec20_runs);
    std::tie(row.ndcg20_mean, row.ndcg20_std) = stats(row.ndcg20_runs);
    outcome.rows.push_back(std::move(row));
  }

  outcome.table_path = out / "ablation.tsv";
  std::ofstream table(outcome.table_path);
  table << "variant\trec@20_mean\trec@20_std\tndcg@20_mean\tndcg@20_std\n";
  std::cout << "variant\trec@20 (mean±std)\tndcg@20 (mean±std)\n";
  for (const AblateRow& row : outcome.rows) {
    table << row.variant << '\t' << data::format_double(row.rec20_mean) << '\t'
          << data::format_double(row.rec20_std) << '\t' << data::format_double(row.ndcg20_mean)
          << '\t' << data::format_double(row.ndcg20_std) << '\n';
    char line[160];
    std::snprintf(line, sizeof(line), "%s\t%.4f±%.4f\t%.4f±%.4f", row.variant.c_str(),
                  row.rec20_mean, row.rec20_std, row.ndcg20_mean, row.ndcg20_std);
    std::cout << line << '\n';
  }

  RunManifest manifest;
  manifest.command = "ablate";
  manifest.config_text = base.serialize();
  manifest.data_hash = data::dataset_hash(opt.data_dir);
  manifest.outputs = {"ablation.tsv", "ablation_runs.tsv"};
  manifest.write(out / "run_manifest.txt");
  return outcome;
}

// Maps exceptions to the documented exit codes.
template <typename Fn>
inline int guarded(Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace mamex::cli
