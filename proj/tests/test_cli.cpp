// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "mamex/cli.hpp"

using namespace mamex;
using namespace mamex::cli;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mamex_cli_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SynthOptions tiny_synth(const fs::path& out) {
  SynthOptions opt;
  opt.spec.n_users = 25;
  opt.spec.n_items = 40;
  opt.spec.dim = 6;
  opt.spec.text_signal = 1.0;
  opt.spec.image_signal = 0.5;
  opt.spec.interactions_per_user = 6;
  opt.spec.seed = 7;
  opt.out_dir = out.string();
  return opt;
}

model::ModelConfig tiny_config() {
  model::ModelConfig cfg;
  cfg.d = 6;
  cfg.num_experts = 2;
  cfg.top_k = 1;
  cfg.batch_size = 32;
  cfg.epochs = 2;
  cfg.seed = 7;
  return cfg;
}

fs::path write_config(const fs::path& dir, const model::ModelConfig& cfg) {
  const fs::path p = dir / "config.txt";
  std::ofstream out(p);
  out << cfg.serialize();
  return p;
}

}  // namespace

TEST_CASE("synth writes a loadable dataset and refuses overwrites", "[cli]") {
  const fs::path out = temp_dir("synth");
  run_synth(tiny_synth(out));
  CHECK(fs::exists(out / "interactions.tsv"));
  CHECK(fs::exists(out / "features_image.tsv"));
  CHECK(fs::exists(out / "features_text.tsv"));
  CHECK(fs::exists(out / "manifest.txt"));
  CHECK(fs::exists(out / "run_manifest.txt"));

  SECTION("round-trips through the loaders") {
    const data::Dataset ds = data::load_dataset(out);
    CHECK(ds.interactions.records.size() == 25 * 6);
    CHECK(ds.features.modality_count() == 2);
  }
  SECTION("same seed twice gives identical checksums") {
    const fs::path out2 = temp_dir("synth2");
    run_synth(tiny_synth(out2));
    CHECK(data::dataset_hash(out) == data::dataset_hash(out2));
  }
  SECTION("non-empty out dir without --force is refused") {
    CHECK_THROWS_AS(run_synth(tiny_synth(out)), DataError);
    SynthOptions forced = tiny_synth(out);
    forced.force = true;
    CHECK_NOTHROW(run_synth(forced));
  }
  SECTION("n_items = 0 is a parameter error") {
    SynthOptions bad = tiny_synth(temp_dir("synth_bad"));
    bad.spec.n_items = 0;
    CHECK_THROWS_AS(run_synth(bad), std::invalid_argument);
  }
}

TEST_CASE("split command writes audit files", "[cli]") {
  const fs::path data_dir = temp_dir("split_data");
  run_synth(tiny_synth(data_dir));

  SplitOptions opt;
  opt.data_dir = data_dir.string();
  opt.out_dir = (data_dir / "splits").string();
  opt.seed = 3;
  run_split(opt);
  CHECK(fs::exists(fs::path(opt.out_dir) / "split_train.txt"));
  CHECK(fs::exists(fs::path(opt.out_dir) / "split_valid.txt"));
  CHECK(fs::exists(fs::path(opt.out_dir) / "split_test.txt"));

  // deterministic: rerun produces identical files
  const std::string before = slurp(fs::path(opt.out_dir) / "split_test.txt");
  run_split(opt);
  CHECK(slurp(fs::path(opt.out_dir) / "split_test.txt") == before);
}

TEST_CASE("train command produces a reproducible run", "[cli]") {
  const fs::path data_dir = temp_dir("train_data");
  run_synth(tiny_synth(data_dir));
  const fs::path cfg_path = write_config(data_dir, tiny_config());

  TrainOptions opt;
  opt.config_path = cfg_path.string();
  opt.data_dir = data_dir.string();

  const fs::path out1 = temp_dir("train_out1");
  opt.out_dir = out1.string();
  const TrainOutcome first = run_train(opt);
  CHECK(fs::exists(first.epoch_log));
  CHECK(fs::exists(first.checkpoint));
  CHECK(fs::exists(first.report));
  CHECK(fs::exists(first.manifest));

  SECTION("rerun with the same manifest is bitwise identical") {
    const fs::path out2 = temp_dir("train_out2");
    opt.out_dir = out2.string();
    run_train(opt);
    CHECK(slurp(out1 / "epoch_log.tsv") == slurp(out2 / "epoch_log.tsv"));
    CHECK(slurp(out1 / "report.tsv") == slurp(out2 / "report.tsv"));
    CHECK(slurp(out1 / "checkpoint.bin") == slurp(out2 / "checkpoint.bin"));
  }
  SECTION("no_align echoes an effective lambda1 of zero") {
    TrainOptions ablated = opt;
    ablated.variant = "no_align";
    ablated.out_dir = temp_dir("train_noalign").string();
    run_train(ablated);
    const std::string report = slurp(fs::path(ablated.out_dir) / "report.tsv");
    CHECK(report.find("effective_lambda1 = 0\n") != std::string::npos);
    CHECK(report.find("no_align") != std::string::npos);
  }
  SECTION("invalid config key is named") {
    const fs::path bad = data_dir / "bad.txt";
    std::ofstream bad_out(bad);
    bad_out << "d = 6\nnot_a_key = 3\n";
    bad_out.close();
    TrainOptions broken = opt;
    broken.config_path = bad.string();
    CHECK_THROWS_WITH(run_train(broken), Catch::Matchers::ContainsSubstring("not_a_key"));
  }
}

TEST_CASE("eval command is consistent with training and guards hashes", "[cli]") {
  const fs::path data_dir = temp_dir("eval_data");
  run_synth(tiny_synth(data_dir));
  const fs::path cfg_path = write_config(data_dir, tiny_config());

  TrainOptions topt;
  topt.config_path = cfg_path.string();
  topt.data_dir = data_dir.string();
  topt.out_dir = temp_dir("eval_train_out").string();
  const TrainOutcome trained = run_train(topt);

  EvalOptions eopt;
  eopt.checkpoint_path = trained.checkpoint.string();
  eopt.data_dir = data_dir.string();
  eopt.partition = "test";

  SECTION("eval matches the training-time test report and is repeatable") {
    const eval::RankingResult a = run_eval(eopt);
    const eval::RankingResult b = run_eval(eopt);
    CHECK(a.recall == b.recall);
    CHECK(a.recall == trained.result.test_result.recall);
    CHECK(a.ndcg == trained.result.test_result.ndcg);
  }
  SECTION("partition candidate counts match the split") {
    const eval::RankingResult test = run_eval(eopt);
    EvalOptions vopt = eopt;
    vopt.partition = "valid";
    const eval::RankingResult valid = run_eval(vopt);

    data::Dataset ds = data::load_dataset(data_dir.string());
    data::cold_start_split(ds.interactions, {0.8, 0.1, 0.1}, tiny_config().seed);
    CHECK(test.candidates ==
          static_cast<int>(ds.interactions.items_in(data::Partition::kTestCold).size()));
    CHECK(valid.candidates ==
          static_cast<int>(ds.interactions.items_in(data::Partition::kValidCold).size()));
    CHECK(test.partition != valid.partition);
  }
  SECTION("corrupted checkpoint is an integrity error") {
    std::string bytes = slurp(trained.checkpoint);
    bytes[bytes.size() / 3] ^= 0x10;
    const fs::path bad = fs::path(topt.out_dir) / "corrupt.bin";
    std::ofstream out(bad, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.close();
    EvalOptions bopt = eopt;
    bopt.checkpoint_path = bad.string();
    CHECK_THROWS_AS(run_eval(bopt), DataError);
  }
  SECTION("data hash mismatch is refused with both hashes") {
    const fs::path other = temp_dir("eval_other_data");
    SynthOptions different = tiny_synth(other);
    different.spec.seed = 99;
    run_synth(different);
    EvalOptions mopt = eopt;
    mopt.data_dir = other.string();
    CHECK_THROWS_WITH(run_eval(mopt), Catch::Matchers::ContainsSubstring("mismatch"));
  }
  SECTION("unknown partition is a config error") {
    EvalOptions bad = eopt;
    bad.partition = "nope";
    CHECK_THROWS_AS(run_eval(bad), ConfigError);
  }
}

TEST_CASE("ablate trains the requested variants consistently", "[cli]") {
  const fs::path data_dir = temp_dir("ablate_data");
  run_synth(tiny_synth(data_dir));
  model::ModelConfig cfg = tiny_config();
  cfg.epochs = 1;
  const fs::path cfg_path = write_config(data_dir, cfg);

  AblateOptions opt;
  opt.config_path = cfg_path.string();
  opt.data_dir = data_dir.string();
  opt.out_dir = temp_dir("ablate_out").string();
  opt.seeds = 2;
  opt.variants = {"full", "no_mmf"};
  const AblateOutcome outcome = run_ablate(opt);

  SECTION("exactly the requested rows, in order") {
    REQUIRE(outcome.rows.size() == 2);
    CHECK(outcome.rows[0].variant == "full");
    CHECK(outcome.rows[1].variant == "no_mmf");
    CHECK(outcome.rows[0].rec20_runs.size() == 2);
  }
  SECTION("per-variant numbers equal an individually run train with that seed") {
    TrainOptions topt;
    topt.config_path = cfg_path.string();
    topt.data_dir = data_dir.string();
    topt.out_dir = temp_dir("ablate_single").string();
    topt.seed = cfg.seed + 1;  // second ablate seed
    topt.variant = "no_mmf";
    const TrainOutcome single = run_train(topt);
    CHECK(single.result.test_result.recall[1] ==
          Catch::Approx(outcome.rows[1].rec20_runs[1]).margin(0.0));
  }
  SECTION("seeds below 1 rejected") {
    AblateOptions bad = opt;
    bad.seeds = 0;
    CHECK_THROWS_AS(run_ablate(bad), ConfigError);
  }
}

TEST_CASE("guarded maps exception classes to exit codes", "[cli]") {
  CHECK(guarded([] {}) == 0);
  CHECK(guarded([] { throw ConfigError("x"); }) == kExitConfig);
  CHECK(guarded([] { throw DataError("x"); }) == kExitData);
  CHECK(guarded([] { throw std::runtime_error("x"); }) == kExitRuntime);
}

TEST_CASE("run manifest hash ignores timestamps", "[cli]") {
  RunManifest a;
  a.command = "train";
  a.config_text = "d = 6\n";
  a.data_hash = 42;
  RunManifest b = a;
  CHECK(a.hash() == b.hash());
  b.data_hash = 43;
  CHECK(a.hash() != b.hash());
}
