// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mamex/adapter.hpp"
#include "mamex/rng.hpp"

using mamex::Rng;
using namespace mamex::num;
using namespace mamex::adapter;

namespace {

MoEAdapter random_adapter(Rng& rng, int num_experts, int top_k, int d_in, int d_out,
                          double scale = 0.5) {
  MoEAdapter a;
  a.num_experts = num_experts;
  a.top_k = top_k;
  a.gate_w = Matrix(num_experts, d_in);
  for (double& v : a.gate_w.a) v = scale * rng.gaussian();
  a.gate_b.assign(num_experts, 0.0);
  for (double& v : a.gate_b) v = scale * rng.gaussian();
  for (int k = 0; k < num_experts; ++k) {
    Matrix w(d_out, d_in);
    for (double& v : w.a) v = scale * rng.gaussian();
    a.expert_w.push_back(std::move(w));
    Vector b(d_out);
    for (double& v : b) v = scale * rng.gaussian();
    a.expert_b.push_back(std::move(b));
  }
  a.validate();
  return a;
}

// Independent scalar-loop oracle: recompute the whole adapter forward with
// nothing shared with the implementation besides std::exp.
Vector oracle_adapt(const MoEAdapter& a, const Vector& h) {
  const int K = a.num_experts;
  std::vector<double> logits(K, 0.0);
  for (int k = 0; k < K; ++k) {
    logits[k] = a.gate_b.empty() ? 0.0 : a.gate_b[k];
    for (int c = 0; c < a.gate_w.cols; ++c) logits[k] += a.gate_w.at(k, c) * h[c];
  }
  // top-k by value, ties to lower index
  std::vector<int> order(K);
  for (int k = 0; k < K; ++k) order[k] = k;
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    if (logits[x] != logits[y]) return logits[x] > logits[y];
    return x < y;
  });
  std::vector<int> sel(order.begin(), order.begin() + a.top_k);
  double denom = 0.0;
  for (int k : sel) denom += std::exp(logits[k]);
  Vector z(a.expert_w[0].rows, 0.0);
  for (int k : sel) {
    const double w = std::exp(logits[k]) / denom;
    for (int r = 0; r < a.expert_w[k].rows; ++r) {
      double o = a.expert_b[k].empty() ? 0.0 : a.expert_b[k][r];
      for (int c = 0; c < a.expert_w[k].cols; ++c) o += a.expert_w[k].at(r, c) * h[c];
      z[r] += w * o;
    }
  }
  return z;
}

}  // namespace

TEST_CASE("single identity expert passes features through", "[adapter]") {
  const int d = 4;
  MoEAdapter a;
  a.num_experts = 1;
  a.top_k = 1;
  a.gate_w = Matrix(1, d);
  a.gate_b = {0.3};
  Matrix eye(d, d);
  for (int i = 0; i < d; ++i) eye.at(i, i) = 1.0;
  a.expert_w = {eye};
  a.expert_b = {Vector(d, 0.0)};

  const Vector h = {1.0, -2.0, 0.5, 3.25};
  const AdapterOutput out = adapt(a, h);
  CHECK(out.z == h);
  CHECK(out.sparse_gate == Vector{1.0});
  CHECK(out.dense_gate == Vector{1.0});
  CHECK(out.selected == std::vector<int>{0});
}

TEST_CASE("uniform gate over constant experts averages them", "[adapter]") {
  MoEAdapter a;
  a.num_experts = 2;
  a.top_k = 2;
  a.gate_w = Matrix(2, 2);       // zero weights -> equal logits
  a.gate_b = {0.0, 0.0};
  a.expert_w = {Matrix(2, 2), Matrix(2, 2)};  // zero maps
  a.expert_b = {Vector{1.0, 0.0}, Vector{0.0, 1.0}};

  const AdapterOutput out = adapt(a, {0.7, -0.1});
  CHECK(out.z[0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(out.z[1] == Catch::Approx(0.5).margin(1e-15));
  CHECK(out.dense_gate[0] == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("random instances match the brute-force oracle", "[adapter]") {
  Rng rng(60601);
  for (int trial = 0; trial < 50; ++trial) {
    const MoEAdapter a = random_adapter(rng, 4, 2, 8, 8);
    Vector h(8);
    for (double& v : h) v = rng.gaussian();
    const AdapterOutput out = adapt(a, h);
    const Vector expected = oracle_adapt(a, h);
    for (int c = 0; c < 8; ++c) CHECK(std::abs(out.z[c] - expected[c]) < 1e-12);

    // routed set size and weight normalization
    CHECK(out.selected.size() == 2);
    double sum = 0.0;
    int nonzero = 0;
    for (double w : out.sparse_gate) {
      sum += w;
      if (w != 0.0) ++nonzero;
    }
    CHECK(nonzero == 2);
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("top_k equal to K reproduces the dense gate exactly", "[adapter]") {
  Rng rng(2213);
  for (int trial = 0; trial < 100; ++trial) {
    const MoEAdapter a = random_adapter(rng, 4, 4, 6, 6);
    Vector h(6);
    for (double& v : h) v = rng.gaussian();
    const AdapterOutput out = adapt(a, h);
    CHECK(out.sparse_gate == out.dense_gate);
  }
}

TEST_CASE("expert mixture is affine in h under a frozen gate", "[adapter]") {
  Rng rng(404);
  const MoEAdapter a = random_adapter(rng, 4, 2, 5, 5);
  Vector h0(5);
  for (double& v : h0) v = rng.gaussian();
  const AdapterOutput base = adapt(a, h0);

  for (int trial = 0; trial < 20; ++trial) {
    Vector h1(5), h2(5);
    for (double& v : h1) v = rng.gaussian();
    for (double& v : h2) v = rng.gaussian();
    const double lambda = rng.uniform();
    Vector hm(5);
    for (int c = 0; c < 5; ++c) hm[c] = lambda * h1[c] + (1.0 - lambda) * h2[c];

    const Vector z1 = expert_mixture(a, base.sparse_gate, base.selected, h1);
    const Vector z2 = expert_mixture(a, base.sparse_gate, base.selected, h2);
    const Vector zm = expert_mixture(a, base.sparse_gate, base.selected, hm);
    for (int c = 0; c < 5; ++c)
      CHECK(zm[c] == Catch::Approx(lambda * z1[c] + (1.0 - lambda) * z2[c]).margin(1e-12));
  }
}

TEST_CASE("adapter balance loss fixed points", "[adapter]") {
  SECTION("batch-uniform gates give zero") {
    std::vector<std::vector<Vector>> gates = {{{0.25, 0.25, 0.25, 0.25},
                                               {0.25, 0.25, 0.25, 0.25}}};
    CHECK(adapter_balance_loss(gates) == Catch::Approx(0.0).margin(1e-15));
  }
  SECTION("constant one-hot gates give ln K") {
    std::vector<std::vector<Vector>> gates = {{{1.0, 0.0, 0.0, 0.0},
                                               {1.0, 0.0, 0.0, 0.0},
                                               {1.0, 0.0, 0.0, 0.0}}};
    CHECK(adapter_balance_loss(gates) == Catch::Approx(1.3862943611198906).margin(1e-12));
  }
  SECTION("balance is over the batch mean, not per sample") {
    std::vector<std::vector<Vector>> gates = {{{1.0, 0.0}, {0.0, 1.0}}};
    CHECK(adapter_balance_loss(gates) == Catch::Approx(0.0).margin(1e-15));
  }
  SECTION("modalities sum") {
    std::vector<std::vector<Vector>> gates = {{{1.0, 0.0}}, {{1.0, 0.0}}};
    CHECK(adapter_balance_loss(gates) ==
          Catch::Approx(2.0 * 0.6931471805599453).margin(1e-12));
  }
  SECTION("empty batch rejected") {
    std::vector<std::vector<Vector>> gates = {{}};
    CHECK_THROWS_AS(adapter_balance_loss(gates), std::invalid_argument);
  }
}

TEST_CASE("balance loss decreases when mixing the mean toward uniform", "[adapter]") {
  Rng rng(88);
  for (int trial = 0; trial < 50; ++trial) {
    const int K = 2 + static_cast<int>(rng.below(6));
    Vector logits(K);
    for (double& v : logits) v = 2.0 * rng.gaussian();
    const Vector skewed = softmax(logits);
    const double lambda = rng.uniform();
    Vector mixed(K);
    for (int k = 0; k < K; ++k) mixed[k] = lambda * skewed[k] + (1.0 - lambda) / K;
    std::vector<std::vector<Vector>> base = {{skewed}};
    std::vector<std::vector<Vector>> toward = {{mixed}};
    CHECK(adapter_balance_loss(toward) <= adapter_balance_loss(base) + 1e-12);
  }
}

TEST_CASE("joint router follows the same contract on concatenated input", "[adapter]") {
  Rng rng(7007);
  const MoEAdapter shared = random_adapter(rng, 4, 2, 12, 6);  // 2 modalities x d=6
  Vector h_img(6), h_txt(6);
  for (double& v : h_img) v = rng.gaussian();
  for (double& v : h_txt) v = rng.gaussian();
  Vector h_all = h_img;
  h_all.insert(h_all.end(), h_txt.begin(), h_txt.end());

  const AdapterOutput out = adapt_joint_router(shared, h_all);
  const Vector expected = oracle_adapt(shared, h_all);
  for (int c = 0; c < 6; ++c) CHECK(std::abs(out.z[c] - expected[c]) < 1e-12);
  CHECK(out.z.size() == 6);
  CHECK(out.selected.size() == 2);
}

TEST_CASE("shared experts are shared across modality routers", "[adapter]") {
  Rng rng(515);
  SharedExperts experts;
  for (int k = 0; k < 4; ++k) {
    Matrix w(5, 5);
    for (double& v : w.a) v = 0.5 * rng.gaussian();
    experts.w.push_back(std::move(w));
    Vector b(5);
    for (double& v : b) v = 0.5 * rng.gaussian();
    experts.b.push_back(std::move(b));
  }
  ModalityRouter r_img{"image", 2, Matrix(4, 5), Vector(4, 0.0)};
  ModalityRouter r_txt{"text", 2, Matrix(4, 5), Vector(4, 0.0)};
  for (double& v : r_img.gate_w.a) v = 0.5 * rng.gaussian();
  r_txt.gate_w = r_img.gate_w;  // identical gates for the sharing check

  Vector h(5);
  for (double& v : h) v = rng.gaussian();

  SECTION("identical inputs and gates give identical z") {
    const AdapterOutput a = adapt_shared_experts(r_img, experts, h);
    const AdapterOutput b = adapt_shared_experts(r_txt, experts, h);
    CHECK(a.z == b.z);
  }
  SECTION("mutating a shared expert changes every modality's output") {
    const AdapterOutput before_img = adapt_shared_experts(r_img, experts, h);
    const AdapterOutput before_txt = adapt_shared_experts(r_txt, experts, h);
    // perturb an expert that is certainly selected for this h
    const int hit = before_img.selected[0];
    experts.b[hit][0] += 1.0;
    const AdapterOutput after_img = adapt_shared_experts(r_img, experts, h);
    const AdapterOutput after_txt = adapt_shared_experts(r_txt, experts, h);
    CHECK(after_img.z != before_img.z);
    CHECK(after_txt.z != before_txt.z);
  }
  SECTION("random instance matches the oracle") {
    MoEAdapter flat;
    flat.num_experts = 4;
    flat.top_k = 2;
    flat.gate_w = r_img.gate_w;
    flat.gate_b = r_img.gate_b;
    flat.expert_w = experts.w;
    flat.expert_b = experts.b;
    const AdapterOutput got = adapt_shared_experts(r_img, experts, h);
    const Vector expected = oracle_adapt(flat, h);
    for (int c = 0; c < 5; ++c) CHECK(std::abs(got.z[c] - expected[c]) < 1e-12);
  }
}

TEST_CASE("tape-built adapter matches plain adapt and finite differences", "[adapter]") {
  Rng rng(31415);
  const int d = 6, K = 4, topk = 2;
  const MoEAdapter a = random_adapter(rng, K, topk, d, d);
  Vector h(d);
  for (double& v : h) v = rng.gaussian();

  ParamBlock gw = ParamBlock::make("gate_w", K, d);
  gw.value = a.gate_w.a;
  ParamBlock gb = ParamBlock::make("gate_b", K, 1);
  gb.value = a.gate_b;
  std::vector<ParamBlock> ew, eb;
  for (int k = 0; k < K; ++k) {
    ParamBlock w = ParamBlock::make("ew" + std::to_string(k), d, d);
    w.value = a.expert_w[k].a;
    ew.push_back(std::move(w));
    ParamBlock b = ParamBlock::make("eb" + std::to_string(k), d, 1);
    b.value = a.expert_b[k];
    eb.push_back(std::move(b));
  }

  Vector tape_z;
  const auto eval = [&]() {
    Tape tape;
    const Node hn = tape.constant(h);
    const Node gwn = tape.constant(gw.value, K, d);
    const Node gbn = tape.constant(gb.value);
    const Node logits = tape.affine(gwn, gbn, hn);
    // selection is a frozen constant in backward
    const TopK routed = top_k_renormalized(tape.value(logits), topk);
    const Node sparse = tape.softmax_subset(logits, routed.indices);
    std::vector<Node> outs;
    std::vector<Node> ewn, ebn;
    for (int j = 0; j < static_cast<int>(routed.indices.size()); ++j) {
      const int k = routed.indices[j];
      ewn.push_back(tape.constant(ew[k].value, d, d));
      ebn.push_back(tape.constant(eb[k].value));
      outs.push_back(tape.affine(ewn.back(), ebn.back(), hn));
    }
    const Node z = tape.weighted_sum(sparse, routed.indices, outs);
    tape_z = tape.value(z);
    const Node loss = tape.sum_squares(z);
    tape.backward(loss);
    gw.grad = tape.grad(gwn);
    gb.grad = tape.grad(gbn);
    for (auto& blk : ew) std::fill(blk.grad.begin(), blk.grad.end(), 0.0);
    for (auto& blk : eb) std::fill(blk.grad.begin(), blk.grad.end(), 0.0);
    for (int j = 0; j < static_cast<int>(routed.indices.size()); ++j) {
      ew[routed.indices[j]].grad = tape.grad(ewn[j]);
      eb[routed.indices[j]].grad = tape.grad(ebn[j]);
    }
    return tape.scalar(loss);
  };

  eval();
  const AdapterOutput plain = adapt(a, h);
  CHECK(tape_z == plain.z);  // bitwise: same kernels, same order

  std::vector<ParamBlock*> blocks{&gw, &gb};
  for (auto& blk : ew) blocks.push_back(&blk);
  for (auto& blk : eb) blocks.push_back(&blk);
  CHECK(finite_difference_check(blocks, eval, 1e-5) < 1e-4);
}

TEST_CASE("adapt rejects mismatched input", "[adapter]") {
  Rng rng(1);
  const MoEAdapter a = random_adapter(rng, 2, 1, 4, 4);
  CHECK_THROWS_AS(adapt(a, Vector{1.0, 2.0}), std::invalid_argument);
}
