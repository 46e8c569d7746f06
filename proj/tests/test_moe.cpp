#include "veloio/moe.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "support/oracles.hpp"
#include "veloio/checkpoint.hpp"

using namespace veloio;
using namespace veloio::moe;

namespace {

MoeConfig tiny_config() {
  MoeConfig c;
  c.num_experts = 4;
  c.top_k = 2;
  c.window_len = 40;
  c.num_patches = 4;
  c.patch_len = 10;
  c.inner_dim = 8;
  c.out_dim = 6;
  c.depth = 2;
  return c;
}

ImuWindow random_window(std::mt19937_64& rng, int len) {
  std::normal_distribution<double> n(0.0, 1.0);
  ImuWindow w;
  w.len = len;
  w.data.resize(static_cast<std::size_t>(9) * len);
  for (auto& v : w.data) v = n(rng);
  return w;
}

std::vector<double> random_prob_rows(std::mt19937_64& rng, int b, int n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> probs(static_cast<std::size_t>(b) * n);
  for (int s = 0; s < b; ++s) {
    double sum = 0.0;
    for (int e = 0; e < n; ++e) {
      probs[s * n + e] = u(rng) + 1e-6;
      sum += probs[s * n + e];
    }
    for (int e = 0; e < n; ++e) probs[s * n + e] /= sum;
  }
  return probs;
}

}  // namespace

TEST(Capacity, HandCases) {
  MoeConfig c;
  c.num_experts = 8;
  c.capacity_factor = 1.25;
  EXPECT_EQ(expert_capacity(c, 32), 5);
  MoeConfig c2;
  c2.num_experts = 6;
  c2.top_k = 2;
  c2.capacity_factor = 1.0;
  EXPECT_EQ(expert_capacity(c2, 6), 1);
  MoeConfig c3;
  c3.num_experts = 4;
  c3.top_k = 2;
  c3.capacity_factor = 2.0;
  EXPECT_EQ(expert_capacity(c3, 7), 4);  // ceil(3.5)
}

TEST(Config, ValidatesConstraints) {
  MoeConfig c = tiny_config();
  c.top_k = c.num_experts;  // K >= N
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.patch_len = 9;  // L != N_patch * L_feature
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.capacity_factor = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Route, RenormalizeByHand) {
  std::vector<double> probs{0.5, 0.3, 0.15, 0.05};
  GateDecision d = topk_route(probs, 1, 4, 2, 100);
  ASSERT_EQ(d.experts[0], (std::vector<int>{0, 1}));
  EXPECT_NEAR(d.weights[0][0], 0.625, 1e-15);
  EXPECT_NEAR(d.weights[0][1], 0.375, 1e-15);
  EXPECT_TRUE(d.reroutes.empty());
  EXPECT_EQ(d.dropped_slots, 0);
}

TEST(Route, SingleSampleNeverBinds) {
  MoeConfig c;
  c.num_experts = 8;
  c.capacity_factor = 1.25;
  EXPECT_GE(expert_capacity(c, 1), 1);
  std::mt19937_64 rng(2);
  auto probs = random_prob_rows(rng, 1, 8);
  GateDecision d = topk_route(probs, 1, 8, 2, expert_capacity(c, 1));
  EXPECT_EQ(d.experts[0].size(), 2u);
  EXPECT_TRUE(d.reroutes.empty());
}

TEST(Route, ForcedCascadeHandCase) {
  // B=4, N=2, K=1, capacity 2, every row prefers expert 0.
  std::vector<double> probs{0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4};
  GateDecision d = topk_route(probs, 4, 2, 1, 2);
  EXPECT_EQ(d.load, (std::vector<int>{2, 2}));
  EXPECT_EQ(d.experts[0], (std::vector<int>{0}));
  EXPECT_EQ(d.experts[1], (std::vector<int>{0}));
  EXPECT_EQ(d.experts[2], (std::vector<int>{1}));
  EXPECT_EQ(d.experts[3], (std::vector<int>{1}));
  EXPECT_EQ(d.reroutes.size(), 2u);
  // rerouted samples keep weight 1 after renormalization over survivors
  EXPECT_DOUBLE_EQ(d.weights[2][0], 1.0);
}

TEST(Route, MatchesBruteForceTopKOn10kRows) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10000; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 7);
    const int k = 1 + static_cast<int>(rng() % (n - 1));
    auto probs = random_prob_rows(rng, 1, n);
    GateDecision d = topk_route(probs, 1, n, k, 1000000);  // ample capacity
    auto ref = oracles::route_reference({std::vector<double>(probs.begin(), probs.end())},
                                        n, k, 1000000);
    ASSERT_EQ(d.experts[0], ref.experts[0]) << "trial " << trial;
  }
}

TEST(Route, CapacityCascadeMatchesOracleOnRandomBatches) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 7);
    const int k = 1 + static_cast<int>(rng() % (n - 1));
    const int b = 1 + static_cast<int>(rng() % 64);
    const int cap = 1 + static_cast<int>(rng() % (2 * b / n + 2));
    auto flat = random_prob_rows(rng, b, n);
    std::vector<std::vector<double>> rows(b);
    for (int s = 0; s < b; ++s)
      rows[s] = std::vector<double>(flat.begin() + s * n, flat.begin() + (s + 1) * n);
    GateDecision d = topk_route(flat, b, n, k, cap);
    auto ref = oracles::route_reference(rows, n, k, cap);
    ASSERT_EQ(d.experts, ref.experts);
    ASSERT_EQ(d.load, ref.load);
    ASSERT_EQ(d.dropped_slots, ref.dropped);
    for (int s = 0; s < b; ++s) {
      ASSERT_LE(static_cast<int>(d.experts[s].size()), k);
      double sum = 0.0;
      for (double w : d.weights[s]) sum += w;
      if (!d.weights[s].empty()) {
        ASSERT_NEAR(sum, 1.0, 1e-12);
      }
    }
    for (int e = 0; e < n; ++e) ASSERT_LE(d.load[e], cap);
  }
}

TEST(Gate, ZeroFinalLayerGivesUniformRows) {
  MoeConfig cfg = tiny_config();
  MoeModel m(cfg, 77);
  auto& w = m.params().at("gate.out.w");
  std::fill(w.value.begin(), w.value.end(), 0.0);
  std::mt19937_64 rng(3);
  ImuWindow w1 = random_window(rng, cfg.window_len);
  ImuWindow w2 = random_window(rng, cfg.window_len);
  ad::Graph g;
  ad::Tensor probs = m.gate_forward(g, {&w1, &w2});
  for (double v : probs.values()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Gate, RowsSumToOne) {
  MoeConfig cfg = tiny_config();
  MoeModel m(cfg, 11);
  std::mt19937_64 rng(4);
  std::vector<ImuWindow> ws;
  std::vector<const ImuWindow*> batch;
  for (int i = 0; i < 5; ++i) ws.push_back(random_window(rng, cfg.window_len));
  for (auto& w : ws) batch.push_back(&w);
  ad::Graph g;
  ad::Tensor probs = m.gate_forward(g, batch);
  for (int s = 0; s < 5; ++s) {
    double sum = 0.0;
    for (int e = 0; e < cfg.num_experts; ++e) sum += probs.values()[s * cfg.num_experts + e];
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Gate, EntropyGradientMatchesFiniteDifferences) {
  MoeConfig cfg = tiny_config();
  MoeModel m(cfg, 19);
  std::mt19937_64 rng(9);
  std::vector<ImuWindow> ws;
  for (int i = 0; i < 3; ++i) ws.push_back(random_window(rng, cfg.window_len));
  std::vector<const ImuWindow*> batch{&ws[0], &ws[1], &ws[2]};

  auto entropy = [&](MoeModel& model) -> double {
    ad::Graph g;
    ad::Tensor probs = model.gate_forward(g, batch);
    return g.scale(g.sum(g.mul(probs, g.log(probs))), -1.0 / 3.0).value();
  };

  m.params().zero_grad();
  {
    ad::Graph g;
    ad::Tensor probs = m.gate_forward(g, batch);
    g.backward(g.scale(g.sum(g.mul(probs, g.log(probs))), -1.0 / 3.0));
  }

  for (const std::string name : {"gate.conv.w", "gate.out.w", "gate.out.b"}) {
    ad::Parameter& p = m.params().at(name);
    std::uniform_int_distribution<std::size_t> pick(0, p.value.size() - 1);
    for (int probe = 0; probe < 8; ++probe) {
      const std::size_t i = pick(rng);
      const double x0 = p.value[i];
      const double h = 1e-4;
      p.value[i] = x0 + h;
      const double fp = entropy(m);
      p.value[i] = x0 - h;
      const double fm = entropy(m);
      p.value[i] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      EXPECT_NEAR(p.grad[i], fd, 1e-4 * std::max(1.0, std::abs(fd)))
          << name << "[" << i << "]";
    }
  }
}

TEST(Expert, PatchifyOrderingIsTimeMajor) {
  MoeConfig cfg = tiny_config();
  ImuWindow w;
  w.len = cfg.window_len;
  w.data.resize(9 * w.len);
  for (int c = 0; c < 9; ++c)
    for (int t = 0; t < w.len; ++t) w.at(c, t) = 100.0 * c + t;
  auto p = patchify(w, cfg);
  ASSERT_EQ(p.size(), static_cast<std::size_t>(cfg.num_patches) * cfg.embed_dim());
  // patch 1, time offset 2, channel 3  ->  value for channel 3 at t = 12
  const int patch = 1, tau = 2, ch = 3;
  EXPECT_DOUBLE_EQ(p[patch * cfg.embed_dim() + tau * 9 + ch],
                   100.0 * ch + (patch * cfg.patch_len + tau));
}

TEST(Expert, ZeroedBlocksReduceToEmbedProjection) {
  MoeConfig cfg = tiny_config();
  MoeModel m(cfg, 123);
  // zero every in-block weight; affines stay alpha=1, beta=0
  for (auto& p : m.params()) {
    if (p.name.find(".blk") != std::string::npos &&
        p.name.find("alpha") == std::string::npos &&
        p.name.find("beta") == std::string::npos)
      std::fill(p.value.begin(), p.value.end(), 0.0);
  }
  std::mt19937_64 rng(8);
  ImuWindow w = random_window(rng, cfg.window_len);
  ad::Graph g;
  ad::Tensor feat = m.expert_forward(g, w, 0);

  // reference: proj(embed(patchify)) on the model's normalized input
  ad::Graph g2;
  ad::Tensor patches = g2.constant({cfg.num_patches, cfg.embed_dim()},
                                   patchify(normalized_input(w), cfg));
  ad::Tensor embed = g2.linear(patches, g2.constant({cfg.embed_dim(), cfg.inner_dim},
                                                    m.params().at("expert0.embed.w").value),
                               g2.constant({cfg.inner_dim}, m.params().at("expert0.embed.b").value));
  ad::Tensor ref = g2.linear(embed, g2.constant({cfg.inner_dim, cfg.out_dim},
                                                m.params().at("expert0.proj.w").value),
                             g2.constant({cfg.out_dim}, m.params().at("expert0.proj.b").value));
  EXPECT_LT(oracles::rel_err(feat.values(), ref.values()), 1e-14);
}

TEST(Expert, EndToEndGradientMatchesFiniteDifferences) {
  MoeConfig cfg = tiny_config();
  MoeModel m(cfg, 55);
  std::mt19937_64 rng(10);
  ImuWindow w = random_window(rng, cfg.window_len);

  auto f = [&](MoeModel& model) {
    ad::Graph g;
    return g.sum(g.square(model.expert_forward(g, w, 1))).value();
  };

  m.params().zero_grad();
  {
    ad::Graph g;
    g.backward(g.sum(g.square(m.expert_forward(g, w, 1))));
  }
  for (const std::string name :
       {"expert1.embed.w", "expert1.blk0.cp.conv.w", "expert1.blk0.cp.aff1.alpha",
        "expert1.blk1.cc.lin1.w", "expert1.proj.b"}) {
    ad::Parameter& p = m.params().at(name);
    std::uniform_int_distribution<std::size_t> pick(0, p.value.size() - 1);
    for (int probe = 0; probe < 6; ++probe) {
      const std::size_t i = pick(rng);
      const double x0 = p.value[i];
      const double h = 1e-4;
      p.value[i] = x0 + h;
      const double fp = f(m);
      p.value[i] = x0 - h;
      const double fm = f(m);
      p.value[i] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      EXPECT_NEAR(p.grad[i], fd, 1e-4 * std::max(1.0, std::abs(fd)))
          << name << "[" << i << "]";
    }
  }
}

TEST(MoeForward, ZeroWindowGivesFiniteOutputsAndPositiveSigma) {
  MoeConfig cfg = tiny_config();
  MoeModel m(cfg, 1);
  ImuWindow w;
  w.len = cfg.window_len;
  w.data.assign(9 * w.len, 0.0);
  auto [est, dec] = m.infer({&w});
  ASSERT_EQ(est.size(), 1u);
  EXPECT_TRUE(est[0].v_b.allFinite());
  EXPECT_GT(est[0].sigma_diag.minCoeff(), 0.0);
}

TEST(MoeForward, AmpleCapacityMakesOutputIndependentOfC) {
  MoeConfig a = tiny_config(), b = tiny_config();
  a.top_k = a.num_experts - 1;
  b.top_k = b.num_experts - 1;
  a.capacity_factor = 50.0;
  b.capacity_factor = 100.0;
  MoeModel ma(a, 99), mb(b, 99);  // same seed -> identical parameters
  std::mt19937_64 rng(12);
  std::vector<ImuWindow> ws;
  for (int i = 0; i < 6; ++i) ws.push_back(random_window(rng, a.window_len));
  std::vector<const ImuWindow*> batch;
  for (auto& w : ws) batch.push_back(&w);
  auto [ea, da] = ma.infer(batch);
  auto [eb, db] = mb.infer(batch);
  for (int s = 0; s < 6; ++s) {
    EXPECT_EQ(ea[s].v_b, eb[s].v_b);
    EXPECT_EQ(ea[s].sigma_diag, eb[s].sigma_diag);
  }
  EXPECT_EQ(da.load, db.load);
}

TEST(MoeForward, IdenticalSamplesGetIdenticalOutputs) {
  MoeConfig cfg = tiny_config();
  cfg.capacity_factor = 100.0;  // ample
  MoeModel m(cfg, 31);
  std::mt19937_64 rng(13);
  ImuWindow dup = random_window(rng, cfg.window_len);
  ImuWindow other1 = random_window(rng, cfg.window_len);
  ImuWindow other2 = random_window(rng, cfg.window_len);
  auto [est, dec] = m.infer({&dup, &other1, &other2, &dup});
  EXPECT_EQ(est[0].v_b, est[3].v_b);
  EXPECT_EQ(est[0].sigma_diag, est[3].sigma_diag);
  EXPECT_EQ(dec.experts[0], dec.experts[3]);
}

TEST(Losses, MseHandCases) {
  ad::Graph g;
  std::vector<ad::Tensor> pred{g.constant({3}, {1, 0, 0})};
  EXPECT_DOUBLE_EQ(loss_mse(g, pred, {Eigen::Vector3d(1, 0, 0)}).value(), 0.0);
  EXPECT_DOUBLE_EQ(loss_mse(g, pred, {Eigen::Vector3d(0, 0, 0)}).value(), 1.0);
  // doubling the error quadruples the loss
  std::vector<ad::Tensor> twice{g.constant({3}, {2, 0, 0})};
  EXPECT_DOUBLE_EQ(loss_mse(g, twice, {Eigen::Vector3d(0, 0, 0)}).value(), 4.0);
}

TEST(Losses, NllHandCases) {
  ad::Graph g;
  std::vector<ad::Tensor> pred{g.constant({3}, {0, 0, 0})};
  std::vector<ad::Tensor> lv0{g.constant({3}, {0, 0, 0})};
  EXPECT_DOUBLE_EQ(loss_nll(g, pred, lv0, {Eigen::Vector3d(0, 0, 0)}).value(), 0.0);
  std::vector<ad::Tensor> lv1{g.constant({3}, {1, 1, 1})};  // sigma = e * I
  EXPECT_NEAR(loss_nll(g, pred, lv1, {Eigen::Vector3d(0, 0, 0)}).value(), 1.5, 1e-15);
  EXPECT_NEAR(loss_nll(g, pred, lv0, {Eigen::Vector3d(1, 0, 0)}).value(), 0.5, 1e-15);
}

TEST(Losses, NllRejectsNonFiniteLogVariance) {
  ad::Graph g;
  std::vector<ad::Tensor> pred{g.constant({3}, {0, 0, 0})};
  std::vector<ad::Tensor> lv{g.constant({3}, {0, std::nan(""), 0})};
  EXPECT_THROW(loss_nll(g, pred, lv, {Eigen::Vector3d(0, 0, 0)}), NumericError);
}

TEST(Losses, AuxHandCaseAndScaleInvariance) {
  // N=2, I=[1,0], L=[B,0] -> 0.5 + 0.5 = 1.0
  EXPECT_DOUBLE_EQ(aux_balance_value({1.0, 0.0}, {8.0, 0.0}), 1.0);
  EXPECT_DOUBLE_EQ(aux_balance_value({0.5, 0.5}, {4.0, 4.0}), 0.0);
  // scaling importance leaves the importance term unchanged
  EXPECT_DOUBLE_EQ(aux_balance_value({3.0, 1.0}, {1.0, 1.0}),
                   aux_balance_value({30.0, 10.0}, {1.0, 1.0}));
}

TEST(Losses, AuxZeroIffUniform) {
  EXPECT_DOUBLE_EQ(aux_balance_value({2, 2, 2, 2}, {5, 5, 5, 5}), 0.0);
  EXPECT_GT(aux_balance_value({2.01, 1.99, 2, 2}, {5, 5, 5, 5}), 0.0);
  EXPECT_GT(aux_balance_value({2, 2, 2, 2}, {6, 4, 5, 5}), 0.0);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(14);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int seed = 0; seed < 20; ++seed) {
    Eigen::Vector3d target(nd(rng), nd(rng), nd(rng));
    std::vector<double> pv{nd(rng), nd(rng), nd(rng)};
    std::vector<double> lvv{nd(rng), nd(rng), nd(rng)};

    // MSE wrt prediction
    {
      ad::Graph g;
      ad::Tensor p = g.leaf({3}, pv);
      g.backward(loss_mse(g, {p}, {target}));
      auto fd = oracles::central_diff(
          [&](const std::vector<double>& x) {
            ad::Graph gg;
            return loss_mse(gg, {gg.leaf({3}, x)}, {target}).value();
          },
          pv);
      EXPECT_LT(oracles::rel_err(p.grad(), fd), 1e-4);
    }
    // NLL wrt prediction and log-variance
    {
      ad::Graph g;
      ad::Tensor p = g.leaf({3}, pv);
      ad::Tensor lv = g.leaf({3}, lvv);
      g.backward(loss_nll(g, {p}, {lv}, {target}));
      auto fdp = oracles::central_diff(
          [&](const std::vector<double>& x) {
            ad::Graph gg;
            return loss_nll(gg, {gg.leaf({3}, x)}, {gg.constant({3}, lvv)}, {target})
                .value();
          },
          pv);
      auto fdl = oracles::central_diff(
          [&](const std::vector<double>& x) {
            ad::Graph gg;
            return loss_nll(gg, {gg.constant({3}, pv)}, {gg.leaf({3}, x)}, {target})
                .value();
          },
          lvv);
      EXPECT_LT(oracles::rel_err(p.grad(), fdp), 1e-4);
      EXPECT_LT(oracles::rel_err(lv.grad(), fdl), 1e-4);
    }
    // aux loss through the importance path (logits with clear gaps so the
    // discrete routing does not flip under the probe step)
    {
      const int b = 4, n = 4;
      std::vector<double> logits(b * n);
      for (auto& v : logits) v = nd(rng) * 2.0;
      auto build = [&](ad::Graph& g, const std::vector<double>& lg) {
        ad::Tensor probs = g.softmax(g.leaf({b, n}, lg));
        GateDecision dec = topk_route(probs.values(), b, n, 2, 100);
        return loss_aux(g, dec, selected_weight_nodes(g, probs, dec));
      };
      ad::Graph g;
      ad::Tensor lt = g.leaf({b, n}, logits);
      ad::Tensor probs = g.softmax(lt);
      GateDecision dec = topk_route(probs.values(), b, n, 2, 100);
      g.backward(loss_aux(g, dec, selected_weight_nodes(g, probs, dec)));
      auto fd = oracles::central_diff(
          [&](const std::vector<double>& x) {
            ad::Graph gg;
            return build(gg, x).value();
          },
          logits);
      EXPECT_LT(oracles::rel_err(lt.grad(), fd), 1e-4);
    }
  }
}

TEST(Accounting, SingleLinearHandCase) {
  EXPECT_EQ(linear_param_count(9, 3), 30);
  EXPECT_EQ(linear_flop_count(9, 3), 54);
}

TEST(Accounting, ActiveStrictlyBelowDense) {
  MoeConfig cfg;  // defaults: N=8, K=2
  ModelBudget b = count_params_flops(cfg);
  EXPECT_LT(b.flops_active, b.flops_dense);
  EXPECT_LT(b.active_params, b.total_params);
}

TEST(Accounting, DefaultConfigRatioAtMost045) {
  ModelBudget b = count_params_flops(MoeConfig{});
  const double ratio = static_cast<double>(b.flops_active) /
                       static_cast<double>(b.flops_dense);
  EXPECT_LE(ratio, 0.45);
}

TEST(Accounting, InstantiatedParamsMatchAnalyticTotalExactly) {
  for (const MoeConfig& cfg : {MoeConfig{}, tiny_config()}) {
    MoeModel m(cfg, 3);
    ModelBudget b = count_params_flops(cfg);
    EXPECT_EQ(m.params().total_size(), b.total_params);
  }
}

TEST(Checkpoint, RoundTripIsBitwiseIdentical) {
  namespace fs = std::filesystem;
  MoeConfig cfg = tiny_config();
  MoeModel m(cfg, 2024);
  std::mt19937_64 rng(15);
  ImuWindow w = random_window(rng, cfg.window_len);
  auto [before, dec_a] = m.infer({&w});

  const fs::path path = fs::temp_directory_path() / "veloio_ckpt_test.json";
  save_checkpoint(path, m);
  MoeModel loaded = load_checkpoint(path);
  auto [after, dec_b] = loaded.infer({&w});
  EXPECT_EQ(before[0].v_b, after[0].v_b);
  EXPECT_EQ(before[0].sigma_diag, after[0].sigma_diag);
  fs::remove(path);
}

TEST(Checkpoint, DetectsCorruption) {
  namespace fs = std::filesystem;
  MoeConfig cfg = tiny_config();
  MoeModel m(cfg, 7);
  const fs::path path = fs::temp_directory_path() / "veloio_ckpt_corrupt.json";
  save_checkpoint(path, m);
  // flip one value; checksum must catch it
  std::ifstream in(path);
  nlohmann::json j;
  in >> j;
  in.close();
  j["params"][0]["data"][0] = j["params"][0]["data"][0].get<double>() + 1.0;
  std::ofstream out(path);
  out << j.dump();
  out.close();
  EXPECT_THROW(load_checkpoint(path), DataError);
  fs::remove(path);
}
