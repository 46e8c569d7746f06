#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "veloio/autodiff.hpp"
#include "veloio/common.hpp"

// Sparse mixture-of-experts velocity regressor.
//
// Inference on a model whose parameters are not being written is safe from
// concurrent callers (each call builds its own graph); training is a
// single-writer on the parameters.
//
// Gate: conv1d(k=1) -> GELU -> global average pool -> linear -> softmax.
// Experts (routed and one always-active shared expert, identical shape):
// patchify -> linear embed -> depth x [cross-patch block; cross-channel
// block], both residual -> linear projection.
// Regression head: weighted routed features concatenated with shared
// features along channels, fused by a linear layer, pooled over patches,
// then linear -> GELU -> two linear heads for velocity and log-variance.

namespace veloio::moe {

struct MoeConfig {
  int num_experts = 8;          // N
  int top_k = 2;                // K
  double capacity_factor = 1.25;  // c
  int window_len = 200;         // L, samples (2 s at 100 Hz)
  int num_patches = 20;         // N_patch
  int patch_len = 10;           // L_feature
  int inner_dim = 64;           // L_inner_feature
  int out_dim = 32;             // L_out_dim
  int depth = 3;                // ResMLP block count
  double aux_weight = 0.01;     // lambda

  int embed_dim() const { return 9 * patch_len; }

  void validate() const {
    if (num_experts < 2) throw ConfigError("moe: N must be >= 2");
    if (top_k < 1 || top_k >= num_experts)
      throw ConfigError("moe: constraint violated: K < N (K=" +
                        std::to_string(top_k) + ", N=" + std::to_string(num_experts) + ")");
    if (!(capacity_factor >= 1.0)) throw ConfigError("moe: c must be >= 1");
    if (window_len <= 0 || num_patches <= 0 || patch_len <= 0 || inner_dim <= 0 ||
        out_dim <= 0 || depth <= 0)
      throw ConfigError("moe: all extents must be positive");
    if (window_len != num_patches * patch_len)
      throw ConfigError("moe: constraint violated: L = N_patch * L_feature (L=" +
                        std::to_string(window_len) + ", N_patch*L_feature=" +
                        std::to_string(num_patches * patch_len) + ")");
    if (aux_weight < 0.0) throw ConfigError("moe: lambda must be >= 0");
  }

  bool operator==(const MoeConfig&) const = default;
};

// 9 x L network input, row-major: rows 0-2 gyro (rad/s), 3-5 specific force
// (m/s^2), 6-8 body-frame gravity direction. Columns oldest -> newest.
struct ImuWindow {
  int len = 0;
  std::vector<double> data;  // 9 * len

  double& at(int row, int col) { return data[static_cast<std::size_t>(row) * len + col]; }
  double at(int row, int col) const { return data[static_cast<std::size_t>(row) * len + col]; }

  void validate(const MoeConfig& cfg) const {
    if (len != cfg.window_len)
      throw ShapeError("ImuWindow: length " + std::to_string(len) +
                       " does not match configured L=" + std::to_string(cfg.window_len));
    if (data.size() != static_cast<std::size_t>(9) * len)
      throw ShapeError("ImuWindow: data size does not match 9 x L");
    for (double v : data)
      if (!std::isfinite(v)) throw DataError("ImuWindow: non-finite sample");
  }
};

// Body-frame velocity measurement with diagonal covariance.
struct VelocityEstimate {
  Eigen::Vector3d v_b = Eigen::Vector3d::Zero();        // m/s
  Eigen::Vector3d sigma_diag = Eigen::Vector3d::Ones();  // variances, m^2/s^2
};

struct RerouteEvent {
  int sample = -1;
  int wanted = -1;  // highest-weight expert that was full
  int landed = -1;  // final expert, or -1 if the slot was dropped
};

// Per-batch routing record. `experts`/`weights` hold the post-capacity
// survivors per sample (claim order, weights renormalized over survivors);
// `importance` sums each expert's sparse renormalized gating weights over
// the batch, `load` counts the final assignments.
struct GateDecision {
  std::vector<std::vector<int>> experts;
  std::vector<std::vector<double>> weights;
  std::vector<RerouteEvent> reroutes;
  std::vector<double> importance;
  std::vector<int> load;
  int dropped_slots = 0;
  int capacity = 0;
};

/// Eq-style per-expert capacity: ceil(c * B / N), identical for all experts.
inline int expert_capacity(const MoeConfig& cfg, int batch_size) {
  if (batch_size < 1) throw ContractError("expert_capacity: batch size must be >= 1");
  const double x = cfg.capacity_factor * static_cast<double>(batch_size) /
                   static_cast<double>(cfg.num_experts);
  return static_cast<int>(std::ceil(x - 1e-9));
}

/// Top-K selection with capacity cascade. Samples are processed in batch
/// order; each walks its experts by descending probability (ties to the
/// lower index) and claims experts that still have capacity until it holds
/// K or every expert is full. Selected weights are renormalized to sum to 1
/// over the survivors.
inline GateDecision topk_route(const std::vector<double>& probs, int batch,
                               int n_experts, int top_k, int capacity) {
  if (static_cast<int>(probs.size()) != batch * n_experts)
    throw ShapeError("topk_route: probs size " + std::to_string(probs.size()) +
                     " does not match [" + std::to_string(batch) + "," +
                     std::to_string(n_experts) + "]");
  GateDecision dec;
  dec.capacity = capacity;
  dec.experts.resize(batch);
  dec.weights.resize(batch);
  dec.importance.assign(n_experts, 0.0);
  dec.load.assign(n_experts, 0);

  for (int s = 0; s < batch; ++s) {
    const double* row = probs.data() + static_cast<std::size_t>(s) * n_experts;
    double rowsum = 0.0;
    for (int e = 0; e < n_experts; ++e) {
      if (row[e] < -1e-12) throw ContractError("topk_route: negative probability");
      rowsum += row[e];
    }
    if (std::abs(rowsum - 1.0) > 1e-6)
      throw ContractError("topk_route: probability row does not sum to 1");

    std::vector<int> order(n_experts);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
      if (row[i] != row[j]) return row[i] > row[j];
      return i < j;
    });

    int claimed = 0;
    int pending_wanted = -1;  // first full expert seen since the last claim
    for (int r = 0; r < n_experts && claimed < top_k; ++r) {
      const int e = order[r];
      if (dec.load[e] >= capacity) {
        if (pending_wanted < 0) pending_wanted = e;
        continue;
      }
      dec.experts[s].push_back(e);
      ++dec.load[e];
      ++claimed;
      if (pending_wanted >= 0) {
        dec.reroutes.push_back({s, pending_wanted, e});
        pending_wanted = -1;
      }
    }
    if (claimed < top_k) {
      dec.dropped_slots += top_k - claimed;
      if (pending_wanted >= 0) dec.reroutes.push_back({s, pending_wanted, -1});
    }
    double sum = 0.0;
    for (int e : dec.experts[s]) sum += row[e];
    for (std::size_t j = 0; j < dec.experts[s].size(); ++j) {
      const double w = sum > 0.0 ? row[dec.experts[s][j]] / sum : 0.0;
      dec.weights[s].push_back(w);
      // importance sums the sparse renormalized gating weights
      dec.importance[dec.experts[s][j]] += w;
    }
  }
  return dec;
}

/// Differentiable renormalized selected weights, per sample in
/// decision.experts order: w_j = p_j / sum of selected p.
inline std::vector<std::vector<ad::Tensor>> selected_weight_nodes(
    ad::Graph& g, ad::Tensor probs, const GateDecision& dec) {
  const int n = static_cast<int>(dec.importance.size());
  std::vector<std::vector<ad::Tensor>> out(dec.experts.size());
  for (std::size_t s = 0; s < dec.experts.size(); ++s) {
    const auto& sel = dec.experts[s];
    if (sel.empty()) continue;
    ad::Tensor wsum;
    std::vector<ad::Tensor> picks;
    picks.reserve(sel.size());
    for (std::size_t j = 0; j < sel.size(); ++j) {
      ad::Tensor pj = g.at(probs, static_cast<int>(s) * n + sel[j]);
      picks.push_back(pj);
      wsum = j == 0 ? pj : g.add(wsum, pj);
    }
    for (auto& pj : picks) out[s].push_back(g.div_scalar(pj, wsum));
  }
  return out;
}

// ---- model --------------------------------------------------------------

namespace detail {

inline std::vector<double> uniform_init(std::mt19937_64& rng, std::size_t n, int fan_in) {
  const double s = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-s, s);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Parameter leaves are materialized once per graph.
class Bind {
 public:
  Bind(ad::Graph& g, ad::ParamSet& ps) : g_(g), ps_(ps) {}
  ad::Tensor operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    ad::Tensor t = g_.param(ps_.at(name));
    cache_.emplace(name, t);
    return t;
  }

 private:
  ad::Graph& g_;
  ad::ParamSet& ps_;
  std::unordered_map<std::string, ad::Tensor> cache_;
};

}  // namespace detail

/// Fixed input normalization: specific-force rows are divided by standard
/// gravity so every channel is O(1). Keeps the gate softmax unsaturated at
/// initialization.
inline constexpr double kAccelInputScale = 1.0 / 9.81;

inline ImuWindow normalized_input(const ImuWindow& w) {
  ImuWindow out = w;
  for (int row = 3; row < 6; ++row)
    for (int col = 0; col < w.len; ++col) out.at(row, col) *= kAccelInputScale;
  return out;
}

/// Flatten a 9 x L window into [N_patch, 9 * L_feature] patch embeddings,
/// time-major within each patch.
inline std::vector<double> patchify(const ImuWindow& w, const MoeConfig& cfg) {
  std::vector<double> out(static_cast<std::size_t>(cfg.num_patches) * cfg.embed_dim());
  for (int p = 0; p < cfg.num_patches; ++p)
    for (int tau = 0; tau < cfg.patch_len; ++tau)
      for (int c = 0; c < 9; ++c)
        out[static_cast<std::size_t>(p) * cfg.embed_dim() + tau * 9 + c] =
            w.at(c, p * cfg.patch_len + tau);
  return out;
}

class MoeModel {
 public:
  MoeModel(const MoeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const int d = cfg_.inner_dim, o = cfg_.out_dim, p = cfg_.num_patches;
    const int e = cfg_.embed_dim();

    add_linear(rng, "gate.conv", 9, d);  // stored [C_out, C_in] for conv
    add_linear(rng, "gate.out", d, cfg_.num_experts);
    for (int x = 0; x <= cfg_.num_experts; ++x) {
      const std::string pre = prefix_for(x);
      add_linear(rng, pre + ".embed", e, d);
      for (int blk = 0; blk < cfg_.depth; ++blk) {
        const std::string bp = pre + ".blk" + std::to_string(blk);
        add_affine(bp + ".cp.aff1", d);
        add_linear(rng, bp + ".cp.conv", p, p);  // patch mixing, [C_out, C_in]
        add_linear(rng, bp + ".cp.lin", d, d);
        add_affine(bp + ".cp.aff2", d);
        add_linear(rng, bp + ".cc.lin1", d, d);
        add_linear(rng, bp + ".cc.lin2", d, d);
      }
      add_linear(rng, pre + ".proj", d, o);
    }
    add_linear(rng, "reg.fuse", 2 * o, o);
    add_linear(rng, "reg.head", o, o);
    add_linear(rng, "reg.vel", o, 3);
    add_linear(rng, "reg.logvar", o, 3);
  }

  const MoeConfig& config() const { return cfg_; }
  ad::ParamSet& params() { return params_; }
  const ad::ParamSet& params() const { return params_; }

  /// Routing probabilities, rows on the simplex. [B, N]. `logit_noise`,
  /// when given, holds B*N offsets added to the gate logits before the
  /// softmax — train-time exploration so underused experts keep receiving
  /// samples; inference runs without it.
  ad::Tensor gate_forward(ad::Graph& g, const std::vector<const ImuWindow*>& batch,
                          const std::vector<double>* logit_noise = nullptr) {
    detail::Bind bind(g, params_);
    return gate_forward(g, bind, batch, logit_noise);
  }

  struct Forward {
    std::vector<ad::Tensor> velocity;  // per sample, [3]
    std::vector<ad::Tensor> log_var;   // per sample, [3]
    ad::Tensor probs;                  // [B, N]
    GateDecision decision;
    // renormalized selected weights as graph nodes, per sample, in
    // decision.experts order; the differentiable path of Eq.-6 importance
    std::vector<std::vector<ad::Tensor>> selected_weights;
  };

  Forward forward(ad::Graph& g, const std::vector<const ImuWindow*>& batch,
                  const std::vector<double>* gate_logit_noise = nullptr) {
    if (batch.empty()) throw DataError("moe_forward: empty batch");
    for (const auto* w : batch) w->validate(cfg_);
    detail::Bind bind(g, params_);

    Forward out;
    out.probs = gate_forward(g, bind, batch, gate_logit_noise);
    const int b = static_cast<int>(batch.size());
    const int n = cfg_.num_experts;
    out.decision = topk_route(out.probs.values(), b, n, cfg_.top_k,
                              expert_capacity(cfg_, b));

    out.selected_weights = selected_weight_nodes(g, out.probs, out.decision);

    for (int s = 0; s < b; ++s) {
      ad::Tensor patches = g.constant({cfg_.num_patches, cfg_.embed_dim()},
                                      patchify(normalized_input(*batch[s]), cfg_));
      ad::Tensor shared_feat = expert_pass(g, bind, patches, cfg_.num_experts);

      ad::Tensor combined;
      const auto& sel = out.decision.experts[s];
      if (!sel.empty()) {
        for (std::size_t j = 0; j < sel.size(); ++j) {
          ad::Tensor feat = expert_pass(g, bind, patches, sel[j]);
          ad::Tensor weighted = g.mul_scalar(feat, out.selected_weights[s][j]);
          combined = j == 0 ? weighted : g.add(combined, weighted);
        }
      } else {
        combined = g.constant(
            {cfg_.num_patches, cfg_.out_dim},
            std::vector<double>(static_cast<std::size_t>(cfg_.num_patches) * cfg_.out_dim, 0.0));
      }

      ad::Tensor fused = g.linear(g.concat_cols(combined, shared_feat),
                                  bind("reg.fuse.w"), bind("reg.fuse.b"));
      ad::Tensor pooled = g.mean_axis0(fused);
      ad::Tensor hidden =
          g.gelu(g.linear(pooled, bind("reg.head.w"), bind("reg.head.b")));
      out.velocity.push_back(g.linear(hidden, bind("reg.vel.w"), bind("reg.vel.b")));
      out.log_var.push_back(
          g.linear(hidden, bind("reg.logvar.w"), bind("reg.logvar.b")));
    }
    return out;
  }

  /// Single expert features [N_patch, L_out_dim]; `which` in [0, N] where N
  /// selects the shared expert.
  ad::Tensor expert_forward(ad::Graph& g, const ImuWindow& window, int which) {
    window.validate(cfg_);
    if (which < 0 || which > cfg_.num_experts)
      throw ConfigError("expert_forward: expert id out of range");
    detail::Bind bind(g, params_);
    ad::Tensor patches = g.constant({cfg_.num_patches, cfg_.embed_dim()},
                                    patchify(normalized_input(window), cfg_));
    return expert_pass(g, bind, patches, which);
  }

  /// No-grad convenience: velocity estimates plus the routing record.
  std::pair<std::vector<VelocityEstimate>, GateDecision> infer(
      const std::vector<const ImuWindow*>& batch) {
    ad::Graph g;
    Forward f = forward(g, batch);
    std::vector<VelocityEstimate> est(batch.size());
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const auto& v = f.velocity[s].values();
      const auto& lv = f.log_var[s].values();
      est[s].v_b = Eigen::Vector3d(v[0], v[1], v[2]);
      est[s].sigma_diag =
          Eigen::Vector3d(std::exp(lv[0]), std::exp(lv[1]), std::exp(lv[2]));
    }
    return {std::move(est), std::move(f.decision)};
  }

 private:
  std::string prefix_for(int which) const {
    return which == cfg_.num_experts ? "shared" : "expert" + std::to_string(which);
  }

  void add_linear(std::mt19937_64& rng, const std::string& name, int in, int out) {
    params_.add(name + ".w", {in, out},
                detail::uniform_init(rng, static_cast<std::size_t>(in) * out, in));
    params_.add(name + ".b", {out}, std::vector<double>(out, 0.0));
  }
  void add_affine(const std::string& name, int d) {
    params_.add(name + ".alpha", {d}, std::vector<double>(d, 1.0));
    params_.add(name + ".beta", {d}, std::vector<double>(d, 0.0));
  }

  ad::Tensor gate_forward(ad::Graph& g, detail::Bind& bind,
                          const std::vector<const ImuWindow*>& batch,
                          const std::vector<double>* logit_noise) {
    if (logit_noise != nullptr &&
        logit_noise->size() != batch.size() * static_cast<std::size_t>(cfg_.num_experts))
      throw ShapeError("gate_forward: logit noise must be B x N");
    // gate.conv.w is registered [in=9, out=d]; conv wants [C_out, C_in].
    ad::Tensor wconv = g.transpose(bind("gate.conv.w"));
    std::vector<ad::Tensor> logits;
    logits.reserve(batch.size());
    for (const auto* w : batch) {
      w->validate(cfg_);
      ad::Tensor x = g.constant({9, cfg_.window_len}, normalized_input(*w).data);
      ad::Tensor h = g.gelu(g.conv1d_k1(x, wconv, bind("gate.conv.b")));
      ad::Tensor pooled = g.global_avg_pool(h);
      logits.push_back(g.linear(pooled, bind("gate.out.w"), bind("gate.out.b")));
    }
    ad::Tensor stacked = g.stack_rows(logits);
    if (logit_noise != nullptr)
      stacked = g.add(stacked, g.constant({static_cast<int>(batch.size()),
                                           cfg_.num_experts},
                                          *logit_noise));
    return g.softmax(stacked);
  }

  ad::Tensor expert_pass(ad::Graph& g, detail::Bind& bind, ad::Tensor patches,
                         int which) {
    const std::string pre = prefix_for(which);
    ad::Tensor h = g.linear(patches, bind(pre + ".embed.w"), bind(pre + ".embed.b"));
    for (int blk = 0; blk < cfg_.depth; ++blk) {
      const std::string bp = pre + ".blk" + std::to_string(blk);
      // cross-patch: affine -> patch-mixing conv (k=1) -> linear -> affine
      ad::Tensor u = g.affine(h, bind(bp + ".cp.aff1.alpha"), bind(bp + ".cp.aff1.beta"));
      u = g.conv1d_k1(u, g.transpose(bind(bp + ".cp.conv.w")), bind(bp + ".cp.conv.b"));
      u = g.linear(u, bind(bp + ".cp.lin.w"), bind(bp + ".cp.lin.b"));
      u = g.affine(u, bind(bp + ".cp.aff2.alpha"), bind(bp + ".cp.aff2.beta"));
      h = g.add(h, u);
      // cross-channel: linear -> GELU -> linear
      ad::Tensor v = g.gelu(g.linear(h, bind(bp + ".cc.lin1.w"), bind(bp + ".cc.lin1.b")));
      v = g.linear(v, bind(bp + ".cc.lin2.w"), bind(bp + ".cc.lin2.b"));
      h = g.add(h, v);
    }
    return g.linear(h, bind(pre + ".proj.w"), bind(pre + ".proj.b"));
  }

  MoeConfig cfg_;
  ad::ParamSet params_;
};

// ---- losses -------------------------------------------------------------

/// Mean over the batch of squared Euclidean norm errors.
inline ad::Tensor loss_mse(ad::Graph& g, const std::vector<ad::Tensor>& pred,
                           const std::vector<Eigen::Vector3d>& target) {
  if (pred.size() != target.size() || pred.empty())
    throw ShapeError("loss_mse: prediction/target count mismatch");
  ad::Tensor total;
  for (std::size_t s = 0; s < pred.size(); ++s) {
    ad::Tensor t = g.constant({3}, {target[s].x(), target[s].y(), target[s].z()});
    ad::Tensor term = g.sum(g.square(g.sub(pred[s], t)));
    total = s == 0 ? term : g.add(total, term);
  }
  return g.scale(total, 1.0 / static_cast<double>(pred.size()));
}

/// Gaussian negative log likelihood with diagonal covariance
/// sigma = exp(log_var): mean over batch of
/// 0.5 * sum(log_var) + 0.5 * (v - vhat)^T diag(exp(log_var))^-1 (v - vhat).
inline ad::Tensor loss_nll(ad::Graph& g, const std::vector<ad::Tensor>& pred,
                           const std::vector<ad::Tensor>& log_var,
                           const std::vector<Eigen::Vector3d>& target) {
  if (pred.size() != target.size() || pred.size() != log_var.size() || pred.empty())
    throw ShapeError("loss_nll: prediction/target count mismatch");
  ad::Tensor total;
  for (std::size_t s = 0; s < pred.size(); ++s) {
    for (double lv : log_var[s].values())
      if (!std::isfinite(lv)) throw NumericError("loss_nll: non-finite log-variance");
    ad::Tensor t = g.constant({3}, {target[s].x(), target[s].y(), target[s].z()});
    ad::Tensor r2 = g.square(g.sub(pred[s], t));
    ad::Tensor inv_sigma = g.exp(g.scale(log_var[s], -1.0));
    ad::Tensor maha = g.sum(g.mul(r2, inv_sigma));
    ad::Tensor logdet = g.sum(log_var[s]);
    ad::Tensor term = g.scale(g.add(logdet, maha), 0.5);
    total = s == 0 ? term : g.add(total, term);
  }
  return g.scale(total, 1.0 / static_cast<double>(pred.size()));
}

/// Plain-value auxiliary balance loss: squared deviations of normalized
/// importance and load from 1/N, summed over experts.
inline double aux_balance_value(const std::vector<double>& importance,
                                const std::vector<double>& load) {
  const double n = static_cast<double>(importance.size());
  double isum = 0.0, lsum = 0.0;
  for (double v : importance) isum += v;
  for (double v : load) lsum += v;
  double out = 0.0;
  for (double v : importance) {
    const double d = (isum > 0.0 ? v / isum : 0.0) - 1.0 / n;
    out += d * d;
  }
  for (double v : load) {
    const double d = (lsum > 0.0 ? v / lsum : 0.0) - 1.0 / n;
    out += d * d;
  }
  return out;
}

/// Differentiable auxiliary loss. The importance term sums the sparse
/// renormalized gating weights per expert and flows gradients through the
/// selected weights back into the gate; the load term is piecewise constant
/// in the parameters and enters as a constant.
inline ad::Tensor loss_aux(ad::Graph& g, const GateDecision& dec,
                           const std::vector<std::vector<ad::Tensor>>& sel_weights) {
  const int n = static_cast<int>(dec.importance.size());
  std::vector<ad::Tensor> per_expert(n);
  for (std::size_t s = 0; s < dec.experts.size(); ++s)
    for (std::size_t j = 0; j < dec.experts[s].size(); ++j) {
      const int e = dec.experts[s][j];
      per_expert[e] = per_expert[e].defined()
                          ? g.add(per_expert[e], sel_weights[s][j])
                          : sel_weights[s][j];
    }
  ad::Tensor isum;
  for (int e = 0; e < n; ++e) {
    if (!per_expert[e].defined()) per_expert[e] = g.constant_scalar(0.0);
    isum = e == 0 ? per_expert[e] : g.add(isum, per_expert[e]);
  }
  ad::Tensor imp_term;
  for (int e = 0; e < n; ++e) {
    ad::Tensor d = g.sub(g.div_scalar(per_expert[e], isum), g.constant_scalar(1.0 / n));
    ad::Tensor sq = g.square(d);
    imp_term = e == 0 ? sq : g.add(imp_term, sq);
  }

  double lsum = 0.0;
  for (int v : dec.load) lsum += v;
  double load_term = 0.0;
  for (int v : dec.load) {
    const double d = (lsum > 0.0 ? v / lsum : 0.0) - 1.0 / n;
    load_term += d * d;
  }
  return g.add(imp_term, g.constant_scalar(load_term));
}

// ---- analytic accounting -------------------------------------------------

// multiply-add counted as 2 FLOPs; elementwise ops as 1 per element.
inline std::int64_t linear_param_count(std::int64_t in, std::int64_t out) {
  return in * out + out;
}
inline std::int64_t linear_flop_count(std::int64_t in, std::int64_t out,
                                      std::int64_t rows = 1) {
  return 2 * in * out * rows;
}

struct ModelBudget {
  std::int64_t total_params = 0;
  std::int64_t active_params = 0;     // gate + shared + K experts + head
  std::int64_t flops_active = 0;      // per inference
  std::int64_t flops_dense = 0;       // all N experts activated
};

inline ModelBudget count_params_flops(const MoeConfig& cfg) {
  cfg.validate();
  const std::int64_t p = cfg.num_patches, d = cfg.inner_dim, o = cfg.out_dim,
                     e = cfg.embed_dim(), l = cfg.window_len, n = cfg.num_experts,
                     k = cfg.top_k;

  const auto& linear_params = linear_param_count;
  const auto& linear_flops = linear_flop_count;

  // one expert pass
  std::int64_t expert_params = linear_params(e, d) + linear_params(d, o);
  std::int64_t expert_flops = linear_flops(e, d, p) + linear_flops(d, o, p);
  const std::int64_t block_params = 2 * d + linear_params(p, p) + linear_params(d, d) +
                                    2 * d + 2 * linear_params(d, d);
  const std::int64_t block_flops = 2 * p * d      // aff1
                                   + 2 * p * p * d  // patch-mixing conv
                                   + linear_flops(d, d, p) + 2 * p * d  // lin + aff2
                                   + p * d          // residual
                                   + 2 * linear_flops(d, d, p) + p * d  // cc linears + gelu
                                   + p * d;         // residual
  expert_params += cfg.depth * block_params;
  expert_flops += cfg.depth * block_flops;

  const std::int64_t gate_params = linear_params(9, d) + linear_params(d, n);
  const std::int64_t gate_flops = 2 * 9 * d * l + d * l      // conv + gelu
                                  + d * l                    // pool
                                  + linear_flops(d, n, 1) + 3 * n;  // out + softmax

  const std::int64_t reg_params = linear_params(2 * o, o) + linear_params(o, o) +
                                  2 * linear_params(o, 3);
  auto reg_flops = [&](std::int64_t routed) {
    return routed * 2 * p * o                  // weighted combine
           + linear_flops(2 * o, o, p) + p * o  // fuse + pool
           + linear_flops(o, o, 1) + o          // head + gelu
           + 2 * linear_flops(o, 3, 1);
  };

  ModelBudget b;
  b.total_params = gate_params + (n + 1) * expert_params + reg_params;
  b.active_params = gate_params + (k + 1) * expert_params + reg_params;
  b.flops_active = gate_flops + (k + 1) * expert_flops + reg_flops(k);
  b.flops_dense = gate_flops + (n + 1) * expert_flops + reg_flops(n);
  return b;
}

}  // namespace veloio::moe
