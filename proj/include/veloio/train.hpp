#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "veloio/moe.hpp"
#include "veloio/optim.hpp"
#include "veloio/sim.hpp"

// Two-phase training: minimize MSE + lambda * aux until the validation MSE
// stops improving, then NLL + lambda * aux to calibrate the covariance head.
// Early stopping per phase: patience epochs with less than min_delta
// improvement, capped at max_epochs.

namespace veloio::moe {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 32;
  int max_epochs = 200;  // per phase
  int patience = 5;
  double min_delta = 1e-4;
  // train-time exploration: stddev of Gaussian noise on the gate logits
  // before top-K, so underused experts keep receiving samples; 0 disables.
  // Anneals linearly to zero over gate_noise_epochs of phase 1; phase 2
  // runs without exploration so the covariance head calibrates on the
  // deterministic routing.
  double gate_noise_std = 1.0;
  int gate_noise_epochs = 30;
  std::uint64_t seed = 1;
};

struct EpochLog {
  int phase = 0;
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;               // MSE in phase 1, NLL in phase 2
  std::vector<double> importance_frac;   // per expert, batch-aggregated
  std::vector<double> load_frac;
  int dropped_slots = 0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  int phase1_epochs = 0;
  int phase2_epochs = 0;
};

namespace detail {

inline double validation_metric(MoeModel& model,
                                const std::vector<sim::WindowSample>& val,
                                int batch_size, int phase) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t at = 0; at < val.size(); at += batch_size) {
    const std::size_t end = std::min(val.size(), at + batch_size);
    std::vector<const ImuWindow*> batch;
    std::vector<Eigen::Vector3d> targets;
    for (std::size_t i = at; i < end; ++i) {
      batch.push_back(&val[i].window);
      targets.push_back(val[i].target_v_b);
    }
    ad::Graph g;
    MoeModel::Forward f = model.forward(g, batch);
    const ad::Tensor metric = phase == 1
                                  ? loss_mse(g, f.velocity, targets)
                                  : loss_nll(g, f.velocity, f.log_var, targets);
    total += metric.value() * static_cast<double>(batch.size());
    count += batch.size();
  }
  return total / static_cast<double>(count);
}

}  // namespace detail

/// Trains `model` in place; throws NumericError on divergence and DataError
/// on an empty training set. With no validation windows the training split
/// doubles as validation (single-sample overfit runs).
inline TrainLog train(MoeModel& model, const sim::WindowDataset& data,
                      const TrainConfig& cfg) {
  if (data.train.empty()) throw DataError("train: empty training set");
  const std::vector<sim::WindowSample>& val =
      data.val.empty() ? data.train : data.val;
  const double lambda = model.config().aux_weight;
  const int n_experts = model.config().num_experts;

  TrainLog log;
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x7a));
  std::normal_distribution<double> noise_dist(0.0, 1.0);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int phase = 1; phase <= 2; ++phase) {
    ad::Adam opt(cfg.learning_rate);
    double best = std::numeric_limits<double>::infinity();
    int stale = 0;
    int ran = 0;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double train_total = 0.0;
      std::size_t train_count = 0;
      std::vector<double> importance(n_experts, 0.0), load(n_experts, 0.0);
      int dropped = 0;

      for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), at + cfg.batch_size);
        std::vector<const ImuWindow*> batch;
        std::vector<Eigen::Vector3d> targets;
        for (std::size_t i = at; i < end; ++i) {
          batch.push_back(&data.train[order[i]].window);
          targets.push_back(data.train[order[i]].target_v_b);
        }
        model.params().zero_grad();
        const double noise_std =
            phase == 1 && cfg.gate_noise_epochs > 0
                ? cfg.gate_noise_std *
                      std::max(0.0, 1.0 - static_cast<double>(epoch) /
                                              cfg.gate_noise_epochs)
                : 0.0;
        std::vector<double> gate_noise;
        if (noise_std > 0.0) {
          gate_noise.resize(batch.size() * static_cast<std::size_t>(n_experts));
          for (auto& v : gate_noise) v = noise_std * noise_dist(rng);
        }
        ad::Graph g;
        MoeModel::Forward f =
            model.forward(g, batch, gate_noise.empty() ? nullptr : &gate_noise);
        ad::Tensor fit = phase == 1 ? loss_mse(g, f.velocity, targets)
                                    : loss_nll(g, f.velocity, f.log_var, targets);
        ad::Tensor loss = lambda > 0.0
                              ? g.add(fit, g.scale(loss_aux(g, f.decision, f.selected_weights), lambda))
                              : fit;
        const double loss_value = loss.value();
        if (!std::isfinite(loss_value))
          throw NumericError("train: non-finite loss in phase " +
                             std::to_string(phase) + " epoch " + std::to_string(epoch));
        g.backward(loss);
        opt.step(model.params());

        train_total += loss_value * static_cast<double>(batch.size());
        train_count += batch.size();
        for (int e = 0; e < n_experts; ++e) {
          importance[e] += f.decision.importance[e];
          load[e] += f.decision.load[e];
        }
        dropped += f.decision.dropped_slots;
      }

      EpochLog el;
      el.phase = phase;
      el.epoch = epoch;
      el.train_loss = train_total / static_cast<double>(train_count);
      el.val_metric = detail::validation_metric(model, val, cfg.batch_size, phase);
      double isum = 0.0, lsum = 0.0;
      for (int e = 0; e < n_experts; ++e) {
        isum += importance[e];
        lsum += load[e];
      }
      for (int e = 0; e < n_experts; ++e) {
        el.importance_frac.push_back(isum > 0 ? importance[e] / isum : 0.0);
        el.load_frac.push_back(lsum > 0 ? load[e] / lsum : 0.0);
      }
      el.dropped_slots = dropped;
      log.epochs.push_back(el);
      ++ran;

      if (el.val_metric < best - cfg.min_delta) {
        best = el.val_metric;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
    }
    (phase == 1 ? log.phase1_epochs : log.phase2_epochs) = ran;
  }
  return log;
}

}  // namespace veloio::moe
