#pragma once

#include <memory>
#include <vector>

#include "veloio/ekf.hpp"
#include "veloio/moe.hpp"

// Tightly-coupled fusion loop: propagate the filter at IMU rate; every
// update stride assemble a window from the raw samples plus the filter's own
// causal orientation history and apply the network's body-velocity estimate
// as a measurement.

namespace veloio::fuse {

using ekf::Vec3;

struct VelocitySource {
  virtual ~VelocitySource() = default;
  virtual moe::VelocityEstimate estimate(const moe::ImuWindow& window,
                                         double t_end) = 0;
};

struct MoeVelocitySource final : VelocitySource {
  explicit MoeVelocitySource(moe::MoeModel& m) : model(m) {}
  moe::VelocityEstimate estimate(const moe::ImuWindow& window, double) override {
    auto [est, dec] = model.infer({&window});
    return est[0];
  }
  moe::MoeModel& model;
};

/// Ground-truth body velocity interpolated at the window end; stands in for
/// a perfect network (--oracle-velocity).
struct OracleVelocitySource final : VelocitySource {
  OracleVelocitySource(std::vector<double> ts, std::vector<Vec3> v_body,
                       double sigma = 0.05)
      : t(std::move(ts)), v_b(std::move(v_body)), variance(sigma * sigma) {
    if (t.size() != v_b.size() || t.empty())
      throw DataError("oracle source: timestamp/velocity size mismatch");
  }
  moe::VelocityEstimate estimate(const moe::ImuWindow&, double t_end) override {
    moe::VelocityEstimate e;
    auto it = std::lower_bound(t.begin(), t.end(), t_end);
    if (it == t.begin()) {
      e.v_b = v_b.front();
    } else if (it == t.end()) {
      e.v_b = v_b.back();
    } else {
      const std::size_t i = static_cast<std::size_t>(it - t.begin());
      const double u = (t_end - t[i - 1]) / (t[i] - t[i - 1]);
      e.v_b = (1.0 - u) * v_b[i - 1] + u * v_b[i];
    }
    e.sigma_diag = Vec3::Constant(variance);
    return e;
  }
  std::vector<double> t;
  std::vector<Vec3> v_b;
  double variance;
};

struct TrajectoryRecord {
  double t = 0.0;
  geom::Rotation rot;
  Vec3 vel_n = Vec3::Zero();
  Vec3 pos_n = Vec3::Zero();
  Vec3 gyro_bias = Vec3::Zero();
  Vec3 accel_bias = Vec3::Zero();
  ekf::Vec15 cov_diag = ekf::Vec15::Zero();
};

struct FuseConfig {
  int window_len = 200;       // L, samples
  int update_stride = 10;     // samples between measurement updates
  int init_avg_samples = 50;  // stationary samples averaged for leveling
  double chi2_gate = ekf::kChi2Gate3Dof999;
  double gravity = ekf::kDefaultGravity;
  ekf::NoiseParams noise;
};

struct FuseSummary {
  int samples = 0;
  int updates_applied = 0;
  int updates_rejected = 0;
  bool propagation_only = false;  // stream shorter than one window
};

struct FuseResult {
  std::vector<TrajectoryRecord> records;  // one per IMU epoch, plus the init epoch
  FuseSummary summary;
};

/// `source` may be null for a propagation-only (dead-reckoning) run.
inline FuseResult run_fused(const std::vector<ekf::ImuSample>& stream,
                            VelocitySource* source, const FuseConfig& cfg) {
  if (stream.empty()) throw DataError("run_fused: empty IMU stream");
  if (cfg.window_len < 1 || cfg.update_stride < 1)
    throw ConfigError("run_fused: window and stride must be positive");
  for (std::size_t k = 1; k < stream.size(); ++k)
    if (!(stream[k].t > stream[k - 1].t))
      throw DataError("run_fused: non-increasing timestamps at sample " +
                      std::to_string(k));

  // leveling from the averaged leading stationary stretch
  ekf::ImuSample first;
  const int m = std::min<int>(cfg.init_avg_samples, static_cast<int>(stream.size()));
  for (int k = 0; k < m; ++k) {
    first.gyro += stream[k].gyro;
    first.accel += stream[k].accel;
  }
  first.gyro /= m;
  first.accel /= m;
  first.t = stream.front().t;

  ekf::Filter filter =
      ekf::Filter::init(first, cfg.noise, cfg.gravity, cfg.chi2_gate);

  FuseResult out;
  out.summary.samples = static_cast<int>(stream.size());
  out.summary.propagation_only =
      static_cast<int>(stream.size()) < cfg.window_len || source == nullptr;

  auto record = [&](double t) {
    TrajectoryRecord r;
    r.t = t;
    r.rot = filter.state().rot;
    r.vel_n = filter.state().vel_n;
    r.pos_n = filter.state().pos_n;
    r.gyro_bias = filter.state().gyro_bias;
    r.accel_bias = filter.state().accel_bias;
    r.cov_diag = filter.cov().diagonal();
    out.records.push_back(r);
  };
  record(stream.front().t);

  // causal per-epoch gravity-direction history for window assembly
  std::vector<Vec3> gravity_dir;
  gravity_dir.reserve(stream.size());

  const int l = cfg.window_len;
  for (std::size_t k = 0; k < stream.size(); ++k) {
    gravity_dir.push_back(filter.state().rot.matrix().transpose() * Vec3::UnitZ());
    const double dt = k + 1 < stream.size()
                          ? stream[k + 1].t - stream[k].t
                          : (k > 0 ? stream[k].t - stream[k - 1].t : 0.01);
    filter.propagate(stream[k], dt);

    const int ki = static_cast<int>(k);
    if (source != nullptr && ki >= l - 1 && (ki - (l - 1)) % cfg.update_stride == 0) {
      moe::ImuWindow w;
      w.len = l;
      w.data.resize(static_cast<std::size_t>(9) * l);
      for (int j = 0; j < l; ++j) {
        const auto& s = stream[k + 1 - l + j];
        const Vec3& gd = gravity_dir[k + 1 - l + j];
        w.at(0, j) = s.gyro.x();
        w.at(1, j) = s.gyro.y();
        w.at(2, j) = s.gyro.z();
        w.at(3, j) = s.accel.x();
        w.at(4, j) = s.accel.y();
        w.at(5, j) = s.accel.z();
        w.at(6, j) = gd.x();
        w.at(7, j) = gd.y();
        w.at(8, j) = gd.z();
      }
      // the state epoch after consuming sample k: the last sample's span end
      const moe::VelocityEstimate est = source->estimate(w, stream[k].t + dt);
      const ekf::UpdateResult res =
          filter.update_velocity(est.v_b, est.sigma_diag);
      if (res.rejected)
        ++out.summary.updates_rejected;
      else
        ++out.summary.updates_applied;
    }
    record(stream[k].t + dt);
  }
  return out;
}

}  // namespace veloio::fuse
