#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "veloio/ekf.hpp"
#include "veloio/geom.hpp"
#include "veloio/moe.hpp"

// Synthetic bicycle-ride generator: ground-truth trajectories plus IMU
// streams that mechanize back to the truth exactly (angular rate from
// rotation increments, specific force from velocity increments).
//
// A ride is a list of segment primitives (straight / turn / stop). Speed and
// curvature blend between segments with quintic time scaling. Surface
// roughness scales pedaling surge, road vibration and attitude jitter; at
// roughness 0 the kinematics are exact. Everything is a pure function of the
// spec and its seed.

namespace veloio::sim {

using geom::Rotation;
using geom::Vec3;

struct Segment {
  enum class Kind { Straight, Turn, Stop };
  Kind kind = Kind::Straight;
  double duration = 0.0;  // s (straight/stop; derived for turns)
  double speed = 0.0;     // m/s target
  double radius = 0.0;    // m, turns only
  double angle = 0.0;     // rad, signed, turns only
};

inline constexpr double kMaxSpeed = 10.0;        // m/s
inline constexpr double kMinTurnRadius = 2.0;    // m
inline constexpr double kMaxCentripetal = 6.0;   // m/s^2

inline double segment_duration(const Segment& s, double speed_scale) {
  if (s.kind == Segment::Kind::Turn)
    return std::abs(s.angle) * s.radius / (s.speed * speed_scale);
  return s.duration;
}

struct RideSpec {
  double rate_hz = 100.0;
  std::vector<Segment> plan;
  double roughness = 1.0;  // vibration PSD scale; ~1 paved, ~3 unpaved
  ekf::NoiseParams noise;
  Vec3 init_gyro_bias = Vec3::Zero();
  Vec3 init_accel_bias = Vec3::Zero();
  bool add_noise = true;  // oracles use noise-free streams
  std::uint64_t seed = 1;
  // participant profile
  double speed_scale = 1.0;
  double cadence_scale = 1.0;

  double duration() const {
    double d = 0.0;
    for (const auto& s : plan) d += segment_duration(s, speed_scale);
    return d;
  }

  void validate() const {
    if (!(rate_hz > 0.0)) throw ConfigError("ride: rate must be positive");
    if (roughness < 0.0) throw ConfigError("ride: roughness must be >= 0");
    for (const auto& s : plan) {
      const double v = s.speed * speed_scale;
      if (v < 0.0 || v > kMaxSpeed)
        throw ConfigError("ride: constraint violated: 0 <= speed <= 10 m/s (got " +
                          str(v) + ")");
      if (s.kind == Segment::Kind::Turn) {
        if (s.radius < kMinTurnRadius)
          throw ConfigError("ride: constraint violated: turn radius >= 2 m (got " +
                            str(s.radius) + ")");
        if (!(v > 0.0)) throw ConfigError("ride: turn requires positive speed");
        const double a_c = v * v / s.radius;
        if (a_c > kMaxCentripetal)
          throw ConfigError(
              "ride: constraint violated: centripetal acceleration <= 6 m/s^2 (got " +
              str(a_c) + ")");
      }
      if (s.kind != Segment::Kind::Turn && !(s.duration >= 0.0))
        throw ConfigError("ride: segment duration must be >= 0");
    }
  }
};

struct GroundTruth {
  std::vector<double> t;
  std::vector<Rotation> rot;          // body -> nav
  std::vector<Vec3> vel_n, pos_n, vel_b;

  std::size_t size() const { return t.size(); }

  // internal-consistency invariants; cheap enough to assert after generation
  void validate() const {
    for (std::size_t k = 0; k < size(); ++k) {
      const Vec3 vb = rot[k].matrix().transpose() * vel_n[k];
      if ((vb - vel_b[k]).cwiseAbs().maxCoeff() > 1e-12)
        throw ContractError("GroundTruth: v_b inconsistent with R and v_n");
    }
    for (std::size_t k = 1; k < size(); ++k) {
      const double dt = t[k] - t[k - 1];
      const Vec3 p = pos_n[k - 1] + 0.5 * (vel_n[k - 1] + vel_n[k]) * dt;
      if ((p - pos_n[k]).cwiseAbs().maxCoeff() > 1e-9)
        throw ContractError("GroundTruth: p is not the trapezoidal integral of v");
    }
  }
};

namespace detail {

inline double quintic(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
}

struct SegmentSpan {
  double t0 = 0.0, t1 = 0.0;
  double speed = 0.0, curvature = 0.0;
  double blend_in = 0.0;          // s, quintic ramp at the segment start
  double prev_speed = 0.0, prev_curvature = 0.0;
};

inline std::vector<SegmentSpan> build_timeline(const RideSpec& spec) {
  std::vector<SegmentSpan> spans;
  double t = 0.0, prev_speed = 0.0, prev_curv = 0.0;
  bool first = true;
  for (const auto& s : spec.plan) {
    SegmentSpan sp;
    sp.speed = s.kind == Segment::Kind::Stop ? 0.0 : s.speed * spec.speed_scale;
    sp.curvature = s.kind == Segment::Kind::Turn
                       ? (s.angle >= 0 ? 1.0 : -1.0) / s.radius
                       : 0.0;
    const double duration = segment_duration(s, spec.speed_scale);
    sp.t0 = t;
    sp.t1 = t + duration;
    sp.prev_speed = first ? sp.speed : prev_speed;  // ride starts at speed
    sp.prev_curvature = first ? sp.curvature : prev_curv;
    sp.blend_in = first ? 0.0 : std::min(3.0, 0.4 * duration);
    spans.push_back(sp);
    t = sp.t1;
    prev_speed = sp.speed;
    prev_curv = sp.curvature;
    first = false;
  }
  return spans;
}

inline void speed_curvature_at(const std::vector<SegmentSpan>& spans, double t,
                               double* speed, double* curv) {
  if (spans.empty()) {
    *speed = 0.0;
    *curv = 0.0;
    return;
  }
  const SegmentSpan* sp = &spans.back();
  for (const auto& s : spans)
    if (t < s.t1) {
      sp = &s;
      break;
    }
  const double local = t - sp->t0;
  if (sp->blend_in > 0.0 && local < sp->blend_in) {
    const double u = quintic(local / sp->blend_in);
    *speed = sp->prev_speed + (sp->speed - sp->prev_speed) * u;
    *curv = sp->prev_curvature + (sp->curvature - sp->prev_curvature) * u;
  } else {
    *speed = sp->speed;
    *curv = sp->curvature;
  }
}

}  // namespace detail

/// Closed-form segment kinematics sampled at the IMU rate; N+1 epochs for a
/// duration of N samples. Position is the trapezoidal integral of the
/// emitted velocity, so the GroundTruth invariants hold by construction.
inline GroundTruth gen_trajectory(const RideSpec& spec) {
  spec.validate();
  GroundTruth gt;
  const double duration = spec.duration();
  const std::int64_t n = std::llround(duration * spec.rate_hz);
  if (n <= 0) return gt;  // zero-duration spec: empty truth, not an error
  const double dt = 1.0 / spec.rate_hz;

  const auto spans = detail::build_timeline(spec);
  std::mt19937_64 rng(mix_seed(spec.seed, 0x51));
  std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
  const double ph_surge = phase(rng), ph_z = phase(rng), ph_lat = phase(rng),
               ph_roll = phase(rng), ph_pitch = phase(rng);

  // fine-grid integration of heading and of the vibration phases
  const int sub = 8;
  const double fdt = dt / sub;
  const double g = ekf::kDefaultGravity;

  gt.t.reserve(n + 1);
  gt.rot.reserve(n + 1);
  gt.vel_n.reserve(n + 1);
  gt.pos_n.reserve(n + 1);
  gt.vel_b.reserve(n + 1);

  double heading = 0.0;
  double th_cad = 0.0, th_road = 0.0;  // accumulated phase, rad
  double prev_speed = 0.0, prev_curv = 0.0, prev_fcad = 0.0, prev_froad = 0.0;
  detail::speed_curvature_at(spans, 0.0, &prev_speed, &prev_curv);
  prev_fcad = spec.cadence_scale * 0.4 * prev_speed;
  prev_froad = 2.0 * prev_speed;

  const double rough = spec.roughness;
  auto emit = [&](double t, double speed, double curv) {
    const double c = std::cos(heading), s = std::sin(heading);
    const Vec3 forward(c, s, 0.0), left(-s, c, 0.0);
    const double amp_surge = 0.015 * rough * speed;
    const double amp_z = 0.004 * rough * speed;
    const double amp_lat = 0.002 * rough * speed;
    Vec3 v = speed * forward;
    v += amp_surge * std::sin(th_cad + ph_surge) * forward;
    v += amp_lat * std::sin(0.31 * th_road + ph_lat) * left;
    v += amp_z * std::sin(th_road + ph_z) * Vec3::UnitZ();

    const double bank = std::atan2(speed * speed * curv, g);
    const double roll_jit = 0.01 * rough * std::min(speed, 5.0) / 5.0 *
                            std::sin(0.77 * th_road + ph_roll);
    const double pitch_jit = 0.006 * rough * std::min(speed, 5.0) / 5.0 *
                             std::sin(0.53 * th_road + ph_pitch);
    const Rotation rot = geom::rot_z(heading) * geom::rot_y(pitch_jit) *
                         geom::rot_x(bank + roll_jit);

    gt.t.push_back(t);
    gt.rot.push_back(rot);
    gt.vel_n.push_back(v);
    if (gt.pos_n.empty()) {
      gt.pos_n.push_back(Vec3::Zero());
    } else {
      const double step = t - gt.t[gt.t.size() - 2];
      gt.pos_n.push_back(gt.pos_n.back() +
                         0.5 * (gt.vel_n[gt.vel_n.size() - 2] + v) * step);
    }
    gt.vel_b.push_back(rot.matrix().transpose() * v);
  };

  emit(0.0, prev_speed, prev_curv);
  for (std::int64_t k = 0; k < n; ++k) {
    for (int j = 1; j <= sub; ++j) {
      const double t = (k + static_cast<double>(j) / sub) * dt;
      double speed, curv;
      detail::speed_curvature_at(spans, t, &speed, &curv);
      const double fcad = spec.cadence_scale * 0.4 * speed;
      const double froad = 2.0 * speed;
      // trapezoidal phase/heading accumulation on the fine grid
      heading += 0.5 * (prev_curv * prev_speed + curv * speed) * fdt;
      th_cad += M_PI * (prev_fcad + fcad) * fdt;    // 2*pi*f, trapezoid
      th_road += M_PI * (prev_froad + froad) * fdt;
      prev_speed = speed;
      prev_curv = curv;
      prev_fcad = fcad;
      prev_froad = froad;
      if (j == sub) emit(t, speed, curv);
    }
  }
  gt.validate();
  return gt;
}

/// Inverse mechanization plus sensor errors. Sample k covers
/// [t_k, t_{k+1}): angular rate from the rotation increment, specific force
/// from the velocity increment, both exact inverses of the filter's
/// propagation model. Bias random walk and white noise are added per spec.
inline std::vector<ekf::ImuSample> synthesize_imu(const GroundTruth& truth,
                                                  const RideSpec& spec) {
  std::vector<ekf::ImuSample> out;
  if (truth.size() < 2) return out;
  const Vec3 gravity(0, 0, ekf::kDefaultGravity);

  std::mt19937_64 rng(mix_seed(spec.seed, 0x1a));
  std::normal_distribution<double> nd(0.0, 1.0);
  Vec3 bg = spec.init_gyro_bias, ba = spec.init_accel_bias;

  out.reserve(truth.size() - 1);
  for (std::size_t k = 0; k + 1 < truth.size(); ++k) {
    const double dt = truth.t[k + 1] - truth.t[k];
    const Rotation inc = Rotation::from_matrix_unchecked(
        truth.rot[k].matrix().transpose() * truth.rot[k + 1].matrix());
    ekf::ImuSample s;
    s.t = truth.t[k];
    s.gyro = geom::so3_log(inc) / dt;
    s.accel = truth.rot[k].matrix().transpose() *
              ((truth.vel_n[k + 1] - truth.vel_n[k]) / dt - gravity);
    if (spec.add_noise) {
      const double wg = spec.noise.gyro_noise / std::sqrt(dt);
      const double wa = spec.noise.accel_noise / std::sqrt(dt);
      s.gyro += bg + Vec3(nd(rng), nd(rng), nd(rng)) * wg;
      s.accel += ba + Vec3(nd(rng), nd(rng), nd(rng)) * wa;
      const double qg = spec.noise.gyro_bias_walk * std::sqrt(dt);
      const double qa = spec.noise.accel_bias_walk * std::sqrt(dt);
      bg += Vec3(nd(rng), nd(rng), nd(rng)) * qg;
      ba += Vec3(nd(rng), nd(rng), nd(rng)) * qa;
    }
    out.push_back(s);
  }
  return out;
}

struct Ride {
  GroundTruth truth;
  std::vector<ekf::ImuSample> imu;
};

struct WindowSample {
  moe::ImuWindow window;
  Eigen::Vector3d target_v_b = Eigen::Vector3d::Zero();
  double t_end = 0.0;
  int ride = -1;
};

struct WindowDataset {
  std::vector<WindowSample> train, val, test;
  bool any_too_short = false;
};

/// Sliding windows of length L at `stride`; the target is the truth body
/// velocity at the window's last sample epoch. Orientation rows carry the
/// body-frame gravity direction from the truth attitude, perturbed by one
/// small random rotation per window (sigma per axis in degrees) to emulate
/// filter-fed orientation. Rides split 70/10/20 into train/val/test, whole
/// rides only.
inline WindowDataset make_windows(const std::vector<Ride>& rides,
                                  const moe::MoeConfig& cfg, int stride,
                                  double jitter_deg, std::uint64_t seed) {
  if (stride < 1) throw ConfigError("make_windows: stride must be >= 1");
  WindowDataset ds;
  const int n_rides = static_cast<int>(rides.size());
  int n_val = 0, n_test = 0;
  if (n_rides >= 3) {
    n_val = std::max(1, static_cast<int>(std::lround(0.1 * n_rides)));
    n_test = std::max(1, static_cast<int>(std::lround(0.2 * n_rides)));
  } else if (n_rides == 2) {
    n_val = 1;
  }
  const int n_train = n_rides - n_val - n_test;

  std::mt19937_64 rng(mix_seed(seed, 0x3e));
  std::normal_distribution<double> nd(0.0, 1.0);
  const double jitter_rad = jitter_deg * M_PI / 180.0;
  const int l = cfg.window_len;

  for (int r = 0; r < n_rides; ++r) {
    const auto& ride = rides[r];
    const int n_samples = static_cast<int>(ride.imu.size());
    if (n_samples < l) {
      ds.any_too_short = true;
      continue;
    }
    auto* dest = &ds.train;
    if (r >= n_train && r < n_train + n_val) dest = &ds.val;
    if (r >= n_train + n_val) dest = &ds.test;

    for (int start = 0; start + l <= n_samples; start += stride) {
      WindowSample w;
      w.ride = r;
      w.window.len = l;
      w.window.data.resize(static_cast<std::size_t>(9) * l);
      const Vec3 eps = jitter_rad * Vec3(nd(rng), nd(rng), nd(rng));
      const geom::Mat3 pert = geom::so3_exp(eps).matrix();  // R_used = R * pert
      for (int j = 0; j < l; ++j) {
        const int k = start + j;
        const auto& s = ride.imu[k];
        w.window.at(0, j) = s.gyro.x();
        w.window.at(1, j) = s.gyro.y();
        w.window.at(2, j) = s.gyro.z();
        w.window.at(3, j) = s.accel.x();
        w.window.at(4, j) = s.accel.y();
        w.window.at(5, j) = s.accel.z();
        const Vec3 gdir =
            (ride.truth.rot[k].matrix() * pert).transpose() * Vec3::UnitZ();
        w.window.at(6, j) = gdir.x();
        w.window.at(7, j) = gdir.y();
        w.window.at(8, j) = gdir.z();
      }
      const int last = start + l - 1;
      w.target_v_b = ride.truth.vel_b[last];
      w.t_end = ride.imu[last].t;
      dest->push_back(std::move(w));
    }
  }
  return ds;
}

}  // namespace veloio::sim
