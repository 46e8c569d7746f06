#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "veloio/ekf.hpp"
#include "veloio/io.hpp"
#include "veloio/moe.hpp"
#include "veloio/sim.hpp"
#include "veloio/train.hpp"

// Plain-text run configuration: `section.key = value` lines, `#` comments.
// Unknown keys are rejected with their line number; cross-field constraints
// are validated after parsing. Every field has a default, so an empty file
// is a valid config.

namespace veloio::cfg {

inline constexpr int kSchemaVersion = 1;

struct RunConfig {
  int schema = kSchemaVersion;
  std::uint64_t seed = 1;

  moe::MoeConfig moe;
  moe::TrainConfig train;
  int train_stride = 10;             // window stride, samples
  double orientation_jitter_deg = 2.0;

  ekf::NoiseParams noise;

  // ride generation
  double ride_rate_hz = 100.0;
  std::string ride_plan = "stop,2; straight,20,5; turn,15,180,5; straight,20,5; stop,2";
  double ride_roughness = 1.0;
  int ride_count = 4;
  bool ride_add_noise = true;
  Eigen::Vector3d ride_init_gyro_bias = Eigen::Vector3d::Zero();
  Eigen::Vector3d ride_init_accel_bias = Eigen::Vector3d::Zero();
  double ride_speed_spread = 0.15;    // participant profile, +/- fraction
  double ride_cadence_spread = 0.2;

  // fusion
  int ekf_update_stride = 10;
  int ekf_init_avg_samples = 50;
  double ekf_chi2_gate = ekf::kChi2Gate3Dof999;
  double ekf_gravity = ekf::kDefaultGravity;
  double oracle_sigma = 0.05;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    std::size_t next = s.find(sep, pos);
    if (next == std::string::npos) next = s.size();
    out.push_back(trim(s.substr(pos, next - pos)));
    pos = next + 1;
  }
  return out;
}

inline double parse_double(const std::string& v, int line) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config line " + std::to_string(line) +
                      ": expected a number, got '" + v + "'");
  }
}

inline int parse_int(const std::string& v, int line) {
  const double d = parse_double(v, line);
  if (d != std::floor(d))
    throw ConfigError("config line " + std::to_string(line) +
                      ": expected an integer, got '" + v + "'");
  return static_cast<int>(d);
}

inline bool parse_bool(const std::string& v, int line) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config line " + std::to_string(line) +
                    ": expected a boolean, got '" + v + "'");
}

inline Eigen::Vector3d parse_vec3(const std::string& v, int line) {
  const auto parts = split(v, ',');
  if (parts.size() != 3)
    throw ConfigError("config line " + std::to_string(line) +
                      ": expected three comma-separated numbers, got '" + v + "'");
  return {parse_double(parts[0], line), parse_double(parts[1], line),
          parse_double(parts[2], line)};
}

}  // namespace detail

/// Segment plan grammar: primitives separated by ';':
///   stop,<duration_s>
///   straight,<duration_s>,<speed_mps>
///   turn,<radius_m>,<angle_deg>,<speed_mps>
inline std::vector<sim::Segment> parse_plan(const std::string& text) {
  std::vector<sim::Segment> plan;
  for (const std::string& part : detail::split(text, ';')) {
    if (part.empty()) continue;
    const auto f = detail::split(part, ',');
    sim::Segment s;
    if (f[0] == "stop" && f.size() == 2) {
      s.kind = sim::Segment::Kind::Stop;
      s.duration = detail::parse_double(f[1], 0);
    } else if (f[0] == "straight" && f.size() == 3) {
      s.kind = sim::Segment::Kind::Straight;
      s.duration = detail::parse_double(f[1], 0);
      s.speed = detail::parse_double(f[2], 0);
    } else if (f[0] == "turn" && f.size() == 4) {
      s.kind = sim::Segment::Kind::Turn;
      s.radius = detail::parse_double(f[1], 0);
      s.angle = detail::parse_double(f[2], 0) * M_PI / 180.0;
      s.speed = detail::parse_double(f[3], 0);
    } else {
      throw ConfigError("ride.plan: cannot parse segment '" + part + "'");
    }
    plan.push_back(s);
  }
  return plan;
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig c;
  using Setter = std::function<void(RunConfig&, const std::string&, int)>;
  namespace d = detail;
  static const std::map<std::string, Setter> keys = {
      {"meta.schema", [](RunConfig& c, const std::string& v, int l) { c.schema = d::parse_int(v, l); }},
      {"run.seed", [](RunConfig& c, const std::string& v, int l) { c.seed = static_cast<std::uint64_t>(d::parse_double(v, l)); }},
      {"moe.N", [](RunConfig& c, const std::string& v, int l) { c.moe.num_experts = d::parse_int(v, l); }},
      {"moe.K", [](RunConfig& c, const std::string& v, int l) { c.moe.top_k = d::parse_int(v, l); }},
      {"moe.c", [](RunConfig& c, const std::string& v, int l) { c.moe.capacity_factor = d::parse_double(v, l); }},
      {"moe.L", [](RunConfig& c, const std::string& v, int l) { c.moe.window_len = d::parse_int(v, l); }},
      {"moe.N_patch", [](RunConfig& c, const std::string& v, int l) { c.moe.num_patches = d::parse_int(v, l); }},
      {"moe.L_feature", [](RunConfig& c, const std::string& v, int l) { c.moe.patch_len = d::parse_int(v, l); }},
      {"moe.L_inner_feature", [](RunConfig& c, const std::string& v, int l) { c.moe.inner_dim = d::parse_int(v, l); }},
      {"moe.L_out_dim", [](RunConfig& c, const std::string& v, int l) { c.moe.out_dim = d::parse_int(v, l); }},
      {"moe.depth", [](RunConfig& c, const std::string& v, int l) { c.moe.depth = d::parse_int(v, l); }},
      {"moe.lambda", [](RunConfig& c, const std::string& v, int l) { c.moe.aux_weight = d::parse_double(v, l); }},
      {"train.lr", [](RunConfig& c, const std::string& v, int l) { c.train.learning_rate = d::parse_double(v, l); }},
      {"train.batch", [](RunConfig& c, const std::string& v, int l) { c.train.batch_size = d::parse_int(v, l); }},
      {"train.max_epochs", [](RunConfig& c, const std::string& v, int l) { c.train.max_epochs = d::parse_int(v, l); }},
      {"train.patience", [](RunConfig& c, const std::string& v, int l) { c.train.patience = d::parse_int(v, l); }},
      {"train.min_delta", [](RunConfig& c, const std::string& v, int l) { c.train.min_delta = d::parse_double(v, l); }},
      {"train.stride", [](RunConfig& c, const std::string& v, int l) { c.train_stride = d::parse_int(v, l); }},
      {"train.orientation_jitter_deg", [](RunConfig& c, const std::string& v, int l) { c.orientation_jitter_deg = d::parse_double(v, l); }},
      {"noise.gyro_noise", [](RunConfig& c, const std::string& v, int l) { c.noise.gyro_noise = d::parse_double(v, l); }},
      {"noise.accel_noise", [](RunConfig& c, const std::string& v, int l) { c.noise.accel_noise = d::parse_double(v, l); }},
      {"noise.gyro_bias_walk", [](RunConfig& c, const std::string& v, int l) { c.noise.gyro_bias_walk = d::parse_double(v, l); }},
      {"noise.accel_bias_walk", [](RunConfig& c, const std::string& v, int l) { c.noise.accel_bias_walk = d::parse_double(v, l); }},
      {"noise.init_att_sigma", [](RunConfig& c, const std::string& v, int l) { c.noise.init_att_sigma = d::parse_double(v, l); }},
      {"noise.init_yaw_sigma", [](RunConfig& c, const std::string& v, int l) { c.noise.init_yaw_sigma = d::parse_double(v, l); }},
      {"noise.init_vel_sigma", [](RunConfig& c, const std::string& v, int l) { c.noise.init_vel_sigma = d::parse_double(v, l); }},
      {"noise.init_pos_sigma", [](RunConfig& c, const std::string& v, int l) { c.noise.init_pos_sigma = d::parse_double(v, l); }},
      {"noise.init_gyro_bias_sigma", [](RunConfig& c, const std::string& v, int l) { c.noise.init_gyro_bias_sigma = d::parse_double(v, l); }},
      {"noise.init_accel_bias_sigma", [](RunConfig& c, const std::string& v, int l) { c.noise.init_accel_bias_sigma = d::parse_double(v, l); }},
      {"ride.rate_hz", [](RunConfig& c, const std::string& v, int l) { c.ride_rate_hz = d::parse_double(v, l); }},
      {"ride.plan", [](RunConfig& c, const std::string& v, int) { c.ride_plan = v; }},
      {"ride.roughness", [](RunConfig& c, const std::string& v, int l) { c.ride_roughness = d::parse_double(v, l); }},
      {"ride.count", [](RunConfig& c, const std::string& v, int l) { c.ride_count = d::parse_int(v, l); }},
      {"ride.add_noise", [](RunConfig& c, const std::string& v, int l) { c.ride_add_noise = d::parse_bool(v, l); }},
      {"ride.init_gyro_bias", [](RunConfig& c, const std::string& v, int l) { c.ride_init_gyro_bias = d::parse_vec3(v, l); }},
      {"ride.init_accel_bias", [](RunConfig& c, const std::string& v, int l) { c.ride_init_accel_bias = d::parse_vec3(v, l); }},
      {"ride.speed_spread", [](RunConfig& c, const std::string& v, int l) { c.ride_speed_spread = d::parse_double(v, l); }},
      {"ride.cadence_spread", [](RunConfig& c, const std::string& v, int l) { c.ride_cadence_spread = d::parse_double(v, l); }},
      {"ekf.update_stride", [](RunConfig& c, const std::string& v, int l) { c.ekf_update_stride = d::parse_int(v, l); }},
      {"ekf.init_avg_samples", [](RunConfig& c, const std::string& v, int l) { c.ekf_init_avg_samples = d::parse_int(v, l); }},
      {"ekf.chi2_gate", [](RunConfig& c, const std::string& v, int l) { c.ekf_chi2_gate = d::parse_double(v, l); }},
      {"ekf.gravity", [](RunConfig& c, const std::string& v, int l) { c.ekf_gravity = d::parse_double(v, l); }},
      {"oracle.sigma", [](RunConfig& c, const std::string& v, int l) { c.oracle_sigma = d::parse_double(v, l); }},
  };

  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected 'section.key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto it = keys.find(key);
    if (it == keys.end())
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": unknown key '" + key + "'");
    it->second(c, value, line_no);
  }

  // cross-field validation
  if (c.schema != kSchemaVersion)
    throw ConfigError("config: unsupported meta.schema " + std::to_string(c.schema));
  c.moe.validate();
  c.noise.validate();
  if (c.train.batch_size < 1 || c.train.max_epochs < 0 || c.train.patience < 1)
    throw ConfigError("config: train.batch/max_epochs/patience out of range");
  if (c.train_stride < 1) throw ConfigError("config: train.stride must be >= 1");
  if (c.ekf_update_stride < 1 || c.ekf_init_avg_samples < 1)
    throw ConfigError("config: ekf strides must be >= 1");
  if (!(c.ride_rate_hz > 0.0)) throw ConfigError("config: ride.rate_hz must be positive");
  if (c.ride_count < 1) throw ConfigError("config: ride.count must be >= 1");
  if (!(c.oracle_sigma > 0.0)) throw ConfigError("config: oracle.sigma must be positive");
  // plan must parse and be feasible
  sim::RideSpec probe;
  probe.rate_hz = c.ride_rate_hz;
  probe.plan = parse_plan(c.ride_plan);
  probe.roughness = c.ride_roughness;
  probe.validate();
  return c;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Canonical echo of the effective configuration, reparseable as a config.
inline std::string echo(const RunConfig& c) {
  std::ostringstream o;
  auto d = [](double v) { return io::format_double(v); };
  o << "meta.schema = " << c.schema << "\n";
  o << "run.seed = " << c.seed << "\n";
  o << "moe.N = " << c.moe.num_experts << "\n";
  o << "moe.K = " << c.moe.top_k << "\n";
  o << "moe.c = " << d(c.moe.capacity_factor) << "\n";
  o << "moe.L = " << c.moe.window_len << "\n";
  o << "moe.N_patch = " << c.moe.num_patches << "\n";
  o << "moe.L_feature = " << c.moe.patch_len << "\n";
  o << "moe.L_inner_feature = " << c.moe.inner_dim << "\n";
  o << "moe.L_out_dim = " << c.moe.out_dim << "\n";
  o << "moe.depth = " << c.moe.depth << "\n";
  o << "moe.lambda = " << d(c.moe.aux_weight) << "\n";
  o << "train.lr = " << d(c.train.learning_rate) << "\n";
  o << "train.batch = " << c.train.batch_size << "\n";
  o << "train.max_epochs = " << c.train.max_epochs << "\n";
  o << "train.patience = " << c.train.patience << "\n";
  o << "train.min_delta = " << d(c.train.min_delta) << "\n";
  o << "train.stride = " << c.train_stride << "\n";
  o << "train.orientation_jitter_deg = " << d(c.orientation_jitter_deg) << "\n";
  o << "noise.gyro_noise = " << d(c.noise.gyro_noise) << "\n";
  o << "noise.accel_noise = " << d(c.noise.accel_noise) << "\n";
  o << "noise.gyro_bias_walk = " << d(c.noise.gyro_bias_walk) << "\n";
  o << "noise.accel_bias_walk = " << d(c.noise.accel_bias_walk) << "\n";
  o << "noise.init_att_sigma = " << d(c.noise.init_att_sigma) << "\n";
  o << "noise.init_yaw_sigma = " << d(c.noise.init_yaw_sigma) << "\n";
  o << "noise.init_vel_sigma = " << d(c.noise.init_vel_sigma) << "\n";
  o << "noise.init_pos_sigma = " << d(c.noise.init_pos_sigma) << "\n";
  o << "noise.init_gyro_bias_sigma = " << d(c.noise.init_gyro_bias_sigma) << "\n";
  o << "noise.init_accel_bias_sigma = " << d(c.noise.init_accel_bias_sigma) << "\n";
  o << "ride.rate_hz = " << d(c.ride_rate_hz) << "\n";
  o << "ride.plan = " << c.ride_plan << "\n";
  o << "ride.roughness = " << d(c.ride_roughness) << "\n";
  o << "ride.count = " << c.ride_count << "\n";
  o << "ride.add_noise = " << (c.ride_add_noise ? "true" : "false") << "\n";
  o << "ride.init_gyro_bias = " << d(c.ride_init_gyro_bias.x()) << ", "
    << d(c.ride_init_gyro_bias.y()) << ", " << d(c.ride_init_gyro_bias.z()) << "\n";
  o << "ride.init_accel_bias = " << d(c.ride_init_accel_bias.x()) << ", "
    << d(c.ride_init_accel_bias.y()) << ", " << d(c.ride_init_accel_bias.z()) << "\n";
  o << "ride.speed_spread = " << d(c.ride_speed_spread) << "\n";
  o << "ride.cadence_spread = " << d(c.ride_cadence_spread) << "\n";
  o << "ekf.update_stride = " << c.ekf_update_stride << "\n";
  o << "ekf.init_avg_samples = " << c.ekf_init_avg_samples << "\n";
  o << "ekf.chi2_gate = " << d(c.ekf_chi2_gate) << "\n";
  o << "ekf.gravity = " << d(c.ekf_gravity) << "\n";
  o << "oracle.sigma = " << d(c.oracle_sigma) << "\n";
  return o.str();
}

/// Ride spec for ride index `i`, with the participant profile drawn from the
/// run seed. Speed scaling is clamped so scaled plans stay feasible.
inline sim::RideSpec ride_spec_for(const RunConfig& c, int i) {
  sim::RideSpec spec;
  spec.rate_hz = c.ride_rate_hz;
  spec.plan = parse_plan(c.ride_plan);
  spec.roughness = c.ride_roughness;
  spec.noise = c.noise;
  spec.init_gyro_bias = c.ride_init_gyro_bias;
  spec.init_accel_bias = c.ride_init_accel_bias;
  spec.add_noise = c.ride_add_noise;
  spec.seed = mix_seed(c.seed, 0x100 + static_cast<std::uint64_t>(i));

  std::mt19937_64 rng(mix_seed(c.seed, 0x200 + static_cast<std::uint64_t>(i)));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  // largest feasible speed scale for the plan's turns and speed cap
  double max_scale = 2.0;
  for (const auto& s : spec.plan) {
    if (s.speed > 0.0) max_scale = std::min(max_scale, sim::kMaxSpeed / s.speed);
    if (s.kind == sim::Segment::Kind::Turn)
      max_scale = std::min(max_scale,
                           std::sqrt(sim::kMaxCentripetal * s.radius) / s.speed);
  }
  const double want = 1.0 + c.ride_speed_spread * u(rng);
  spec.speed_scale = std::min(want, 0.999 * max_scale);
  spec.cadence_scale = 1.0 + c.ride_cadence_spread * u(rng);
  return spec;
}

}  // namespace veloio::cfg
