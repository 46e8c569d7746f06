// veloio: simulate / train / fuse / eval pipeline for MoE-aided inertial
// cycling odometry.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "veloio/checkpoint.hpp"
#include "veloio/config.hpp"
#include "veloio/eval.hpp"
#include "veloio/fuse.hpp"
#include "veloio/io.hpp"
#include "veloio/sim.hpp"
#include "veloio/train.hpp"

namespace fs = std::filesystem;
using namespace veloio;

namespace {

// Tracks files created by a command so a failure removes partial outputs.
class OutputGuard {
 public:
  ~OutputGuard() {
    if (!armed_) return;
    for (const auto& p : paths_) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  }
  void add(const fs::path& p) { paths_.push_back(p); }
  void disarm() { armed_ = false; }

 private:
  std::vector<fs::path> paths_;
  bool armed_ = true;
};

void write_imu_csv(const fs::path& path, const std::vector<ekf::ImuSample>& imu,
                   OutputGuard& guard) {
  io::CsvBuilder csv({"t", "gx", "gy", "gz", "ax", "ay", "az"});
  for (const auto& s : imu)
    csv.row({s.t, s.gyro.x(), s.gyro.y(), s.gyro.z(), s.accel.x(), s.accel.y(),
             s.accel.z()});
  io::write_file_atomic(path, csv.str());
  guard.add(path);
}

void write_truth_csv(const fs::path& path, const sim::GroundTruth& gt,
                     OutputGuard& guard) {
  io::CsvBuilder csv(
      {"t", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "px", "py", "pz"});
  for (std::size_t k = 0; k < gt.size(); ++k) {
    const Eigen::Vector4d q = geom::quaternion_wxyz(gt.rot[k]);
    csv.row({gt.t[k], q[0], q[1], q[2], q[3], gt.vel_n[k].x(), gt.vel_n[k].y(),
             gt.vel_n[k].z(), gt.pos_n[k].x(), gt.pos_n[k].y(), gt.pos_n[k].z()});
  }
  io::write_file_atomic(path, csv.str());
  guard.add(path);
}

std::vector<ekf::ImuSample> read_imu_csv(const fs::path& path) {
  const io::CsvTable t = io::read_csv(path);
  const int ct = t.column("t"), gx = t.column("gx"), gy = t.column("gy"),
            gz = t.column("gz"), ax = t.column("ax"), ay = t.column("ay"),
            az = t.column("az");
  std::vector<ekf::ImuSample> out;
  out.reserve(t.rows.size());
  for (const auto& r : t.rows) {
    ekf::ImuSample s;
    s.t = r[ct];
    s.gyro = {r[gx], r[gy], r[gz]};
    s.accel = {r[ax], r[ay], r[az]};
    out.push_back(s);
  }
  if (out.empty()) throw DataError("no IMU samples in " + path.string());
  return out;
}

eval::Trajectory read_trajectory_csv(const fs::path& path) {
  const io::CsvTable t = io::read_csv(path);
  const int ct = t.column("t"), qw = t.column("qw"), qx = t.column("qx"),
            qy = t.column("qy"), qz = t.column("qz"), px = t.column("px"),
            py = t.column("py"), pz = t.column("pz"), vx = t.column("vx"),
            vy = t.column("vy"), vz = t.column("vz");
  eval::Trajectory out;
  for (const auto& r : t.rows) {
    out.t.push_back(r[ct]);
    out.rot.push_back(geom::rot_from_quaternion(r[qw], r[qx], r[qy], r[qz]));
    out.pos.emplace_back(r[px], r[py], r[pz]);
    out.vel.emplace_back(r[vx], r[vy], r[vz]);
  }
  out.validate();
  return out;
}

sim::GroundTruth read_truth_csv(const fs::path& path) {
  const eval::Trajectory t = read_trajectory_csv(path);
  sim::GroundTruth gt;
  gt.t = t.t;
  gt.rot = t.rot;
  gt.vel_n = t.vel;
  gt.pos_n = t.pos;
  for (std::size_t k = 0; k < t.size(); ++k)
    gt.vel_b.push_back(t.rot[k].matrix().transpose() * t.vel[k]);
  return gt;
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir) {
  const cfg::RunConfig c = cfg::parse_config(config_path);
  std::cout << cfg::echo(c);
  OutputGuard guard;
  for (int i = 0; i < c.ride_count; ++i) {
    const sim::RideSpec spec = cfg::ride_spec_for(c, i);
    const sim::GroundTruth gt = sim::gen_trajectory(spec);
    const auto imu = sim::synthesize_imu(gt, spec);
    char name[32];
    std::snprintf(name, sizeof(name), "ride_%03d", i);
    const fs::path dir = fs::path(out_dir) / name;
    write_imu_csv(dir / "imu.csv", imu, guard);
    write_truth_csv(dir / "truth.csv", gt, guard);

    nlohmann::json meta;
    meta["format"] = "veloio-ride";
    meta["schema"] = cfg::kSchemaVersion;
    meta["rate_hz"] = spec.rate_hz;
    meta["gravity"] = "navigation frame is local-level, +z down, g = [0, 0, +9.81] m/s^2";
    meta["rotation"] = "quaternions are Hamilton wxyz, body -> navigation";
    meta["seed"] = spec.seed;
    meta["roughness"] = spec.roughness;
    meta["plan"] = c.ride_plan;
    meta["speed_scale"] = spec.speed_scale;
    meta["cadence_scale"] = spec.cadence_scale;
    meta["add_noise"] = spec.add_noise;
    meta["init_gyro_bias"] = {spec.init_gyro_bias.x(), spec.init_gyro_bias.y(),
                              spec.init_gyro_bias.z()};
    meta["init_accel_bias"] = {spec.init_accel_bias.x(), spec.init_accel_bias.y(),
                               spec.init_accel_bias.z()};
    meta["samples"] = imu.size();
    meta["duration_s"] = spec.duration();
    io::write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
    guard.add(dir / "meta.json");
    std::cout << "wrote " << (dir / "imu.csv").string() << " (" << imu.size()
              << " samples)\n";
  }
  guard.disarm();
  return 0;
}

std::vector<sim::Ride> load_rides(const fs::path& data_dir) {
  if (!fs::is_directory(data_dir))
    throw DataError("data dir not found: " + data_dir.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(data_dir))
    if (e.is_directory() && fs::exists(e.path() / "imu.csv")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw DataError("no ride directories under " + data_dir.string());
  std::vector<sim::Ride> rides;
  for (const auto& d : dirs) {
    sim::Ride r;
    r.imu = read_imu_csv(d / "imu.csv");
    r.truth = read_truth_csv(d / "truth.csv");
    rides.push_back(std::move(r));
  }
  return rides;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_path) {
  const cfg::RunConfig c = cfg::parse_config(config_path);
  std::cout << cfg::echo(c);
  const auto rides = load_rides(data_dir);
  sim::WindowDataset ds = sim::make_windows(rides, c.moe, c.train_stride,
                                            c.orientation_jitter_deg,
                                            mix_seed(c.seed, 0x11));
  if (ds.any_too_short)
    std::cerr << "warning: some rides are shorter than one window and were skipped\n";
  std::cout << "windows: train " << ds.train.size() << ", val " << ds.val.size()
            << ", test " << ds.test.size() << "\n";

  moe::MoeModel model(c.moe, mix_seed(c.seed, 0x22));
  moe::TrainConfig tc = c.train;
  tc.seed = mix_seed(c.seed, 0x33);
  const moe::TrainLog log = moe::train(model, ds, tc);

  OutputGuard guard;
  moe::save_checkpoint(out_path, model);
  guard.add(out_path);

  std::vector<std::string> header{"phase", "epoch", "train_loss", "val_metric",
                                  "dropped_slots"};
  for (int e = 0; e < c.moe.num_experts; ++e)
    header.push_back("importance_frac_" + std::to_string(e));
  for (int e = 0; e < c.moe.num_experts; ++e)
    header.push_back("load_frac_" + std::to_string(e));
  io::CsvBuilder csv(header);
  for (const auto& el : log.epochs) {
    std::vector<double> row{static_cast<double>(el.phase),
                            static_cast<double>(el.epoch), el.train_loss,
                            el.val_metric, static_cast<double>(el.dropped_slots)};
    row.insert(row.end(), el.importance_frac.begin(), el.importance_frac.end());
    row.insert(row.end(), el.load_frac.begin(), el.load_frac.end());
    csv.row(row);
  }
  const fs::path log_path = out_path + ".log.csv";
  io::write_file_atomic(log_path, csv.str());
  guard.add(log_path);

  std::cout << "phase 1 epochs: " << log.phase1_epochs
            << ", phase 2 epochs: " << log.phase2_epochs << "\n";
  std::cout << "wrote " << out_path << " and " << log_path.string() << "\n";
  guard.disarm();
  return 0;
}

int cmd_fuse(const std::string& config_path, const std::string& checkpoint_path,
             const std::string& imu_path, const std::string& out_path,
             bool oracle_velocity, const std::string& truth_path) {
  const cfg::RunConfig c = cfg::parse_config(config_path);
  std::cout << cfg::echo(c);
  const auto imu = read_imu_csv(imu_path);

  // sample spacing must match the configured rate
  if (imu.size() >= 2) {
    std::vector<double> dts;
    for (std::size_t k = 1; k < imu.size(); ++k) dts.push_back(imu[k].t - imu[k - 1].t);
    std::nth_element(dts.begin(), dts.begin() + dts.size() / 2, dts.end());
    const double med = dts[dts.size() / 2];
    if (std::abs(med * c.ride_rate_hz - 1.0) > 0.02)
      throw DataError("IMU rate mismatch: stream spacing " + str(med) +
                      " s vs configured ride.rate_hz " + str(c.ride_rate_hz));
  }

  fuse::FuseConfig fc;
  fc.window_len = c.moe.window_len;
  fc.update_stride = c.ekf_update_stride;
  fc.init_avg_samples = c.ekf_init_avg_samples;
  fc.chi2_gate = c.ekf_chi2_gate;
  fc.gravity = c.ekf_gravity;
  fc.noise = c.noise;

  std::unique_ptr<fuse::VelocitySource> source;
  std::unique_ptr<moe::MoeModel> model;
  if (oracle_velocity) {
    if (truth_path.empty())
      throw ConfigError("--oracle-velocity requires --truth <truth.csv>");
    const sim::GroundTruth gt = read_truth_csv(truth_path);
    source = std::make_unique<fuse::OracleVelocitySource>(gt.t, gt.vel_b,
                                                          c.oracle_sigma);
  } else {
    if (checkpoint_path.empty())
      throw ConfigError("fuse requires --checkpoint (or --oracle-velocity)");
    model = std::make_unique<moe::MoeModel>(moe::load_checkpoint(checkpoint_path));
    if (model->config().window_len != c.moe.window_len)
      throw ConfigError("checkpoint window length L=" +
                        std::to_string(model->config().window_len) +
                        " does not match config moe.L=" +
                        std::to_string(c.moe.window_len));
    fc.window_len = model->config().window_len;
    source = std::make_unique<fuse::MoeVelocitySource>(*model);
  }

  const fuse::FuseResult res = fuse::run_fused(imu, source.get(), fc);

  std::vector<std::string> header{"t",  "qw", "qx", "qy", "qz", "vx", "vy", "vz",
                                  "px", "py", "pz", "bgx", "bgy", "bgz", "bax",
                                  "bay", "baz"};
  for (int i = 0; i < 15; ++i) header.push_back("cov" + std::to_string(i));
  io::CsvBuilder csv(header);
  for (const auto& r : res.records) {
    const Eigen::Vector4d q = geom::quaternion_wxyz(r.rot);
    std::vector<double> row{r.t,          q[0],         q[1],
                            q[2],         q[3],         r.vel_n.x(),
                            r.vel_n.y(),  r.vel_n.z(),  r.pos_n.x(),
                            r.pos_n.y(),  r.pos_n.z(),  r.gyro_bias.x(),
                            r.gyro_bias.y(), r.gyro_bias.z(), r.accel_bias.x(),
                            r.accel_bias.y(), r.accel_bias.z()};
    for (int i = 0; i < 15; ++i) row.push_back(r.cov_diag[i]);
    csv.row(row);
  }
  OutputGuard guard;
  io::write_file_atomic(out_path, csv.str());
  guard.add(out_path);
  std::cout << "updates applied " << res.summary.updates_applied << ", rejected "
            << res.summary.updates_rejected
            << (res.summary.propagation_only ? " (propagation only)" : "") << "\n";
  std::cout << "wrote " << out_path << "\n";
  guard.disarm();
  return 0;
}

int cmd_eval(const std::string& truth_path, const std::string& est_path,
             const std::string& out_path, double rte_window) {
  const eval::Trajectory ref = read_trajectory_csv(truth_path);
  const eval::Trajectory est = read_trajectory_csv(est_path);
  const eval::AlignedPair pair = eval::align(ref, est);

  nlohmann::json m;
  m["schema"] = cfg::kSchemaVersion;
  m["truth"] = truth_path;
  m["estimate"] = est_path;
  m["epochs"] = pair.size();
  m["ate_m"] = eval::ate(pair);
  const eval::RteResult r = eval::rte(pair, rte_window);
  m["rte_window_s"] = rte_window;
  if (r.ok) {
    m["rte_m"] = r.value;
    m["rte_status"] = "ok";
  } else {
    m["rte_m"] = nullptr;
    m["rte_status"] = "too_short";
  }
  m["inference_error_mps"] = eval::inference_error(pair.vel_ref, pair.vel_est);

  io::write_file_atomic(out_path, m.dump(2) + "\n");
  std::cout << m.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"veloio: MoE-aided inertial odometry for cycling"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, out_path, checkpoint_path,
      imu_path, truth_path, est_path;
  bool oracle_velocity = false;
  double rte_window = 60.0;

  auto* simulate = app.add_subcommand("simulate", "generate synthetic rides");
  simulate->add_option("--config", config_path, "run config file")->required();
  simulate->add_option("--out-dir", out_dir, "output directory")->required();

  auto* train = app.add_subcommand("train", "train the velocity network");
  train->add_option("--config", config_path, "run config file")->required();
  train->add_option("--data-dir", data_dir, "directory of ride_* folders")->required();
  train->add_option("--out", out_path, "checkpoint output path")->required();

  auto* fusecmd = app.add_subcommand("fuse", "run the filter over an IMU stream");
  fusecmd->add_option("--config", config_path, "run config file")->required();
  fusecmd->add_option("--checkpoint", checkpoint_path, "trained model checkpoint");
  fusecmd->add_option("--imu", imu_path, "imu.csv input")->required();
  fusecmd->add_option("--out", out_path, "trajectory csv output")->required();
  fusecmd->add_flag("--oracle-velocity", oracle_velocity,
                    "bypass the network; use ground-truth body velocity");
  fusecmd->add_option("--truth", truth_path, "truth.csv (for --oracle-velocity)");

  auto* evalcmd = app.add_subcommand("eval", "trajectory metrics");
  evalcmd->add_option("--truth", truth_path, "ground-truth csv")->required();
  evalcmd->add_option("--est", est_path, "estimated trajectory csv")->required();
  evalcmd->add_option("--out", out_path, "metrics json output")->required();
  evalcmd->add_option("--rte-window", rte_window, "RTE window, seconds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: cli: " << e.what() << "\n";
    return 2;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(config_path, out_dir);
    if (train->parsed()) return cmd_train(config_path, data_dir, out_path);
    if (fusecmd->parsed())
      return cmd_fuse(config_path, checkpoint_path, imu_path, out_path,
                      oracle_velocity, truth_path);
    if (evalcmd->parsed()) return cmd_eval(truth_path, est_path, out_path, rte_window);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: data: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: numeric: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
