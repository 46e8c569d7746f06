#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "veloio/geom.hpp"

// Trajectory metrics: absolute translation error (RMSE of positions),
// relative translation error over a time window in per-epoch yaw-dealigned
// frames, and the network inference-error statistic (1/n) sqrt(sum |v-vhat|^2).

namespace veloio::eval {

using geom::Rotation;
using geom::Vec3;

struct Trajectory {
  std::vector<double> t;
  std::vector<Rotation> rot;
  std::vector<Vec3> pos;
  std::vector<Vec3> vel;

  std::size_t size() const { return t.size(); }
  void validate() const {
    if (rot.size() != t.size() || pos.size() != t.size() || vel.size() != t.size())
      throw DataError("Trajectory: column count mismatch");
    for (std::size_t i = 1; i < t.size(); ++i)
      if (!(t[i] > t[i - 1])) throw DataError("Trajectory: non-increasing timestamps");
  }
};

/// Heading of the body-x axis projected to the horizontal plane; a vertical
/// body-x axis keeps the previous epoch's yaw.
inline double yaw_of(const Rotation& r, double prev_yaw) {
  const Vec3 bx = r.matrix().col(0);
  if (std::hypot(bx.x(), bx.y()) < 1e-8) return prev_yaw;
  return std::atan2(bx.y(), bx.x());
}

// Ground truth and estimate on the truth's timeline (estimate linearly
// interpolated; yaw interpolated after unwrapping).
struct AlignedPair {
  std::vector<double> t;
  std::vector<Vec3> pos_ref, pos_est;
  std::vector<Vec3> vel_ref, vel_est;
  std::vector<double> yaw_ref, yaw_est;

  std::size_t size() const { return t.size(); }
};

inline AlignedPair align(const Trajectory& ref, const Trajectory& est) {
  ref.validate();
  est.validate();
  if (ref.size() == 0 || est.size() == 0) throw DataError("align: empty trajectory");

  std::vector<double> est_yaw(est.size());
  double prev = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    double y = yaw_of(est.rot[i], prev);
    if (i > 0) {  // unwrap for interpolation
      while (y - prev > M_PI) y -= 2.0 * M_PI;
      while (y - prev < -M_PI) y += 2.0 * M_PI;
    }
    est_yaw[i] = y;
    prev = y;
  }

  AlignedPair out;
  prev = 0.0;
  std::size_t j = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double t = ref.t[i];
    if (t < est.t.front() - 1e-9 || t > est.t.back() + 1e-9) continue;
    while (j + 1 < est.size() && est.t[j + 1] < t) ++j;
    const std::size_t a = j, b = std::min(j + 1, est.size() - 1);
    const double span = est.t[b] - est.t[a];
    const double u = span > 0.0 ? std::clamp((t - est.t[a]) / span, 0.0, 1.0) : 0.0;
    out.t.push_back(t);
    out.pos_ref.push_back(ref.pos[i]);
    out.vel_ref.push_back(ref.vel[i]);
    out.yaw_ref.push_back(prev = yaw_of(ref.rot[i], prev));
    out.pos_est.push_back((1.0 - u) * est.pos[a] + u * est.pos[b]);
    out.vel_est.push_back((1.0 - u) * est.vel[a] + u * est.vel[b]);
    out.yaw_est.push_back((1.0 - u) * est_yaw[a] + u * est_yaw[b]);
  }
  if (out.t.empty()) throw DataError("align: trajectories do not overlap in time");
  return out;
}

/// RMSE of position differences; no alignment transform is applied.
inline double ate(const AlignedPair& pair) {
  if (pair.size() == 0) throw DataError("ate: empty pair");
  double acc = 0.0;
  for (std::size_t i = 0; i < pair.size(); ++i)
    acc += (pair.pos_ref[i] - pair.pos_est[i]).squaredNorm();
  return std::sqrt(acc / static_cast<double>(pair.size()));
}

struct RteResult {
  bool ok = false;  // false: trajectory shorter than the window
  double value = 0.0;
};

inline geom::Mat3 yaw_matrix(double yaw) { return geom::rot_z(yaw).matrix(); }

/// RMSE over epochs t >= t0 + window of the yaw-dealigned displacement
/// differences; yaw taken at epoch t from each trajectory's own attitude.
inline RteResult rte(const AlignedPair& pair, double window_s = 60.0) {
  if (pair.size() < 2) return {};
  const double dt = (pair.t.back() - pair.t.front()) /
                    static_cast<double>(pair.size() - 1);
  const std::size_t m = static_cast<std::size_t>(std::lround(window_s / dt));
  if (m < 1 || m >= pair.size()) return {};  // explicit too-short result
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = m; i < pair.size(); ++i) {
    const Vec3 d_ref =
        yaw_matrix(pair.yaw_ref[i]).transpose() * (pair.pos_ref[i] - pair.pos_ref[i - m]);
    const Vec3 d_est =
        yaw_matrix(pair.yaw_est[i]).transpose() * (pair.pos_est[i] - pair.pos_est[i - m]);
    acc += (d_ref - d_est).squaredNorm();
    ++n;
  }
  return {true, std::sqrt(acc / static_cast<double>(n))};
}

/// (1/n) sqrt(sum_t |v_t - vhat_t|^2); equals RMSE / sqrt(n), deliberately
/// not the RMSE itself.
inline double inference_error(const std::vector<Vec3>& v,
                              const std::vector<Vec3>& v_hat) {
  if (v.size() != v_hat.size())
    throw ShapeError("inference_error: size mismatch " + std::to_string(v.size()) +
                     " vs " + std::to_string(v_hat.size()));
  if (v.empty()) throw DataError("inference_error: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) acc += (v[i] - v_hat[i]).squaredNorm();
  return std::sqrt(acc) / static_cast<double>(v.size());
}

}  // namespace veloio::eval
