#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <optional>

#include "veloio/geom.hpp"

// Error-state extended Kalman filter over (R, v_n, p_n, b_g, b_a) with the
// 15-dim error state (phi, dv, dp, dbg, dba) in that block order. The
// attitude error is left/global: R_true = exp(phi) * R_hat.
//
// Frame conventions (documented prominently because they decide every sign
// here): the navigation frame is a local level frame with +z DOWN and
// gravity g = [0, 0, +9.81] m/s^2; rotations map body -> navigation. A
// stationary, level IMU therefore measures specific force [0, 0, -9.81].
//
// A Filter instance is a strictly sequential state machine; independent
// instances may run concurrently.

namespace veloio::ekf {

using geom::Mat3;
using geom::Rotation;
using geom::Vec3;

inline constexpr double kDefaultGravity = 9.81;
// chi-square 0.999 quantile, 3 DoF: innovation gate for network measurements.
inline constexpr double kChi2Gate3Dof999 = 16.27;

using Cov15 = Eigen::Matrix<double, 15, 15>;
using Vec15 = Eigen::Matrix<double, 15, 1>;

enum Block { kPhi = 0, kVel = 3, kPos = 6, kBg = 9, kBa = 12 };

struct NavState {
  Rotation rot;                      // body -> nav
  Vec3 vel_n = Vec3::Zero();         // m/s
  Vec3 pos_n = Vec3::Zero();         // m
  Vec3 gyro_bias = Vec3::Zero();     // rad/s
  Vec3 accel_bias = Vec3::Zero();    // m/s^2

  bool finite() const {
    return rot.matrix().allFinite() && vel_n.allFinite() && pos_n.allFinite() &&
           gyro_bias.allFinite() && accel_bias.allFinite();
  }
};

// Consumer-MEMS defaults (smartphone-class IMU): gyro 0.003 deg/s/sqrt(Hz),
// accel 500 ug/sqrt(Hz), small in-run bias instability.
struct NoiseParams {
  double gyro_noise = 5e-5;        // rad/s/sqrt(Hz)
  double accel_noise = 5e-3;       // m/s^2/sqrt(Hz)
  double gyro_bias_walk = 1e-6;    // rad/s^2/sqrt(Hz)
  double accel_bias_walk = 2e-5;   // m/s^3/sqrt(Hz)
  double init_att_sigma = 0.02;    // rad, roll/pitch (leveling accuracy)
  // Yaw is defined zero at init (the nav frame is anchored to the initial
  // heading), so its prior is tight; a loose yaw prior lets velocity
  // updates random-walk the unobservable heading.
  double init_yaw_sigma = 1e-3;    // rad
  double init_vel_sigma = 0.1;     // m/s
  double init_pos_sigma = 0.01;    // m
  // The gyro prior assumes a factory-calibrated gyro (a z-gyro turn-on bias
  // is unobservable from body-velocity aiding and would drift the heading
  // without bound); the accel prior covers typical turn-on offsets.
  double init_gyro_bias_sigma = 1e-4;   // rad/s
  double init_accel_bias_sigma = 0.05;  // m/s^2

  void validate() const {
    for (double v : {gyro_noise, accel_noise, gyro_bias_walk, accel_bias_walk,
                     init_att_sigma, init_yaw_sigma, init_vel_sigma, init_pos_sigma,
                     init_gyro_bias_sigma, init_accel_bias_sigma})
      if (!(v > 0.0) || !std::isfinite(v))
        throw ConfigError("NoiseParams: all densities and sigmas must be positive");
  }
};

struct ImuSample {
  double t = 0.0;                 // s
  Vec3 gyro = Vec3::Zero();       // rad/s, body frame
  Vec3 accel = Vec3::Zero();      // m/s^2, specific force, body frame
};

/// phi/dv/dp/dbg/dba of `truth` relative to `est` (Eq.-13-style error).
inline Vec15 error_between(const NavState& truth, const NavState& est) {
  Vec15 e;
  e.segment<3>(kPhi) =
      geom::so3_log(Rotation::from_matrix_unchecked(truth.rot.matrix() *
                                                    est.rot.matrix().transpose()));
  e.segment<3>(kVel) = truth.vel_n - est.vel_n;
  e.segment<3>(kPos) = truth.pos_n - est.pos_n;
  e.segment<3>(kBg) = truth.gyro_bias - est.gyro_bias;
  e.segment<3>(kBa) = truth.accel_bias - est.accel_bias;
  return e;
}

/// State (+) error: attitude left-multiplied by exp(phi), additive elsewhere.
inline NavState inject_error(const NavState& s, const Vec15& e) {
  NavState out = s;
  out.rot = geom::so3_exp(e.segment<3>(kPhi)) * s.rot;
  out.vel_n = s.vel_n + e.segment<3>(kVel);
  out.pos_n = s.pos_n + e.segment<3>(kPos);
  out.gyro_bias = s.gyro_bias + e.segment<3>(kBg);
  out.accel_bias = s.accel_bias + e.segment<3>(kBa);
  return out;
}

struct UpdateResult {
  bool rejected = false;      // innovation gate fired; state left unchanged
  double mahalanobis = 0.0;   // innovation^T S^-1 innovation
};

class Filter {
 public:
  Filter(const NavState& state, const Cov15& cov, const NoiseParams& noise,
         double gravity = kDefaultGravity, double chi2_gate = kChi2Gate3Dof999)
      : state_(state), cov_(cov), noise_(noise), gravity_(Vec3(0, 0, gravity)),
        chi2_gate_(chi2_gate) {
    noise_.validate();
  }

  /// Static initialization from one (possibly pre-averaged) stationary
  /// sample: roll/pitch from accelerometer leveling, yaw = 0, zero
  /// velocity/position/biases, P diagonal from the prior sigmas.
  /// Rejects samples whose specific-force magnitude departs from gravity by
  /// more than 20%.
  static Filter init(const ImuSample& first, const NoiseParams& priors,
                     double gravity = kDefaultGravity,
                     double chi2_gate = kChi2Gate3Dof999) {
    priors.validate();
    const double norm = first.accel.norm();
    if (std::abs(norm - gravity) > 0.2 * gravity)
      throw DataError("init: not stationary (|f| = " + str(norm) + " m/s^2)");
    // u = R^T e_z = -f/|f|; R = Ry(pitch) * Rx(roll), yaw = 0.
    const Vec3 u = -first.accel / norm;
    const double roll = std::atan2(u.y(), u.z());
    const double pitch = -std::asin(std::clamp(u.x(), -1.0, 1.0));
    NavState s;
    s.rot = geom::rot_y(pitch) * geom::rot_x(roll);

    Cov15 p = Cov15::Zero();
    p.block<3, 3>(kPhi, kPhi) =
        Vec3(std::pow(priors.init_att_sigma, 2), std::pow(priors.init_att_sigma, 2),
             std::pow(priors.init_yaw_sigma, 2))
            .asDiagonal();
    p.block<3, 3>(kVel, kVel) = std::pow(priors.init_vel_sigma, 2) * Mat3::Identity();
    p.block<3, 3>(kPos, kPos) = std::pow(priors.init_pos_sigma, 2) * Mat3::Identity();
    p.block<3, 3>(kBg, kBg) =
        std::pow(priors.init_gyro_bias_sigma, 2) * Mat3::Identity();
    p.block<3, 3>(kBa, kBa) =
        std::pow(priors.init_accel_bias_sigma, 2) * Mat3::Identity();
    return Filter(s, p, priors, gravity, chi2_gate);
  }

  const NavState& state() const { return state_; }
  const Cov15& cov() const { return cov_; }
  const Vec3& gravity() const { return gravity_; }

  /// Strapdown mechanization plus first-order covariance propagation:
  ///   R <- R exp((w - bg) dt)
  ///   v <- v + (R (f - ba) + g) dt
  ///   p <- p + 0.5 (v_prev + v_new) dt
  /// P <- A P A^T + B Q B^T with A = I + F dt, Q scaled linearly with dt.
  void propagate(const ImuSample& sample, double dt) {
    if (!(dt > 0.0) || dt > 0.1)
      throw ContractError("propagate: dt must be in (0, 0.1], got " + str(dt));
    if (!state_.finite()) throw NumericError("propagate: non-finite state");

    const Vec3 w = sample.gyro - state_.gyro_bias;
    const Vec3 f = sample.accel - state_.accel_bias;
    const Mat3 r = state_.rot.matrix();
    const Vec3 accel_n = r * f;

    // nominal
    Rotation rot_new = state_.rot * geom::so3_exp(w * dt);
    if (rot_new.ortho_error() > geom::kOrthoTol) rot_new = rot_new.orthonormalized();
    const Vec3 vel_new = state_.vel_n + (accel_n + gravity_) * dt;
    state_.pos_n += 0.5 * (state_.vel_n + vel_new) * dt;
    state_.vel_n = vel_new;
    state_.rot = rot_new;

    // error-state transition, left-error convention
    Cov15 a = Cov15::Identity();
    a.block<3, 3>(kPhi, kBg) = -r * dt;
    a.block<3, 3>(kVel, kPhi) = -geom::skew(accel_n) * dt;
    a.block<3, 3>(kVel, kBa) = -r * dt;
    a.block<3, 3>(kPos, kVel) = Mat3::Identity() * dt;

    Eigen::Matrix<double, 15, 12> b = Eigen::Matrix<double, 15, 12>::Zero();
    b.block<3, 3>(kPhi, 0) = -r;
    b.block<3, 3>(kVel, 3) = -r;
    b.block<3, 3>(kBg, 6) = Mat3::Identity();
    b.block<3, 3>(kBa, 9) = Mat3::Identity();
    Eigen::Matrix<double, 12, 12> q = Eigen::Matrix<double, 12, 12>::Zero();
    q.block<3, 3>(0, 0) = std::pow(noise_.gyro_noise, 2) * dt * Mat3::Identity();
    q.block<3, 3>(3, 3) = std::pow(noise_.accel_noise, 2) * dt * Mat3::Identity();
    q.block<3, 3>(6, 6) = std::pow(noise_.gyro_bias_walk, 2) * dt * Mat3::Identity();
    q.block<3, 3>(9, 9) = std::pow(noise_.accel_bias_walk, 2) * dt * Mat3::Identity();

    cov_ = a * cov_ * a.transpose() + b * q * b.transpose();
    cov_ = 0.5 * (cov_ + cov_.transpose()).eval();
  }

  /// Measurement Jacobian of h(X) = R^T v_n under the left error:
  /// H_phi = R^T (v_n)x, H_dv = R^T, zero elsewhere.
  Eigen::Matrix<double, 3, 15> measurement_jacobian() const {
    Eigen::Matrix<double, 3, 15> h = Eigen::Matrix<double, 3, 15>::Zero();
    const Mat3 rt = state_.rot.matrix().transpose();
    h.block<3, 3>(0, kPhi) = rt * geom::skew(state_.vel_n);
    h.block<3, 3>(0, kVel) = rt;
    return h;
  }

  Vec3 predicted_body_velocity() const {
    return state_.rot.matrix().transpose() * state_.vel_n;
  }

  /// Body-frame velocity update with Joseph-form covariance and a
  /// chi-square innovation gate. A gated measurement leaves the state
  /// unchanged and reports rejected = true.
  UpdateResult update_velocity(const Vec3& meas_v_b, const Vec3& meas_sigma_diag) {
    if (!(meas_sigma_diag.minCoeff() > 0.0) || !meas_sigma_diag.allFinite())
      throw ContractError("update_velocity: measurement variances must be positive");
    if (!meas_v_b.allFinite())
      throw ContractError("update_velocity: non-finite measurement");

    const Eigen::Matrix<double, 3, 15> h = measurement_jacobian();
    const Mat3 sigma = meas_sigma_diag.asDiagonal();
    const Mat3 s = h * cov_ * h.transpose() + sigma;
    const Eigen::LDLT<Mat3> ldlt(s);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
      throw NumericError("update_velocity: innovation covariance not positive definite");

    const Vec3 innovation = meas_v_b - predicted_body_velocity();
    UpdateResult res;
    res.mahalanobis = innovation.dot(ldlt.solve(innovation));
    if (res.mahalanobis > chi2_gate_) {
      res.rejected = true;
      return res;
    }

    const Eigen::Matrix<double, 15, 3> k = cov_ * h.transpose() * ldlt.solve(Mat3::Identity());
    const Vec15 delta = k * innovation;
    state_ = inject_error(state_, delta);

    const Cov15 ikh = Cov15::Identity() - k * h;
    cov_ = ikh * cov_ * ikh.transpose() + k * sigma * k.transpose();
    cov_ = 0.5 * (cov_ + cov_.transpose()).eval();
    return res;
  }

 private:
  NavState state_;
  Cov15 cov_;
  NoiseParams noise_;
  Vec3 gravity_;
  double chi2_gate_;
};

}  // namespace veloio::ekf
