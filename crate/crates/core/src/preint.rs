//! On-manifold IMU preintegration and gravity-aligned initialization.
//!
//! Deltas follow the usual right-perturbation formulation: between two
//! keyframes the fused base-frame samples are integrated into `(ΔR, Δv, Δp)`
//! at a fixed bias linearization point, together with the first-order bias
//! Jacobians and the propagated noise covariance.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    nav_idx, skew, so3_exp, so3_left_jacobian, so3_log, so3_right_jacobian, so3_right_jacobian_inv, NavState, Pose,
    Timestamp, NAV_DIM,
};
use crate::graph::GnssFix;
use crate::mimu::FusedImuSample;

pub const GRAVITY: f64 = 9.81;

/// Largest integration step accepted by [`PreintegratedDelta::integrate`].
pub const MAX_STEP: f64 = 0.1;

pub fn gravity_vector(magnitude: f64) -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -magnitude)
}

/// `Σ [φ]ⁿ/(n+2)!`, the double integral of `Exp(sφ)` over the unit triangle.
fn gamma2(phi: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = phi.norm_squared();
    let (c1, c2) = if t2 < 1e-2 {
        (1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0)
    } else {
        let t = t2.sqrt();
        ((t - t.sin()) / (t2 * t), (0.5 * t2 + t.cos() - 1.0) / (t2 * t2))
    };
    let k = skew(phi);
    Matrix3::identity() * 0.5 + c1 * k + c2 * k * k
}

/// Offsets inside the 15-dimensional IMU residual.
pub mod res_idx {
    pub const ROT: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const BA: usize = 9;
    pub const BG: usize = 12;
}

pub type ImuResidual = SVector<f64, 15>;
pub type ImuJacobian = SMatrix<f64, 15, NAV_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreintError {
    #[error("integration step {0} s outside (0, {MAX_STEP})")]
    InvalidStep(f64),
    #[error("non-finite sample at {0}")]
    NonFinite(Timestamp),
}

/// Noise used when propagating the preintegration covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoise {
    /// Per-sample specific-force variance, used when a sample carries no
    /// covariance of its own. (m/s²)²
    pub acc_var: f64,
    /// Per-sample angular-rate variance fallback. (rad/s)²
    pub gyro_var: f64,
    /// Accelerometer bias random-walk variance per second.
    pub acc_bias_rw_var: f64,
    /// Gyroscope bias random-walk variance per second.
    pub gyro_bias_rw_var: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self { acc_var: 4e-4, gyro_var: 4e-6, acc_bias_rw_var: 1e-6, gyro_bias_rw_var: 1e-8 }
    }
}

/// Relative motion integrated between two keyframes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreintegratedDelta {
    pub delta_rot: UnitQuaternion<f64>,
    pub delta_vel: Vector3<f64>,
    pub delta_pos: Vector3<f64>,
    pub dt: f64,
    /// Bias linearization point.
    pub bias_acc: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub d_rot_d_bg: Matrix3<f64>,
    pub d_vel_d_ba: Matrix3<f64>,
    pub d_vel_d_bg: Matrix3<f64>,
    pub d_pos_d_ba: Matrix3<f64>,
    pub d_pos_d_bg: Matrix3<f64>,
    /// Covariance of `(δφ, δp, δv)`.
    pub cov: SMatrix<f64, 9, 9>,
    /// Raw angular rate of the most recent sample.
    pub last_gyro: Vector3<f64>,
    pub samples: usize,
    pub noise: ImuNoise,
}

impl PreintegratedDelta {
    pub fn new(bias_acc: Vector3<f64>, bias_gyro: Vector3<f64>, noise: ImuNoise) -> Self {
        Self {
            delta_rot: UnitQuaternion::identity(),
            delta_vel: Vector3::zeros(),
            delta_pos: Vector3::zeros(),
            dt: 0.0,
            bias_acc,
            bias_gyro,
            d_rot_d_bg: Matrix3::zeros(),
            d_vel_d_ba: Matrix3::zeros(),
            d_vel_d_bg: Matrix3::zeros(),
            d_pos_d_ba: Matrix3::zeros(),
            d_pos_d_bg: Matrix3::zeros(),
            cov: SMatrix::zeros(),
            last_gyro: bias_gyro,
            samples: 0,
            noise,
        }
    }

    /// Fresh delta linearized at the biases of `state`.
    pub fn at_state(state: &NavState, noise: ImuNoise) -> Self {
        Self::new(state.acc_bias, state.gyro_bias, noise)
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }

    /// Integrates one sample held constant over `dt` seconds.
    ///
    /// The attitude turns within the step, so the held specific force is
    /// integrated exactly: `Δv += ΔR Γ₁(φ) f dt`, `Δp += Δv dt + ΔR Γ₂(φ) f dt²`
    /// with `φ = ω dt`, `Γ₁ = J_l(φ)` and `Γ₂ = Σ [φ]ⁿ/(n+2)!`.
    pub fn integrate(&mut self, s: &FusedImuSample, dt: f64) -> Result<(), PreintError> {
        if !(dt > 0.0 && dt < MAX_STEP) {
            return Err(PreintError::InvalidStep(dt));
        }
        if !s.acc.iter().chain(s.gyro.iter()).all(|x| x.is_finite()) {
            return Err(PreintError::NonFinite(s.stamp));
        }
        let acc = s.acc - self.bias_acc;
        let rate = s.gyro - self.bias_gyro;
        let phi = rate * dt;
        let step = so3_exp(&phi);
        let step_t = step.to_rotation_matrix().into_inner().transpose();
        let jr = so3_right_jacobian(&phi);
        let g1 = so3_left_jacobian(&phi);
        let g2 = gamma2(&phi);
        let r = self.delta_rot.to_rotation_matrix().into_inner();
        let vel_acc = g1 * acc;
        let pos_acc = g2 * acc;
        let r_vel_x = r * skew(&vel_acc);
        let r_pos_x = r * skew(&pos_acc);
        let r_acc_x = r * skew(&acc);
        let dt2 = dt * dt;

        // Noise and Jacobian propagation use the rotation before this step.
        let mut a = SMatrix::<f64, 9, 9>::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&step_t);
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r_pos_x * dt2));
        a.fixed_view_mut::<3, 3>(3, 6).copy_from(&(Matrix3::identity() * dt));
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-r_vel_x * dt));
        let mut bg = SMatrix::<f64, 9, 3>::zeros();
        bg.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        let mut ba = SMatrix::<f64, 9, 3>::zeros();
        ba.fixed_view_mut::<3, 3>(3, 0).copy_from(&(r * g2 * dt2));
        ba.fixed_view_mut::<3, 3>(6, 0).copy_from(&(r * g1 * dt));
        let (acc_cov, gyro_cov) = self.sample_noise(s);
        self.cov = a * self.cov * a.transpose()
            + bg * gyro_cov * bg.transpose()
            + ba * acc_cov * ba.transpose();
        self.cov = 0.5 * (self.cov + self.cov.transpose());

        // Γ₁f and Γ₂f also depend on b_g through φ, to first order in φ.
        self.d_pos_d_ba += self.d_vel_d_ba * dt - r * g2 * dt2;
        self.d_pos_d_bg += self.d_vel_d_bg * dt - r_pos_x * self.d_rot_d_bg * dt2 + r_acc_x * (dt2 * dt / 6.0);
        self.d_vel_d_ba -= r * g1 * dt;
        self.d_vel_d_bg += -r_vel_x * self.d_rot_d_bg * dt + r_acc_x * (0.5 * dt2);
        self.d_rot_d_bg = step_t * self.d_rot_d_bg - jr * dt;

        self.delta_pos += self.delta_vel * dt + r * pos_acc * dt2;
        self.delta_vel += r * vel_acc * dt;
        self.delta_rot = self.delta_rot * step;
        self.delta_rot.renormalize_fast();
        self.dt += dt;
        self.last_gyro = s.gyro;
        self.samples += 1;
        Ok(())
    }

    fn sample_noise(&self, s: &FusedImuSample) -> (Matrix3<f64>, Matrix3<f64>) {
        let acc_block: Matrix3<f64> = s.cov.fixed_view::<3, 3>(3, 3).into_owned();
        let gyro_block: Matrix3<f64> = s.cov.fixed_view::<3, 3>(6, 6).into_owned();
        let acc = if acc_block.trace() > 0.0 { acc_block } else { Matrix3::identity() * self.noise.acc_var };
        let gyro = if gyro_block.trace() > 0.0 { gyro_block } else { Matrix3::identity() * self.noise.gyro_var };
        (acc, gyro)
    }

    /// `(ΔR, Δv, Δp)` corrected to first order for the biases `(b_a, b_g)`.
    pub fn corrected(&self, bias_acc: &Vector3<f64>, bias_gyro: &Vector3<f64>) -> (UnitQuaternion<f64>, Vector3<f64>, Vector3<f64>) {
        let dba = bias_acc - self.bias_acc;
        let dbg = bias_gyro - self.bias_gyro;
        (
            self.delta_rot * so3_exp(&(self.d_rot_d_bg * dbg)),
            self.delta_vel + self.d_vel_d_ba * dba + self.d_vel_d_bg * dbg,
            self.delta_pos + self.d_pos_d_ba * dba + self.d_pos_d_bg * dbg,
        )
    }

    /// Covariance of the 15-dimensional residual, including bias random walk.
    pub fn residual_covariance(&self) -> SMatrix<f64, 15, 15> {
        let mut c = SMatrix::<f64, 15, 15>::zeros();
        c.fixed_view_mut::<9, 9>(0, 0).copy_from(&self.cov);
        let dt = self.dt.max(1e-3);
        c.fixed_view_mut::<3, 3>(res_idx::BA, res_idx::BA)
            .copy_from(&(Matrix3::identity() * self.noise.acc_bias_rw_var * dt));
        c.fixed_view_mut::<3, 3>(res_idx::BG, res_idx::BG)
            .copy_from(&(Matrix3::identity() * self.noise.gyro_bias_rw_var * dt));
        c
    }
}

/// Forward prediction of `x_i` by `delta` under gravity `g`.
///
/// The angular rate of the result is the last raw gyro reading corrected by
/// the state's gyro bias.
pub fn predict(x_i: &NavState, delta: &PreintegratedDelta, g: &Vector3<f64>) -> NavState {
    if delta.is_empty() {
        return *x_i;
    }
    let (d_rot, d_vel, d_pos) = delta.corrected(&x_i.acc_bias, &x_i.gyro_bias);
    let r_i = x_i.pose.rotation;
    let dt = delta.dt;
    let mut rotation = r_i * d_rot;
    rotation.renormalize_fast();
    NavState {
        pose: Pose::new(
            rotation,
            x_i.pose.translation + x_i.velocity * dt + 0.5 * g * dt * dt + r_i * d_pos,
        ),
        velocity: x_i.velocity + g * dt + r_i * d_vel,
        angular_rate: delta.last_gyro - x_i.gyro_bias,
        acc_bias: x_i.acc_bias,
        gyro_bias: x_i.gyro_bias,
    }
}

/// Residual `[r_ΔR, r_Δp, r_Δv, r_ba, r_bg]` between two states.
pub fn imu_residual(x_i: &NavState, x_j: &NavState, delta: &PreintegratedDelta, g: &Vector3<f64>) -> ImuResidual {
    imu_residual_jacobians(x_i, x_j, delta, g).0
}

/// Residual together with its Jacobians w.r.t. the tangent spaces of `x_i`
/// and `x_j`.
pub fn imu_residual_jacobians(
    x_i: &NavState,
    x_j: &NavState,
    delta: &PreintegratedDelta,
    g: &Vector3<f64>,
) -> (ImuResidual, ImuJacobian, ImuJacobian) {
    use res_idx as r;
    let dt = delta.dt;
    let dbg = x_i.gyro_bias - delta.bias_gyro;
    let (d_rot, d_vel, d_pos) = delta.corrected(&x_i.acc_bias, &x_i.gyro_bias);
    let ri = x_i.pose.rotation_matrix();
    let rj = x_j.pose.rotation_matrix();
    let ri_t = ri.transpose();

    let e = d_rot.inverse() * x_i.pose.rotation.inverse() * x_j.pose.rotation;
    let r_rot = so3_log(&e);
    let vel_arg = x_j.velocity - x_i.velocity - g * dt;
    let pos_arg = x_j.pose.translation - x_i.pose.translation - x_i.velocity * dt - 0.5 * g * dt * dt;
    let r_vel = ri_t * vel_arg - d_vel;
    let r_pos = ri_t * pos_arg - d_pos;

    let mut res = ImuResidual::zeros();
    res.fixed_rows_mut::<3>(r::ROT).copy_from(&r_rot);
    res.fixed_rows_mut::<3>(r::POS).copy_from(&r_pos);
    res.fixed_rows_mut::<3>(r::VEL).copy_from(&r_vel);
    res.fixed_rows_mut::<3>(r::BA).copy_from(&(x_j.acc_bias - x_i.acc_bias));
    res.fixed_rows_mut::<3>(r::BG).copy_from(&(x_j.gyro_bias - x_i.gyro_bias));

    let jr_inv = so3_right_jacobian_inv(&r_rot);
    let e_t = e.to_rotation_matrix().into_inner().transpose();
    let i3 = Matrix3::identity();
    let mut ji = ImuJacobian::zeros();
    let mut jj = ImuJacobian::zeros();
    let put = |m: &mut ImuJacobian, row: usize, col: usize, b: Matrix3<f64>| {
        m.fixed_view_mut::<3, 3>(row, col).copy_from(&b);
    };

    put(&mut ji, r::ROT, nav_idx::ROT, -jr_inv * rj.transpose() * ri);
    put(
        &mut ji,
        r::ROT,
        nav_idx::BG,
        -jr_inv * e_t * so3_right_jacobian(&(delta.d_rot_d_bg * dbg)) * delta.d_rot_d_bg,
    );
    put(&mut jj, r::ROT, nav_idx::ROT, jr_inv);

    put(&mut ji, r::POS, nav_idx::ROT, skew(&(ri_t * pos_arg)));
    put(&mut ji, r::POS, nav_idx::POS, -i3);
    put(&mut ji, r::POS, nav_idx::VEL, -ri_t * dt);
    put(&mut ji, r::POS, nav_idx::BA, -delta.d_pos_d_ba);
    put(&mut ji, r::POS, nav_idx::BG, -delta.d_pos_d_bg);
    put(&mut jj, r::POS, nav_idx::POS, ri_t * rj);

    put(&mut ji, r::VEL, nav_idx::ROT, skew(&(ri_t * vel_arg)));
    put(&mut ji, r::VEL, nav_idx::VEL, -ri_t);
    put(&mut ji, r::VEL, nav_idx::BA, -delta.d_vel_d_ba);
    put(&mut ji, r::VEL, nav_idx::BG, -delta.d_vel_d_bg);
    put(&mut jj, r::VEL, nav_idx::VEL, ri_t);

    put(&mut ji, r::BA, nav_idx::BA, -i3);
    put(&mut jj, r::BA, nav_idx::BA, i3);
    put(&mut ji, r::BG, nav_idx::BG, -i3);
    put(&mut jj, r::BG, nav_idx::BG, i3);

    (res, ji, jj)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("no inertial samples in the static window")]
    NoSamples,
    #[error("no GNSS fix in the static window")]
    NoGnss,
    #[error("static window spans {got:.3} s, need {needed:.3} s")]
    WindowTooShort { got: f64, needed: f64 },
    #[error("mean specific force {0:.3} m/s² is not consistent with gravity")]
    BadGravity(f64),
    #[error("vehicle is not static: {0}")]
    NotStatic(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub gravity: f64,
    pub t_static: f64,
    pub max_speed: f64,
    pub max_gyro: f64,
    /// Allowed deviation of the mean specific-force norm from `gravity`.
    pub max_gravity_error: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { gravity: GRAVITY, t_static: 5.0, max_speed: 0.05, max_gyro: 0.01, max_gravity_error: 1.0 }
    }
}

/// Initial attitude, position and biases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GravityInit {
    pub stamp: Timestamp,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub t0: Vector3<f64>,
    pub acc_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
}

impl GravityInit {
    pub fn pose(&self) -> Pose {
        Pose::new(UnitQuaternion::from_euler_angles(self.roll, self.pitch, self.yaw), self.t0)
    }

    pub fn state(&self) -> NavState {
        NavState { acc_bias: self.acc_bias, gyro_bias: self.gyro_bias, ..NavState::at(self.pose()) }
    }
}

/// Roll and pitch of a level-referenced body from a mean specific force.
pub fn tilt_from_gravity(mean_acc: &Vector3<f64>) -> (f64, f64) {
    let roll = mean_acc.y.atan2(mean_acc.z);
    let pitch = (-mean_acc.x).atan2((mean_acc.y * mean_acc.y + mean_acc.z * mean_acc.z).sqrt());
    (roll, pitch)
}

/// Attitude and bias initialization from a static window.
///
/// `fixes` are the GNSS fixes received during the window; their mean gives
/// `t0` and their drift rate is checked against `max_speed`, widened by three
/// standard deviations of the fitted rate. `yaw` is the receiver heading.
pub fn gravity_align(
    static_samples: &[FusedImuSample],
    fixes: &[GnssFix],
    yaw: f64,
    cfg: &AlignConfig,
) -> Result<GravityInit, AlignError> {
    let first = static_samples.first().ok_or(AlignError::NoSamples)?;
    let last = static_samples.last().unwrap();
    if fixes.is_empty() {
        return Err(AlignError::NoGnss);
    }
    let span = last.stamp.secs_since(first.stamp);
    if static_samples.len() > 1 {
        let step = span / (static_samples.len() - 1) as f64;
        if span + step < cfg.t_static - 1e-9 {
            return Err(AlignError::WindowTooShort { got: span + step, needed: cfg.t_static });
        }
    }
    let n = static_samples.len() as f64;
    let mean_acc = static_samples.iter().map(|s| s.acc).sum::<Vector3<f64>>() / n;
    let mean_gyro = static_samples.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
    if (mean_acc.norm() - cfg.gravity).abs() > cfg.max_gravity_error {
        return Err(AlignError::BadGravity(mean_acc.norm()));
    }
    if mean_gyro.norm() >= cfg.max_gyro {
        return Err(AlignError::NotStatic(format!("mean angular rate {:.4} rad/s", mean_gyro.norm())));
    }

    let t0 = fixes.iter().map(|f| f.position).sum::<Vector3<f64>>() / fixes.len() as f64;
    if fixes.len() > 1 {
        let tm = fixes.iter().map(|f| f.stamp.as_secs()).sum::<f64>() / fixes.len() as f64;
        let sxx: f64 = fixes.iter().map(|f| (f.stamp.as_secs() - tm).powi(2)).sum();
        if sxx > 0.0 {
            let vel = fixes
                .iter()
                .map(|f| (f.position - t0) * (f.stamp.as_secs() - tm))
                .sum::<Vector3<f64>>()
                / sxx;
            let var = fixes.iter().map(|f| f.cov.trace() / 3.0).sum::<f64>() / fixes.len() as f64;
            let sigma = (var / sxx).sqrt();
            let speed = vel.norm();
            if speed >= cfg.max_speed + 3.0 * sigma {
                return Err(AlignError::NotStatic(format!("GNSS speed {speed:.3} m/s")));
            }
        }
    }

    let (roll, pitch) = tilt_from_gravity(&mean_acc);
    let r_tilt = UnitQuaternion::from_euler_angles(roll, pitch, 0.0);
    let acc_bias = mean_acc - r_tilt.inverse() * Vector3::new(0.0, 0.0, cfg.gravity);
    Ok(GravityInit { stamp: last.stamp, roll, pitch, yaw, t0, acc_bias, gyro_bias: mean_gyro })
}
