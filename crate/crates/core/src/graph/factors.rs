//! Residuals and Jacobians of every factor kind.
//!
//! Jacobians are taken w.r.t. the right-perturbation tangent of each
//! [`NavState`] (see [`NavState::retract`]).

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, SVector, Vector3, Vector6};

use super::GnssFix;
use crate::geometry::{
    nav_idx, se3_log_unchecked, se3_right_jacobian_inv, skew, NavState, Pose, NAV_DIM,
};
use crate::preint::{imu_residual_jacobians, PreintegratedDelta};

pub type PriorResidual = SVector<f64, NAV_DIM>;
pub type NavJacobian<const R: usize> = SMatrix<f64, R, NAV_DIM>;

/// Prior anchoring the first state: pose relative to `anchor`, zero velocity
/// and angular rate, and the initial biases.
pub fn residual_prior(
    x0: &NavState,
    anchor: &Pose,
    acc_bias: &Vector3<f64>,
    gyro_bias: &Vector3<f64>,
) -> (PriorResidual, NavJacobian<NAV_DIM>) {
    use nav_idx::*;
    let xi = se3_log_unchecked(&anchor.between(&x0.pose));
    let mut r = PriorResidual::zeros();
    r.fixed_rows_mut::<6>(ROT).copy_from(&xi);
    r.fixed_rows_mut::<3>(VEL).copy_from(&x0.velocity);
    r.fixed_rows_mut::<3>(RATE).copy_from(&x0.angular_rate);
    r.fixed_rows_mut::<3>(BA).copy_from(&(x0.acc_bias - acc_bias));
    r.fixed_rows_mut::<3>(BG).copy_from(&(x0.gyro_bias - gyro_bias));
    let mut j = NavJacobian::<NAV_DIM>::identity();
    j.fixed_view_mut::<6, 6>(ROT, ROT).copy_from(&se3_right_jacobian_inv(&xi));
    (r, j)
}

/// Relative-pose error between two states and two odometry poses,
/// `Log((T_i⁻¹T_j)⁻¹ · T̂_i⁻¹T̂_j)`, with Jacobians w.r.t. `x_i` and `x_j`.
pub fn residual_between(
    t_i: &Pose,
    t_j: &Pose,
    odom_i: &Pose,
    odom_j: &Pose,
) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let z = odom_i.between(odom_j);
    let e = t_i.between(t_j).inverse().compose(&z);
    let r = se3_log_unchecked(&e);
    let jr_inv = se3_right_jacobian_inv(&r);
    (r, jr_inv * z.inverse().adjoint(), -jr_inv * e.inverse().adjoint())
}

/// Antenna position minus the fix, `t + R·lever − t_fix`.
pub fn residual_gnss(x: &NavState, fix: &GnssFix, lever: &Vector3<f64>) -> (Vector3<f64>, NavJacobian<3>) {
    let r_mat = x.pose.rotation_matrix();
    let r = x.pose.translation + r_mat * lever - fix.position;
    let mut j = NavJacobian::<3>::zeros();
    j.fixed_view_mut::<3, 3>(0, nav_idx::ROT).copy_from(&(-r_mat * skew(lever)));
    j.fixed_view_mut::<3, 3>(0, nav_idx::POS).copy_from(&r_mat);
    (r, j)
}

/// Angular rate against a bias-corrected gyro reading, `ω − (ω̃ − b_g)`.
pub fn residual_rate(x: &NavState, gyro: &Vector3<f64>) -> (Vector3<f64>, NavJacobian<3>) {
    let r = x.angular_rate - (gyro - x.gyro_bias);
    let mut j = NavJacobian::<3>::zeros();
    j.fixed_view_mut::<3, 3>(0, nav_idx::RATE).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, nav_idx::BG).copy_from(&Matrix3::identity());
    (r, j)
}

/// Square-root information `L⁻¹` of a covariance `Σ = L Lᵀ`.
pub fn sqrt_information(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = cov.nrows();
    let sym = 0.5 * (cov + cov.transpose());
    let chol = sym.cholesky()?;
    chol.l().solve_lower_triangular(&DMatrix::identity(n, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FactorKind {
    Prior,
    Imu,
    Between,
    Gnss,
    Rate,
    Linear,
}

#[derive(Clone, Debug)]
pub enum FactorData {
    Prior { anchor: Pose, acc_bias: Vector3<f64>, gyro_bias: Vector3<f64> },
    Imu { delta: Box<PreintegratedDelta>, gravity: Vector3<f64> },
    Between { odom_i: Pose, odom_j: Pose },
    Gnss { fix: GnssFix, lever: Vector3<f64> },
    Rate { gyro: Vector3<f64> },
    /// Linearized prior from marginalization, already whitened:
    /// `r = r0 + J · [lin_k.local(x_k)]_k`.
    Linear { lin: Vec<NavState>, jacobian: DMatrix<f64>, r0: DVector<f64> },
}

/// A factor over one or more nodes with its whitening matrix.
#[derive(Clone, Debug)]
pub struct Factor {
    pub nodes: Vec<u64>,
    pub data: FactorData,
    /// `Σ^{-1/2}`; identity for [`FactorData::Linear`].
    pub sqrt_info: DMatrix<f64>,
}

/// Whitened residual and per-node whitened Jacobians.
pub struct Linearized {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
}

fn dyn_of<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

impl Factor {
    pub fn kind(&self) -> FactorKind {
        match self.data {
            FactorData::Prior { .. } => FactorKind::Prior,
            FactorData::Imu { .. } => FactorKind::Imu,
            FactorData::Between { .. } => FactorKind::Between,
            FactorData::Gnss { .. } => FactorKind::Gnss,
            FactorData::Rate { .. } => FactorKind::Rate,
            FactorData::Linear { .. } => FactorKind::Linear,
        }
    }

    pub fn prior(node: u64, anchor: Pose, acc_bias: Vector3<f64>, gyro_bias: Vector3<f64>, cov: &SMatrix<f64, NAV_DIM, NAV_DIM>) -> Option<Self> {
        Some(Self {
            nodes: vec![node],
            data: FactorData::Prior { anchor, acc_bias, gyro_bias },
            sqrt_info: sqrt_information(&dyn_of(cov))?,
        })
    }

    pub fn imu(i: u64, j: u64, delta: PreintegratedDelta, gravity: Vector3<f64>) -> Option<Self> {
        let cov = delta.residual_covariance();
        Some(Self {
            nodes: vec![i, j],
            data: FactorData::Imu { delta: Box::new(delta), gravity },
            sqrt_info: sqrt_information(&dyn_of(&cov))?,
        })
    }

    pub fn between(i: u64, j: u64, odom_i: Pose, odom_j: Pose, cov: &Matrix6<f64>) -> Option<Self> {
        Some(Self {
            nodes: vec![i, j],
            data: FactorData::Between { odom_i, odom_j },
            sqrt_info: sqrt_information(&dyn_of(cov))?,
        })
    }

    pub fn gnss(node: u64, fix: GnssFix, lever: Vector3<f64>) -> Option<Self> {
        Some(Self { nodes: vec![node], data: FactorData::Gnss { fix, lever }, sqrt_info: sqrt_information(&dyn_of(&fix.cov))? })
    }

    pub fn rate(node: u64, gyro: Vector3<f64>, cov: &Matrix3<f64>) -> Option<Self> {
        Some(Self { nodes: vec![node], data: FactorData::Rate { gyro }, sqrt_info: sqrt_information(&dyn_of(cov))? })
    }

    pub fn dim(&self) -> usize {
        self.sqrt_info.nrows()
    }

    /// Unwhitened residual and Jacobians at the given node states (ordered
    /// as `self.nodes`).
    pub fn raw(&self, states: &[&NavState]) -> (DVector<f64>, Vec<DMatrix<f64>>) {
        match &self.data {
            FactorData::Prior { anchor, acc_bias, gyro_bias } => {
                let (r, j) = residual_prior(states[0], anchor, acc_bias, gyro_bias);
                (DVector::from_column_slice(r.as_slice()), vec![dyn_of(&j)])
            }
            FactorData::Imu { delta, gravity } => {
                let (r, ji, jj) = imu_residual_jacobians(states[0], states[1], delta, gravity);
                (DVector::from_column_slice(r.as_slice()), vec![dyn_of(&ji), dyn_of(&jj)])
            }
            FactorData::Between { odom_i, odom_j } => {
                let (r, ji, jj) = residual_between(&states[0].pose, &states[1].pose, odom_i, odom_j);
                let mut a = NavJacobian::<6>::zeros();
                let mut b = NavJacobian::<6>::zeros();
                a.fixed_view_mut::<6, 6>(0, 0).copy_from(&ji);
                b.fixed_view_mut::<6, 6>(0, 0).copy_from(&jj);
                (DVector::from_column_slice(r.as_slice()), vec![dyn_of(&a), dyn_of(&b)])
            }
            FactorData::Gnss { fix, lever } => {
                let (r, j) = residual_gnss(states[0], fix, lever);
                (DVector::from_column_slice(r.as_slice()), vec![dyn_of(&j)])
            }
            FactorData::Rate { gyro } => {
                let (r, j) = residual_rate(states[0], gyro);
                (DVector::from_column_slice(r.as_slice()), vec![dyn_of(&j)])
            }
            FactorData::Linear { lin, jacobian, r0 } => {
                let mut dx = DVector::zeros(NAV_DIM * lin.len());
                let mut blocks = Vec::with_capacity(lin.len());
                for (k, (l, x)) in lin.iter().zip(states).enumerate() {
                    let d = l.local(x);
                    dx.rows_mut(k * NAV_DIM, NAV_DIM).copy_from(&d);
                    let mut jl = SMatrix::<f64, NAV_DIM, NAV_DIM>::identity();
                    let xi: Vector6<f64> = d.fixed_rows::<6>(nav_idx::ROT).into_owned();
                    jl.fixed_view_mut::<6, 6>(0, 0).copy_from(&se3_right_jacobian_inv(&xi));
                    blocks.push(jacobian.columns(k * NAV_DIM, NAV_DIM) * dyn_of(&jl));
                }
                (r0 + jacobian * dx, blocks)
            }
        }
    }

    pub fn linearize(&self, states: &[&NavState]) -> Linearized {
        let (r, js) = self.raw(states);
        Linearized {
            residual: &self.sqrt_info * r,
            jacobians: js.into_iter().map(|j| &self.sqrt_info * j).collect(),
        }
    }

    /// Whitened residual only.
    pub fn error(&self, states: &[&NavState]) -> DVector<f64> {
        &self.sqrt_info * self.raw(states).0
    }
}
