//! Multi-IMU array fusion.
//!
//! Every channel is first rotated into base-frame axes. The accelerometer
//! readings then follow
//! `y_f = h_f(ω) + H Φ + η`, with `h_f` the stacked centrifugal terms
//! `[ω]²× t_k`, `H` rows `[−[t_k]×, I₃]` and `Φ = [ω̇; f_B]`, while every gyro
//! sees the same `ω`. The maximum-likelihood estimate is solved in two
//! stages: a weighted least-squares `ω★` from the gyros, then `Φ̂` from the
//! full stacked system at `ω★`.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, Timestamp};
use crate::sync::Mount;

/// Readings above these magnitudes are treated as corrupt.
pub const MAX_SPECIFIC_FORCE: f64 = 200.0;
pub const MAX_ANGULAR_RATE: f64 = 35.0;

/// Relative eigenvalue floor below which a direction of `ω̇` is treated as
/// unobservable.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MimuError {
    #[error("array must contain at least one channel")]
    EmptyArray,
    #[error("expected {expected} stacked values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("covariance is not symmetric positive definite")]
    CovarianceNotSpd,
    #[error("noise variances must be positive (channel {0})")]
    NonPositiveVariance(usize),
    #[error("sample at {0} is non-finite or exceeds plausibility gates")]
    ImplausibleSample(Timestamp),
    #[error("gyro normal matrix is singular")]
    SingularGyroSystem,
    #[error("channel index {0} out of range")]
    ChannelOutOfRange(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub stamp: Timestamp,
    /// Specific force, m/s².
    pub acc: Vector3<f64>,
    /// Angular rate, rad/s.
    pub gyro: Vector3<f64>,
}

impl ImuSample {
    pub fn new(stamp: Timestamp, acc: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        Self { stamp, acc, gyro }
    }

    pub fn is_plausible(&self) -> bool {
        self.acc.iter().chain(self.gyro.iter()).all(|x| x.is_finite())
            && self.acc.norm() < MAX_SPECIFIC_FORCE
            && self.gyro.norm() < MAX_ANGULAR_RATE
    }
}

/// Extrinsics and noise of one IMU channel.
///
/// `rotation` follows the convention `Rᵀ · f_I` = reading expressed in base
/// axes, and `lever` is the sensing point in the base frame (meters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuChannelCalib {
    pub mount: Mount,
    pub rotation: UnitQuaternion<f64>,
    pub lever: Vector3<f64>,
    pub acc_noise_var: Vector3<f64>,
    pub gyro_noise_var: Vector3<f64>,
}

impl ImuChannelCalib {
    pub fn identity(mount: Mount) -> Self {
        Self {
            mount,
            rotation: UnitQuaternion::identity(),
            lever: Vector3::zeros(),
            acc_noise_var: Vector3::repeat(1e-4),
            gyro_noise_var: Vector3::repeat(1e-6),
        }
    }

    fn rot_t(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner().transpose()
    }
}

/// Fused base-frame inertial sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusedImuSample {
    pub stamp: Timestamp,
    /// Specific force at the base origin, m/s².
    pub acc: Vector3<f64>,
    /// Angular rate, rad/s.
    pub gyro: Vector3<f64>,
    /// Angular acceleration, rad/s².
    pub ang_acc: Vector3<f64>,
    /// Covariance of `(ω̇, f_B, ω)`.
    pub cov: SMatrix<f64, 9, 9>,
    /// False when part of `ω̇` was unobservable and set to zero.
    pub ang_acc_observable: bool,
    /// Number of channels that contributed.
    pub channels: usize,
}

impl FusedImuSample {
    pub fn from_parts(stamp: Timestamp, acc: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        Self {
            stamp,
            acc,
            gyro,
            ang_acc: Vector3::zeros(),
            cov: SMatrix::zeros(),
            ang_acc_observable: false,
            channels: 1,
        }
    }
}

/// K calibrated channels with the 6K×6K measurement covariance `Q`
/// (all accelerometer rows first, then all gyro rows, in base axes).
#[derive(Clone, Debug, PartialEq)]
pub struct MimuArray {
    channels: Vec<ImuChannelCalib>,
    q: DMatrix<f64>,
}

impl MimuArray {
    /// Array with block-diagonal `Q` built from per-channel variances.
    pub fn new(channels: Vec<ImuChannelCalib>) -> Result<Self, MimuError> {
        if channels.is_empty() {
            return Err(MimuError::EmptyArray);
        }
        let k = channels.len();
        let mut q = DMatrix::zeros(6 * k, 6 * k);
        for (i, c) in channels.iter().enumerate() {
            if c.acc_noise_var.iter().chain(c.gyro_noise_var.iter()).any(|&v| v <= 0.0 || !v.is_finite()) {
                return Err(MimuError::NonPositiveVariance(i));
            }
            let rt = c.rot_t();
            let acc = rt * Matrix3::from_diagonal(&c.acc_noise_var) * rt.transpose();
            let gyro = rt * Matrix3::from_diagonal(&c.gyro_noise_var) * rt.transpose();
            q.view_mut((3 * i, 3 * i), (3, 3)).copy_from(&acc);
            q.view_mut((3 * k + 3 * i, 3 * k + 3 * i), (3, 3)).copy_from(&gyro);
        }
        Ok(Self { channels, q })
    }

    pub fn with_covariance(channels: Vec<ImuChannelCalib>, q: DMatrix<f64>) -> Result<Self, MimuError> {
        if channels.is_empty() {
            return Err(MimuError::EmptyArray);
        }
        let n = 6 * channels.len();
        if q.nrows() != n || q.ncols() != n {
            return Err(MimuError::DimensionMismatch { expected: n, got: q.nrows() });
        }
        if (&q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) || q.clone().cholesky().is_none() {
            return Err(MimuError::CovarianceNotSpd);
        }
        Ok(Self { channels, q })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[ImuChannelCalib] {
        &self.channels
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn position_of(&self, mount: Mount) -> Option<usize> {
        self.channels.iter().position(|c| c.mount == mount)
    }

    /// Sub-array of the given channels (in the given order), with the
    /// matching rows and columns of `Q`.
    pub fn subset(&self, indices: &[usize]) -> Result<MimuArray, MimuError> {
        if indices.is_empty() {
            return Err(MimuError::EmptyArray);
        }
        let k = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(MimuError::ChannelOutOfRange(bad));
        }
        let rows: Vec<usize> = indices
            .iter()
            .flat_map(|&i| (0..3).map(move |a| 3 * i + a))
            .chain(indices.iter().flat_map(|&i| (0..3).map(move |a| 3 * k + 3 * i + a)))
            .collect();
        let n = rows.len();
        let q = DMatrix::from_fn(n, n, |r, c| self.q[(rows[r], rows[c])]);
        Ok(MimuArray { channels: indices.iter().map(|&i| self.channels[i].clone()).collect(), q })
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<(), MimuError> {
        let expected = 3 * self.len();
        if v.len() != expected {
            return Err(MimuError::DimensionMismatch { expected, got: v.len() });
        }
        Ok(())
    }

    /// Rotates stacked sensor-frame readings into base axes.
    fn to_base_axes(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(y.len());
        for (k, c) in self.channels.iter().enumerate() {
            let v = c.rot_t() * y.fixed_rows::<3>(3 * k);
            out.fixed_rows_mut::<3>(3 * k).copy_from(&v);
        }
        out
    }
}

/// Stacks per-channel samples into `(y_f, y_ω)`.
pub fn stack_samples(samples: &[ImuSample]) -> (DVector<f64>, DVector<f64>) {
    let mut yf = DVector::zeros(3 * samples.len());
    let mut yw = DVector::zeros(3 * samples.len());
    for (k, s) in samples.iter().enumerate() {
        yf.fixed_rows_mut::<3>(3 * k).copy_from(&s.acc);
        yw.fixed_rows_mut::<3>(3 * k).copy_from(&s.gyro);
    }
    (yf, yw)
}

/// Re-expresses one channel's sample at the base origin, removing the
/// centrifugal and Euler accelerations caused by its lever arm:
/// `f_B = R⁻¹f_I − [ω]²× t + [t]× ω̇`, `ω_B = R⁻¹ω_I`.
pub fn transform_to_base(s: &ImuSample, c: &ImuChannelCalib, ang_acc: &Vector3<f64>) -> ImuSample {
    let rt = c.rot_t();
    let gyro = rt * s.gyro;
    let w = skew(&gyro);
    let acc = rt * s.acc - w * w * c.lever + skew(&c.lever) * ang_acc;
    ImuSample { stamp: s.stamp, acc, gyro }
}

/// Stacked array model `(h(ω), H)` of sizes 6K and 6K×6.
pub fn build_stacked_model(arr: &MimuArray, omega: &Vector3<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let k = arr.len();
    let mut h = DVector::zeros(6 * k);
    let mut big_h = DMatrix::zeros(6 * k, 6);
    let w2 = skew(omega) * skew(omega);
    for (i, c) in arr.channels.iter().enumerate() {
        h.fixed_rows_mut::<3>(3 * i).copy_from(&(w2 * c.lever));
        h.fixed_rows_mut::<3>(3 * k + 3 * i).copy_from(omega);
        big_h.view_mut((3 * i, 0), (3, 3)).copy_from(&(-skew(&c.lever)));
        big_h.view_mut((3 * i, 3), (3, 3)).copy_from(&Matrix3::identity());
    }
    (h, big_h)
}

fn gyro_block(arr: &MimuArray) -> DMatrix<f64> {
    let k = arr.len();
    arr.q.view((3 * k, 3 * k), (3 * k, 3 * k)).into_owned()
}

/// Weighted least-squares fusion of the gyro readings, given in sensor frames.
pub fn fuse_gyro(arr: &MimuArray, y_gyro: &DVector<f64>) -> Result<Vector3<f64>, MimuError> {
    arr.check_len(y_gyro)?;
    let (omega, _) = fuse_gyro_base(arr, &arr.to_base_axes(y_gyro))?;
    Ok(omega)
}

fn fuse_gyro_base(arr: &MimuArray, yw: &DVector<f64>) -> Result<(Vector3<f64>, Matrix3<f64>), MimuError> {
    let k = arr.len();
    let qw_inv = gyro_block(arr).cholesky().ok_or(MimuError::CovarianceNotSpd)?.inverse();
    // A = 1_K ⊗ I₃, so AᵀQ⁻¹A and AᵀQ⁻¹y are block sums.
    let mut normal = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for i in 0..k {
        for j in 0..k {
            let blk: Matrix3<f64> = qw_inv.fixed_view::<3, 3>(3 * i, 3 * j).into_owned();
            normal += blk;
            rhs += blk * yw.fixed_rows::<3>(3 * j);
        }
    }
    let cov = normal.try_inverse().ok_or(MimuError::SingularGyroSystem)?;
    Ok((cov * rhs, cov))
}

/// Maximum-likelihood fusion of raw, sensor-frame stacked readings.
///
/// `f_B` is always observable. Directions of `ω̇` that carry no information
/// once `f_B` is solved for (fewer than three channels, zero or collinear
/// lever arms) are pinned to zero and the sample is flagged; the result is
/// still a least-squares solution.
pub fn fuse_mle(
    arr: &MimuArray,
    stamp: Timestamp,
    y_acc: &DVector<f64>,
    y_gyro: &DVector<f64>,
) -> Result<FusedImuSample, MimuError> {
    arr.check_len(y_acc)?;
    arr.check_len(y_gyro)?;
    let k = arr.len();
    let yf = arr.to_base_axes(y_acc);
    let yw = arr.to_base_axes(y_gyro);
    let (omega, omega_cov) = fuse_gyro_base(arr, &yw)?;

    let (h, big_h) = build_stacked_model(arr, &omega);
    let mut y = DVector::zeros(6 * k);
    y.rows_mut(0, 3 * k).copy_from(&yf);
    y.rows_mut(3 * k, 3 * k).copy_from(&yw);

    let q_inv = arr.q.clone().cholesky().ok_or(MimuError::CovarianceNotSpd)?.inverse();
    let ht_qinv = big_h.transpose() * &q_inv;
    let normal = &ht_qinv * &big_h;
    let rhs = &ht_qinv * (y - h);

    let (normal_inv, full_rank) = pinned_inverse(&normal)?;
    let mut phi = &normal_inv * &rhs;
    // One refinement step recovers the digits lost to ill-conditioned levers.
    phi += &normal_inv * (&rhs - &normal * &phi);

    let mut cov = SMatrix::<f64, 9, 9>::zeros();
    cov.fixed_view_mut::<6, 6>(0, 0).copy_from(&normal_inv);
    cov.fixed_view_mut::<3, 3>(6, 6).copy_from(&omega_cov);
    Ok(FusedImuSample {
        stamp,
        acc: Vector3::new(phi[3], phi[4], phi[5]),
        gyro: omega,
        ang_acc: Vector3::new(phi[0], phi[1], phi[2]),
        cov,
        ang_acc_observable: full_rank,
        channels: k,
    })
}

/// Convenience wrapper: MLE fusion of one sample per channel.
pub fn fuse_mle_samples(arr: &MimuArray, stamp: Timestamp, samples: &[ImuSample]) -> Result<FusedImuSample, MimuError> {
    if let Some(bad) = samples.iter().find(|s| !s.is_plausible()) {
        return Err(MimuError::ImplausibleSample(bad.stamp));
    }
    let (yf, yw) = stack_samples(samples);
    fuse_mle(arr, stamp, &yf, &yw)
}

/// Equal-weight baseline: the mean of the per-channel base-frame samples,
/// compensated for centrifugal terms only (`ω̇ = 0`).
pub fn fuse_average(
    arr: &MimuArray,
    stamp: Timestamp,
    y_acc: &DVector<f64>,
    y_gyro: &DVector<f64>,
) -> Result<FusedImuSample, MimuError> {
    arr.check_len(y_acc)?;
    arr.check_len(y_gyro)?;
    let k = arr.len();
    let mut acc = Vector3::zeros();
    let mut gyro = Vector3::zeros();
    for (i, c) in arr.channels.iter().enumerate() {
        let s = ImuSample::new(stamp, y_acc.fixed_rows::<3>(3 * i).into_owned(), y_gyro.fixed_rows::<3>(3 * i).into_owned());
        let b = transform_to_base(&s, c, &Vector3::zeros());
        acc += b.acc;
        gyro += b.gyro;
    }
    let n = k as f64;
    let mut fused = FusedImuSample::from_parts(stamp, acc / n, gyro / n);
    fused.channels = k;
    Ok(fused)
}

pub fn fuse_average_samples(arr: &MimuArray, stamp: Timestamp, samples: &[ImuSample]) -> Result<FusedImuSample, MimuError> {
    let (yf, yw) = stack_samples(samples);
    fuse_average(arr, stamp, &yf, &yw)
}

/// Inverse of the 6×6 normal matrix restricted to the observable `ω̇`
/// subspace plus all of `f_B`. Unobservable `ω̇` directions are the
/// near-null eigenvectors of the Schur complement
/// `S = N_ωω − N_ωf N_ff⁻¹ N_fω`. Returns whether none were dropped.
fn pinned_inverse(n: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool), MimuError> {
    let n_ww = n.view((0, 0), (3, 3));
    let n_wf = n.view((0, 3), (3, 3));
    let n_ff_inv = n.view((3, 3), (3, 3)).into_owned().try_inverse().ok_or(MimuError::CovarianceNotSpd)?;
    let schur = n_ww - n_wf * &n_ff_inv * n_wf.transpose();
    let eig = schur.symmetric_eigen();
    let scale = n.diagonal().amax();
    let keep: Vec<usize> = (0..3).filter(|&i| eig.eigenvalues[i] > RANK_TOLERANCE * scale).collect();
    let m = keep.len();
    let mut b = DMatrix::zeros(6, m + 3);
    for (c, &i) in keep.iter().enumerate() {
        b.view_mut((0, c), (3, 1)).copy_from(&eig.eigenvectors.column(i));
    }
    b.view_mut((3, m), (3, 3)).fill_with_identity();
    let reduced = b.transpose() * n * &b;
    let inv = reduced.cholesky().ok_or(MimuError::CovarianceNotSpd)?.inverse();
    Ok((&b * inv * b.transpose(), m == 3))
}
