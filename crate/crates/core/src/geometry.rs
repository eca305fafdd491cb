//! Rigid-body algebra shared by every stage of the estimator.
//!
//! Poses live on SE(3) and are stored as a unit quaternion plus translation.
//! Tangent vectors are always ordered `(rotation, translation)`, and all
//! Jacobians in this crate follow the right-perturbation convention
//! `T ⊕ δ = T · Exp(δ)`.

use std::fmt;
use std::ops::{Mul, Sub};

use nalgebra::{
    Matrix3, Matrix4, Matrix6, Quaternion, SVector, UnitQuaternion, Vector3, Vector4, Vector6,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rotation angles at or beyond `π - LOG_ANGLE_MARGIN` are rejected by [`se3_log`].
pub const LOG_ANGLE_MARGIN: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {angle} rad is too close to pi for a unique logarithm")]
    NearSingularLog { angle: f64 },
    #[error("screw axis is ambiguous for a half-turn rotation")]
    DegenerateScrew,
    #[error("interpolation parameter {0} outside [0, 1]")]
    InvalidExponent(f64),
}

/// Integer nanoseconds since the start of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_nanos(nanos: i64) -> Self {
        Timestamp(nanos)
    }

    pub fn from_secs(secs: f64) -> Self {
        Timestamp((secs * 1e9).round() as i64)
    }

    pub fn nanos(self) -> i64 {
        self.0
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn offset(self, nanos: i64) -> Self {
        Timestamp(self.0 + nanos)
    }

    /// Signed elapsed seconds from `earlier` to `self`.
    pub fn secs_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 * 1e-9
    }
}

impl Sub for Timestamp {
    type Output = i64;

    fn sub(self, rhs: Timestamp) -> i64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:09}", self.0.div_euclid(1_000_000_000), self.0.rem_euclid(1_000_000_000))
    }
}

/// Converts seconds to integer nanoseconds.
pub fn secs_to_nanos(secs: f64) -> i64 {
    (secs * 1e9).round() as i64
}

/// Skew-symmetric matrix such that `skew(v) * b == v.cross(b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Canonical quaternion sign: non-negative scalar part.
pub fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

pub fn so3_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*phi)
}

pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    canonical(*q).scaled_axis()
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0 + t2 * t2 / 720.0, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Matrix3::identity() - a * k + b * k * k
}

/// Inverse of [`so3_right_jacobian`].
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let k = skew(phi);
    Matrix3::identity() + 0.5 * k + inv_jacobian_coeff(phi.norm()) * k * k
}

/// Left Jacobian of SO(3), which is also the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_right_jacobian(&-phi)
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_right_jacobian_inv(&-phi)
}

// 1/θ² − (1 + cos θ) / (2 θ sin θ), written with cot(θ/2) so it stays finite up to π.
fn inv_jacobian_coeff(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        1.0 / (theta * theta) - half.cos() / (2.0 * theta * half.sin())
    }
}

/// Rigid transform `world ← body` (or any `A ← B`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: canonical(rotation), translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Rotation about z by `yaw` radians followed by translation `t`.
    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw), t)
    }

    /// Builds a pose from a possibly non-orthonormal rotation matrix. The
    /// matrix is projected onto SO(3) by polar decomposition when its
    /// orthogonality defect exceeds 1e-7.
    pub fn from_matrix_parts(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_matrix(&orthonormalize(r)), t)
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::from_matrix_parts(&r, t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize_fast();
        Pose::new(rotation, self.translation + self.rotation * other.translation)
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    /// `self⁻¹ · other`
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn angle(&self) -> f64 {
        canonical(self.rotation).angle()
    }

    /// Right-perturbation retraction `self · Exp(delta)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        self.compose(&se3_exp(delta))
    }

    /// Adjoint in `(rotation, translation)` ordering:
    /// `T · Exp(ξ) · T⁻¹ = Exp(Ad_T ξ)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&self.translation) * r));
        ad
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

/// Projects a near-rotation onto SO(3) (polar decomposition) when the
/// orthogonality defect `‖RᵀR − I‖` exceeds 1e-7.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let defect = (r.transpose() * r - Matrix3::identity()).norm();
    if defect <= 1e-7 {
        return *r;
    }
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut q = u * v_t;
    if q.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        q = u * v_t;
    }
    q
}

/// SE(3) exponential with tangent ordering `(rotation, translation)`.
pub fn se3_exp(xi: &Vector6<f64>) -> Pose {
    let phi: Vector3<f64> = xi.fixed_rows::<3>(0).into_owned();
    let rho: Vector3<f64> = xi.fixed_rows::<3>(3).into_owned();
    Pose::new(so3_exp(&phi), so3_left_jacobian(&phi) * rho)
}

/// SE(3) logarithm with tangent ordering `(rotation, translation)`.
///
/// Fails when the rotation angle reaches `π − 1e-6`, where the rotation
/// axis (and hence the logarithm) is no longer unique.
pub fn se3_log(p: &Pose) -> Result<Vector6<f64>, GeometryError> {
    let angle = p.angle();
    if angle >= std::f64::consts::PI - LOG_ANGLE_MARGIN {
        return Err(GeometryError::NearSingularLog { angle });
    }
    Ok(se3_log_unchecked(p))
}

/// SE(3) logarithm without the near-π guard. Residuals use this so that an
/// arbitrarily bad linearization point still produces a finite error.
pub fn se3_log_unchecked(p: &Pose) -> Vector6<f64> {
    let phi = so3_log(&p.rotation);
    let rho = so3_left_jacobian_inv(&phi) * p.translation;
    let mut xi = Vector6::zeros();
    xi.fixed_rows_mut::<3>(0).copy_from(&phi);
    xi.fixed_rows_mut::<3>(3).copy_from(&rho);
    xi
}

// Coupling block of the SE(3) left Jacobian for tangent (ρ, φ).
fn se3_q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let (a, b, c) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0,
        )
    } else {
        let (s, co) = theta.sin_cos();
        let t2 = theta * theta;
        let t3 = t2 * theta;
        let t4 = t2 * t2;
        let t5 = t4 * theta;
        (
            (theta - s) / t3,
            (t2 + 2.0 * co - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * co) / (2.0 * t5),
        )
    };
    let p = skew(phi);
    let r = skew(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    0.5 * r + a * (pr + rp + prp) + b * (p * pr + rp * p - 3.0 * prp) + c * (prp * p + p * prp)
}

/// Right Jacobian of SE(3) in `(rotation, translation)` ordering:
/// `Exp(ξ + δ) ≈ Exp(ξ) Exp(Jr(ξ) δ)`.
pub fn se3_right_jacobian(xi: &Vector6<f64>) -> Matrix6<f64> {
    let phi: Vector3<f64> = xi.fixed_rows::<3>(0).into_owned();
    let rho: Vector3<f64> = xi.fixed_rows::<3>(3).into_owned();
    let jr = so3_right_jacobian(&phi);
    let q = se3_q_block(&-rho, &-phi);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jr);
    j.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    j
}

/// Inverse of [`se3_right_jacobian`], in closed form.
pub fn se3_right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    let phi: Vector3<f64> = xi.fixed_rows::<3>(0).into_owned();
    let rho: Vector3<f64> = xi.fixed_rows::<3>(3).into_owned();
    let jr_inv = so3_right_jacobian_inv(&phi);
    let q = se3_q_block(&-rho, &-phi);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jr_inv);
    j.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-jr_inv * q * jr_inv));
    j
}

/// Unit dual quaternion `real + ε dual` encoding a rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualQuaternion {
    pub real: Quaternion<f64>,
    pub dual: Quaternion<f64>,
}

impl DualQuaternion {
    pub fn identity() -> Self {
        Self { real: Quaternion::identity(), dual: Quaternion::new(0.0, 0.0, 0.0, 0.0) }
    }

    pub fn from_pose(p: &Pose) -> Self {
        let real = canonical(p.rotation).into_inner();
        let t = Quaternion::from_parts(0.0, p.translation);
        Self { real, dual: t * real * 0.5 }
    }

    pub fn to_pose(&self) -> Pose {
        let n = self.real.norm();
        let real = self.real / n;
        let dual = self.dual / n;
        let t = (dual * real.conjugate()) * 2.0;
        Pose::new(UnitQuaternion::new_unchecked(real), t.imag())
    }

    /// Quaternion product `self ⊗ rhs`.
    pub fn mul(&self, rhs: &DualQuaternion) -> DualQuaternion {
        DualQuaternion {
            real: self.real * rhs.real,
            dual: self.real * rhs.dual + self.dual * rhs.real,
        }
    }

    /// Inverse of a unit dual quaternion (its quaternion conjugate).
    pub fn inverse(&self) -> DualQuaternion {
        DualQuaternion { real: self.real.conjugate(), dual: self.dual.conjugate() }
    }

    pub fn canonicalized(&self) -> DualQuaternion {
        if self.real.w < 0.0 {
            DualQuaternion { real: -self.real, dual: -self.dual }
        } else {
            *self
        }
    }

    /// Norm of the real part and the `real · dual` constraint residual.
    pub fn unit_defect(&self) -> (f64, f64) {
        let r: Vector4<f64> = self.real.coords;
        let d: Vector4<f64> = self.dual.coords;
        ((r.norm() - 1.0).abs(), r.dot(&d).abs())
    }
}

/// Dual-quaternion power `q^η` along the screw axis of `q`: the constant-twist
/// path used for screw linear interpolation.
pub fn dq_pow(q: &DualQuaternion, eta: f64) -> Result<DualQuaternion, GeometryError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(GeometryError::InvalidExponent(eta));
    }
    let q = q.canonicalized();
    let w = q.real.w.clamp(-1.0, 1.0);
    if w.abs() < 1e-12 {
        return Err(GeometryError::DegenerateScrew);
    }
    let vec = q.real.imag();
    let sin_half = vec.norm();
    if sin_half < 1e-12 {
        // Pure translation: the dual part scales linearly.
        return Ok(DualQuaternion {
            real: Quaternion::identity(),
            dual: Quaternion::from_parts(0.0, q.dual.imag() * eta),
        });
    }
    let half = sin_half.atan2(w);
    let axis = vec / sin_half;
    // Pitch (translation along the axis) and moment of the screw line.
    let d = -2.0 * q.dual.w / sin_half;
    let moment = (q.dual.imag() - axis * (0.5 * d * w)) / sin_half;

    let half_e = half * eta;
    let d_e = d * eta;
    let (s, c) = half_e.sin_cos();
    Ok(DualQuaternion {
        real: Quaternion::from_parts(c, axis * s),
        dual: Quaternion::from_parts(-0.5 * d_e * s, moment * s + axis * (0.5 * d_e * c)),
    })
}

/// Screw linear interpolation between `from` and `to`:
/// `Q_from ⊗ (Q_from⁻¹ ⊗ Q_to)^η`.
pub fn sclerp(from: &Pose, to: &Pose, eta: f64) -> Result<Pose, GeometryError> {
    let qa = DualQuaternion::from_pose(from);
    let rel = qa.inverse().mul(&DualQuaternion::from_pose(to));
    Ok(qa.mul(&dq_pow(&rel, eta)?).to_pose())
}

/// Vehicle state: pose, world-frame velocity, body angular rate and the
/// accelerometer / gyroscope biases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub angular_rate: Vector3<f64>,
    pub acc_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
}

/// Tangent dimension of [`NavState`]: `(φ, ρ, v, ω, b_a, b_g)`.
pub const NAV_DIM: usize = 18;
pub type NavTangent = SVector<f64, NAV_DIM>;

/// Offsets of each block inside a [`NavTangent`].
pub mod nav_idx {
    pub const ROT: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const RATE: usize = 9;
    pub const BA: usize = 12;
    pub const BG: usize = 15;
}

impl Default for NavState {
    fn default() -> Self {
        Self::at(Pose::identity())
    }
}

impl NavState {
    pub fn at(pose: Pose) -> Self {
        Self {
            pose,
            velocity: Vector3::zeros(),
            angular_rate: Vector3::zeros(),
            acc_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pose.translation.iter().all(|x| x.is_finite())
            && self.pose.rotation.coords.iter().all(|x| x.is_finite())
            && self.velocity.iter().all(|x| x.is_finite())
            && self.angular_rate.iter().all(|x| x.is_finite())
            && self.acc_bias.iter().all(|x| x.is_finite())
            && self.gyro_bias.iter().all(|x| x.is_finite())
    }

    pub fn retract(&self, delta: &NavTangent) -> NavState {
        use nav_idx::*;
        let pose_delta: Vector6<f64> = delta.fixed_rows::<6>(ROT).into_owned();
        NavState {
            pose: self.pose.retract(&pose_delta),
            velocity: self.velocity + delta.fixed_rows::<3>(VEL),
            angular_rate: self.angular_rate + delta.fixed_rows::<3>(RATE),
            acc_bias: self.acc_bias + delta.fixed_rows::<3>(BA),
            gyro_bias: self.gyro_bias + delta.fixed_rows::<3>(BG),
        }
    }

    /// Tangent vector `δ` with `self.retract(δ) == other`.
    pub fn local(&self, other: &NavState) -> NavTangent {
        use nav_idx::*;
        let mut d = NavTangent::zeros();
        d.fixed_rows_mut::<6>(ROT).copy_from(&se3_log_unchecked(&self.pose.between(&other.pose)));
        d.fixed_rows_mut::<3>(VEL).copy_from(&(other.velocity - self.velocity));
        d.fixed_rows_mut::<3>(RATE).copy_from(&(other.angular_rate - self.angular_rate));
        d.fixed_rows_mut::<3>(BA).copy_from(&(other.acc_bias - self.acc_bias));
        d.fixed_rows_mut::<3>(BG).copy_from(&(other.gyro_bias - self.gyro_bias));
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn rand_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    fn rand_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = rand_vec(rng, 1.0).normalize();
        let angle = rng.random_range(0.0..3.0);
        Pose::new(UnitQuaternion::from_scaled_axis(axis * angle), rand_vec(rng, 10.0))
    }

    fn rz(angle: f64) -> Pose {
        Pose::from_yaw(angle, Vector3::zeros())
    }

    fn pose_dist(a: &Pose, b: &Pose) -> (f64, f64) {
        let d = a.between(b);
        (d.translation.norm(), d.angle())
    }

    #[test]
    fn skew_of_unit_z() {
        let m = skew(&Vector3::z());
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(m, expected);
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
    }

    #[test]
    fn skew_matches_cross_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = rand_vec(&mut rng, 5.0);
            let b = rand_vec(&mut rng, 5.0);
            assert_relative_eq!(skew(&a) * b, a.cross(&b), epsilon = 1e-12);
            assert_relative_eq!(skew(&a) * b, -skew(&b) * a, epsilon = 1e-12);
            assert_eq!(skew(&a).transpose(), -skew(&a));
            // [ω]²× t == ω × (ω × t)
            let sq = skew(&a) * skew(&a) * b;
            let nested = a.cross(&a.cross(&b));
            for i in 0..3 {
                assert!((sq[i] - nested[i]).abs() <= 1e-12 * (1.0 + nested[i].abs()));
            }
        }
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = rand_pose(&mut rng);
        let left = Pose::identity().compose(&p);
        assert_relative_eq!(left.translation, p.translation, epsilon = 1e-12);
        assert!(pose_dist(&left, &p).1 < 1e-12);

        let inv = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0)).inverse();
        assert_relative_eq!(inv.translation, Vector3::new(-1.0, -2.0, -3.0));

        let id = p.compose(&p.inverse());
        assert!(id.translation.norm() < 1e-9 && id.angle() < 1e-9);
    }

    #[test]
    fn rotations_compose_as_a_group() {
        let half_turn = rz(FRAC_PI_2).compose(&rz(FRAC_PI_2));
        assert!(pose_dist(&half_turn, &rz(PI)).1 < 1e-12);
    }

    #[test]
    fn composition_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (a, b, c) = (rand_pose(&mut rng), rand_pose(&mut rng), rand_pose(&mut rng));
            let (dt, dr) = pose_dist(&(a * b).compose(&c), &a.compose(&(b * c)));
            assert!(dt < 1e-9 && dr < 1e-9);
        }
    }

    #[test]
    fn long_chains_stay_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let step = rand_pose(&mut rng);
        let mut p = Pose::identity();
        for _ in 0..5000 {
            p = p.compose(&step);
        }
        let r = p.rotation_matrix();
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-9);
        assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn orthonormalize_projects_perturbed_rotation() {
        let r = rz(0.3).rotation_matrix();
        let mut noisy = r;
        noisy[(0, 1)] += 1e-4;
        let fixed = orthonormalize(&noisy);
        assert!((fixed * fixed.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!((fixed - r).norm() < 1e-4);
        assert_eq!(orthonormalize(&r), r);
    }

    #[test]
    fn dual_quaternion_identity_and_translation() {
        let dq = DualQuaternion::from_pose(&Pose::identity());
        assert_eq!(dq, DualQuaternion::identity());

        let dq = DualQuaternion::from_pose(&Pose::from_translation(Vector3::new(2.0, 0.0, 0.0)));
        assert_eq!(dq.real, Quaternion::identity());
        assert_relative_eq!(dq.dual.coords, Quaternion::new(0.0, 1.0, 0.0, 0.0).coords);
    }

    #[test]
    fn dual_quaternion_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let p = rand_pose(&mut rng);
            let dq = DualQuaternion::from_pose(&p);
            let (norm_defect, dot_defect) = dq.unit_defect();
            assert!(norm_defect < 1e-9 && dot_defect < 1e-9);
            let (dt, dr) = pose_dist(&dq.to_pose(), &p);
            assert!(dt < 1e-9 && dr < 1e-9, "dt={dt} dr={dr}");
        }
    }

    #[test]
    fn dq_pow_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let p = rand_pose(&mut rng);
            let q = DualQuaternion::from_pose(&p);
            let zero = dq_pow(&q, 0.0).unwrap().to_pose();
            assert!(zero.translation.norm() < 1e-12 && zero.angle() < 1e-12);
            let one = dq_pow(&q, 1.0).unwrap().to_pose();
            let (dt, dr) = pose_dist(&one, &p);
            assert!(dt < 1e-9 && dr < 1e-9);
        }
    }

    #[test]
    fn dq_pow_pure_translation_is_linear() {
        let q = DualQuaternion::from_pose(&Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        let half = dq_pow(&q, 0.5).unwrap().to_pose();
        assert_relative_eq!(half.translation, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-12);
        assert!(half.angle() < 1e-12);
    }

    /// Denman–Beavers iteration for the principal square root of a 4×4
    /// homogeneous transform. Independent of every routine above.
    fn matrix_sqrt(m: &Matrix4<f64>) -> Matrix4<f64> {
        let mut y = *m;
        let mut z = Matrix4::identity();
        for _ in 0..60 {
            let y_inv = y.try_inverse().unwrap();
            let z_inv = z.try_inverse().unwrap();
            let y_next = 0.5 * (y + z_inv);
            z = 0.5 * (z + y_inv);
            y = y_next;
        }
        y
    }

    #[test]
    fn dq_pow_half_matches_matrix_square_root() {
        let p = Pose::from_yaw(FRAC_PI_2, Vector3::new(0.0, 0.0, 1.0));
        let half = dq_pow(&DualQuaternion::from_pose(&p), 0.5).unwrap().to_pose();
        let oracle = Pose::from_matrix(&matrix_sqrt(&p.to_matrix()));
        assert!((half.to_matrix() - oracle.to_matrix()).norm() < 1e-9);
        // Screw along z with a z-translation: Rz(45°), half the translation.
        let expected = Pose::from_yaw(FRAC_PI_4, Vector3::new(0.0, 0.0, 0.5));
        let (dt, dr) = pose_dist(&half, &expected);
        assert!(dt < 1e-12 && dr < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let p = rand_pose(&mut rng);
            let half = dq_pow(&DualQuaternion::from_pose(&p), 0.5).unwrap().to_pose();
            let oracle = Pose::from_matrix(&matrix_sqrt(&p.to_matrix()));
            assert!((half.to_matrix() - oracle.to_matrix()).norm() < 1e-8);
            // Semigroup: the half step applied twice recovers the full motion.
            let (dt, dr) = pose_dist(&half.compose(&half), &p);
            assert!(dt < 1e-8 && dr < 1e-8);
        }
    }

    #[test]
    fn dq_pow_follows_constant_twist() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let mut xi = Vector6::zeros();
            xi.fixed_rows_mut::<3>(0).copy_from(&rand_vec(&mut rng, 1.5));
            xi.fixed_rows_mut::<3>(3).copy_from(&rand_vec(&mut rng, 5.0));
            let q = DualQuaternion::from_pose(&se3_exp(&xi));
            let eta = rng.random_range(0.0..1.0);
            let via_dq = dq_pow(&q, eta).unwrap().to_pose();
            let via_twist = se3_exp(&(xi * eta));
            let (dt, dr) = pose_dist(&via_dq, &via_twist);
            assert!(dt < 1e-9 && dr < 1e-9, "dt={dt} dr={dr}");
        }
    }

    #[test]
    fn dq_pow_rejects_half_turn() {
        let q = DualQuaternion::from_pose(&rz(PI));
        assert_eq!(dq_pow(&q, 0.5), Err(GeometryError::DegenerateScrew));
        assert!(matches!(dq_pow(&DualQuaternion::identity(), 1.5), Err(GeometryError::InvalidExponent(_))));
    }

    #[test]
    fn se3_log_of_identity_and_small_yaw() {
        assert_eq!(se3_log(&Pose::identity()).unwrap(), Vector6::zeros());
        let theta = 1e-3;
        let xi = se3_log(&rz(theta)).unwrap();
        assert_relative_eq!(xi, Vector6::new(0.0, 0.0, theta, 0.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn se3_log_rejects_near_pi() {
        assert!(matches!(se3_log(&rz(PI)), Err(GeometryError::NearSingularLog { .. })));
        assert!(se3_log(&rz(PI - 1e-3)).is_ok());
    }

    #[test]
    fn se3_exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let axis = rand_vec(&mut rng, 1.0).normalize();
            let angle = rng.random_range(0.0..3.0);
            let mut xi = Vector6::zeros();
            xi.fixed_rows_mut::<3>(0).copy_from(&(axis * angle));
            xi.fixed_rows_mut::<3>(3).copy_from(&rand_vec(&mut rng, 10.0));
            let back = se3_log(&se3_exp(&xi)).unwrap();
            worst = worst.max((back - xi).amax());
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    fn check_right_jacobian(xi: &Vector6<f64>) {
        let jr = se3_right_jacobian(xi);
        let base = se3_exp(xi);
        let h = 1e-6;
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = se3_log_unchecked(&base.between(&se3_exp(&(xi + d))));
            let minus = se3_log_unchecked(&base.between(&se3_exp(&(xi - d))));
            let col = (plus - minus) / (2.0 * h);
            let diff = (col - jr.column(k)).norm();
            assert!(diff < 1e-6 * (1.0 + col.norm()), "col {k}: {diff}");
        }
        let prod = jr * se3_right_jacobian_inv(xi);
        assert!((prod - Matrix6::identity()).norm() < 1e-9);
    }

    #[test]
    fn se3_right_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for scale in [1e-4, 0.05, 0.5, 2.0] {
            for _ in 0..20 {
                let mut xi = Vector6::zeros();
                xi.fixed_rows_mut::<3>(0).copy_from(&(rand_vec(&mut rng, 1.0).normalize() * scale));
                xi.fixed_rows_mut::<3>(3).copy_from(&rand_vec(&mut rng, 3.0));
                check_right_jacobian(&xi);
            }
        }
    }

    #[test]
    fn adjoint_conjugates_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = rand_pose(&mut rng);
            let mut xi = Vector6::zeros();
            xi.fixed_rows_mut::<3>(0).copy_from(&rand_vec(&mut rng, 0.5));
            xi.fixed_rows_mut::<3>(3).copy_from(&rand_vec(&mut rng, 1.0));
            let lhs = t.compose(&se3_exp(&xi)).compose(&t.inverse());
            let rhs = se3_exp(&(t.adjoint() * xi));
            let (dt, dr) = pose_dist(&lhs, &rhs);
            assert!(dt < 1e-9 && dr < 1e-9);
        }
    }

    #[test]
    fn nav_state_local_inverts_retract() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let mut s = NavState::at(rand_pose(&mut rng));
            s.velocity = rand_vec(&mut rng, 3.0);
            let mut d = NavTangent::zeros();
            for i in 0..NAV_DIM {
                d[i] = rng.random_range(-0.5..0.5);
            }
            let back = s.local(&s.retract(&d));
            assert!((back - d).amax() < 1e-9);
        }
    }

    #[test]
    fn timestamps_order_and_convert() {
        let a = Timestamp::from_secs(100.004);
        let b = Timestamp::from_nanos(100_000_000_000);
        assert!(b < a);
        assert_eq!(a - b, 4_000_000);
        assert_relative_eq!(a.secs_since(b), 0.004, epsilon = 1e-12);
        assert_eq!(format!("{b}"), "100.000000000");
    }
}
