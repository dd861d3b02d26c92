//! SE(3) and se(3) machinery.
//!
//! Conventions used throughout the crate:
//! - A [`Twist`] is ordered `(rho, psi)`: translational part first, rotational part second.
//! - Perturbations are applied on the LEFT: `T <- exp(delta) * T`.
//! - A pose `T_{a,b}` maps coordinates expressed in frame `b` into frame `a`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Matrix3x6, Matrix4, Matrix6, Rotation3, Vector3, Vector6};

use crate::error::{Error, Result};

/// Six-vector in the Lie algebra: `(rho_1, rho_2, rho_3, psi_1, psi_2, psi_3)`.
pub type Twist = Vector6<f64>;

/// Below this rotation angle the exponential/logarithm switch to series expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// `log_se3` refuses rotations closer than this to pi.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

// The closed-form SE(3) Jacobian blocks lose precision through cancellation well
// before SMALL_ANGLE, so they switch to their Taylor series earlier.
const JACOBIAN_SERIES_ANGLE: f64 = 0.1;

/// Rigid transform stored as a full homogeneous matrix.
#[derive(Clone, Copy, PartialEq)]
pub struct Pose(Matrix4<f64>);

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.translation();
        let r = self.rotation();
        write!(
            f,
            "Pose(t=[{:.6}, {:.6}, {:.6}], R=[[{:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}]])",
            t[0], t[1], t[2],
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose(Matrix4::identity())
    }

    /// Wraps a homogeneous matrix as-is. The bottom row is forced to `(0,0,0,1)`.
    pub fn from_matrix(m: Matrix4<f64>) -> Self {
        let mut m = m;
        m[(3, 0)] = 0.0;
        m[(3, 1)] = 0.0;
        m[(3, 2)] = 0.0;
        m[(3, 3)] = 1.0;
        Pose(m)
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Pose(m)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::from_parts(Matrix3::identity(), t)
    }

    /// Rotation about the z axis by `angle` radians with zero translation.
    pub fn from_yaw(angle: f64) -> Self {
        Self::from_parts(
            Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner(),
            Vector3::zeros(),
        )
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation().transpose();
        Pose::from_parts(rt, -(rt * self.translation()))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation())
    }

    /// Projects the rotation block back onto SO(3) (polar decomposition via SVD).
    pub fn renormalized(&self) -> Pose {
        let svd = self.rotation().svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Pose::from_parts(r, self.translation())
    }

    /// Checks the SE(3) invariants: orthonormal rotation with unit determinant,
    /// exact homogeneous bottom row.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = self.rotation();
        let rtr = r.transpose() * r - Matrix3::identity();
        let bottom_ok = self.0[(3, 0)] == 0.0
            && self.0[(3, 1)] == 0.0
            && self.0[(3, 2)] == 0.0
            && self.0[(3, 3)] == 1.0;
        bottom_ok
            && rtr.iter().all(|v| v.abs() <= tol)
            && (r.determinant() - 1.0).abs() <= tol
            && self.0.iter().all(|v| v.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose(self.0 * rhs.0)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        Pose(self.0 * rhs.0)
    }
}

/// Composes a long chain of poses, re-orthonormalizing every 100 products.
pub fn compose_chain<'a>(poses: impl IntoIterator<Item = &'a Pose>) -> Pose {
    let mut acc = Pose::identity();
    for (i, p) in poses.into_iter().enumerate() {
        acc = acc * *p;
        if (i + 1) % 100 == 0 {
            acc = acc.renormalized();
        }
    }
    acc
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

pub fn unskew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub fn rho(xi: &Twist) -> Vector3<f64> {
    xi.fixed_rows::<3>(0).into_owned()
}

pub fn psi(xi: &Twist) -> Vector3<f64> {
    xi.fixed_rows::<3>(3).into_owned()
}

pub fn twist(rho: Vector3<f64>, psi: Vector3<f64>) -> Twist {
    Twist::new(rho[0], rho[1], rho[2], psi[0], psi[1], psi[2])
}

pub fn hat(xi: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&psi(xi)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&rho(xi));
    m
}

pub fn vee(m: &Matrix4<f64>) -> Twist {
    let w = unskew(&m.fixed_view::<3, 3>(0, 0).into_owned());
    twist(m.fixed_view::<3, 1>(0, 3).into_owned(), w)
}

/// The 6x6 "curly hat" operator: `curly(a) * b = [a^, b^]∨`.
pub fn curly_hat(xi: &Twist) -> Matrix6<f64> {
    let w = skew(&psi(xi));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&rho(xi)));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    m
}

/// `p^⊙` for a homogeneous point `[p; 1]`, 3x6: `hat(xi) * [p;1] = odot(p) * xi` (top three rows).
pub fn point_odot(p: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut m = Matrix3x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(p)));
    m
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = 0.5 * unskew(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Coefficients `(a, b)` of `R = I + a w^ + b w^ w^`.
fn exp_so3_coeffs(theta: f64, series: bool) -> (f64, f64) {
    if series {
        (1.0, 0.5)
    } else {
        let half = 0.5 * theta;
        (theta.sin() / theta, 2.0 * half.sin() * half.sin() / (theta * theta))
    }
}

pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    let (a, b) = exp_so3_coeffs(theta, theta < SMALL_ANGLE);
    Matrix3::identity() + a * w + b * w * w
}

/// Coefficients `(b, c)` of `J = I + b w^ + c w^ w^`.
fn so3_jacobian_coeffs(theta: f64, series: bool) -> (f64, f64) {
    let t2 = theta * theta;
    if series {
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0 - t2 * t2 * t2 / 40320.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0,
        )
    } else {
        let half = 0.5 * theta;
        (
            2.0 * half.sin() * half.sin() / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    }
}

/// Coefficient `c` of `J^{-1} = I - w^/2 + c w^ w^`.
fn so3_jacobian_inv_coeff(theta: f64, series: bool) -> f64 {
    let t2 = theta * theta;
    if series {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2 * t2 * t2 / 1209600.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / t2
    }
}

/// Coefficients of the three bracketed terms of `Q(rho, phi)`.
fn se3_q_coeffs(theta: f64, series: bool) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if series {
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0 - t2 * t2 * t2 / 362880.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0 - t2 * t2 * t2 / 3628800.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0 - t2 * t2 * t2 / 9979200.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    }
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    let (b, c) = so3_jacobian_coeffs(theta, theta < JACOBIAN_SERIES_ANGLE);
    Matrix3::identity() + b * w + c * w * w
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    let c = so3_jacobian_inv_coeff(theta, theta < JACOBIAN_SERIES_ANGLE);
    Matrix3::identity() - 0.5 * w + c * w * w
}

/// The coupling block `Q(rho, phi)` of the SE(3) left Jacobian.
fn se3_q(xi: &Twist) -> Matrix3<f64> {
    let p = skew(&rho(xi));
    let w = skew(&psi(xi));
    let theta = psi(xi).norm();
    let (c1, c2, c3) = se3_q_coeffs(theta, theta < JACOBIAN_SERIES_ANGLE);
    let wp = w * p;
    let pw = p * w;
    let wpw = w * p * w;
    0.5 * p + c1 * (wp + pw + wpw) + c2 * (w * wp + pw * w - 3.0 * wpw) + c3 * (wpw * w + w * wpw)
}

/// `theta / (2 sin theta)`, the scale from `(R - R^T)∨` to the rotation vector.
fn log_so3_coeff(theta: f64, sin_theta: f64, series: bool) -> f64 {
    if series {
        0.5 + theta * theta / 12.0
    } else {
        theta / (2.0 * sin_theta)
    }
}

pub fn exp_se3(xi: &Twist) -> Pose {
    let phi = psi(xi);
    let r = exp_so3(&phi);
    let t = so3_left_jacobian(&phi) * rho(xi);
    Pose::from_parts(r, t)
}

/// Inverse of [`exp_se3`]. Fails with [`Error::AngleNearPi`] when the rotation
/// angle is within [`NEAR_PI_MARGIN`] of pi.
pub fn log_se3(pose: &Pose) -> Result<Twist> {
    let r = pose.rotation();
    let v = unskew(&(r - r.transpose()));
    let s = 0.5 * v.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta > PI - NEAR_PI_MARGIN {
        return Err(Error::AngleNearPi { angle: theta });
    }
    let phi = log_so3_coeff(theta, s, theta < SMALL_ANGLE) * v;
    let rho = so3_left_jacobian_inv(&phi) * pose.translation();
    Ok(twist(rho, phi))
}

pub fn adjoint(pose: &Pose) -> Matrix6<f64> {
    let r = pose.rotation();
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&pose.translation()) * r));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    m
}

fn check_jacobian_domain(xi: &Twist) -> Result<()> {
    let theta = psi(xi).norm();
    if theta > PI - NEAR_PI_MARGIN {
        return Err(Error::AngleNearPi { angle: theta });
    }
    Ok(())
}

/// Left Jacobian of SE(3): `exp(xi + d) ≈ exp(J(xi) d) exp(xi)`.
pub fn left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&psi(xi));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&se3_q(xi));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    m
}

pub fn left_jacobian_inv(xi: &Twist) -> Result<Matrix6<f64>> {
    check_jacobian_domain(xi)?;
    let jinv = so3_left_jacobian_inv(&psi(xi));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jinv * se3_q(xi) * jinv));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    Ok(m)
}

const BERNOULLI_TERMS: usize = 40;

/// `B_n / n!` for n = 0..BERNOULLI_TERMS, from the generating function `x / (e^x - 1)`.
fn bernoulli_coefficients() -> &'static [f64; BERNOULLI_TERMS] {
    static COEFFS: OnceLock<[f64; BERNOULLI_TERMS]> = OnceLock::new();
    COEFFS.get_or_init(|| {
        let mut c = [0.0; BERNOULLI_TERMS];
        let mut inv_fact = [0.0; BERNOULLI_TERMS + 2];
        inv_fact[0] = 1.0;
        for k in 1..inv_fact.len() {
            inv_fact[k] = inv_fact[k - 1] / k as f64;
        }
        c[0] = 1.0;
        for m in 1..BERNOULLI_TERMS {
            if m >= 3 && m % 2 == 1 {
                continue;
            }
            let s: f64 = (0..m).map(|k| c[k] * inv_fact[m + 1 - k]).sum();
            c[m] = -s;
        }
        c
    })
}

/// Derivative of `left_jacobian_inv(xi) * v` with respect to `xi`, evaluated
/// exactly from the Bernoulli series `J^{-1}(xi) = sum_n B_n/n! curly(xi)^n`.
pub fn left_jacobian_inv_derivative(xi: &Twist, v: &Twist) -> Result<Matrix6<f64>> {
    check_jacobian_domain(xi)?;
    let coeffs = bernoulli_coefficients();
    let a = curly_hat(xi);
    let n = BERNOULLI_TERMS;
    // u[m] = a^m v
    let mut u = Vec::with_capacity(n);
    u.push(*v);
    for m in 1..n {
        u.push(a * u[m - 1]);
    }
    // d/dxi (a^n v) h = sum_i a^i curly(h) a^{n-1-i} v = -sum_i a^i curly(a^{n-1-i} v) h
    // Horner-style accumulation over i: sum_i a^i M_i with M_i = sum_m c_{m+i+1} curly(u_m).
    let mut acc = Matrix6::zeros();
    for i in (0..n - 1).rev() {
        let mut mi = Matrix6::zeros();
        for (m, um) in u.iter().enumerate().take(n - 1 - i) {
            let c = coeffs[m + i + 1];
            if c != 0.0 {
                mi += c * curly_hat(um);
            }
        }
        acc = a * acc + mi;
    }
    Ok(-acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_twist(rng: &mut ChaCha8Rng, max_rot: f64) -> Twist {
        let rho = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let mut psi: Vector3<f64> = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        psi *= rng.random_range(0.0..max_rot) / psi.norm().max(1e-12);
        twist(rho, psi)
    }

    fn max_abs<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn hat_zero_and_z_rotation() {
        assert_eq!(hat(&Twist::zeros()), Matrix4::zeros());
        let m = hat(&Twist::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0));
        // skew((0,0,1)) = [[0,-1,0],[1,0,0],[0,0,0]]
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(m.fixed_view::<3, 3>(0, 0).into_owned(), expected);
        assert_eq!(m.row(3).into_owned(), nalgebra::RowVector4::zeros());
    }

    #[test]
    fn vee_inverts_hat() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let xi = random_twist(&mut rng, 3.0);
            assert_eq!(vee(&hat(&xi)), xi);
        }
    }

    #[test]
    fn exp_special_cases() {
        assert_eq!(exp_se3(&Twist::zeros()), Pose::identity());
        let p = exp_se3(&Twist::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0));
        assert_eq!(p.rotation(), Matrix3::identity());
        assert_eq!(p.translation(), Vector3::new(1.0, 2.0, 3.0));

        // Rodrigues: R = I + sin(t) K + (1 - cos(t)) K^2 with K = skew(z)
        let p = exp_se3(&Twist::new(0.0, 0.0, 0.0, 0.0, 0.0, PI / 2.0));
        let r = p.rotation();
        assert!(r[(0, 0)].abs() < 1e-12);
        assert!((r[(0, 1)] + 1.0).abs() < 1e-12);
        assert!((r[(1, 0)] - 1.0).abs() < 1e-12);
        assert!((r[(2, 2)] - 1.0).abs() < 1e-12);
        assert!(p.is_valid(1e-12));
    }

    #[test]
    fn log_identity_and_round_trips() {
        assert_eq!(log_se3(&Pose::identity()).unwrap(), Twist::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let xi = random_twist(&mut rng, 2.0);
            let back = log_se3(&exp_se3(&xi)).unwrap();
            assert!(max_abs(&(back - xi)) < 1e-9, "{xi:?} -> {back:?}");
            let t = exp_se3(&xi);
            let t2 = exp_se3(&log_se3(&t).unwrap());
            assert!(max_abs(&(t2.matrix() - t.matrix())) < 1e-9);
        }
    }

    #[test]
    fn log_tiny_rotation_matches_taylor() {
        let phi = Vector3::new(3e-11, -6e-11, 7e-11);
        let rho = Vector3::new(0.4, -1.0, 2.0);
        // Second-order Taylor oracle for the matrix, first-order for the inverse.
        let w = skew(&phi);
        let r = Matrix3::identity() + w + 0.5 * w * w;
        let t = (Matrix3::identity() + 0.5 * w) * rho;
        let xi = log_se3(&Pose::from_parts(r, t)).unwrap();
        assert!(max_abs(&(psi(&xi) - phi)) < 1e-12);
        assert!(max_abs(&(super::rho(&xi) - rho)) < 1e-12);
    }

    #[test]
    fn log_near_pi_is_rejected() {
        let p = exp_se3(&Twist::new(0.0, 0.0, 0.0, PI - 1e-7, 0.0, 0.0));
        assert!(matches!(log_se3(&p), Err(Error::AngleNearPi { .. })));
        let xi = Twist::new(0.0, 0.0, 0.0, 0.0, PI, 0.0);
        assert!(left_jacobian_inv(&xi).is_err());
    }

    #[test]
    fn exp_inverse_is_exp_of_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let xi = random_twist(&mut rng, 3.0);
            let a = exp_se3(&xi).inverse();
            let b = exp_se3(&-xi);
            assert!(max_abs(&(a.matrix() - b.matrix())) < 1e-9);
        }
    }

    #[test]
    fn small_angle_branches_are_continuous() {
        for theta in [SMALL_ANGLE * (1.0 - 1e-6), SMALL_ANGLE, SMALL_ANGLE * (1.0 + 1e-6)] {
            let (a0, b0) = exp_so3_coeffs(theta, true);
            let (a1, b1) = exp_so3_coeffs(theta, false);
            // b multiplies w^2 = O(theta^2), so its absolute mismatch is scaled accordingly.
            assert!((a0 - a1).abs() < 1e-10);
            assert!((b0 - b1).abs() * theta * theta < 1e-10);
            let s = theta.sin();
            let d = log_so3_coeff(theta, s, true) - log_so3_coeff(theta, s, false);
            assert!(d.abs() < 1e-10);
        }
        for theta in [
            JACOBIAN_SERIES_ANGLE * (1.0 - 1e-6),
            JACOBIAN_SERIES_ANGLE,
            JACOBIAN_SERIES_ANGLE * (1.0 + 1e-6),
        ] {
            let (b0, c0) = so3_jacobian_coeffs(theta, true);
            let (b1, c1) = so3_jacobian_coeffs(theta, false);
            // Each coefficient multiplies a product of k skew factors, which scales as theta^k.
            let t2 = theta * theta;
            assert!((b0 - b1).abs() * theta < 1e-10 && (c0 - c1).abs() * t2 < 1e-10);
            let d = so3_jacobian_inv_coeff(theta, true) - so3_jacobian_inv_coeff(theta, false);
            assert!(d.abs() * t2 < 1e-10);
            let q0 = se3_q_coeffs(theta, true);
            let q1 = se3_q_coeffs(theta, false);
            assert!((q0.0 - q1.0).abs() * theta < 1e-10);
            assert!((q0.1 - q1.1).abs() * t2 < 1e-10);
            assert!((q0.2 - q1.2).abs() * t2 * theta < 1e-10);
        }
        // Whole-map continuity across the exp/log switchover.
        let rho = Vector3::new(0.3, -0.2, 0.9);
        let dir = Vector3::new(1.0, 2.0, -2.0).normalize();
        let eps = 1e-14;
        let below = twist(rho, dir * (SMALL_ANGLE - eps));
        let above = twist(rho, dir * (SMALL_ANGLE + eps));
        assert!(max_abs(&(exp_se3(&below).matrix() - exp_se3(&above).matrix())) < 1e-10);
        let lb = log_se3(&exp_se3(&below)).unwrap();
        let la = log_se3(&exp_se3(&above)).unwrap();
        assert!(max_abs(&(lb - la)) < 1e-10);
    }

    #[test]
    fn jacobians_at_zero_and_adjoint_identity() {
        assert_eq!(left_jacobian(&Twist::zeros()), Matrix6::identity());
        assert_eq!(left_jacobian_inv(&Twist::zeros()).unwrap(), Matrix6::identity());
        assert_eq!(adjoint(&Pose::identity()), Matrix6::identity());
    }

    #[test]
    fn jacobian_inverse_and_adjoint_homomorphism() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let xi = random_twist(&mut rng, 2.5);
            let prod = left_jacobian(&xi) * left_jacobian_inv(&xi).unwrap();
            assert!(max_abs(&(prod - Matrix6::identity())) < 1e-9);
            let a = exp_se3(&random_twist(&mut rng, 3.0));
            let b = exp_se3(&random_twist(&mut rng, 3.0));
            let lhs = adjoint(&(a * b));
            let rhs = adjoint(&a) * adjoint(&b);
            assert!(max_abs(&(lhs - rhs)) < 1e-9);
        }
    }

    #[test]
    fn left_jacobian_matches_finite_differences() {
        // exp(xi + h e_i) exp(xi)^{-1} ≈ exp(h J(xi) e_i)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let step = 1e-6;
        for _ in 0..10 {
            let xi = random_twist(&mut rng, 2.0);
            let j = left_jacobian(&xi);
            let base_inv = exp_se3(&xi).inverse();
            for i in 0..6 {
                let mut dp = xi;
                dp[i] += step;
                let mut dm = xi;
                dm[i] -= step;
                let fp = log_se3(&(exp_se3(&dp) * base_inv)).unwrap();
                let fm = log_se3(&(exp_se3(&dm) * base_inv)).unwrap();
                let col = (fp - fm) / (2.0 * step);
                let err = (col - j.column(i)).norm();
                assert!(err < 1e-5 * j.column(i).norm().max(1.0), "column {i}: {err}");
            }
        }
    }

    #[test]
    fn bernoulli_series_reproduces_closed_form_inverse() {
        let c = bernoulli_coefficients();
        assert!((c[1] + 0.5).abs() < 1e-15);
        assert!((c[2] - 1.0 / 12.0).abs() < 1e-15);
        assert!((c[4] + 1.0 / 720.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let xi = random_twist(&mut rng, 1.5);
            let a = curly_hat(&xi);
            let mut series = Matrix6::zeros();
            let mut pow = Matrix6::identity();
            for ck in c.iter() {
                series += *ck * pow;
                pow = a * pow;
            }
            let closed = left_jacobian_inv(&xi).unwrap();
            assert!(max_abs(&(series - closed)) < 1e-10);
        }
    }

    #[test]
    fn left_jacobian_inv_derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let step = 1e-6;
        for _ in 0..10 {
            let xi = random_twist(&mut rng, 1.2);
            let v = random_twist(&mut rng, 2.0);
            let d = left_jacobian_inv_derivative(&xi, &v).unwrap();
            for i in 0..6 {
                let mut p = xi;
                p[i] += step;
                let mut m = xi;
                m[i] -= step;
                let fd = (left_jacobian_inv(&p).unwrap() * v - left_jacobian_inv(&m).unwrap() * v)
                    / (2.0 * step);
                let err = (fd - d.column(i)).norm();
                assert!(err < 1e-5 * fd.norm().max(1.0), "column {i}: {err}");
            }
        }
    }

    #[test]
    fn renormalize_repairs_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let steps: Vec<Pose> = (0..1000)
            .map(|_| exp_se3(&random_twist(&mut rng, 0.3)))
            .collect();
        let p = compose_chain(&steps);
        assert!(p.is_valid(1e-9));
        let mut m = *exp_se3(&random_twist(&mut rng, 1.0)).matrix();
        m[(0, 1)] += 1e-4;
        let fixed = Pose::from_matrix(m).renormalized();
        assert!(fixed.is_valid(1e-12));
    }
}
