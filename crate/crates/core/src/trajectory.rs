//! Trajectory state and the white-noise-on-acceleration (WNOA) motion prior.

use nalgebra::{DMatrix, Matrix6, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{
    adjoint, left_jacobian_inv, left_jacobian_inv_derivative, log_se3, Pose, Twist,
};

pub type Vector12 = SVector<f64, 12>;
pub type Matrix12 = SMatrix<f64, 12, 12>;

/// One trajectory knot: pose `T_{k,0}` and body-centric velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateKnot {
    pub stamp: f64,
    pub pose: Pose,
    pub velocity: Twist,
}

impl StateKnot {
    pub fn new(stamp: f64, pose: Pose, velocity: Twist) -> Self {
        Self {
            stamp,
            pose,
            velocity,
        }
    }

    /// Constant-velocity extrapolation to `stamp`.
    pub fn extrapolate(&self, stamp: f64) -> StateKnot {
        let dt = stamp - self.stamp;
        StateKnot {
            stamp,
            pose: crate::liegroup::exp_se3(&(dt * self.velocity)) * self.pose,
            velocity: self.velocity,
        }
    }

    /// Applies a left perturbation `[d_pose; d_velocity]`.
    pub fn perturbed(&self, delta: &Vector12) -> StateKnot {
        let dxi: Twist = delta.fixed_rows::<6>(0).into_owned();
        let dv: Twist = delta.fixed_rows::<6>(6).into_owned();
        StateKnot {
            stamp: self.stamp,
            pose: crate::liegroup::exp_se3(&dxi) * self.pose,
            velocity: self.velocity + dv,
        }
    }
}

/// Diagonal power-spectral density of the white acceleration noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionPriorConfig {
    pub qc_diag: [f64; 6],
}

impl Default for MotionPriorConfig {
    /// Hand-set for urban driving: loose forward acceleration, tight lateral and
    /// vertical slip, tight roll/pitch, moderate yaw.
    fn default() -> Self {
        Self {
            qc_diag: [0.3 * 0.3, 0.03 * 0.03, 0.03 * 0.03, 0.01 * 0.01, 0.01 * 0.01, 0.1 * 0.1],
        }
    }
}

impl MotionPriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.qc_diag.iter().all(|q| q.is_finite() && *q > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "qc_diag entries must be positive and finite, got {:?}",
                self.qc_diag
            )))
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            qc_diag: self.qc_diag.map(|q| q * factor),
        }
    }
}

/// Approximate posterior over a window: mean knots plus the information matrix
/// of the optimized knots (12 DOF each, time order, locked reference excluded).
#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    pub knots: Vec<StateKnot>,
    /// Index into `knots` of the locked reference.
    pub locked: usize,
    pub info: DMatrix<f64>,
}

impl GaussianPosterior {
    /// Position of knot `k` in the optimized state vector, `None` for the locked knot.
    pub fn state_block(&self, k: usize) -> Option<usize> {
        match k.cmp(&self.locked) {
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Less => Some(k),
            std::cmp::Ordering::Greater => Some(k - 1),
        }
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.info.amax().max(f64::MIN_POSITIVE);
        (&self.info - self.info.transpose()).amax() <= rel_tol * scale
    }

    /// `0.5 * ln|Sigma^{-1}|`, the entropy-related term of the loss functional.
    pub fn half_log_det_info(&self) -> Result<f64> {
        let chol = self
            .info
            .clone()
            .cholesky()
            .ok_or(Error::SingularInformation)?;
        Ok(chol.l().diagonal().iter().map(|d| d.ln()).sum())
    }
}

fn check_dt(prev: &StateKnot, next: &StateKnot) -> Result<f64> {
    let dt = next.stamp - prev.stamp;
    if !(dt > 0.0) {
        return Err(Error::NonMonotonicStamps {
            prev: prev.stamp,
            next: next.stamp,
        });
    }
    Ok(dt)
}

/// Discrete WNOA error between consecutive knots:
/// `[ log(T_n T_p^{-1}) - dt v_p ; J^{-1}(log(T_n T_p^{-1})) v_n - v_p ]`.
pub fn wnoa_error(prev: &StateKnot, next: &StateKnot) -> Result<Vector12> {
    let dt = check_dt(prev, next)?;
    let xi = log_se3(&(next.pose * prev.pose.inverse()))?;
    let top = xi - dt * prev.velocity;
    let bottom = left_jacobian_inv(&xi)? * next.velocity - prev.velocity;
    let mut e = Vector12::zeros();
    e.fixed_rows_mut::<6>(0).copy_from(&top);
    e.fixed_rows_mut::<6>(6).copy_from(&bottom);
    Ok(e)
}

/// Inverse of the WNOA process covariance
/// `Q_k = [[dt^3/3 Qc, dt^2/2 Qc], [dt^2/2 Qc, dt Qc]]`, in closed form.
pub fn wnoa_information(dt: f64, cfg: &MotionPriorConfig) -> Result<Matrix12> {
    if !(dt > 0.0) {
        return Err(Error::NonPositiveDt(dt));
    }
    let qinv = Matrix6::from_diagonal(&SVector::<f64, 6>::from_iterator(
        cfg.qc_diag.iter().map(|q| 1.0 / q),
    ));
    let mut m = Matrix12::zeros();
    m.fixed_view_mut::<6, 6>(0, 0)
        .copy_from(&(12.0 / (dt * dt * dt) * qinv));
    m.fixed_view_mut::<6, 6>(0, 6)
        .copy_from(&(-6.0 / (dt * dt) * qinv));
    m.fixed_view_mut::<6, 6>(6, 0)
        .copy_from(&(-6.0 / (dt * dt) * qinv));
    m.fixed_view_mut::<6, 6>(6, 6).copy_from(&(4.0 / dt * qinv));
    Ok(m)
}

/// The process covariance `Q_k` itself.
pub fn wnoa_covariance(dt: f64, cfg: &MotionPriorConfig) -> Result<Matrix12> {
    if !(dt > 0.0) {
        return Err(Error::NonPositiveDt(dt));
    }
    let qc = Matrix6::from_diagonal(&SVector::<f64, 6>::from_column_slice(&cfg.qc_diag));
    let mut m = Matrix12::zeros();
    m.fixed_view_mut::<6, 6>(0, 0)
        .copy_from(&(dt * dt * dt / 3.0 * qc));
    m.fixed_view_mut::<6, 6>(0, 6).copy_from(&(dt * dt / 2.0 * qc));
    m.fixed_view_mut::<6, 6>(6, 0).copy_from(&(dt * dt / 2.0 * qc));
    m.fixed_view_mut::<6, 6>(6, 6).copy_from(&(dt * qc));
    Ok(m)
}

/// Jacobians of [`wnoa_error`] with respect to left perturbations
/// `[d_pose; d_velocity]` of the previous and next knot.
pub fn wnoa_jacobians(prev: &StateKnot, next: &StateKnot) -> Result<(Matrix12, Matrix12)> {
    let dt = check_dt(prev, next)?;
    let rel = next.pose * prev.pose.inverse();
    let xi = log_se3(&rel)?;
    let jinv = left_jacobian_inv(&xi)?;
    let ad = adjoint(&rel);
    // d xi / d delta_next = J^{-1}, d xi / d delta_prev = -J^{-1} Ad(T_n T_p^{-1})
    let dxi_next = jinv;
    let dxi_prev = -jinv * ad;
    let dj = left_jacobian_inv_derivative(&xi, &next.velocity)?;

    let mut jp = Matrix12::zeros();
    jp.fixed_view_mut::<6, 6>(0, 0).copy_from(&dxi_prev);
    jp.fixed_view_mut::<6, 6>(0, 6)
        .copy_from(&(-dt * Matrix6::identity()));
    jp.fixed_view_mut::<6, 6>(6, 0).copy_from(&(dj * dxi_prev));
    jp.fixed_view_mut::<6, 6>(6, 6)
        .copy_from(&(-Matrix6::identity()));

    let mut jn = Matrix12::zeros();
    jn.fixed_view_mut::<6, 6>(0, 0).copy_from(&dxi_next);
    jn.fixed_view_mut::<6, 6>(6, 0).copy_from(&(dj * dxi_next));
    jn.fixed_view_mut::<6, 6>(6, 6).copy_from(&jinv);
    Ok((jp, jn))
}
