//! Keypoint measurement factors, the Geman-McClure robustifier and the two
//! outlier gates.

use nalgebra::{Matrix3, Matrix3x6, Vector3, Vector6};

use crate::features::keypoints::{beta_metric, log_det_winv};
use crate::liegroup::{skew, Pose};

/// Squared-Mahalanobis threshold above which a factor is left out of the M-step.
pub const DEFAULT_ALPHA: f64 = 4.0;
/// Anisotropy threshold below which a keypoint is left out of the E-step.
pub const DEFAULT_BETA: f64 = 0.05;

/// Keypoint `z` of window frame `frame` matched to reference point `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementFactor {
    pub frame: usize,
    /// Index of the keypoint within its frame.
    pub keypoint: usize,
    pub z: Vector3<f64>,
    pub r: Vector3<f64>,
    pub covparams: Vector6<f64>,
    pub winv: Matrix3<f64>,
}

impl MeasurementFactor {
    pub fn log_det_winv(&self) -> f64 {
        log_det_winv(&self.covparams)
    }

    pub fn error(&self, t_k0: &Pose, t_tau0: &Pose) -> Vector3<f64> {
        measurement_error(&self.z, &self.r, t_k0, t_tau0)
    }

    pub fn mahalanobis_sq(&self, t_k0: &Pose, t_tau0: &Pose) -> f64 {
        let e = self.error(t_k0, t_tau0);
        e.dot(&(self.winv * e))
    }
}

/// Factor graph of one window: priors link every consecutive knot pair;
/// measurements link one optimized frame to the locked first frame.
#[derive(Clone, Debug, Default)]
pub struct FactorSet {
    pub measurements: Vec<MeasurementFactor>,
    /// Whether each measurement survived the anisotropy gate.
    pub beta_kept: Vec<bool>,
}

impl FactorSet {
    pub fn new(measurements: Vec<MeasurementFactor>, beta: f64) -> Self {
        let beta_kept = measurements
            .iter()
            .map(|f| beta_gate(&f.covparams, beta))
            .collect();
        Self {
            measurements,
            beta_kept,
        }
    }

    /// The measurements that enter the E-step.
    pub fn estep_measurements(&self) -> Vec<MeasurementFactor> {
        self.measurements
            .iter()
            .zip(&self.beta_kept)
            .filter(|(_, &k)| k)
            .map(|(f, _)| f.clone())
            .collect()
    }
}

/// `e = z - D T_k0 T_tau0^-1 [r; 1]`.
pub fn measurement_error(
    z: &Vector3<f64>,
    r: &Vector3<f64>,
    t_k0: &Pose,
    t_tau0: &Pose,
) -> Vector3<f64> {
    let t_ktau = t_k0 * &t_tau0.inverse();
    z - t_ktau.transform_point(r)
}

/// Jacobians of the error with respect to left perturbations of `T_k0` and `T_tau0`.
pub fn measurement_jacobians(
    r: &Vector3<f64>,
    t_k0: &Pose,
    t_tau0: &Pose,
) -> (Matrix3x6<f64>, Matrix3x6<f64>) {
    let t_ktau = t_k0 * &t_tau0.inverse();
    let q = t_ktau.transform_point(r);
    let mut jk = Matrix3x6::zeros();
    jk.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity()));
    jk.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&q));
    let rot = t_ktau.rotation();
    let mut jt = Matrix3x6::zeros();
    jt.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    jt.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rot * skew(r)));
    (jk, jt)
}

/// `1/2 e^T W e - ln|W|`.
pub fn factor_cost(e: &Vector3<f64>, winv: &Matrix3<f64>, log_det: f64) -> f64 {
    0.5 * e.dot(&(winv * e)) - log_det
}

/// IRLS weight `1/(1+u^2)^2` of the unit-scale Geman-McClure cost.
pub fn geman_mcclure_weight(mahalanobis_sq: f64) -> f64 {
    let d = 1.0 + mahalanobis_sq;
    1.0 / (d * d)
}

/// Geman-McClure cost `1/2 u^2/(1+u^2)` whose IRLS weight is [`geman_mcclure_weight`].
pub fn geman_mcclure_cost(mahalanobis_sq: f64) -> f64 {
    0.5 * mahalanobis_sq / (1.0 + mahalanobis_sq)
}

/// `true` keeps the factor in the M-step.
pub fn alpha_gate(e: &Vector3<f64>, winv: &Matrix3<f64>, alpha: f64) -> bool {
    e.dot(&(winv * e)) <= alpha
}

/// `true` keeps the keypoint in the E-step.
pub fn beta_gate(covparams: &Vector6<f64>, beta: f64) -> bool {
    beta_metric(covparams) >= beta
}
