//! Central finite-difference checks of every analytic derivative: Lie group
//! Jacobians, motion-prior and measurement Jacobians, covariance composition,
//! descriptor matching, the network heads and the full M-step gradient.

use nalgebra::{DVector, Matrix3, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::features::keypoints::{compose_winv, compose_winv_backward};
use crate::features::backbone::heads_backward;
use crate::features::{
    backbone_forward, match_descriptor, FrameGeometry, MatchConfig, ModelParams, PointFeature, ReferenceFrame,
};
use crate::features::matching::match_backward;
use crate::factors::{measurement_error, measurement_jacobians};
use crate::learning::{fixed_structure_loss, forward_minibatch, mstep_gradient, TrainConfig};
use crate::liegroup::{exp_se3, left_jacobian, log_se3, Twist};
use crate::simworld::{circle_start, raycast_scan, simulate_trajectory, SensorSpec, WorldSpec};
use crate::trajectory::{wnoa_error, wnoa_jacobians, MotionPriorConfig, StateKnot, Vector12};
use crate::window::{constant_velocity_knots, EstimatorConfig};

/// Relative-error tolerance every suite must meet.
pub const TOLERANCE: f64 = 1e-4;
/// Random instances per suite.
pub const INSTANCES: usize = 20;
/// Below this magnitude a derivative is compared in absolute terms.
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst_relative_error: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.worst_relative_error <= TOLERANCE
    }
}

fn rel_err(fd: &DVector<f64>, analytic: &DVector<f64>) -> f64 {
    let scale = fd.norm().max(analytic.norm()).max(SCALE_FLOOR);
    let e = (fd - analytic).norm() / scale;
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

fn dvec<const N: usize>(v: &nalgebra::SVector<f64, N>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

fn random_twist(rng: &mut ChaCha8Rng, lin: f64, rot: f64) -> Twist {
    Twist::from_fn(|i, _| rng.random_range(-1.0..1.0) * if i < 3 { lin } else { rot })
}

fn random_knot(rng: &mut ChaCha8Rng, stamp: f64) -> StateKnot {
    StateKnot::new(stamp, exp_se3(&random_twist(rng, 5.0, 0.8)), random_twist(rng, 3.0, 0.5))
}

fn run(name: &'static str, seed: u64, mut instance: impl FnMut(&mut ChaCha8Rng) -> Result<f64>) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        worst = worst.max(instance(&mut rng)?);
    }
    Ok(SuiteResult {
        name,
        instances: INSTANCES,
        worst_relative_error: worst,
    })
}

/// `exp(xi + h e_i) exp(xi)^-1 = exp(h J(xi) e_i) + O(h^2)`.
fn left_jacobian_suite() -> Result<SuiteResult> {
    run("left_jacobian", 1, |rng| {
        let xi = random_twist(rng, 3.0, 1.0);
        let j = left_jacobian(&xi);
        let base_inv = exp_se3(&xi).inverse();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..6 {
            let (mut p, mut m) = (xi, xi);
            p[i] += h;
            m[i] -= h;
            let fd = (log_se3(&(exp_se3(&p) * base_inv))? - log_se3(&(exp_se3(&m) * base_inv))?) / (2.0 * h);
            worst = worst.max(rel_err(&dvec(&fd), &dvec(&j.column(i).into_owned())));
        }
        Ok(worst)
    })
}

fn wnoa_suite() -> Result<SuiteResult> {
    run("motion_prior_jacobians", 2, |rng| {
        let a = random_knot(rng, 0.0);
        let dt = rng.random_range(0.05..0.5);
        let b = random_knot(rng, dt);
        let (jp, jn) = wnoa_jacobians(&a, &b)?;
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..12 {
            let mut d = Vector12::zeros();
            d[i] = h;
            let fd_p = (wnoa_error(&a.perturbed(&d), &b)? - wnoa_error(&a.perturbed(&-d), &b)?) / (2.0 * h);
            let fd_n = (wnoa_error(&a, &b.perturbed(&d))? - wnoa_error(&a, &b.perturbed(&-d))?) / (2.0 * h);
            worst = worst
                .max(rel_err(&dvec(&fd_p), &dvec(&jp.column(i).into_owned())))
                .max(rel_err(&dvec(&fd_n), &dvec(&jn.column(i).into_owned())));
        }
        Ok(worst)
    })
}

fn measurement_suite() -> Result<SuiteResult> {
    run("measurement_jacobians", 3, |rng| {
        let tk = exp_se3(&random_twist(rng, 5.0, 1.0));
        let tt = exp_se3(&random_twist(rng, 5.0, 1.0));
        let z = Vector3::from_fn(|_, _| rng.random_range(-20.0..20.0));
        let r = Vector3::from_fn(|_, _| rng.random_range(-20.0..20.0));
        let (jk, jt) = measurement_jacobians(&r, &tk, &tt);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..6 {
            let mut d = Twist::zeros();
            d[i] = h;
            let fd_k = (measurement_error(&z, &r, &(exp_se3(&d) * tk), &tt)
                - measurement_error(&z, &r, &(exp_se3(&-d) * tk), &tt))
                / (2.0 * h);
            let fd_t = (measurement_error(&z, &r, &tk, &(exp_se3(&d) * tt))
                - measurement_error(&z, &r, &tk, &(exp_se3(&-d) * tt)))
                / (2.0 * h);
            worst = worst
                .max(rel_err(&dvec(&fd_k), &dvec(&jk.column(i).into_owned())))
                .max(rel_err(&dvec(&fd_t), &dvec(&jt.column(i).into_owned())));
        }
        Ok(worst)
    })
}

fn compose_suite() -> Result<SuiteResult> {
    run("covariance_composition", 4, |rng| {
        let c = Vector6::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let g = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let analytic = compose_winv_backward(&c, &g);
        let h = 1e-6;
        let fd = Vector6::from_fn(|k, _| {
            let (mut p, mut m) = (c, c);
            p[k] += h;
            m[k] -= h;
            (compose_winv(&p) - compose_winv(&m)).component_mul(&g).sum() / (2.0 * h)
        });
        Ok(rel_err(&dvec(&fd), &dvec(&analytic)))
    })
}

fn matching_suite() -> Result<SuiteResult> {
    run("descriptor_matching", 5, |rng| {
        let n = rng.random_range(2..12);
        let pts: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let feats: Vec<PointFeature> = (0..n).map(|_| PointFeature::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let reference = ReferenceFrame::new(pts, &feats, None);
        let t = rng.random_range(0.1..1.0);
        let cfg = MatchConfig { temperature: t, radius: None };
        let d = PointFeature::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
        let g = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let at = |d: &PointFeature| match_descriptor(d, &Vector3::zeros(), &reference, &cfg).map(|m| g.dot(&m.point));
        let rec = match_descriptor(&d, &Vector3::zeros(), &reference, &cfg).expect("unbounded search matches");
        let analytic = match_backward(&rec, &reference, t, &g);
        let h = 1e-6;
        let fd = PointFeature::from_fn(|k, _| {
            let (mut p, mut m) = (d, d);
            p[k] += h;
            m[k] -= h;
            (at(&p).unwrap_or(0.0) - at(&m).unwrap_or(0.0)) / (2.0 * h)
        });
        Ok(rel_err(&dvec(&fd), &dvec(&analytic)))
    })
}

fn heads_suite() -> Result<SuiteResult> {
    run("network_heads", 6, |rng| {
        let params = ModelParams::random(rng.random());
        let feats: Vec<PointFeature> =
            (0..5).map(|_| PointFeature::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let a: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<Vector6<f64>> = (0..5).map(|_| Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let objective = |p: &ModelParams| {
            let out = backbone_forward(p, &feats);
            (0..5).map(|i| a[i] * out.scores[i] + b[i].dot(&out.covparams[i])).sum::<f64>()
        };
        let out = backbone_forward(&params, &feats);
        let mut grad = ModelParams::zeros();
        let ds: Vec<(usize, f64)> = a.iter().copied().enumerate().collect();
        let dc: Vec<(usize, Vector6<f64>)> = b.iter().copied().enumerate().collect();
        heads_backward(&params, &feats, &out.record, &ds, &dc, &mut grad)?;
        let flat = params.to_flat();
        let g = grad.to_flat();
        let h = 1e-6;
        let k = rng.random_range(0..flat.len());
        let mut p = flat.clone();
        p[k] += h;
        let fp = objective(&ModelParams::from_flat(&p)?);
        p[k] -= 2.0 * h;
        let fm = objective(&ModelParams::from_flat(&p)?);
        let fd = DVector::from_element(1, (fp - fm) / (2.0 * h));
        Ok(rel_err(&fd, &DVector::from_element(1, g[k])))
    })
}

/// Whole M-step: loss of one synthetic window with the posterior, candidate
/// sets and gates held fixed, differentiated along random parameter axes.
fn mstep_suite() -> Result<SuiteResult> {
    let world = WorldSpec::urban_block();
    let sensor = SensorSpec::default();
    let est_cfg = EstimatorConfig::default();
    let start = circle_start(25.0, 1.8, 8.0);
    let gt = simulate_trajectory(&MotionPriorConfig { qc_diag: [0.0; 6] }, start, 0.3, 10.0, 0)?;
    let geoms = gt
        .iter()
        .enumerate()
        .map(|(i, k)| FrameGeometry::new(&raycast_scan(&world, &sensor, &k.pose, i as u64), &est_cfg.features))
        .collect::<Result<Vec<_>>>()?;
    let stamps: Vec<f64> = gt.iter().map(|k| k.stamp).collect();
    let train_cfg = TrainConfig::default();
    let params = ModelParams::random(5);
    let mb = forward_minibatch(&geoms, constant_velocity_knots(&stamps, start.velocity), &params, &est_cfg, &train_cfg)?;
    let g = mstep_gradient(&mb, &params)?.to_flat();
    let base = params.to_flat();
    run("mstep_gradient", 7, |rng| {
        let i = rng.random_range(0..base.len());
        // A stencil straddling a leaky-ReLU kink is biased; a second, smaller
        // step almost surely does not straddle the same kink.
        let mut best = f64::INFINITY;
        for h in [1e-5, 1e-6] {
            let mut p = base.clone();
            p[i] += h;
            let lp = fixed_structure_loss(&mb, &ModelParams::from_flat(&p)?, &est_cfg)?;
            p[i] -= 2.0 * h;
            let lm = fixed_structure_loss(&mb, &ModelParams::from_flat(&p)?, &est_cfg)?;
            let fd = DVector::from_element(1, (lp - lm) / (2.0 * h));
            best = best.min(rel_err(&fd, &DVector::from_element(1, g[i])));
        }
        Ok(best)
    })
}

/// Runs every suite in a fixed order.
pub fn run_all() -> Result<Vec<SuiteResult>> {
    Ok(vec![
        left_jacobian_suite()?,
        wnoa_suite()?,
        measurement_suite()?,
        compose_suite()?,
        matching_suite()?,
        heads_suite()?,
        mstep_suite()?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_suites_pass() {
        for s in [left_jacobian_suite(), wnoa_suite(), measurement_suite(), compose_suite(), matching_suite(), heads_suite()] {
            let s = s.unwrap();
            assert!(s.passed(), "{} worst {}", s.name, s.worst_relative_error);
        }
    }

    #[test]
    fn relative_error_uses_a_floor() {
        let a = DVector::from_element(1, 1e-12);
        let b = DVector::from_element(1, 0.0);
        assert!(rel_err(&a, &b) < 1e-5);
        let nan = DVector::from_element(1, f64::NAN);
        assert_eq!(rel_err(&nan, &b), f64::INFINITY);
    }
}
