//! Generalized EM training: the E-step is the window solve, the M-step one
//! Adam step on the expected measurement cost with the posterior held fixed.

use std::time::Instant;

use nalgebra::{Matrix3, Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorKind, Result};
use crate::factors::{alpha_gate, MeasurementFactor, DEFAULT_ALPHA};
use crate::features::matching::match_with_candidates;
use crate::features::{
    backbone_backward, FrameFeatures, FrameGeometry, KeypointGrad, ModelParams, ReferenceFrame,
};
use crate::liegroup::{adjoint, Pose, Twist};
use crate::solver::{knot_sigma_poses, ExpectationMode};
use crate::trajectory::StateKnot;
use crate::window::{
    bootstrap_velocity, constant_velocity_knots, estimate_window, EstimatorConfig, WindowEstimate,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Training hyperparameters. The window length, anisotropy gate and match
/// temperature are shared with inference and live in [`EstimatorConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs always run before the convergence test may stop training.
    pub min_epochs: usize,
    /// Stop once the epoch-mean loss improves by less than this fraction.
    pub min_relative_improvement: f64,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    /// Squared-Mahalanobis gate of the M-step; `null` in JSON disables it.
    pub alpha: Option<f64>,
    /// Expectations over sigmapoints of each knot marginal instead of the mean.
    pub cubature: bool,
    /// Random rotation of every window about the vertical axis.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            min_epochs: 5,
            min_relative_improvement: 1e-4,
            learning_rate: 5e-4,
            adam: AdamConfig::default(),
            alpha: Some(DEFAULT_ALPHA),
            cubature: true,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        if let Some(alpha) = self.alpha {
            if !(alpha > 0.0) {
                return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
            }
        }
        if !(self.min_relative_improvement >= 0.0) {
            return Err(Error::Config("min_relative_improvement must be non-negative".into()));
        }
        Ok(())
    }

    pub fn alpha_value(&self) -> f64 {
        self.alpha.unwrap_or(f64::INFINITY)
    }

    pub fn mode(&self) -> ExpectationMode {
        if self.cubature {
            ExpectationMode::Cubature
        } else {
            ExpectationMode::MeanOnly
        }
    }
}

/// Forward pass of one window together with everything the M-step needs.
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub geoms: Vec<FrameGeometry>,
    pub frames: Vec<FrameFeatures>,
    pub reference: ReferenceFrame,
    pub estimate: WindowEstimate,
    /// Pose samples of every knot (empty for the locked one).
    pub sigma_poses: Vec<Vec<Pose>>,
    /// Per measurement: kept by the M-step gate.
    pub alpha_kept: Vec<bool>,
    /// Expected measurement cost summed over every factor.
    pub loss: f64,
    /// The same sum over the factors kept by the M-step gate; this is the
    /// quantity the parameter gradient differentiates.
    pub gated_loss: f64,
    /// `1/2 ln|Sigma^-1|` of the posterior, reported only.
    pub entropy: f64,
    pub temperature: f64,
}

impl Minibatch {
    pub fn alpha_kept_count(&self) -> usize {
        self.alpha_kept.iter().filter(|&&k| k).count()
    }

    pub fn beta_kept_count(&self) -> usize {
        self.estimate.factors.beta_kept.iter().filter(|&&k| k).count()
    }
}

/// Expected cost of one factor over the pose samples of its knot and the
/// gradients on `z`, `r` and `W`.
struct FactorTerms {
    cost: f64,
    d_z: Vector3<f64>,
    d_r: Vector3<f64>,
    d_w: Matrix3<f64>,
}

fn factor_terms(f: &MeasurementFactor, poses: &[Pose], t_tau: &Pose) -> FactorTerms {
    let n = poses.len() as f64;
    let mut out = FactorTerms {
        cost: -f.log_det_winv(),
        d_z: Vector3::zeros(),
        d_r: Vector3::zeros(),
        d_w: Matrix3::zeros(),
    };
    let tau_inv = t_tau.inverse();
    for p in poses {
        let a = p * &tau_inv;
        let e = f.z - a.transform_point(&f.r);
        let we = f.winv * e;
        out.cost += 0.5 * e.dot(&we) / n;
        out.d_z += we / n;
        out.d_r -= a.rotation().transpose() * we / n;
        out.d_w += 0.5 * e * e.transpose() / n;
    }
    out
}

fn reject_half_turns(e: Error) -> Error {
    match e {
        Error::AngleNearPi { angle } => {
            Error::WindowRejected(format!("relative rotation of {angle} rad is too close to a half turn"))
        }
        other => other,
    }
}

/// Features, factor construction, E-step and the expected measurement loss
/// of one window; `init` seeds the solve.
pub fn forward_minibatch(
    geoms: &[FrameGeometry],
    init: Vec<StateKnot>,
    params: &ModelParams,
    est_cfg: &EstimatorConfig,
    train_cfg: &TrainConfig,
) -> Result<Minibatch> {
    let frames: Vec<FrameFeatures> = geoms
        .iter()
        .map(|g| FrameFeatures::from_geometry(g, params, &est_cfg.features))
        .collect();
    let reference = geoms[0].reference(est_cfg.grid_cell());
    let estimate = estimate_window(&frames, &reference, init, est_cfg).map_err(reject_half_turns)?;
    let post = &estimate.outcome.posterior;
    let mut sigma_poses = vec![Vec::new(); frames.len()];
    for (k, poses) in sigma_poses.iter_mut().enumerate().skip(1) {
        *poses = knot_sigma_poses(post, k, train_cfg.mode()).map_err(reject_half_turns)?;
    }
    let t_tau = post.knots[0].pose;
    let alpha = train_cfg.alpha_value();
    let mut alpha_kept = Vec::with_capacity(estimate.factors.measurements.len());
    let (mut loss, mut gated_loss) = (0.0, 0.0);
    for f in &estimate.factors.measurements {
        let keep = alpha_gate(&f.error(&post.knots[f.frame].pose, &t_tau), &f.winv, alpha);
        let cost = factor_terms(f, &sigma_poses[f.frame], &t_tau).cost;
        loss += cost;
        if keep {
            gated_loss += cost;
        }
        alpha_kept.push(keep);
    }
    let entropy = post.half_log_det_info()?;
    Ok(Minibatch {
        geoms: geoms.to_vec(),
        frames,
        reference,
        estimate,
        sigma_poses,
        alpha_kept,
        loss,
        gated_loss,
        entropy,
        temperature: est_cfg.features.temperature,
    })
}

/// Gradient of the minibatch loss with respect to the parameters, with the
/// posterior, the candidate sets and the gates held fixed.
pub fn mstep_gradient(mb: &Minibatch, params: &ModelParams) -> Result<ModelParams> {
    let t_tau = mb.estimate.outcome.posterior.knots[0].pose;
    let mut per_frame: Vec<Vec<KeypointGrad>> = vec![Vec::new(); mb.frames.len()];
    let direct = Vector6::new(0.0, 0.0, 0.0, -1.0, -1.0, -1.0);
    for ((f, rec), &keep) in mb
        .estimate
        .factors
        .measurements
        .iter()
        .zip(&mb.estimate.matches)
        .zip(&mb.alpha_kept)
    {
        if !keep {
            continue;
        }
        let t = factor_terms(f, &mb.sigma_poses[f.frame], &t_tau);
        let mut g = KeypointGrad::zero(f.keypoint);
        g.coords = t.d_z;
        g.winv = t.d_w;
        g.covparams = direct;
        g.descriptor = crate::features::matching::match_backward(rec, &mb.reference, mb.temperature, &t.d_r);
        per_frame[f.frame].push(g);
    }
    let mut grad = ModelParams::zeros();
    for (frame, ups) in mb.frames.iter().zip(&per_frame) {
        if !ups.is_empty() {
            backbone_backward(params, frame, ups, &mut grad)?;
        }
    }
    Ok(grad)
}

/// The gated minibatch loss re-evaluated at other parameters with everything the
/// gradient treats as constant (posterior, sigmapoints, candidate sets,
/// gates) frozen; keypoint and voxel structure must not change.
pub fn fixed_structure_loss(mb: &Minibatch, params: &ModelParams, est_cfg: &EstimatorConfig) -> Result<f64> {
    let frames: Vec<FrameFeatures> = mb
        .geoms
        .iter()
        .map(|g| FrameFeatures::from_geometry(g, params, &est_cfg.features))
        .collect();
    let t_tau = mb.estimate.outcome.posterior.knots[0].pose;
    let mut loss = 0.0;
    for ((f, rec), &keep) in mb
        .estimate
        .factors
        .measurements
        .iter()
        .zip(&mb.estimate.matches)
        .zip(&mb.alpha_kept)
    {
        if !keep {
            continue;
        }
        let kp = frames[f.frame].keypoints.get(f.keypoint).ok_or_else(|| {
            Error::StaleRecords(format!("keypoint {} vanished under perturbation", f.keypoint))
        })?;
        let m = match_with_candidates(&kp.descriptor, rec.candidates.clone(), &mb.reference, mb.temperature)
            .ok_or_else(|| Error::StaleRecords("empty candidate set".into()))?;
        let g = MeasurementFactor {
            frame: f.frame,
            keypoint: f.keypoint,
            z: kp.coords,
            r: m.point,
            covparams: kp.covparams,
            winv: kp.winv,
        };
        loss += factor_terms(&g, &mb.sigma_poses[f.frame], &t_tau).cost;
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(
    params: &ModelParams,
    grad: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<ModelParams> {
    let mut x = params.to_flat();
    let g = grad.to_flat();
    if state.m.len() != x.len() || state.v.len() != x.len() {
        return Err(Error::Config(format!(
            "optimizer state holds {} entries for {} parameters",
            state.m.len(),
            x.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..x.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        x[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
    }
    ModelParams::from_flat(&x)
}

/// Frames of one training sequence.
#[derive(Clone, Debug)]
pub struct TrainSequence {
    pub geoms: Vec<FrameGeometry>,
    pub stamps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinibatchStats {
    pub epoch: usize,
    pub sequence: usize,
    pub start: usize,
    pub loss: f64,
    pub gated_loss: f64,
    pub entropy: f64,
    pub factors: usize,
    pub beta_kept: usize,
    pub alpha_kept: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean fraction of factors kept by the M-step gate.
    pub alpha_kept_fraction: f64,
    pub windows: usize,
    pub rejected: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub minibatches: Vec<MinibatchStats>,
    pub epochs: Vec<EpochStats>,
    pub converged: bool,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// One row per minibatch.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,sequence,start,loss,gated_loss,entropy,factors,beta_kept,alpha_kept,grad_norm\n",
        );
        for m in &self.minibatches {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                m.epoch, m.sequence, m.start, m.loss, m.gated_loss, m.entropy, m.factors, m.beta_kept, m.alpha_kept, m.grad_norm
            ));
        }
        s
    }
}

/// Velocity of the locked frame of every window, from the geometric
/// bootstrap search chained along the sequence. Parameter independent, so
/// computed once before training.
pub fn initial_velocities(seq: &TrainSequence, est_cfg: &EstimatorConfig) -> Vec<Twist> {
    let w = est_cfg.window;
    let mut out: Vec<Twist> = Vec::new();
    for start in 0..=seq.geoms.len().saturating_sub(w) {
        let g = &seq.geoms[start..start + w];
        let clouds: Vec<&[Vector3<f64>]> = g.iter().map(|f| f.cloud.points.as_slice()).collect();
        let reference = g[0].reference(None);
        let v = bootstrap_velocity(
            &clouds,
            &reference,
            &seq.stamps[start..start + w],
            &est_cfg.bootstrap,
            out.last(),
        );
        out.push(v);
    }
    out
}

/// Runs GEM from `params` over every window of every sequence and returns
/// the parameters (and optimizer state) of the epoch with the lowest mean
/// loss.
pub fn em_train(
    sequences: &[TrainSequence],
    params: ModelParams,
    est_cfg: &EstimatorConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &ModelParams),
) -> Result<(ModelParams, AdamState, TrainReport)> {
    est_cfg.validate()?;
    cfg.validate()?;
    let w = est_cfg.window;
    let mut windows: Vec<(usize, usize)> = Vec::new();
    for (s, seq) in sequences.iter().enumerate() {
        if seq.geoms.len() != seq.stamps.len() {
            return Err(Error::Config(format!("sequence {s} has mismatched stamps")));
        }
        if seq.geoms.len() >= w {
            windows.extend((0..=seq.geoms.len() - w).map(|i| (s, i)));
        }
    }
    if windows.is_empty() {
        return Err(Error::NoTrainableWindows(w));
    }
    let init: Vec<Vec<Twist>> = sequences.iter().map(|s| initial_velocities(s, est_cfg)).collect();

    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params;
    let mut adam = AdamState::new(ModelParams::N_PARAMS);
    let mut report = TrainReport::default();
    let mut prev: Option<f64> = None;
    let mut best: Option<(f64, ModelParams, AdamState)> = None;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order = windows.clone();
        order.shuffle(&mut rng);
        let (mut sum, mut kept, mut n, mut rejected) = (0.0, 0.0, 0usize, 0usize);
        for (s, start) in order {
            let seq = &sequences[s];
            let angle = if cfg.augment { rng.random_range(0.0..std::f64::consts::TAU) } else { 0.0 };
            let geoms: Vec<FrameGeometry> = seq.geoms[start..start + w]
                .iter()
                .map(|g| if angle != 0.0 { g.rotated_z(angle) } else { g.clone() })
                .collect();
            // rotating the sensor frame conjugates the body velocity
            let v = adjoint(&Pose::from_yaw(angle)) * init[s][start];
            let knots = constant_velocity_knots(&seq.stamps[start..start + w], v);
            let mb = match forward_minibatch(&geoms, knots, &params, est_cfg, cfg) {
                Ok(mb) => mb,
                Err(e) if e.kind() == ErrorKind::Numerical => {
                    rejected += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let grad = mstep_gradient(&mb, &params)?;
            params = adam_update(&params, &grad, &mut adam, cfg.learning_rate, &cfg.adam)?;
            if !params.is_finite() {
                return Err(Error::WindowRejected("parameters became non-finite".into()));
            }
            report.minibatches.push(MinibatchStats {
                epoch,
                sequence: s,
                start,
                loss: mb.loss,
                gated_loss: mb.gated_loss,
                entropy: mb.entropy,
                factors: mb.estimate.factors.measurements.len(),
                beta_kept: mb.beta_kept_count(),
                alpha_kept: mb.alpha_kept_count(),
                grad_norm: grad.norm(),
            });
            sum += mb.loss;
            kept += mb.alpha_kept_count() as f64 / mb.alpha_kept.len().max(1) as f64;
            n += 1;
        }
        if n == 0 {
            return Err(Error::NoTrainableWindows(w));
        }
        let stats = EpochStats {
            epoch,
            mean_loss: sum / n as f64,
            alpha_kept_fraction: kept / n as f64,
            windows: n,
            rejected,
            wall_time_s: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&stats, &params);
        let cur = stats.mean_loss;
        report.epochs.push(stats);
        if best.as_ref().is_none_or(|(b, _, _)| cur < *b) {
            best = Some((cur, params.clone(), adam.clone()));
        }
        if let Some(p) = prev {
            if epoch + 1 >= cfg.min_epochs && (p - cur) < cfg.min_relative_improvement * p.abs() {
                report.converged = true;
                break;
            }
        }
        prev = Some(cur);
    }
    report.wall_time_s = clock.elapsed().as_secs_f64();
    let (_, params, adam) = best.expect("at least one epoch");
    Ok((params, adam, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p = ModelParams::random(3);
        let mut st = AdamState::new(ModelParams::N_PARAMS);
        let z = ModelParams::zeros();
        let q = adam_update(&p, &z, &mut st, 1e-3, &AdamConfig::default()).unwrap();
        let q = adam_update(&q, &z, &mut st, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(p.to_flat(), q.to_flat());
    }

    #[test]
    fn first_adam_step_matches_closed_form() {
        let p = ModelParams::random(1);
        let g = ModelParams::random(2);
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(ModelParams::N_PARAMS);
        let q = adam_update(&p, &g, &mut st, 0.01, &cfg).unwrap();
        // m_hat = g and v_hat = g^2 after one step
        for ((a, b), gi) in p.to_flat().iter().zip(q.to_flat()).zip(g.to_flat()) {
            let expect = a - 0.01 * gi / (gi.abs() + cfg.epsilon);
            assert!((b - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.alpha = Some(0.0);
        assert!(c.validate().is_err());
        c.alpha = None;
        c.validate().unwrap();
        assert_eq!(c.alpha_value(), f64::INFINITY);
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn no_windows_is_an_error() {
        let seq = TrainSequence {
            geoms: Vec::new(),
            stamps: Vec::new(),
        };
        let r = em_train(&[seq], ModelParams::zeros(), &EstimatorConfig::default(), &TrainConfig::default(), |_, _| {});
        assert!(matches!(r, Err(Error::NoTrainableWindows(4))));
    }
}
