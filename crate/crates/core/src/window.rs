//! One window of the estimator: keypoints of every frame are soft-matched to
//! the locked first frame, the window is solved, and matching is repeated
//! from the new estimate.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{FactorSet, MeasurementFactor, DEFAULT_BETA};
use crate::features::{
    match_descriptor, SpatialGrid, FeatureConfig, FrameFeatures, MatchConfig, MatchRecord, ReferenceFrame,
};
use crate::liegroup::{log_se3, Pose, Twist};
use crate::solver::{gauss_newton_solve, SolveOutcome, SolverOptions, WindowProblem};
use crate::trajectory::{MotionPriorConfig, StateKnot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Frames per window, the first one locked.
    pub window: usize,
    pub features: FeatureConfig,
    pub prior: MotionPriorConfig,
    pub solver: SolverOptions,
    /// Anisotropy gate for the E-step.
    pub beta: f64,
    /// Match/solve rounds at the final matching radius.
    pub match_iterations: usize,
    /// Velocity search for a window that starts without a velocity estimate.
    pub bootstrap: BootstrapConfig,
}

/// Grid over forward speed (sensor x) and yaw rate (sensor z), ranked by
/// point-to-plane alignment of constant-velocity extrapolations, then
/// refined by repeated halving of the grid around the best cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub max_speed: f64,
    pub speed_step: f64,
    pub max_yaw_rate: f64,
    pub yaw_rate_step: f64,
    pub refinements: usize,
    /// Nearest-neighbour search radius (m).
    pub radius: f64,
    /// Residual scale (m) at which a point's score saturates.
    pub scale: f64,
    /// Only every `stride`-th point is scored.
    pub stride: usize,
    /// Points farther from the sensor are not scored: distant ground rings
    /// are too sparse for a nearest-neighbour residual.
    pub max_range: f64,
    /// Re-run a local search around the previous velocity for every window,
    /// so that a bias of one solve is not carried into the next window.
    pub every_window: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            max_speed: 20.0,
            speed_step: 1.0,
            max_yaw_rate: 0.5,
            yaw_rate_step: 0.05,
            refinements: 4,
            radius: 1.0,
            scale: 0.3,
            stride: 8,
            max_range: 15.0,
            every_window: true,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.speed_step, self.yaw_rate_step, self.radius, self.scale, self.max_range];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || !(self.max_speed >= 0.0 && self.max_yaw_rate >= 0.0)
            || self.stride == 0
        {
            return Err(Error::Config("bootstrap search needs positive steps, radius, scale and stride".into()));
        }
        Ok(())
    }
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window: 4,
            features: FeatureConfig::default(),
            prior: MotionPriorConfig::default(),
            solver: SolverOptions::default(),
            beta: DEFAULT_BETA,
            match_iterations: 4,
            bootstrap: BootstrapConfig::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!("window must be at least 2, got {}", self.window)));
        }
        if !(self.beta >= 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if self.match_iterations == 0 {
            return Err(Error::Config("match_iterations must be at least 1".into()));
        }
        self.bootstrap.validate()?;
        if self.solver.max_iterations == 0 || !(self.solver.tolerance > 0.0) {
            return Err(Error::Config("solver needs positive iterations and tolerance".into()));
        }
        self.features.validate()?;
        self.prior.validate()
    }

    /// Grid cell for the reference lookup.
    pub fn grid_cell(&self) -> Option<f64> {
        self.features.match_radius
    }
}

#[derive(Clone, Debug)]
pub struct WindowEstimate {
    pub factors: FactorSet,
    /// One record per measurement, same order.
    pub matches: Vec<MatchRecord>,
    pub outcome: SolveOutcome,
    pub rounds: usize,
}

/// Soft-matches every keypoint of frames `1..` against the reference,
/// predicting its location from the current knots.
pub fn build_factors(
    frames: &[FrameFeatures],
    reference: &ReferenceFrame,
    knots: &[StateKnot],
    match_cfg: &MatchConfig,
    beta: f64,
) -> (FactorSet, Vec<MatchRecord>) {
    let t_tau = knots[0].pose;
    let mut measurements = Vec::new();
    let mut matches = Vec::new();
    for k in 1..frames.len() {
        let to_ref = t_tau * knots[k].pose.inverse();
        for (j, kp) in frames[k].keypoints.iter().enumerate() {
            let predicted = to_ref.transform_point(&kp.coords);
            if let Some(m) = match_descriptor(&kp.descriptor, &predicted, reference, match_cfg) {
                measurements.push(MeasurementFactor {
                    frame: k,
                    keypoint: j,
                    z: kp.coords,
                    r: m.point,
                    covparams: kp.covparams,
                    winv: kp.winv,
                });
                matches.push(m);
            }
        }
    }
    (FactorSet::new(measurements, beta), matches)
}

fn max_pose_change(a: &[StateKnot], b: &[StateKnot]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d: Twist = log_se3(&(x.pose * y.pose.inverse()))?;
        worst = worst.max(d.amax());
    }
    Ok(worst)
}

/// Alternates matching and solving until the estimate stops moving.
pub fn estimate_window(
    frames: &[FrameFeatures],
    reference: &ReferenceFrame,
    init: Vec<StateKnot>,
    cfg: &EstimatorConfig,
) -> Result<WindowEstimate> {
    if frames.len() != init.len() || frames.len() < 2 {
        return Err(Error::Config("window frames and knots disagree".into()));
    }
    let match_cfg = cfg.features.match_config();
    let mut knots = init;
    let mut last = None;
    for round in 0..cfg.match_iterations {
        let (factors, matches) = build_factors(frames, reference, &knots, &match_cfg, cfg.beta);
        let kept = factors.estep_measurements();
        let problem = WindowProblem {
            knots: knots.clone(),
            prior: cfg.prior,
            measurements: &kept,
        };
        let outcome = gauss_newton_solve(&problem, &cfg.solver)?;
        let change = max_pose_change(&outcome.posterior.knots, &knots)?;
        knots = outcome.posterior.knots.clone();
        last = Some(WindowEstimate {
            factors,
            matches,
            outcome,
            rounds: round + 1,
        });
        if change < cfg.solver.tolerance {
            break;
        }
    }
    Ok(last.expect("at least one round"))
}

/// Initial knots for a window whose first frame has pose `T_0` and velocity `v`.
pub fn extrapolated_knots(first: StateKnot, stamps: &[f64]) -> Vec<StateKnot> {
    stamps.iter().map(|&t| first.extrapolate(t)).collect()
}

/// Mean truncated point-to-plane residual of the points of frames `1..`
/// against their nearest reference point; points with no reference point in
/// range count as saturated. Unlike the matching cost this does not reward
/// scan patterns that line up with themselves.
fn alignment_score(
    clouds: &[&[Vector3<f64>]],
    reference: &ReferenceFrame,
    grid: &SpatialGrid,
    knots: &[StateKnot],
    cfg: &BootstrapConfig,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    let r2 = cfg.max_range * cfg.max_range;
    for k in 1..clouds.len() {
        let to_ref = knots[0].pose * knots[k].pose.inverse();
        for q in clouds[k].iter().filter(|q| q.norm_squared() <= r2).step_by(cfg.stride) {
            let p = to_ref.transform_point(q);
            let mut nearest = None;
            let mut best = f64::INFINITY;
            for i in grid.within(&reference.points, &p, cfg.radius) {
                let d = (reference.points[i] - p).norm_squared();
                if d < best {
                    best = d;
                    nearest = Some(i);
                }
            }
            total += match nearest {
                Some(i) => {
                    let d = reference.normals[i].dot(&(p - reference.points[i])) / cfg.scale;
                    (d * d).min(1.0)
                }
                None => 1.0,
            };
            count += 1;
        }
    }
    if count == 0 {
        1.0
    } else {
        total / count as f64
    }
}

fn planar_twist(speed: f64, yaw_rate: f64) -> Twist {
    Twist::new(speed, 0.0, 0.0, 0.0, 0.0, yaw_rate)
}

/// Constant-velocity knots starting at the identity.
pub fn constant_velocity_knots(stamps: &[f64], velocity: Twist) -> Vec<StateKnot> {
    extrapolated_knots(StateKnot::new(stamps[0], Pose::identity(), velocity), stamps)
}

/// Forward-speed / yaw-rate velocity whose constant-velocity extrapolation
/// best aligns the window's points with the reference. Without `around` the
/// whole configured grid is searched, otherwise only the cells next to it.
/// Depends on geometry only, not on the learned parameters.
pub fn bootstrap_velocity(
    clouds: &[&[Vector3<f64>]],
    reference: &ReferenceFrame,
    stamps: &[f64],
    cfg: &BootstrapConfig,
    around: Option<&Twist>,
) -> Twist {
    let grid = SpatialGrid::new(&reference.points, cfg.radius);
    let score = |v: f64, w: f64| {
        alignment_score(clouds, reference, &grid, &constant_velocity_knots(stamps, planar_twist(v, w)), cfg)
    };
    let steps = |max: f64, step: f64| (max / step).floor() as i64;
    let (center, nv, nw) = match around {
        Some(t) => ((t[0], t[5]), 1, 1),
        None => ((0.0, 0.0), steps(cfg.max_speed, cfg.speed_step), steps(cfg.max_yaw_rate, cfg.yaw_rate_step)),
    };
    let mut best = (f64::INFINITY, center.0, center.1);
    for i in -nv..=nv {
        for j in -nw..=nw {
            let v = center.0 + i as f64 * cfg.speed_step;
            let w = center.1 + j as f64 * cfg.yaw_rate_step;
            let s = score(v, w);
            if s < best.0 {
                best = (s, v, w);
            }
        }
    }
    let (mut dv, mut dw) = (cfg.speed_step, cfg.yaw_rate_step);
    for _ in 0..cfg.refinements {
        dv *= 0.5;
        dw *= 0.5;
        let (_, v0, w0) = best;
        for i in -1..=1 {
            for j in -1..=1 {
                if i == 0 && j == 0 {
                    continue;
                }
                let (v, w) = (v0 + i as f64 * dv, w0 + j as f64 * dw);
                let s = score(v, w);
                if s < best.0 {
                    best = (s, v, w);
                }
            }
        }
    }
    planar_twist(best.1, best.2)
}

/// Solves a window with no velocity estimate: the bootstrap search seeds a
/// constant-velocity guess, the window is solved, the locked velocity is
/// copied from the second knot and the window is solved again.
pub fn estimate_window_cold(
    frames: &[FrameFeatures],
    reference: &ReferenceFrame,
    stamps: &[f64],
    cfg: &EstimatorConfig,
) -> Result<WindowEstimate> {
    let clouds: Vec<&[Vector3<f64>]> = frames.iter().map(|f| f.cloud.points.as_slice()).collect();
    let v = bootstrap_velocity(&clouds, reference, stamps, &cfg.bootstrap, None);
    let est = estimate_window(frames, reference, constant_velocity_knots(stamps, v), cfg)?;
    let mut knots = est.outcome.posterior.knots.clone();
    knots[0].velocity = knots[1].velocity;
    estimate_window(frames, reference, knots, cfg)
}
