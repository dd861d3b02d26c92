//! Sliding-window inference over a sequence: the first window is
//! bootstrapped, every later window locks the previous window's second
//! knot, and the relative pose of the latest two frames is reported.

use nalgebra::{Matrix6, Vector3};

use crate::error::{Error, ErrorKind, Result};
use crate::eval::OdometryResult;
use crate::features::{sphericity, FrameFeatures, FrameGeometry, ModelParams};
use crate::liegroup::Twist;
use crate::solver::relative_pose_with_covariance;
use crate::trajectory::StateKnot;
use crate::window::{bootstrap_velocity, constant_velocity_knots, estimate_window, estimate_window_cold, EstimatorConfig, WindowEstimate};

/// Detector score and covariance sphericity of one subsampled point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointDiagnostic {
    pub frame: usize,
    pub point: Vector3<f64>,
    pub score: f64,
    /// Sphericity of the keypoint whose voxel holds the point.
    pub sphericity: f64,
}

#[derive(Clone, Debug)]
pub struct OdometryRun {
    pub result: OdometryResult,
    /// Velocity estimate of every frame, in that frame's sensor coordinates.
    pub velocities: Vec<Twist>,
    /// Windows whose solve failed numerically; their new frame was
    /// extrapolated at constant velocity with an inflated covariance.
    pub failed_windows: usize,
    pub windows: usize,
}

/// Covariance reported for a step that had to be extrapolated.
const FALLBACK_VARIANCE: f64 = 1.0;

fn diagnostics(frame: usize, f: &FrameFeatures) -> Vec<PointDiagnostic> {
    let mut sph = vec![f64::NAN; f.cloud.len()];
    for kp in &f.keypoints {
        let s = sphericity(&kp.winv);
        for &m in &kp.members {
            sph[m] = s;
        }
    }
    f.cloud
        .points
        .iter()
        .zip(&f.output.scores)
        .zip(sph)
        .map(|((p, &score), sphericity)| PointDiagnostic {
            frame,
            point: *p,
            score,
            sphericity,
        })
        .collect()
}

/// Knots of the window starting one frame later: poses re-expressed
/// relative to the new locked frame, the new last frame extrapolated.
fn slide(prev: &[StateKnot], next_stamp: f64) -> Vec<StateKnot> {
    let anchor = prev[1].pose.inverse();
    let mut knots: Vec<StateKnot> = prev[1..]
        .iter()
        .map(|k| StateKnot::new(k.stamp, k.pose * anchor, k.velocity))
        .collect();
    let last = *knots.last().unwrap();
    knots.push(last.extrapolate(next_stamp));
    knots
}

/// Runs the estimator over a whole sequence. `diagnostics` collects per-point
/// detector scores and sphericities of every frame when set.
pub fn run_odometry(
    geoms: &[FrameGeometry],
    stamps: &[f64],
    params: &ModelParams,
    cfg: &EstimatorConfig,
    mut diag: Option<&mut Vec<PointDiagnostic>>,
) -> Result<OdometryRun> {
    cfg.validate()?;
    let w = cfg.window;
    if geoms.len() != stamps.len() {
        return Err(Error::Config("one stamp per frame is required".into()));
    }
    if geoms.len() < w {
        return Err(Error::WindowRejected(format!(
            "sequence of {} frames is shorter than the window of {w}",
            geoms.len()
        )));
    }
    for s in stamps.windows(2) {
        if !(s[1] > s[0]) {
            return Err(Error::NonMonotonicStamps { prev: s[0], next: s[1] });
        }
    }
    let frames: Vec<FrameFeatures> = geoms
        .iter()
        .map(|g| FrameFeatures::from_geometry(g, params, &cfg.features))
        .collect();
    if let Some(d) = diag.as_deref_mut() {
        for (i, f) in frames.iter().enumerate() {
            d.extend(diagnostics(i, f));
        }
    }

    let mut out = OdometryResult::default();
    let mut velocities = vec![Twist::zeros(); frames.len()];
    let mut failed = 0;

    let reference = geoms[0].reference(cfg.grid_cell());
    let first: WindowEstimate = estimate_window_cold(&frames[..w], &reference, &stamps[..w], cfg)?;
    let mut knots = first.outcome.posterior.knots.clone();
    for k in 1..w {
        let (rel, q) = relative_pose_with_covariance(&first.outcome.posterior, k)?;
        out.stamps.push(stamps[k]);
        out.relative.push(rel);
        out.covariances.push(q);
    }
    for (k, knot) in knots.iter().enumerate() {
        velocities[k] = knot.velocity;
    }

    let mut windows = 1;
    for start in 1..=frames.len() - w {
        let end = start + w;
        let reference = geoms[start].reference(cfg.grid_cell());
        let mut init = slide(&knots, stamps[end - 1]);
        if cfg.bootstrap.every_window {
            let clouds: Vec<&[Vector3<f64>]> = frames[start..end].iter().map(|f| f.cloud.points.as_slice()).collect();
            let v = bootstrap_velocity(&clouds, &reference, &stamps[start..end], &cfg.bootstrap, Some(&init[w - 1].velocity));
            init = constant_velocity_knots(&stamps[start..end], v);
        }
        windows += 1;
        match estimate_window(&frames[start..end], &reference, init.clone(), cfg) {
            Ok(est) => {
                let (rel, q) = relative_pose_with_covariance(&est.outcome.posterior, w - 1)?;
                out.relative.push(rel);
                out.covariances.push(q);
                knots = est.outcome.posterior.knots;
            }
            Err(e) if e.kind() == ErrorKind::Numerical => {
                failed += 1;
                out.relative.push(init[w - 1].pose * init[w - 2].pose.inverse());
                out.covariances.push(Matrix6::identity() * FALLBACK_VARIANCE);
                knots = init;
            }
            Err(e) => return Err(e),
        }
        out.stamps.push(stamps[end - 1]);
        velocities[end - 1] = knots[w - 1].velocity;
    }
    Ok(OdometryRun {
        result: out,
        velocities,
        failed_windows: failed,
        windows,
    })
}
