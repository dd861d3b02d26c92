//! Odometry metrics: KITTI-style segment drift, per-step relative pose error
//! and the average Mahalanobis consistency statistic.

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liegroup::{log_se3, Pose, Twist};

/// Segment lengths (m) of the drift metric.
pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
/// Arc length (m) between consecutive segment starts.
pub const SEGMENT_STRIDE: f64 = 10.0;

/// Frame-to-frame odometry: `relative[i] = T_{k,k-1}` for frame `k = i + 1`.
#[derive(Clone, Debug, Default)]
pub struct OdometryResult {
    /// Stamp of frame `k` for every entry.
    pub stamps: Vec<f64>,
    pub relative: Vec<Pose>,
    pub covariances: Vec<Matrix6<f64>>,
}

impl OdometryResult {
    pub fn len(&self) -> usize {
        self.relative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relative.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stamps.len() != self.relative.len() || self.covariances.len() != self.relative.len() {
            return Err(Error::Config("odometry result counts disagree".into()));
        }
        for q in &self.covariances {
            if q.cholesky().is_none() {
                return Err(Error::SingularInformation);
            }
        }
        Ok(())
    }

    /// Absolute poses `T_{k,0}`, starting at the identity.
    pub fn trajectory(&self) -> Vec<Pose> {
        trajectory_from_relative(&self.relative)
    }
}

/// Chains `T_{k,k-1}` into `T_{k,0}`; the output has one more entry.
pub fn trajectory_from_relative(relative: &[Pose]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(relative.len() + 1);
    let mut cur = Pose::identity();
    out.push(cur);
    for r in relative {
        cur = (*r * cur).renormalized();
        out.push(cur);
    }
    out
}

/// `T_{k,k-1}` from absolute `T_{k,0}`.
pub fn relative_from_trajectory(poses: &[Pose]) -> Vec<Pose> {
    poses.windows(2).map(|w| w[1] * w[0].inverse()).collect()
}

/// `ln(T_est T_gt^-1)`.
pub fn relative_pose_error(est: &Pose, gt: &Pose) -> Result<Twist> {
    log_se3(&(est * &gt.inverse()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthError {
    pub length: f64,
    pub segments: usize,
    pub translation_pct: f64,
    pub rotation_deg_per_100m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentErrors {
    pub per_length: Vec<LengthError>,
    pub translation_pct: f64,
    pub rotation_deg_per_100m: f64,
}

impl SegmentErrors {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("length_m,segments,translation_pct,rotation_deg_per_100m\n");
        for l in &self.per_length {
            s.push_str(&format!(
                "{},{},{},{}\n",
                l.length, l.segments, l.translation_pct, l.rotation_deg_per_100m
            ));
        }
        s
    }
}

/// Cumulative arc length of the sensor positions of `T_{k,0}` poses.
pub fn path_lengths(poses: &[Pose]) -> Vec<f64> {
    let mut out = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    let mut prev: Option<nalgebra::Vector3<f64>> = None;
    for p in poses {
        let c = p.inverse().translation();
        if let Some(q) = prev {
            acc += (c - q).norm();
        }
        out.push(acc);
        prev = Some(c);
    }
    out
}

/// Average relative translation (%) and rotation (deg/100 m) error over all
/// segments of 100..800 m, with segment starts every 10 m of groundtruth
/// path. Both trajectories hold `T_{k,0}`.
pub fn kitti_segment_errors(est: &[Pose], gt: &[Pose]) -> Result<SegmentErrors> {
    if est.len() != gt.len() {
        return Err(Error::Config(format!(
            "trajectory lengths differ: {} estimated, {} groundtruth",
            est.len(),
            gt.len()
        )));
    }
    let dist = path_lengths(gt);
    let total = dist.last().copied().unwrap_or(0.0);
    if total < SEGMENT_LENGTHS[0] {
        return Err(Error::TrajectoryTooShort {
            length: total,
            required: SEGMENT_LENGTHS[0],
        });
    }
    // sensor-to-world poses
    let gw: Vec<Pose> = gt.iter().map(Pose::inverse).collect();
    let ew: Vec<Pose> = est.iter().map(Pose::inverse).collect();

    let mut starts = Vec::new();
    let mut next = 0.0;
    for (i, &d) in dist.iter().enumerate() {
        if d >= next {
            starts.push(i);
            next = d + SEGMENT_STRIDE;
        }
    }

    let mut per_length = Vec::new();
    for &len in &SEGMENT_LENGTHS {
        let (mut t_sum, mut r_sum, mut n) = (0.0, 0.0, 0usize);
        for &first in &starts {
            let Some(last) = (first..dist.len()).find(|&j| dist[j] > dist[first] + len) else {
                continue;
            };
            let d_gt = gw[first].inverse() * gw[last];
            let d_est = ew[first].inverse() * ew[last];
            let err = d_gt.inverse() * d_est;
            t_sum += err.translation().norm() / len;
            r_sum += err.rotation_angle() / len;
            n += 1;
        }
        if n > 0 {
            per_length.push(LengthError {
                length: len,
                segments: n,
                translation_pct: 100.0 * t_sum / n as f64,
                rotation_deg_per_100m: (r_sum / n as f64).to_degrees() * 100.0,
            });
        }
    }
    let m = per_length.len() as f64;
    Ok(SegmentErrors {
        translation_pct: per_length.iter().map(|l| l.translation_pct).sum::<f64>() / m,
        rotation_deg_per_100m: per_length.iter().map(|l| l.rotation_deg_per_100m).sum::<f64>() / m,
        per_length,
    })
}

/// `sqrt(sum_k xi_k^T Q_k^-1 xi_k / (6K))` with `xi_k` the relative pose error.
pub fn avg_mahalanobis(result: &OdometryResult, gt_relative: &[Pose]) -> Result<f64> {
    if gt_relative.len() != result.len() {
        return Err(Error::Config("groundtruth and odometry counts differ".into()));
    }
    if result.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for ((est, gt), q) in result.relative.iter().zip(gt_relative).zip(&result.covariances) {
        let xi = relative_pose_error(est, gt)?;
        let chol = q.cholesky().ok_or(Error::SingularInformation)?;
        acc += xi.dot(&chol.solve(&xi));
    }
    Ok((acc / (6.0 * result.len() as f64)).sqrt())
}

/// Scalar summary written next to the per-length CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frames: usize,
    pub path_length_m: f64,
    pub segments: Option<SegmentErrors>,
    /// Endpoint translation error over path length, in percent.
    pub final_drift_pct: f64,
    /// Mean norm of the translation part of `T_est T_gt^-1` per step.
    pub mean_translation_error_m: f64,
    /// Mean rotation angle of `T_est T_gt^-1` per step.
    pub mean_rotation_error_rad: f64,
    /// Missing when some step's error is a half turn.
    pub avg_mahalanobis: Option<f64>,
}

/// Everything `eval` reports; segment errors are skipped for paths under 100 m.
pub fn evaluate(result: &OdometryResult, gt: &[Pose]) -> Result<EvalSummary> {
    let est = result.trajectory();
    if est.len() != gt.len() {
        return Err(Error::Config(format!(
            "odometry covers {} frames but groundtruth has {}",
            est.len(),
            gt.len()
        )));
    }
    // groundtruth re-expressed relative to its first frame
    let g0 = gt[0].inverse();
    let gt: Vec<Pose> = gt.iter().map(|p| *p * g0).collect();
    let length = path_lengths(&gt).last().copied().unwrap_or(0.0);
    let segments = match kitti_segment_errors(&est, &gt) {
        Ok(s) => Some(s),
        Err(Error::TrajectoryTooShort { .. }) => None,
        Err(e) => return Err(e),
    };
    let gt_rel = relative_from_trajectory(&gt);
    let (mut te, mut re) = (0.0, 0.0);
    for (e, g) in result.relative.iter().zip(&gt_rel) {
        let d = e * &g.inverse();
        te += d.translation().norm();
        re += d.rotation_angle();
    }
    let k = result.len().max(1) as f64;
    let end_err = (est.last().unwrap().inverse().translation() - gt.last().unwrap().inverse().translation()).norm();
    Ok(EvalSummary {
        frames: est.len(),
        path_length_m: length,
        segments,
        final_drift_pct: if length > 0.0 { 100.0 * end_err / length } else { 0.0 },
        mean_translation_error_m: te / k,
        mean_rotation_error_rad: re / k,
        // undefined once a step is off by half a turn
        avg_mahalanobis: match avg_mahalanobis(result, &gt_rel) {
            Ok(v) if !result.is_empty() => Some(v),
            Ok(_) | Err(Error::AngleNearPi { .. }) => None,
            Err(e) => return Err(e),
        },
    })
}
