//! Voxel softmax keypoint aggregation and the LDU inverse-covariance map.

use nalgebra::{Matrix3, Vector3, Vector6};

use super::cloud::{voxel_groups, VoxelKey};
use super::geometry::PointFeature;

/// Unit-lower-triangular factor built from `(l1, l2, l3)`.
pub fn ldu_lower(c: &Vector6<f64>) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, c[0], 1.0, 0.0, c[1], c[2], 1.0)
}

/// `W = L diag(exp d) L^T`, SPD for every finite input.
pub fn compose_winv(c: &Vector6<f64>) -> Matrix3<f64> {
    let l = ldu_lower(c);
    let d = Matrix3::from_diagonal(&Vector3::new(c[3].exp(), c[4].exp(), c[5].exp()));
    l * d * l.transpose()
}

/// `ln|W|`; the unit-triangular factor contributes nothing.
pub fn log_det_winv(c: &Vector6<f64>) -> f64 {
    c[3] + c[4] + c[5]
}

/// Pulls a gradient with respect to the entries of `W` (treated as a full,
/// not necessarily symmetric, 3x3 array) back to the six LDU parameters.
pub fn compose_winv_backward(c: &Vector6<f64>, g: &Matrix3<f64>) -> Vector6<f64> {
    let gs = 0.5 * (g + g.transpose());
    let l = ldu_lower(c);
    let e = Vector3::new(c[3].exp(), c[4].exp(), c[5].exp());
    let gld = gs * l * Matrix3::from_diagonal(&e);
    let ltgl = l.transpose() * gs * l;
    Vector6::new(
        2.0 * gld[(1, 0)],
        2.0 * gld[(2, 0)],
        2.0 * gld[(2, 1)],
        ltgl[(0, 0)] * e[0],
        ltgl[(1, 1)] * e[1],
        ltgl[(2, 2)] * e[2],
    )
}

/// `lambda_min / lambda_max` of the covariance `W^-1`, in `[0, 1]`.
pub fn sphericity(winv: &Matrix3<f64>) -> f64 {
    let eig = winv.symmetric_eigen().eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if hi <= 0.0 {
        return 0.0;
    }
    // Eigenvalues of the covariance are reciprocals, so the ratio is the same.
    (lo / hi).clamp(0.0, 1.0)
}

pub fn beta_metric(c: &Vector6<f64>) -> f64 {
    let d = [c[3], c[4], c[5]];
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo - hi).exp()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / sum).collect()
}

#[derive(Clone, Debug)]
pub struct Keypoint {
    pub coords: Vector3<f64>,
    pub descriptor: PointFeature,
    /// Norm of the score-weighted feature sum before normalization.
    pub descriptor_norm: f64,
    pub covparams: Vector6<f64>,
    pub winv: Matrix3<f64>,
    pub source_voxel: VoxelKey,
    pub members: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn aggregate_keypoints(
    points: &[Vector3<f64>],
    feats: &[PointFeature],
    scores: &[f64],
    covparams: &[Vector6<f64>],
    dg: f64,
) -> Vec<Keypoint> {
    assert!(dg > 0.0, "keypoint voxel size must be positive");
    voxel_groups(points, dg)
        .into_iter()
        .map(|(key, members)| {
            let logits: Vec<f64> = members.iter().map(|&i| scores[i]).collect();
            let weights = softmax(&logits);
            let mut coords = Vector3::zeros();
            let mut raw = PointFeature::zeros();
            let mut cp = Vector6::zeros();
            for (&i, &a) in members.iter().zip(&weights) {
                coords += a * points[i];
                raw += a * feats[i];
                cp += a * covparams[i];
            }
            let norm = raw.norm();
            let descriptor = if norm > 1e-12 {
                raw / norm
            } else {
                let mut e = PointFeature::zeros();
                e[0] = 1.0;
                e
            };
            Keypoint {
                coords,
                descriptor,
                descriptor_norm: norm,
                covparams: cp,
                winv: compose_winv(&cp),
                source_voxel: key,
                members,
                weights,
            }
        })
        .collect()
}
