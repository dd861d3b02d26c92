//! Reverse pass from keypoint-level gradients to the head parameters.

use nalgebra::{Matrix3, Vector3, Vector6};

use super::backbone::{heads_backward, ModelParams};
use super::geometry::PointFeature;
use super::keypoints::compose_winv_backward;
use super::FrameFeatures;
use crate::error::{Error, Result};

/// Upstream gradient on one keypoint's outputs.
#[derive(Clone, Debug)]
pub struct KeypointGrad {
    pub index: usize,
    pub coords: Vector3<f64>,
    /// Gradient on the entries of `W`.
    pub winv: Matrix3<f64>,
    /// Gradient applied directly to the LDU parameters.
    pub covparams: Vector6<f64>,
    /// Gradient on the unit descriptor.
    pub descriptor: PointFeature,
}

impl KeypointGrad {
    pub fn zero(index: usize) -> Self {
        Self {
            index,
            coords: Vector3::zeros(),
            winv: Matrix3::zeros(),
            covparams: Vector6::zeros(),
            descriptor: PointFeature::zeros(),
        }
    }
}

/// Accumulates `dL/dtheta` for one frame into `grad`.
pub fn backbone_backward(
    params: &ModelParams,
    frame: &FrameFeatures,
    upstream: &[KeypointGrad],
    grad: &mut ModelParams,
) -> Result<()> {
    let mut d_scores: Vec<(usize, f64)> = Vec::new();
    let mut d_cov: Vec<(usize, Vector6<f64>)> = Vec::new();
    for g in upstream {
        let kp = frame.keypoints.get(g.index).ok_or_else(|| {
            Error::StaleRecords(format!("keypoint {} has no aggregation record", g.index))
        })?;
        let gc = g.covparams + compose_winv_backward(&kp.covparams, &g.winv);
        let graw = if kp.descriptor_norm > 1e-12 {
            let d = &kp.descriptor;
            (g.descriptor - d * d.dot(&g.descriptor)) / kp.descriptor_norm
        } else {
            PointFeature::zeros()
        };
        let ga: Vec<f64> = kp
            .members
            .iter()
            .map(|&i| {
                g.coords.dot(&frame.cloud.points[i])
                    + graw.dot(&frame.feats[i])
                    + gc.dot(&frame.output.covparams[i])
            })
            .collect();
        let mean: f64 = ga.iter().zip(&kp.weights).map(|(a, b)| a * b).sum();
        for ((&i, &a), &gi) in kp.members.iter().zip(&kp.weights).zip(&ga) {
            d_scores.push((i, a * (gi - mean)));
            d_cov.push((i, a * gc));
        }
    }
    heads_backward(params, &frame.feats, &frame.output.record, &d_scores, &d_cov, grad)
}
