//! Point features, learned heads, keypoints and soft matching.

pub mod backbone;
pub mod backward;
pub mod cloud;
pub mod geometry;
pub mod keypoints;
pub mod matching;

pub use backbone::{backbone_forward, BackboneOutput, ModelParams};
pub use backward::{backbone_backward, KeypointGrad};
pub use cloud::{PointCloud, SpatialGrid};
pub use geometry::{compute_point_features, FeatureScales, PointFeature, FEATURE_DIM};
pub use keypoints::{aggregate_keypoints, beta_metric, compose_winv, sphericity, Keypoint};
pub use matching::{match_descriptor, MatchConfig, MatchRecord, ReferenceFrame};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Input subsampling voxel edge (m).
    pub dl0: f64,
    /// Neighborhood radius for the geometric features (m).
    pub feature_radius: f64,
    /// Keypoint voxel edge (m).
    pub dg: f64,
    pub temperature: f64,
    /// Candidate radius for matching; `None` matches against the whole reference.
    pub match_radius: Option<f64>,
    pub scales: FeatureScales,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            dl0: 0.3,
            feature_radius: 0.6,
            dg: 1.6,
            temperature: 0.01,
            match_radius: Some(1.0),
            scales: FeatureScales::default(),
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dl0", self.dl0),
            ("feature_radius", self.feature_radius),
            ("dg", self.dg),
            ("temperature", self.temperature),
            ("scales.height_scale", self.scales.height_scale),
            ("scales.density_scale", self.scales.density_scale),
            ("scales.range_scale", self.scales.range_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(r) = self.match_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("match_radius must be positive, got {r}")));
            }
        }
        Ok(())
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            temperature: self.temperature,
            radius: self.match_radius,
        }
    }
}

/// The parameter-independent part of a frame: subsampled cloud and its
/// geometric features.
#[derive(Clone, Debug)]
pub struct FrameGeometry {
    pub cloud: PointCloud,
    pub feats: Vec<PointFeature>,
}

impl FrameGeometry {
    pub fn new(raw: &PointCloud, cfg: &FeatureConfig) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let cloud = raw.voxel_subsample(cfg.dl0);
        let feats = compute_point_features(&cloud, cfg.feature_radius, &cfg.scales)?;
        Ok(Self { cloud, feats })
    }

    /// The same frame seen by a sensor yawed by `-angle`: points and normals
    /// rotate about the vertical axis, every other feature is invariant.
    pub fn rotated_z(&self, angle: f64) -> Self {
        let pose = crate::liegroup::Pose::from_yaw(angle);
        let rot = pose.rotation();
        let feats = self
            .feats
            .iter()
            .map(|f| {
                let mut g = *f;
                let n = rot * f.fixed_rows::<3>(3);
                g.fixed_rows_mut::<3>(3).copy_from(&n);
                g
            })
            .collect();
        Self {
            cloud: self.cloud.transformed(&pose),
            feats,
        }
    }

    /// This frame's points as a matching target; the lookup grid is sized for `grid_cell`.
    pub fn reference(&self, grid_cell: Option<f64>) -> ReferenceFrame {
        ReferenceFrame::new(self.cloud.points.clone(), &self.feats, grid_cell)
    }
}

/// Everything the forward pass produces for one frame.
#[derive(Clone, Debug)]
pub struct FrameFeatures {
    /// The subsampled cloud the features were computed on.
    pub cloud: PointCloud,
    pub feats: Vec<PointFeature>,
    pub output: BackboneOutput,
    pub keypoints: Vec<Keypoint>,
}

impl FrameFeatures {
    pub fn from_geometry(geom: &FrameGeometry, params: &ModelParams, cfg: &FeatureConfig) -> Self {
        let output = backbone_forward(params, &geom.feats);
        let keypoints = aggregate_keypoints(
            &geom.cloud.points,
            &geom.feats,
            &output.scores,
            &output.covparams,
            cfg.dg,
        );
        Self {
            cloud: geom.cloud.clone(),
            feats: geom.feats.clone(),
            output,
            keypoints,
        }
    }
}

pub fn frame_forward(raw: &PointCloud, params: &ModelParams, cfg: &FeatureConfig) -> Result<FrameFeatures> {
    Ok(FrameFeatures::from_geometry(&FrameGeometry::new(raw, cfg)?, params, cfg))
}
