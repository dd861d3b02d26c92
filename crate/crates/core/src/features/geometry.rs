//! Fixed per-point geometric descriptors that feed the learned heads.
//!
//! Layout of a [`PointFeature`]:
//!
//! | index | content |
//! |-------|---------|
//! | 0..3  | PCA eigenvalue ratios `lambda_i / sum(lambda)`, descending |
//! | 3..6  | surface normal (smallest-eigenvalue eigenvector), oriented toward the sensor |
//! | 6     | height above the sensor origin / `height_scale` |
//! | 7     | neighbor density `n / (n + density_scale)` |
//! | 8     | intensity |
//! | 9     | range / `range_scale` |

use nalgebra::{Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};

use super::cloud::{PointCloud, SpatialGrid};
use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 10;

pub type PointFeature = SVector<f64, FEATURE_DIM>;

/// Neighborhoods with fewer other points than this fall back to an isotropic feature.
pub const MIN_NEIGHBORS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureScales {
    pub height_scale: f64,
    pub density_scale: f64,
    pub range_scale: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        Self {
            height_scale: 5.0,
            density_scale: 10.0,
            range_scale: 100.0,
        }
    }
}

pub fn compute_point_features(
    cloud: &PointCloud,
    radius: f64,
    scales: &FeatureScales,
) -> Result<Vec<PointFeature>> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(radius > 0.0) {
        return Err(Error::Config(format!("feature radius must be positive, got {radius}")));
    }
    let grid = SpatialGrid::new(&cloud.points, radius);
    let feats = cloud
        .points
        .iter()
        .zip(&cloud.intensity)
        .map(|(p, &intensity)| {
            let nbrs = grid.within(&cloud.points, p, radius);
            let others = nbrs.len().saturating_sub(1);
            let (ratios, normal) = if others < MIN_NEIGHBORS {
                (Vector3::repeat(1.0 / 3.0), Vector3::zeros())
            } else {
                local_shape(&cloud.points, &nbrs, p)
            };
            let mut f = PointFeature::zeros();
            f.fixed_rows_mut::<3>(0).copy_from(&ratios);
            f.fixed_rows_mut::<3>(3).copy_from(&normal);
            f[6] = p.z / scales.height_scale;
            f[7] = others as f64 / (others as f64 + scales.density_scale);
            f[8] = intensity;
            f[9] = p.norm() / scales.range_scale;
            f
        })
        .collect();
    Ok(feats)
}

/// Eigenvalue ratios (descending) and sensor-facing normal of a neighborhood.
fn local_shape(
    points: &[nalgebra::Vector3<f64>],
    nbrs: &[usize],
    p: &Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    let n = nbrs.len() as f64;
    let mean = nbrs.iter().map(|&j| points[j]).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for &j in nbrs {
        let d = points[j] - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = Vector3::new(
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]].max(0.0),
        eig.eigenvalues[order[2]].max(0.0),
    );
    let sum = vals.sum();
    let ratios = if sum > 0.0 {
        vals / sum
    } else {
        Vector3::repeat(1.0 / 3.0)
    };
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[2]).into_owned();
    // The sensor sits at the origin of the cloud's frame.
    if normal.dot(&(-p)) < 0.0 {
        normal = -normal;
    }
    (ratios, normal)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_cloud_is_an_error() {
        let cloud = PointCloud::default();
        assert!(matches!(
            compute_point_features(&cloud, 0.6, &FeatureScales::default()),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn plane_has_vanishing_smallest_ratio() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push(Vector3::new(i as f64 * 0.2 + 3.0, j as f64 * 0.2 - 1.0, -1.5));
            }
        }
        let n = pts.len();
        let cloud = PointCloud::new(pts.clone(), vec![0.5; n], 0.0);
        let feats = compute_point_features(&cloud, 0.6, &FeatureScales::default()).unwrap();
        for (p, f) in pts.iter().zip(&feats) {
            let interior = p.x > 3.3 && p.x < 4.5 && p.y > -0.7 && p.y < 0.5;
            if interior {
                assert!(f[2] < 1e-6, "{}", f[2]);
                // normal is +z or -z; the sensor is above the plane so it points up.
                assert!((f[5] - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn isolated_point_gets_isotropic_fallback() {
        let cloud = PointCloud::new(
            vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(10.0, 0.0, 0.0)],
            vec![0.25, 0.5],
            0.0,
        );
        let s = FeatureScales::default();
        let feats = compute_point_features(&cloud, 0.6, &s).unwrap();
        let f = feats[0];
        for i in 0..3 {
            assert!((f[i] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(f.fixed_rows::<3>(3).into_owned(), Vector3::zeros());
        assert!((f[6] - 3.0 / s.height_scale).abs() < 1e-15);
        assert_eq!(f[7], 0.0);
        assert_eq!(f[8], 0.25);
        assert!((f[9] - 14f64.sqrt() / s.range_scale).abs() < 1e-15);
    }

    #[test]
    fn sphere_normals_are_radial() {
        // Fibonacci sphere: near-uniform sampling; analytic normal is the radial direction.
        let center = Vector3::new(6.0, -1.0, 0.5);
        let radius = 2.0;
        let n = 4000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                center + radius * Vector3::new(r * th.cos(), y, r * th.sin())
            })
            .collect();
        let cloud = PointCloud::new(pts.clone(), vec![0.5; n], 0.0);
        let feats = compute_point_features(&cloud, 0.5, &FeatureScales::default()).unwrap();
        let cos2 = 2f64.to_radians().cos();
        for (p, f) in pts.iter().zip(&feats) {
            let radial = (p - center).normalize();
            let normal = f.fixed_rows::<3>(3).into_owned();
            assert!(normal.dot(&radial).abs() >= cos2);
            assert!(normal.dot(&(-p)) >= 0.0, "normal must face the sensor");
        }
    }
}
