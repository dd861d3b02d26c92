//! Softmax descriptor matching against a reference frame.

use nalgebra::Vector3;

use super::cloud::SpatialGrid;
use super::geometry::PointFeature;
use super::keypoints::softmax;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchConfig {
    pub temperature: f64,
    /// When set, only reference points within this distance of the
    /// predicted keypoint location compete in the softmax.
    pub radius: Option<f64>,
}

/// Reference points with unit descriptors and a lookup grid.
#[derive(Clone, Debug)]
pub struct ReferenceFrame {
    pub points: Vec<Vector3<f64>>,
    pub descriptors: Vec<PointFeature>,
    /// Unit surface normals taken from the features.
    pub normals: Vec<Vector3<f64>>,
    grid: Option<(SpatialGrid, f64)>,
}

/// Soft match restricted to a given candidate list.
pub fn match_with_candidates(
    descriptor: &PointFeature,
    candidates: Vec<usize>,
    reference: &ReferenceFrame,
    temperature: f64,
) -> Option<MatchRecord> {
    if candidates.is_empty() {
        return None;
    }
    let logits: Vec<f64> = candidates
        .iter()
        .map(|&i| descriptor.dot(&reference.descriptors[i]) / temperature)
        .collect();
    let weights = softmax(&logits);
    let point = candidates
        .iter()
        .zip(&weights)
        .map(|(&i, &b)| b * reference.points[i])
        .sum();
    Some(MatchRecord {
        point,
        candidates,
        weights,
    })
}

impl ReferenceFrame {
    /// Normalizes the given features into descriptors; `grid_cell` sizes the
    /// lookup grid for radius queries.
    pub fn new(points: Vec<Vector3<f64>>, feats: &[PointFeature], grid_cell: Option<f64>) -> Self {
        assert_eq!(points.len(), feats.len());
        let descriptors = feats
            .iter()
            .map(|f| {
                let n = f.norm();
                if n > 1e-12 {
                    f / n
                } else {
                    let mut e = PointFeature::zeros();
                    e[0] = 1.0;
                    e
                }
            })
            .collect();
        let normals = feats
            .iter()
            .map(|f| {
                let n = Vector3::new(f[3], f[4], f[5]);
                let len = n.norm();
                if len > 1e-12 {
                    n / len
                } else {
                    Vector3::z()
                }
            })
            .collect();
        let grid = grid_cell.map(|r| (SpatialGrid::new(&points, r), r));
        Self {
            points,
            descriptors,
            normals,
            grid,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn candidates(&self, predicted: &Vector3<f64>, radius: Option<f64>) -> Vec<usize> {
        match (radius, &self.grid) {
            (None, _) => (0..self.points.len()).collect(),
            (Some(r), Some((grid, cell))) if r <= *cell => grid.within(&self.points, predicted, r),
            (Some(r), _) => (0..self.points.len())
                .filter(|&i| (self.points[i] - predicted).norm_squared() <= r * r)
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MatchRecord {
    pub point: Vector3<f64>,
    pub candidates: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Soft match of one descriptor; `None` when no reference point is in range.
pub fn match_descriptor(
    descriptor: &PointFeature,
    predicted: &Vector3<f64>,
    reference: &ReferenceFrame,
    cfg: &MatchConfig,
) -> Option<MatchRecord> {
    let candidates = reference.candidates(predicted, cfg.radius);
    match_with_candidates(descriptor, candidates, reference, cfg.temperature)
}

/// Gradient with respect to the keypoint descriptor given `dL/dr`.
pub fn match_backward(
    record: &MatchRecord,
    reference: &ReferenceFrame,
    temperature: f64,
    d_point: &Vector3<f64>,
) -> PointFeature {
    let g: Vec<f64> = record
        .candidates
        .iter()
        .map(|&i| d_point.dot(&reference.points[i]))
        .collect();
    let mean: f64 = g.iter().zip(&record.weights).map(|(a, b)| a * b).sum();
    let mut out = PointFeature::zeros();
    for ((&i, &b), &gi) in record.candidates.iter().zip(&record.weights).zip(&g) {
        out += (b * (gi - mean) / temperature) * reference.descriptors[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(temperature: f64, radius: Option<f64>) -> MatchConfig {
        MatchConfig { temperature, radius }
    }

    fn unit(i: usize) -> PointFeature {
        let mut e = PointFeature::zeros();
        e[i] = 1.0;
        e
    }

    #[test]
    fn single_reference_point_is_the_match() {
        let reference = ReferenceFrame::new(vec![Vector3::new(1.0, 2.0, 3.0)], &[unit(4)], None);
        let m = match_descriptor(&unit(0), &Vector3::zeros(), &reference, &cfg(0.01, None)).unwrap();
        assert_eq!(m.point, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn saturated_softmax_picks_the_identical_descriptor() {
        let pts: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 1.0)).collect();
        let feats: Vec<_> = (0..5).map(unit).collect();
        let reference = ReferenceFrame::new(pts.clone(), &feats, None);
        let m = match_descriptor(&unit(2), &Vector3::zeros(), &reference, &cfg(0.01, None)).unwrap();
        assert!((m.point - pts[2]).norm() < 1e-6);
    }

    #[test]
    fn identical_descriptors_give_centroid() {
        let pts: Vec<_> = (0..4).map(|i| Vector3::new(i as f64, 1.0, -1.0)).collect();
        let reference = ReferenceFrame::new(pts, &[unit(1); 4], None);
        let m = match_descriptor(&unit(1), &Vector3::zeros(), &reference, &cfg(0.01, None)).unwrap();
        assert!((m.point - Vector3::new(1.5, 1.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn radius_limits_candidates() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(5.0, 0.0, 0.0)];
        let reference = ReferenceFrame::new(pts, &[unit(0), unit(0)], Some(1.0));
        let m = match_descriptor(&unit(0), &Vector3::new(4.5, 0.0, 0.0), &reference, &cfg(0.01, Some(1.0))).unwrap();
        assert_eq!(m.candidates, vec![1]);
        assert!(match_descriptor(&unit(0), &Vector3::new(2.5, 0.0, 0.0), &reference, &cfg(0.01, Some(1.0))).is_none());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let pts: Vec<_> = (0..6)
            .map(|i| Vector3::new((i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 * 0.1))
            .collect();
        let feats: Vec<_> = (0..6)
            .map(|i| PointFeature::from_fn(|r, _| ((r + 3 * i) as f64 * 0.37).sin()))
            .collect();
        let reference = ReferenceFrame::new(pts, &feats, None);
        let d = PointFeature::from_fn(|r, _| (r as f64 * 0.91).cos()).normalize();
        let t = 0.3;
        let g = Vector3::new(0.4, -1.0, 0.25);
        let rec = match_descriptor(&d, &Vector3::zeros(), &reference, &cfg(t, None)).unwrap();
        let analytic = match_backward(&rec, &reference, t, &g);
        for k in 0..d.len() {
            let mut dp = d;
            dp[k] += 1e-6;
            let mut dm = d;
            dm[k] -= 1e-6;
            let fp = g.dot(&match_descriptor(&dp, &Vector3::zeros(), &reference, &cfg(t, None)).unwrap().point);
            let fm = g.dot(&match_descriptor(&dm, &Vector3::zeros(), &reference, &cfg(t, None)).unwrap().point);
            let fd = (fp - fm) / 2e-6;
            assert!((fd - analytic[k]).abs() < 1e-7 * fd.abs().max(1.0), "{k}: {fd} vs {}", analytic[k]);
        }
    }
}
