use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;

use crate::liegroup::Pose;

pub type VoxelKey = (i64, i64, i64);

pub fn voxel_key(p: &Vector3<f64>, size: f64) -> VoxelKey {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// Raw lidar returns, expressed in the sensor frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// One value per point, in `[0, 1]`.
    pub intensity: Vec<f64>,
    pub stamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, intensity: Vec<f64>, stamp: f64) -> Self {
        assert_eq!(points.len(), intensity.len(), "one intensity per point");
        Self {
            points,
            intensity,
            stamp,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            intensity: self.intensity.clone(),
            stamp: self.stamp,
        }
    }

    /// Replaces every occupied voxel of edge `size` with the centroid of its
    /// points (and their mean intensity). Output order follows voxel keys.
    pub fn voxel_subsample(&self, size: f64) -> PointCloud {
        let mut cells: BTreeMap<VoxelKey, (Vector3<f64>, f64, usize)> = BTreeMap::new();
        for (p, i) in self.points.iter().zip(&self.intensity) {
            let e = cells
                .entry(voxel_key(p, size))
                .or_insert((Vector3::zeros(), 0.0, 0));
            e.0 += p;
            e.1 += i;
            e.2 += 1;
        }
        let mut points = Vec::with_capacity(cells.len());
        let mut intensity = Vec::with_capacity(cells.len());
        for (sum, isum, n) in cells.into_values() {
            points.push(sum / n as f64);
            intensity.push(isum / n as f64);
        }
        PointCloud {
            points,
            intensity,
            stamp: self.stamp,
        }
    }
}

/// Uniform hash grid for fixed-radius neighbor queries.
#[derive(Clone, Debug)]
pub struct SpatialGrid {
    cell: f64,
    cells: HashMap<VoxelKey, Vec<usize>>,
}

impl SpatialGrid {
    pub fn new(points: &[Vector3<f64>], cell: f64) -> Self {
        let mut cells: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(voxel_key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    /// Indices of all points within `radius` (<= cell size) of `q`, ascending.
    pub fn within(&self, points: &[Vector3<f64>], q: &Vector3<f64>, radius: f64) -> Vec<usize> {
        debug_assert!(radius <= self.cell * (1.0 + 1e-12));
        if !q.iter().all(|v| v.is_finite()) {
            return Vec::new();
        }
        let (cx, cy, cz) = voxel_key(q, self.cell);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(idx) = self.cells.get(&(cx.saturating_add(dx), cy.saturating_add(dy), cz.saturating_add(dz))) {
                        out.extend(
                            idx.iter()
                                .copied()
                                .filter(|&j| (points[j] - q).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Points of a cloud grouped by voxel of edge `size`, in key order.
pub fn voxel_groups(points: &[Vector3<f64>], size: f64) -> Vec<(VoxelKey, Vec<usize>)> {
    let mut groups: BTreeMap<VoxelKey, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        groups.entry(voxel_key(p, size)).or_default().push(i);
    }
    groups.into_iter().collect()
}
