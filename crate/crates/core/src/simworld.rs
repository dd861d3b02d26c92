//! Synthetic static scenes, WNOA trajectory sampling and lidar raycasting.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PointCloud;
use crate::liegroup::{exp_se3, Pose, Twist};
use crate::trajectory::{MotionPriorConfig, StateKnot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    /// Infinite plane through `point` with unit `normal`.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        reflectivity: f64,
    },
    /// Box rotated by `yaw` about the vertical axis.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        yaw: f64,
        reflectivity: f64,
    },
    /// Vertical capped cylinder.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
        reflectivity: f64,
    },
}

impl Primitive {
    pub fn reflectivity(&self) -> f64 {
        match self {
            Primitive::Plane { reflectivity, .. }
            | Primitive::Box { reflectivity, .. }
            | Primitive::Cylinder { reflectivity, .. } => *reflectivity,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match self {
            Primitive::Plane { point, normal, .. } => {
                finite(point) && finite(normal) && Vector3::from(*normal).norm() > 1e-9
            }
            Primitive::Box {
                center,
                half_extents,
                yaw,
                ..
            } => finite(center) && yaw.is_finite() && half_extents.iter().all(|h| *h > 0.0 && h.is_finite()),
            Primitive::Cylinder {
                center,
                radius,
                z_min,
                z_max,
                ..
            } => finite(center) && *radius > 0.0 && z_min.is_finite() && z_max > z_min && z_max.is_finite(),
        };
        let r = self.reflectivity();
        if !ok || !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("invalid primitive {self:?}")));
        }
        Ok(())
    }

    /// Smallest ray parameter `t > eps` at which `o + t d` hits the surface.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match self {
            Primitive::Plane { point, normal, .. } => {
                let n = Vector3::from(*normal);
                let den = n.dot(d);
                if den.abs() < 1e-12 {
                    return None;
                }
                let t = n.dot(&(Vector3::from(*point) - o)) / den;
                (t > EPS).then_some(t)
            }
            Primitive::Box {
                center,
                half_extents,
                yaw,
                ..
            } => {
                let r = yaw_matrix(*yaw).transpose();
                let ol = r * (o - Vector3::from(*center));
                let dl = r * d;
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for i in 0..3 {
                    let h = half_extents[i];
                    if dl[i].abs() < 1e-15 {
                        if ol[i].abs() > h {
                            return None;
                        }
                    } else {
                        let a = (-h - ol[i]) / dl[i];
                        let b = (h - ol[i]) / dl[i];
                        t0 = t0.max(a.min(b));
                        t1 = t1.min(a.max(b));
                    }
                }
                if t0 > t1 {
                    None
                } else if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Primitive::Cylinder {
                center,
                radius,
                z_min,
                z_max,
                ..
            } => {
                let c = Vector2::from(*center);
                let oc = Vector2::new(o.x, o.y) - c;
                let dd = Vector2::new(d.x, d.y);
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > EPS && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                let a = dd.norm_squared();
                if a > 1e-15 {
                    let b = oc.dot(&dd);
                    let cc = oc.norm_squared() - radius * radius;
                    let disc = b * b - a * cc;
                    if disc >= 0.0 {
                        let s = disc.sqrt();
                        for t in [(-b - s) / a, (-b + s) / a] {
                            let z = o.z + t * d.z;
                            if z >= *z_min && z <= *z_max {
                                consider(t);
                            }
                        }
                    }
                }
                if d.z.abs() > 1e-15 {
                    for zc in [*z_min, *z_max] {
                        let t = (zc - o.z) / d.z;
                        let p = oc + t * dd;
                        if p.norm_squared() <= radius * radius {
                            consider(t);
                        }
                    }
                }
                best
            }
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Plane { point, normal, .. } => {
                let n = Vector3::from(*normal).normalize();
                n.dot(&(p - Vector3::from(*point))).abs()
            }
            Primitive::Box {
                center,
                half_extents,
                yaw,
                ..
            } => {
                let q = yaw_matrix(*yaw).transpose() * (p - Vector3::from(*center));
                let h = Vector3::from(*half_extents);
                let outside = Vector3::from_fn(|i, _| (q[i].abs() - h[i]).max(0.0));
                if outside.norm() > 0.0 {
                    outside.norm()
                } else {
                    (0..3).map(|i| h[i] - q[i].abs()).fold(f64::INFINITY, f64::min)
                }
            }
            Primitive::Cylinder {
                center,
                radius,
                z_min,
                z_max,
                ..
            } => {
                let radial = (Vector2::new(p.x, p.y) - Vector2::from(*center)).norm() - radius;
                let vertical = (z_min - p.z).max(p.z - z_max);
                if radial <= 0.0 && vertical <= 0.0 {
                    (-radial).min(-vertical)
                } else {
                    Vector2::new(radial.max(0.0), vertical.max(0.0)).norm()
                }
            }
        }
    }

    /// Distance from `p` to the nearest edge of a box, infinite for other shapes.
    pub fn edge_distance(&self, p: &Vector3<f64>) -> f64 {
        let Primitive::Box {
            center,
            half_extents,
            yaw,
            ..
        } = self
        else {
            return f64::INFINITY;
        };
        let q = yaw_matrix(*yaw).transpose() * (p - Vector3::from(*center));
        let mut best = f64::INFINITY;
        // An edge is where two coordinates sit at their bounds.
        for free in 0..3 {
            let (a, b) = ((free + 1) % 3, (free + 2) % 3);
            let along = (q[free].abs() - half_extents[free]).max(0.0);
            let da = (q[a].abs() - half_extents[a]).abs();
            let db = (q[b].abs() - half_extents[b]).abs();
            best = best.min((da * da + db * db + along * along).sqrt());
        }
        best
    }
}

fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub primitives: Vec<Primitive>,
    /// Half-width of the square region of interest (m).
    pub bounds: f64,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Config("world needs at least one primitive".into()));
        }
        if !(self.bounds > 0.0 && self.bounds.is_finite()) {
            return Err(Error::Config("world bounds must be positive".into()));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    /// Ground plane, a 30 m square building given as four facades, six poles
    /// and two boxes, arranged around a 25 m radius driving circle.
    pub fn urban_block() -> Self {
        let mut primitives = vec![Primitive::Plane {
            point: [0.0, 0.0, 0.0],
            normal: [0.0, 0.0, 1.0],
            reflectivity: 0.2,
        }];
        // Facades sit obliquely to the driving loop (radius ~25 m), alternating
        // inside and outside it, so motion along the road stays observable.
        let (half_len, thick, height) = (10.0, 0.3, 10.0);
        for i in 0..8 {
            let a = 0.3 + i as f64 * std::f64::consts::TAU / 8.0;
            let (r, skew) = if i % 2 == 0 { (14.0, 0.6) } else { (40.0, -0.5) };
            primitives.push(Primitive::Box {
                center: [r * a.cos(), r * a.sin(), height / 2.0],
                half_extents: [thick, half_len, height / 2.0],
                yaw: a + skew,
                reflectivity: 0.6,
            });
        }
        for i in 0..12 {
            let a = 0.35 + i as f64 * std::f64::consts::TAU / 12.0;
            let r = if i % 2 == 0 { 30.0 } else { 32.0 };
            primitives.push(Primitive::Cylinder {
                center: [r * a.cos(), r * a.sin()],
                radius: 0.2,
                z_min: 0.0,
                z_max: 6.0,
                reflectivity: 0.9,
            });
        }
        for (a, yaw) in [(1.9_f64, 0.4), (4.3_f64, -0.3)] {
            primitives.push(Primitive::Box {
                center: [33.0 * a.cos(), 33.0 * a.sin(), 1.0],
                half_extents: [2.0, 1.0, 1.0],
                yaw,
                reflectivity: 0.4,
            });
        }
        Self {
            primitives,
            bounds: 60.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSpec {
    pub channels: usize,
    /// Lowest and highest beam elevation (degrees).
    pub vertical_fov_deg: [f64; 2],
    pub horizontal_resolution_deg: f64,
    pub max_range: f64,
    pub range_noise: f64,
    pub dropout: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            channels: 32,
            vertical_fov_deg: [-25.0, 10.0],
            horizontal_resolution_deg: 0.5,
            max_range: 60.0,
            range_noise: 0.0,
            dropout: 0.0,
        }
    }
}

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.vertical_fov_deg;
        if self.channels == 0
            || !(self.range_noise >= 0.0)
            || !(0.0..1.0).contains(&self.dropout)
            || !(self.horizontal_resolution_deg > 0.0)
            || !(self.max_range > 0.0)
            || !(lo.is_finite() && hi.is_finite() && hi >= lo)
        {
            return Err(Error::Config(format!("invalid sensor spec {self:?}")));
        }
        Ok(())
    }

    fn elevations(&self) -> Vec<f64> {
        let [lo, hi] = self.vertical_fov_deg;
        if self.channels == 1 {
            return vec![lo.to_radians()];
        }
        (0..self.channels)
            .map(|i| (lo + (hi - lo) * i as f64 / (self.channels - 1) as f64).to_radians())
            .collect()
    }
}

/// Samples the WNOA prior: velocity takes a Gaussian increment with covariance
/// `dt Qc` each step and the pose integrates `exp(dt v) T`.
pub fn simulate_trajectory(
    qc: &MotionPriorConfig,
    start: StateKnot,
    duration: f64,
    rate: f64,
    seed: u64,
) -> Result<Vec<StateKnot>> {
    if !(duration > 0.0 && rate > 0.0) {
        return Err(Error::Config("duration and rate must be positive".into()));
    }
    let dt = 1.0 / rate;
    let steps = (duration * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = Twist::from_iterator(qc.qc_diag.iter().map(|q| (q.max(0.0) * dt).sqrt()));
    let mut knots = Vec::with_capacity(steps + 1);
    knots.push(start);
    let mut cur = start;
    for k in 1..=steps {
        let pose = exp_se3(&(dt * cur.velocity)) * cur.pose;
        let noise = Twist::from_fn(|i, _| sd[i] * { let n: f64 = StandardNormal.sample(&mut rng); n });
        let pose = if k % 100 == 0 { pose.renormalized() } else { pose };
        cur = StateKnot::new(start.stamp + k as f64 * dt, pose, cur.velocity + noise);
        knots.push(cur);
    }
    Ok(knots)
}

/// Knot on a counter-clockwise horizontal circle about the origin, starting
/// at `(radius, 0, height)` and heading along `+y`, moving at `speed`.
pub fn circle_start(radius: f64, height: f64, speed: f64) -> StateKnot {
    let sensor_to_world = Pose::from_parts(
        yaw_matrix(std::f64::consts::FRAC_PI_2),
        Vector3::new(radius, 0.0, height),
    );
    let omega = speed / radius;
    StateKnot::new(
        0.0,
        sensor_to_world.inverse(),
        Twist::new(-speed, 0.0, 0.0, 0.0, 0.0, -omega),
    )
}

/// Returns the scan in the sensor frame and the index of the primitive hit by each point.
pub fn raycast_scan_labeled(
    world: &WorldSpec,
    sensor: &SensorSpec,
    pose: &Pose,
    seed: u64,
) -> (PointCloud, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let to_world = pose.inverse();
    let origin = to_world.translation();
    let rot = to_world.rotation();
    let n_az = (360.0 / sensor.horizontal_resolution_deg).round() as usize;
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    let mut labels = Vec::new();
    for el in sensor.elevations() {
        let (se, ce) = el.sin_cos();
        for a in 0..n_az {
            let az = (a as f64 * sensor.horizontal_resolution_deg).to_radians();
            let d_sensor = Vector3::new(ce * az.cos(), ce * az.sin(), se);
            let d_world = rot * d_sensor;
            let hit = world
                .primitives
                .iter()
                .enumerate()
                .filter_map(|(i, p)| p.intersect(&origin, &d_world).map(|t| (t, i)))
                .min_by(|x, y| x.0.total_cmp(&y.0));
            // Noise and dropout draws happen for every beam so the stream
            // does not depend on which beams return.
            let noise: f64 = StandardNormal.sample(&mut rng);
            let drop = rng.random::<f64>() < sensor.dropout;
            let Some((t, idx)) = hit else { continue };
            if t > sensor.max_range || drop {
                continue;
            }
            let range = (t + sensor.range_noise * noise).max(0.0);
            points.push(d_sensor * range);
            intensity.push(world.primitives[idx].reflectivity() / (1.0 + range / 50.0));
            labels.push(idx);
        }
    }
    (PointCloud::new(points, intensity, 0.0), labels)
}

pub fn raycast_scan(world: &WorldSpec, sensor: &SensorSpec, pose: &Pose, seed: u64) -> PointCloud {
    raycast_scan_labeled(world, sensor, pose, seed).0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfaceClass {
    Planar,
    PoleOrEdge,
}

/// Classifies a world-frame point by its nearest primitive; points farther
/// than `max_distance` from every surface are unclassified. Box points within
/// `edge_margin` of an edge count as edges.
pub fn classify_point(
    world: &WorldSpec,
    p: &Vector3<f64>,
    max_distance: f64,
    edge_margin: f64,
) -> Option<SurfaceClass> {
    let (dist, prim) = world
        .primitives
        .iter()
        .map(|q| (q.distance(p), q))
        .min_by(|a, b| a.0.total_cmp(&b.0))?;
    if dist > max_distance {
        return None;
    }
    // Points near a pole are poles even if the ground is marginally closer.
    let near_pole = world.primitives.iter().any(|q| {
        matches!(q, Primitive::Cylinder { .. }) && q.distance(p) <= max_distance
    });
    let near_edge = world
        .primitives
        .iter()
        .any(|q| q.distance(p) <= max_distance && q.edge_distance(p) < edge_margin);
    Some(match prim {
        Primitive::Cylinder { .. } => SurfaceClass::PoleOrEdge,
        _ if near_pole || near_edge => SurfaceClass::PoleOrEdge,
        _ => SurfaceClass::Planar,
    })
}
