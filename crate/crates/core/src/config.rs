//! The single JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::PointCloud;
use crate::learning::TrainConfig;
use crate::simworld::{circle_start, raycast_scan, simulate_trajectory, SensorSpec, WorldSpec};
use crate::trajectory::{MotionPriorConfig, StateKnot};
use crate::window::EstimatorConfig;

/// A synthetic drive around a horizontal circle centred on the world origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub name: String,
    pub radius: f64,
    /// Sensor height above the ground (m).
    pub height: f64,
    pub speed: f64,
    pub frames: usize,
    /// Acceleration noise of the driven trajectory; zero gives a constant twist.
    pub motion_noise: MotionPriorConfig,
    pub seed: u64,
}

impl SequenceSpec {
    fn circle(name: &str, radius: f64, speed: f64, frames: usize, seed: u64) -> Self {
        Self {
            name: name.into(),
            radius,
            height: 1.8,
            speed,
            frames,
            motion_noise: MotionPriorConfig { qc_diag: [0.0; 6] },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("sequence name {:?} is not a plain directory name", self.name)));
        }
        if !(self.radius > 0.0 && self.speed > 0.0 && self.height.is_finite()) || self.frames < 2 {
            return Err(Error::Config(format!(
                "sequence {} needs positive radius and speed and at least 2 frames",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub rate_hz: f64,
    /// Sequences used for training.
    pub train: Vec<SequenceSpec>,
    /// Held-out sequences used for odometry and evaluation.
    pub test: Vec<SequenceSpec>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            rate_hz: 10.0,
            train: vec![SequenceSpec::circle("train00", 25.0, 8.0, 60, 1)],
            // About 200 m of path.
            test: vec![SequenceSpec::circle("test00", 24.0, 8.0, 251, 2)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Root of the sequence directories written by `simulate`.
    pub data_dir: PathBuf,
    /// Where `train`, `odometry` and `eval` put their outputs.
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds parameter initialization; training and scan noise have their own.
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub train: TrainConfig,
    pub world: WorldSpec,
    pub sensor: SensorSpec,
    pub simulation: SimulationConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            estimator: EstimatorConfig::default(),
            train: TrainConfig::default(),
            world: WorldSpec::urban_block(),
            sensor: SensorSpec {
                range_noise: 0.02,
                ..SensorSpec::default()
            },
            simulation: SimulationConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        self.train.validate()?;
        self.world.validate()?;
        self.sensor.validate()?;
        if !(self.simulation.rate_hz > 0.0 && self.simulation.rate_hz.is_finite()) {
            return Err(Error::Config("simulation.rate_hz must be positive".into()));
        }
        let all: Vec<&SequenceSpec> = self.simulation.train.iter().chain(&self.simulation.test).collect();
        for (i, s) in all.iter().enumerate() {
            s.validate()?;
            if all[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("duplicate sequence name {}", s.name)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config does not parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Ground-truth knots and sensor-frame scans of one synthetic sequence.
pub fn simulate_sequence(
    world: &WorldSpec,
    sensor: &SensorSpec,
    spec: &SequenceSpec,
    rate_hz: f64,
) -> Result<(Vec<StateKnot>, Vec<PointCloud>)> {
    spec.validate()?;
    let start = circle_start(spec.radius, spec.height, spec.speed);
    let duration = (spec.frames - 1) as f64 / rate_hz;
    let gt = simulate_trajectory(&spec.motion_noise, start, duration, rate_hz, spec.seed)?;
    let scans = gt
        .iter()
        .enumerate()
        .map(|(k, knot)| {
            let mut c = raycast_scan(world, sensor, &knot.pose, spec.seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
            c.stamp = knot.stamp;
            c
        })
        .collect();
    Ok((gt, scans))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn missing_sections_take_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn unknown_and_invalid_fields_are_config_errors() {
        for text in [r#"{"sed": 1}"#, r#"{"estimator": {"window": 1}}"#, "not json"] {
            let err = RunConfig::from_json(text).unwrap_err();
            assert_eq!(err.kind(), crate::ErrorKind::Config, "{text}");
        }
    }

    #[test]
    fn default_test_sequence_is_about_two_hundred_metres() {
        let s = &SimulationConfig::default().test[0];
        let length = s.speed * (s.frames - 1) as f64 / SimulationConfig::default().rate_hz;
        assert!((length - 200.0).abs() < 1e-9);
    }
}
