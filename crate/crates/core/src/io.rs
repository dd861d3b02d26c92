//! File formats.
//!
//! * Scan binary: consecutive little-endian `f32` quadruples `(x, y, z,
//!   intensity)`, 16 bytes per point, no header.
//! * Pose text: one line per frame, the 12 entries of the top three rows of
//!   the sensor-to-world transform `T_{0,k}` in row-major order, separated by
//!   single spaces.
//! * Times text: one stamp in seconds per line.
//! * Covariance CSV: header, then `index,stamp,c00,...,c55` per relative pose
//!   (row-major 6x6, translation first).
//! * Diagnostics CSV: `frame,x,y,z,score,sphericity` per subsampled point.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Matrix6, Vector3};

use crate::error::{Error, Result};
use crate::features::PointCloud;
use crate::liegroup::Pose;
use crate::odometry::PointDiagnostic;

/// Frame rate assumed when a sequence has no times file.
pub const DEFAULT_RATE_HZ: f64 = 10.0;

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_velodyne(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(malformed(path, format!("length {} is not a multiple of 16 bytes", bytes.len())));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    for quad in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(quad[4 * i..4 * i + 4].try_into().unwrap()) as f64;
        let p = Vector3::new(f(0), f(1), f(2));
        if !p.iter().all(|v| v.is_finite()) {
            return Err(malformed(path, "non-finite coordinate"));
        }
        points.push(p);
        intensity.push(f(3));
    }
    Ok(PointCloud::new(points, intensity, 0.0))
}

pub fn encode_velodyne(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 * cloud.len());
    for (p, i) in cloud.points.iter().zip(&cloud.intensity) {
        for v in [p.x, p.y, p.z, *i] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Reads a scan binary. The returned cloud has stamp 0.
pub fn read_velodyne_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_velodyne(&bytes, path)
}

/// Coordinates and intensities are stored as `f32`.
pub fn write_velodyne_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_bytes(path, &encode_velodyne(cloud))
}

/// Reads sensor-to-world poses `T_{0,k}`, one per line.
pub fn read_kitti_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = read_text(path)?;
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| malformed(path, format!("line {}: {e}", n + 1)))?;
        if vals.len() != 12 || !vals.iter().all(|v| v.is_finite()) {
            return Err(malformed(path, format!("line {}: expected 12 finite numbers", n + 1)));
        }
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = vals[4 * r + c];
            }
        }
        let pose = Pose::from_matrix(m);
        if !pose.is_valid(1e-6) {
            return Err(malformed(path, format!("line {}: rotation block is not orthonormal", n + 1)));
        }
        poses.push(pose);
    }
    Ok(poses)
}

/// Values are written in shortest round-trip form, so reading back is exact.
pub fn write_kitti_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut s = String::new();
    for p in poses {
        let m = p.matrix();
        let row: Vec<String> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| format!("{:e}", m[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_times(path: &Path) -> Result<Vec<f64>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(path, format!("line {}: not a number", n + 1)))
        })
        .collect()
}

pub fn write_times(path: &Path, stamps: &[f64]) -> Result<()> {
    let s: String = stamps.iter().map(|t| format!("{t:e}\n")).collect();
    write_bytes(path, s.as_bytes())
}

pub fn write_covariances_csv(path: &Path, stamps: &[f64], covariances: &[Matrix6<f64>]) -> Result<()> {
    let mut s = String::from("index,stamp");
    for r in 0..6 {
        for c in 0..6 {
            s.push_str(&format!(",c{r}{c}"));
        }
    }
    s.push('\n');
    for (k, (t, q)) in stamps.iter().zip(covariances).enumerate() {
        s.push_str(&format!("{k},{t:e}"));
        for r in 0..6 {
            for c in 0..6 {
                s.push_str(&format!(",{:e}", q[(r, c)]));
            }
        }
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_covariances_csv(path: &Path) -> Result<(Vec<f64>, Vec<Matrix6<f64>>)> {
    let text = read_text(path)?;
    let mut stamps = Vec::new();
    let mut covs = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| malformed(path, format!("line {}: {e}", n + 1)))?;
        if vals.len() != 38 {
            return Err(malformed(path, format!("line {}: expected 38 columns", n + 1)));
        }
        stamps.push(vals[1]);
        covs.push(Matrix6::from_row_slice(&vals[2..]));
    }
    Ok((stamps, covs))
}

pub fn write_diagnostics_csv(path: &Path, diags: &[PointDiagnostic]) -> Result<()> {
    let mut s = String::from("frame,x,y,z,score,sphericity\n");
    for d in diags {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            d.frame, d.point.x, d.point.y, d.point.z, d.score, d.sphericity
        ));
    }
    write_bytes(path, s.as_bytes())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn read_to_string(path: &Path) -> Result<String> {
    read_text(path)
}

/// Layout of a sequence directory:
/// `velodyne/NNNNNN.bin` scans, optional `times.txt`, optional `poses.txt`
/// ground truth.
#[derive(Clone, Debug)]
pub struct SequenceDir {
    pub root: PathBuf,
}

impl SequenceDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn scan_dir(&self) -> PathBuf {
        self.root.join("velodyne")
    }

    pub fn scan_path(&self, index: usize) -> PathBuf {
        self.scan_dir().join(format!("{index:06}.bin"))
    }

    pub fn times_path(&self) -> PathBuf {
        self.root.join("times.txt")
    }

    pub fn poses_path(&self) -> PathBuf {
        self.root.join("poses.txt")
    }

    /// Scan files sorted by name.
    pub fn scans(&self) -> Result<Vec<PathBuf>> {
        let dir = self.scan_dir();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        files.sort();
        Ok(files)
    }

    /// Stamps from `times.txt`, or a fixed 10 Hz clock when it is absent.
    pub fn stamps(&self, frames: usize) -> Result<Vec<f64>> {
        let path = self.times_path();
        if !path.exists() {
            return Ok((0..frames).map(|k| k as f64 / DEFAULT_RATE_HZ).collect());
        }
        let stamps = read_times(&path)?;
        if stamps.len() != frames {
            return Err(malformed(&path, format!("{} stamps for {frames} scans", stamps.len())));
        }
        Ok(stamps)
    }

    /// Loads every scan with its stamp.
    pub fn load_scans(&self) -> Result<Vec<PointCloud>> {
        let files = self.scans()?;
        let stamps = self.stamps(files.len())?;
        files
            .iter()
            .zip(stamps)
            .map(|(f, t)| {
                let mut c = read_velodyne_bin(f)?;
                c.stamp = t;
                Ok(c)
            })
            .collect()
    }

    /// Ground truth as world-to-sensor poses `T_{k,0}`.
    pub fn ground_truth(&self) -> Result<Vec<Pose>> {
        Ok(read_kitti_poses(&self.poses_path())?.iter().map(Pose::inverse).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{exp_se3, Twist};

    #[test]
    fn hand_assembled_point() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = decode_velodyne(&bytes, Path::new("x")).unwrap();
        assert_eq!(c.points, vec![Vector3::new(1.0, 2.0, 3.0)]);
        assert_eq!(c.intensity, vec![0.5]);
        assert!(decode_velodyne(&[], Path::new("x")).unwrap().is_empty());
        assert!(matches!(
            decode_velodyne(&[0u8; 17], Path::new("x")),
            Err(Error::MalformedFile { .. })
        ));
    }

    #[test]
    fn encode_inverts_decode() {
        let bytes: Vec<u8> = (0..64u32).flat_map(|i| (i as f32 * 0.37 - 3.0).to_le_bytes()).collect();
        let c = decode_velodyne(&bytes, Path::new("x")).unwrap();
        assert_eq!(encode_velodyne(&c), bytes);
    }

    #[test]
    fn pose_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        let poses: Vec<Pose> = (0..5)
            .map(|k| exp_se3(&Twist::new(1.0 + k as f64, -0.3, 0.1, 0.05 * k as f64, -0.2, 1.1)))
            .collect();
        write_kitti_poses(&path, &poses).unwrap();
        let back = read_kitti_poses(&path).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert!((a.matrix() - b.matrix()).amax() < 1e-9);
        }
    }

    #[test]
    fn malformed_pose_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        std::fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
        assert!(matches!(read_kitti_poses(&path), Err(Error::MalformedFile { .. })));
    }

    #[test]
    fn missing_times_default_to_ten_hertz() {
        let dir = tempfile::tempdir().unwrap();
        let seq = SequenceDir::new(dir.path());
        assert_eq!(seq.stamps(3).unwrap(), vec![0.0, 0.1, 0.2]);
    }
}
