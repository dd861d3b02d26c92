//! Text checkpoint of the learned parameters and optimizer state.
//!
//! One `key value...` record per line, in this order:
//!
//! ```text
//! emlo-checkpoint 1
//! config_sha256 <64 hex digits>
//! params <n> <v_1> ... <v_n>
//! adam_t <t>
//! adam_m <n> <m_1> ... <m_n>
//! adam_v <n> <v_1> ... <v_n>
//! ```
//!
//! Numbers use the shortest representation that parses back to the same
//! `f64`, so a write/read cycle is exact. Parameters follow
//! [`ModelParams::to_flat`] ordering.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::ModelParams;
use crate::io::{read_to_string, write_text};
use crate::learning::AdamState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "emlo-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: ModelParams,
    pub adam: AdamState,
}

fn vector_line(key: &str, values: &[f64]) -> String {
    let mut s = format!("{key} {}", values.len());
    for v in values {
        s.push_str(&format!(" {v:e}"));
    }
    s.push('\n');
    s
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC} {CHECKPOINT_VERSION}\nconfig_sha256 {}\n", self.config_hash);
        s.push_str(&vector_line("params", &self.params.to_flat()));
        s.push_str(&format!("adam_t {}\n", self.adam.t));
        s.push_str(&vector_line("adam_m", &self.adam.m));
        s.push_str(&vector_line("adam_v", &self.adam.v));
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::MalformedFile {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut record = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {key} record")))?;
            let mut fields = line.split_whitespace();
            if fields.next() != Some(key) {
                return Err(bad(format!("expected {key} record, found {line:.40}")));
            }
            Ok(fields.map(str::to_owned).collect())
        };
        let version = record(MAGIC)?;
        if version != [CHECKPOINT_VERSION.to_string()] {
            return Err(bad(format!("unsupported version {version:?}")));
        }
        let hash = record("config_sha256")?;
        if hash.len() != 1 || hash[0].len() != 64 || !hash[0].chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(bad("config hash is not 64 hex digits".into()));
        }
        let vector = |key: &str, fields: Vec<String>| -> Result<Vec<f64>> {
            let (n, vals) = fields.split_first().ok_or_else(|| bad(format!("{key}: empty record")))?;
            let n: usize = n.parse().map_err(|_| bad(format!("{key}: bad length")))?;
            let vals: Vec<f64> = vals
                .iter()
                .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<_>>()
                .ok_or_else(|| bad(format!("{key}: non-numeric or non-finite value")))?;
            if vals.len() != n || n != ModelParams::N_PARAMS {
                return Err(bad(format!("{key}: expected {} values", ModelParams::N_PARAMS)));
            }
            Ok(vals)
        };
        let params = vector("params", record("params")?)?;
        let t = record("adam_t")?;
        let t: u64 = match t.as_slice() {
            [v] => v.parse().map_err(|_| bad("adam_t: not an integer".into()))?,
            _ => return Err(bad("adam_t: expected one value".into())),
        };
        let m = vector("adam_m", record("adam_m")?)?;
        let v = vector("adam_v", record("adam_v")?)?;
        Ok(Self {
            config_hash: hash[0].clone(),
            params: ModelParams::from_flat(&params).map_err(|e| bad(e.to_string()))?,
            adam: AdamState { m, v, t },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_to_string(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let params = ModelParams::random(3);
        let n = ModelParams::N_PARAMS;
        Checkpoint {
            config_hash: "ab".repeat(32),
            params,
            adam: AdamState {
                m: (0..n).map(|i| (i as f64).sin() * 1e-7).collect(),
                v: (0..n).map(|i| (i as f64 * 0.1).exp() * 1e-12).collect(),
                t: 42,
            },
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_text(&c.to_text(), Path::new("c")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncated_or_altered_files_are_rejected() {
        let text = sample().to_text();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        let wrong_version = text.replacen("emlo-checkpoint 1", "emlo-checkpoint 9", 1);
        for bad in [cut, wrong_version, text.replacen("adam_t 42", "adam_t x", 1)] {
            assert!(matches!(
                Checkpoint::from_text(&bad, Path::new("c")),
                Err(Error::MalformedFile { .. })
            ));
        }
    }
}
