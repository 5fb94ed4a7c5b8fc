//! Sampled trajectory output and its on-disk format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One sampled row of a trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub i_in: f64,
    pub i_out: f64,
    pub v_fb: f64,
    pub z_mean: f64,
    pub p_mean: f64,
    pub n_mean: f64,
}

/// Photocurrents, feedback drive and conditional moments on a uniform grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub i_in: Vec<f64>,
    pub i_out: Vec<f64>,
    pub v_fb: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub p_mean: Vec<f64>,
    pub n_mean: Vec<f64>,
}

pub const CSV_HEADER: &str = "t,I_in,I_out,V_fb,z_mean,p_mean,n_mean";

impl TrajectoryRecord {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            times: Vec::with_capacity(n),
            i_in: Vec::with_capacity(n),
            i_out: Vec::with_capacity(n),
            v_fb: Vec::with_capacity(n),
            z_mean: Vec::with_capacity(n),
            p_mean: Vec::with_capacity(n),
            n_mean: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, s: &Sample) {
        self.times.push(s.t);
        self.i_in.push(s.i_in);
        self.i_out.push(s.i_out);
        self.v_fb.push(s.v_fb);
        self.z_mean.push(s.z_mean);
        self.p_mean.push(s.p_mean);
        self.n_mean.push(s.n_mean);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// All columns have the same length and the time grid is uniform.
    pub fn is_consistent(&self) -> bool {
        let n = self.len();
        let same = [
            &self.i_in,
            &self.i_out,
            &self.v_fb,
            &self.z_mean,
            &self.p_mean,
            &self.n_mean,
        ]
        .iter()
        .all(|c| c.len() == n);
        if !same {
            return false;
        }
        if n < 3 {
            return true;
        }
        let dt = self.times[1] - self.times[0];
        self.times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.abs().max(1e-300) * n as f64)
    }

    /// Mean of `n_mean` over samples with `t >= t_from`.
    pub fn mean_occupation_after(&self, t_from: f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .times
            .iter()
            .zip(&self.n_mean)
            .filter(|(t, _)| **t >= t_from)
            .map(|(_, n)| *n)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.len() * 120 + 64);
        s.push_str(CSV_HEADER);
        s.push('\n');
        for k in 0..self.len() {
            let _ = writeln!(
                s,
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                self.times[k],
                self.i_in[k],
                self.i_out[k],
                self.v_fb[k],
                self.z_mean[k],
                self.p_mean[k],
                self.n_mean[k]
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            other => return Err(Error::Config(format!("unexpected CSV header {other:?}"))),
        }
        let mut rec = Self::default();
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("row {row}: {e}")))?;
            if v.len() != 7 {
                return Err(Error::Config(format!("row {row}: expected 7 columns, got {}", v.len())));
            }
            rec.push(&Sample {
                t: v[0],
                i_in: v[1],
                i_out: v[2],
                v_fb: v[3],
                z_mean: v[4],
                p_mean: v[5],
                n_mean: v[6],
            });
        }
        Ok(rec)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str, meta: &RunMetadata) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(meta)?)?;
        Ok(())
    }
}

/// Sidecar describing how a record was produced.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunMetadata {
    pub seed: u64,
    pub trajectory: u64,
    pub engine: String,
    pub params: serde_json::Value,
    pub crate_version: String,
    /// `git describe` of the working tree, when available.
    pub git: Option<String>,
}

impl RunMetadata {
    pub fn new(seed: u64, trajectory: u64, engine: &str, params: serde_json::Value) -> Self {
        Self {
            seed,
            trajectory,
            engine: engine.to_string(),
            params,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            git: git_describe(),
        }
    }
}

pub fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    let s = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (!s.is_empty()).then_some(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut r = TrajectoryRecord::default();
        for k in 0..4 {
            let x = k as f64;
            r.push(&Sample {
                t: 0.25 * x,
                i_in: x.sin(),
                i_out: -x,
                v_fb: 1e-300 * x,
                z_mean: 0.1 + x,
                p_mean: -0.3,
                n_mean: 2.0 + x / 3.0,
            });
        }
        assert!(r.is_consistent());
        let back = TrajectoryRecord::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        assert!(TrajectoryRecord::from_csv("a,b\n").is_err());
    }

    #[test]
    fn writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = TrajectoryRecord::default();
        r.push(&Sample::default());
        let meta = RunMetadata::new(5, 0, "gaussian", serde_json::json!({"eta": 0.07}));
        r.write(dir.path(), "traj", &meta).unwrap();
        let text = fs::read_to_string(dir.path().join("traj.json")).unwrap();
        let back: RunMetadata = serde_json::from_str(&text).unwrap();
        assert_eq!(back, meta);
        assert!(dir.path().join("traj.csv").exists());
    }
}
