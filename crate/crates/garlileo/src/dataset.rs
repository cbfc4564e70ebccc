//! Dataset file I/O: JSONL sensor streams, dataset metadata, and TUM-format
//! trajectories.
//!
//! A dataset directory holds one JSON object per line per measurement:
//!
//! - `imu.jsonl`: `{"stamp", "gyro", "accel", "orient"}` (quaternion w,x,y,z)
//! - `radar.jsonl`: `{"stamp", "points": [{"p", "doppler", "intensity"?}]}`
//! - `leg.jsonl`: `{"stamp", "joints": [[r,p,k]; 4], "contact": [bool; 4]}`
//! - `gt.jsonl` (optional): `{"stamp", "p", "q"}` ground-truth poses
//! - `gt_gravity.jsonl` (optional): `{"stamp", "g"}` body-frame gravity
//! - `gt_bias.jsonl` (optional): `{"stamp", "b_a"}` accelerometer bias
//! - `meta.json`: rates, extrinsics, leg geometry, scenario description
//!
//! All frames use z along gravity, so `gt_gravity` norms are exactly 9.81.
//! Save/load round-trips losslessly; malformed lines and non-monotone stamps
//! are rejected with the offending file and line number.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::UnitQuaternion;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{Extrinsics, ImuSample};
use crate::leg::{LegModel, LegSample};
use crate::pipeline::{Trajectory, TrajectoryPoint};
use crate::radar::RadarScan;
use crate::sim::NoiseConfig;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {source}")]
    Malformed {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: stamps not strictly increasing ({prev} then {next})")]
    NonMonotone {
        path: PathBuf,
        line: usize,
        prev: f64,
        next: f64,
    },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
    #[error("{path}:{line}: malformed trajectory line (want 't x y z qx qy qz qw')")]
    MalformedTum { path: PathBuf, line: usize },
}

/// Sensor rates in Hz.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rates {
    pub imu: f64,
    pub radar: f64,
    pub leg: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self { imu: 100.0, radar: 20.0, leg: 150.0 }
    }
}

/// Dataset metadata: what produced it and the rigid platform description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub scenario: String,
    pub seed: u64,
    pub rates: Rates,
    pub extrinsics: Extrinsics,
    pub leg_model: LegModel,
    pub noise: NoiseConfig,
    /// Free-form description of the scenario path.
    #[serde(default)]
    pub description: String,
}

/// Ground-truth pose record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GtPose {
    pub stamp: f64,
    pub p: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`.
    pub q: [f64; 4],
}

/// Ground-truth body-frame gravity record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GravitySample {
    pub stamp: f64,
    pub g: [f64; 3],
}

/// Ground-truth accelerometer-bias record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BiasSample {
    pub stamp: f64,
    pub b_a: [f64; 3],
}

/// An in-memory dataset: time-sorted streams plus metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: Meta,
    pub imu: Vec<ImuSample>,
    pub radar: Vec<RadarScan>,
    pub leg: Vec<LegSample>,
    pub gt: Option<Vec<GtPose>>,
    pub gt_gravity: Option<Vec<GravitySample>>,
    pub gt_bias: Option<Vec<BiasSample>>,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("serializable record");
        writeln!(w, "{line}").map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
    stamp_of: impl Fn(&T) -> f64,
) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut prev: Option<f64> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|source| DatasetError::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            source,
        })?;
        let stamp = stamp_of(&item);
        if let Some(p) = prev {
            if stamp <= p {
                return Err(DatasetError::NonMonotone {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    prev: p,
                    next: stamp,
                });
            }
        }
        prev = Some(stamp);
        out.push(item);
    }
    Ok(out)
}

impl Dataset {
    /// Writes all streams and metadata into `dir` (created if missing).
    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let meta = serde_json::to_string_pretty(&self.meta).expect("serializable meta");
        fs::write(dir.join("meta.json"), meta + "\n").map_err(|source| DatasetError::Io {
            path: dir.join("meta.json"),
            source,
        })?;
        write_jsonl(&dir.join("imu.jsonl"), &self.imu)?;
        write_jsonl(&dir.join("radar.jsonl"), &self.radar)?;
        write_jsonl(&dir.join("leg.jsonl"), &self.leg)?;
        if let Some(gt) = &self.gt {
            write_jsonl(&dir.join("gt.jsonl"), gt)?;
        }
        if let Some(g) = &self.gt_gravity {
            write_jsonl(&dir.join("gt_gravity.jsonl"), g)?;
        }
        if let Some(b) = &self.gt_bias {
            write_jsonl(&dir.join("gt_bias.jsonl"), b)?;
        }
        Ok(())
    }

    /// Loads and validates a dataset directory.
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let meta_path = dir.join("meta.json");
        let meta_text = fs::read_to_string(&meta_path).map_err(|source| DatasetError::Io {
            path: meta_path.clone(),
            source,
        })?;
        let meta: Meta =
            serde_json::from_str(&meta_text).map_err(|source| DatasetError::Malformed {
                path: meta_path.clone(),
                line: 1,
                source,
            })?;
        meta.extrinsics.validate().map_err(|msg| DatasetError::Invalid {
            path: meta_path.clone(),
            msg,
        })?;
        meta.leg_model.validate().map_err(|msg| DatasetError::Invalid {
            path: meta_path.clone(),
            msg,
        })?;

        let imu = read_jsonl(&dir.join("imu.jsonl"), |s: &ImuSample| s.stamp)?;
        let radar = read_jsonl(&dir.join("radar.jsonl"), |s: &RadarScan| s.stamp)?;
        let leg = read_jsonl(&dir.join("leg.jsonl"), |s: &LegSample| s.stamp)?;
        let gt = if dir.join("gt.jsonl").exists() {
            Some(read_jsonl(&dir.join("gt.jsonl"), |s: &GtPose| s.stamp)?)
        } else {
            None
        };
        let gt_gravity = if dir.join("gt_gravity.jsonl").exists() {
            Some(read_jsonl(&dir.join("gt_gravity.jsonl"), |s: &GravitySample| s.stamp)?)
        } else {
            None
        };
        let gt_bias = if dir.join("gt_bias.jsonl").exists() {
            Some(read_jsonl(&dir.join("gt_bias.jsonl"), |s: &BiasSample| s.stamp)?)
        } else {
            None
        };
        Ok(Self { meta, imu, radar, leg, gt, gt_gravity, gt_bias })
    }

    /// Ground truth converted to a [`Trajectory`], if present.
    pub fn gt_trajectory(&self) -> Option<Trajectory> {
        let gt = self.gt.as_ref()?;
        Some(Trajectory {
            points: gt
                .iter()
                .map(|g| TrajectoryPoint {
                    stamp: g.stamp,
                    position: nalgebra::Vector3::from(g.p),
                    orientation: UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
                        g.q[0], g.q[1], g.q[2], g.q[3],
                    )),
                })
                .collect(),
        })
    }
}

/// Writes a trajectory in TUM format: `t x y z qx qy qz qw` per line.
pub fn write_tum(path: &Path, traj: &Trajectory) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    for p in &traj.points {
        let q = p.orientation.quaternion();
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            p.stamp, p.position.x, p.position.y, p.position.z, q.i, q.j, q.k, q.w
        )
        .map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    }
    Ok(())
}

/// Reads a TUM-format trajectory, skipping `#` comment lines.
pub fn read_tum(path: &Path) -> Result<Trajectory, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut points = Vec::new();
    let mut prev: Option<f64> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_ascii_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| DatasetError::MalformedTum {
                path: path.to_path_buf(),
                line: idx + 1,
            })?;
        if vals.len() != 8 {
            return Err(DatasetError::MalformedTum { path: path.to_path_buf(), line: idx + 1 });
        }
        let stamp = vals[0];
        if let Some(p) = prev {
            if stamp <= p {
                return Err(DatasetError::NonMonotone {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    prev: p,
                    next: stamp,
                });
            }
        }
        prev = Some(stamp);
        points.push(TrajectoryPoint {
            stamp,
            position: nalgebra::Vector3::new(vals[1], vals[2], vals[3]),
            orientation: UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
                vals[7], vals[4], vals[5], vals[6],
            )),
        });
    }
    Ok(Trajectory { points })
}
