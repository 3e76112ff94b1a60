//! Calibration result file (structured TOML) and trajectory file I/O.
//!
//! The trajectory layout is the common one consumed by trajectory-evaluation
//! tools: `t_us tx ty tz qx qy qz qw`, space-separated, one pose per line,
//! `#` comments allowed.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Intrinsics;
use crate::config::CalibrationConfig;
use crate::geometry::Pose;
use crate::optimizer::{CalibrationResult, PoseSampleOut, ResidualStats, SolverReport};
use crate::spline::SplineSegment;
use crate::synthetic::PoseLogEntry;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("result serialization failed: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("result parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("trajectory line {line}: {msg}")]
    Trajectory { line: usize, msg: String },
}

/// One rectified circle feature in a frame record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub pattern_index: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Per reference frame: window bounds, initial pose and rectified features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t_ref_us: f64,
    pub t_start_us: u64,
    pub t_end_us: u64,
    pub n_events: usize,
    pub segment: usize,
    pub position: [f64; 3],
    pub quaternion: [f64; 4],
    pub features: Vec<FeatureRecord>,
}

/// Serialized spline segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub degree: usize,
    pub frame_first: usize,
    pub frame_last: usize,
    pub t_first_s: f64,
    pub t_last_s: f64,
    pub knots_s: Vec<f64>,
    pub control_positions: Vec<[f64; 3]>,
    pub control_quaternions: Vec<[f64; 4]>,
}

impl SegmentRecord {
    pub fn from_segment(seg: &SplineSegment) -> Self {
        Self {
            degree: seg.knots.degree,
            frame_first: seg.frame_range.0,
            frame_last: seg.frame_range.1,
            t_first_s: seg.t_first(),
            t_last_s: seg.t_last(),
            knots_s: seg.knots.knots.clone(),
            control_positions: seg.control_points.iter().map(|c| [c.pos[0], c.pos[1], c.pos[2]]).collect(),
            control_quaternions: seg
                .control_points
                .iter()
                .map(|c| [c.quat[0], c.quat[1], c.quat[2], c.quat[3]])
                .collect(),
        }
    }
}

/// The complete, diffable calibration report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultFile {
    pub version: String,
    pub converged: bool,
    pub intrinsics_valid: bool,
    pub intrinsics: Intrinsics,
    pub stats: ResidualStats,
    pub solver: SolverReport,
    pub pose_samples: Vec<PoseSampleOut>,
    pub segments: Vec<SegmentRecord>,
    pub frames: Vec<FrameRecord>,
    pub config: CalibrationConfig,
}

impl ResultFile {
    pub fn new(
        result: &CalibrationResult,
        frames: Vec<FrameRecord>,
        config: &CalibrationConfig,
        intrinsics_valid: bool,
    ) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            converged: result.solver.converged,
            intrinsics_valid,
            intrinsics: result.intrinsics,
            stats: result.stats.clone(),
            solver: result.solver.clone(),
            pose_samples: result.pose_samples.clone(),
            segments: result.segments.iter().map(SegmentRecord::from_segment).collect(),
            frames,
            config: config.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), OutputError> {
        let text = toml::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, OutputError> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }
}

/// Write a pose log in the shared trajectory layout.
pub fn write_trajectory(path: &Path, log: &[PoseLogEntry]) -> Result<(), OutputError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in log {
        let t = entry.pose.t;
        let q = entry.pose.q;
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            entry.t_us, t[0], t[1], t[2], q[0], q[1], q[2], q[3]
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a pose log; `#` comment lines and blank lines are skipped.
pub fn read_trajectory(path: &Path) -> Result<Vec<PoseLogEntry>, OutputError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(OutputError::Trajectory {
                line: i + 1,
                msg: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, OutputError> {
            s.parse().map_err(|e| OutputError::Trajectory {
                line: i + 1,
                msg: format!("bad number '{s}': {e}"),
            })
        };
        let t_us: u64 = fields[0].parse().map_err(|e| OutputError::Trajectory {
            line: i + 1,
            msg: format!("bad timestamp '{}': {e}", fields[0]),
        })?;
        let t = Vector3::new(parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        let q = Vector4::new(
            parse(fields[4])?,
            parse(fields[5])?,
            parse(fields[6])?,
            parse(fields[7])?,
        );
        out.push(PoseLogEntry {
            t_us,
            pose: Pose::new(q, t),
        });
    }
    Ok(out)
}

/// Pose samples from a calibration result as a trajectory log.
pub fn samples_to_log(samples: &[PoseSampleOut]) -> Vec<PoseLogEntry> {
    samples
        .iter()
        .map(|s| PoseLogEntry {
            t_us: s.t_us,
            pose: Pose::new(
                Vector4::new(
                    s.quaternion[0],
                    s.quaternion[1],
                    s.quaternion[2],
                    s.quaternion[3],
                ),
                Vector3::new(s.position[0], s.position[1], s.position[2]),
            ),
        })
        .collect()
}
