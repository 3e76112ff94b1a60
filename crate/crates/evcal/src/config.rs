//! Calibration configuration: one struct covering every stage, with defaults,
//! TOML file override and flag override, in that order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{SensorGeometry, WindowingConfig};
use crate::optimizer::SolveOptions;
use crate::pattern::PatternSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Extraction strategy for circle features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionMode {
    Hard,
    Soft,
}

impl std::str::FromStr for ExtractionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hard" => Ok(ExtractionMode::Hard),
            "soft" => Ok(ExtractionMode::Soft),
            other => Err(format!("unknown extraction mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    pub eps_px: f64,
    pub min_pts: usize,
    pub min_cluster_size: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            eps_px: 3.0,
            min_pts: 4,
            min_cluster_size: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub mode: ExtractionMode,
    pub k_neighbors: usize,
    /// Relative diameter mismatch tolerance (hard mode).
    pub tol_diameter: f64,
    /// Center mismatch tolerance as a fraction of the radius (hard mode).
    pub tol_center: f64,
    /// Normalized fit error ceiling (soft mode).
    pub tol_soft: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            mode: ExtractionMode::Soft,
            k_neighbors: 3,
            tol_diameter: 0.25,
            tol_center: 0.25,
            tol_soft: 0.35,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Reprojection tolerance of the grid assignment, pixels.
    pub tol_grid_px: f64,
    /// Orientation-consistency gate, rad/s.
    pub max_rot_rate: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            tol_grid_px: 3.0,
            max_rot_rate: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub ransac_iterations: usize,
    pub inlier_tol_px: f64,
    /// Minimum inlier fraction of the grid for a pose to be accepted.
    pub min_inlier_fraction: f64,
    pub max_trans_vel: f64,
    pub max_rot_vel: f64,
    /// Cross-validation: allowed center shift as a fraction of the radius.
    pub tol_cv_center: f64,
    /// Cross-validation: allowed relative radius mismatch.
    pub tol_cv_radius: f64,
    /// Cross-validation: event assignment radius factor.
    pub cv_assign_radius_factor: f64,
    /// Frames keep at least this fraction of the grid after rectification
    /// (rounded up), otherwise they are dropped.
    pub min_feature_fraction: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            ransac_iterations: 200,
            inlier_tol_px: 2.0,
            min_inlier_fraction: 0.6,
            max_trans_vel: 5.0,
            max_rot_vel: 6.0,
            tol_cv_center: 0.5,
            tol_cv_radius: 0.4,
            cv_assign_radius_factor: 1.5,
            min_feature_fraction: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineConfig {
    pub degree: usize,
    /// Control points per reference frame (floor degree + 1).
    pub ctrl_per_frame: f64,
    /// Maximum inter-frame gap within one segment, seconds.
    pub max_gap_s: f64,
    /// Minimum frames per segment; zero means degree + 2.
    pub min_frames_per_segment: usize,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            ctrl_per_frame: 1.0,
            max_gap_s: 1.0,
            min_frames_per_segment: 0,
        }
    }
}

impl SplineConfig {
    pub fn effective_min_frames(&self) -> usize {
        if self.min_frames_per_segment == 0 {
            self.degree + 2
        } else {
            self.min_frames_per_segment
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Temporal reach around each reference timestamp, microseconds; zero
    /// means max_mult * tau / 2.
    pub dt_max_us: f64,
    /// Perimeter distance gate as a factor of the fitted circle radius.
    pub d_max_radius_factor: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            dt_max_us: 0.0,
            d_max_radius_factor: 1.5,
        }
    }
}

/// Top-level calibration configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub sensor: SensorGeometry,
    pub pattern: PatternSpec,
    pub windowing: WindowingConfig,
    pub clustering: ClusteringConfig,
    pub extraction: ExtractionConfig,
    pub detection: DetectionConfig,
    pub init: InitConfig,
    pub spline: SplineConfig,
    pub augment: AugmentConfig,
    pub solver: SolveOptions,
    pub seed: u64,
    /// Worker thread cap; zero uses all available cores.
    pub threads: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            sensor: SensorGeometry {
                width: 346,
                height: 260,
            },
            pattern: PatternSpec::default(),
            windowing: WindowingConfig::default(),
            clustering: ClusteringConfig::default(),
            extraction: ExtractionConfig::default(),
            detection: DetectionConfig::default(),
            init: InitConfig::default(),
            spline: SplineConfig::default(),
            augment: AugmentConfig::default(),
            solver: SolveOptions::default(),
            seed: 7,
            threads: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: CalibrationConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sensor.width == 0 || self.sensor.height == 0 {
            return Err(ConfigError::Invalid("sensor must be non-empty".into()));
        }
        self.pattern.validate().map_err(ConfigError::Invalid)?;
        self.windowing.validate().map_err(ConfigError::Invalid)?;
        if self.clustering.eps_px <= 0.0 || self.clustering.min_pts == 0 {
            return Err(ConfigError::Invalid(
                "clustering eps and min_pts must be positive".into(),
            ));
        }
        if self.spline.degree == 0 || self.spline.degree > 7 {
            return Err(ConfigError::Invalid("spline degree must be in 1..=7".into()));
        }
        if !(self.init.min_inlier_fraction > 0.0 && self.init.min_inlier_fraction <= 1.0) {
            return Err(ConfigError::Invalid(
                "min_inlier_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Temporal augmentation reach, derived when not set explicitly.
    pub fn augment_dt_max_us(&self) -> f64 {
        if self.augment.dt_max_us > 0.0 {
            self.augment.dt_max_us
        } else {
            self.windowing.max_mult * self.windowing.tau_us as f64 / 2.0
        }
    }

    /// Minimum surviving features per rectified frame.
    pub fn min_features_after_rectification(&self) -> usize {
        (self.init.min_feature_fraction * self.pattern.circle_count() as f64).ceil() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = CalibrationConfig::default();
        let text = cfg.to_toml();
        let back: CalibrationConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.windowing.tau_us, cfg.windowing.tau_us);
        assert_eq!(back.extraction.mode, cfg.extraction.mode);
        assert_eq!(back.seed, cfg.seed);
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let cfg: CalibrationConfig = toml::from_str(
            r#"
            seed = 42
            [windowing]
            tau_us = 20000
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.windowing.tau_us, 20_000);
        // untouched fields keep defaults
        assert_eq!(cfg.clustering.min_pts, 4);
    }

    #[test]
    fn derived_values() {
        let cfg = CalibrationConfig::default();
        assert_eq!(cfg.min_features_after_rectification(), 12);
        assert_eq!(cfg.augment_dt_max_us(), 30_000.0);
        assert_eq!(cfg.spline.effective_min_frames(), 5);
    }
}
