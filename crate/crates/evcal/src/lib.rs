//! Intrinsic calibration for event cameras observing a moving circle-grid target.
//!
//! The pipeline turns a raw asynchronous event stream into calibrated camera
//! intrinsics without ever forming conventional images:
//!
//! 1. [`event`] — stream I/O and adaptive temporal windowing into reference frames.
//! 2. [`clustering`] — per-polarity DBSCAN over the window's event pixels.
//! 3. [`features`] — circle features from polarity-opposed cluster pairs (Kåsa fit).
//! 4. [`pattern`] — ordering features into the known circle-grid topology.
//! 5. [`init`] — Zhang-style closed-form intrinsics, planar PnP + RANSAC poses,
//!    velocity gating and feature cross-validation.
//! 6. [`spline`] — non-uniform 7-D (position + quaternion) B-spline segments
//!    approximating the per-frame poses.
//! 7. [`optimizer`] — joint Levenberg–Marquardt refinement of the intrinsics and
//!    all control points, with one residual per event at its own timestamp.
//!
//! [`synthetic`] generates ground-truth scenes for closed-loop testing, and
//! [`pipeline`] wires the stages together behind a single [`config::CalibrationConfig`].
//! The `evcal` binary exposes the `calibrate`, `simulate`, `evaluate-ate` and
//! `report` subcommands; the `examples/` directory shows each stage in isolation.

pub mod ate;
pub mod camera;
pub mod clustering;
pub mod config;
pub mod event;
pub mod features;
pub mod geometry;
pub mod init;
mod linalg;
pub mod optimizer;
pub mod output;
pub mod pattern;
pub mod pipeline;
pub mod report;
pub mod spline;
pub mod synthetic;

pub use camera::Intrinsics;
pub use config::CalibrationConfig;
pub use event::{Event, EventWindow, WindowingConfig};
pub use optimizer::CalibrationResult;
pub use pattern::PatternSpec;
pub use pipeline::{run_calibration, PipelineError};
