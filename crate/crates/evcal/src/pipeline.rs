//! End-to-end calibration: windowing, clustering, feature extraction, grid
//! detection, classical initialization, rectification, segment grouping,
//! spline approximation, event augmentation and the joint refinement.

use nalgebra::Vector2;
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{fit_inverse_from_forward, Intrinsics};
use crate::clustering::extract_clusters;
use crate::config::{CalibrationConfig, ExtractionMode};
use crate::event::{window_events, Event, EventWindow, WindowingStats};
use crate::features::{
    hard_extract, mutual_consistency_filter, soft_extract, ExtractionParams, SearchDirection,
};
use crate::geometry::Pose;
use crate::init::{
    cross_validate_features, estimate_forward_distortion, estimate_homography, pnp_ransac,
    velocity_filter, CrossValidationParams, InitError, RansacParams, RectifiedFrame,
};
use crate::optimizer::{
    augment_events, solve, AugmentFrame, CalibrationResult, EventCorrespondence, PoseSampleOut,
    SolveError,
};
use crate::output::{FeatureRecord, FrameRecord, ResultFile};
use crate::pattern::{detect_grid, orientation_consistency_check, PatternDetection};
use crate::spline::{
    approximate_segment, group_segments, hemisphere_align, PoseSample, SplineError, SplineSegment,
};

/// Counters describing what every stage kept and rejected.
#[derive(Debug, Clone, Default)]
pub struct StageDiagnostics {
    pub events_loaded: usize,
    pub windowing: WindowingStats,
    pub detections: usize,
    pub detection_failures: usize,
    pub orientation_rejections: usize,
    pub frames_with_pose: usize,
    pub pnp_rejections: usize,
    pub frames_after_velocity: usize,
    pub frames_after_rectification: usize,
    pub segments: usize,
    pub initial_correspondences: usize,
    pub augmented_correspondences: usize,
    pub initial_intrinsics: Option<Intrinsics>,
}

impl std::fmt::Display for StageDiagnostics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "events loaded:              {}", self.events_loaded)?;
        writeln!(
            f,
            "windows accepted:           {} ({} detection attempts, {} over-full, {} undetected)",
            self.windowing.accepted,
            self.windowing.detection_attempts,
            self.windowing.abandoned_too_many_events,
            self.windowing.abandoned_no_detection
        )?;
        writeln!(
            f,
            "grid detections:            {} ({} failures, {} orientation rejections)",
            self.detections, self.detection_failures, self.orientation_rejections
        )?;
        writeln!(
            f,
            "frames with pose:           {} ({} PnP rejections)",
            self.frames_with_pose, self.pnp_rejections
        )?;
        writeln!(f, "frames after velocity gate: {}", self.frames_after_velocity)?;
        writeln!(
            f,
            "frames after rectification: {}",
            self.frames_after_rectification
        )?;
        writeln!(f, "trajectory segments:        {}", self.segments)?;
        writeln!(
            f,
            "correspondences:            {} initial, {} after augmentation",
            self.initial_correspondences, self.augmented_correspondences
        )?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("calibration infeasible at stage '{stage}': {details}\n{diagnostics}")]
    Infeasible {
        stage: &'static str,
        details: String,
        diagnostics: Box<StageDiagnostics>,
    },
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Everything the calibrate command needs to write its outputs.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub result: CalibrationResult,
    pub result_file: ResultFile,
    pub diagnostics: StageDiagnostics,
    /// Solver converged and the refined intrinsics pass the validity check.
    pub converged: bool,
}

struct Frame {
    window: EventWindow,
    pose: Pose,
    rectified: RectifiedFrame,
}

/// Run the full pipeline on a loaded, timestamp-ordered event stream.
pub fn run_calibration(
    events: &[Event],
    config: &CalibrationConfig,
) -> Result<PipelineOutput, PipelineError> {
    if config.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .expect("thread pool");
        pool.install(|| run_calibration_inner(events, config))
    } else {
        run_calibration_inner(events, config)
    }
}

fn infeasible(
    stage: &'static str,
    details: impl Into<String>,
    diag: &StageDiagnostics,
) -> PipelineError {
    PipelineError::Infeasible {
        stage,
        details: details.into(),
        diagnostics: Box::new(diag.clone()),
    }
}

fn run_calibration_inner(
    events: &[Event],
    config: &CalibrationConfig,
) -> Result<PipelineOutput, PipelineError> {
    let mut diag = StageDiagnostics {
        events_loaded: events.len(),
        ..StageDiagnostics::default()
    };
    let pattern = &config.pattern;
    let board = pattern.board_points();
    let extraction = ExtractionParams {
        k_neighbors: config.extraction.k_neighbors,
        tol_diameter: config.extraction.tol_diameter,
        tol_center: config.extraction.tol_center,
        tol_soft: config.extraction.tol_soft,
    };

    // stage 1: windowing with clustering, extraction and grid detection
    let mut previous: Option<(PatternDetection, f64)> = None;
    let mut detection_failures = 0usize;
    let mut orientation_rejections = 0usize;
    let windows = {
        let detector = |window: &EventWindow| -> Option<PatternDetection> {
            let (pos, neg) = extract_clusters(
                window,
                config.clustering.eps_px,
                config.clustering.min_pts,
                config.clustering.min_cluster_size,
            );
            if pos.is_empty() || neg.is_empty() {
                detection_failures += 1;
                return None;
            }
            let features = match config.extraction.mode {
                ExtractionMode::Hard => {
                    let fwd =
                        hard_extract(&pos, &neg, window, &extraction, SearchDirection::PosToNeg);
                    let rev =
                        hard_extract(&pos, &neg, window, &extraction, SearchDirection::NegToPos);
                    mutual_consistency_filter(&fwd, &rev)
                }
                ExtractionMode::Soft => {
                    let fwd =
                        soft_extract(&pos, &neg, window, &extraction, SearchDirection::PosToNeg);
                    let rev =
                        soft_extract(&pos, &neg, window, &extraction, SearchDirection::NegToPos);
                    mutual_consistency_filter(&fwd, &rev)
                }
            };
            let prev_det = previous.as_ref().map(|(d, _)| d);
            let detection =
                match detect_grid(&features, pattern, config.detection.tol_grid_px, prev_det) {
                    Ok(d) => d,
                    Err(_) => {
                        detection_failures += 1;
                        return None;
                    }
                };
            if let Some((prev, prev_t)) = &previous {
                let dt = window.t_ref_sec() - prev_t;
                if dt > 0.0
                    && !orientation_consistency_check(
                        &detection,
                        prev,
                        dt,
                        config.detection.max_rot_rate,
                    )
                {
                    orientation_rejections += 1;
                    return None;
                }
            }
            previous = Some((detection.clone(), window.t_ref_sec()));
            Some(detection)
        };
        let (windows, stats) = window_events(events, &config.windowing, detector);
        diag.windowing = stats;
        windows
    };
    diag.detections = windows.len();
    diag.detection_failures = detection_failures;
    diag.orientation_rejections = orientation_rejections;

    if windows.len() < 3 {
        return Err(infeasible(
            "detection",
            format!("no reference frames: only {} pattern detections", windows.len()),
            &diag,
        ));
    }

    // stage 2: closed-form intrinsics after a pose-free radial bootstrap
    let board2: Vec<Vector2<f64>> = board.iter().map(|p| Vector2::new(p.x, p.y)).collect();
    let ransac = |seed: u64| RansacParams {
        iterations: config.init.ransac_iterations,
        inlier_tol_px: config.init.inlier_tol_px,
        min_inlier_fraction: config.init.min_inlier_fraction,
        seed,
    };
    let frame_seed =
        |i: usize| config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1));

    // straightness of the collinear pattern columns pins the radial model
    // before any intrinsics or poses exist
    let feature_sets: Vec<Vec<Vector2<f64>>> = windows
        .iter()
        .map(|(_, det)| det.features.iter().map(|f| f.center).collect())
        .collect();
    let columns: Vec<Vec<usize>> = (0..pattern.cols)
        .map(|j| (0..pattern.rows).map(|i| i * pattern.cols + j).collect())
        .collect();
    let img_center = Vector2::new(
        config.sensor.width as f64 / 2.0,
        config.sensor.height as f64 / 2.0,
    );
    let f_nom = 0.5 * (config.sensor.width + config.sensor.height) as f64;
    let c_boot = crate::init::estimate_radial_straightness(
        &feature_sets,
        &columns,
        img_center,
        f_nom,
    );

    // closed form on bootstrap-undistorted features
    let undistort_boot = |p: Vector2<f64>| -> Vector2<f64> {
        let d = p - img_center;
        let beta = 1.0 + c_boot * d.norm_squared() / (f_nom * f_nom);
        img_center + d * beta
    };
    let homs: Vec<_> = feature_sets
        .iter()
        .filter_map(|feats| {
            let img: Vec<Vector2<f64>> = feats.iter().map(|p| undistort_boot(*p)).collect();
            estimate_homography(&board2, &img).ok()
        })
        .collect();
    let (fx1, fy1, cx1, cy1) = zhang_or_fail(&homs, &diag)?;
    let k1_boot = c_boot * (fx1 / f_nom) * (fx1 / f_nom);
    let mut k_cur = Intrinsics::new(fx1, fy1, cx1, cy1, [k1_boot, 0.0, 0.0, 0.0, 0.0]);
    if k_cur.validate(config.sensor).is_err() {
        k_cur = Intrinsics::new(fx1, fy1, cx1, cy1, [0.0; 5]);
    }

    // alternate poses, forward-distortion fit and the closed form
    for _pass in 0..2 {
        let poses: Vec<Option<Pose>> = windows
            .par_iter()
            .enumerate()
            .map(|(i, (_, det))| {
                pnp_ransac(det, &board, &k_cur, &ransac(frame_seed(i)))
                    .ok()
                    .map(|(p, _)| p)
            })
            .collect();
        let mut obs = Vec::new();
        for ((_, det), pose) in windows.iter().zip(poses.iter()) {
            let Some(pose) = pose else { continue };
            for (si, f) in det.features.iter().enumerate() {
                obs.push((f.center, board[si], *pose));
            }
        }
        if obs.len() < 4 * pattern.circle_count() {
            break;
        }
        let (c1, c2) = estimate_forward_distortion(&obs, k_cur.fx, k_cur.fy, k_cur.cx, k_cur.cy);
        let pin = Intrinsics::new(k_cur.fx, k_cur.fy, k_cur.cx, k_cur.cy, [0.0; 5]);
        let distortion = match fit_inverse_from_forward(
            &[c1, c2],
            pin.max_alpha(config.sensor),
            256,
        ) {
            Ok((kinv, _)) => kinv,
            Err(_) => k_cur.distortion(),
        };
        let k_full = Intrinsics::new(k_cur.fx, k_cur.fy, k_cur.cx, k_cur.cy, distortion);
        let k_full = if k_full.validate(config.sensor).is_ok() {
            k_full
        } else {
            k_cur
        };
        // re-run the closed form on model-undistorted features
        let homs: Vec<_> = feature_sets
            .iter()
            .filter_map(|feats| {
                let img: Vec<Vector2<f64>> = feats
                    .iter()
                    .map(|p| {
                        let n = k_full.normalize(*p);
                        Vector2::new(k_full.fx * n.x + k_full.cx, k_full.fy * n.y + k_full.cy)
                    })
                    .collect();
                estimate_homography(&board2, &img).ok()
            })
            .collect();
        let next = match crate::init::zhang_intrinsics(&homs) {
            Ok((fx, fy, cx, cy)) => Intrinsics::new(fx, fy, cx, cy, k_full.distortion()),
            Err(_) => k_full,
        };
        k_cur = if next.validate(config.sensor).is_ok() {
            next
        } else {
            k_full
        };
    }
    let k_init = k_cur;
    if k_init.validate(config.sensor).is_err() {
        return Err(infeasible(
            "initialization",
            "initial intrinsics are not invertible over the sensor",
            &diag,
        ));
    }
    diag.initial_intrinsics = Some(k_init);

    // stage 3: per-frame poses under the seeded intrinsics
    let pose_results: Vec<Option<Pose>> = windows
        .par_iter()
        .enumerate()
        .map(|(i, (_, det))| {
            pnp_ransac(det, &board, &k_init, &ransac(frame_seed(i)))
                .ok()
                .map(|(p, _)| p)
        })
        .collect();
    let mut posed: Vec<(EventWindow, PatternDetection, Pose)> = Vec::new();
    for ((window, det), pose) in windows.into_iter().zip(pose_results.into_iter()) {
        match pose {
            Some(p) => posed.push((window, det, p)),
            None => diag.pnp_rejections += 1,
        }
    }
    diag.frames_with_pose = posed.len();
    if posed.len() < 3 {
        return Err(infeasible(
            "pose estimation",
            format!("only {} frames with a pose", posed.len()),
            &diag,
        ));
    }

    // stage 4: velocity gate
    let times: Vec<f64> = posed.iter().map(|(w, _, _)| w.t_ref_sec()).collect();
    let poses: Vec<Pose> = posed.iter().map(|(_, _, p)| *p).collect();
    let keep = velocity_filter(
        &times,
        &poses,
        config.init.max_trans_vel,
        config.init.max_rot_vel,
    );
    let mut gated: Vec<(EventWindow, PatternDetection, Pose)> = posed
        .into_iter()
        .zip(keep)
        .filter_map(|(f, k)| k.then_some(f))
        .collect();
    diag.frames_after_velocity = gated.len();

    // stage 5: cross-validation and rectification
    let cv = CrossValidationParams {
        assign_radius_factor: config.init.cv_assign_radius_factor,
        tol_center: config.init.tol_cv_center,
        tol_radius: config.init.tol_cv_radius,
        min_features: config.min_features_after_rectification(),
        min_events_per_circle: config.clustering.min_cluster_size.max(6),
    };
    let rectified: Vec<RectifiedFrame> = gated
        .par_iter()
        .map(|(window, _, pose)| {
            cross_validate_features(
                window,
                pose,
                &k_init,
                &board,
                pattern.circle_radius_m,
                config.sensor,
                &cv,
            )
        })
        .collect();
    let mut frames: Vec<Frame> = Vec::new();
    for ((window, _, pose), rect) in gated.drain(..).zip(rectified.into_iter()) {
        if rect.kept {
            frames.push(Frame {
                window,
                pose,
                rectified: rect,
            });
        }
    }
    diag.frames_after_rectification = frames.len();
    if frames.is_empty() {
        return Err(infeasible(
            "rectification",
            "no frames survived feature cross-validation",
            &diag,
        ));
    }

    // stage 6: segment grouping
    let frame_times: Vec<f64> = frames.iter().map(|f| f.window.t_ref_sec()).collect();
    let runs = match group_segments(
        &frame_times,
        config.spline.max_gap_s,
        config.spline.effective_min_frames(),
    ) {
        Ok(r) => r,
        Err(SplineError::NoSegments) => {
            return Err(infeasible(
                "segment grouping",
                "no temporal run of frames is long enough for a spline segment",
                &diag,
            ))
        }
        Err(e) => {
            return Err(infeasible("segment grouping", e.to_string(), &diag));
        }
    };
    diag.segments = runs.len();

    // stage 7: per-segment spline approximation of the frame poses
    let degree = config.spline.degree;
    let mut segments: Vec<SplineSegment> = Vec::new();
    let mut frame_segment: Vec<Option<usize>> = vec![None; frames.len()];
    for (si, &(a, b)) in runs.iter().enumerate() {
        let seg_frames = &frames[a..=b];
        let quats: Vec<_> = seg_frames.iter().map(|f| f.pose.q).collect();
        let aligned = hemisphere_align(&quats);
        let samples: Vec<PoseSample> = seg_frames
            .iter()
            .zip(aligned)
            .map(|(f, q)| PoseSample {
                t_sec: f.window.t_ref_sec(),
                pos: f.pose.t,
                quat: q,
            })
            .collect();
        let n_frames = samples.len();
        let n_ctrl = ((config.spline.ctrl_per_frame * n_frames as f64).round() as usize)
            .clamp(degree + 1, n_frames);
        let domain = (
            seg_frames[0].window.t_start_us as f64 * 1e-6,
            seg_frames[n_frames - 1].window.t_end_us as f64 * 1e-6,
        );
        let seg = approximate_segment(&samples, degree, n_ctrl, domain, (a, b)).map_err(|e| {
            infeasible("spline approximation", e.to_string(), &diag)
        })?;
        for fi in a..=b {
            frame_segment[fi] = Some(si);
        }
        segments.push(seg);
    }

    // stage 8: correspondences from the rectified event assignments
    let mut assigned = vec![false; events.len()];
    let mut correspondences: Vec<EventCorrespondence> = Vec::new();
    for (fi, frame) in frames.iter().enumerate() {
        let Some(si) = frame_segment[fi] else { continue };
        for (local, circle) in frame.rectified.event_circle.iter().enumerate() {
            let Some(circle) = circle else { continue };
            let gi = frame.window.global_index(local);
            let e = &frame.window.events[local];
            assigned[gi] = true;
            correspondences.push(EventCorrespondence {
                event_index: gi,
                t_sec: e.t_sec(),
                pixel: Vector2::new(e.x, e.y),
                segment: si,
                circle: *circle as usize,
            });
        }
    }
    diag.initial_correspondences = correspondences.len();
    if correspondences.is_empty() {
        return Err(infeasible(
            "correspondences",
            "no event-to-circle assignments survived",
            &diag,
        ));
    }

    // stage 9: event augmentation
    let augment_frames: Vec<AugmentFrame<'_>> = frames
        .iter()
        .enumerate()
        .filter_map(|(fi, f)| {
            frame_segment[fi].map(|si| AugmentFrame {
                t_ref_us: f.window.t_ref_us(),
                segment: si,
                features: &f.rectified.features,
            })
        })
        .collect();
    let extra = augment_events(
        events,
        &assigned,
        &augment_frames,
        &segments,
        config.augment_dt_max_us(),
        config.augment.d_max_radius_factor,
    );
    correspondences.extend(extra);
    correspondences.sort_by_key(|c| c.event_index);
    diag.augmented_correspondences = correspondences.len();

    // stage 10: joint refinement
    let centers: Vec<Vector2<f64>> = board.iter().map(|p| Vector2::new(p.x, p.y)).collect();
    let mut result = solve(
        &correspondences,
        &k_init,
        &segments,
        &centers,
        pattern.circle_radius_m,
        &config.solver,
    )?;

    // poses at the reference timestamps from the refined trajectory
    let mut pose_samples = Vec::with_capacity(frames.len());
    for (fi, frame) in frames.iter().enumerate() {
        let Some(si) = frame_segment[fi] else { continue };
        let t = frame.window.t_ref_sec();
        if let Ok((pos, q)) = result.segments[si].evaluate(t) {
            pose_samples.push(PoseSampleOut {
                t_us: frame.window.t_ref_us().round() as u64,
                position: [pos[0], pos[1], pos[2]],
                quaternion: [q[0], q[1], q[2], q[3]],
            });
        }
    }
    result.pose_samples = pose_samples;

    let intrinsics_valid = result.intrinsics.validate(config.sensor).is_ok();
    let converged = result.solver.converged && intrinsics_valid;

    let frame_records: Vec<FrameRecord> = frames
        .iter()
        .enumerate()
        .map(|(fi, f)| FrameRecord {
            t_ref_us: f.window.t_ref_us(),
            t_start_us: f.window.t_start_us,
            t_end_us: f.window.t_end_us,
            n_events: f.window.events.len(),
            segment: frame_segment[fi].unwrap_or(usize::MAX),
            position: [f.pose.t[0], f.pose.t[1], f.pose.t[2]],
            quaternion: [f.pose.q[0], f.pose.q[1], f.pose.q[2], f.pose.q[3]],
            features: f
                .rectified
                .features
                .iter()
                .map(|(s, c)| FeatureRecord {
                    pattern_index: *s,
                    cx: c.center.x,
                    cy: c.center.y,
                    radius: c.radius,
                })
                .collect(),
        })
        .collect();

    let result_file = ResultFile::new(&result, frame_records, config, intrinsics_valid);
    Ok(PipelineOutput {
        result,
        result_file,
        diagnostics: diag,
        converged,
    })
}

fn zhang_or_fail(
    homographies: &[nalgebra::Matrix3<f64>],
    diag: &StageDiagnostics,
) -> Result<(f64, f64, f64, f64), PipelineError> {
    match crate::init::zhang_intrinsics(homographies) {
        Ok(v) => Ok(v),
        Err(InitError::NotEnoughViews { needed, got }) => Err(infeasible(
            "initialization",
            format!("need {needed} homographies for the closed form, got {got}"),
            diag,
        )),
        Err(e) => Err(infeasible("initialization", e.to_string(), diag)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SceneConfig};

    #[test]
    fn scratch_feature_accuracy() {
        let scene_cfg = SceneConfig {
            duration_s: 1.5,
            seed: 11,
            ..SceneConfig::default()
        };
        let scene = scene_cfg.build().unwrap();
        let (events, _) = generate(&scene).unwrap();
        let config = CalibrationConfig::default();
        let k_gt = scene.config.intrinsics;
        let board = scene.config.pattern.board_points();
        let mut previous: Option<crate::pattern::PatternDetection> = None;
        let (wins, _) = crate::event::window_events(&events, &config.windowing, |w| {
            let (pos, neg) = crate::clustering::extract_clusters(w, 3.0, 4, 8);
            let params = crate::features::ExtractionParams::default();
            let fwd = crate::features::soft_extract(&pos, &neg, w, &params, crate::features::SearchDirection::PosToNeg);
            let rev = crate::features::soft_extract(&pos, &neg, w, &params, crate::features::SearchDirection::NegToPos);
            let feats = crate::features::mutual_consistency_filter(&fwd, &rev);
            let det = crate::pattern::detect_grid(&feats, &config.pattern, 3.0, previous.as_ref()).ok()?;
            previous = Some(det.clone());
            Some(det)
        });
        eprintln!("accepted {}", wins.len());
        for (w, det) in wins.iter().take(8) {
            let pose = scene.pose_at(w.t_ref_sec()).unwrap();
            let mut max_err = 0.0f64;
            let mut mean_err = 0.0f64;
            let mut max_err_rev = 0.0f64;
            for (s_idx, f) in det.features.iter().enumerate() {
                let proj = k_gt.project(pose.to_camera(&board[s_idx])).unwrap();
                let proj_rev = k_gt
                    .project(pose.to_camera(&board[board.len() - 1 - s_idx]))
                    .unwrap();
                let e = (f.center - proj).norm();
                max_err = max_err.max(e);
                mean_err += e;
                max_err_rev = max_err_rev.max((f.center - proj_rev).norm());
            }
            mean_err /= det.features.len() as f64;
            eprintln!(
                "t={:.3}: mean {:.3} px, max {:.3} px (reversed max {:.2})",
                w.t_ref_sec(),
                mean_err,
                max_err,
                max_err_rev
            );
        }
    }

    #[test]
    fn scratch_zhang_isolation() {
        use crate::init::{estimate_homography, zhang_intrinsics};
        let scene_cfg = SceneConfig {
            duration_s: 3.0,
            seed: 11,
            ..SceneConfig::default()
        };
        let scene = scene_cfg.build().unwrap();
        let k_gt = scene.config.intrinsics;
        let k_pin = crate::camera::Intrinsics::new(k_gt.fx, k_gt.fy, k_gt.cx, k_gt.cy, [0.0; 5]);
        let board = scene.config.pattern.board_points();
        let board2: Vec<Vector2<f64>> = board.iter().map(|p| Vector2::new(p.x, p.y)).collect();
        for (label, k_use) in [("pinhole", &k_pin), ("distorted", &k_gt)] {
            let mut homs = Vec::new();
            for i in 0..50 {
                let t = 0.05 + 2.9 * i as f64 / 49.0;
                let pose = scene.pose_at(t).unwrap();
                let img: Vec<Vector2<f64>> = board
                    .iter()
                    .map(|b| k_use.project(pose.to_camera(b)).unwrap())
                    .collect();
                homs.push(estimate_homography(&board2, &img).unwrap());
            }
            match zhang_intrinsics(&homs) {
                Ok((fx, fy, cx, cy)) => {
                    eprintln!("{label}: fx={fx:.2} fy={fy:.2} cx={cx:.2} cy={cy:.2}")
                }
                Err(e) => eprintln!("{label}: error {e}"),
            }
        }
    }

    #[test]
    fn scratch_detect_stages() {
        use crate::clustering::extract_clusters;
        use crate::features::{soft_extract, mutual_consistency_filter, SearchDirection, ExtractionParams};
        use crate::pattern::detect_grid;
        let scene_cfg = SceneConfig {
            duration_s: 1.0,
            seed: 11,
            ..SceneConfig::default()
        };
        let scene = scene_cfg.build().unwrap();
        let (events, _) = generate(&scene).unwrap();
        let config = CalibrationConfig::default();
        let mut printed = 0;
        let (wins, stats) = crate::event::window_events(&events, &config.windowing, |w| {
            let (pos, neg) = extract_clusters(w, 3.0, 4, 8);
            let params = ExtractionParams::default();
            let fwd = soft_extract(&pos, &neg, w, &params, SearchDirection::PosToNeg);
            let rev = soft_extract(&pos, &neg, w, &params, SearchDirection::NegToPos);
            let feats = mutual_consistency_filter(&fwd, &rev);
            let grid = detect_grid(&feats, &config.pattern, 3.0, None);
            if printed < 12 {
                eprintln!("window {} events span {}us: pos={} neg={} fwd={} rev={} mutual={} grid={:?}",
                    w.events.len(), w.duration_us(), pos.len(), neg.len(), fwd.len(), rev.len(), feats.len(),
                    grid.as_ref().map(|_| "ok").map_err(|e| e.to_string()));
                printed += 1;
            }
            grid.ok()
        });
        eprintln!("accepted {} stats {:?}", wins.len(), stats);
    }

    #[test]
    fn empty_stream_is_infeasible() {
        let config = CalibrationConfig::default();
        let err = run_calibration(&[], &config).unwrap_err();
        match err {
            PipelineError::Infeasible { stage, .. } => assert_eq!(stage, "detection"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn short_synthetic_scene_calibrates() {
        let scene_cfg = SceneConfig {
            duration_s: 3.0,
            seed: 11,
            ..SceneConfig::default()
        };
        let scene = scene_cfg.build().unwrap();
        let (events, _) = generate(&scene).unwrap();
        let config = CalibrationConfig::default();
        let out = run_calibration(&events, &config).unwrap();
        eprintln!(
            "solver: {:?} iters={} cost {:.3e} -> {:.3e} delta={:.2e} k: fx={:.2} fy={:.2} cx={:.2} cy={:.2} k1={:.4} | init {:?}",
            out.result.solver.termination,
            out.result.solver.iterations,
            out.result.solver.initial_cost,
            out.result.solver.final_cost,
            out.result.solver.huber_delta,
            out.result.intrinsics.fx,
            out.result.intrinsics.fy,
            out.result.intrinsics.cx,
            out.result.intrinsics.cy,
            out.result.intrinsics.k1,
            out.diagnostics.initial_intrinsics.map(|k| (k.fx, k.fy, k.cx, k.cy, k.k1)),
        );
        assert!(out.converged, "diagnostics:\n{}", out.diagnostics);
        let k = out.result.intrinsics;
        let gt = scene.config.intrinsics;
        assert!(
            (k.fx - gt.fx).abs() / gt.fx < 0.01,
            "fx {} vs {}\n{}",
            k.fx,
            gt.fx,
            out.diagnostics
        );
        assert!((k.cx - gt.cx).abs() < 3.0);
        assert!((k.k1 - gt.k1).abs() < 0.05);
    }
}
