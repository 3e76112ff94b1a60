//! Ordering of detected circle features into the known circle-grid topology.
//!
//! Grid finding hypothesizes the four grid corners among the convex hull
//! vertices of the feature set, fits a board-to-image homography per
//! hypothesis and accepts only a complete, unique, low-error assignment of
//! every pattern circle. The asymmetric layout is point-symmetric, so a 180°
//! twin always fits equally well; it is resolved against the previous frame's
//! orientation, or lexicographically for the first frame.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::features::CircleFeature;
use crate::geometry::{apply_homography, convex_hull, dlt_homography};

/// Planar circle-grid description.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternSpec {
    pub rows: usize,
    pub cols: usize,
    /// Center-to-center spacing in meters.
    pub spacing_m: f64,
    /// Metric circle radius in meters.
    pub circle_radius_m: f64,
    /// Alternate columns offset by spacing/2 in y.
    pub asymmetric: bool,
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self {
            rows: 9,
            cols: 4,
            spacing_m: 0.028,
            circle_radius_m: 0.0055,
            asymmetric: true,
        }
    }
}

impl PatternSpec {
    pub fn circle_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.rows < 2 || self.cols < 2 {
            return Err("pattern needs rows, cols >= 2".into());
        }
        if !(self.spacing_m > 0.0) {
            return Err("spacing must be positive".into());
        }
        if !(self.circle_radius_m > 0.0 && self.circle_radius_m < self.spacing_m / 2.0) {
            return Err("circle radius must be in (0, spacing/2)".into());
        }
        Ok(())
    }

    /// Metric 3-D circle centers, z = 0, row-major: index = i * cols + j.
    ///
    /// Asymmetric layout: point (i, j) at x = j*s, y = (2i + j mod 2) * s/2.
    pub fn board_points(&self) -> Vec<Vector3<f64>> {
        let s = self.spacing_m;
        let mut pts = Vec::with_capacity(self.circle_count());
        for i in 0..self.rows {
            for j in 0..self.cols {
                let x = j as f64 * s;
                let y = if self.asymmetric {
                    (2 * i + (j % 2)) as f64 * s / 2.0
                } else {
                    i as f64 * s
                };
                pts.push(Vector3::new(x, y, 0.0));
            }
        }
        pts
    }

    /// Indices of the four grid corners in board-plane counter-clockwise order.
    fn corner_indices(&self) -> [usize; 4] {
        let (r, c) = (self.rows, self.cols);
        [0, c - 1, (r - 1) * c + c - 1, (r - 1) * c]
    }
}

/// A complete feature-to-pattern assignment.
#[derive(Debug, Clone)]
pub struct PatternDetection {
    /// One feature per pattern circle; index = pattern index (row-major).
    pub features: Vec<CircleFeature>,
    /// Board-to-pixel homography fitted on all correspondences.
    pub homography: Matrix3<f64>,
    /// Max reprojection error of the assignment, pixels.
    pub max_error_px: f64,
    /// Grid column count; kept so row directions need no external spec.
    pub cols: usize,
}

impl PatternDetection {
    /// Image-space direction of the first pattern row.
    pub fn row_direction(&self) -> Vector2<f64> {
        let a = self.features[0].center;
        let b = self.features[self.cols - 1].center;
        let d = b - a;
        let n = d.norm();
        if n > 0.0 {
            d / n
        } else {
            Vector2::new(1.0, 0.0)
        }
    }
}

/// Grid detection failure cause. Failure is a value, not an error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GridFailure {
    TooFewFeatures { needed: usize, got: usize },
    DegenerateHull,
    NoConsistentGrid,
}

impl std::fmt::Display for GridFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GridFailure::TooFewFeatures { needed, got } => {
                write!(f, "too few features: {got} < {needed}")
            }
            GridFailure::DegenerateHull => write!(f, "degenerate feature hull"),
            GridFailure::NoConsistentGrid => write!(f, "no homography-consistent grid"),
        }
    }
}

struct Candidate {
    assignment: Vec<usize>,
    homography: Matrix3<f64>,
    max_err: f64,
    sum_err: f64,
}

/// Assign every pattern circle to a feature, or fail.
pub fn detect_grid(
    features: &[CircleFeature],
    spec: &PatternSpec,
    tol_grid_px: f64,
    previous: Option<&PatternDetection>,
) -> Result<PatternDetection, GridFailure> {
    let n_circles = spec.circle_count();
    if features.len() < n_circles {
        return Err(GridFailure::TooFewFeatures {
            needed: n_circles,
            got: features.len(),
        });
    }
    let centers: Vec<Vector2<f64>> = features.iter().map(|f| f.center).collect();
    let hull = convex_hull(&centers);
    if hull.len() < 4 {
        return Err(GridFailure::DegenerateHull);
    }

    let board = spec.board_points();
    let board2: Vec<Vector2<f64>> = board.iter().map(|p| Vector2::new(p.x, p.y)).collect();
    let corner_idx = spec.corner_indices();
    let corners: Vec<Vector2<f64>> = corner_idx.iter().map(|&i| board2[i]).collect();

    let mut best: Option<Candidate> = None;
    let h = hull.len();
    // 4-subsets of hull vertices in hull cyclic order; each tried in 4
    // rotations x 2 directions against the board corner cycle
    for a in 0..h {
        for b in (a + 1)..h {
            for c in (b + 1)..h {
                for d in (c + 1)..h {
                    let quad = [hull[a], hull[b], hull[c], hull[d]];
                    for rot in 0..4 {
                        for flip in [false, true] {
                            let mut img = [Vector2::zeros(); 4];
                            for (ci, slot) in img.iter_mut().enumerate() {
                                let qi = if flip { (4 - ci) % 4 } else { ci };
                                *slot = centers[quad[(qi + rot) % 4]];
                            }
                            let Ok(hyp) = dlt_homography(&corners, &img) else {
                                continue;
                            };
                            let Some(cand) =
                                evaluate_hypothesis(&hyp, &board2, &centers, tol_grid_px)
                            else {
                                continue;
                            };
                            if best
                                .as_ref()
                                .map(|b| cand.sum_err < b.sum_err)
                                .unwrap_or(true)
                            {
                                best = Some(cand);
                            }
                        }
                    }
                }
            }
        }
    }
    let best = best.ok_or(GridFailure::NoConsistentGrid)?;

    // 180-degree twin: the asymmetric grid maps onto itself under a point
    // reflection, so the reversed assignment usually fits equally well.
    let reversed: Vec<usize> = best.assignment.iter().rev().copied().collect();
    let twin = refit_assignment(&reversed, &board2, &centers, tol_grid_px);
    let chosen = match twin {
        Some(t) => disambiguate(best, t, &centers, spec, previous),
        None => best,
    };

    let feats: Vec<CircleFeature> = chosen
        .assignment
        .iter()
        .map(|&fi| features[fi].clone())
        .collect();
    Ok(PatternDetection {
        features: feats,
        homography: chosen.homography,
        max_error_px: chosen.max_err,
        cols: spec.cols,
    })
}

fn evaluate_hypothesis(
    h: &Matrix3<f64>,
    board2: &[Vector2<f64>],
    centers: &[Vector2<f64>],
    tol: f64,
) -> Option<Candidate> {
    let assignment = assign_nearest(h, board2, centers, tol)?;
    refit_assignment(&assignment, board2, centers, tol)
}

/// Greedy unique nearest-feature assignment of all board points, or None.
fn assign_nearest(
    h: &Matrix3<f64>,
    board2: &[Vector2<f64>],
    centers: &[Vector2<f64>],
    tol: f64,
) -> Option<Vec<usize>> {
    let mut used = vec![false; centers.len()];
    let mut assignment = Vec::with_capacity(board2.len());
    for bp in board2 {
        let proj = apply_homography(h, bp);
        if !proj.x.is_finite() || !proj.y.is_finite() {
            return None;
        }
        let mut best = None;
        let mut best_d = tol;
        for (fi, c) in centers.iter().enumerate() {
            if used[fi] {
                continue;
            }
            let d = (c - proj).norm();
            if d <= best_d {
                best_d = d;
                best = Some(fi);
            }
        }
        let fi = best?;
        used[fi] = true;
        assignment.push(fi);
    }
    Some(assignment)
}

/// Least-squares refit of the homography on a complete assignment, then
/// re-check uniqueness and tolerances.
fn refit_assignment(
    assignment: &[usize],
    board2: &[Vector2<f64>],
    centers: &[Vector2<f64>],
    tol: f64,
) -> Option<Candidate> {
    let img: Vec<Vector2<f64>> = assignment.iter().map(|&fi| centers[fi]).collect();
    let h = dlt_homography(board2, &img).ok()?;
    let refined = assign_nearest(&h, board2, centers, tol)?;
    let img2: Vec<Vector2<f64>> = refined.iter().map(|&fi| centers[fi]).collect();
    let h2 = dlt_homography(board2, &img2).ok()?;
    let mut max_err = 0.0f64;
    let mut sum_err = 0.0;
    for (bp, fc) in board2.iter().zip(img2.iter()) {
        let e = (apply_homography(&h2, bp) - fc).norm();
        if !(e <= tol) {
            return None;
        }
        max_err = max_err.max(e);
        sum_err += e;
    }
    Some(Candidate {
        assignment: refined,
        homography: h2,
        max_err,
        sum_err,
    })
}

fn disambiguate(
    a: Candidate,
    b: Candidate,
    centers: &[Vector2<f64>],
    spec: &PatternSpec,
    previous: Option<&PatternDetection>,
) -> Candidate {
    if a.assignment == b.assignment {
        return a;
    }
    // clear error winner first
    if (a.sum_err - b.sum_err).abs() > 1e-6 * (a.sum_err + b.sum_err).max(1e-12) {
        return if a.sum_err <= b.sum_err { a } else { b };
    }
    if let Some(prev) = previous {
        let prev_dir = prev.row_direction();
        let dir = |c: &Candidate| -> Vector2<f64> {
            let p0 = centers[c.assignment[0]];
            let p1 = centers[c.assignment[spec.cols - 1]];
            let d = p1 - p0;
            let n = d.norm();
            if n > 0.0 {
                d / n
            } else {
                Vector2::new(1.0, 0.0)
            }
        };
        let da = dir(&a).dot(&prev_dir);
        let db = dir(&b).dot(&prev_dir);
        return if da >= db { a } else { b };
    }
    // first frame: lexicographically smaller center sequence
    let seq = |c: &Candidate| -> Vec<(f64, f64)> {
        c.assignment
            .iter()
            .map(|&fi| (centers[fi].x, centers[fi].y))
            .collect()
    };
    if seq(&a) <= seq(&b) {
        a
    } else {
        b
    }
}

/// Rotational-velocity gate between two detections: angle between the first
/// pattern rows' image directions divided by the elapsed time.
pub fn orientation_consistency_check(
    current: &PatternDetection,
    previous: &PatternDetection,
    dt_sec: f64,
    max_rot_rate: f64,
) -> bool {
    assert!(dt_sec > 0.0);
    let a = current.row_direction();
    let b = previous.row_direction();
    let angle = a.y.atan2(a.x) - b.y.atan2(b.x);
    let angle = angle.sin().atan2(angle.cos()).abs();
    angle / dt_sec <= max_rot_rate
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn feature_at(center: Vector2<f64>) -> CircleFeature {
        CircleFeature {
            center,
            radius: 5.0,
            fit_error: 0.05,
            pos_cluster: 0,
            neg_cluster: 0,
        }
    }

    #[test]
    fn board_points_symmetric_2x2() {
        let spec = PatternSpec {
            rows: 2,
            cols: 2,
            spacing_m: 0.02,
            circle_radius_m: 0.005,
            asymmetric: false,
        };
        let pts = spec.board_points();
        assert_eq!(
            pts,
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(0.02, 0.0, 0.0),
                Vector3::new(0.0, 0.02, 0.0),
                Vector3::new(0.02, 0.02, 0.0),
            ]
        );
    }

    #[test]
    fn board_points_asymmetric_offsets() {
        let spec = PatternSpec::default();
        let pts = spec.board_points();
        assert_eq!(pts.len(), 36);
        let s = spec.spacing_m;
        for (idx, p) in pts.iter().enumerate() {
            let i = idx / spec.cols;
            let j = idx % spec.cols;
            assert_relative_eq!(p.x, j as f64 * s);
            assert_relative_eq!(p.y, (2 * i + j % 2) as f64 * s / 2.0);
            assert_eq!(p.z, 0.0);
        }
        // column 1 sits half a spacing above column 0
        assert_relative_eq!(pts[1].y - pts[0].y, s / 2.0);
    }

    fn random_homography(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        // a plausible board->pixel map: metric scale + rotation + mild projectivity
        let angle: f64 = rng.random_range(-0.6..0.6);
        let scale: f64 = rng.random_range(700.0..1100.0);
        let (s, c) = (angle.sin(), angle.cos());
        Matrix3::new(
            scale * c,
            -scale * s,
            rng.random_range(60.0..120.0),
            scale * s,
            scale * c,
            rng.random_range(30.0..80.0),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            1.0,
        )
    }

    fn project_board(spec: &PatternSpec, h: &Matrix3<f64>) -> Vec<CircleFeature> {
        spec.board_points()
            .iter()
            .map(|p| feature_at(apply_homography(h, &Vector2::new(p.x, p.y))))
            .collect()
    }

    #[test]
    fn detect_recovers_known_indexing() {
        let spec = PatternSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..20 {
            let h = random_homography(&mut rng);
            let feats = project_board(&spec, &h);
            let det = detect_grid(&feats, &spec, 3.0, None).expect("grid must be found");
            assert!(det.max_error_px < 1e-6);
            // assignment equals ground truth or its 180-degree twin
            let direct = (0..feats.len())
                .all(|i| (det.features[i].center - feats[i].center).norm() < 1e-9);
            let twin = (0..feats.len()).all(|i| {
                (det.features[i].center - feats[feats.len() - 1 - i].center).norm() < 1e-9
            });
            assert!(direct || twin);
        }
    }

    #[test]
    fn detect_fails_on_scatter_and_incomplete() {
        let spec = PatternSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let scatter: Vec<CircleFeature> = (0..10)
            .map(|_| {
                feature_at(Vector2::new(
                    rng.random_range(0.0..340.0),
                    rng.random_range(0.0..250.0),
                ))
            })
            .collect();
        assert!(matches!(
            detect_grid(&scatter, &spec, 3.0, None),
            Err(GridFailure::TooFewFeatures { .. })
        ));

        let h = random_homography(&mut rng);
        let mut feats = project_board(&spec, &h);
        feats.remove(30);
        feats.remove(7);
        assert!(detect_grid(&feats, &spec, 3.0, None).is_err());
    }

    #[test]
    fn detect_invariant_to_feature_order() {
        let spec = PatternSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = random_homography(&mut rng);
        let feats = project_board(&spec, &h);
        let det_a = detect_grid(&feats, &spec, 3.0, None).unwrap();
        let mut shuffled = feats.clone();
        shuffled.shuffle(&mut rng);
        let det_b = detect_grid(&shuffled, &spec, 3.0, None).unwrap();
        for (fa, fb) in det_a.features.iter().zip(det_b.features.iter()) {
            assert!((fa.center - fb.center).norm() < 1e-9);
        }
    }

    #[test]
    fn previous_frame_fixes_orientation() {
        let spec = PatternSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let h = random_homography(&mut rng);
        let feats = project_board(&spec, &h);
        let first = detect_grid(&feats, &spec, 3.0, None).unwrap();
        let second = detect_grid(&feats, &spec, 3.0, Some(&first)).unwrap();
        for (fa, fb) in first.features.iter().zip(second.features.iter()) {
            assert!((fa.center - fb.center).norm() < 1e-9);
        }
    }

    #[test]
    fn reprojection_via_fitted_homography_stays_in_tolerance() {
        let spec = PatternSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let h = random_homography(&mut rng);
        let mut feats = project_board(&spec, &h);
        for f in &mut feats {
            f.center += Vector2::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
        }
        let det = detect_grid(&feats, &spec, 3.0, None).unwrap();
        let board = spec.board_points();
        for (i, bp) in board.iter().enumerate() {
            let proj = apply_homography(&det.homography, &Vector2::new(bp.x, bp.y));
            assert!((proj - det.features[i].center).norm() <= 3.0);
        }
    }

    #[test]
    fn orientation_check_examples() {
        let spec = PatternSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let h = random_homography(&mut rng);
        let feats = project_board(&spec, &h);
        let det = detect_grid(&feats, &spec, 3.0, None).unwrap();
        assert!(orientation_consistency_check(&det, &det, 0.01, 3.0));

        // rotate all centers by 90 degrees about the image center
        let rot = |f: &CircleFeature| {
            let c = Vector2::new(170.0, 130.0);
            let d = f.center - c;
            feature_at(c + Vector2::new(-d.y, d.x))
        };
        let det_rot = PatternDetection {
            features: det.features.iter().map(rot).collect(),
            homography: det.homography,
            max_error_px: 0.0,
            cols: spec.cols,
        };
        // 90 deg in 0.1 s = 15.7 rad/s > 3
        assert!(!orientation_consistency_check(&det_rot, &det, 0.1, 3.0));

        // 10 degrees over 0.2 s = 0.87 rad/s < 3
        let small = |f: &CircleFeature| {
            let c = Vector2::new(170.0, 130.0);
            let d = f.center - c;
            let (s, co) = (10.0f64.to_radians().sin(), 10.0f64.to_radians().cos());
            feature_at(c + Vector2::new(co * d.x - s * d.y, s * d.x + co * d.y))
        };
        let det_small = PatternDetection {
            features: det.features.iter().map(small).collect(),
            homography: det.homography,
            max_error_px: 0.0,
            cols: spec.cols,
        };
        assert!(orientation_consistency_check(&det_small, &det, 0.2, 3.0));
    }

    #[test]
    fn mirrored_input_yields_mirrored_or_failure_never_partial() {
        let spec = PatternSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let h = random_homography(&mut rng);
        let mut feats = project_board(&spec, &h);
        for f in &mut feats {
            f.center.x = 400.0 - f.center.x;
        }
        match detect_grid(&feats, &spec, 3.0, None) {
            Ok(det) => {
                assert_eq!(det.features.len(), spec.circle_count());
                assert!(det.max_error_px <= 3.0);
            }
            Err(_) => {}
        }
    }
}
