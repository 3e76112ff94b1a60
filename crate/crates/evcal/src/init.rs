//! Classical initialization: plane-induced homographies, closed-form
//! intrinsics, planar PnP inside RANSAC, velocity gating and feature
//! cross-validation against reprojected pattern circles.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::Intrinsics;
use crate::event::{EventWindow, SensorGeometry};
use crate::features::{kasa_fit, CircleFeature};
use crate::geometry::{dlt_homography, quat_angle_between, GeometryError, Pose};
use crate::pattern::PatternDetection;

#[derive(Debug, Error)]
pub enum InitError {
    #[error("need at least {needed} homographies from distinct poses, got {got}")]
    NotEnoughViews { needed: usize, got: usize },
    #[error("ill-conditioned intrinsic system (singular value ratio {ratio:.2e})")]
    Conditioning { ratio: f64 },
    #[error("intrinsic extraction produced invalid values")]
    InvalidExtraction,
    #[error("too few PnP inliers: {got} < {needed}")]
    TooFewInliers { got: usize, needed: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Normalized-DLT homography with `H[2][2]` scaled to one.
pub fn estimate_homography(
    board_points: &[Vector2<f64>],
    image_points: &[Vector2<f64>],
) -> Result<Matrix3<f64>, InitError> {
    let h = dlt_homography(board_points, image_points)?;
    let w = h[(2, 2)];
    if w.abs() < 1e-12 {
        return Err(InitError::Geometry(GeometryError::Degenerate(
            "homography has vanishing scale element",
        )));
    }
    Ok(h / w)
}

fn zhang_v_row(h: &Matrix3<f64>, i: usize, j: usize) -> [f64; 6] {
    let hi = h.column(i);
    let hj = h.column(j);
    [
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ]
}

/// Closed-form intrinsics from plane-induced homographies via the
/// image-of-the-absolute-conic constraints, skew fixed to zero.
pub fn zhang_intrinsics(homographies: &[Matrix3<f64>]) -> Result<(f64, f64, f64, f64), InitError> {
    let n = homographies.len();
    if n < 3 {
        return Err(InitError::NotEnoughViews { needed: 3, got: n });
    }
    let mut v = DMatrix::<f64>::zeros(2 * n + 1, 6);
    for (idx, h) in homographies.iter().enumerate() {
        let h = h / h.norm();
        let v12 = zhang_v_row(&h, 0, 1);
        let v11 = zhang_v_row(&h, 0, 0);
        let v22 = zhang_v_row(&h, 1, 1);
        for c in 0..6 {
            v[(2 * idx, c)] = v12[c];
            v[(2 * idx + 1, c)] = v11[c] - v22[c];
        }
    }
    // skew-free constraint: B12 = 0
    v[(2 * n, 1)] = 1.0;

    let svd = v.svd(false, true);
    let sv = &svd.singular_values;
    let ratio = sv[4] / sv[0].max(1e-300);
    if !(ratio > 1e-10) {
        return Err(InitError::Conditioning { ratio });
    }
    let vt = svd.v_t.expect("svd v_t");
    let mut b: Vec<f64> = (0..6).map(|c| vt[(5, c)]).collect();
    if b[0] < 0.0 {
        for x in &mut b {
            *x = -*x;
        }
    }
    let (b11, b12, b22, b13, b23, b33) = (b[0], b[1], b[2], b[3], b[4], b[5]);
    let den = b11 * b22 - b12 * b12;
    if !(den.abs() > 1e-300 && b11.abs() > 1e-300) {
        return Err(InitError::InvalidExtraction);
    }
    let v0 = (b12 * b13 - b11 * b23) / den;
    let lambda = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11;
    let fx2 = lambda / b11;
    let fy2 = lambda * b11 / den;
    if !(fx2 > 0.0 && fy2 > 0.0) {
        return Err(InitError::InvalidExtraction);
    }
    let fx = fx2.sqrt();
    let fy = fy2.sqrt();
    let skew = -b12 * fx2 * fy / lambda;
    let u0 = skew * v0 / fy - b13 * fx2 / lambda;
    if !(fx.is_finite() && fy.is_finite() && u0.is_finite() && v0.is_finite()) {
        return Err(InitError::InvalidExtraction);
    }
    Ok((fx, fy, u0, v0))
}

/// Linear least-squares forward radial distortion (two coefficients) given
/// pinhole intrinsics and per-frame poses: `distorted = ideal * (1 + c1 r^2 +
/// c2 r^4)` on the normalized plane. Feeds the inverse-model seed.
pub fn estimate_forward_distortion(
    observations: &[(Vector2<f64>, Vector3<f64>, Pose)],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
) -> (f64, f64) {
    let mut ata = [[0.0f64; 2]; 2];
    let mut atb = [0.0f64; 2];
    for (pixel, board, pose) in observations {
        let x_cam = pose.to_camera(board);
        if x_cam.z <= 1e-9 {
            continue;
        }
        let xu = x_cam.x / x_cam.z;
        let yu = x_cam.y / x_cam.z;
        let r2 = xu * xu + yu * yu;
        let r4 = r2 * r2;
        let xd = (pixel.x - cx) / fx;
        let yd = (pixel.y - cy) / fy;
        for (u, d) in [(xu, xd), (yu, yd)] {
            let row = [u * r2, u * r4];
            let rhs = d - u;
            for i in 0..2 {
                for j in 0..2 {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i] += row[i] * rhs;
            }
        }
    }
    let det = ata[0][0] * ata[1][1] - ata[0][1] * ata[1][0];
    if det.abs() < 1e-18 {
        return (0.0, 0.0);
    }
    let c1 = (atb[0] * ata[1][1] - atb[1] * ata[0][1]) / det;
    let c2 = (ata[0][0] * atb[1] - ata[1][0] * atb[0]) / det;
    (c1, c2)
}

/// Pose-free radial bootstrap: find the inverse radial coefficient (with a
/// nominal focal and the image center as anchor) that makes the images of the
/// pattern's collinear columns straightest.
///
/// Returns the coefficient for `beta = 1 + c * (r / f_nom)^2` applied around
/// `center`. Homographies keep lines straight, so residual curvature of the
/// 9-point columns is a distortion signal that needs neither intrinsics nor
/// poses.
pub fn estimate_radial_straightness(
    frames: &[Vec<Vector2<f64>>],
    columns: &[Vec<usize>],
    center: Vector2<f64>,
    f_nom: f64,
) -> f64 {
    let cost = |c: f64| -> f64 {
        let mut acc = 0.0;
        for features in frames {
            for col in columns {
                if col.len() < 3 {
                    continue;
                }
                let pts: Vec<Vector2<f64>> = col
                    .iter()
                    .map(|&i| {
                        let d = features[i] - center;
                        let alpha2 = d.norm_squared() / (f_nom * f_nom);
                        let beta = 1.0 + c * alpha2;
                        center + d * beta
                    })
                    .collect();
                let n = pts.len() as f64;
                let centroid = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
                let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
                for p in &pts {
                    let d = p - centroid;
                    sxx += d.x * d.x;
                    sxy += d.x * d.y;
                    syy += d.y * d.y;
                }
                let tr = sxx + syy;
                let det = sxx * syy - sxy * sxy;
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                let lmax = tr / 2.0 + disc;
                let lmin = (tr / 2.0 - disc).max(0.0);
                if lmax > 1e-12 {
                    acc += lmin / lmax; // scale-free straightness defect
                }
            }
        }
        acc
    };
    // coarse grid, then a parabolic polish around the best cell
    let lo = -0.85;
    let hi = 0.85;
    let n_grid = 69;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..=n_grid {
        let c = lo + (hi - lo) * i as f64 / n_grid as f64;
        let v = cost(c);
        if v < best.0 {
            best = (v, c);
        }
    }
    let h = (hi - lo) / n_grid as f64;
    let (mut a, mut b, mut w) = (best.1 - h, best.1, best.1 + h);
    for _ in 0..40 {
        let m1 = a + (b - a) * 0.5;
        let m2 = b + (w - b) * 0.5;
        let (fa, fb, fw) = (cost(m1), cost(b), cost(m2));
        if fa < fb && fa < fw {
            w = b;
            b = m1;
        } else if fw < fb && fw < fa {
            a = b;
            b = m2;
        } else {
            a = m1;
            w = m2;
        }
        if w - a < 1e-6 {
            break;
        }
    }
    b
}

/// RANSAC parameters for the planar pose solver.
#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_tol_px: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_tol_px: 2.0,
            min_inlier_fraction: 0.6,
            seed: 7,
        }
    }
}

/// Decompose a board-to-normalized-plane homography into a world-to-camera
/// rotation and translation; the sign is fixed so the board sits in front of
/// the camera.
fn pose_from_normalized_homography(
    h: &Matrix3<f64>,
    board_centroid: &Vector3<f64>,
) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();
    let n1 = h1.norm();
    let n2 = h2.norm();
    if n1 < 1e-12 || n2 < 1e-12 {
        return None;
    }
    let mut lambda = 2.0 / (n1 + n2);
    // sign: board centroid must have positive camera depth
    let r3 = h1.cross(&h2);
    let z = lambda
        * (r3[0] * board_centroid.x * lambda + r3[1] * board_centroid.y * lambda + h3[2]);
    let _ = z;
    let mut r = Matrix3::from_columns(&[lambda * h1, lambda * h2, lambda * lambda * r3]);
    let mut t = lambda * h3;
    let depth = (r * board_centroid + t).z;
    if depth < 0.0 {
        lambda = -lambda;
        r = Matrix3::from_columns(&[lambda * h1, lambda * h2, lambda * lambda * r3]);
        t = lambda * h3;
    }
    // orthonormalize
    let svd = r.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Some((u * d * vt, t))
}

fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
    let angle = omega.norm();
    if angle < 1e-12 {
        let k = skew(omega);
        return Matrix3::identity() + k;
    }
    let axis = omega / angle;
    let k = skew(&axis);
    Matrix3::identity() + angle.sin() * k + (1.0 - angle.cos()) * (k * k)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn reproject_error(
    k: &Intrinsics,
    r_wc: &Matrix3<f64>,
    t_wc: &Vector3<f64>,
    board: &Vector3<f64>,
    observed: &Vector2<f64>,
) -> Option<f64> {
    let x_cam = r_wc * board + t_wc;
    if x_cam.z <= 1e-9 {
        return None;
    }
    let px = k.project(x_cam).ok()?;
    Some((px - observed).norm())
}

/// Gauss-Newton pose polish on the inlier set, numeric Jacobians over a
/// rotation/translation increment.
fn refine_pose(
    k: &Intrinsics,
    corr: &[(Vector3<f64>, Vector2<f64>)],
    mut r_wc: Matrix3<f64>,
    mut t_wc: Vector3<f64>,
    iterations: usize,
) -> (Matrix3<f64>, Vector3<f64>) {
    let eval = |r: &Matrix3<f64>, t: &Vector3<f64>| -> Option<(DMatrix<f64>, f64)> {
        let mut res = DMatrix::<f64>::zeros(2 * corr.len(), 1);
        let mut cost = 0.0;
        for (i, (b, obs)) in corr.iter().enumerate() {
            let x_cam = r * b + t;
            if x_cam.z <= 1e-9 {
                return None;
            }
            let px = k.project(x_cam).ok()?;
            res[(2 * i, 0)] = px.x - obs.x;
            res[(2 * i + 1, 0)] = px.y - obs.y;
            cost += (px - obs).norm_squared();
        }
        Some((res, cost))
    };
    let Some((_, mut cost)) = eval(&r_wc, &t_wc) else {
        return (r_wc, t_wc);
    };
    for _ in 0..iterations {
        let h = 1e-6;
        let mut jac = DMatrix::<f64>::zeros(2 * corr.len(), 6);
        let Some((res, _)) = eval(&r_wc, &t_wc) else {
            break;
        };
        let mut ok = true;
        for pi in 0..6 {
            let mut delta = Vector6::<f64>::zeros();
            delta[pi] = h;
            let (rp, tp) = apply_increment(&r_wc, &t_wc, &delta);
            delta[pi] = -h;
            let (rm, tm) = apply_increment(&r_wc, &t_wc, &delta);
            let (Some((res_p, _)), Some((res_m, _))) = (eval(&rp, &tp), eval(&rm, &tm)) else {
                ok = false;
                break;
            };
            for row in 0..2 * corr.len() {
                jac[(row, pi)] = (res_p[(row, 0)] - res_m[(row, 0)]) / (2.0 * h);
            }
        }
        if !ok {
            break;
        }
        let jt = jac.transpose();
        let mut jtj: Matrix6<f64> = Matrix6::from_iterator((&jt * &jac).iter().copied());
        for i in 0..6 {
            jtj[(i, i)] += 1e-12;
        }
        let jtr = &jt * &res;
        let rhs = Vector6::from_iterator(jtr.iter().copied());
        let Some(step) = jtj.lu().solve(&(-rhs)) else {
            break;
        };
        let (r_new, t_new) = apply_increment(&r_wc, &t_wc, &step);
        match eval(&r_new, &t_new) {
            Some((_, c_new)) if c_new <= cost => {
                let converged = cost - c_new <= 1e-16 * cost.max(1e-30);
                r_wc = r_new;
                t_wc = t_new;
                cost = c_new;
                if converged {
                    break;
                }
            }
            _ => break,
        }
    }
    (r_wc, t_wc)
}

fn apply_increment(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    delta: &Vector6<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    let omega = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    (rodrigues(&omega) * r, t + dt)
}

/// Planar PnP inside RANSAC. Returns the camera-to-world pose and the inlier
/// pattern indices, or an error when consensus is too small.
///
/// The minimal solver is a 4-point homography on normalized image coordinates
/// followed by planar decomposition; the winner is polished on its inliers
/// with an inlier/pose fixpoint loop so the result does not depend on the
/// correspondence order.
pub fn pnp_ransac(
    detection: &PatternDetection,
    board_points: &[Vector3<f64>],
    k: &Intrinsics,
    params: &RansacParams,
) -> Result<(Pose, Vec<usize>), InitError> {
    let n = detection.features.len();
    if n < 4 {
        return Err(InitError::TooFewInliers { got: n, needed: 4 });
    }
    let board2: Vec<Vector2<f64>> = board_points.iter().map(|p| Vector2::new(p.x, p.y)).collect();
    let centroid = board_points.iter().sum::<Vector3<f64>>() / n as f64;
    let observed: Vec<Vector2<f64>> = detection.features.iter().map(|f| f.center).collect();
    let normalized: Vec<Vector2<f64>> = observed
        .iter()
        .map(|m| {
            let v = k.normalize(*m);
            Vector2::new(v.x, v.y)
        })
        .collect();

    let min_inliers = ((params.min_inlier_fraction * n as f64).ceil() as usize).max(4);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, f64, Matrix3<f64>, Vector3<f64>)> = None;

    for _ in 0..params.iterations {
        let mut sample = [0usize; 4];
        for si in 0..4 {
            loop {
                let cand = rng.random_range(0..n);
                if !sample[..si].contains(&cand) {
                    sample[si] = cand;
                    break;
                }
            }
        }
        let src: Vec<Vector2<f64>> = sample.iter().map(|&i| board2[i]).collect();
        let dst: Vec<Vector2<f64>> = sample.iter().map(|&i| normalized[i]).collect();
        let Ok(h) = dlt_homography(&src, &dst) else {
            continue;
        };
        let Some((r, t)) = pose_from_normalized_homography(&h, &centroid) else {
            continue;
        };
        let mut count = 0usize;
        let mut err_sum = 0.0;
        for i in 0..n {
            if let Some(e) = reproject_error(k, &r, &t, &board_points[i], &observed[i]) {
                if e <= params.inlier_tol_px {
                    count += 1;
                    err_sum += e;
                }
            }
        }
        let better = match &best {
            None => count >= 4,
            Some((bc, be, _, _)) => count > *bc || (count == *bc && err_sum < *be),
        };
        if better {
            best = Some((count, err_sum, r, t));
        }
    }

    let (count, _, mut r_wc, mut t_wc) = best.ok_or(InitError::TooFewInliers {
        got: 0,
        needed: min_inliers,
    })?;
    if count < min_inliers {
        return Err(InitError::TooFewInliers {
            got: count,
            needed: min_inliers,
        });
    }

    // pose/inlier fixpoint; converges in a couple of rounds
    let mut inliers: Vec<usize> = Vec::new();
    for _ in 0..3 {
        let mut new_inliers = Vec::new();
        for i in 0..n {
            if let Some(e) = reproject_error(k, &r_wc, &t_wc, &board_points[i], &observed[i]) {
                if e <= params.inlier_tol_px {
                    new_inliers.push(i);
                }
            }
        }
        if new_inliers.len() < 4 {
            break;
        }
        let corr: Vec<(Vector3<f64>, Vector2<f64>)> = new_inliers
            .iter()
            .map(|&i| (board_points[i], observed[i]))
            .collect();
        let (r_new, t_new) = refine_pose(k, &corr, r_wc, t_wc, 15);
        let stable = new_inliers == inliers;
        r_wc = r_new;
        t_wc = t_new;
        inliers = new_inliers;
        if stable {
            break;
        }
    }
    if inliers.len() < min_inliers {
        return Err(InitError::TooFewInliers {
            got: inliers.len(),
            needed: min_inliers,
        });
    }
    Ok((Pose::from_world_to_camera(&r_wc, &t_wc), inliers))
}

/// Drop frames whose finite-difference velocity relative to the last retained
/// frame exceeds either bound. Returns a keep flag per frame.
pub fn velocity_filter(
    times_sec: &[f64],
    poses: &[Pose],
    max_trans_vel: f64,
    max_rot_vel: f64,
) -> Vec<bool> {
    assert_eq!(times_sec.len(), poses.len());
    let mut keep = vec![false; poses.len()];
    let mut last: Option<usize> = None;
    for i in 0..poses.len() {
        let ok = match last {
            None => true,
            Some(j) => {
                let dt = times_sec[i] - times_sec[j];
                if dt <= 0.0 {
                    false
                } else {
                    let tv = (poses[i].t - poses[j].t).norm() / dt;
                    let rv = quat_angle_between(&poses[i].q, &poses[j].q) / dt;
                    tv <= max_trans_vel && rv <= max_rot_vel
                }
            }
        };
        if ok {
            keep[i] = true;
            last = Some(i);
        }
    }
    keep
}

/// Cross-validation tolerances.
#[derive(Debug, Clone, Copy)]
pub struct CrossValidationParams {
    /// Events are assigned to a reprojected circle within this factor of its
    /// projected radius.
    pub assign_radius_factor: f64,
    /// Allowed center shift between refit and reprojected circle, as a
    /// fraction of the projected radius.
    pub tol_center: f64,
    /// Allowed relative radius mismatch.
    pub tol_radius: f64,
    /// Frames with fewer surviving features are dropped.
    pub min_features: usize,
    /// Minimum events to refit a circle.
    pub min_events_per_circle: usize,
}

impl Default for CrossValidationParams {
    fn default() -> Self {
        Self {
            assign_radius_factor: 1.5,
            tol_center: 0.5,
            tol_radius: 0.4,
            min_features: 12,
            min_events_per_circle: 6,
        }
    }
}

/// Outcome of cross-validating one reference frame.
#[derive(Debug, Clone)]
pub struct RectifiedFrame {
    /// Surviving (pattern index, refit circle) pairs, ascending pattern index.
    pub features: Vec<(usize, CircleFeature)>,
    /// Pattern-circle assignment per window event.
    pub event_circle: Vec<Option<u16>>,
    /// False when fewer than `min_features` features survived.
    pub kept: bool,
}

/// Reproject the pattern through the initial pose, re-assign the window's
/// events to the nearest reprojected circle, refit and compare.
pub fn cross_validate_features(
    window: &EventWindow,
    pose: &Pose,
    k: &Intrinsics,
    board_points: &[Vector3<f64>],
    circle_radius_m: f64,
    sensor: SensorGeometry,
    params: &CrossValidationParams,
) -> RectifiedFrame {
    let n_circles = board_points.len();
    // 1. reproject circles; drop those outside the image
    let mut proj: Vec<Option<(Vector2<f64>, f64)>> = vec![None; n_circles];
    for (s, board) in board_points.iter().enumerate() {
        let x_cam = pose.to_camera(board);
        if x_cam.z <= 1e-9 {
            continue;
        }
        let Ok(center) = k.project(x_cam) else {
            continue;
        };
        if !sensor.contains(center.x, center.y) {
            continue;
        }
        let mut radius_acc = 0.0;
        let mut radius_n = 0;
        for d in [
            Vector3::new(circle_radius_m, 0.0, 0.0),
            Vector3::new(-circle_radius_m, 0.0, 0.0),
            Vector3::new(0.0, circle_radius_m, 0.0),
            Vector3::new(0.0, -circle_radius_m, 0.0),
        ] {
            let bc = pose.to_camera(&(board + d));
            if bc.z <= 1e-9 {
                continue;
            }
            if let Ok(p) = k.project(bc) {
                radius_acc += (p - center).norm();
                radius_n += 1;
            }
        }
        if radius_n < 4 {
            continue;
        }
        proj[s] = Some((center, radius_acc / radius_n as f64));
    }

    // 2. re-assign events to the nearest reprojected circle center
    let mut event_circle: Vec<Option<u16>> = vec![None; window.events.len()];
    let mut circle_events: Vec<Vec<usize>> = vec![Vec::new(); n_circles];
    for (ei, e) in window.events.iter().enumerate() {
        let p = Vector2::new(e.x, e.y);
        let mut best: Option<(f64, usize)> = None;
        for (s, pr) in proj.iter().enumerate() {
            let Some((center, radius)) = pr else { continue };
            let d = (p - center).norm();
            if d <= params.assign_radius_factor * radius {
                let better = best.map(|(bd, _)| d < bd).unwrap_or(true);
                if better {
                    best = Some((d, s));
                }
            }
        }
        if let Some((_, s)) = best {
            event_circle[ei] = Some(s as u16);
            circle_events[s].push(ei);
        }
    }

    // 3+4. refit each circle and compare against its reprojection
    let mut features = Vec::new();
    let mut dropped = vec![false; n_circles];
    for s in 0..n_circles {
        let Some((center_proj, radius_proj)) = proj[s] else {
            dropped[s] = true;
            continue;
        };
        if circle_events[s].len() < params.min_events_per_circle {
            dropped[s] = true;
            continue;
        }
        let pts: Vec<Vector2<f64>> = circle_events[s]
            .iter()
            .map(|&ei| Vector2::new(window.events[ei].x, window.events[ei].y))
            .collect();
        let Ok((center_fit, radius_fit, err)) = kasa_fit(&pts) else {
            dropped[s] = true;
            continue;
        };
        let center_ok = (center_fit - center_proj).norm() <= params.tol_center * radius_proj;
        let ratio = radius_fit / radius_proj;
        let radius_ok = ratio >= 1.0 - params.tol_radius && ratio <= 1.0 + params.tol_radius;
        if !(center_ok && radius_ok) {
            dropped[s] = true;
            continue;
        }
        features.push((
            s,
            CircleFeature {
                center: center_fit,
                radius: radius_fit,
                fit_error: err,
                pos_cluster: 0,
                neg_cluster: 0,
            },
        ));
    }
    for slot in event_circle.iter_mut() {
        if let Some(s) = *slot {
            if dropped[s as usize] {
                *slot = None;
            }
        }
    }
    let kept = features.len() >= params.min_features;
    RectifiedFrame {
        features,
        event_circle,
        kept,
    }
}
