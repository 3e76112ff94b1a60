//! Shared geometric primitives: quaternion/rotation conversions, rigid poses,
//! planar homography estimation and point-set utilities.
//!
//! Quaternions are stored as `[x, y, z, w]` to match the trajectory file layout.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3, Vector4};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("need at least {needed} correspondences, got {got}")]
    NotEnoughPoints { needed: usize, got: usize },
    #[error("degenerate point configuration: {0}")]
    Degenerate(&'static str),
}

/// Rotation matrix of a unit quaternion `[x, y, z, w]`.
pub fn quat_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let (x, y, z, w) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion `[x, y, z, w]` of a rotation matrix, `w >= 0` canonical form.
pub fn rotation_to_quat(r: &Matrix3<f64>) -> Vector4<f64> {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let mut q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        Vector4::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
            0.25 * s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(2, 1)] - r[(1, 2)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Vector4::new(
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    };
    if q[3] < 0.0 {
        q = -q;
    }
    q.normalize()
}

/// Rotate `v` by the unit quaternion `q = [x, y, z, w]`.
pub fn quat_rotate(q: &Vector4<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let u = Vector3::new(q[0], q[1], q[2]);
    let w = q[3];
    let uv = u.cross(v);
    v + 2.0 * w * uv + 2.0 * u.cross(&uv)
}

/// Relative rotation angle between two unit quaternions, in radians.
pub fn quat_angle_between(a: &Vector4<f64>, b: &Vector4<f64>) -> f64 {
    let dot = a.dot(b).abs().min(1.0);
    2.0 * dot.acos()
}

/// Rigid camera pose: rotation `q` and position `t` mapping camera-frame
/// points into the pattern (world) frame, `x_w = R(q) x_c + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Unit quaternion `[x, y, z, w]`, camera-to-world.
    pub q: Vector4<f64>,
    /// Camera position in the world frame (meters).
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn new(q: Vector4<f64>, t: Vector3<f64>) -> Self {
        Self {
            q: q.normalize(),
            t,
        }
    }

    pub fn identity() -> Self {
        Self {
            q: Vector4::new(0.0, 0.0, 0.0, 1.0),
            t: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_rotation(&self.q)
    }

    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        quat_rotate(&self.q, p_cam) + self.t
    }

    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        let conj = Vector4::new(-self.q[0], -self.q[1], -self.q[2], self.q[3]);
        quat_rotate(&conj, &(p_world - self.t))
    }

    /// From a world-to-camera rotation/translation pair (`x_c = R x_w + t`).
    pub fn from_world_to_camera(r_wc: &Matrix3<f64>, t_wc: &Vector3<f64>) -> Self {
        let r_cw = r_wc.transpose();
        Self {
            q: rotation_to_quat(&r_cw),
            t: -r_cw * t_wc,
        }
    }
}

/// Indices of the convex hull of `points`, counter-clockwise, collinear
/// points dropped. Andrew's monotone chain.
pub fn convex_hull(points: &[Vector2<f64>]) -> Vec<usize> {
    let n = points.len();
    if n < 3 {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        (points[a].x, points[a].y)
            .partial_cmp(&(points[b].x, points[b].y))
            .unwrap()
    });
    let cross = |o: usize, a: usize, b: usize| -> f64 {
        let oa = points[a] - points[o];
        let ob = points[b] - points[o];
        oa.x * ob.y - oa.y * ob.x
    };
    let mut hull: Vec<usize> = Vec::with_capacity(2 * n);
    for &i in &idx {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], i) <= 0.0 {
            hull.pop();
        }
        hull.push(i);
    }
    let lower_len = hull.len() + 1;
    for &i in idx.iter().rev() {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], i) <= 0.0
        {
            hull.pop();
        }
        hull.push(i);
    }
    hull.pop();
    hull
}

/// Direct linear transform homography `dst ~ H src` with Hartley normalization.
///
/// Returns the unscaled 3x3 matrix (unit Frobenius norm, sign unspecified).
pub fn dlt_homography(
    src: &[Vector2<f64>],
    dst: &[Vector2<f64>],
) -> Result<Matrix3<f64>, GeometryError> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(GeometryError::NotEnoughPoints { needed: 4, got: n });
    }
    let (ts, src_n) = normalize_points(src)?;
    let (td, dst_n) = normalize_points(dst)?;

    // at least 9 rows so the thin SVD carries the full right-singular basis
    let mut a = DMatrix::<f64>::zeros((2 * n).max(9), 9);
    for i in 0..n {
        let (x, y) = (src_n[i].x, src_n[i].y);
        let (u, v) = (dst_n[i].x, dst_n[i].y);
        let r0 = 2 * i;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        let r1 = r0 + 1;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("svd requested v_t");
    let sing = &svd.singular_values;
    // rank 8 is required for a solution unique up to scale
    if sing[7] < 1e-10 * sing[0].max(1e-300) {
        return Err(GeometryError::Degenerate("collinear correspondences"));
    }
    let h = vt.row(8);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    // Undo normalization: H = Td^-1 * Hn * Ts
    let td_inv = td.try_inverse().expect("normalization transform invertible");
    let hm = td_inv * hn * ts;
    let norm = hm.norm();
    if !norm.is_finite() || norm < 1e-300 {
        return Err(GeometryError::Degenerate("homography collapse"));
    }
    Ok(hm / norm)
}

fn normalize_points(
    pts: &[Vector2<f64>],
) -> Result<(Matrix3<f64>, Vec<Vector2<f64>>), GeometryError> {
    let n = pts.len() as f64;
    let centroid = pts.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = pts.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return Err(GeometryError::Degenerate("coincident points"));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    );
    let out = pts
        .iter()
        .map(|p| Vector2::new(s * (p.x - centroid.x), s * (p.y - centroid.y)))
        .collect();
    Ok((t, out))
}

/// Apply a homography to a 2-D point.
pub fn apply_homography(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let w = h[(2, 0)] * p.x + h[(2, 1)] * p.y + h[(2, 2)];
    Vector2::new(
        (h[(0, 0)] * p.x + h[(0, 1)] * p.y + h[(0, 2)]) / w,
        (h[(1, 0)] * p.x + h[(1, 1)] * p.y + h[(1, 2)]) / w,
    )
}

/// Least-squares rigid alignment `dst ~ R src + t` (Umeyama without scale).
pub fn rigid_align(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<(Matrix3<f64>, Vector3<f64>), GeometryError> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return Err(GeometryError::NotEnoughPoints { needed: 3, got: n });
    }
    let nf = n as f64;
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p) / nf;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p) / nf;
    let mut cov = Matrix3::zeros();
    for i in 0..n {
        cov += (dst[i] - cd) * (src[i] - cs).transpose();
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let t = cd - r * cs;
    Ok((r, t))
}

/// Lower median: element at index `(n-1)/2` of the sorted values.
pub fn lower_median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[(values.len() - 1) / 2]
}

/// Median absolute deviation around the (lower) median.
pub fn median_abs_deviation(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    let med = lower_median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    lower_median(&mut dev)
}
