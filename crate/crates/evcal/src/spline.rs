//! Non-uniform B-spline machinery: basis evaluation on clamped knot vectors,
//! 7-D (position + quaternion) curve evaluation, temporal segment grouping and
//! least-squares global approximation for initialization.
//!
//! Quaternion control points are raw 4-vectors; the evaluated quaternion is
//! normalized, which keeps the optimizer unconstrained.

use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("parameter {u} outside spline domain [{lo}, {hi}]")]
    OutOfDomain { u: f64, lo: f64, hi: f64 },
    #[error("quaternion basis combination collapsed (norm {norm:.2e})")]
    DegenerateQuaternion { norm: f64 },
    #[error("approximation normal equations are rank deficient")]
    Conditioning,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no trajectory segment survives grouping")]
    NoSegments,
}

/// Clamped non-uniform knot vector for degree-`p` splines.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    pub degree: usize,
    /// Non-decreasing knots with (p+1)-fold repeated end knots.
    pub knots: Vec<f64>,
}

impl KnotVector {
    /// Build from explicit interior knots and a domain.
    pub fn clamped(
        degree: usize,
        t_first: f64,
        t_last: f64,
        interior: &[f64],
    ) -> Result<Self, SplineError> {
        if !(t_first < t_last) {
            return Err(SplineError::InvalidInput(
                "empty spline domain".into(),
            ));
        }
        let mut knots = Vec::with_capacity(2 * (degree + 1) + interior.len());
        knots.extend(std::iter::repeat(t_first).take(degree + 1));
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat(t_last).take(degree + 1));
        let kv = Self { degree, knots };
        kv.validate()?;
        Ok(kv)
    }

    pub fn validate(&self) -> Result<(), SplineError> {
        let p = self.degree;
        let m = self.knots.len();
        if m < 2 * (p + 1) {
            return Err(SplineError::InvalidInput("knot vector too short".into()));
        }
        let t_first = self.knots[0];
        let t_last = self.knots[m - 1];
        for i in 0..=p {
            if self.knots[i] != t_first || self.knots[m - 1 - i] != t_last {
                return Err(SplineError::InvalidInput(
                    "end knots must be (p+1)-fold clamped".into(),
                ));
            }
        }
        for w in self.knots.windows(2) {
            if w[1] < w[0] {
                return Err(SplineError::InvalidInput("knots must be non-decreasing".into()));
            }
        }
        for &u in &self.knots[p + 1..m - p - 1] {
            if !(u > t_first && u < t_last) {
                return Err(SplineError::InvalidInput(
                    "interior knots must lie strictly inside the domain".into(),
                ));
            }
        }
        Ok(())
    }

    /// Number of control points this knot vector supports: |knots| - p - 1.
    pub fn control_count(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn t_first(&self) -> f64 {
        self.knots[0]
    }

    pub fn t_last(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Knot span index k with u in [u_k, u_{k+1}); u = t_last maps to span n.
    pub fn find_span(&self, u: f64) -> Result<usize, SplineError> {
        let n = self.control_count() - 1;
        let p = self.degree;
        if !(u >= self.t_first() && u <= self.t_last()) {
            return Err(SplineError::OutOfDomain {
                u,
                lo: self.t_first(),
                hi: self.t_last(),
            });
        }
        if u >= self.knots[n + 1] {
            return Ok(n);
        }
        let mut lo = p;
        let mut hi = n + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if u < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(lo)
    }

    /// The p+1 non-zero basis values N_{k-p..k, p}(u) for a valid span k.
    ///
    /// Cox-de Boor recursion; the values are non-negative and sum to one.
    pub fn basis_funs(&self, span: usize, u: f64) -> Vec<f64> {
        let p = self.degree;
        let t = &self.knots;
        let mut values = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        values[0] = 1.0;
        for j in 1..=p {
            left[j] = u - t[span + 1 - j];
            right[j] = t[span + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        values
    }

    /// Greville abscissa of control point i: mean of p consecutive knots.
    pub fn greville(&self, i: usize) -> f64 {
        let p = self.degree;
        if p == 0 {
            return self.knots[i];
        }
        self.knots[i + 1..i + 1 + p].iter().sum::<f64>() / p as f64
    }
}

/// 7-D control point: position plus raw quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPoint {
    pub pos: Vector3<f64>,
    pub quat: Vector4<f64>,
}

/// One contiguous trajectory fragment modeled by a 7-D clamped B-spline.
#[derive(Debug, Clone)]
pub struct SplineSegment {
    pub knots: KnotVector,
    pub control_points: Vec<ControlPoint>,
    /// Inclusive range of covered reference frame indices.
    pub frame_range: (usize, usize),
}

impl SplineSegment {
    pub fn t_first(&self) -> f64 {
        self.knots.t_first()
    }

    pub fn t_last(&self) -> f64 {
        self.knots.t_last()
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_first() && t <= self.t_last()
    }

    /// First active control index and the p+1 basis weights at `u`.
    pub fn basis_at(&self, u: f64) -> Result<(usize, Vec<f64>), SplineError> {
        let span = self.knots.find_span(u)?;
        let w = self.knots.basis_funs(span, u);
        Ok((span - self.knots.degree, w))
    }

    /// Evaluate position and unit quaternion at time `u`.
    pub fn evaluate(&self, u: f64) -> Result<(Vector3<f64>, Vector4<f64>), SplineError> {
        let (first, w) = self.basis_at(u)?;
        let mut pos = Vector3::zeros();
        let mut quat = Vector4::zeros();
        for (j, wj) in w.iter().enumerate() {
            let cp = &self.control_points[first + j];
            pos += *wj * cp.pos;
            quat += *wj * cp.quat;
        }
        let norm = quat.norm();
        if norm < 1e-9 {
            return Err(SplineError::DegenerateQuaternion { norm });
        }
        Ok((pos, quat / norm))
    }
}

/// Group time-ordered frames into maximal runs with inter-frame gaps at most
/// `max_gap_sec`; runs shorter than `min_frames` are discarded.
///
/// Returns inclusive index ranges. Erroring when nothing survives keeps an
/// infeasible calibration from proceeding silently.
pub fn group_segments(
    frame_times_sec: &[f64],
    max_gap_sec: f64,
    min_frames: usize,
) -> Result<Vec<(usize, usize)>, SplineError> {
    if frame_times_sec.is_empty() {
        return Err(SplineError::NoSegments);
    }
    let mut runs = Vec::new();
    let mut start = 0usize;
    for i in 1..frame_times_sec.len() {
        if frame_times_sec[i] - frame_times_sec[i - 1] > max_gap_sec {
            runs.push((start, i - 1));
            start = i;
        }
    }
    runs.push((start, frame_times_sec.len() - 1));
    let kept: Vec<(usize, usize)> = runs
        .into_iter()
        .filter(|&(a, b)| b - a + 1 >= min_frames)
        .collect();
    if kept.is_empty() {
        return Err(SplineError::NoSegments);
    }
    Ok(kept)
}

/// One pose sample feeding the global approximation.
#[derive(Debug, Clone, Copy)]
pub struct PoseSample {
    pub t_sec: f64,
    pub pos: Vector3<f64>,
    /// Unit quaternion, hemisphere-aligned with its neighbors.
    pub quat: Vector4<f64>,
}

/// Flip signs so consecutive quaternions have non-negative dot products.
pub fn hemisphere_align(quats: &[Vector4<f64>]) -> Vec<Vector4<f64>> {
    let mut out: Vec<Vector4<f64>> = Vec::with_capacity(quats.len());
    for q in quats {
        let aligned = match out.last() {
            Some(prev) if prev.dot(q) < 0.0 => -*q,
            _ => *q,
        };
        out.push(aligned);
    }
    out
}

/// Interior knots by the parameter-averaging rule, guaranteeing at least one
/// sample per knot span.
fn averaged_interior_knots(times: &[f64], degree: usize, n_ctrl: usize) -> Vec<f64> {
    let m1 = times.len() as f64; // m + 1 samples
    let n = n_ctrl - 1;
    let p = degree;
    let segments = n - p + 1; // number of interior knots + 1
    let d = m1 / segments as f64;
    let mut interior = Vec::with_capacity(n - p);
    for j in 1..=(n - p) {
        let jd = j as f64 * d;
        let i = jd.floor() as usize;
        let alpha = jd - i as f64;
        interior.push((1.0 - alpha) * times[i - 1] + alpha * times[i]);
    }
    interior
}

/// Global least-squares approximation of pose samples by a clamped B-spline.
///
/// End control points are pinned to the first and last samples; the interior
/// ones solve the linear least-squares problem over the remaining samples.
/// The domain may extend beyond the sample range (it is clamped there), which
/// lets a segment cover the full event span of its reference frames.
pub fn approximate_segment(
    samples: &[PoseSample],
    degree: usize,
    n_ctrl: usize,
    domain: (f64, f64),
    frame_range: (usize, usize),
) -> Result<SplineSegment, SplineError> {
    let m1 = samples.len();
    if m1 < 2 {
        return Err(SplineError::InvalidInput("need at least 2 samples".into()));
    }
    if n_ctrl < degree + 1 {
        return Err(SplineError::InvalidInput(format!(
            "need at least {} control points for degree {}",
            degree + 1,
            degree
        )));
    }
    if n_ctrl > m1 {
        return Err(SplineError::InvalidInput(format!(
            "{n_ctrl} control points exceed {m1} samples"
        )));
    }
    for w in samples.windows(2) {
        if !(w[1].t_sec > w[0].t_sec) {
            return Err(SplineError::InvalidInput(
                "sample times must be strictly increasing".into(),
            ));
        }
    }
    let (t_first, t_last) = domain;
    if !(t_first <= samples[0].t_sec && t_last >= samples[m1 - 1].t_sec) {
        return Err(SplineError::InvalidInput(
            "domain must cover the sample range".into(),
        ));
    }

    let times: Vec<f64> = samples.iter().map(|s| s.t_sec).collect();
    let interior = averaged_interior_knots(&times, degree, n_ctrl);
    let knots = KnotVector::clamped(degree, t_first, t_last, &interior)?;
    debug_assert_eq!(knots.control_count(), n_ctrl);

    let d_first = sample_vec7(&samples[0]);
    let d_last = sample_vec7(&samples[m1 - 1]);
    let n_interior = n_ctrl - 2;
    let mut control = vec![[0.0f64; 7]; n_ctrl];
    control[0] = d_first;
    control[n_ctrl - 1] = d_last;

    if n_interior > 0 {
        // rows: interior samples; cols: interior control points
        let rows = m1 - 2;
        let mut n_mat = DMatrix::<f64>::zeros(rows, n_interior);
        let mut rhs = vec![DVector::<f64>::zeros(rows); 7];
        for (row, s) in samples[1..m1 - 1].iter().enumerate() {
            let span = knots.find_span(s.t_sec)?;
            let w = knots.basis_funs(span, s.t_sec);
            let first = span - degree;
            let dj = sample_vec7(s);
            let mut r = dj;
            for (j, wj) in w.iter().enumerate() {
                let ci = first + j;
                if ci == 0 {
                    for k in 0..7 {
                        r[k] -= wj * d_first[k];
                    }
                } else if ci == n_ctrl - 1 {
                    for k in 0..7 {
                        r[k] -= wj * d_last[k];
                    }
                } else {
                    n_mat[(row, ci - 1)] = *wj;
                }
            }
            for k in 0..7 {
                rhs[k][row] = r[k];
            }
        }
        let nt = n_mat.transpose();
        let ntn = &nt * &n_mat;
        let chol = ntn.cholesky().ok_or(SplineError::Conditioning)?;
        for k in 0..7 {
            let sol = chol.solve(&(&nt * &rhs[k]));
            for i in 0..n_interior {
                control[i + 1][k] = sol[i];
            }
        }
    }

    Ok(SplineSegment {
        knots,
        control_points: control
            .into_iter()
            .map(|c| ControlPoint {
                pos: Vector3::new(c[0], c[1], c[2]),
                quat: Vector4::new(c[3], c[4], c[5], c[6]),
            })
            .collect(),
        frame_range,
    })
}

fn sample_vec7(s: &PoseSample) -> [f64; 7] {
    [
        s.pos[0], s.pos[1], s.pos[2], s.quat[0], s.quat[1], s.quat[2], s.quat[3],
    ]
}

/// RMS of the approximation objective over the given samples.
pub fn approximation_rms(seg: &SplineSegment, samples: &[PoseSample]) -> f64 {
    let mut ss = 0.0;
    for s in samples {
        let (pos, _) = seg.evaluate(s.t_sec).expect("sample inside domain");
        // raw 7-vector distance, matching the least-squares objective
        let (first, w) = seg.basis_at(s.t_sec).unwrap();
        let mut quat = Vector4::zeros();
        for (j, wj) in w.iter().enumerate() {
            quat += *wj * seg.control_points[first + j].quat;
        }
        ss += (pos - s.pos).norm_squared() + (quat - s.quat).norm_squared();
    }
    (ss / samples.len() as f64).sqrt()
}
