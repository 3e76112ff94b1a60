//! Perspective camera with an inverse radial distortion model.
//!
//! Normalization maps a pixel onto the normalized image plane:
//!
//! ```text
//! Px = (px - cx) / fx,   Py = (py - cy) / fy
//! alpha = sqrt(Px^2 + Py^2)
//! beta  = 1 + k1 a + k2 a^2 + k3 a^3 + k4 a^4 + k5 a^5,  a = alpha^2
//! pi(m) = [beta Px, beta Py, 1]
//! ```
//!
//! The forward projection inverts the scalar radial map `alpha -> alpha *
//! beta(alpha)` numerically, so the two directions agree to machine precision.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::SensorGeometry;

/// Number of parameters of the perspective + inverse-radial model.
pub const NUM_PARAMS: usize = 9;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("focal lengths must be positive, got fx={fx}, fy={fy}")]
    NonPositiveFocal { fx: f64, fy: f64 },
    #[error("radial map is not invertible over the sensor (beta <= 0 or non-monotone at alpha = {alpha:.4})")]
    NonInvertible { alpha: f64 },
    #[error("forward distortion model non-monotone at normalized radius {rho:.4}")]
    NonMonotoneForward { rho: f64 },
    #[error("requested normalized radius {rho:.4} outside the invertible range")]
    OutOfRange { rho: f64 },
}

/// Intrinsic parameter vector `[fx, fy, cx, cy, k1..k5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub k5: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, k: [f64; 5]) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            k1: k[0],
            k2: k[1],
            k3: k[2],
            k4: k[3],
            k5: k[4],
        }
    }

    pub fn params(&self) -> [f64; NUM_PARAMS] {
        [
            self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.k3, self.k4, self.k5,
        ]
    }

    pub fn from_params(p: &[f64]) -> Self {
        assert_eq!(p.len(), NUM_PARAMS);
        Self {
            fx: p[0],
            fy: p[1],
            cx: p[2],
            cy: p[3],
            k1: p[4],
            k2: p[5],
            k3: p[6],
            k4: p[7],
            k5: p[8],
        }
    }

    pub fn distortion(&self) -> [f64; 5] {
        [self.k1, self.k2, self.k3, self.k4, self.k5]
    }

    /// beta(alpha^2) of the inverse radial polynomial.
    pub fn beta(&self, alpha_sq: f64) -> f64 {
        let a = alpha_sq;
        1.0 + a * (self.k1 + a * (self.k2 + a * (self.k3 + a * (self.k4 + a * self.k5))))
    }

    /// d beta / d(alpha^2).
    fn beta_prime(&self, alpha_sq: f64) -> f64 {
        let a = alpha_sq;
        self.k1
            + a * (2.0 * self.k2 + a * (3.0 * self.k3 + a * (4.0 * self.k4 + a * 5.0 * self.k5)))
    }

    /// Largest distorted normalized radius seen by the sensor (at a corner).
    pub fn max_alpha(&self, sensor: SensorGeometry) -> f64 {
        let corners = [
            (0.0, 0.0),
            (sensor.width as f64, 0.0),
            (0.0, sensor.height as f64),
            (sensor.width as f64, sensor.height as f64),
        ];
        corners
            .iter()
            .map(|&(x, y)| {
                let px = (x - self.cx) / self.fx;
                let py = (y - self.cy) / self.fy;
                (px * px + py * py).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Sampled invertibility check of the radial map over the sensor:
    /// beta > 0 and `alpha * beta(alpha)` strictly increasing at 64 radii.
    pub fn validate(&self, sensor: SensorGeometry) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::NonPositiveFocal {
                fx: self.fx,
                fy: self.fy,
            });
        }
        let alpha_max = self.max_alpha(sensor);
        let mut prev = 0.0;
        for i in 1..=64 {
            let alpha = alpha_max * i as f64 / 64.0;
            let beta = self.beta(alpha * alpha);
            let rho = alpha * beta;
            if beta <= 0.0 || rho <= prev {
                return Err(CameraError::NonInvertible { alpha });
            }
            prev = rho;
        }
        Ok(())
    }

    /// Pixel -> point on the normalized image plane (z = 1).
    pub fn normalize(&self, m: Vector2<f64>) -> Vector3<f64> {
        let px = (m.x - self.cx) / self.fx;
        let py = (m.y - self.cy) / self.fy;
        let beta = self.beta(px * px + py * py);
        Vector3::new(beta * px, beta * py, 1.0)
    }

    /// Normalization value plus Jacobians w.r.t. the 9 parameters and the pixel.
    ///
    /// Rows of the Jacobians correspond to the x and y components of the
    /// normalized point (the third component is constant).
    pub fn normalize_with_jacobians(
        &self,
        m: Vector2<f64>,
    ) -> (Vector3<f64>, SMatrix<f64, 2, NUM_PARAMS>, SMatrix<f64, 2, 2>) {
        let px = (m.x - self.cx) / self.fx;
        let py = (m.y - self.cy) / self.fy;
        let a = px * px + py * py;
        let beta = self.beta(a);
        let bp = self.beta_prime(a);
        let value = Vector3::new(beta * px, beta * py, 1.0);

        // dPx/d(fx, cx), dPy/d(fy, cy)
        let dpx_dfx = -px / self.fx;
        let dpx_dcx = -1.0 / self.fx;
        let dpy_dfy = -py / self.fy;
        let dpy_dcy = -1.0 / self.fy;

        let mut jk = SMatrix::<f64, 2, NUM_PARAMS>::zeros();
        // via a = Px^2 + Py^2: d(beta Px)/dtheta = bp * da * Px + beta * dPx
        let da_dfx = 2.0 * px * dpx_dfx;
        let da_dfy = 2.0 * py * dpy_dfy;
        let da_dcx = 2.0 * px * dpx_dcx;
        let da_dcy = 2.0 * py * dpy_dcy;
        jk[(0, 0)] = bp * da_dfx * px + beta * dpx_dfx;
        jk[(1, 0)] = bp * da_dfx * py;
        jk[(0, 1)] = bp * da_dfy * px;
        jk[(1, 1)] = bp * da_dfy * py + beta * dpy_dfy;
        jk[(0, 2)] = bp * da_dcx * px + beta * dpx_dcx;
        jk[(1, 2)] = bp * da_dcx * py;
        jk[(0, 3)] = bp * da_dcy * px;
        jk[(1, 3)] = bp * da_dcy * py + beta * dpy_dcy;
        // distortion coefficients: d(beta)/dki = a^i
        let mut apow = a;
        for i in 0..5 {
            jk[(0, 4 + i)] = apow * px;
            jk[(1, 4 + i)] = apow * py;
            apow *= a;
        }

        let mut jm = SMatrix::<f64, 2, 2>::zeros();
        let da_dmx = 2.0 * px / self.fx;
        let da_dmy = 2.0 * py / self.fy;
        jm[(0, 0)] = bp * da_dmx * px + beta / self.fx;
        jm[(0, 1)] = bp * da_dmy * px;
        jm[(1, 0)] = bp * da_dmx * py;
        jm[(1, 1)] = bp * da_dmy * py + beta / self.fy;

        (value, jk, jm)
    }

    /// Camera-frame point (z > 0) -> pixel, by inverting the radial map.
    pub fn project(&self, x_cam: Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        assert!(x_cam.z > 0.0, "projection requires positive depth");
        let nx = x_cam.x / x_cam.z;
        let ny = x_cam.y / x_cam.z;
        let rho = (nx * nx + ny * ny).sqrt();
        if rho < 1e-300 {
            return Ok(Vector2::new(self.cx, self.cy));
        }
        let alpha = self.invert_radial(rho)?;
        let scale = alpha / rho;
        Ok(Vector2::new(
            self.fx * nx * scale + self.cx,
            self.fy * ny * scale + self.cy,
        ))
    }

    /// Solve `alpha * beta(alpha) = rho` for alpha >= 0 on the monotone branch.
    fn invert_radial(&self, rho: f64) -> Result<f64, CameraError> {
        let f = |alpha: f64| alpha * self.beta(alpha * alpha);
        // expand the bracket while f stays monotone
        let mut hi = rho.max(1e-9);
        let mut f_hi = f(hi);
        let mut guard = 0;
        while f_hi < rho {
            let next = hi * 2.0;
            let f_next = f(next);
            if f_next <= f_hi {
                return Err(CameraError::OutOfRange { rho });
            }
            hi = next;
            f_hi = f_next;
            guard += 1;
            if guard > 200 {
                return Err(CameraError::OutOfRange { rho });
            }
        }
        let mut lo = 0.0;
        // safeguarded Newton
        let mut alpha = rho.min(hi);
        for _ in 0..100 {
            let a = alpha * alpha;
            let val = alpha * self.beta(a) - rho;
            if val > 0.0 {
                hi = alpha;
            } else {
                lo = alpha;
            }
            let deriv = self.beta(a) + 2.0 * a * self.beta_prime(a);
            let mut next = if deriv.abs() > 1e-300 {
                alpha - val / deriv
            } else {
                0.5 * (lo + hi)
            };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - alpha).abs() <= 1e-16 * alpha.max(1.0) {
                return Ok(next);
            }
            alpha = next;
        }
        Ok(alpha)
    }
}

/// Contract required of a normalization function used by the back-end:
/// a continuously differentiable map from (parameters, pixel) to a point on
/// the normalized image plane.
pub trait CameraNormalization: Sync {
    fn num_params(&self) -> usize;
    fn normalize(&self, params: &[f64], m: Vector2<f64>) -> Vector3<f64>;
    /// Value plus Jacobians; `jac_params` is 2 x num_params row-major for the
    /// x/y components of the normalized point.
    fn normalize_with_jacobians(
        &self,
        params: &[f64],
        m: Vector2<f64>,
        jac_params: &mut [f64],
        jac_pixel: &mut [f64; 4],
    ) -> Vector3<f64>;
}

/// The shipped perspective + inverse-radial instance.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerspectiveRadial;

impl CameraNormalization for PerspectiveRadial {
    fn num_params(&self) -> usize {
        NUM_PARAMS
    }

    fn normalize(&self, params: &[f64], m: Vector2<f64>) -> Vector3<f64> {
        Intrinsics::from_params(params).normalize(m)
    }

    fn normalize_with_jacobians(
        &self,
        params: &[f64],
        m: Vector2<f64>,
        jac_params: &mut [f64],
        jac_pixel: &mut [f64; 4],
    ) -> Vector3<f64> {
        let (value, jk, jm) = Intrinsics::from_params(params).normalize_with_jacobians(m);
        debug_assert_eq!(jac_params.len(), 2 * NUM_PARAMS);
        for r in 0..2 {
            for c in 0..NUM_PARAMS {
                jac_params[r * NUM_PARAMS + c] = jk[(r, c)];
            }
        }
        jac_pixel[0] = jm[(0, 0)];
        jac_pixel[1] = jm[(0, 1)];
        jac_pixel[2] = jm[(1, 0)];
        jac_pixel[3] = jm[(1, 1)];
        value
    }
}

/// Fit the inverse polynomial `beta(alpha)` to the exact inverse of a forward
/// radial model `rho -> rho * (1 + c1 rho^2 + c2 rho^4 + ...)`.
///
/// Returns the five inverse coefficients and the max fit residual over the
/// samples. Used to seed `k1..k5` from a forward-model estimate.
pub fn fit_inverse_from_forward(
    forward: &[f64],
    alpha_max: f64,
    samples: usize,
) -> Result<([f64; 5], f64), CameraError> {
    assert!(alpha_max > 0.0 && samples >= 8);
    let gamma = |rho: f64| -> f64 {
        let r2 = rho * rho;
        let mut acc = 1.0;
        let mut p = r2;
        for &c in forward {
            acc += c * p;
            p *= r2;
        }
        acc
    };
    let gamma_deriv_pos = |rho: f64| -> bool {
        // d(rho * gamma)/drho = 1 + 3 c1 rho^2 + 5 c2 rho^4 + ...
        let r2 = rho * rho;
        let mut acc = 1.0;
        let mut p = r2;
        for (i, &c) in forward.iter().enumerate() {
            acc += (2 * i + 3) as f64 * c * p;
            p *= r2;
        }
        acc > 0.0
    };
    // forward-map derivative d(rho * gamma)/drho
    let fwd_deriv = |rho: f64| -> f64 {
        let r2 = rho * rho;
        let mut acc = 1.0;
        let mut p = r2;
        for (i, &c) in forward.iter().enumerate() {
            acc += (2 * i + 3) as f64 * c * p;
            p *= r2;
        }
        acc
    };
    // Solve rho * gamma(rho) = alpha in terms of delta = rho - alpha; Newton
    // from delta = 0 converges to machine precision and keeps beta - 1 =
    // delta / alpha free of cancellation (exactly zero for a distortion-free
    // forward model).
    let mut a_mat = DMatrix::<f64>::zeros(samples, 5);
    let mut b = DVector::<f64>::zeros(samples);
    for i in 0..samples {
        let alpha = alpha_max * (i + 1) as f64 / samples as f64;
        let g = |delta: f64| (alpha + delta) * gamma(alpha + delta) - alpha;
        let mut delta = 0.0;
        let mut converged = false;
        for _ in 0..100 {
            let rho = alpha + delta;
            if rho < 0.0 || !gamma_deriv_pos(rho) {
                return Err(CameraError::NonMonotoneForward { rho });
            }
            let val = g(delta);
            let deriv = fwd_deriv(rho);
            if deriv <= 0.0 {
                return Err(CameraError::NonMonotoneForward { rho });
            }
            let step = val / deriv;
            delta -= step;
            if step.abs() <= 1e-17 * alpha.max(1e-12) {
                converged = true;
                break;
            }
        }
        if !converged && g(delta).abs() > 1e-12 * alpha {
            return Err(CameraError::NonMonotoneForward { rho: alpha + delta });
        }
        let a = alpha * alpha;
        let mut p = a;
        for c in 0..5 {
            a_mat[(i, c)] = p;
            p *= a;
        }
        b[i] = delta / alpha; // beta_target - 1
    }
    let svd = a_mat.clone().svd(true, true);
    let sol = svd
        .solve(&b, 1e-14)
        .map_err(|_| CameraError::NonMonotoneForward { rho: alpha_max })?;
    let k = [sol[0], sol[1], sol[2], sol[3], sol[4]];
    let mut max_resid = 0.0f64;
    for i in 0..samples {
        let mut fit = 0.0;
        for c in 0..5 {
            fit += a_mat[(i, c)] * k[c];
        }
        max_resid = max_resid.max((fit - b[i]).abs());
    }
    Ok((k, max_resid))
}

/// Intrinsic matrix K (no skew) as a 3x3, for homography-based math.
pub fn k_matrix(intr: &Intrinsics) -> Matrix3<f64> {
    Matrix3::new(
        intr.fx, 0.0, intr.cx, 0.0, intr.fy, intr.cy, 0.0, 0.0, 1.0,
    )
}
