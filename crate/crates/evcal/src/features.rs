//! Circle features from polarity-opposed cluster pairs.
//!
//! A moving dark dot produces one positive and one negative event cluster at
//! opposing poles of its circular outline. Candidate cluster pairs are turned
//! into circle hypotheses either by a strict fit-and-check path (hard mode) or
//! by simply spanning the inter-center segment (soft mode), and a mutual
//! nearest-neighbor check removes asymmetric pairings.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::clustering::Cluster;
use crate::event::EventWindow;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate (collinear) point configuration")]
    Degenerate,
}

/// A fitted circle feature and the clusters it came from.
#[derive(Debug, Clone)]
pub struct CircleFeature {
    pub center: Vector2<f64>,
    pub radius: f64,
    /// RMS radial residual divided by the radius.
    pub fit_error: f64,
    pub pos_cluster: usize,
    pub neg_cluster: usize,
}

/// Algebraic Kåsa circle fit: minimizes `sum (x^2 + y^2 + Dx + Ey + F)^2`.
///
/// Returns center, radius and the normalized error (RMS radial residual over
/// radius). Data is centered internally for conditioning; the result is
/// identical up to the translation.
pub fn kasa_fit(points: &[Vector2<f64>]) -> Result<(Vector2<f64>, f64, f64), FitError> {
    let n = points.len();
    if n < 3 {
        return Err(FitError::TooFewPoints(n));
    }
    let nf = n as f64;
    let centroid = points.iter().fold(Vector2::zeros(), |a, p| a + p) / nf;

    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for p in points {
        let x = p.x - centroid.x;
        let y = p.y - centroid.y;
        let row = Vector3::new(x, y, 1.0);
        let b = -(x * x + y * y);
        ata += row * row.transpose();
        atb += row * b;
    }
    let svd = ata.svd(true, true);
    let smax = svd.singular_values[0];
    let smin = svd.singular_values[2];
    if !(smin > 1e-10 * smax.max(1e-300)) {
        return Err(FitError::Degenerate);
    }
    let def = svd.solve(&atb, 0.0).map_err(|_| FitError::Degenerate)?;
    let (d, e, f) = (def[0], def[1], def[2]);
    let r2 = 0.25 * (d * d + e * e) - f;
    if !(r2 > 0.0) {
        return Err(FitError::Degenerate);
    }
    let radius = r2.sqrt();
    let center_local = Vector2::new(-0.5 * d, -0.5 * e);
    let center = center_local + centroid;

    let mut ss = 0.0;
    for p in points {
        let dist = (Vector2::new(p.x - centroid.x, p.y - centroid.y) - center_local).norm();
        ss += (dist - radius) * (dist - radius);
    }
    let normalized_error = (ss / nf).sqrt() / radius;
    Ok((center, radius, normalized_error))
}

/// Hard/soft extraction tolerances.
#[derive(Debug, Clone, Copy)]
pub struct ExtractionParams {
    /// Nearest-neighbor count for hard-mode candidate pairs.
    pub k_neighbors: usize,
    /// Relative mismatch allowed between fitted diameter and center distance.
    pub tol_diameter: f64,
    /// Center mismatch allowed, as a fraction of the fitted radius.
    pub tol_center: f64,
    /// Normalized fit error ceiling for soft mode.
    pub tol_soft: f64,
}

impl Default for ExtractionParams {
    fn default() -> Self {
        Self {
            k_neighbors: 3,
            tol_diameter: 0.25,
            tol_center: 0.25,
            tol_soft: 0.35,
        }
    }
}

/// Search direction for the mutual consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchDirection {
    PosToNeg,
    NegToPos,
}

fn union_points(window: &EventWindow, a: &Cluster, b: &Cluster) -> Vec<Vector2<f64>> {
    a.member_indices
        .iter()
        .chain(b.member_indices.iter())
        .map(|&i| Vector2::new(window.events[i].x, window.events[i].y))
        .collect()
}

/// k nearest indices in `centers` to `from`, ties broken by index.
fn k_nearest(from: &Vector2<f64>, centers: &[Cluster], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..centers.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (centers[a].center - from).norm_squared();
        let db = (centers[b].center - from).norm_squared();
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Resolve candidate pairs so no cluster is used twice: ascending fit error,
/// ties by cluster indices.
fn resolve_pairs(mut candidates: Vec<CircleFeature>) -> Vec<CircleFeature> {
    candidates.sort_by(|a, b| {
        a.fit_error
            .partial_cmp(&b.fit_error)
            .unwrap()
            .then(a.pos_cluster.cmp(&b.pos_cluster))
            .then(a.neg_cluster.cmp(&b.neg_cluster))
    });
    let mut used_pos = std::collections::HashSet::new();
    let mut used_neg = std::collections::HashSet::new();
    let mut out = Vec::new();
    for c in candidates {
        if used_pos.contains(&c.pos_cluster) || used_neg.contains(&c.neg_cluster) {
            continue;
        }
        used_pos.insert(c.pos_cluster);
        used_neg.insert(c.neg_cluster);
        out.push(c);
    }
    out
}

/// Strict extraction: fit a circle to each candidate pair's event pixels and
/// require the fitted diameter and center to agree with the cluster-center
/// segment before keeping the lowest-error pairing.
pub fn hard_extract(
    pos: &[Cluster],
    neg: &[Cluster],
    window: &EventWindow,
    params: &ExtractionParams,
    direction: SearchDirection,
) -> Vec<CircleFeature> {
    let (from_set, to_set) = match direction {
        SearchDirection::PosToNeg => (pos, neg),
        SearchDirection::NegToPos => (neg, pos),
    };
    let mut candidates = Vec::new();
    for (fi, from) in from_set.iter().enumerate() {
        for ti in k_nearest(&from.center, to_set, params.k_neighbors) {
            let to = &to_set[ti];
            let (pi, ni) = match direction {
                SearchDirection::PosToNeg => (fi, ti),
                SearchDirection::NegToPos => (ti, fi),
            };
            let dist = (from.center - to.center).norm();
            if dist <= 0.0 {
                continue;
            }
            let Ok((center, radius, err)) = kasa_fit(&union_points(window, from, to)) else {
                continue;
            };
            let diameter_ok = (2.0 * radius - dist).abs() <= params.tol_diameter * dist;
            let midpoint = (from.center + to.center) / 2.0;
            let center_ok = (center - midpoint).norm() <= params.tol_center * radius;
            if diameter_ok && center_ok {
                candidates.push(CircleFeature {
                    center,
                    radius,
                    fit_error: err,
                    pos_cluster: pi,
                    neg_cluster: ni,
                });
            }
        }
    }
    resolve_pairs(candidates)
}

/// Lenient extraction: hypothesize the circle from the nearest opposing
/// cluster (inter-center segment as diameter) and gate only on the normalized
/// fit error of the union of events.
pub fn soft_extract(
    pos: &[Cluster],
    neg: &[Cluster],
    window: &EventWindow,
    params: &ExtractionParams,
    direction: SearchDirection,
) -> Vec<CircleFeature> {
    let (from_set, to_set) = match direction {
        SearchDirection::PosToNeg => (pos, neg),
        SearchDirection::NegToPos => (neg, pos),
    };
    let mut candidates = Vec::new();
    for (fi, from) in from_set.iter().enumerate() {
        let Some(&ti) = k_nearest(&from.center, to_set, 1).first() else {
            continue;
        };
        let to = &to_set[ti];
        let (pi, ni) = match direction {
            SearchDirection::PosToNeg => (fi, ti),
            SearchDirection::NegToPos => (ti, fi),
        };
        let dist = (from.center - to.center).norm();
        if dist <= 0.0 {
            continue;
        }
        let Ok((_, _, err)) = kasa_fit(&union_points(window, from, to)) else {
            continue;
        };
        if err > params.tol_soft {
            continue;
        }
        candidates.push(CircleFeature {
            center: (from.center + to.center) / 2.0,
            radius: dist / 2.0,
            fit_error: err,
            pos_cluster: pi,
            neg_cluster: ni,
        });
    }
    resolve_pairs(candidates)
}

/// Keep features whose (positive, negative) pairing was found in both search
/// directions; geometry is taken from the forward feature.
pub fn mutual_consistency_filter(
    features_fwd: &[CircleFeature],
    features_rev: &[CircleFeature],
) -> Vec<CircleFeature> {
    let rev_pairs: std::collections::HashSet<(usize, usize)> = features_rev
        .iter()
        .map(|f| (f.pos_cluster, f.neg_cluster))
        .collect();
    features_fwd
        .iter()
        .filter(|f| rev_pairs.contains(&(f.pos_cluster, f.neg_cluster)))
        .cloned()
        .collect()
}
