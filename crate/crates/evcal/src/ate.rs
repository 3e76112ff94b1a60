//! Absolute trajectory error: nearest-timestamp association, rigid alignment,
//! translational error statistics.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{rigid_align, GeometryError};
use crate::synthetic::PoseLogEntry;

#[derive(Debug, Error)]
pub enum AteError {
    #[error("no timestamp associations within {max_offset_us} us")]
    NoAssociations { max_offset_us: u64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Translational error statistics after rigid alignment, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteStats {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub pairs: usize,
}

/// Maximum association offset between trajectories, microseconds.
pub const MAX_ASSOCIATION_OFFSET_US: u64 = 20_000;

fn associate(
    estimated: &[PoseLogEntry],
    reference: &[PoseLogEntry],
    max_offset_us: u64,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (ei, est) in estimated.iter().enumerate() {
        let idx = reference.partition_point(|r| r.t_us < est.t_us);
        let mut best: Option<(u64, usize)> = None;
        for cand in [idx.wrapping_sub(1), idx] {
            if let Some(r) = reference.get(cand) {
                let off = r.t_us.abs_diff(est.t_us);
                if off <= max_offset_us && best.map(|(b, _)| off < b).unwrap_or(true) {
                    best = Some((off, cand));
                }
            }
        }
        if let Some((_, ri)) = best {
            pairs.push((ei, ri));
        }
    }
    pairs
}

/// Align the estimated trajectory to the reference rigidly and compute the
/// translational error statistics.
pub fn evaluate_ate(
    estimated: &[PoseLogEntry],
    reference: &[PoseLogEntry],
) -> Result<AteStats, AteError> {
    let pairs = associate(estimated, reference, MAX_ASSOCIATION_OFFSET_US);
    if pairs.len() < 3 {
        return Err(AteError::NoAssociations {
            max_offset_us: MAX_ASSOCIATION_OFFSET_US,
        });
    }
    let est: Vec<Vector3<f64>> = pairs.iter().map(|&(e, _)| estimated[e].pose.t).collect();
    let refp: Vec<Vector3<f64>> = pairs.iter().map(|&(_, r)| reference[r].pose.t).collect();
    let (rot, trans) = rigid_align(&est, &refp)?;
    let mut errors: Vec<f64> = est
        .iter()
        .zip(refp.iter())
        .map(|(e, r)| (r - (rot * e + trans)).norm())
        .collect();
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let std = (errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n).sqrt();
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if errors.len() % 2 == 1 {
        errors[errors.len() / 2]
    } else {
        0.5 * (errors[errors.len() / 2 - 1] + errors[errors.len() / 2])
    };
    Ok(AteStats {
        rmse,
        mean,
        median,
        std,
        pairs: errors.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use nalgebra::Vector4;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn log_from(positions: &[(u64, Vector3<f64>)]) -> Vec<PoseLogEntry> {
        positions
            .iter()
            .map(|&(t_us, t)| PoseLogEntry {
                t_us,
                pose: Pose::new(Vector4::new(0.0, 0.0, 0.0, 1.0), t),
            })
            .collect()
    }

    fn wobble_log(n: usize) -> Vec<PoseLogEntry> {
        log_from(
            &(0..n)
                .map(|i| {
                    let t = i as f64 * 0.01;
                    (
                        (t * 1e6) as u64,
                        Vector3::new(t.sin() * 0.2, (1.3 * t).cos() * 0.1, -0.4 + 0.05 * t),
                    )
                })
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn identical_trajectories_zero_error() {
        let log = wobble_log(200);
        let stats = evaluate_ate(&log, &log).unwrap();
        assert!(stats.rmse < 1e-12);
        assert!(stats.mean < 1e-12);
        assert!(stats.median < 1e-12);
        assert!(stats.std < 1e-12);
        assert_eq!(stats.pairs, 200);
    }

    #[test]
    fn global_offset_absorbed_by_alignment() {
        let reference = wobble_log(200);
        let shifted: Vec<PoseLogEntry> = reference
            .iter()
            .map(|e| PoseLogEntry {
                t_us: e.t_us,
                pose: Pose::new(e.pose.q, e.pose.t + Vector3::new(0.01, 0.0, 0.0)),
            })
            .collect();
        let stats = evaluate_ate(&shifted, &reference).unwrap();
        assert!(stats.rmse < 1e-12, "rmse {}", stats.rmse);
    }

    #[test]
    fn gaussian_noise_rmse_matches_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let reference = wobble_log(4000);
        let sigma = 0.005;
        let gauss = |rng: &mut ChaCha8Rng| {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let noisy: Vec<PoseLogEntry> = reference
            .iter()
            .map(|e| PoseLogEntry {
                t_us: e.t_us,
                pose: Pose::new(
                    e.pose.q,
                    e.pose.t
                        + Vector3::new(
                            sigma * gauss(&mut rng),
                            sigma * gauss(&mut rng),
                            sigma * gauss(&mut rng),
                        ),
                ),
            })
            .collect();
        let stats = evaluate_ate(&noisy, &reference).unwrap();
        let expected = sigma * 3.0f64.sqrt();
        assert!(
            (stats.rmse - expected).abs() < 0.2 * expected,
            "rmse {} vs expected {expected}",
            stats.rmse
        );
    }

    #[test]
    fn association_respects_offset_limit() {
        let reference = wobble_log(100);
        let far: Vec<PoseLogEntry> = reference
            .iter()
            .map(|e| PoseLogEntry {
                t_us: e.t_us + 10_000_000,
                pose: e.pose,
            })
            .collect();
        assert!(matches!(
            evaluate_ate(&far, &reference),
            Err(AteError::NoAssociations { .. })
        ));
    }
}
