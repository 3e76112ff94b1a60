//! Diagnostic image rendering: accumulated-event frames with feature
//! overlays, the residual histogram and an undistorted feature-grid plot.

use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{Vector2, Vector3, Vector4};
use thiserror::Error;

use crate::event::Event;
use crate::output::{OutputError, ResultFile, SegmentRecord};
use crate::spline::{ControlPoint, KnotVector, SplineError, SplineSegment};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encode error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

const BG: Rgb<u8> = Rgb([12, 12, 16]);
const POSITIVE: Rgb<u8> = Rgb([235, 90, 70]);
const NEGATIVE: Rgb<u8> = Rgb([70, 130, 235]);
const DETECTED: Rgb<u8> = Rgb([80, 220, 110]);
const REPROJECTED: Rgb<u8> = Rgb([250, 250, 250]);

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_ring(img: &mut RgbImage, cx: f64, cy: f64, r: f64, color: Rgb<u8>) {
    let steps = (r.max(2.0) * 8.0) as usize;
    for i in 0..steps {
        let a = i as f64 / steps as f64 * std::f64::consts::TAU;
        put(
            img,
            (cx + r * a.cos()).round() as i64,
            (cy + r * a.sin()).round() as i64,
            color,
        );
    }
}

fn draw_disk(img: &mut RgbImage, cx: f64, cy: f64, r: f64, color: Rgb<u8>) {
    let ri = r.ceil() as i64;
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if (dx * dx + dy * dy) as f64 <= r * r {
                put(img, cx.round() as i64 + dx, cy.round() as i64 + dy, color);
            }
        }
    }
}

/// Rebuild a spline segment from its serialized record.
pub fn segment_from_record(rec: &SegmentRecord) -> Result<SplineSegment, SplineError> {
    let knots = KnotVector {
        degree: rec.degree,
        knots: rec.knots_s.clone(),
    };
    knots.validate()?;
    let control_points: Vec<ControlPoint> = rec
        .control_positions
        .iter()
        .zip(rec.control_quaternions.iter())
        .map(|(p, q)| ControlPoint {
            pos: Vector3::new(p[0], p[1], p[2]),
            quat: Vector4::new(q[0], q[1], q[2], q[3]),
        })
        .collect();
    Ok(SplineSegment {
        knots,
        control_points,
        frame_range: (rec.frame_first, rec.frame_last),
    })
}

/// What `render_report` produced.
#[derive(Debug, Clone, Default)]
pub struct ReportSummary {
    pub frame_images: usize,
    pub skipped_frames: usize,
    pub wrote_histogram: bool,
    pub wrote_undistorted: bool,
}

/// Write one PNG per reference frame plus histogram, undistorted-grid and
/// summary files into `out_dir`.
pub fn render_report(
    result: &ResultFile,
    events: &[Event],
    out_dir: &Path,
) -> Result<ReportSummary, ReportError> {
    std::fs::create_dir_all(out_dir)?;
    let mut summary = ReportSummary::default();
    let (w, h) = (result.config.sensor.width, result.config.sensor.height);
    let segments: Vec<Option<SplineSegment>> = result
        .segments
        .iter()
        .map(|r| segment_from_record(r).ok())
        .collect();
    let board = result.config.pattern.board_points();
    let k = &result.intrinsics;

    for (fi, frame) in result.frames.iter().enumerate() {
        let lo = events.partition_point(|e| e.t_us < frame.t_start_us);
        let hi = events.partition_point(|e| e.t_us <= frame.t_end_us);
        if lo >= hi {
            summary.skipped_frames += 1;
            eprintln!("warning: frame {fi} has no events in the stream, skipped");
            continue;
        }
        let mut img = RgbImage::from_pixel(w, h, BG);
        for e in &events[lo..hi] {
            put(
                &mut img,
                e.x.round() as i64,
                e.y.round() as i64,
                if e.polarity > 0 { POSITIVE } else { NEGATIVE },
            );
        }
        // rectified features
        for f in &frame.features {
            draw_ring(&mut img, f.cx, f.cy, f.radius, DETECTED);
            draw_disk(&mut img, f.cx, f.cy, 1.0, DETECTED);
        }
        // reprojection of the pattern through the refined trajectory
        if let Some(Some(seg)) = segments.get(frame.segment) {
            let t = frame.t_ref_us * 1e-6;
            if seg.contains(t) {
                if let Ok((pos, q)) = seg.evaluate(t) {
                    let pose = crate::geometry::Pose { q, t: pos };
                    for b in &board {
                        let x_cam = pose.to_camera(b);
                        if x_cam.z <= 1e-6 {
                            continue;
                        }
                        if let Ok(px) = k.project(x_cam) {
                            draw_disk(&mut img, px.x, px.y, 1.2, REPROJECTED);
                        }
                    }
                }
            }
        }
        img.save(out_dir.join(format!("frame_{fi:04}.png")))?;
        summary.frame_images += 1;
    }

    summary.wrote_histogram = render_histogram(result, &out_dir.join("residual_histogram.png"))?;
    summary.wrote_undistorted =
        render_undistorted(result, &out_dir.join("undistorted_grid.png"))?;

    let text = format!(
        "frames: {} rendered, {} skipped\nresiduals: {} used, rms {:.6e} m\nintrinsics: fx={:.3} fy={:.3} cx={:.3} cy={:.3} k1={:.5}\nconverged: {}\n",
        summary.frame_images,
        summary.skipped_frames,
        result.stats.count,
        result.stats.rms_m,
        result.intrinsics.fx,
        result.intrinsics.fy,
        result.intrinsics.cx,
        result.intrinsics.cy,
        result.intrinsics.k1,
        result.converged,
    );
    std::fs::write(out_dir.join("summary.txt"), text)?;
    Ok(summary)
}

fn render_histogram(result: &ResultFile, path: &Path) -> Result<bool, ReportError> {
    let counts = &result.stats.histogram_counts;
    if counts.is_empty() {
        return Ok(false);
    }
    let (w, h) = (640u32, 360u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([245, 245, 245]));
    let max = *counts.iter().max().unwrap_or(&1) as f64;
    let bar_w = w as f64 / counts.len() as f64;
    for (i, &c) in counts.iter().enumerate() {
        let bh = ((c as f64 / max.max(1.0)) * (h as f64 - 20.0)) as i64;
        let x0 = (i as f64 * bar_w) as i64;
        let x1 = ((i + 1) as f64 * bar_w) as i64 - 1;
        for x in x0..=x1 {
            for y in (h as i64 - 10 - bh)..(h as i64 - 10) {
                put(&mut img, x, y, Rgb([60, 100, 180]));
            }
        }
    }
    img.save(path)?;
    Ok(true)
}

/// Feature centers from all frames mapped through the inverse distortion onto
/// a synthetic pinhole image: straight grid lines indicate a good model fit.
fn render_undistorted(result: &ResultFile, path: &Path) -> Result<bool, ReportError> {
    let (w, h) = (result.config.sensor.width, result.config.sensor.height);
    let mut img = RgbImage::from_pixel(w, h, Rgb([245, 245, 245]));
    let k = &result.intrinsics;
    let mut any = false;
    for frame in &result.frames {
        for f in &frame.features {
            let n = k.normalize(Vector2::new(f.cx, f.cy));
            let px = k.fx * n.x + k.cx;
            let py = k.fy * n.y + k.cy;
            draw_disk(&mut img, px, py, 1.0, Rgb([40, 140, 60]));
            any = true;
        }
    }
    img.save(path)?;
    Ok(any)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_record_round_trip() {
        let kv = KnotVector::clamped(3, 0.0, 1.0, &[0.5]).unwrap();
        let seg = SplineSegment {
            knots: kv,
            control_points: (0..5)
                .map(|i| ControlPoint {
                    pos: Vector3::new(i as f64, 0.0, -0.4),
                    quat: Vector4::new(0.0, 0.0, 0.0, 1.0),
                })
                .collect(),
            frame_range: (2, 6),
        };
        let rec = SegmentRecord::from_segment(&seg);
        let back = segment_from_record(&rec).unwrap();
        assert_eq!(back.knots, seg.knots);
        assert_eq!(back.control_points, seg.control_points);
        assert_eq!(back.frame_range, (2, 6));
    }
}
