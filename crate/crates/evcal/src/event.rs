//! Event stream representation, file I/O and adaptive temporal windowing.
//!
//! Two on-disk formats are supported:
//! - CSV: one `t_us,x,y,p` record per line with `p` in `{0,1}` mapped to
//!   `{-1,+1}`; an optional header line is detected by a non-numeric first field.
//! - Binary (`.evb`): packed little-endian records of
//!   `(u64 t_us, u16 x, u16 y, i8 p)`, 13 bytes each, no header.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Disorder tolerated in input streams before load fails (microseconds).
pub const MAX_TIMESTAMP_DISORDER_US: u64 = 100;

/// One asynchronous brightness-change measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t_us: u64,
    /// Pixel column; sub-pixel positions are allowed in memory and CSV.
    pub x: f64,
    /// Pixel row.
    pub y: f64,
    /// +1 brightness increase, -1 decrease.
    pub polarity: i8,
}

impl Event {
    pub fn t_sec(&self) -> f64 {
        self.t_us as f64 * 1e-6
    }
}

/// Sensor pixel geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorGeometry {
    pub width: u32,
    pub height: u32,
}

impl Default for SensorGeometry {
    fn default() -> Self {
        Self {
            width: 346,
            height: 260,
        }
    }
}

impl SensorGeometry {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }
}

#[derive(Debug, Error)]
pub enum EventIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: event ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        line: usize,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("record {line}: polarity {value} not in {{-1, 0, +1}}")]
    BadPolarity { line: usize, value: i64 },
    #[error("timestamps out of order by {disorder_us} us at record {line} (max {max_us} us)")]
    OutOfOrder {
        line: usize,
        disorder_us: u64,
        max_us: u64,
    },
    #[error("truncated binary record at byte {offset}")]
    Truncated { offset: usize },
}

/// Event file format, selected by extension in the CLI (`.evb` is binary).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("evb") => EventFormat::Binary,
            _ => EventFormat::Csv,
        }
    }
}

/// Load an event file, validate bounds and restore timestamp order.
///
/// Near-sorted input (disorder up to [`MAX_TIMESTAMP_DISORDER_US`]) is fixed by
/// a stable sort; anything worse is an input error.
pub fn load_events(
    path: &Path,
    format: EventFormat,
    sensor: SensorGeometry,
) -> Result<Vec<Event>, EventIoError> {
    let file = std::fs::File::open(path)?;
    let mut events = match format {
        EventFormat::Csv => parse_csv(BufReader::new(file), sensor)?,
        EventFormat::Binary => parse_binary(BufReader::new(file), sensor)?,
    };
    restore_order(&mut events, MAX_TIMESTAMP_DISORDER_US)?;
    Ok(events)
}

fn parse_csv<R: BufRead>(reader: R, sensor: SensorGeometry) -> Result<Vec<Event>, EventIoError> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split(',').map(str::trim);
        let first = fields.next().unwrap_or("");
        let t_us: u64 = match first.parse() {
            Ok(t) => t,
            Err(_) if i == 0 => continue, // header line
            Err(e) => {
                return Err(EventIoError::Parse {
                    line: line_no,
                    msg: format!("timestamp '{first}': {e}"),
                })
            }
        };
        let mut next_f64 = |name: &str| -> Result<f64, EventIoError> {
            let s = fields.next().ok_or(EventIoError::Parse {
                line: line_no,
                msg: format!("missing field '{name}'"),
            })?;
            s.parse().map_err(|e| EventIoError::Parse {
                line: line_no,
                msg: format!("{name} '{s}': {e}"),
            })
        };
        let x = next_f64("x")?;
        let y = next_f64("y")?;
        let p = next_f64("p")? as i64;
        let polarity = match p {
            0 => -1,
            1 => 1,
            -1 => -1,
            v => return Err(EventIoError::BadPolarity { line: line_no, value: v }),
        };
        if !sensor.contains(x, y) {
            return Err(EventIoError::OutOfBounds {
                line: line_no,
                x,
                y,
                width: sensor.width,
                height: sensor.height,
            });
        }
        events.push(Event { t_us, x, y, polarity });
    }
    Ok(events)
}

const BINARY_RECORD_LEN: usize = 13;

fn parse_binary<R: Read>(
    mut reader: R,
    sensor: SensorGeometry,
) -> Result<Vec<Event>, EventIoError> {
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf)?;
    if buf.len() % BINARY_RECORD_LEN != 0 {
        return Err(EventIoError::Truncated {
            offset: buf.len() - buf.len() % BINARY_RECORD_LEN,
        });
    }
    let mut events = Vec::with_capacity(buf.len() / BINARY_RECORD_LEN);
    for (i, rec) in buf.chunks_exact(BINARY_RECORD_LEN).enumerate() {
        let t_us = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap()) as f64;
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap()) as f64;
        let p = rec[12] as i8;
        let polarity = match p {
            1 => 1,
            -1 => -1,
            0 => -1,
            v => {
                return Err(EventIoError::BadPolarity {
                    line: i + 1,
                    value: v as i64,
                })
            }
        };
        if !sensor.contains(x, y) {
            return Err(EventIoError::OutOfBounds {
                line: i + 1,
                x,
                y,
                width: sensor.width,
                height: sensor.height,
            });
        }
        events.push(Event { t_us, x, y, polarity });
    }
    Ok(events)
}

fn restore_order(events: &mut [Event], max_disorder_us: u64) -> Result<(), EventIoError> {
    let mut max_seen = 0u64;
    let mut worst = 0u64;
    let mut worst_at = 0usize;
    for (i, e) in events.iter().enumerate() {
        if e.t_us < max_seen {
            let d = max_seen - e.t_us;
            if d > worst {
                worst = d;
                worst_at = i + 1;
            }
        }
        max_seen = max_seen.max(e.t_us);
    }
    if worst > max_disorder_us {
        return Err(EventIoError::OutOfOrder {
            line: worst_at,
            disorder_us: worst,
            max_us: max_disorder_us,
        });
    }
    if worst > 0 {
        events.sort_by_key(|e| e.t_us);
    }
    Ok(())
}

/// Write events in the given format. Binary records quantize pixels to u16.
pub fn save_events(path: &Path, format: EventFormat, events: &[Event]) -> Result<(), EventIoError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    match format {
        EventFormat::Csv => {
            for e in events {
                let p = if e.polarity > 0 { 1 } else { 0 };
                writeln!(w, "{},{},{},{}", e.t_us, e.x, e.y, p)?;
            }
        }
        EventFormat::Binary => {
            for e in events {
                w.write_all(&e.t_us.to_le_bytes())?;
                w.write_all(&(e.x.round() as u16).to_le_bytes())?;
                w.write_all(&(e.y.round() as u16).to_le_bytes())?;
                w.write_all(&[(if e.polarity > 0 { 1i8 } else { -1i8 }) as u8])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Adaptive windowing parameters. The base interval `tau` grows by
/// `growth_step_mult * tau` per failed detection attempt between
/// `min_mult * tau` and `max_mult * tau`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowingConfig {
    /// Base interval duration in microseconds.
    pub tau_us: u64,
    pub min_mult: f64,
    pub max_mult: f64,
    /// Minimum inter-window gap as a multiple of tau.
    pub gap_mult: f64,
    /// Event-count cap per window; above it the candidate is abandoned.
    pub max_events: usize,
    /// Right-edge growth per failed attempt, as a multiple of tau.
    pub growth_step_mult: f64,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        Self {
            tau_us: 15_000,
            min_mult: 1.0,
            max_mult: 4.0,
            gap_mult: 2.0,
            max_events: 30_000,
            growth_step_mult: 0.5,
        }
    }
}

impl WindowingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.tau_us == 0 {
            return Err("tau_us must be positive".into());
        }
        if !(self.min_mult > 0.0 && self.min_mult < self.max_mult) {
            return Err("need 0 < min_mult < max_mult".into());
        }
        if self.gap_mult <= 0.0 {
            return Err("gap_mult must be positive".into());
        }
        if self.max_events == 0 {
            return Err("max_events must be positive".into());
        }
        if self.growth_step_mult <= 0.0 {
            return Err("growth_step_mult must be positive".into());
        }
        Ok(())
    }
}

/// A temporal accumulation of events, the raw material of one reference frame.
#[derive(Debug, Clone)]
pub struct EventWindow {
    /// Timestamp of the first contained event.
    pub t_start_us: u64,
    /// Timestamp of the last contained event.
    pub t_end_us: u64,
    /// Index of the first contained event in the source stream.
    pub first_index: usize,
    /// Contained events, in timestamp order.
    pub events: Vec<Event>,
}

impl EventWindow {
    /// Window timestamp: center of the event interval, in microseconds.
    pub fn t_ref_us(&self) -> f64 {
        (self.t_start_us as f64 + self.t_end_us as f64) / 2.0
    }

    pub fn t_ref_sec(&self) -> f64 {
        self.t_ref_us() * 1e-6
    }

    pub fn duration_us(&self) -> u64 {
        self.t_end_us - self.t_start_us
    }

    /// Global stream index of the i-th contained event.
    pub fn global_index(&self, i: usize) -> usize {
        self.first_index + i
    }
}

/// Counters describing how the windowing scan went.
#[derive(Debug, Clone, Copy, Default)]
pub struct WindowingStats {
    pub accepted: usize,
    pub abandoned_too_many_events: usize,
    pub abandoned_no_detection: usize,
    pub detection_attempts: usize,
}

/// Scan the stream, growing candidate intervals until the detector accepts.
///
/// Invariants on the output: every accepted window's event span lies in
/// `[min_mult*tau, max_mult*tau]`, windows are disjoint, and consecutive
/// windows are separated by at least `gap_mult*tau`.
pub fn window_events<T>(
    stream: &[Event],
    config: &WindowingConfig,
    mut detector: impl FnMut(&EventWindow) -> Option<T>,
) -> (Vec<(EventWindow, T)>, WindowingStats) {
    let mut out = Vec::new();
    let mut stats = WindowingStats::default();
    if stream.is_empty() {
        return (out, stats);
    }
    let tau = config.tau_us as f64;
    let min_dur = config.min_mult * tau;
    let max_dur = config.max_mult * tau;
    let gap = config.gap_mult * tau;
    let step = config.growth_step_mult * tau;

    let t_last_stream = stream[stream.len() - 1].t_us as f64;
    let mut left = stream[0].t_us as f64;

    'scan: while left <= t_last_stream {
        let lo = partition_by_time(stream, left);
        let mut dur = min_dur;
        loop {
            let right = left + dur;
            let hi = partition_by_time(stream, right + 1.0); // inclusive right edge
            let count = hi - lo;
            if count > config.max_events {
                stats.abandoned_too_many_events += 1;
                left += gap;
                continue 'scan;
            }
            if count >= 2 {
                let span = stream[hi - 1].t_us - stream[lo].t_us;
                if (span as f64) >= min_dur && (span as f64) <= max_dur {
                    stats.detection_attempts += 1;
                    let window = EventWindow {
                        t_start_us: stream[lo].t_us,
                        t_end_us: stream[hi - 1].t_us,
                        first_index: lo,
                        events: stream[lo..hi].to_vec(),
                    };
                    if let Some(d) = detector(&window) {
                        stats.accepted += 1;
                        left = window.t_end_us as f64 + gap;
                        out.push((window, d));
                        continue 'scan;
                    }
                }
            }
            if dur >= max_dur {
                stats.abandoned_no_detection += 1;
                left += gap;
                continue 'scan;
            }
            dur = (dur + step).min(max_dur);
        }
    }
    (out, stats)
}

/// Index of the first event with timestamp >= t.
fn partition_by_time(stream: &[Event], t: f64) -> usize {
    stream.partition_point(|e| (e.t_us as f64) < t)
}
