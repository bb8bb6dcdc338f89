//! City grid, trajectory parsing, and inflow/outflow counting.

use std::collections::HashMap;
use std::io::BufRead;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{FlowFrame, FrameSeries};

/// Uniform `rows × cols` partition of a lat/lon bounding box plus the time
/// axis: interval `t` starts at `epoch_start + t·interval_seconds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub interval_seconds: u32,
    pub epoch_start: i64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config(format!(
                "grid must have at least one row and column, got {}×{}",
                self.rows, self.cols
            )));
        }
        if !(self.lat_min < self.lat_max) || !(self.lon_min < self.lon_max) {
            return Err(Error::Config(format!(
                "grid bounds must satisfy lat_min < lat_max and lon_min < lon_max, got lat [{}, {}] lon [{}, {}]",
                self.lat_min, self.lat_max, self.lon_min, self.lon_max
            )));
        }
        if self.interval_seconds == 0 {
            return Err(Error::Config("interval_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Interval containing an absolute timestamp, or `None` before `epoch_start`.
    pub fn interval_of(&self, timestamp: i64) -> Option<usize> {
        let dt = timestamp.checked_sub(self.epoch_start)?;
        (dt >= 0).then(|| (dt / self.interval_seconds as i64) as usize)
    }

    /// Absolute start time of interval `t`.
    pub fn interval_start(&self, t: usize) -> i64 {
        self.epoch_start + t as i64 * self.interval_seconds as i64
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let dlat = (self.lat_max - self.lat_min) / self.rows as f64;
        let dlon = (self.lon_max - self.lon_min) / self.cols as f64;
        (
            self.lat_min + (row as f64 + 0.5) * dlat,
            self.lon_min + (col as f64 + 0.5) * dlon,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
}

/// Time-ordered points sharing one `traj_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<TrajectoryPoint>,
}

/// Result of [`assign_cell`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Inside { row: usize, col: usize },
    Outside,
}

/// Uniform binning: cells are half-open `[low, high)` except the last row and
/// column, which also contain the maximum bound.
pub fn assign_cell(point: &TrajectoryPoint, grid: &GridSpec) -> Cell {
    match (
        bin(point.lat, grid.lat_min, grid.lat_max, grid.rows),
        bin(point.lon, grid.lon_min, grid.lon_max, grid.cols),
    ) {
        (Some(row), Some(col)) => Cell::Inside { row, col },
        _ => Cell::Outside,
    }
}

fn bin(v: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    let idx = ((v - lo) / (hi - lo) * n as f64).floor() as usize;
    Some(idx.min(n - 1))
}

pub const CSV_HEADER: &str = "traj_id,timestamp,lat,lon";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedTrajectories {
    pub trajectories: Vec<Trajectory>,
    /// Malformed lines skipped in lenient mode.
    pub skipped: usize,
}

/// Reads `traj_id,timestamp,lat,lon` CSV. `#` lines and blank lines are
/// ignored. Trajectories keep first-appearance order and their points are
/// stably sorted by timestamp.
pub fn parse_trajectories<R: BufRead>(reader: R, strict: bool) -> Result<ParsedTrajectories> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut out = ParsedTrajectories::default();
    let mut seen_header = false;

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !seen_header {
            seen_header = true;
            if trimmed == CSV_HEADER {
                continue;
            }
            if strict {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected header {CSV_HEADER:?}"),
                });
            }
        }
        match parse_row(trimmed) {
            Ok((id, point)) => {
                let slot = *index.entry(id.to_string()).or_insert_with(|| {
                    out.trajectories.push(Trajectory {
                        id: id.to_string(),
                        points: Vec::new(),
                    });
                    out.trajectories.len() - 1
                });
                out.trajectories[slot].points.push(point);
            }
            Err(message) if strict => {
                return Err(Error::Parse {
                    line: line_no,
                    message,
                })
            }
            Err(_) => out.skipped += 1,
        }
    }

    for traj in &mut out.trajectories {
        traj.points.sort_by_key(|p| p.timestamp);
    }
    Ok(out)
}

fn parse_row(line: &str) -> std::result::Result<(&str, TrajectoryPoint), String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    if fields[0].is_empty() {
        return Err("empty traj_id".into());
    }
    let timestamp = fields[1]
        .parse::<i64>()
        .map_err(|e| format!("timestamp {:?}: {e}", fields[1]))?;
    let lat = parse_coord("lat", fields[2])?;
    let lon = parse_coord("lon", fields[3])?;
    Ok((fields[0], TrajectoryPoint { timestamp, lat, lon }))
}

fn parse_coord(name: &str, s: &str) -> std::result::Result<f64, String> {
    let v = s.parse::<f64>().map_err(|e| format!("{name} {s:?}: {e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{name} must be finite, got {s:?}"))
    }
}

/// Writes trajectories in the CSV format read by [`parse_trajectories`].
pub fn write_trajectories<W: std::io::Write>(trajs: &[Trajectory], mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for t in trajs {
        for p in &t.points {
            writeln!(w, "{},{},{:.7},{:.7}", t.id, p.timestamp, p.lat, p.lon)?;
        }
    }
    Ok(())
}

/// Counts inflow and outflow per cell and interval.
///
/// Each consecutive point pair within a trajectory that changes cell adds one
/// to the outflow of the source cell and one to the inflow of the destination
/// cell. The transition is attributed to the interval of the earlier point.
/// Outside points count as "not in the cell", so only the in-grid side of a
/// border crossing is incremented. The returned series is re-based so that
/// `t_range.start` becomes frame 0.
pub fn count_flows(
    trajectories: &[Trajectory],
    grid: &GridSpec,
    t_range: Range<usize>,
) -> Result<FrameSeries> {
    grid.validate()?;
    if t_range.is_empty() {
        return Err(Error::contract(
            "count_flows",
            format!("empty interval range {t_range:?}"),
        ));
    }
    let (rows, cols) = (grid.rows, grid.cols);
    let plane = rows * cols;
    let mut counts = vec![0u32; t_range.len() * 2 * plane];

    for traj in trajectories {
        for pair in traj.points.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let Some(t) = grid.interval_of(a.timestamp) else { continue };
            if !t_range.contains(&t) {
                continue;
            }
            let (ca, cb) = (assign_cell(a, grid), assign_cell(b, grid));
            if ca == cb {
                continue;
            }
            let base = (t - t_range.start) * 2 * plane;
            if let Cell::Inside { row, col } = cb {
                counts[base + row * cols + col] += 1;
            }
            if let Cell::Inside { row, col } = ca {
                counts[base + plane + row * cols + col] += 1;
            }
        }
    }

    let frames = counts
        .chunks(2 * plane)
        .enumerate()
        .map(|(t, c)| FlowFrame::new(t, rows, cols, c.iter().map(|&v| v as f32).collect()))
        .collect::<Result<Vec<_>>>()?;
    let mut rebased = grid.clone();
    rebased.epoch_start = grid.interval_start(t_range.start);
    FrameSeries::new(rebased, frames)
}
