//! Independent re-implementation of inflow/outflow counting and random
//! trajectory fixtures.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use star_core::grid::{GridSpec, Trajectory, TrajectoryPoint};

pub fn random_grid(rng: &mut ChaCha8Rng) -> GridSpec {
    let lat_min = rng.gen_range(-60.0..60.0);
    let lon_min = rng.gen_range(-170.0..170.0);
    GridSpec {
        rows: rng.gen_range(1..=7),
        cols: rng.gen_range(1..=7),
        lat_min,
        lat_max: lat_min + rng.gen_range(0.01..2.0),
        lon_min,
        lon_max: lon_min + rng.gen_range(0.01..2.0),
        interval_seconds: rng.gen_range(60..3600),
        epoch_start: rng.gen_range(0..2_000_000_000),
    }
}

/// Points wander around the box, some of them outside it, with timestamps
/// starting shortly before `epoch_start`.
pub fn random_trajectory(rng: &mut ChaCha8Rng, g: &GridSpec, id: usize, inside_only: bool) -> Trajectory {
    let margin = if inside_only { 0.0 } else { 0.15 };
    let (dlat, dlon) = (g.lat_max - g.lat_min, g.lon_max - g.lon_min);
    let mut ts = g.epoch_start - rng.gen_range(0..2 * g.interval_seconds as i64);
    let n = rng.gen_range(0..25);
    let points = (0..n)
        .map(|_| {
            ts += rng.gen_range(0..g.interval_seconds as i64);
            let u: f64 = rng.gen_range(-margin..1.0 + margin);
            let v: f64 = rng.gen_range(-margin..1.0 + margin);
            let corner = rng.gen_bool(0.03);
            TrajectoryPoint {
                timestamp: ts,
                lat: if corner { g.lat_max } else { g.lat_min + u * dlat },
                lon: if corner { g.lon_max } else { g.lon_min + v * dlon },
            }
        })
        .collect();
    Trajectory {
        id: format!("a{id}"),
        points,
    }
}

/// Cell membership by scanning each row/column band.
pub fn oracle_cell(p: &TrajectoryPoint, g: &GridSpec) -> Option<(usize, usize)> {
    let band = |v: f64, lo: f64, hi: f64, n: usize| -> Option<usize> {
        if v < lo || v > hi || v.is_nan() {
            return None;
        }
        let u = (v - lo) / (hi - lo) * n as f64;
        (0..n).find(|&i| u >= i as f64 && (u < (i + 1) as f64 || i == n - 1))
    };
    Some((
        band(p.lat, g.lat_min, g.lat_max, g.rows)?,
        band(p.lon, g.lon_min, g.lon_max, g.cols)?,
    ))
}

/// Per (interval, cell), count pairs leaving / entering it.
pub fn oracle_counts(trajs: &[Trajectory], g: &GridSpec, t0: usize, t1: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for t in t0..t1 {
        let lo = g.epoch_start + t as i64 * g.interval_seconds as i64;
        let hi = lo + g.interval_seconds as i64;
        for channel in 0..2 {
            for i in 0..g.rows {
                for j in 0..g.cols {
                    let mut n = 0u32;
                    for tr in trajs {
                        for k in 1..tr.points.len() {
                            let (a, b) = (&tr.points[k - 1], &tr.points[k]);
                            if a.timestamp < lo || a.timestamp >= hi {
                                continue;
                            }
                            let (ca, cb) = (oracle_cell(a, g), oracle_cell(b, g));
                            let here = Some((i, j));
                            let hit = if channel == 0 {
                                ca != here && cb == here
                            } else {
                                ca == here && cb != here
                            };
                            n += hit as u32;
                        }
                    }
                    out.push(n as f32);
                }
            }
        }
    }
    out
}
