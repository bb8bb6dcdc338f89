//! Synthetic mobility data with daily and weekly structure.
//!
//! Frame mode writes flows directly:
//! `base + w_ij·(A_d·sin(2π·τ/ipd) + A_w·sin(2π·t/(7·ipd))) + |N(0, σ)|`,
//! clamped at 0, where `w_ij ∈ [0.5, 1.5]` is a fixed per-cell weight and
//! `τ` the interval of the day.
//!
//! Trajectory mode simulates commuting agents on the grid. Each agent has a
//! home and a work cell and, in every interval, may step one cell toward its
//! current destination. The step probability follows the time of day, drops
//! at weekends and is scaled by a random per-day demand level.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use star_core::grid::{count_flows, GridSpec, Trajectory, TrajectoryPoint};
use star_core::series::{FlowFrame, FrameSeries};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    Frame,
    Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub mode: SynthMode,
    pub rows: usize,
    pub cols: usize,
    pub weeks: usize,
    /// Days appended after the whole weeks (e.g. a short test span).
    #[serde(default)]
    pub extra_days: usize,
    pub intervals_per_day: usize,
    /// Frame mode: mean flow per cell. Trajectory mode: mean per-interval
    /// step probability of an agent.
    pub base_intensity: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    /// Frame mode: σ of the half-normal noise. Trajectory mode: probability
    /// of a random step away from the route.
    pub noise: f64,
    /// Trajectory mode: number of agents.
    #[serde(default = "default_agents")]
    pub agents: usize,
    /// Trajectory mode: the day's demand level is drawn from
    /// `1 ± day_variation`.
    #[serde(default)]
    pub day_variation: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lat_min")]
    pub lat_min: f64,
    #[serde(default = "default_lat_max")]
    pub lat_max: f64,
    #[serde(default = "default_lon_min")]
    pub lon_min: f64,
    #[serde(default = "default_lon_max")]
    pub lon_max: f64,
    /// Start of interval 0; the default is Monday 2024-01-01 00:00 UTC.
    #[serde(default = "default_epoch")]
    pub epoch_start: i64,
}

fn default_agents() -> usize {
    1000
}
fn default_lat_min() -> f64 {
    39.8
}
fn default_lat_max() -> f64 {
    40.0
}
fn default_lon_min() -> f64 {
    116.25
}
fn default_lon_max() -> f64 {
    116.5
}
fn default_epoch() -> i64 {
    1_704_067_200
}

pub const TAXIBJ_MINI: &str = include_str!("../../../configs/taxibj-mini/synth.json");

pub fn preset(name: &str) -> Option<SynthSpec> {
    match name {
        "taxibj-mini" => Some(serde_json::from_str(TAXIBJ_MINI).expect("bundled preset parses")),
        _ => None,
    }
}

/// Generated data: frames for frame mode, trajectories plus their counted
/// flows for trajectory mode.
#[derive(Clone, Debug)]
pub enum SynthOutput {
    Frames(FrameSeries),
    Trajectories {
        trajectories: Vec<Trajectory>,
        series: FrameSeries,
    },
}

impl SynthOutput {
    pub fn series(&self) -> &FrameSeries {
        match self {
            SynthOutput::Frames(s) => s,
            SynthOutput::Trajectories { series, .. } => series,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Config(m));
        if self.weeks == 0 {
            return fail("weeks must be at least 1".into());
        }
        if self.intervals_per_day == 0 || 86_400 % self.intervals_per_day != 0 {
            return fail(format!(
                "intervals_per_day must divide 86400, got {}",
                self.intervals_per_day
            ));
        }
        for (name, v) in [
            ("base_intensity", self.base_intensity),
            ("daily_amplitude", self.daily_amplitude),
            ("weekly_amplitude", self.weekly_amplitude),
            ("noise", self.noise),
            ("day_variation", self.day_variation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite value ≥ 0, got {v}"));
            }
        }
        if self.mode == SynthMode::Trajectory {
            if self.agents == 0 {
                return fail("agents must be at least 1".into());
            }
            if self.noise > 1.0 || self.base_intensity > 1.0 || self.day_variation >= 1.0 {
                return fail("trajectory mode needs base_intensity, noise ≤ 1 and day_variation < 1".into());
            }
        }
        self.grid().validate()?;
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            rows: self.rows,
            cols: self.cols,
            lat_min: self.lat_min,
            lat_max: self.lat_max,
            lon_min: self.lon_min,
            lon_max: self.lon_max,
            interval_seconds: (86_400 / self.intervals_per_day.max(1)) as u32,
            epoch_start: self.epoch_start,
        }
    }

    pub fn num_intervals(&self) -> usize {
        (7 * self.weeks + self.extra_days) * self.intervals_per_day
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthOutput, CliError> {
    spec.validate()?;
    match spec.mode {
        SynthMode::Frame => Ok(SynthOutput::Frames(frames(spec)?)),
        SynthMode::Trajectory => {
            let trajectories = trajectories(spec);
            let series = count_flows(&trajectories, &spec.grid(), 0..spec.num_intervals())?;
            Ok(SynthOutput::Trajectories { trajectories, series })
        }
    }
}

fn frames(spec: &SynthSpec) -> Result<FrameSeries, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, cols) = (spec.rows, spec.cols);
    let weights: Vec<f64> = (0..2 * rows * cols).map(|_| rng.gen_range(0.5..1.5)).collect();
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("σ > 0"));
    let ipd = spec.intervals_per_day as f64;
    let frames = (0..spec.num_intervals())
        .map(|t| {
            let daily = spec.daily_amplitude * (TAU * (t % spec.intervals_per_day) as f64 / ipd).sin();
            let weekly = spec.weekly_amplitude * (TAU * t as f64 / (7.0 * ipd)).sin();
            let data = weights
                .iter()
                .map(|w| {
                    let eps = noise.map_or(0.0, |n| n.sample(&mut rng).abs());
                    (spec.base_intensity + w * (daily + weekly) + eps).max(0.0) as f32
                })
                .collect();
            FlowFrame::new(t, rows, cols, data)
        })
        .collect::<star_core::Result<Vec<_>>>()?;
    Ok(FrameSeries::new(spec.grid(), frames)?)
}

struct Agent {
    home: (usize, usize),
    work: (usize, usize),
    at: (usize, usize),
}

/// Cells near the centre are more likely as workplaces.
fn central_cell(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (usize, usize) {
    let pick = |rng: &mut ChaCha8Rng, n: usize| {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        (a + b) / 2
    };
    (pick(rng, rows), pick(rng, cols))
}

fn step_toward(at: (usize, usize), to: (usize, usize), rng: &mut ChaCha8Rng) -> (usize, usize) {
    let (mut r, mut c) = at;
    let vertical = if r != to.0 && c != to.1 { rng.gen_bool(0.5) } else { r != to.0 };
    if vertical {
        r = if to.0 > r { r + 1 } else { r - 1 };
    } else if c != to.1 {
        c = if to.1 > c { c + 1 } else { c - 1 };
    }
    (r, c)
}

fn random_neighbour(at: (usize, usize), rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let (r, c) = (at.0 as isize, at.1 as isize);
    let (dr, dc) = [(1, 0), (-1, 0), (0, 1), (0, -1)][rng.gen_range(0..4)];
    (
        (r + dr).clamp(0, rows as isize - 1) as usize,
        (c + dc).clamp(0, cols as isize - 1) as usize,
    )
}

fn trajectories(spec: &SynthSpec) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, cols, ipd) = (spec.rows, spec.cols, spec.intervals_per_day);
    let grid = spec.grid();
    let days = 7 * spec.weeks + spec.extra_days;
    let day_level: Vec<f64> = (0..days)
        .map(|_| 1.0 + spec.day_variation * rng.gen_range(-1.0..1.0))
        .collect();
    let mut agents: Vec<Agent> = (0..spec.agents)
        .map(|_| {
            let home = (rng.gen_range(0..rows), rng.gen_range(0..cols));
            Agent {
                home,
                work: central_cell(&mut rng, rows, cols),
                at: home,
            }
        })
        .collect();
    let mut paths: Vec<Vec<TrajectoryPoint>> = vec![Vec::with_capacity(spec.num_intervals() + 1); agents.len()];
    let (dlat, dlon) = (
        (grid.lat_max - grid.lat_min) / rows as f64,
        (grid.lon_max - grid.lon_min) / cols as f64,
    );

    for t in 0..=spec.num_intervals() {
        let day = (t / ipd).min(days - 1);
        let tod = (t % ipd) as f64 / ipd as f64;
        // Monday is day 0
        let weekend = day % 7 >= 5;
        let profile = 1.0 - spec.daily_amplitude * (TAU * tod).cos();
        let weekly = if weekend { 1.0 - spec.weekly_amplitude } else { 1.0 };
        let p_move = (spec.base_intensity * profile * weekly * day_level[day]).clamp(0.0, 1.0);
        let commuting = !weekend && (0.3..0.72).contains(&tod);
        let start = grid.interval_start(t);
        for (agent, path) in agents.iter_mut().zip(&mut paths) {
            // one point per interval, somewhere inside the current cell
            path.push(TrajectoryPoint {
                timestamp: start + rng.gen_range(0..grid.interval_seconds as i64),
                lat: grid.lat_min + (agent.at.0 as f64 + rng.gen_range(0.05..0.95)) * dlat,
                lon: grid.lon_min + (agent.at.1 as f64 + rng.gen_range(0.05..0.95)) * dlon,
            });
            let dest = if commuting { agent.work } else { agent.home };
            if rng.gen_bool(spec.noise) {
                agent.at = random_neighbour(agent.at, rows, cols, &mut rng);
            } else if agent.at != dest && rng.gen_bool(p_move) {
                agent.at = step_toward(agent.at, dest, &mut rng);
            }
        }
    }
    paths
        .into_iter()
        .enumerate()
        .map(|(i, points)| Trajectory {
            id: format!("agent{i:05}"),
            points,
        })
        .collect()
}
