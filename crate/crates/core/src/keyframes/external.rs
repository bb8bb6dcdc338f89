use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

const SECONDS_PER_DAY: i64 = 86_400;

/// Calendar metadata encoded for the external branch of the network.
///
/// The vector is the concatenation, in this order, of the enabled blocks:
/// time-of-day one-hot (`intervals_per_day` wide), day-of-week one-hot
/// (Monday first, 7 wide), weekend flag, holiday flag, then one one-hot per
/// extra categorical slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalFeatureSpec {
    pub intervals_per_day: usize,
    #[serde(default = "yes")]
    pub time_of_day: bool,
    #[serde(default = "yes")]
    pub day_of_week: bool,
    #[serde(default = "yes")]
    pub weekend: bool,
    #[serde(default = "yes")]
    pub holiday: bool,
    /// Dates (UTC) on which the holiday flag is set.
    #[serde(default)]
    pub holidays: Vec<NaiveDate>,
    #[serde(default)]
    pub extra: Vec<CategoricalSlot>,
}

fn yes() -> bool {
    true
}

/// A categorical external factor (weather class, event type, ...) whose
/// value per interval is supplied by the caller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalSlot {
    pub name: String,
    pub cardinality: usize,
    /// Category for specific interval indices; others use `default`.
    #[serde(default)]
    pub values: BTreeMap<usize, usize>,
    #[serde(default)]
    pub default: usize,
}

impl ExternalFeatureSpec {
    /// Time-of-day, day-of-week, weekend and holiday blocks.
    pub fn time_metadata(intervals_per_day: usize) -> Self {
        Self {
            intervals_per_day,
            time_of_day: true,
            day_of_week: true,
            weekend: true,
            holiday: true,
            holidays: Vec::new(),
            extra: Vec::new(),
        }
    }

    pub fn disabled(intervals_per_day: usize) -> Self {
        Self {
            intervals_per_day,
            time_of_day: false,
            day_of_week: false,
            weekend: false,
            holiday: false,
            holidays: Vec::new(),
            extra: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.intervals_per_day == 0 {
            return Err(Error::Config("intervals_per_day must be positive".into()));
        }
        for slot in &self.extra {
            if slot.cardinality == 0 {
                return Err(Error::Config(format!("slot {:?} has zero cardinality", slot.name)));
            }
            let bad = std::iter::once(slot.default)
                .chain(slot.values.values().copied())
                .find(|&v| v >= slot.cardinality);
            if let Some(v) = bad {
                return Err(Error::Config(format!(
                    "slot {:?}: category {v} outside 0..{}",
                    slot.name, slot.cardinality
                )));
            }
        }
        Ok(())
    }

    /// Length of the feature vector, `D_ext`.
    pub fn dim(&self) -> usize {
        let mut d = 0;
        if self.time_of_day {
            d += self.intervals_per_day;
        }
        if self.day_of_week {
            d += 7;
        }
        d += self.weekend as usize + self.holiday as usize;
        d + self.extra.iter().map(|s| s.cardinality).sum::<usize>()
    }

    /// Features describing interval `t` of `grid`.
    pub fn features(&self, t: usize, grid: &GridSpec) -> Vec<f32> {
        let ts = grid.interval_start(t);
        let days = ts.div_euclid(SECONDS_PER_DAY);
        let secs = ts.rem_euclid(SECONDS_PER_DAY);
        // 1970-01-01 was a Thursday; Monday = 0
        let dow = (days + 3).rem_euclid(7) as usize;

        let mut v = Vec::with_capacity(self.dim());
        if self.time_of_day {
            let slot = (secs as usize * self.intervals_per_day) / SECONDS_PER_DAY as usize;
            push_one_hot(&mut v, slot, self.intervals_per_day);
        }
        if self.day_of_week {
            push_one_hot(&mut v, dow, 7);
        }
        if self.weekend {
            v.push(if dow >= 5 { 1.0 } else { 0.0 });
        }
        if self.holiday {
            let date = DateTime::from_timestamp(days * SECONDS_PER_DAY, 0).map(|d| d.date_naive());
            let hit = date.is_some_and(|d| self.holidays.contains(&d));
            v.push(if hit { 1.0 } else { 0.0 });
        }
        for slot in &self.extra {
            let c = slot.values.get(&t).copied().unwrap_or(slot.default);
            push_one_hot(&mut v, c, slot.cardinality);
        }
        v
    }
}

fn push_one_hot(v: &mut Vec<f32>, hot: usize, width: usize) {
    v.extend((0..width).map(|i| if i == hot { 1.0 } else { 0.0 }));
}
