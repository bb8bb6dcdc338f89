//! Keyframe selection and model-input assembly.
//!
//! Frames are picked from three temporal fragments relative to the target
//! interval `t`: closeness (the last few intervals), period (one period span
//! back, plus a short sub-fragment) and trend (one trend span back, plus the
//! same sub-fragment). The selected frames are stacked along the channel axis
//! in queue order, inflow before outflow.

mod external;
mod instances;
mod scaler;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::FrameSeries;
use crate::tensor::Tensor;

pub use external::{CategoricalSlot, ExternalFeatureSpec};
pub use instances::{instance_at, make_instances, model_input, TrainingInstance};
pub use scaler::{fit_scaler, MinMaxScaler};

/// Fragment lengths and spans for keyframe selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeConfig {
    /// Closeness fragment length `l_c`.
    pub closeness: usize,
    /// Period fragment length `l_p`.
    pub period: usize,
    /// Trend fragment length `l_q`.
    pub trend: usize,
    /// Sub-fragment length `l_r`; each period/trend anchor also takes the
    /// `l_r` intervals before it.
    pub sub_fragment: usize,
    /// Period span `p` in intervals (one day).
    pub period_span: usize,
    /// Trend span `q` in intervals (one week).
    pub trend_span: usize,
}

impl KeyframeConfig {
    /// Day/week spans for a given number of intervals per day.
    pub fn daily_weekly(
        closeness: usize,
        period: usize,
        trend: usize,
        sub_fragment: usize,
        intervals_per_day: usize,
    ) -> Self {
        Self {
            closeness,
            period,
            trend,
            sub_fragment,
            period_span: intervals_per_day,
            trend_span: 7 * intervals_per_day,
        }
    }

    /// `(3, 1, 1, 2)` on 30-minute intervals: nine keyframes.
    pub fn star_default() -> Self {
        Self::daily_weekly(3, 1, 1, 2, 48)
    }

    /// `(2, 1, 1, 1)` on 30-minute intervals: offsets 1, 2, 48, 49, 336, 337.
    pub fn six_frame() -> Self {
        Self::daily_weekly(2, 1, 1, 1, 48)
    }

    /// Closeness 3, one day and one week back, no sub-fragment: offsets 1, 2,
    /// 3, 48, 336, the same frames ST-ResNet consumes.
    pub fn st311() -> Self {
        Self::daily_weekly(3, 1, 1, 0, 48)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames() == 0 {
            return Err(Error::Config("keyframe selection is empty".into()));
        }
        if self.period > 0 && self.period_span == 0 {
            return Err(Error::Config("period_span must be positive".into()));
        }
        if self.trend > 0 && self.trend_span == 0 {
            return Err(Error::Config("trend_span must be positive".into()));
        }
        if self.period > 0 && self.trend > 0 && self.period_span >= self.trend_span {
            return Err(Error::Config(format!(
                "period_span ({}) must be shorter than trend_span ({})",
                self.period_span, self.trend_span
            )));
        }
        Ok(())
    }

    /// Number of selected frames `L`.
    pub fn num_frames(&self) -> usize {
        self.closeness + (self.period + self.trend) * (self.sub_fragment + 1)
    }

    /// Channels of the stacked input, `2L`.
    pub fn input_channels(&self) -> usize {
        2 * self.num_frames()
    }

    /// Offsets in queue order; frame index is `t - offset`.
    pub fn offsets(&self) -> Vec<usize> {
        let mut queue = Vec::with_capacity(self.num_frames());
        queue.extend(1..=self.closeness);
        for (len, span) in [(self.period, self.period_span), (self.trend, self.trend_span)] {
            for i in 1..=len {
                for r in 0..=self.sub_fragment {
                    queue.push(i * span + r);
                }
            }
        }
        queue
    }

    pub fn max_offset(&self) -> usize {
        self.offsets().into_iter().max().unwrap_or(0)
    }

    /// Smallest offset that is not part of the closeness fragment. Multi-step
    /// rollouts longer than this would feed predictions into period/trend slots.
    pub fn min_long_range_offset(&self) -> Option<usize> {
        match (self.period, self.trend) {
            (0, 0) => None,
            (0, _) => Some(self.trend_span),
            _ => Some(self.period_span),
        }
    }
}

/// Keyframe offsets for target interval `t`.
pub fn select_keyframes(t: usize, cfg: &KeyframeConfig) -> Result<Vec<usize>> {
    let offsets = cfg.offsets();
    let required = offsets.iter().copied().max().unwrap_or(0);
    if t < required {
        return Err(Error::OutOfHistory { t, required });
    }
    Ok(offsets)
}

/// Stacks frames `t - offset` (in offset order) into a `2L×I×J` tensor.
/// Channel `2k` is the inflow of the k-th keyframe, `2k+1` its outflow.
/// Values are copied as-is; scaling happens in [`instance_at`].
pub fn build_input_tensor(series: &FrameSeries, t: usize, offsets: &[usize]) -> Result<Tensor<f32>> {
    if offsets.is_empty() {
        return Err(Error::contract("build_input_tensor", "no offsets given"));
    }
    let g = series.grid();
    let mut data = Vec::with_capacity(offsets.len() * 2 * g.cells());
    for &o in offsets {
        let idx = t.checked_sub(o).ok_or(Error::OutOfHistory { t, required: o })?;
        let frame = series.frame(idx).ok_or_else(|| {
            Error::contract(
                "build_input_tensor",
                format!("frame {idx} lies beyond the end of the series ({} frames)", series.len()),
            )
        })?;
        data.extend_from_slice(frame.data());
    }
    Tensor::new([2 * offsets.len(), g.rows, g.cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::series::FlowFrame;

    #[test]
    fn worked_example_offsets() {
        assert_eq!(
            select_keyframes(400, &KeyframeConfig::six_frame()).unwrap(),
            [1, 2, 48, 49, 336, 337]
        );
        assert_eq!(
            select_keyframes(338, &KeyframeConfig::star_default()).unwrap(),
            [1, 2, 3, 48, 49, 50, 336, 337, 338]
        );
        assert_eq!(KeyframeConfig::st311().offsets(), [1, 2, 3, 48, 336]);
    }

    #[test]
    fn closeness_only() {
        let cfg = KeyframeConfig::daily_weekly(3, 0, 0, 0, 48);
        assert_eq!(select_keyframes(3, &cfg).unwrap(), [1, 2, 3]);
        assert!(matches!(
            select_keyframes(2, &cfg),
            Err(Error::OutOfHistory { t: 2, required: 3 })
        ));
    }

    #[test]
    fn validation() {
        assert!(KeyframeConfig::daily_weekly(0, 0, 0, 3, 48).validate().is_err());
        let mut cfg = KeyframeConfig::star_default();
        cfg.period_span = 400;
        assert!(cfg.validate().is_err());
        assert!(KeyframeConfig::star_default().validate().is_ok());
    }

    fn series(len: usize) -> FrameSeries {
        let grid = GridSpec {
            rows: 2,
            cols: 2,
            lat_min: 0.0,
            lat_max: 1.0,
            lon_min: 0.0,
            lon_max: 1.0,
            interval_seconds: 1800,
            epoch_start: 0,
        };
        let frames = (0..len)
            .map(|t| FlowFrame::new(t, 2, 2, (0..8).map(|i| (t * 100 + i) as f32).collect()).unwrap())
            .collect();
        FrameSeries::new(grid, frames).unwrap()
    }

    #[test]
    fn stacking_order() {
        let s = series(10);
        let x = build_input_tensor(&s, 5, &[1]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 2]);
        assert_eq!(x.data(), s.frame(4).unwrap().data());

        let x = build_input_tensor(&s, 9, &[1, 3, 2]).unwrap();
        assert_eq!(x.shape(), &[6, 2, 2]);
        assert_eq!(&x.data()[8..16], s.frame(6).unwrap().data());
        // channel 2k inflow, 2k+1 outflow of frame k
        assert_eq!(&x.data()[16..20], s.frame(7).unwrap().inflow());
        assert_eq!(&x.data()[20..24], s.frame(7).unwrap().outflow());

        assert!(matches!(
            build_input_tensor(&s, 2, &[3]),
            Err(Error::OutOfHistory { .. })
        ));
    }
}
