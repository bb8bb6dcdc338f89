use serde::{Deserialize, Serialize};

use crate::series::FlowFrame;
use crate::tensor::Tensor;

/// Global min-max map onto `[-1, 1]`, shared by both flow channels and all cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinMaxScaler {
    pub min_val: f64,
    pub max_val: f64,
}

/// Fits on the given (training) frames only. An empty slice yields the
/// degenerate scaler `[0, 0]`.
pub fn fit_scaler(frames: &[FlowFrame]) -> MinMaxScaler {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in frames.iter().flat_map(|f| f.data()) {
        min = min.min(*v as f64);
        max = max.max(*v as f64);
    }
    if min > max {
        return MinMaxScaler {
            min_val: 0.0,
            max_val: 0.0,
        };
    }
    MinMaxScaler {
        min_val: min,
        max_val: max,
    }
}

impl MinMaxScaler {
    pub fn new(min_val: f64, max_val: f64) -> Self {
        assert!(max_val >= min_val, "max_val < min_val");
        Self { min_val, max_val }
    }

    pub fn range(&self) -> f64 {
        self.max_val - self.min_val
    }

    /// `2(x − min)/(max − min) − 1`; a degenerate range maps everything to 0.
    /// Values outside the fitted range are not clipped.
    pub fn scale(&self, x: f64) -> f64 {
        let r = self.range();
        if r == 0.0 {
            0.0
        } else {
            2.0 * (x - self.min_val) / r - 1.0
        }
    }

    /// Inverse of [`MinMaxScaler::scale`]. For a degenerate range every value
    /// maps back to `min`.
    pub fn unscale(&self, y: f64) -> f64 {
        (y + 1.0) * 0.5 * self.range() + self.min_val
    }

    pub fn scale_tensor(&self, t: &Tensor<f32>) -> Tensor<f32> {
        t.map(|v| self.scale(v as f64) as f32)
    }

    pub fn unscale_tensor(&self, t: &Tensor<f32>) -> Tensor<f32> {
        t.map(|v| self.unscale(v as f64) as f32)
    }
}
