use super::{build_input_tensor, select_keyframes, ExternalFeatureSpec, KeyframeConfig, MinMaxScaler};
use crate::error::{Error, Result};
use crate::series::FrameSeries;
use crate::tensor::Tensor;

/// One supervised example on the normalized scale.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    /// Stacked keyframes, `2L×I×J`.
    pub input: Tensor<f32>,
    /// External features of the target interval.
    pub external: Vec<f32>,
    /// Frame `t`, `2×I×J`.
    pub target: Tensor<f32>,
    pub t: usize,
}

/// Scaled keyframe stack and external features for predicting interval `t`.
/// Only frames before `t` are read, so `t` may equal `series.len()`.
pub fn model_input(
    series: &FrameSeries,
    t: usize,
    cfg: &KeyframeConfig,
    scaler: &MinMaxScaler,
    spec: &ExternalFeatureSpec,
) -> Result<(Tensor<f32>, Vec<f32>)> {
    let offsets = select_keyframes(t, cfg)?;
    let raw = build_input_tensor(series, t, &offsets)?;
    Ok((scaler.scale_tensor(&raw), spec.features(t, series.grid())))
}

pub fn instance_at(
    series: &FrameSeries,
    t: usize,
    cfg: &KeyframeConfig,
    scaler: &MinMaxScaler,
    spec: &ExternalFeatureSpec,
) -> Result<TrainingInstance> {
    let frame = series.frame(t).ok_or_else(|| {
        Error::contract(
            "instance_at",
            format!("target interval {t} is beyond the series ({} frames)", series.len()),
        )
    })?;
    let (input, external) = model_input(series, t, cfg, scaler, spec)?;
    Ok(TrainingInstance {
        input,
        external,
        target: scaler.scale_tensor(&frame.to_tensor()),
        t,
    })
}

/// One instance per target `t` in `max_offset..T`, in time order.
pub fn make_instances(
    series: &FrameSeries,
    cfg: &KeyframeConfig,
    scaler: &MinMaxScaler,
    spec: &ExternalFeatureSpec,
) -> Result<Vec<TrainingInstance>> {
    cfg.validate()?;
    let first = cfg.max_offset();
    if series.len() <= first {
        return Err(Error::OutOfHistory {
            t: series.len(),
            required: first + 1,
        });
    }
    (first..series.len())
        .map(|t| instance_at(series, t, cfg, scaler, spec))
        .collect()
}
