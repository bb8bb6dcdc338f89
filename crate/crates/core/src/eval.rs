//! RMSE evaluation, single-step and iterated prediction, naive baselines.

use crate::error::{Error, Result};
use crate::keyframes::{model_input, ExternalFeatureSpec, KeyframeConfig, MinMaxScaler, TrainingInstance};
use crate::model::StarModel;
use crate::series::{FlowFrame, FrameSeries};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 64;

/// Root mean squared difference of two equally long slices.
pub fn rmse(pred: &[f32], target: &[f32]) -> f64 {
    assert_eq!(pred.len(), target.len(), "rmse: length mismatch");
    if pred.is_empty() {
        return 0.0;
    }
    let sse: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    (sse / pred.len() as f64).sqrt()
}

/// Stacks instances into `(input, external, target)` batch tensors. The
/// external tensor is `None` when the instances carry no features.
pub fn collate(
    batch: &[&TrainingInstance],
) -> Result<(Tensor<f32>, Option<Tensor<f32>>, Tensor<f32>)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::contract("collate", "empty batch"))?;
    let inputs: Vec<_> = batch.iter().map(|i| &i.input).collect();
    let targets: Vec<_> = batch.iter().map(|i| &i.target).collect();
    let d = first.external.len();
    let external = if d == 0 {
        None
    } else {
        let mut data = Vec::with_capacity(batch.len() * d);
        for inst in batch {
            if inst.external.len() != d {
                return Err(Error::shape(
                    "collate",
                    format!("external length {} vs {d}", inst.external.len()),
                ));
            }
            data.extend_from_slice(&inst.external);
        }
        Some(Tensor::new([batch.len(), d], data)?)
    };
    Ok((Tensor::stack(&inputs)?, external, Tensor::stack(&targets)?))
}

/// Normalized-scale predictions for each instance, `2×I×J` each.
pub fn predict_instances(model: &StarModel, instances: &[TrainingInstance]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(EVAL_BATCH) {
        let refs: Vec<_> = chunk.iter().collect();
        let (x, e, _) = collate(&refs)?;
        let y = model.forward(&x, e.as_ref())?;
        for b in 0..chunk.len() {
            out.push(y.index_outer(b)?);
        }
    }
    Ok(out)
}

fn squared_errors(
    model: &StarModel,
    instances: &[TrainingInstance],
    scaler: Option<&MinMaxScaler>,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::contract("evaluate_rmse", "no instances to evaluate"));
    }
    let preds = predict_instances(model, instances)?;
    let (mut sse, mut n) = (0.0f64, 0usize);
    for (p, inst) in preds.iter().zip(instances) {
        for (&a, &b) in p.data().iter().zip(inst.target.data()) {
            let d = match scaler {
                Some(s) => s.unscale(a as f64) - s.unscale(b as f64),
                None => a as f64 - b as f64,
            };
            sse += d * d;
        }
        n += p.len();
    }
    Ok((sse / n as f64).sqrt())
}

/// RMSE over all cells, channels and instances on the original flow scale.
pub fn evaluate_rmse(model: &StarModel, instances: &[TrainingInstance], scaler: &MinMaxScaler) -> Result<f64> {
    squared_errors(model, instances, Some(scaler))
}

/// RMSE on the `[-1, 1]` scale the network works in.
pub fn normalized_rmse(model: &StarModel, instances: &[TrainingInstance]) -> Result<f64> {
    squared_errors(model, instances, None)
}

/// Unscaled prediction of frame `t` from frames `< t` of `series`.
pub fn predict_next(
    model: &StarModel,
    series: &FrameSeries,
    t: usize,
    cfg: &KeyframeConfig,
    scaler: &MinMaxScaler,
    spec: &ExternalFeatureSpec,
) -> Result<FlowFrame> {
    let (input, features) = model_input(series, t, cfg, scaler, spec)?;
    let s = input.shape().to_vec();
    let x = input.reshape([1, s[0], s[1], s[2]])?;
    let e = (!features.is_empty())
        .then(|| Tensor::new([1, features.len()], features))
        .transpose()?;
    let y = model.forward(&x, e.as_ref())?;
    let g = series.grid();
    let y = scaler.unscale_tensor(&y).reshape([2, g.rows, g.cols])?;
    FlowFrame::from_tensor(t, &y)
}

/// Predicts `horizon` frames starting at `t_start`, feeding each prediction
/// back as history for the next step. Frames at or after `t_start` in
/// `series` are never read.
pub fn rollout(
    model: &StarModel,
    series: &FrameSeries,
    t_start: usize,
    horizon: usize,
    cfg: &KeyframeConfig,
    scaler: &MinMaxScaler,
    spec: &ExternalFeatureSpec,
) -> Result<Vec<FlowFrame>> {
    if horizon == 0 {
        return Err(Error::contract("rollout", "horizon must be at least 1"));
    }
    if t_start > series.len() {
        return Err(Error::contract(
            "rollout",
            format!("t_start {t_start} is past the end of the series ({} frames)", series.len()),
        ));
    }
    if let Some(span) = cfg.min_long_range_offset() {
        if horizon > span {
            // step `span` would read a predicted frame through a period/trend slot
            return Err(Error::OutOfHistory {
                t: t_start + span,
                required: t_start + span + 1,
            });
        }
    }
    let mut work = series.prefix(t_start);
    let mut out = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let frame = predict_next(model, &work, t_start + h, cfg, scaler, spec)?;
        work.push(frame.clone())?;
        out.push(frame);
    }
    Ok(out)
}

/// Frame `t − 1`, relabelled as `t`.
pub fn baseline_persistence(series: &FrameSeries, t: usize) -> Result<FlowFrame> {
    if t == 0 {
        return Err(Error::OutOfHistory { t, required: 1 });
    }
    let prev = series.frame(t - 1).ok_or_else(|| {
        Error::contract(
            "baseline_persistence",
            format!("t {t} is past the end of the series ({} frames)", series.len()),
        )
    })?;
    FlowFrame::new(t, prev.rows(), prev.cols(), prev.data().to_vec())
}

/// Mean of frames `t − k·week_span` for every `k ≥ 1` that stays in range.
pub fn baseline_historical_average(series: &FrameSeries, t: usize, week_span: usize) -> Result<FlowFrame> {
    if week_span == 0 {
        return Err(Error::contract("baseline_historical_average", "week_span must be positive"));
    }
    if t < week_span {
        return Err(Error::OutOfHistory {
            t,
            required: week_span,
        });
    }
    if t > series.len() {
        return Err(Error::contract(
            "baseline_historical_average",
            format!("t {t} is past the end of the series ({} frames)", series.len()),
        ));
    }
    let g = series.grid();
    let mut acc = vec![0.0f64; 2 * g.cells()];
    let mut k = 0usize;
    let mut idx = t;
    while idx >= week_span {
        idx -= week_span;
        for (a, &v) in acc.iter_mut().zip(series.frames()[idx].data()) {
            *a += v as f64;
        }
        k += 1;
    }
    let data = acc.into_iter().map(|a| (a / k as f64) as f32).collect();
    FlowFrame::new(t, g.rows, g.cols, data)
}

/// RMSE of `predict(t)` against the true frames over `targets`.
pub fn series_rmse<F>(series: &FrameSeries, targets: impl IntoIterator<Item = usize>, mut predict: F) -> Result<f64>
where
    F: FnMut(usize) -> Result<FlowFrame>,
{
    let (mut sse, mut n) = (0.0f64, 0usize);
    for t in targets {
        let truth = series
            .frame(t)
            .ok_or_else(|| Error::contract("series_rmse", format!("no ground truth for t={t}")))?;
        let p = predict(t)?;
        let r = rmse(p.data(), truth.data());
        sse += r * r * p.data().len() as f64;
        n += p.data().len();
    }
    if n == 0 {
        return Err(Error::contract("series_rmse", "no target intervals"));
    }
    Ok((sse / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn series(len: usize, f: impl Fn(usize, usize) -> f32) -> FrameSeries {
        let grid = GridSpec {
            rows: 2,
            cols: 2,
            lat_min: 0.0,
            lat_max: 1.0,
            lon_min: 0.0,
            lon_max: 1.0,
            interval_seconds: 3600,
            epoch_start: 0,
        };
        let frames = (0..len)
            .map(|t| FlowFrame::new(t, 2, 2, (0..8).map(|i| f(t, i)).collect()).unwrap())
            .collect();
        FrameSeries::new(grid, frames).unwrap()
    }

    #[test]
    fn rmse_single_cell_off_by_two() {
        let target = vec![1.0f32; 50];
        let mut pred = target.clone();
        pred[17] += 2.0;
        assert!((rmse(&pred, &target) - (4.0f64 / 50.0).sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&target, &target), 0.0);
    }

    #[test]
    fn constant_series_baselines_are_exact() {
        let s = series(30, |_, _| 4.0);
        assert_eq!(baseline_persistence(&s, 5).unwrap().data(), s.frame(5).unwrap().data());
        assert_eq!(baseline_historical_average(&s, 29, 7).unwrap().data(), s.frame(29).unwrap().data());
        let r = series_rmse(&s, 14..30, |t| baseline_historical_average(&s, t, 7)).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn weekly_periodic_series() {
        let s = series(60, |t, i| ((t % 7) * 3 + i) as f32);
        let ha = series_rmse(&s, 14..60, |t| baseline_historical_average(&s, t, 7)).unwrap();
        let pe = series_rmse(&s, 14..60, |t| baseline_persistence(&s, t)).unwrap();
        assert_eq!(ha, 0.0);
        assert!(pe > 0.0);
    }

    #[test]
    fn historical_average_is_a_mean() {
        let s = series(25, |t, _| t as f32);
        // t=24, week 10 -> frames 14 and 4
        assert_eq!(baseline_historical_average(&s, 24, 10).unwrap().data()[0], 9.0);
    }

    #[test]
    fn baselines_need_history() {
        let s = series(10, |_, _| 1.0);
        assert!(matches!(baseline_persistence(&s, 0), Err(Error::OutOfHistory { t: 0, .. })));
        assert!(matches!(
            baseline_historical_average(&s, 3, 7),
            Err(Error::OutOfHistory { .. })
        ));
    }
}
