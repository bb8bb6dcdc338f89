use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use star_core::eval::{predict_next, rollout};
use star_core::grid::GridSpec;
use star_core::keyframes::{fit_scaler, ExternalFeatureSpec, KeyframeConfig, MinMaxScaler};
use star_core::model::{build_model, read_checkpoint, write_checkpoint, PipelineMeta, StarConfig, StarModel};
use star_core::series::{read_series, FlowFrame, FrameSeries};
use star_core::Error;

const IPD: usize = 8;

fn grid() -> GridSpec {
    GridSpec {
        rows: 3,
        cols: 4,
        lat_min: 39.8,
        lat_max: 40.0,
        lon_min: 116.2,
        lon_max: 116.5,
        interval_seconds: 86_400 / IPD as u32,
        epoch_start: 1_704_067_200,
    }
}

fn series(len: usize, seed: u64) -> FrameSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..len)
        .map(|t| {
            let phase = (t % IPD) as f32 / IPD as f32 * std::f32::consts::TAU;
            let data = (0..24).map(|i| 10.0 + 5.0 * (phase + i as f32).sin() + rng.gen_range(0.0..2.0)).collect();
            FlowFrame::new(t, 3, 4, data).unwrap()
        })
        .collect();
    FrameSeries::new(grid(), frames).unwrap()
}

struct Fixture {
    model: StarModel,
    series: FrameSeries,
    kf: KeyframeConfig,
    scaler: MinMaxScaler,
    spec: ExternalFeatureSpec,
}

fn fixture() -> Fixture {
    let kf = KeyframeConfig::daily_weekly(3, 1, 1, 1, IPD);
    let spec = ExternalFeatureSpec::time_metadata(IPD);
    let series = series(120, 1);
    let cfg = StarConfig {
        rows: 3,
        cols: 4,
        input_channels: kf.input_channels(),
        num_residual_blocks: 2,
        weight_layers_per_block: 2,
        filters: 6,
        kernel_size: 3,
        external_embed_dim: 4,
        external_dim: spec.dim(),
        l2_coeff: 0.0,
    };
    Fixture {
        model: build_model(&cfg, 17).unwrap(),
        scaler: fit_scaler(&series.frames()[..100]),
        series,
        kf,
        spec,
    }
}

#[test]
fn horizon_one_equals_single_step() {
    let f = fixture();
    for t in [57, 80, 100, 120] {
        let single = predict_next(&f.model, &f.series, t, &f.kf, &f.scaler, &f.spec).unwrap();
        let rolled = rollout(&f.model, &f.series, t, 1, &f.kf, &f.scaler, &f.spec).unwrap();
        assert_eq!(rolled.len(), 1);
        assert!(single.data().iter().zip(rolled[0].data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(rolled[0].t(), t);
    }
}

#[test]
fn future_ground_truth_is_never_read() {
    let f = fixture();
    let t0 = 90;
    let base = rollout(&f.model, &f.series, t0, IPD, &f.kf, &f.scaler, &f.spec).unwrap();
    let mut perturbed = f.series.clone();
    for frame in &mut perturbed.frames_mut()[t0..] {
        frame.data_mut().iter_mut().for_each(|v| *v = *v * 3.0 + 50.0);
    }
    let again = rollout(&f.model, &perturbed, t0, IPD, &f.kf, &f.scaler, &f.spec).unwrap();
    assert_eq!(base, again);
    // the past does matter
    perturbed.frames_mut()[t0 - 1].data_mut()[0] += 40.0;
    let moved = rollout(&f.model, &perturbed, t0, IPD, &f.kf, &f.scaler, &f.spec).unwrap();
    assert_ne!(base, moved);
}

#[test]
fn six_steps_are_valid_frames() {
    let f = fixture();
    let out = rollout(&f.model, &f.series, 100, 6, &f.kf, &f.scaler, &f.spec).unwrap();
    assert_eq!(out.len(), 6);
    for (h, frame) in out.iter().enumerate() {
        assert_eq!((frame.t(), frame.rows(), frame.cols()), (100 + h, 3, 4));
        assert!(frame
            .data()
            .iter()
            .all(|&v| v as f64 >= f.scaler.min_val - 1e-4 && v as f64 <= f.scaler.max_val + 1e-4));
    }
    let shorter = rollout(&f.model, &f.series, 100, 4, &f.kf, &f.scaler, &f.spec).unwrap();
    assert_eq!(&out[..4], &shorter[..]);
}

#[test]
fn rollout_limits() {
    let f = fixture();
    let err = rollout(&f.model, &f.series, 100, IPD + 1, &f.kf, &f.scaler, &f.spec).unwrap_err();
    assert!(matches!(err, Error::OutOfHistory { .. }), "{err:?}");
    let err = rollout(&f.model, &f.series, 40, 1, &f.kf, &f.scaler, &f.spec).unwrap_err();
    assert!(matches!(err, Error::OutOfHistory { t: 40, required: 57 }), "{err:?}");
    assert!(matches!(
        rollout(&f.model, &f.series, 100, 0, &f.kf, &f.scaler, &f.spec),
        Err(Error::Contract { .. })
    ));
}

#[test]
fn series_roundtrip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames = (0..40)
        .map(|t| {
            let data = (0..24)
                .map(|i| match i {
                    0 => 0.0,
                    1 => f32::MIN_POSITIVE / 4.0,
                    2 => f32::MAX,
                    _ => rng.gen_range(0.0..1e4),
                })
                .collect();
            FlowFrame::new(t, 3, 4, data).unwrap()
        })
        .collect();
    let s = FrameSeries::new(grid(), frames).unwrap();
    let mut buf = Vec::new();
    let n = s.write_to(&mut buf).unwrap();
    assert_eq!(n, buf.len());
    let back = read_series(buf.as_slice()).unwrap();
    assert_eq!(back.grid(), s.grid());
    for (a, b) in s.frames().iter().zip(back.frames()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert!(matches!(read_series(&buf[..n - 3]), Err(Error::Truncated { .. })));
}

#[test]
fn checkpoint_carries_pipeline_metadata() {
    let f = fixture();
    let meta = PipelineMeta {
        grid: grid(),
        keyframes: f.kf,
        external: f.spec.clone(),
        scaler: f.scaler,
    };
    let mut buf = Vec::new();
    write_checkpoint(&f.model, Some(&meta), &mut buf).unwrap();
    let ck = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(ck.pipeline.as_ref(), Some(&meta));
    let a = predict_next(&f.model, &f.series, 100, &f.kf, &f.scaler, &f.spec).unwrap();
    let b = predict_next(&ck.model, &f.series, 100, &f.kf, &f.scaler, &f.spec).unwrap();
    assert_eq!(a, b);
}
