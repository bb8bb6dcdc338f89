#[path = "oracles/grads.rs"]
mod grads;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use star_core::model::{build_model, param_count, StarConfig};
use star_core::tensor::kernels::{activation, Activation};
use star_core::tensor::{conv2d, ConvParams, Tape, Tensor};

#[test]
fn param_count_matches_constructed_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let cfg = grads::random_model_config(&mut rng);
        let m = build_model::<f32>(&cfg, 0).unwrap();
        assert_eq!(param_count(&cfg), m.num_parameters(), "{cfg:?}");
    }
}

#[test]
fn taxibj_size_is_close_to_reference() {
    let n = param_count(&StarConfig::taxibj()) as f64;
    assert!((n - 476_200.0).abs() / 476_200.0 < 0.05, "{n}");
    assert_eq!(build_model::<f32>(&StarConfig::taxibj(), 0).unwrap().num_parameters(), n as usize);
}

#[test]
fn deep_network_passes_gradient_to_first_layer() {
    let cfg = StarConfig {
        rows: 6,
        cols: 5,
        num_residual_blocks: 6,
        filters: 8,
        external_dim: 0,
        ..StarConfig::taxibj()
    };
    let mut m = build_model::<f32>(&cfg, 21).unwrap();
    let x = Tensor::from_fn([2, 18, 6, 5], |i| ((i * 31 % 17) as f32 / 8.5) - 1.0);
    let y = Tensor::from_fn([2, 2, 6, 5], |i| ((i * 7 % 13) as f32 / 6.5) - 1.0);
    let mut tape = Tape::new();
    let (xn, yn) = (tape.constant(x), tape.constant(y));
    let loss = m.loss_on(&mut tape, xn, None, yn).unwrap();
    tape.backward_into(loss, m.params_mut()).unwrap();
    let g = m.params().by_name("conv_in.kernel").unwrap().grad().unwrap();
    assert!(g.iter().any(|&v| v != 0.0));
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let cfg = StarConfig {
        rows: 5,
        cols: 4,
        filters: 6,
        num_residual_blocks: 2,
        external_dim: 7,
        ..StarConfig::taxibj()
    };
    let m = build_model::<f32>(&cfg, 8).unwrap();
    let mut buf = Vec::new();
    star_core::model::write_checkpoint(&m, None, &mut buf).unwrap();
    let back = star_core::model::read_checkpoint(buf.as_slice()).unwrap().model;
    let x = Tensor::from_fn([3, 18, 5, 4], |i| (i as f32 * 0.13).sin());
    let e = Tensor::from_fn([3, 7], |i| (i % 2) as f32);
    let (a, b) = (m.forward(&x, Some(&e)).unwrap(), back.forward(&x, Some(&e)).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

fn conv_case(b: usize, c: usize, f: usize, h: usize, w: usize, k: usize, seed: u64) -> (Tensor<f32>, ConvParams<f32>) {
    let mut s = seed;
    let mut next = move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    };
    let x = Tensor::from_fn([b, c, h, w], |_| next());
    let kernel = Tensor::from_fn([f, c, k, k], |_| next());
    (x, ConvParams::new(kernel, Tensor::zeros([f]), 0.0).unwrap())
}

proptest! {
    #[test]
    fn same_padding_keeps_spatial_shape(
        b in 1usize..3, c in 1usize..4, f in 1usize..4, h in 1usize..9, w in 1usize..9,
        half in 0usize..4, seed in any::<u64>(),
    ) {
        let (x, p) = conv_case(b, c, f, h, w, 2 * half + 1, seed);
        let y = conv2d(&x, &p).unwrap();
        prop_assert_eq!(y.shape(), &[b, f, h, w]);
    }

    #[test]
    fn bias_free_conv_is_linear(
        c in 1usize..4, f in 1usize..4, h in 1usize..7, w in 1usize..7,
        half in 0usize..3, a in -4.0f32..4.0, seed in any::<u64>(),
    ) {
        let (x, p) = conv_case(2, c, f, h, w, 2 * half + 1, seed);
        let lhs = conv2d(&x.map(|v| a * v), &p).unwrap();
        let rhs = conv2d(&x, &p).unwrap().map(|v| a * v);
        let scale = rhs.data().iter().fold(1e-3f32, |m, v| m.max(v.abs()));
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() <= 1e-5 * scale, "{} vs {}", l, r);
        }
    }

    #[test]
    fn tanh_stays_in_open_interval(v in -8.0f64..8.0) {
        let t = activation(&Tensor::<f64>::scalar(v), Activation::Tanh);
        prop_assert!(t.data()[0].abs() < 1.0);
    }

    #[test]
    fn forward_shape_is_b_by_2_by_grid(seed in any::<u64>(), b in 1usize..4) {
        let cfg = grads::random_model_config(&mut ChaCha8Rng::seed_from_u64(seed));
        let m = build_model::<f32>(&cfg, seed).unwrap();
        let x = Tensor::zeros([b, cfg.input_channels, cfg.rows, cfg.cols]);
        let e = (cfg.external_dim > 0).then(|| Tensor::zeros([b, cfg.external_dim]));
        let y = m.forward(&x, e.as_ref()).unwrap();
        prop_assert_eq!(y.shape(), &[b, 2, cfg.rows, cfg.cols]);
        let again = m.forward(&x, e.as_ref()).unwrap();
        prop_assert_eq!(y, again);
    }
}
