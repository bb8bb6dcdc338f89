//! Random small instances for finite-difference gradient checks.

#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use star_core::model::{build_model, StarConfig, StarModel};
use star_core::tensor::{
    finite_diff_check, finite_diff_check_with, ElementwiseFn, ParamStore, Scalar, Tape, Tensor, GRAD_REL_FLOOR,
};
use star_core::Result;

pub const H: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-5;
pub const F32_STEP: f64 = 1e-2;
pub const F32_FLOOR: f64 = 1e-2;
pub const F32_TOL: f64 = 1e-2;
/// Instances whose ReLU inputs come closer to the kink than this are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

pub const OPS: [&str; 11] = [
    "conv2d", "linear", "relu", "tanh", "concat", "add", "reshape", "mse", "sum_squares", "sum",
    "elementwise",
];

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.gen_range(-scale..scale)))
}

/// Values in `±[0.05, 1]`, clear of the ReLU kink.
fn off_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.05..1.0);
        T::from_f64(if rng.gen_bool(0.5) { m } else { -m })
    })
}

/// `x ↦ x³ + sin x`, optionally with a deliberately wrong derivative.
pub struct Cubic {
    pub faulty: bool,
}

impl<T: Scalar> ElementwiseFn<T> for Cubic {
    fn forward(&self, x: T) -> T {
        x * x * x + x.sin()
    }

    fn derivative(&self, x: T, _y: T) -> T {
        let d = T::from_f64(3.0) * x * x + x.cos();
        if self.faulty {
            d * T::from_f64(1.05)
        } else {
            d
        }
    }
}

fn batch_map(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [
        rng.gen_range(1..3),
        rng.gen_range(1..4),
        rng.gen_range(1..5),
        rng.gen_range(1..5),
    ]
}

/// Worst relative error for one random instance of `op`, each loss routed
/// through MSE against a random target (or used directly when scalar).
pub fn check_op(op: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    check_op_at::<f64>(op, rng, H, GRAD_REL_FLOOR)
}

/// [`check_op`] at precision `T` with finite-difference `step` and relative-error floor.
pub fn check_op_at<T: Scalar>(op: &str, rng: &mut ChaCha8Rng, step: f64, floor: f64) -> Result<f64> {
    let mut ps = ParamStore::<T>::new();
    match op {
        "conv2d" => {
            let [b, c, h, w] = batch_map(rng);
            let f = rng.gen_range(1..4);
            let k = [1, 3, 5][rng.gen_range(0..3)];
            let x = ps.insert("x", uniform(rng, &[b, c, h, w], 1.0))?;
            let kern = ps.insert("k", uniform(rng, &[f, c, k, k], 1.0))?;
            let bias = ps.insert("b", uniform(rng, &[f], 1.0))?;
            let target = uniform(rng, &[b, f, h, w], 1.0);
            finite_diff_check_with(&mut ps, step, floor, |tape, p| {
                let (x, k, bi) = (tape.param(p, x), tape.param(p, kern), tape.param(p, bias));
                let y = tape.conv2d(x, k, bi)?;
                let t = tape.constant(target.clone());
                tape.mse(y, t)
            })
        }
        "linear" => {
            let (b, din, dout) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
            let x = ps.insert("x", uniform(rng, &[b, din], 1.0))?;
            let w = ps.insert("w", uniform(rng, &[dout, din], 1.0))?;
            let bias = ps.insert("b", uniform(rng, &[dout], 1.0))?;
            let target = uniform(rng, &[b, dout], 1.0);
            finite_diff_check_with(&mut ps, step, floor, |tape, p| {
                let (x, w, bi) = (tape.param(p, x), tape.param(p, w), tape.param(p, bias));
                let y = tape.linear(x, w, bi)?;
                let t = tape.constant(target.clone());
                tape.mse(y, t)
            })
        }
        "relu" | "tanh" | "elementwise" => {
            let shape = batch_map(rng);
            let x = ps.insert("x", off_zero(rng, &shape))?;
            let target = uniform(rng, &shape, 1.0);
            let op = op.to_string();
            finite_diff_check_with(&mut ps, step, floor, move |tape, p| {
                let x = tape.param(p, x);
                let y = match op.as_str() {
                    "relu" => tape.relu(x),
                    "tanh" => tape.tanh(x),
                    _ => tape.elementwise(x, Arc::new(Cubic { faulty: false })),
                };
                let t = tape.constant(target.clone());
                tape.mse(y, t)
            })
        }
        "concat" => {
            let [b, c, h, w] = batch_map(rng);
            let c2 = rng.gen_range(1..4);
            let a = ps.insert("a", uniform(rng, &[b, c, h, w], 1.0))?;
            let bb = ps.insert("b", uniform(rng, &[b, c2, h, w], 1.0))?;
            let target = uniform(rng, &[b, c + c2, h, w], 1.0);
            finite_diff_check_with(&mut ps, step, floor, |tape, p| {
                let (a, bb) = (tape.param(p, a), tape.param(p, bb));
                let y = tape.concat_channels(a, bb)?;
                let t = tape.constant(target.clone());
                tape.mse(y, t)
            })
        }
        "add" => {
            let shape = batch_map(rng);
            let a = ps.insert("a", uniform(rng, &shape, 1.0))?;
            let bb = ps.insert("b", uniform(rng, &shape, 1.0))?;
            let target = uniform(rng, &shape, 1.0);
            finite_diff_check_with(&mut ps, step, floor, |tape, p| {
                let (a, bb) = (tape.param(p, a), tape.param(p, bb));
                let y = tape.add(a, bb)?;
                let t = tape.constant(target.clone());
                tape.mse(y, t)
            })
        }
        "reshape" => {
            let (b, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
            let x = ps.insert("x", uniform(rng, &[b, 2 * h * w], 1.0))?;
            let target = uniform(rng, &[b, 2, h, w], 1.0);
            finite_diff_check_with(&mut ps, step, floor, |tape, p| {
                let x = tape.param(p, x);
                let y = tape.reshape(x, &[b, 2, h, w])?;
                let t = tape.constant(target.clone());
                tape.mse(y, t)
            })
        }
        "mse" => {
            let shape = batch_map(rng);
            let a = ps.insert("pred", uniform(rng, &shape, 1.0))?;
            let t = ps.insert("target", uniform(rng, &shape, 1.0))?;
            finite_diff_check_with(&mut ps, step, floor, |tape, p| {
                let (a, t) = (tape.param(p, a), tape.param(p, t));
                tape.mse(a, t)
            })
        }
        "sum_squares" => {
            let shape = batch_map(rng);
            let coeff = T::from_f64(rng.gen_range(1e-3..1.0));
            let x = ps.insert("x", uniform(rng, &shape, 1.0))?;
            finite_diff_check_with(&mut ps, step, floor, |tape, p| {
                let x = tape.param(p, x);
                Ok(tape.sum_squares(x, coeff))
            })
        }
        "sum" => {
            let shape = batch_map(rng);
            let x = ps.insert("x", uniform(rng, &shape, 1.0))?;
            finite_diff_check_with(&mut ps, step, floor, |tape, p| {
                let x = tape.param(p, x);
                Ok(tape.sum(x))
            })
        }
        other => panic!("unknown op {other}"),
    }
}

/// The same check as the `elementwise` case with a derivative that is 5% off.
pub fn faulty_op_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut ps = ParamStore::<f64>::new();
    let shape = batch_map(rng);
    let x = ps.insert("x", off_zero(rng, &shape))?;
    let target = uniform(rng, &shape, 1.0);
    finite_diff_check(&mut ps, H, |tape, p| {
        let x = tape.param(p, x);
        let y = tape.elementwise(x, Arc::new(Cubic { faulty: true }));
        let t = tape.constant(target.clone());
        tape.mse(y, t)
    })
}

pub fn random_model_config(rng: &mut ChaCha8Rng) -> StarConfig {
    let external_dim = if rng.gen_bool(0.7) { rng.gen_range(1..6) } else { 0 };
    StarConfig {
        rows: rng.gen_range(2..5),
        cols: rng.gen_range(2..5),
        input_channels: 2 * rng.gen_range(1..4),
        num_residual_blocks: rng.gen_range(0..3),
        weight_layers_per_block: rng.gen_range(1..3),
        filters: rng.gen_range(1..5),
        kernel_size: [1, 3][rng.gen_range(0..2)],
        external_embed_dim: rng.gen_range(1..4),
        external_dim,
        l2_coeff: if rng.gen_bool(0.5) { rng.gen_range(1e-4..1e-2) } else { 0.0 },
    }
}

struct Instance {
    model: StarModel<f64>,
    input: Tensor<f64>,
    external: Option<Tensor<f64>>,
    target: Tensor<f64>,
}

fn loss(inst: &Instance, tape: &mut Tape<f64>, params: &ParamStore<f64>) -> Result<star_core::tensor::NodeId> {
    let model = StarModel::from_params(inst.model.config().clone(), params.clone())?;
    let x = tape.constant(inst.input.clone());
    let e = inst.external.as_ref().map(|e| tape.constant(e.clone()));
    let y = tape.constant(inst.target.clone());
    model.loss_on(tape, x, e, y)
}

/// One end-to-end check of the full loss (MSE plus L2) on a random small
/// network, redrawing inputs until every ReLU input clears [`KINK_MARGIN`].
pub fn check_model(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = random_model_config(rng);
    let seed = rng.gen();
    loop {
        let model = build_model::<f64>(&cfg, seed)?;
        let b = rng.gen_range(1..3);
        let inst = Instance {
            input: uniform(rng, &[b, cfg.input_channels, cfg.rows, cfg.cols], 1.0),
            external: (cfg.external_dim > 0).then(|| uniform(rng, &[b, cfg.external_dim], 1.0)),
            target: uniform(rng, &[b, 2, cfg.rows, cfg.cols], 1.0),
            model,
        };
        let mut tape = Tape::new();
        loss(&inst, &mut tape, inst.model.params())?;
        if tape.relu_margin().is_some_and(|m| m < KINK_MARGIN) {
            continue;
        }
        let mut params = inst.model.params().clone();
        return finite_diff_check(&mut params, H, |tape, p| loss(&inst, tape, p));
    }
}
