//! The single fully-convolutional residual network.
//!
//! ```text
//! external ─ FC(D_ext→E) ─ ReLU ─ FC(E→2·I·J) ─ reshape 2×I×J ─┐
//! keyframes (2L×I×J) ───────────────────────────────────────── concat ─ conv ─ [RB × L_rb] ─ conv(F→2) ─ tanh
//! RB:  x ─┬─ ReLU ─ conv ─ (ReLU ─ conv) ─┬─ + ─
//!         └──────────────────────────────┘
//! ```
//!
//! All convolutions share the kernel size and use zero padding, so every
//! feature map keeps the `I×J` grid shape.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, ParamId, ParamStore, Scalar, Tape, Tensor};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, PipelineMeta,
    STCK_MAGIC, STCK_VERSION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StarConfig {
    pub rows: usize,
    pub cols: usize,
    /// Stacked keyframe channels, `2L`.
    pub input_channels: usize,
    pub num_residual_blocks: usize,
    pub weight_layers_per_block: usize,
    pub filters: usize,
    pub kernel_size: usize,
    pub external_embed_dim: usize,
    /// Length of the external feature vector; 0 removes the external branch.
    pub external_dim: usize,
    #[serde(default)]
    pub l2_coeff: f64,
}

impl StarConfig {
    /// 32×32 grid, 6 blocks of 2 layers with 64 filters, nine keyframes and
    /// 30-minute time metadata (48 + 7 + weekend + holiday).
    pub fn taxibj() -> Self {
        Self {
            rows: 32,
            cols: 32,
            input_channels: 18,
            num_residual_blocks: 6,
            weight_layers_per_block: 2,
            filters: 64,
            kernel_size: 3,
            external_embed_dim: 10,
            external_dim: 57,
            l2_coeff: 0.0,
        }
    }

    /// 16×8 grid, 2 single-layer blocks with 256 filters and L2 on kernels,
    /// hourly time metadata.
    pub fn bikenyc() -> Self {
        Self {
            rows: 16,
            cols: 8,
            input_channels: 18,
            num_residual_blocks: 2,
            weight_layers_per_block: 1,
            filters: 256,
            kernel_size: 3,
            external_embed_dim: 10,
            external_dim: 33,
            l2_coeff: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.rows == 0 || self.cols == 0 {
            return fail(format!("grid must be non-empty, got {}×{}", self.rows, self.cols));
        }
        if self.input_channels == 0 {
            return fail("input_channels must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.filters == 0 {
            return fail("filters must be at least 1".into());
        }
        if !(1..=2).contains(&self.weight_layers_per_block) {
            return fail(format!(
                "weight_layers_per_block must be 1 or 2, got {}",
                self.weight_layers_per_block
            ));
        }
        if self.external_dim > 0 && self.external_embed_dim == 0 {
            return fail("external_embed_dim must be positive when the external branch is on".into());
        }
        if !(self.l2_coeff >= 0.0) {
            return fail(format!("l2_coeff must be non-negative, got {}", self.l2_coeff));
        }
        Ok(())
    }

    pub fn has_external(&self) -> bool {
        self.external_dim > 0
    }

    /// Channels entering the first convolution.
    pub fn fused_channels(&self) -> usize {
        self.input_channels + if self.has_external() { 2 } else { 0 }
    }

    /// Names and shapes of every parameter, in construction order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (f, k) = (self.filters, self.kernel_size);
        let mut out = Vec::new();
        if self.has_external() {
            let (d, e, p) = (self.external_dim, self.external_embed_dim, 2 * self.rows * self.cols);
            out.push(("external.fc1.weight".into(), vec![e, d]));
            out.push(("external.fc1.bias".into(), vec![e]));
            out.push(("external.fc2.weight".into(), vec![p, e]));
            out.push(("external.fc2.bias".into(), vec![p]));
        }
        out.push(("conv_in.kernel".into(), vec![f, self.fused_channels(), k, k]));
        out.push(("conv_in.bias".into(), vec![f]));
        for b in 0..self.num_residual_blocks {
            for l in 0..self.weight_layers_per_block {
                out.push((format!("block{b}.conv{l}.kernel"), vec![f, f, k, k]));
                out.push((format!("block{b}.conv{l}.bias"), vec![f]));
            }
        }
        out.push(("head.kernel".into(), vec![2, f, k, k]));
        out.push(("head.bias".into(), vec![2]));
        out
    }
}

/// Closed-form parameter total.
pub fn param_count(cfg: &StarConfig) -> usize {
    let (f, k2) = (cfg.filters, cfg.kernel_size * cfg.kernel_size);
    let fc = if cfg.has_external() {
        let (d, e, p) = (cfg.external_dim, cfg.external_embed_dim, 2 * cfg.rows * cfg.cols);
        d * e + e + e * p + p
    } else {
        0
    };
    let first = f * cfg.fused_channels() * k2 + f;
    let blocks = cfg.num_residual_blocks * cfg.weight_layers_per_block * (f * f * k2 + f);
    let head = 2 * f * k2 + 2;
    fc + first + blocks + head
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ExternalLayers {
    fc1_weight: ParamId,
    fc1_bias: ParamId,
    fc2_weight: ParamId,
    fc2_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StarModel<T = f32> {
    config: StarConfig,
    params: ParamStore<T>,
    external: Option<ExternalLayers>,
    conv_in: ConvLayer,
    blocks: Vec<Vec<ConvLayer>>,
    head: ConvLayer,
}

/// Glorot-uniform weights, zero biases, drawn in layout order from one
/// seeded stream.
pub fn build_model<T: Scalar>(cfg: &StarConfig, seed: u64) -> Result<StarModel<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for (name, shape) in cfg.layout() {
        let tensor = if shape.len() == 1 {
            Tensor::zeros(shape)
        } else {
            let receptive: usize = shape[2..].iter().product();
            let fan_in = shape[1] * receptive;
            let fan_out = shape[0] * receptive;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-limit..limit)))
        };
        params.insert(name, tensor)?;
    }
    StarModel::from_params(cfg.clone(), params)
}

impl<T: Scalar> StarModel<T> {
    /// Binds a parameter store to the network structure, checking that names
    /// and shapes match `cfg` exactly.
    pub fn from_params(config: StarConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::shape(
                "StarModel",
                format!("expected {} parameter tensors, got {}", layout.len(), params.len()),
            ));
        }
        let lookup = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| Error::shape("StarModel", format!("missing parameter {name:?}")))?;
            if params.get(id).shape() != shape {
                return Err(Error::shape(
                    "StarModel",
                    format!(
                        "parameter {name:?} has shape {:?}, expected {shape:?}",
                        params.get(id).shape()
                    ),
                ));
            }
            Ok(id)
        };
        let mut ids = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            ids.push(lookup(name, shape)?);
        }
        let mut it = ids.into_iter();
        let mut next = || it.next().expect("layout length checked");
        let external = config.has_external().then(|| ExternalLayers {
            fc1_weight: next(),
            fc1_bias: next(),
            fc2_weight: next(),
            fc2_bias: next(),
        });
        let mut conv = || ConvLayer {
            kernel: next(),
            bias: next(),
        };
        let conv_in = conv();
        let blocks = (0..config.num_residual_blocks)
            .map(|_| (0..config.weight_layers_per_block).map(|_| conv()).collect())
            .collect();
        let head = conv();
        Ok(Self {
            config,
            params,
            external,
            conv_in,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &StarConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn cast<U: Scalar>(&self) -> StarModel<U> {
        StarModel {
            config: self.config.clone(),
            params: self.params.cast(),
            external: self.external,
            conv_in: self.conv_in,
            blocks: self.blocks.clone(),
            head: self.head,
        }
    }

    /// Kernels and biases of every convolution inside residual blocks.
    pub fn residual_branch_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flatten()
            .flat_map(|c| [c.kernel, c.bias])
            .collect()
    }

    /// Every convolution kernel (the tensors L2 regularization applies to).
    pub fn conv_kernels(&self) -> Vec<ParamId> {
        std::iter::once(self.conv_in.kernel)
            .chain(self.blocks.iter().flatten().map(|c| c.kernel))
            .chain(std::iter::once(self.head.kernel))
            .collect()
    }

    fn check_inputs(&self, input: &Tensor<T>, external: Option<&Tensor<T>>) -> Result<()> {
        let c = &self.config;
        let s = input.shape();
        if s.len() != 4 || s[1] != c.input_channels || s[2] != c.rows || s[3] != c.cols {
            return Err(Error::shape(
                "forward",
                format!(
                    "input is {s:?}, expected B×{}×{}×{}",
                    c.input_channels, c.rows, c.cols
                ),
            ));
        }
        if c.has_external() {
            let e = external.ok_or_else(|| {
                Error::shape("forward", format!("model expects {} external features", c.external_dim))
            })?;
            if e.shape() != [s[0], c.external_dim] {
                return Err(Error::shape(
                    "forward",
                    format!("external is {:?}, expected [{}, {}]", e.shape(), s[0], c.external_dim),
                ));
            }
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape<T>, x: NodeId, layer: ConvLayer) -> Result<NodeId> {
        let k = tape.param(&self.params, layer.kernel);
        let b = tape.param(&self.params, layer.bias);
        tape.conv2d(x, k, b)
    }

    /// Records the forward pass on `tape`; returns the `B×2×I×J` output node.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        input: NodeId,
        external: Option<NodeId>,
    ) -> Result<NodeId> {
        self.check_inputs(tape.value(input), external.map(|e| tape.value(e)))?;
        let c = &self.config;
        let batch = tape.value(input).shape()[0];

        let fused = match (self.external, external) {
            (Some(ext), Some(features)) => {
                let w1 = tape.param(&self.params, ext.fc1_weight);
                let b1 = tape.param(&self.params, ext.fc1_bias);
                let hidden = tape.linear(features, w1, b1)?;
                let hidden = tape.relu(hidden);
                let w2 = tape.param(&self.params, ext.fc2_weight);
                let b2 = tape.param(&self.params, ext.fc2_bias);
                let projected = tape.linear(hidden, w2, b2)?;
                let frame = tape.reshape(projected, &[batch, 2, c.rows, c.cols])?;
                tape.concat_channels(input, frame)?
            }
            _ => input,
        };

        let mut h = self.conv(tape, fused, self.conv_in)?;
        for block in &self.blocks {
            let mut r = h;
            for &layer in block {
                let a = tape.relu(r);
                r = self.conv(tape, a, layer)?;
            }
            h = tape.add(h, r)?;
        }
        let out = self.conv(tape, h, self.head)?;
        Ok(tape.tanh(out))
    }

    /// MSE against `target` plus `l2_coeff · Σ kernel²` over all convolutions.
    pub fn loss_on(
        &self,
        tape: &mut Tape<T>,
        input: NodeId,
        external: Option<NodeId>,
        target: NodeId,
    ) -> Result<NodeId> {
        let pred = self.forward_on(tape, input, external)?;
        let mut loss = tape.mse(pred, target)?;
        if self.config.l2_coeff > 0.0 {
            let coeff = T::from_f64(self.config.l2_coeff);
            for id in self.conv_kernels() {
                let k = tape.param(&self.params, id);
                let penalty = tape.sum_squares(k, coeff);
                loss = tape.add(loss, penalty)?;
            }
        }
        Ok(loss)
    }

    /// Inference. `external` is ignored when the external branch is disabled.
    pub fn forward(&self, input: &Tensor<T>, external: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        self.check_inputs(input, external)?;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let e = match (self.config.has_external(), external) {
            (true, Some(e)) => Some(tape.constant(e.clone())),
            _ => None,
        };
        let out = self.forward_on(&mut tape, x, e)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StarConfig {
        StarConfig {
            rows: 4,
            cols: 3,
            input_channels: 6,
            num_residual_blocks: 2,
            weight_layers_per_block: 2,
            filters: 5,
            kernel_size: 3,
            external_embed_dim: 4,
            external_dim: 9,
            l2_coeff: 0.0,
        }
    }

    #[test]
    fn taxibj_first_conv_and_count() {
        let cfg = StarConfig::taxibj();
        let layout = cfg.layout();
        let conv_in = layout.iter().find(|(n, _)| n == "conv_in.kernel").unwrap();
        assert_eq!(conv_in.1, [64, 20, 3, 3]);
        assert_eq!(param_count(&cfg), 478_982);
    }

    #[test]
    fn hand_counted_minimal_model() {
        let cfg = StarConfig {
            rows: 2,
            cols: 2,
            input_channels: 2,
            num_residual_blocks: 0,
            weight_layers_per_block: 1,
            filters: 1,
            kernel_size: 1,
            external_embed_dim: 0,
            external_dim: 0,
            l2_coeff: 0.0,
        };
        assert_eq!(param_count(&cfg), 7);
        let m = build_model::<f32>(&cfg, 1).unwrap();
        assert_eq!(m.num_parameters(), 7);
        assert!(m.params().iter().all(|(n, _)| !n.starts_with("external")));
    }

    #[test]
    fn invalid_configs() {
        let mut c = small();
        c.kernel_size = 2;
        assert!(matches!(build_model::<f32>(&c, 0), Err(Error::Config(_))));
        let mut c = small();
        c.filters = 0;
        assert!(build_model::<f32>(&c, 0).is_err());
        let mut c = small();
        c.weight_layers_per_block = 3;
        assert!(build_model::<f32>(&c, 0).is_err());
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let a = build_model::<f32>(&small(), 42).unwrap();
        let b = build_model::<f32>(&small(), 42).unwrap();
        let c = build_model::<f32>(&small(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.num_parameters(), param_count(&small()));
    }

    #[test]
    fn output_shape_and_range() {
        let m = build_model::<f32>(&small(), 3).unwrap();
        let x = Tensor::from_fn([3, 6, 4, 3], |i| ((i * 37 % 11) as f32 - 5.0) * 3.0);
        let e = Tensor::from_fn([3, 9], |i| (i % 2) as f32);
        let y = m.forward(&x, Some(&e)).unwrap();
        assert_eq!(y.shape(), &[3, 2, 4, 3]);
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
        assert!(m.forward(&x, None).is_err());
        assert!(m.forward(&Tensor::zeros([3, 5, 4, 3]), Some(&e)).is_err());
    }

    #[test]
    fn zeroed_residual_branches_are_identity() {
        let mut m = build_model::<f64>(&small(), 9).unwrap();
        for id in m.residual_branch_params() {
            m.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_fn([2, 6, 4, 3], |i| (i as f64 * 0.37).sin());
        let e = Tensor::from_fn([2, 9], |i| (i % 3 == 0) as u8 as f64);
        let got = m.forward(&x, Some(&e)).unwrap();

        // tanh(head(conv_in(concat(x, ext))))
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let en = tape.constant(e.clone());
        let ext = m.external.unwrap();
        let (w1, b1) = (tape.param(m.params(), ext.fc1_weight), tape.param(m.params(), ext.fc1_bias));
        let h = tape.linear(en, w1, b1).unwrap();
        let h = tape.relu(h);
        let (w2, b2) = (tape.param(m.params(), ext.fc2_weight), tape.param(m.params(), ext.fc2_bias));
        let p = tape.linear(h, w2, b2).unwrap();
        let p = tape.reshape(p, &[2, 2, 4, 3]).unwrap();
        let fused = tape.concat_channels(xn, p).unwrap();
        let c1 = m.conv(&mut tape, fused, m.conv_in).unwrap();
        let hd = m.conv(&mut tape, c1, m.head).unwrap();
        let want = tape.tanh(hd);
        assert_eq!(got.data(), tape.value(want).data());
    }
}
