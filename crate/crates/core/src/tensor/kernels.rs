//! Forward and backward kernels shared by the tape and the plain functional API.
//!
//! Convolution is an im2col expansion over the whole batch followed by a
//! single matrix product, so the column buffer for a `B×C×H×W` input is
//! `(C·kh·kw) × (B·H·W)`.

use serde::{Deserialize, Serialize};

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Kernel, bias and L2 coefficient of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub l2_coeff: f64,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>, l2_coeff: f64) -> Result<Self> {
        let geom = KernelShape::of(&kernel)?;
        if bias.shape() != [geom.out_channels] {
            return Err(Error::shape(
                "ConvParams",
                format!(
                    "bias shape {:?} does not match out_channels {}",
                    bias.shape(),
                    geom.out_channels
                ),
            ));
        }
        if !(l2_coeff >= 0.0) {
            return Err(Error::Config(format!(
                "l2_coeff must be non-negative, got {l2_coeff}"
            )));
        }
        Ok(Self {
            kernel,
            bias,
            l2_coeff,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct KernelShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
}

impl KernelShape {
    pub(crate) fn of<T: Scalar>(kernel: &Tensor<T>) -> Result<Self> {
        let s = kernel.shape();
        if s.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be rank 4 (out×in×kh×kw), got {s:?}"),
            ));
        }
        if s[2] % 2 == 0 || s[3] % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel height/width must be odd for same padding, got {}×{}", s[2], s[3]),
            ));
        }
        Ok(Self {
            out_channels: s[0],
            in_channels: s[1],
            kh: s[2],
            kw: s[3],
        })
    }
}

/// Geometry of one same-padded convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub(crate) fn new<T: Scalar>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Result<Self> {
        let k = KernelShape::of(kernel)?;
        let s = input.shape();
        if s.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be rank 4 (batch×channels×height×width), got {s:?}"),
            ));
        }
        if s[1] != k.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input channel axis is {} but kernel in_channels axis is {}",
                    s[1], k.in_channels
                ),
            ));
        }
        if bias.shape() != [k.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias axis is {:?} but kernel out_channels axis is {}",
                    bias.shape(),
                    k.out_channels
                ),
            ));
        }
        Ok(Self {
            batch: s[0],
            in_channels: s[1],
            out_channels: k.out_channels,
            height: s[2],
            width: s[3],
            kh: k.kh,
            kw: k.kw,
        })
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn columns(&self) -> usize {
        self.batch * self.pixels()
    }
}

/// Expands a `B×C×H×W` buffer into `(C·kh·kw) × (B·H·W)` columns with zero padding.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let (h, w) = (g.height as isize, g.width as isize);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let hw = g.pixels();
    let ncols = g.columns();
    let mut cols = vec![T::zero(); g.patch() * ncols];
    for c in 0..g.in_channels {
        for m in 0..g.kh {
            for n in 0..g.kw {
                let row = (c * g.kh + m) * g.kw + n;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                let (dy, dx) = (m as isize - ph, n as isize - pw);
                for b in 0..g.batch {
                    let src = &input[(b * g.in_channels + c) * hw..][..hw];
                    let dst = &mut dst_row[b * hw..(b + 1) * hw];
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let x0 = (-dx).max(0);
                        let x1 = (w - dx).min(w);
                        if x0 >= x1 {
                            continue;
                        }
                        let d = (y * w) as usize;
                        let s = (sy * w) as usize;
                        dst[d + x0 as usize..d + x1 as usize].copy_from_slice(
                            &src[(s as isize + x0 + dx) as usize..(s as isize + x1 + dx) as usize],
                        );
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], out: &mut [T]) {
    let (h, w) = (g.height as isize, g.width as isize);
    let (ph, pw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let hw = g.pixels();
    let ncols = g.columns();
    for c in 0..g.in_channels {
        for m in 0..g.kh {
            for n in 0..g.kw {
                let row = (c * g.kh + m) * g.kw + n;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                let (dy, dx) = (m as isize - ph, n as isize - pw);
                for b in 0..g.batch {
                    let dst = &mut out[(b * g.in_channels + c) * hw..][..hw];
                    let src = &src_row[b * hw..(b + 1) * hw];
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let x0 = (-dx).max(0);
                        let x1 = (w - dx).min(w);
                        for x in x0..x1 {
                            let di = (sy * w + x + dx) as usize;
                            dst[di] = dst[di] + src[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded convolution. Returns the output and the column buffer needed
/// by the backward pass.
pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, ConvGeom)> {
    let g = ConvGeom::new(input, kernel, bias)?;
    let cols = im2col(&g, input.data());
    let ncols = g.columns();
    let mut tmp = vec![T::zero(); g.out_channels * ncols];
    gemm(
        g.out_channels,
        g.patch(),
        ncols,
        kernel.data(),
        false,
        &cols,
        false,
        &mut tmp,
        false,
    );
    // (F, B, HW) -> (B, F, HW) plus bias
    let hw = g.pixels();
    let mut out = vec![T::zero(); g.batch * g.out_channels * hw];
    let bias = bias.data();
    for f in 0..g.out_channels {
        for b in 0..g.batch {
            let src = &tmp[f * ncols + b * hw..][..hw];
            let dst = &mut out[(b * g.out_channels + f) * hw..][..hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias[f];
            }
        }
    }
    let out = Tensor::new([g.batch, g.out_channels, g.height, g.width], out)?;
    Ok((out, cols, g))
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    cols: &[T],
    kernel: &[T],
    grad_out: &[T],
    need_input: bool,
) -> ConvGrads<T> {
    let hw = g.pixels();
    let ncols = g.columns();
    // (B, F, HW) -> (F, B, HW)
    let mut gout = vec![T::zero(); g.out_channels * ncols];
    let mut bias = vec![T::zero(); g.out_channels];
    for b in 0..g.batch {
        for f in 0..g.out_channels {
            let src = &grad_out[(b * g.out_channels + f) * hw..][..hw];
            gout[f * ncols + b * hw..][..hw].copy_from_slice(src);
            bias[f] = src.iter().fold(bias[f], |acc, &v| acc + v);
        }
    }
    let mut gkernel = vec![T::zero(); g.out_channels * g.patch()];
    gemm(
        g.out_channels,
        ncols,
        g.patch(),
        &gout,
        false,
        cols,
        true,
        &mut gkernel,
        false,
    );
    let input = need_input.then(|| {
        let mut gcols = vec![T::zero(); g.patch() * ncols];
        gemm(
            g.patch(),
            g.out_channels,
            ncols,
            kernel,
            true,
            &gout,
            false,
            &mut gcols,
            false,
        );
        let mut gin = vec![T::zero(); g.batch * g.in_channels * hw];
        col2im(g, &gcols, &mut gin);
        gin
    });
    ConvGrads {
        input,
        kernel: gkernel,
        bias,
    }
}

/// Same-padded 2D convolution summed over input channels, plus bias.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_forward(input, &params.kernel, &params.bias).map(|(out, _, _)| out)
}

pub(crate) fn linear_check<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 2 || ws.len() != 2 {
        return Err(Error::shape(
            "fully_connected",
            format!("expected rank-2 input and weight, got {is:?} and {ws:?}"),
        ));
    }
    if is[1] != ws[1] {
        return Err(Error::shape(
            "fully_connected",
            format!("input feature axis is {} but weight input axis is {}", is[1], ws[1]),
        ));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::shape(
            "fully_connected",
            format!("bias axis is {:?} but weight output axis is {}", bias.shape(), ws[0]),
        ));
    }
    Ok((is[0], is[1], ws[0]))
}

/// `input · weightᵀ + bias` for a `B×D_in` input and `D_out×D_in` weight.
pub fn fully_connected<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, din, dout) = linear_check(input, weight, bias)?;
    let mut out = vec![T::zero(); b * dout];
    gemm(b, din, dout, input.data(), false, weight.data(), true, &mut out, false);
    for row in out.chunks_mut(dout) {
        for (o, &bv) in row.iter_mut().zip(bias.data()) {
            *o = *o + bv;
        }
    }
    Tensor::new([b, dout], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    input.map(|v| kind.apply(v))
}

pub(crate) fn concat_check<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 {
        return Err(Error::shape(
            "concat_channels",
            format!("expected rank-4 tensors, got {sa:?} and {sb:?}"),
        ));
    }
    for (axis, name) in [(0, "batch"), (2, "height"), (3, "width")] {
        if sa[axis] != sb[axis] {
            return Err(Error::shape(
                "concat_channels",
                format!("{name} axis differs: {} vs {}", sa[axis], sb[axis]),
            ));
        }
    }
    Ok(())
}

/// Concatenates along the channel axis; `a`'s channels come first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    concat_check(a, b)?;
    let (sa, sb) = (a.shape(), b.shape());
    let (batch, hw) = (sa[0], sa[2] * sa[3]);
    let (ca, cb) = (sa[1] * hw, sb[1] * hw);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..batch {
        data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Tensor::new([batch, sa[1] + sb[1], sa[2], sa[3]], data)
}

pub(crate) fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Identity shortcut: `x + fx` elementwise.
pub fn residual_add<T: Scalar>(x: &Tensor<T>, fx: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("residual_add", x, fx)?;
    let data = x.data().iter().zip(fx.data()).map(|(&a, &b)| a + b).collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape("mse_loss", pred, target)?;
    let n = T::from_f64(pred.len() as f64);
    let sum = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
    Ok(sum / n)
}
