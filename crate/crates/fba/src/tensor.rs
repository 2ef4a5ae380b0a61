//! Dense tensor type and the numeric kernels everything else builds on.
//!
//! Storage is a flat row-major `Vec<f32>` with an explicit shape. Images and
//! feature maps use channel-major `[C, H, W]` order throughout the crate.
//! Reductions accumulate in `f64` so results stay close to the brute-force
//! oracles the tests compare against. All kernels are pure functions; tensors
//! are never mutated once handed to a caller.

use crate::error::{Error, Result};

/// Dense tensor of `f32` values with a row-major flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat data.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument {
                op: "Tensor::new",
                detail: format!("zero dimension in shape {shape:?}"),
            });
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {shape:?} wants {expect} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterprets the tensor as rank 1 without touching the data.
    pub fn flattened(&self) -> Tensor {
        Tensor { shape: vec![self.data.len()], data: self.data.clone() }
    }

    /// Bitwise equality, distinguishing -0.0 from 0.0. Shape must match too.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        debug_assert_eq!(self.rank(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f32) {
        debug_assert_eq!(self.rank(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    #[inline]
    pub fn at4(&self, o: usize, c: usize, y: usize, x: usize) -> f32 {
        debug_assert_eq!(self.rank(), 4);
        let (ci, h, w) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((o * ci + c) * h + y) * w + x]
    }
}

fn dim3(t: &Tensor, op: &'static str, what: &str) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{what} must be rank 3 [C,H,W], got shape {:?}", t.shape()),
        });
    }
    Ok((t.shape[0], t.shape[1], t.shape[2]))
}

/// 2-D cross-correlation with zero padding (no kernel flip).
///
/// `input` is `[C_in, H, W]`, `kernels` is `[C_out, C_in, kh, kw]`, `bias` is
/// `[C_out]`. Output is `[C_out, H', W']` with
/// `H' = (H + 2*pad - kh) / stride + 1` (floor division), same for `W'`.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let (c_in, h, w) = dim3(input, OP, "input")?;
    if kernels.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: OP,
            detail: format!("kernels must be rank 4 [C_out,C_in,kh,kw], got {:?}", kernels.shape()),
        });
    }
    let (c_out, kc, kh, kw) =
        (kernels.shape[0], kernels.shape[1], kernels.shape[2], kernels.shape[3]);
    if kc != c_in {
        return Err(Error::ShapeMismatch {
            op: OP,
            detail: format!("kernel input channels {kc} != input channels {c_in}"),
        });
    }
    if bias.shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            op: OP,
            detail: format!("bias shape {:?} != [{c_out}]", bias.shape()),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument { op: OP, detail: "stride must be >= 1".into() });
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::ShapeMismatch {
            op: OP,
            detail: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        });
    }

    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![c_out, oh, ow]);
    for o in 0..c_out {
        let b = bias.data[o] as f64;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for c in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += input.at3(c, iy as usize, ix as usize) as f64
                                * kernels.at4(o, c, ky, kx) as f64;
                        }
                    }
                }
                out.set3(o, oy, ox, acc as f32);
            }
        }
    }
    Ok(out)
}

/// Elementwise `max(0, x)`. Never produces -0.0.
pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor { shape: input.shape.clone(), data }
}

/// Per-channel sliding-window maximum over `[C, H, W]`.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    const OP: &str = "maxpool2d";
    let (c, h, w) = dim3(input, OP, "input")?;
    if k == 0 || stride == 0 {
        return Err(Error::InvalidArgument {
            op: OP,
            detail: format!("window {k} and stride {stride} must be >= 1"),
        });
    }
    if k > h || k > w {
        return Err(Error::ShapeMismatch {
            op: OP,
            detail: format!("window {k} larger than input {h}x{w}"),
        });
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        let v = input.at3(ch, oy * stride + ky, ox * stride + kx);
                        if v > m {
                            m = v;
                        }
                    }
                }
                out.set3(ch, oy, ox, m);
            }
        }
    }
    Ok(out)
}

/// `weight * input + bias` with `weight` of shape `[D_out, D_in]`.
///
/// Rank-3 inputs are consumed in flattened row-major order, so a feature map
/// stack feeds a fully connected layer without an explicit flatten step.
pub fn affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "affine";
    if weight.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: OP,
            detail: format!("weight must be rank 2 [D_out,D_in], got {:?}", weight.shape()),
        });
    }
    let (d_out, d_in) = (weight.shape[0], weight.shape[1]);
    if input.len() != d_in {
        return Err(Error::ShapeMismatch {
            op: OP,
            detail: format!("input length {} != weight input dim {d_in}", input.len()),
        });
    }
    if bias.shape() != [d_out] {
        return Err(Error::ShapeMismatch {
            op: OP,
            detail: format!("bias shape {:?} != [{d_out}]", bias.shape()),
        });
    }
    let mut data = Vec::with_capacity(d_out);
    for o in 0..d_out {
        let row = &weight.data[o * d_in..(o + 1) * d_in];
        let mut acc = bias.data[o] as f64;
        for (wv, xv) in row.iter().zip(input.data.iter()) {
            acc += *wv as f64 * *xv as f64;
        }
        data.push(acc as f32);
    }
    Ok(Tensor { shape: vec![d_out], data })
}

/// Numerically stable softmax: subtracts the max before exponentiating.
pub fn softmax(input: &Tensor) -> Tensor {
    let max = input.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = input.data.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let data = exps.iter().map(|&e| (e / sum) as f32).collect();
    Tensor { shape: input.shape.clone(), data }
}
