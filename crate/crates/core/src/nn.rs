//! Small differentiable building blocks composed from primitive candle ops.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;
use crate::params::Init;

#[derive(Debug, Clone)]
pub struct Linear {
    /// Stored as (in, out) so `x @ weight` needs no transpose.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_std(init, name, d_in, d_out, 1.0 / (d_in as f64).sqrt())
    }

    pub fn with_std(init: &mut Init, name: &str, d_in: usize, d_out: usize, std: f64) -> Result<Self> {
        Ok(Self {
            weight: init.normal(&format!("{name}.weight"), &[d_in, d_out], std)?,
            bias: init.constant(&format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }

    /// Accepts any rank >= 1; the last axis is the input feature axis.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // Leading axes are folded into rows so the product is a single GEMM.
        let dims = x.dims();
        let d_in = dims[dims.len() - 1];
        let rows = x.elem_count() / d_in.max(1);
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().expect("rank >= 1") = self.d_out();
        let y = x.contiguous()?.reshape((rows, d_in))?.matmul(&self.weight)?;
        Ok(y.broadcast_add(&self.bias)?.reshape(out_dims)?)
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Fold each r x r block of an (N, H, W, C) tensor into channels:
/// (N, H/r, W/r, r*r*C), block rows outermost.
pub fn space_to_depth(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    Ok(x.reshape((n, h / r, r, w / r, r, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((n, h / r, w / r, r * r * c))?)
}

/// Inverse of [`space_to_depth`]: (N, h, w, r*r*C) to (N, h*r, w*r, C).
pub fn depth_to_space(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, h, w, rrc) = x.dims4()?;
    let c = rrc / (r * r);
    Ok(x.reshape((n, h, w, r, r, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((n, h * r, w * r, c))?)
}

/// 3x3 stride-1 zero-padded convolution on (N, H, W, C) tensors, written as
/// shifted slices and one matrix product because candle's conv backward is slow.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub proj: Linear,
}

impl Conv3x3 {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(init, name, 9 * c_in, c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        let padded = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
        let mut taps = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                // Contiguous taps keep the concatenation backward on the fast path.
                taps.push(padded.narrow(1, dy, h)?.narrow(2, dx, w)?.contiguous()?);
            }
        }
        self.proj.forward(&Tensor::cat(&taps, 3)?)
    }
}

/// Scaled dot-product attention over the last two axes.
/// `mask`, when given, is added to the score matrix before the softmax.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let d = q.dim(D::Minus1)? as f64;
    let scores = (q.matmul(&k.t()?.contiguous()?)? / d.sqrt())?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(m)?,
        None => scores,
    };
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    Ok(weights.matmul(v)?)
}

/// Additive causal mask: 0 on and below the diagonal, a large negative value above.
pub fn causal_mask(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let values: Vec<f32> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j <= i { 0.0 } else { -1e9 }))
        .collect();
    Ok(Tensor::from_vec(values, (len, len), device)?.to_dtype(dtype)?)
}

/// Linear interpolation matrix of shape (out, inp) using half-pixel centres
/// (the `align_corners = false` convention).
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Bilinear upsampling of the trailing (h, w) axes to (out_h, out_w), written
/// as two matrix products so that it is differentiable.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = x.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let dev = x.device();
    let ah = Tensor::from_vec(bilinear_matrix(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let aw = Tensor::from_vec(bilinear_matrix(out_w, w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let rows = ah.broadcast_matmul(&x.contiguous()?)?;
    Ok(rows.broadcast_matmul(&aw)?)
}

/// Host copy of a tensor as f64 values in row-major order.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
