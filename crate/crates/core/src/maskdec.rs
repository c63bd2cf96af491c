//! Per-frame convolutional encoder and a promptable two-way-attention mask
//! decoder with an upscaling dot-product mask head.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::{attention, depth_to_space, space_to_depth, to_vec_f64, upsample_bilinear, Conv3x3, LayerNorm, Linear};
use crate::params::Init;
use crate::reasoner::PromptEmbedding;

/// Encoder output for a batch of frames.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    /// (N, h, w, d_feat)
    pub features: Tensor,
    /// (N, 2h, 2w, width) stem features used by the mask upscaler.
    pub fine: Tensor,
    pub stride: usize,
}

impl FrameFeatures {
    pub fn grid(&self) -> (usize, usize) {
        let d = self.features.dims();
        (d[1], d[2])
    }

    pub fn num_frames(&self) -> usize {
        self.features.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.dims()[3]
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<FrameFeatures> {
        Ok(FrameFeatures {
            features: self.features.narrow(0, start, len)?,
            fine: self.fine.narrow(0, start, len)?,
            stride: self.stride,
        })
    }
}

/// Two 2x2 patch embeddings (total stride 4) followed by two 3x3 convolutions.
#[derive(Debug, Clone)]
pub struct FrameEncoder {
    stem: Linear,
    down: Linear,
    conv1: Conv3x3,
    conv2: Conv3x3,
}

impl FrameEncoder {
    pub const STRIDE: usize = 4;

    pub fn new(init: &mut Init, name: &str, channels: usize, width: usize, d_feat: usize) -> Result<Self> {
        Ok(Self {
            stem: Linear::new(init, &format!("{name}.stem"), 4 * channels, width)?,
            down: Linear::new(init, &format!("{name}.down"), 4 * width, d_feat)?,
            conv1: Conv3x3::new(init, &format!("{name}.conv1"), d_feat, d_feat)?,
            conv2: Conv3x3::new(init, &format!("{name}.conv2"), d_feat, d_feat)?,
        })
    }

    /// `frames` is (N, H, W, C).
    pub fn encode(&self, frames: &Tensor) -> Result<FrameFeatures> {
        let (_, h, w, _) = frames.dims4()?;
        let s = Self::STRIDE;
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("{h}x{w} frames are not divisible by stride {s}")));
        }
        let fine = self.stem.forward(&space_to_depth(frames, 2)?)?.relu()?;
        let x = self.down.forward(&space_to_depth(&fine, 2)?)?.relu()?;
        let x = self.conv1.forward(&x)?.relu()?;
        let x = self.conv2.forward(&x)?;
        Ok(FrameFeatures { features: x, fine, stride: s })
    }
}

/// Fixed sinusoidal code of normalised cell centres, (h*w, dim).
pub fn position_code(h: usize, w: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let freqs = dim / 4;
    let mut v = vec![0f64; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let r = (y as f64 + 0.5) / h as f64;
            let row = &mut v[(y * w + x) * dim..(y * w + x + 1) * dim];
            for k in 0..freqs {
                let f = std::f64::consts::PI * (k + 1) as f64;
                row[4 * k] = (f * u).sin();
                row[4 * k + 1] = (f * u).cos();
                row[4 * k + 2] = (f * r).sin();
                row[4 * k + 3] = (f * r).cos();
            }
        }
    }
    Ok(Tensor::from_vec(v, (h * w, dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl CrossAttention {
    fn new(init: &mut Init, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), d, d)?,
            k: Linear::new(init, &format!("{name}.k"), d, d)?,
            v: Linear::new(init, &format!("{name}.v"), d, d)?,
            o: Linear::new(init, &format!("{name}.o"), d, d)?,
        })
    }

    fn forward(&self, queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(queries)?;
        let k = self.k.forward(keys)?;
        let v = self.v.forward(keys)?;
        self.o.forward(&attention(&q, &k, &v, None)?)
    }
}

/// Prompt token attends to the image, gets an MLP update, then the image attends back.
#[derive(Debug, Clone)]
struct TwoWayBlock {
    token_to_image: CrossAttention,
    norm1: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
    norm2: LayerNorm,
    image_to_token: CrossAttention,
    norm3: LayerNorm,
}

impl TwoWayBlock {
    fn new(init: &mut Init, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            token_to_image: CrossAttention::new(init, &format!("{name}.t2i"), d)?,
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), d)?,
            mlp1: Linear::new(init, &format!("{name}.mlp1"), d, 2 * d)?,
            mlp2: Linear::new(init, &format!("{name}.mlp2"), 2 * d, d)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), d)?,
            image_to_token: CrossAttention::new(init, &format!("{name}.i2t"), d)?,
            norm3: LayerNorm::new(init, &format!("{name}.norm3"), d)?,
        })
    }

    fn forward(&self, token: &Tensor, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let token = self
            .norm1
            .forward(&(token + self.token_to_image.forward(token, image)?)?)?;
        let mlp = self.mlp2.forward(&self.mlp1.forward(&token)?.relu()?)?;
        let token = self.norm2.forward(&(&token + mlp)?)?;
        let image = self
            .norm3
            .forward(&image.broadcast_add(&self.image_to_token.forward(image, &token)?)?)?;
        Ok((token, image))
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub prompt_proj: Linear,
    pos_proj: Linear,
    blocks: Vec<TwoWayBlock>,
    final_attn: CrossAttention,
    final_norm: LayerNorm,
    head1: Linear,
    head2: Linear,
    /// 2x2 stride-2 transposed convolution as a per-cell linear map.
    upscale: Linear,
    fine_proj: Linear,
    up_proj: Linear,
    d_feat: usize,
}

impl MaskDecoder {
    pub const DEPTH: usize = 2;

    pub fn new(init: &mut Init, name: &str, d_prompt: usize, d_feat: usize, width: usize) -> Result<Self> {
        let blocks = (0..Self::DEPTH)
            .map(|i| TwoWayBlock::new(init, &format!("{name}.block{i}"), d_feat))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prompt_proj: Linear::new(init, &format!("{name}.prompt_proj"), d_prompt, d_feat)?,
            pos_proj: Linear::new(init, &format!("{name}.pos_proj"), d_feat, d_feat)?,
            blocks,
            final_attn: CrossAttention::new(init, &format!("{name}.final_attn"), d_feat)?,
            final_norm: LayerNorm::new(init, &format!("{name}.final_norm"), d_feat)?,
            head1: Linear::new(init, &format!("{name}.head1"), d_feat, d_feat)?,
            head2: Linear::new(init, &format!("{name}.head2"), d_feat, d_feat)?,
            upscale: Linear::new(init, &format!("{name}.upscale"), d_feat, 4 * d_feat)?,
            fine_proj: Linear::new(init, &format!("{name}.fine_proj"), width, d_feat)?,
            up_proj: Linear::new(init, &format!("{name}.up_proj"), d_feat, d_feat)?,
            d_feat,
        })
    }

    /// Logits (N, 2h, 2w) at half the input resolution for every frame in
    /// `feat`, all driven by one prompt.
    pub fn decode_half(&self, feat: &FrameFeatures, prompt: &Tensor) -> Result<Tensor> {
        let (n, h, w, d) = feat.features.dims4()?;
        if d != self.d_feat {
            return Err(Error::Shape(format!("features have {d} channels, decoder expects {}", self.d_feat)));
        }
        let d_prompt = self.prompt_proj.weight.dims()[0];
        if prompt.dims() != [d_prompt] {
            return Err(Error::Shape(format!(
                "prompt has shape {:?}, decoder expects [{d_prompt}]",
                prompt.dims()
            )));
        }
        let dtype = feat.features.dtype();
        let pe = position_code(h, w, d, dtype, feat.features.device())?;
        let mut image = feat
            .features
            .reshape((n, h * w, d))?
            .broadcast_add(&self.pos_proj.forward(&pe)?)?;
        let mut token = self
            .prompt_proj
            .forward(&prompt.reshape((1, 1, d_prompt))?)?
            .broadcast_as((n, 1, d))?
            .contiguous()?;
        for block in &self.blocks {
            (token, image) = block.forward(&token, &image)?;
        }
        let token = self
            .final_norm
            .forward(&(&token + self.final_attn.forward(&token, &image)?)?)?;
        let kernel = self.head2.forward(&self.head1.forward(&token)?.relu()?)?;
        // Upscale the attended image to the stem grid and fuse the stem features.
        let up = depth_to_space(&self.upscale.forward(&image.reshape((n, h, w, d))?)?, 2)?;
        let fused = (up + self.fine_proj.forward(&feat.fine)?)?.relu()?;
        let fused = self.up_proj.forward(&fused)?.reshape((n, 4 * h * w, d))?;
        let logits = fused.matmul(&kernel.transpose(1, 2)?.contiguous()?)?;
        Ok(logits.reshape((n, 2 * h, 2 * w))?)
    }

    /// Full-resolution logits (N, H, W).
    pub fn decode(&self, feat: &FrameFeatures, prompt: &PromptEmbedding) -> Result<MaskLogits> {
        self.decode_vector(feat, &prompt.vector)
    }

    pub fn decode_vector(&self, feat: &FrameFeatures, prompt: &Tensor) -> Result<MaskLogits> {
        let (h, w) = feat.grid();
        let half = self.decode_half(feat, prompt)?;
        Ok(MaskLogits {
            logits: upsample_bilinear(&half, h * feat.stride, w * feat.stride)?,
        })
    }
}

/// Real-valued mask logits, (N, H, W).
#[derive(Debug, Clone)]
pub struct MaskLogits {
    pub logits: Tensor,
}

impl MaskLogits {
    pub fn num_frames(&self) -> usize {
        self.logits.dims()[0]
    }

    /// Host copy of frame `i` as an (H, W) array.
    pub fn frame(&self, i: usize) -> Result<Array2<f64>> {
        let (_, h, w) = self.logits.dims3()?;
        let v = to_vec_f64(&self.logits.narrow(0, i, 1)?)?;
        Ok(Array2::from_shape_vec((h, w), v).expect("shape matches"))
    }
}

/// 1 where the logit exceeds `threshold`.
pub fn binarize(logits: &Array2<f64>, threshold: f64) -> Array2<u8> {
    logits.mapv(|v| (v > threshold) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{IndexOp, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(dtype: DType, d_prompt: usize, d_feat: usize) -> (FrameEncoder, MaskDecoder, ParamStore) {
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let enc = FrameEncoder::new(&mut init, "enc", 3, 8, d_feat).unwrap();
        let dec = MaskDecoder::new(&mut init, "dec", d_prompt, d_feat, 8).unwrap();
        (enc, dec, store)
    }

    #[test]
    fn encoder_shapes_and_errors() {
        let (enc, _, _) = build(DType::F32, 8, 16);
        let frames = Tensor::rand(0f32, 1f32, (2, 64, 64, 3), &Device::Cpu).unwrap();
        let f = enc.encode(&frames).unwrap();
        assert_eq!(f.features.dims(), &[2, 16, 16, 16]);
        let bad = Tensor::zeros((1, 62, 64, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn identical_frames_identical_features() {
        let (enc, _, _) = build(DType::F64, 8, 16);
        let one = Tensor::rand(0f64, 1f64, (1, 32, 32, 3), &Device::Cpu).unwrap();
        let two = Tensor::cat(&[&one, &one], 0).unwrap();
        let f = enc.encode(&two).unwrap().features;
        assert_eq!(
            to_vec_f64(&f.i(0).unwrap()).unwrap(),
            to_vec_f64(&f.i(1).unwrap()).unwrap()
        );
    }

    #[test]
    fn encoder_translation_on_interior() {
        // Oracle: shift the input by one stride and compare against the
        // unshifted features moved by one cell. Two 3x3 convolutions reach
        // two cells, so 2 <= x and x + 3 < 8 keep both crops off the padding.
        let (enc, _, _) = build(DType::F64, 8, 16);
        let big = Tensor::rand(0f64, 1f64, (1, 36, 36, 3), &Device::Cpu).unwrap();
        let a = big.narrow(1, 0, 32).unwrap().narrow(2, 0, 32).unwrap();
        let b = big.narrow(1, 0, 32).unwrap().narrow(2, 4, 32).unwrap();
        let fa = enc.encode(&a.contiguous().unwrap()).unwrap().features.to_dtype(DType::F64).unwrap();
        let fb = enc.encode(&b.contiguous().unwrap()).unwrap().features;
        let va = fa.i(0).unwrap();
        let vb = fb.i(0).unwrap();
        for y in 0..8 {
            for x in 2..5 {
                let pa = to_vec_f64(&va.i((y, x + 1)).unwrap()).unwrap();
                let pb = to_vec_f64(&vb.i((y, x)).unwrap()).unwrap();
                for (p, q) in pa.iter().zip(&pb) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decoder_contract_and_prompt_sensitivity() {
        let (enc, dec, _) = build(DType::F64, 8, 16);
        let frames = Tensor::rand(0f64, 1f64, (2, 32, 32, 3), &Device::Cpu).unwrap();
        let feat = enc.encode(&frames).unwrap();
        let p1 = Tensor::rand(-1f64, 1f64, 8, &Device::Cpu).unwrap();
        let p2 = Tensor::rand(-1f64, 1f64, 8, &Device::Cpu).unwrap();
        let m1 = dec.decode_vector(&feat, &p1).unwrap();
        assert_eq!(m1.logits.dims(), &[2, 32, 32]);
        let again = dec.decode_vector(&feat, &p1).unwrap();
        assert_eq!(to_vec_f64(&m1.logits).unwrap(), to_vec_f64(&again.logits).unwrap());
        let m2 = dec.decode_vector(&feat, &p2).unwrap();
        let diff = to_vec_f64(&m1.logits)
            .unwrap()
            .iter()
            .zip(to_vec_f64(&m2.logits).unwrap())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
        let wrong = Tensor::zeros(5, DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(dec.decode_vector(&feat, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn frames_decode_independently() {
        let (enc, dec, _) = build(DType::F64, 8, 16);
        let frames = Tensor::rand(0f64, 1f64, (3, 16, 16, 3), &Device::Cpu).unwrap();
        let p = Tensor::rand(-1f64, 1f64, 8, &Device::Cpu).unwrap();
        let all = dec.decode_vector(&enc.encode(&frames).unwrap(), &p).unwrap();
        let corrupted = Tensor::cat(
            &[
                frames.narrow(0, 0, 1).unwrap(),
                Tensor::rand(0f64, 1f64, (2, 16, 16, 3), &Device::Cpu).unwrap(),
            ],
            0,
        )
        .unwrap();
        let again = dec.decode_vector(&enc.encode(&corrupted).unwrap(), &p).unwrap();
        assert_eq!(all.frame(0).unwrap(), again.frame(0).unwrap());
        let alone = dec
            .decode_vector(&enc.encode(&frames.narrow(0, 0, 1).unwrap()).unwrap(), &p)
            .unwrap();
        let (a, b) = (all.frame(0).unwrap(), alone.frame(0).unwrap());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_logit_gradient_wrt_prompt_matches_finite_differences() {
        let (enc, dec, _) = build(DType::F64, 6, 8);
        let frames = Tensor::rand(0f64, 1f64, (1, 8, 8, 3), &Device::Cpu).unwrap();
        let feat = enc.encode(&frames).unwrap();
        let p0: Vec<f64> = (0..6).map(|i| 0.2 * i as f64 - 0.5).collect();
        let pv = Var::new(p0.as_slice(), &Device::Cpu).unwrap();
        let f = |p: &Tensor| dec.decode_vector(&feat, p).unwrap().logits.mean_all().unwrap();
        let g = to_vec_f64(f(pv.as_tensor()).backward().unwrap().get(pv.as_tensor()).unwrap()).unwrap();
        assert!(g.iter().any(|v| *v != 0.0));
        for i in 0..6 {
            let eps = 1e-5;
            let mut a = p0.clone();
            a[i] += eps;
            let mut b = p0.clone();
            b[i] -= eps;
            let fa = f(&Tensor::new(a.as_slice(), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            let fb = f(&Tensor::new(b.as_slice(), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (fa - fb) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs());
            assert!(rel < 1e-4, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn binarize_rules() {
        let low = Array2::from_elem((3, 3), -5.0);
        assert!(binarize(&low, 0.0).iter().all(|&v| v == 0));
        let mut m = Array2::from_elem((3, 3), -1.0);
        for (y, x) in [(0, 0), (1, 2), (2, 1)] {
            m[[y, x]] = 1.0;
        }
        let b = binarize(&m, 0.0);
        assert_eq!(b.iter().filter(|&&v| v == 1).count(), 3);
        assert_eq!(b[[1, 2]], 1);
        let r = Array2::from_shape_fn((4, 4), |(y, x)| (y as f64) - (x as f64) * 0.3);
        for (lo, hi) in [(-1.0, 0.0), (0.0, 0.5), (0.5, 2.0)] {
            let (a, b) = (binarize(&r, lo), binarize(&r, hi));
            assert!(a.iter().zip(b.iter()).all(|(p, q)| q <= p));
        }
    }
}
