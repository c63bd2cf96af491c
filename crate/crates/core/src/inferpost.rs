//! Inference with one prompt for every frame, reference-mask propagation
//! from the dense frames, and overlay rendering.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::datakit::{frame_file, VideoSample};
use crate::error::{Error, Result};
use crate::maskdec::binarize;
use crate::model::VideoSegModel;
use crate::nn::{bilinear_matrix, to_vec_f64};
use crate::sampler::FrameSelection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Model,
    Propagated,
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// (T, H, W) in {0, 1}
    pub masks: Array3<u8>,
    pub logits_available: bool,
    pub provenance: Vec<Provenance>,
}

impl MaskSet {
    pub fn new(masks: Array3<u8>, logits_available: bool, provenance: Vec<Provenance>) -> Result<Self> {
        if provenance.len() != masks.dim().0 {
            return Err(Error::Shape(format!(
                "{} provenance tags for {} masks",
                provenance.len(),
                masks.dim().0
            )));
        }
        if masks.iter().any(|&v| v > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            masks,
            logits_available,
            provenance,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.masks.dim().0
    }

    pub fn mask(&self, t: usize) -> ArrayView2<'_, u8> {
        self.masks.index_axis(Axis(0), t)
    }
}

/// Output of [`segment_video`].
#[derive(Debug, Clone)]
pub struct VideoPrediction {
    pub mask_set: MaskSet,
    /// Frame selection used to build the prompt; its dense frames are the
    /// post-optimization references.
    pub selection: FrameSelection,
    /// Whether the `<TRK>` answer had to be forced after greedy decoding.
    pub forced: bool,
    /// Full-resolution logits, (T, H, W).
    pub logits: Array3<f32>,
}

/// Decode every frame of `video` with the single prompt produced for `instruction`.
pub fn segment_video(model: &VideoSegModel, video: &VideoSample, instruction: &str) -> Result<VideoPrediction> {
    let query = model.query(video, instruction)?;
    let (t, h, w) = (video.num_frames(), video.height(), video.width());
    let mut logits = Array3::<f32>::zeros((t, h, w));
    let chunk = model.config.decode_chunk;
    let all: Vec<usize> = (0..t).collect();
    for idx in all.chunks(chunk) {
        let out = model.decode_frames(video, idx, &query.prompt.vector)?;
        let values = to_vec_f64(&out.logits)?;
        let block = Array3::from_shape_vec((idx.len(), h, w), values.into_iter().map(|v| v as f32).collect())
            .expect("decoder output is (N, H, W)");
        logits.slice_mut(s![idx[0]..idx[0] + idx.len(), .., ..]).assign(&block);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite mask logits for {}", video.video_id)));
    }
    let masks = logits.mapv(|v| (v > 0.0) as u8);
    Ok(VideoPrediction {
        mask_set: MaskSet::new(masks, true, vec![Provenance::Model; t])?,
        selection: query.selection,
        forced: query.generation.forced,
        logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    pub top_k: usize,
    pub temperature: f64,
    pub threshold: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            top_k: 8,
            temperature: 0.1,
            threshold: 0.5,
        }
    }
}

/// Mean of each `stride x stride` block: (H, W) -> (H / stride, W / stride).
pub fn downsample_mask(mask: ArrayView2<'_, u8>, stride: usize) -> Array2<f64> {
    let (h, w) = mask.dim();
    let (gh, gw) = (h / stride, w / stride);
    let area = (stride * stride) as f64;
    Array2::from_shape_fn((gh, gw), |(y, x)| {
        let block = mask.slice(s![y * stride..(y + 1) * stride, x * stride..(x + 1) * stride]);
        block.iter().map(|&v| (v != 0) as u8 as f64).sum::<f64>() / area
    })
}

/// Bilinear upsampling of a host array, matching the decoder's convention.
pub fn upsample_host(x: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let ry = Array2::from_shape_vec((out_h, h), bilinear_matrix(out_h, h)).expect("row matrix");
    let rx = Array2::from_shape_vec((out_w, w), bilinear_matrix(out_w, w)).expect("column matrix");
    ry.dot(&x).dot(&rx.t())
}

fn normalise_cells(features: ArrayView3<'_, f64>) -> Array2<f64> {
    let (h, w, d) = features.dim();
    let mut cells = features.to_owned().into_shape_with_order((h * w, d)).expect("contiguous");
    for mut row in cells.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    cells
}

/// Readout probability on the feature grid of one query frame.
///
/// Each query cell takes the `top_k` most cosine-similar cells over all
/// reference frames (ties broken by reference order, then cell order) and
/// returns the softmax(sim / temperature)-weighted mean of their mask values.
pub fn propagate_from_features(
    query: ArrayView3<'_, f64>,
    references: &[ArrayView3<'_, f64>],
    reference_masks: &[ArrayView2<'_, f64>],
    config: &PropagationConfig,
) -> Result<Array2<f64>> {
    if references.is_empty() || references.len() != reference_masks.len() {
        return Err(Error::Argument(format!(
            "{} reference feature maps and {} reference masks",
            references.len(),
            reference_masks.len()
        )));
    }
    let (h, w, d) = query.dim();
    for (f, m) in references.iter().zip(reference_masks) {
        let (rh, rw, rd) = f.dim();
        if rd != d || m.dim() != (rh, rw) {
            return Err(Error::Shape("reference features and masks disagree with the query".into()));
        }
    }
    if config.top_k == 0 || !(config.temperature > 0.0) {
        return Err(Error::Argument("top_k must be >= 1 and temperature > 0".into()));
    }
    let q = normalise_cells(query);
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for (f, m) in references.iter().zip(reference_masks) {
        let k = normalise_cells(f.view());
        for (row, &v) in k.outer_iter().zip(m.iter()) {
            keys.push(row.to_owned());
            values.push(v);
        }
    }
    let k = config.top_k.min(keys.len());
    let mut out = Array2::<f64>::zeros((h, w));
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(keys.len());
    for (cell, qrow) in q.outer_iter().enumerate() {
        sims.clear();
        sims.extend(keys.iter().enumerate().map(|(j, key)| (qrow.dot(key), j)));
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top = &sims[..k];
        let max = top[0].0;
        let weights: Vec<f64> = top.iter().map(|(s, _)| ((s - max) / config.temperature).exp()).collect();
        let z: f64 = weights.iter().sum();
        let p: f64 = top.iter().zip(&weights).map(|((_, j), wt)| wt * values[*j]).sum::<f64>() / z;
        out[[cell / w, cell % w]] = p;
    }
    Ok(out)
}

/// Replace every non-dense frame's mask by propagation from the dense frames.
pub fn post_optimize(
    model: &VideoSegModel,
    video: &VideoSample,
    model_masks: &MaskSet,
    selection: &FrameSelection,
    config: &PropagationConfig,
) -> Result<MaskSet> {
    let t = video.num_frames();
    if model_masks.num_frames() != t {
        return Err(Error::Argument(format!(
            "mask set covers {} frames, video has {t}",
            model_masks.num_frames()
        )));
    }
    if model_masks.masks.dim() != video.gt_masks.dim() {
        return Err(Error::Argument("mask set and video sizes differ".into()));
    }
    let mut refs = selection.dense_frames();
    if refs.is_empty() || refs.iter().any(|&r| r >= t) {
        return Err(Error::Argument(format!("dense frames {refs:?} do not fit a {t}-frame video")));
    }
    refs.dedup();
    let (h, w) = (video.height(), video.width());
    let all: Vec<usize> = (0..t).collect();
    let feats = model.encode_frames(video, &all)?;
    let stride = feats.stride;
    let (_, gh, gw, d) = feats.features.dims4()?;
    let host = Array3::from_shape_vec((t * gh, gw, d), to_vec_f64(&feats.features)?).expect("encoder output");
    let frame_feats = |i: usize| host.slice(s![i * gh..(i + 1) * gh, .., ..]);
    let ref_feats: Vec<_> = refs.iter().map(|&r| frame_feats(r)).collect();
    let ref_masks: Vec<Array2<f64>> = refs.iter().map(|&r| downsample_mask(model_masks.mask(r), stride)).collect();
    let ref_mask_views: Vec<_> = ref_masks.iter().map(|m| m.view()).collect();

    let mut masks = model_masks.masks.clone();
    let mut provenance = vec![Provenance::Propagated; t];
    for i in 0..t {
        if refs.contains(&i) {
            provenance[i] = Provenance::Reference;
            continue;
        }
        let prob = propagate_from_features(frame_feats(i), &ref_feats, &ref_mask_views, config)?;
        let full = upsample_host(prob.view(), h, w);
        let bin = binarize(&full, config.threshold);
        masks.index_axis_mut(Axis(0), i).assign(&bin);
    }
    MaskSet::new(masks, false, provenance)
}

/// FNV-1a over the id, folded into a saturated colour.
pub fn overlay_color(video_id: &str) -> [u8; 3] {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in video_id.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    let c = |shift: u32| 64 + ((hash >> shift) & 0xbf) as u8;
    [c(0), c(16), c(32)]
}

/// One `{t:05}.png` per frame with the mask alpha-blended at 0.5.
pub fn render_overlays(video: &VideoSample, masks: &MaskSet, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if masks.masks.dim() != video.gt_masks.dim() {
        return Err(Error::Shape("mask set and video sizes differ".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let color = overlay_color(&video.video_id);
    let (h, w) = (video.height(), video.width());
    let mut written = Vec::with_capacity(video.num_frames());
    for t in 0..video.num_frames() {
        let frame = video.frame(t);
        let mask = masks.mask(t);
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let px = |c: usize| (frame[[y, x, c.min(frame.dim().2 - 1)]].clamp(0.0, 1.0) * 255.0).round() as u8;
            let base = [px(0), px(1), px(2)];
            if mask[[y, x]] == 0 {
                Rgb(base)
            } else {
                Rgb(std::array::from_fn(|c| ((base[c] as u16 + color[c] as u16 + 1) / 2) as u8))
            }
        });
        let path = frame_file(out_dir, t);
        img.save(&path).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
