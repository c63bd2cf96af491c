//! Joint text + segmentation objective, the warmup/linear-decay schedule and
//! the single-process training loop.

use std::io::Write;
use std::path::Path;

use candle_core::{Tensor, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::VideoSample;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VideoSegModel};
use crate::nn::to_vec_f64;
use crate::sampler::{SampleMode, Strategy};
use crate::tokenizer::Vocab;

pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_txt: f64,
    pub lambda_seg: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_txt: 1.0,
            lambda_seg: 1.0,
            lambda_bce: 2.0,
            lambda_dice: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_txt, self.lambda_seg, self.lambda_bce, self.lambda_dice];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Every dense frame supervised through the one prompt.
    SegAll,
    /// Only the first dense frame supervised.
    SegOne,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::SegAll => "seg_all",
            Objective::SegOne => "seg_one",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_iters: usize,
    pub weights: LossWeights,
    pub objective: Objective,
    pub strategy: Strategy,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 2,
            lr: 3e-4,
            warmup_iters: 100,
            weights: LossWeights::default(),
            objective: Objective::SegAll,
            strategy: Strategy::SparseDense,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        self.weights.validate()?;
        self.model.validate(self.strategy)
    }

    /// Learning rate used at 1-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        schedule(self.lr, self.warmup_iters, self.iterations, iter)
    }
}

/// Linear warmup 0 -> `lr` over `warmup` iterations, then linear decay to 0 at `total`.
pub fn schedule(lr: f64, warmup: usize, total: usize, iter: usize) -> f64 {
    if iter <= warmup {
        return lr * iter as f64 / warmup.max(1) as f64;
    }
    if total <= warmup {
        return lr;
    }
    let left = total.saturating_sub(iter) as f64;
    lr * left / (total - warmup) as f64
}

fn check_shapes(logits: &Tensor, gt: &Tensor) -> Result<()> {
    if logits.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "logits {:?} vs ground truth {:?}",
            logits.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Mean per-pixel binary cross-entropy in the form `max(x,0) - x*y + ln(1 + e^-|x|)`.
pub fn bce_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_shapes(logits, gt)?;
    let gt = gt.to_dtype(logits.dtype())?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per = ((logits.relu()? - (logits * &gt)?)? + softplus)?;
    Ok(per.mean_all()?)
}

/// Soft DICE: `1 - (2 sum(p*y) + eps) / (sum p + sum y + eps)` with `p = sigmoid(x)`.
pub fn dice_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_shapes(logits, gt)?;
    let gt = gt.to_dtype(logits.dtype())?;
    let p = candle_nn::ops::sigmoid(logits)?;
    let inter = (&p * &gt)?.sum_all()?;
    let num = ((inter * 2.0)? + DICE_EPS)?;
    let den = ((p.sum_all()? + gt.sum_all()?)? + DICE_EPS)?;
    Ok((1.0 - (num / den)?)?)
}

/// Mean over frames of `lambda_bce * bce + lambda_dice * dice`.
pub fn segmentation_loss(per_frame_logits: &[Tensor], per_frame_gt: &[Tensor], w: &LossWeights) -> Result<Tensor> {
    if per_frame_logits.is_empty() {
        return Err(Error::Argument("segmentation loss over zero frames".into()));
    }
    if per_frame_logits.len() != per_frame_gt.len() {
        return Err(Error::Argument(format!(
            "{} logit frames vs {} ground-truth frames",
            per_frame_logits.len(),
            per_frame_gt.len()
        )));
    }
    let mut terms = Vec::with_capacity(per_frame_logits.len());
    for (x, y) in per_frame_logits.iter().zip(per_frame_gt) {
        let t = ((bce_loss(x, y)? * w.lambda_bce)? + (dice_loss(x, y)? * w.lambda_dice)?)?;
        terms.push(t);
    }
    Ok(Tensor::stack(&terms, 0)?.mean_all()?)
}

/// Mean cross-entropy over the rows selected by `role_mask`. `logits` is (S, V).
pub fn text_loss(logits: &Tensor, target_ids: &[u32], role_mask: &[bool]) -> Result<Tensor> {
    let (s, v) = logits.dims2()?;
    if target_ids.len() != s || role_mask.len() != s {
        return Err(Error::Shape(format!(
            "{s} logit rows, {} targets, {} mask entries",
            target_ids.len(),
            role_mask.len()
        )));
    }
    if let Some(&bad) = target_ids.iter().find(|&&t| t as usize >= v) {
        return Err(Error::IdOutOfRange(bad));
    }
    let rows: Vec<u32> = (0..s as u32).filter(|&p| role_mask[p as usize]).collect();
    if rows.is_empty() {
        return Err(Error::Argument("text loss over an empty role mask".into()));
    }
    let targets: Vec<u32> = rows.iter().map(|&p| target_ids[p as usize]).collect();
    let dev = logits.device();
    let picked = logits.index_select(&Tensor::new(rows.as_slice(), dev)?, 0)?;
    let logp = candle_nn::ops::log_softmax(&picked, D::Minus1)?;
    let tgt = Tensor::new(targets.as_slice(), dev)?.unsqueeze(1)?;
    Ok(logp.gather(&tgt, 1)?.neg()?.mean_all()?)
}

/// `lambda_txt * txt + lambda_seg * seg`.
pub fn total_loss(txt: &Tensor, seg: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(((txt * w.lambda_txt)? + (seg * w.lambda_seg)?)?)
}

/// Loss terms of one sample, still attached to the graph.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub text: Tensor,
    pub seg: Tensor,
    pub total: Tensor,
}

/// Source-frame indices supervised under `objective`.
pub fn supervised_frames(objective: Objective, dense_frames: &[usize]) -> Vec<usize> {
    match objective {
        Objective::SegAll => dense_frames.to_vec(),
        Objective::SegOne => dense_frames.iter().take(1).copied().collect(),
    }
}

/// Forward pass and loss of one sample under a given frame-selection seed.
pub fn sample_loss(
    model: &VideoSegModel,
    sample: &VideoSample,
    objective: Objective,
    weights: &LossWeights,
    selection_seed: u64,
) -> Result<SampleLoss> {
    let selection = model.select(sample.num_frames(), SampleMode::Train, selection_seed)?;
    let fwd = model.forward_train(sample, &selection)?;
    let targets: Vec<u32> = fwd.text.targets.clone();
    let mask = vec![true; targets.len()];
    let text = text_loss(&fwd.text.logits, &targets, &mask)?;
    let frames = supervised_frames(objective, &selection.dense_frames());
    let logits = model.decode_frames(sample, &frames, &fwd.prompt.vector)?.logits;
    let gt = model.masks_tensor(sample, &frames)?;
    let per_logits = (0..frames.len()).map(|i| logits.get(i)).collect::<candle_core::Result<Vec<_>>>()?;
    let per_gt = (0..frames.len()).map(|i| gt.get(i)).collect::<candle_core::Result<Vec<_>>>()?;
    let seg = segmentation_loss(&per_logits, &per_gt, weights)?;
    let total = total_loss(&text, &seg, weights)?;
    Ok(SampleLoss { text, seg, total })
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss_txt: f64,
    pub loss_seg: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VideoSegModel,
    pub log: Vec<LogRecord>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(to_vec_f64(t)?[0])
}

/// Deterministic per-(iteration, slot) seed for the training frame draw.
fn selection_seed(seed: u64, iter: usize, slot: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((iter as u64) << 20) ^ slot as u64
}

/// Train a fresh model on `samples`. When `log_sink` is given, every record is
/// written to it as one JSON line as soon as it is produced.
pub fn train(
    config: &TrainConfig,
    samples: &[VideoSample],
    vocab: Vocab,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let model = VideoSegModel::new(&config.model, config.strategy, vocab, config.seed)?;
    let params = ParamsAdamW {
        lr: config.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut opt = AdamW::new(model.store.vars(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_DA7A);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.iterations);
    let inv_b = 1.0 / config.batch_size as f64;
    for iter in 1..=config.iterations {
        let mut totals = Vec::with_capacity(config.batch_size);
        let (mut txt, mut seg) = (0.0, 0.0);
        for slot in 0..config.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let sample = &samples[order.pop().expect("refilled above")];
            let loss = sample_loss(
                &model,
                sample,
                config.objective,
                &config.weights,
                selection_seed(config.seed, iter, slot),
            )
            .map_err(|e| match e {
                Error::Numeric(detail) => Error::NonFiniteLoss { iteration: iter, detail },
                other => other,
            })?;
            txt += scalar(&loss.text)? * inv_b;
            seg += scalar(&loss.seg)? * inv_b;
            totals.push(loss.total);
        }
        let total = (Tensor::stack(&totals, 0)?.sum_all()? * inv_b)?;
        let total_value = scalar(&total)?;
        if !total_value.is_finite() || !txt.is_finite() || !seg.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                detail: format!("loss_txt={txt} loss_seg={seg} loss_total={total_value}"),
            });
        }
        let lr = config.lr_at(iter);
        opt.set_learning_rate(lr);
        opt.backward_step(&total)?;
        let record = LogRecord {
            iter,
            lr,
            loss_txt: txt,
            loss_seg: seg,
            loss_total: total_value,
        };
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(sink, "{line}").map_err(|e| Error::io("<training log>", e))?;
        }
        log.push(record);
    }
    Ok(TrainOutcome { model, log })
}

/// Write a log as JSON lines.
pub fn write_log(log: &[LogRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn half_ones(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i % 2) as f64).collect()
    }

    #[test]
    fn bce_closed_forms() {
        let gt = t(&half_ones(16), &[4, 4]);
        let zero = t(&[0.0; 16], &[4, 4]);
        assert!((scalar(&bce_loss(&zero, &gt).unwrap()).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = gt.affine(40.0, -20.0).unwrap();
        assert!(scalar(&bce_loss(&perfect, &gt).unwrap()).unwrap() < 1e-8);
        let l = scalar(&bce_loss(&t(&[-100.0], &[1]), &t(&[1.0], &[1])).unwrap()).unwrap();
        assert_eq!(l, 100.0);
        assert!(matches!(bce_loss(&zero, &t(&[0.0; 8], &[2, 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn dice_closed_forms() {
        let gt = t(&half_ones(16), &[4, 4]);
        let zero = t(&[0.0; 16], &[4, 4]);
        let d = scalar(&dice_loss(&zero, &gt).unwrap()).unwrap();
        assert!((d - (1.0 - (8.0 + DICE_EPS) / (16.0 + DICE_EPS))).abs() < 1e-12);
        assert!((d - 0.5).abs() < 1e-6);
        let perfect = gt.affine(40.0, -20.0).unwrap();
        assert!(scalar(&dice_loss(&perfect, &gt).unwrap()).unwrap() < 1e-6);
        let empty = t(&[0.0; 16], &[4, 4]);
        // empty target: loss = sum(p) / (sum(p) + eps), vanishing as the logits go down
        let neg = t(&[-20.0; 16], &[4, 4]);
        let sp = 16.0 / (1.0 + 20f64.exp());
        let d = scalar(&dice_loss(&neg, &empty).unwrap()).unwrap();
        assert!((d - sp / (sp + DICE_EPS)).abs() < 1e-9);
        let far = t(&[-40.0; 16], &[4, 4]);
        assert!(scalar(&dice_loss(&far, &empty).unwrap()).unwrap() < 1e-5);
    }

    #[test]
    fn segmentation_and_total_compose() {
        let w = LossWeights::default();
        let gt = t(&half_ones(16), &[4, 4]);
        let zero = t(&[0.0; 16], &[4, 4]);
        let one = scalar(&segmentation_loss(&[zero.clone()], &[gt.clone()], &w).unwrap()).unwrap();
        assert!((one - 1.636294).abs() < 1e-6);
        let two = scalar(&segmentation_loss(&[zero.clone(), zero.clone()], &[gt.clone(), gt.clone()], &w).unwrap()).unwrap();
        assert!((one - two).abs() < 1e-12);
        let none = LossWeights {
            lambda_txt: 0.0,
            lambda_seg: 0.0,
            lambda_bce: 0.0,
            lambda_dice: 0.0,
        };
        assert_eq!(scalar(&segmentation_loss(&[zero.clone()], &[gt.clone()], &none).unwrap()).unwrap(), 0.0);
        assert!(matches!(segmentation_loss(&[], &[], &w), Err(Error::Argument(_))));

        let txt = t(&[std::f64::consts::LN_2], &[]);
        let seg = t(&[one], &[]);
        assert!((scalar(&total_loss(&txt, &seg, &w).unwrap()).unwrap() - 2.329441).abs() < 1e-6);
        let seg_only = LossWeights { lambda_txt: 0.0, ..w };
        assert_eq!(scalar(&total_loss(&txt, &seg, &seg_only).unwrap()).unwrap(), one);
    }

    #[test]
    fn text_loss_closed_forms() {
        let v = 7;
        let uniform = t(&vec![0.0; 3 * v], &[3, v]);
        let l = scalar(&text_loss(&uniform, &[1, 2, 3], &[true, true, true]).unwrap()).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        let mut onehot = vec![0.0; 3 * v];
        for (row, &tgt) in [4usize, 0, 6].iter().enumerate() {
            onehot[row * v + tgt] = 20.0;
        }
        let oh = t(&onehot, &[3, v]);
        assert!(scalar(&text_loss(&oh, &[4, 0, 6], &[true; 3]).unwrap()).unwrap() < 1e-6);
        let single = scalar(&text_loss(&oh, &[4, 1, 6], &[false, true, false]).unwrap()).unwrap();
        let expected = (20f64.exp() + (v - 1) as f64).ln();
        assert!((single - expected).abs() < 1e-9);
        assert!(matches!(text_loss(&oh, &[4, 0, 6], &[false; 3]), Err(Error::Argument(_))));
    }

    #[test]
    fn schedule_shape() {
        let c = TrainConfig {
            iterations: 300,
            warmup_iters: 100,
            lr: 3e-4,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(100), 3e-4);
        assert_eq!(c.lr_at(50), 1.5e-4);
        assert_eq!(c.lr_at(300), 0.0);
        assert!((c.lr_at(200) - 1.5e-4).abs() < 1e-18);
        assert_eq!(schedule(1.0, 0, 10, 0), 0.0);
        assert_eq!(schedule(1.0, 0, 10, 5), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut w = LossWeights::default();
        w.lambda_dice = -1.0;
        assert!(w.validate().is_err());
        assert_eq!(supervised_frames(Objective::SegOne, &[2, 5, 7]), vec![2]);
        assert_eq!(supervised_frames(Objective::SegAll, &[2, 5, 7]), vec![2, 5, 7]);
    }
}
