//! Frame selection and visual-token reduction.
//!
//! Sparse-dense layout for `T_sparse` sampled frames of which `T_dense` are
//! dense: every sampled frame contributes one mean-pooled token, and each
//! dense frame is followed immediately by its full grid of `L` tokens, for
//! `T_sparse + T_dense * L` tokens in total.

use std::fmt;
use std::str::FromStr;

use candle_core::{IndexOp, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::FrameTokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSelection {
    /// Source-frame index of each sampled frame (nondecreasing; repeats only
    /// when the video is shorter than `T_sparse`).
    pub sparse_indices: Vec<usize>,
    /// Positions in `sparse_indices` kept at full resolution (strictly increasing).
    pub dense_slots: Vec<usize>,
    pub mode: SampleMode,
}

impl FrameSelection {
    pub fn t_sparse(&self) -> usize {
        self.sparse_indices.len()
    }

    pub fn t_dense(&self) -> usize {
        self.dense_slots.len()
    }

    /// Source-frame indices of the dense frames.
    pub fn dense_frames(&self) -> Vec<usize> {
        self.dense_slots.iter().map(|&s| self.sparse_indices[s]).collect()
    }

    pub fn is_dense_slot(&self, slot: usize) -> bool {
        self.dense_slots.binary_search(&slot).is_ok()
    }
}

/// Uniform sparse sampling `floor(i * T_total / T_sparse)`; dense slots are
/// uniform `floor(j * T_sparse / T_dense)` at inference and a seeded draw
/// without replacement during training.
pub fn sample_frames(
    t_total: usize,
    t_sparse: usize,
    t_dense: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<FrameSelection> {
    if t_total < 1 || t_dense < 1 || t_dense > t_sparse {
        return Err(Error::Argument(format!(
            "need T_total >= 1 and 1 <= T_dense <= T_sparse, got T_total={t_total}, T_sparse={t_sparse}, T_dense={t_dense}"
        )));
    }
    let sparse_indices = (0..t_sparse).map(|i| i * t_total / t_sparse).collect();
    let dense_slots = match mode {
        SampleMode::Infer => (0..t_dense).map(|j| j * t_sparse / t_dense).collect(),
        SampleMode::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut slots = rand::seq::index::sample(&mut rng, t_sparse, t_dense).into_vec();
            slots.sort_unstable();
            slots
        }
    };
    Ok(FrameSelection {
        sparse_indices,
        dense_slots,
        mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Pooled,
    Dense,
}

impl TokenKind {
    pub fn index(self) -> u32 {
        match self {
            TokenKind::Pooled => 0,
            TokenKind::Dense => 1,
        }
    }
}

/// The visual token sequence handed to the language model.
#[derive(Debug, Clone)]
pub struct TokenLayout {
    /// (N_tok, d_vis)
    pub sequence: Tensor,
    pub kinds: Vec<TokenKind>,
    /// Source-frame index each token came from.
    pub frame_of_token: Vec<usize>,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Token-reduction strategy; the serialized `kind` names are the CLI names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    SparseDense,
    /// `n` frames at full resolution, concatenated.
    NFrame { n: usize },
    /// Every frame pooled by `spatial_pool` per side, plus `temporal_groups`
    /// full-resolution averages over contiguous groups of frames.
    StPool {
        spatial_pool: usize,
        temporal_groups: usize,
    },
    /// Dense frames kept at full resolution, the rest pooled by `fast_pool` per side.
    SlowFast { fast_pool: usize },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::SparseDense => "sparse_dense",
            Strategy::NFrame { .. } => "n_frame",
            Strategy::StPool { .. } => "st_pool",
            Strategy::SlowFast { .. } => "slow_fast",
        }
    }

    /// Number of frames selected as dense (full resolution / supervised).
    pub fn dense_count(&self, t_dense: usize) -> usize {
        match self {
            Strategy::NFrame { n } => *n,
            _ => t_dense,
        }
    }

    /// Sequence length produced for the given sampling and token grid.
    pub fn token_count(&self, t_sparse: usize, t_dense: usize, grid: (usize, usize)) -> usize {
        let l = grid.0 * grid.1;
        match *self {
            Strategy::SparseDense => t_sparse + t_dense * l,
            Strategy::NFrame { n } => n * l,
            Strategy::StPool {
                spatial_pool,
                temporal_groups,
            } => t_sparse * (grid.0 / spatial_pool) * (grid.1 / spatial_pool) + temporal_groups * l,
            Strategy::SlowFast { fast_pool } => {
                t_dense * l + (t_sparse - t_dense) * (grid.0 / fast_pool) * (grid.1 / fast_pool)
            }
        }
    }

    pub fn validate(&self, t_sparse: usize, t_dense: usize, grid: (usize, usize)) -> Result<()> {
        let divides = |f: usize| f >= 1 && grid.0 % f == 0 && grid.1 % f == 0;
        let ok = match *self {
            Strategy::SparseDense => true,
            Strategy::NFrame { n } => n >= 1 && n <= t_sparse,
            Strategy::StPool {
                spatial_pool,
                temporal_groups,
            } => divides(spatial_pool) && temporal_groups >= 1 && temporal_groups <= t_sparse,
            Strategy::SlowFast { fast_pool } => divides(fast_pool),
        };
        if ok && t_dense >= 1 && t_dense <= t_sparse {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "invalid {} parameters {self:?} for T_sparse={t_sparse}, T_dense={t_dense}, grid={grid:?}",
                self.name()
            )))
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Parses a bare strategy name with default parameters for a 4x4 grid.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse_dense" => Ok(Strategy::SparseDense),
            "n_frame" => Ok(Strategy::NFrame { n: 4 }),
            "st_pool" => Ok(Strategy::StPool {
                spatial_pool: 2,
                temporal_groups: 2,
            }),
            "slow_fast" => Ok(Strategy::SlowFast { fast_pool: 2 }),
            other => Err(Error::Argument(format!("unknown strategy {other:?}"))),
        }
    }
}

fn check_frames(frame_tokens: &FrameTokens, selection: &FrameSelection) -> Result<()> {
    if frame_tokens.num_frames() != selection.t_sparse() {
        return Err(Error::Shape(format!(
            "{} frame grids for a selection of {} sparse frames",
            frame_tokens.num_frames(),
            selection.t_sparse()
        )));
    }
    if selection.dense_slots.iter().any(|&s| s >= selection.t_sparse()) {
        return Err(Error::Shape("dense slot outside the sparse frames".into()));
    }
    Ok(())
}

/// Average-pool each frame's grid by `factor` per side: (T, L, d) -> (T, L / factor^2, d).
fn spatial_pool(tokens: &Tensor, grid: (usize, usize), factor: usize) -> Result<Tensor> {
    let (t, _, d) = tokens.dims3()?;
    let (gh, gw) = grid;
    if factor == 1 {
        return Ok(tokens.clone());
    }
    let (ph, pw) = (gh / factor, gw / factor);
    Ok(tokens
        .reshape((t, ph, factor, pw, factor, d))?
        .mean(4)?
        .mean(2)?
        .reshape((t, ph * pw, d))?)
}

pub fn sparse_dense_reduce(frame_tokens: &FrameTokens, selection: &FrameSelection) -> Result<TokenLayout> {
    check_frames(frame_tokens, selection)?;
    let l = frame_tokens.tokens_per_frame();
    let pooled = frame_tokens.tokens.mean(1)?;
    let mut pieces = Vec::new();
    let mut kinds = Vec::new();
    let mut frame_of_token = Vec::new();
    for slot in 0..selection.t_sparse() {
        let frame = selection.sparse_indices[slot];
        pieces.push(pooled.narrow(0, slot, 1)?);
        kinds.push(TokenKind::Pooled);
        frame_of_token.push(frame);
        if selection.is_dense_slot(slot) {
            pieces.push(frame_tokens.tokens.i(slot)?);
            kinds.extend(std::iter::repeat_n(TokenKind::Dense, l));
            frame_of_token.extend(std::iter::repeat_n(frame, l));
        }
    }
    Ok(TokenLayout {
        sequence: Tensor::cat(&pieces, 0)?,
        kinds,
        frame_of_token,
    })
}

/// The comparison strategies: n-frame, spatial & temporal pooling, slow-fast.
pub fn baseline_reduce(
    frame_tokens: &FrameTokens,
    strategy: Strategy,
    selection: &FrameSelection,
) -> Result<TokenLayout> {
    check_frames(frame_tokens, selection)?;
    let t_sparse = selection.t_sparse();
    strategy.validate(t_sparse, selection.t_dense(), frame_tokens.grid)?;
    let tokens = &frame_tokens.tokens;
    let grid = frame_tokens.grid;
    let l = frame_tokens.tokens_per_frame();
    let mut pieces = Vec::new();
    let mut kinds = Vec::new();
    let mut frame_of_token = Vec::new();
    match strategy {
        Strategy::SparseDense => return sparse_dense_reduce(frame_tokens, selection),
        Strategy::NFrame { n } => {
            if selection.t_dense() != n {
                return Err(Error::Argument(format!(
                    "n_frame with n={n} needs a selection of {n} frames, got {}",
                    selection.t_dense()
                )));
            }
            for &slot in &selection.dense_slots {
                pieces.push(tokens.i(slot)?);
                kinds.extend(std::iter::repeat_n(TokenKind::Dense, l));
                frame_of_token.extend(std::iter::repeat_n(selection.sparse_indices[slot], l));
            }
        }
        Strategy::StPool {
            spatial_pool: f,
            temporal_groups,
        } => {
            let pooled = spatial_pool(tokens, grid, f)?;
            let ls = pooled.dims()[1];
            for slot in 0..t_sparse {
                pieces.push(pooled.i(slot)?);
                kinds.extend(std::iter::repeat_n(TokenKind::Pooled, ls));
                frame_of_token.extend(std::iter::repeat_n(selection.sparse_indices[slot], ls));
            }
            for g in 0..temporal_groups {
                let start = g * t_sparse / temporal_groups;
                let end = (g + 1) * t_sparse / temporal_groups;
                pieces.push(tokens.narrow(0, start, end - start)?.mean(0)?);
                kinds.extend(std::iter::repeat_n(TokenKind::Dense, l));
                frame_of_token.extend(std::iter::repeat_n(selection.sparse_indices[start], l));
            }
        }
        Strategy::SlowFast { fast_pool } => {
            let pooled = spatial_pool(tokens, grid, fast_pool)?;
            let lf = pooled.dims()[1];
            for slot in 0..t_sparse {
                let frame = selection.sparse_indices[slot];
                if selection.is_dense_slot(slot) {
                    pieces.push(tokens.i(slot)?);
                    kinds.extend(std::iter::repeat_n(TokenKind::Dense, l));
                    frame_of_token.extend(std::iter::repeat_n(frame, l));
                } else {
                    pieces.push(pooled.i(slot)?);
                    kinds.extend(std::iter::repeat_n(TokenKind::Pooled, lf));
                    frame_of_token.extend(std::iter::repeat_n(frame, lf));
                }
            }
        }
    }
    Ok(TokenLayout {
        sequence: Tensor::cat(&pieces, 0)?,
        kinds,
        frame_of_token,
    })
}

/// Dispatch on the strategy.
pub fn reduce(frame_tokens: &FrameTokens, strategy: Strategy, selection: &FrameSelection) -> Result<TokenLayout> {
    match strategy {
        Strategy::SparseDense => sparse_dense_reduce(frame_tokens, selection),
        other => baseline_reduce(frame_tokens, other, selection),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_vec_f64;
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;
    use super::Strategy;

    fn random_tokens(t: usize, grid: (usize, usize), d: usize, seed: u64) -> FrameTokens {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = t * grid.0 * grid.1 * d;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        FrameTokens {
            tokens: Tensor::from_vec(v, (t, grid.0 * grid.1, d), &Device::Cpu).unwrap(),
            grid,
        }
    }

    #[test]
    fn uniform_inference_selection() {
        let s = sample_frames(16, 8, 4, SampleMode::Infer, 0).unwrap();
        assert_eq!(s.sparse_indices, vec![0, 2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(s.dense_slots, vec![0, 2, 4, 6]);
        assert_eq!(s.dense_frames(), vec![0, 4, 8, 12]);
    }

    #[test]
    fn training_selection_is_seeded() {
        let a = sample_frames(40, 32, 4, SampleMode::Train, 9).unwrap();
        let b = sample_frames(40, 32, 4, SampleMode::Train, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.dense_slots.windows(2).all(|w| w[0] < w[1]));
        assert!(a.dense_slots.iter().all(|&s| s < 32));
    }

    #[test]
    fn short_videos_repeat_frames() {
        let s = sample_frames(3, 8, 4, SampleMode::Infer, 0).unwrap();
        assert_eq!(s.sparse_indices, vec![0, 0, 0, 1, 1, 1, 2, 2]);
        let one = sample_frames(1, 8, 4, SampleMode::Infer, 0).unwrap();
        assert!(one.sparse_indices.iter().all(|&i| i == 0));
    }

    #[test]
    fn invalid_selection_arguments() {
        assert!(matches!(sample_frames(8, 4, 5, SampleMode::Infer, 0), Err(Error::Argument(_))));
        assert!(matches!(sample_frames(8, 4, 0, SampleMode::Infer, 0), Err(Error::Argument(_))));
        assert!(matches!(sample_frames(0, 4, 2, SampleMode::Infer, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn count_example_and_constant_pooling() {
        let ft = random_tokens(8, (4, 4), 6, 1);
        let sel = sample_frames(8, 8, 2, SampleMode::Infer, 0).unwrap();
        let layout = sparse_dense_reduce(&ft, &sel).unwrap();
        assert_eq!(layout.len(), 40);
        assert_eq!(layout.sequence.dims(), &[40, 6]);

        let c = Tensor::full(0.25f64, (2, 16, 3), &Device::Cpu).unwrap();
        let ft = FrameTokens { tokens: c, grid: (4, 4) };
        let sel = sample_frames(2, 2, 1, SampleMode::Infer, 0).unwrap();
        let layout = sparse_dense_reduce(&ft, &sel).unwrap();
        assert_eq!(to_vec_f64(&layout.sequence.i(0).unwrap()).unwrap(), vec![0.25; 3]);
    }

    #[test]
    fn pooled_tokens_match_brute_force_mean() {
        let ft = random_tokens(4, (2, 3), 5, 2);
        let sel = sample_frames(4, 4, 1, SampleMode::Infer, 0).unwrap();
        let layout = sparse_dense_reduce(&ft, &sel).unwrap();
        let raw = ft.tokens.to_vec3::<f64>().unwrap();
        let seq = layout.sequence.to_vec2::<f64>().unwrap();
        let mut row = 0;
        for f in 0..4 {
            assert_eq!(layout.kinds[row], TokenKind::Pooled);
            for k in 0..5 {
                let mut s = 0.0;
                for t in raw[f].iter() {
                    s += t[k];
                }
                assert!((seq[row][k] - s / 6.0).abs() < 1e-12);
            }
            row += 1;
            if sel.is_dense_slot(f) {
                for (p, tok) in raw[f].iter().enumerate() {
                    assert_eq!(&seq[row + p], tok, "raster order");
                }
                row += 6;
            }
        }
        assert_eq!(row, layout.len());
    }

    #[test]
    fn mismatched_selection_is_shape_error() {
        let ft = random_tokens(3, (2, 2), 4, 3);
        let sel = sample_frames(8, 4, 2, SampleMode::Infer, 0).unwrap();
        assert!(matches!(sparse_dense_reduce(&ft, &sel), Err(Error::Shape(_))));
    }

    #[test]
    fn pooled_gradient_is_one_over_l() {
        let ft = random_tokens(2, (2, 2), 3, 4);
        let var = Var::from_tensor(&ft.tokens).unwrap();
        let weights = Tensor::new(&[0.3f64, -1.2, 2.0], &Device::Cpu).unwrap();
        let sel = sample_frames(2, 2, 1, SampleMode::Infer, 0).unwrap();
        let f = |t: &Tensor| -> Tensor {
            let ft = FrameTokens { tokens: t.clone(), grid: (2, 2) };
            let layout = sparse_dense_reduce(&ft, &sel).unwrap();
            // scalar function of the pooled token of the second (sparse-only) frame
            let pooled = layout.sequence.i(5).unwrap();
            (pooled.sqr().unwrap() * &weights).unwrap().sum_all().unwrap()
        };
        let loss = f(var.as_tensor());
        let grads = loss.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().to_vec3::<f64>().unwrap();
        let base = ft.tokens.to_vec3::<f64>().unwrap();
        let pooled: Vec<f64> = (0..3).map(|k| base[1].iter().map(|t| t[k]).sum::<f64>() / 4.0).collect();
        let eps = 1e-6;
        for p in 0..4 {
            for k in 0..3 {
                // derivative w.r.t. the pooled token, scaled by 1/L
                let d_pooled = 2.0 * pooled[k] * [0.3, -1.2, 2.0][k];
                assert!((g[1][p][k] - d_pooled / 4.0).abs() < 1e-12);
                // finite difference on the input token
                let mut plus = base.clone();
                plus[1][p][k] += eps;
                let mut minus = base.clone();
                minus[1][p][k] -= eps;
                let mk = |v: Vec<Vec<Vec<f64>>>| {
                    let flat: Vec<f64> = v.into_iter().flatten().flatten().collect();
                    Tensor::from_vec(flat, (2, 4, 3), &Device::Cpu).unwrap()
                };
                let fd = (f(&mk(plus)).to_scalar::<f64>().unwrap() - f(&mk(minus)).to_scalar::<f64>().unwrap()) / (2.0 * eps);
                assert!((fd - g[1][p][k]).abs() < 1e-7);
                assert_eq!(g[0][p][k], 0.0);
            }
        }
    }

    #[test]
    fn baseline_counts() {
        let ft = random_tokens(8, (4, 4), 4, 5);
        let sel4 = sample_frames(8, 8, 4, SampleMode::Infer, 0).unwrap();
        let n = baseline_reduce(&ft, Strategy::NFrame { n: 4 }, &sel4).unwrap();
        assert_eq!(n.len(), 64);
        let st = Strategy::StPool { spatial_pool: 2, temporal_groups: 2 };
        assert_eq!(baseline_reduce(&ft, st, &sel4).unwrap().len(), 8 * 4 + 2 * 16);
        let sf = Strategy::SlowFast { fast_pool: 4 };
        assert_eq!(baseline_reduce(&ft, sf, &sel4).unwrap().len(), 4 * 16 + 4);
        // fast_pool 1 keeps every frame at full resolution: plain concatenation
        let full = baseline_reduce(&ft, Strategy::SlowFast { fast_pool: 1 }, &sel4).unwrap();
        assert_eq!(full.len(), 8 * 16);
        let expect = ft.tokens.reshape((128, 4)).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(full.sequence.to_vec2::<f64>().unwrap(), expect);
        for s in [st, sf, Strategy::NFrame { n: 4 }, Strategy::SparseDense] {
            assert_eq!(
                reduce(&ft, s, &sel4).unwrap().len(),
                s.token_count(8, 4, (4, 4))
            );
        }
        assert!(matches!(
            baseline_reduce(&ft, Strategy::StPool { spatial_pool: 3, temporal_groups: 1 }, &sel4),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            baseline_reduce(&ft, Strategy::StPool { spatial_pool: 2, temporal_groups: 9 }, &sel4),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            baseline_reduce(&ft, Strategy::NFrame { n: 3 }, &sel4),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn st_pool_matches_brute_force_means() {
        let ft = random_tokens(4, (4, 4), 2, 6);
        let sel = sample_frames(4, 4, 2, SampleMode::Infer, 0).unwrap();
        let st = Strategy::StPool { spatial_pool: 2, temporal_groups: 2 };
        let seq = baseline_reduce(&ft, st, &sel).unwrap().sequence.to_vec2::<f64>().unwrap();
        let raw = ft.tokens.to_vec3::<f64>().unwrap();
        for f in 0..4 {
            for py in 0..2 {
                for px in 0..2 {
                    for k in 0..2 {
                        let mut s = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += raw[f][(2 * py + dy) * 4 + 2 * px + dx][k];
                            }
                        }
                        assert!((seq[f * 4 + py * 2 + px][k] - s / 4.0).abs() < 1e-12);
                    }
                }
            }
        }
        for g in 0..2 {
            for p in 0..16 {
                for k in 0..2 {
                    let m = (raw[2 * g][p][k] + raw[2 * g + 1][p][k]) / 2.0;
                    assert!((seq[16 + g * 16 + p][k] - m).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn strategy_names_parse() {
        for name in ["sparse_dense", "n_frame", "st_pool", "slow_fast"] {
            assert_eq!(name.parse::<Strategy>().unwrap().name(), name);
        }
        assert!("q_former".parse::<Strategy>().is_err());
        let json = serde_json::to_string(&Strategy::NFrame { n: 5 }).unwrap();
        assert_eq!(json, r#"{"kind":"n_frame","n":5}"#);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn token_count_law(t_total in 1usize..40, t_sparse in 1usize..12, dense_frac in 0.0f64..1.0,
                           gh in 1usize..4, gw in 1usize..4, train in any::<bool>(), seed in any::<u64>()) {
            let t_dense = 1 + ((t_sparse - 1) as f64 * dense_frac) as usize;
            let mode = if train { SampleMode::Train } else { SampleMode::Infer };
            let sel = sample_frames(t_total, t_sparse, t_dense, mode, seed).unwrap();
            let ft = FrameTokens {
                tokens: Tensor::zeros((t_sparse, gh * gw, 2), DType::F32, &Device::Cpu).unwrap(),
                grid: (gh, gw),
            };
            let layout = sparse_dense_reduce(&ft, &sel).unwrap();
            prop_assert_eq!(layout.len(), t_sparse + t_dense * gh * gw);
            prop_assert!(layout.frame_of_token.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(sel.sparse_indices.windows(2).all(|w| w[0] <= w[1]));
            if t_total >= t_sparse {
                prop_assert!(sel.sparse_indices.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
