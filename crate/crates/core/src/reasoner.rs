//! A small decoder-only transformer over the assembled visual + text
//! sequence, and the MLP that turns the `<TRK>` hidden state into a prompt.

use std::cell::Cell;

use candle_core::{IndexOp, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention, causal_mask, to_vec_f64, LayerNorm, Linear};
use crate::params::Init;
use crate::sampler::TokenLayout;
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq: 192,
            vocab_size: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 || self.max_seq == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!("invalid language model config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl Block {
    fn new(init: &mut Init, name: &str, cfg: &LmConfig) -> Result<Self> {
        let d = cfg.d_model;
        // Residual branches start small so token identity survives the stack.
        let resid_std = 0.02 / (2.0 * cfg.n_layers as f64).sqrt();
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), d)?,
            qkv: Linear::new(init, &format!("{name}.qkv"), d, 3 * d)?,
            out: Linear::with_std(init, &format!("{name}.out"), d, d, resid_std)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), d)?,
            ff1: Linear::new(init, &format!("{name}.ff1"), d, cfg.d_ff)?,
            ff2: Linear::with_std(init, &format!("{name}.ff2"), cfg.d_ff, d, resid_std)?,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor, n_heads: usize) -> Result<Tensor> {
        let (s, d) = x.dims2()?;
        let dh = d / n_heads;
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?;
        let heads = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(1, i * d, d)?
                .reshape((s, n_heads, dh))?
                .transpose(0, 1)?
                .contiguous()?)
        };
        let (q, k, v) = (heads(0)?, heads(1)?, heads(2)?);
        let a = attention(&q, &k, &v, Some(mask))?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((s, d))?;
        let x = (x + self.out.forward(&a)?)?;
        let h = self.ff1.forward(&self.ln2.forward(&x)?)?.gelu()?;
        Ok((&x + self.ff2.forward(&h)?)?)
    }
}

/// The visual + text sequence after embedding.
#[derive(Debug, Clone)]
pub struct AssembledSequence {
    /// (S, d_model), positional embeddings not yet added.
    pub embeddings: Tensor,
    /// Text id at each position; `None` for visual tokens.
    pub token_ids: Vec<Option<u32>>,
    /// Positions holding assistant-answer tokens.
    pub role_mask: Vec<bool>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Reasoner {
    pub config: LmConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub vis_proj: Linear,
    pub kind_emb: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    lm_head: Linear,
}

/// Index of the first answer token: right after `ASSISTANT :`.
pub fn answer_start(ids: &[u32], vocab: &Vocab) -> Option<usize> {
    let assistant = vocab.id("ASSISTANT")?;
    let colon = vocab.id(":")?;
    ids.windows(2)
        .position(|w| w[0] == assistant && w[1] == colon)
        .map(|p| p + 2)
}

impl Reasoner {
    pub fn new(init: &mut Init, name: &str, config: &LmConfig, d_vis: usize) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|i| Block::new(init, &format!("{name}.block{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            tok_emb: init.normal(&format!("{name}.tok_emb"), &[config.vocab_size, d], 0.02)?,
            pos_emb: init.normal(&format!("{name}.pos_emb"), &[config.max_seq, d], 0.02)?,
            vis_proj: Linear::new(init, &format!("{name}.vis_proj"), d_vis, d)?,
            kind_emb: init.normal(&format!("{name}.kind_emb"), &[2, d], 0.02)?,
            blocks,
            ln_f: LayerNorm::new(init, &format!("{name}.ln_f"), d)?,
            lm_head: Linear::new(init, &format!("{name}.lm_head"), d, config.vocab_size)?,
        })
    }

    pub fn embed_ids(&self, ids: &[u32]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::IdOutOfRange(bad));
        }
        let idx = Tensor::new(ids, self.tok_emb.device())?;
        Ok(self.tok_emb.embedding(&idx)?)
    }

    /// Replace the single `<VIDEO>` placeholder with the projected visual tokens.
    pub fn assemble(&self, layout: &TokenLayout, conversation_ids: &[u32], vocab: &Vocab) -> Result<AssembledSequence> {
        let video = vocab.special().video_id;
        let slots: Vec<usize> = conversation_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == video)
            .map(|(i, _)| i)
            .collect();
        if slots.len() != 1 {
            return Err(Error::Format(format!(
                "conversation must contain exactly one <VIDEO> placeholder, found {}",
                slots.len()
            )));
        }
        let at = slots[0];
        let (before, after) = (&conversation_ids[..at], &conversation_ids[at + 1..]);
        let kinds: Vec<u32> = layout.kinds.iter().map(|k| k.index()).collect();
        let kind_idx = Tensor::new(kinds.as_slice(), self.kind_emb.device())?;
        let visual = self
            .vis_proj
            .forward(&layout.sequence.to_dtype(self.tok_emb.dtype())?)?
            .broadcast_add(&self.kind_emb.embedding(&kind_idx)?)?;
        let mut parts = Vec::with_capacity(3);
        if !before.is_empty() {
            parts.push(self.embed_ids(before)?);
        }
        parts.push(visual);
        if !after.is_empty() {
            parts.push(self.embed_ids(after)?);
        }
        let embeddings = Tensor::cat(&parts, 0)?;

        let mut token_ids: Vec<Option<u32>> = before.iter().map(|&i| Some(i)).collect();
        token_ids.extend(std::iter::repeat_n(None, layout.len()));
        token_ids.extend(after.iter().map(|&i| Some(i)));

        let answer_from = answer_start(conversation_ids, vocab).map(|p| p - 1 + layout.len());
        let role_mask = (0..token_ids.len())
            .map(|p| answer_from.is_some_and(|a| p >= a))
            .collect();
        Ok(AssembledSequence {
            embeddings,
            token_ids,
            role_mask,
        })
    }

    /// Returns (logits (S, V), hidden (S, d_model)). `hidden` is the last block's
    /// output; the final norm belongs to the text head only, so the constant
    /// answer after `<TRK>` cannot squash the prompt through it.
    pub fn forward(&self, embeddings: &Tensor) -> Result<(Tensor, Tensor)> {
        let (s, _) = embeddings.dims2()?;
        if s > self.config.max_seq {
            return Err(Error::Length {
                len: s,
                max: self.config.max_seq,
            });
        }
        let mask = causal_mask(s, embeddings.dtype(), embeddings.device())?;
        let mut x = (embeddings + self.pos_emb.narrow(0, 0, s)?)?;
        for block in &self.blocks {
            x = block.forward(&x, &mask, self.config.n_heads)?;
        }
        let logits = self.lm_head.forward(&self.ln_f.forward(&x)?)?;
        Ok((logits, x))
    }

    /// Greedy decoding after `prompt_ids`; falls back to the canonical answer
    /// when no `<TRK>` is produced.
    pub fn generate(
        &self,
        layout: &TokenLayout,
        prompt_ids: &[u32],
        vocab: &Vocab,
        max_new: usize,
    ) -> Result<Generation> {
        let special = vocab.special();
        let prefix = self.assemble(layout, prompt_ids, vocab)?;
        let budget = prefix.len() + max_new;
        if budget > self.config.max_seq {
            return Err(Error::Length {
                len: budget,
                max: self.config.max_seq,
            });
        }
        let mut generated: Vec<u32> = Vec::new();
        let mut emb = prefix.embeddings.clone();
        for _ in 0..max_new {
            let (logits, _) = self.forward(&emb)?;
            let last = logits.i(logits.dim(0)? - 1)?;
            let next = last.argmax(D::Minus1)?.to_scalar::<u32>()?;
            generated.push(next);
            if next == special.eos_id {
                break;
            }
            emb = Tensor::cat(&[emb, self.embed_ids(&[next])?], 0)?;
        }
        let (answer, forced) = if generated.contains(&special.trk_id) {
            (generated.clone(), false)
        } else {
            (vocab.encode(crate::datakit::ANSWER_TEXT)?, true)
        };
        let mut ids = prompt_ids.to_vec();
        ids.extend(&answer);
        let full = self.assemble(layout, &ids, vocab)?;
        let (_, hidden) = self.forward(&full.embeddings)?;
        let (raw, position) = extract_trk_embedding(&hidden, &full.token_ids, vocab)?;
        Ok(Generation {
            generated,
            answer,
            trk_position: position,
            forced,
            raw,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    /// Tokens produced by greedy decoding.
    pub generated: Vec<u32>,
    /// Answer used for the prompt: the generated tokens, or the canonical answer when forced.
    pub answer: Vec<u32>,
    pub trk_position: usize,
    pub forced: bool,
    /// Last-layer hidden state at `trk_position`.
    pub raw: Tensor,
}

/// Hidden state at the first `<TRK>` position.
pub fn extract_trk_embedding(hidden: &Tensor, token_ids: &[Option<u32>], vocab: &Vocab) -> Result<(Tensor, usize)> {
    let trk = vocab.special().trk_id;
    let pos = token_ids
        .iter()
        .position(|&t| t == Some(trk))
        .ok_or(Error::MissingTrkToken)?;
    Ok((hidden.i(pos)?, pos))
}

thread_local! {
    static PROMPTS_CREATED: Cell<usize> = const { Cell::new(0) };
}

/// Number of prompt embeddings created on this thread so far.
pub fn prompt_embeddings_created() -> usize {
    PROMPTS_CREATED.with(Cell::get)
}

#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    /// (d_prompt)
    pub vector: Tensor,
    pub source_position: usize,
}

impl PromptEmbedding {
    pub fn new(vector: Tensor, source_position: usize) -> Self {
        PROMPTS_CREATED.with(|c| c.set(c.get() + 1));
        Self {
            vector,
            source_position,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Two-layer MLP: d_model -> d_model -> d_prompt.
#[derive(Debug, Clone)]
pub struct PromptProjector {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl PromptProjector {
    pub fn new(init: &mut Init, name: &str, d_model: usize, d_prompt: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), d_model, d_model)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), d_model, d_prompt)?,
            activation: Activation::Relu,
        })
    }

    /// Apply the MLP to any tensor whose last axis is d_model.
    pub fn apply(&self, raw: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(raw)?;
        let h = match self.activation {
            Activation::Relu => h.relu()?,
            Activation::Identity => h,
        };
        self.fc2.forward(&h)
    }

    pub fn project(&self, raw: &Tensor, source_position: usize) -> Result<PromptEmbedding> {
        if to_vec_f64(raw)?.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite <TRK> hidden state".into()));
        }
        Ok(PromptEmbedding::new(self.apply(raw)?, source_position))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{fill_template, grammar::conversation_corpus};
    use crate::params::ParamStore;
    use crate::sampler::TokenKind;
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dtype: DType) -> (Reasoner, Vocab, ParamStore) {
        let vocab = Vocab::build(&conversation_corpus()).unwrap();
        let cfg = LmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq: 64,
            vocab_size: vocab.len(),
        };
        let mut store = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let r = Reasoner::new(&mut init, "lm", &cfg, 8).unwrap();
        (r, vocab, store)
    }

    fn layout(n: usize, dtype: DType) -> TokenLayout {
        let seq = Tensor::rand(-1f32, 1f32, (n, 8), &Device::Cpu).unwrap().to_dtype(dtype).unwrap();
        TokenLayout {
            sequence: seq,
            kinds: (0..n).map(|i| if i % 5 == 0 { TokenKind::Pooled } else { TokenKind::Dense }).collect(),
            frame_of_token: vec![0; n],
        }
    }

    fn conversation(vocab: &Vocab) -> Vec<u32> {
        vocab.encode(&fill_template("the red circle").unwrap()).unwrap()
    }

    #[test]
    fn assembled_length_and_role_mask() {
        let (r, vocab, _) = setup(DType::F32);
        let ids = conversation(&vocab);
        let asm = r.assemble(&layout(10, DType::F32), &ids, &vocab).unwrap();
        assert_eq!(asm.len(), 10 + ids.len() - 1);
        assert_eq!(asm.embeddings.dims(), &[asm.len(), 16]);
        // "Sure , it is <TRK> ."
        assert_eq!(asm.role_mask.iter().filter(|&&b| b).count(), 6);
        let (_, pos) = {
            let (_, hidden) = r.forward(&asm.embeddings).unwrap();
            extract_trk_embedding(&hidden, &asm.token_ids, &vocab).unwrap()
        };
        assert_eq!(pos, asm.len() - 2);
    }

    #[test]
    fn placeholder_count_enforced() {
        let (r, vocab, _) = setup(DType::F32);
        let mut ids = conversation(&vocab);
        ids.push(vocab.special().video_id);
        assert!(matches!(r.assemble(&layout(3, DType::F32), &ids, &vocab), Err(Error::Format(_))));
        let none: Vec<u32> = conversation(&vocab)
            .into_iter()
            .filter(|&i| i != vocab.special().video_id)
            .collect();
        assert!(matches!(r.assemble(&layout(3, DType::F32), &none, &vocab), Err(Error::Format(_))));
    }

    #[test]
    fn causal_prefix_invariance() {
        let (r, vocab, _) = setup(DType::F64);
        let ids = conversation(&vocab);
        let lay = layout(6, DType::F64);
        let asm = r.assemble(&lay, &ids, &vocab).unwrap();
        let (logits, hidden) = r.forward(&asm.embeddings).unwrap();
        let cut = 12;
        let s = asm.len();
        let noise = Tensor::rand(-3f64, 3f64, (s - cut, 16), &Device::Cpu).unwrap();
        let perturbed = Tensor::cat(&[asm.embeddings.narrow(0, 0, cut).unwrap(), noise], 0).unwrap();
        let (logits2, hidden2) = r.forward(&perturbed).unwrap();
        let a = logits.narrow(0, 0, cut).unwrap().to_vec2::<f64>().unwrap();
        let b = logits2.narrow(0, 0, cut).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
        assert_ne!(
            logits.narrow(0, cut, 1).unwrap().to_vec2::<f64>().unwrap(),
            logits2.narrow(0, cut, 1).unwrap().to_vec2::<f64>().unwrap()
        );
        assert!(to_vec_f64(&hidden).unwrap().iter().all(|v| v.is_finite()));
        assert!(to_vec_f64(&hidden2).unwrap().iter().all(|v| v.is_finite()));
        // determinism
        let (again, _) = r.forward(&asm.embeddings).unwrap();
        assert_eq!(again.to_vec2::<f64>().unwrap(), logits.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn trk_extraction_ignores_later_tokens() {
        let (r, vocab, _) = setup(DType::F64);
        let ids = conversation(&vocab);
        let lay = layout(4, DType::F64);
        let asm = r.assemble(&lay, &ids, &vocab).unwrap();
        let (_, h1) = r.forward(&asm.embeddings).unwrap();
        let (v1, p1) = extract_trk_embedding(&h1, &asm.token_ids, &vocab).unwrap();
        let mut ids2 = ids.clone();
        let last = ids2.len() - 1;
        ids2[last] = vocab.id("circle").unwrap();
        let asm2 = r.assemble(&lay, &ids2, &vocab).unwrap();
        let (_, h2) = r.forward(&asm2.embeddings).unwrap();
        let (v2, p2) = extract_trk_embedding(&h2, &asm2.token_ids, &vocab).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(to_vec_f64(&v1).unwrap(), to_vec_f64(&v2).unwrap());

        let no_trk: Vec<Option<u32>> = asm.token_ids.iter().map(|t| t.filter(|&i| i != vocab.special().trk_id)).collect();
        assert!(matches!(extract_trk_embedding(&h1, &no_trk, &vocab), Err(Error::MissingTrkToken)));
    }

    #[test]
    fn length_limit() {
        let (r, _, _) = setup(DType::F32);
        let e = Tensor::zeros((65, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(r.forward(&e), Err(Error::Length { len: 65, max: 64 })));
    }

    #[test]
    fn untrained_generation_is_total_and_deterministic() {
        let (r, vocab, _) = setup(DType::F32);
        let text = fill_template("the blue square").unwrap();
        let prompt = text.strip_suffix(crate::datakit::ANSWER_TEXT).unwrap();
        let ids = vocab.encode(prompt).unwrap();
        let lay = layout(5, DType::F32);
        let g1 = r.generate(&lay, &ids, &vocab, 8).unwrap();
        let g2 = r.generate(&lay, &ids, &vocab, 8).unwrap();
        assert_eq!(g1.generated, g2.generated);
        assert_eq!(g1.forced, g2.forced);
        assert_eq!(g1.raw.dims(), &[16]);
        assert!(g1.generated.len() <= 8);
        assert!(matches!(r.generate(&lay, &ids, &vocab, 60), Err(Error::Length { .. })));
    }

    #[test]
    fn vocab_extension_rows_trainable() {
        let (r, vocab, store) = setup(DType::F64);
        assert_eq!(r.tok_emb.dims()[0], vocab.len());
        let var = store.get("lm.tok_emb").unwrap();
        let ids = conversation(&vocab);
        let asm = r.assemble(&layout(3, DType::F64), &ids, &vocab).unwrap();
        let (_, hidden) = r.forward(&asm.embeddings).unwrap();
        let loss = hidden.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap();
        let trk_row = to_vec_f64(&g.i(vocab.special().trk_id as usize).unwrap()).unwrap();
        assert!(trk_row.iter().any(|v| *v != 0.0));
    }

    fn projector(activation: Activation) -> PromptProjector {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let mut p = PromptProjector::new(&mut init, "proj", 8, 4).unwrap();
        p.activation = activation;
        p
    }

    #[test]
    fn projector_properties() {
        let x = Tensor::rand(-1f64, 1f64, 8, &Device::Cpu).unwrap();
        let p = projector(Activation::Relu);
        let a = p.project(&x, 3).unwrap();
        assert_eq!(a.vector.dims(), &[4]);
        assert_eq!(a.source_position, 3);
        assert_eq!(to_vec_f64(&a.vector).unwrap(), to_vec_f64(&p.project(&x, 3).unwrap().vector).unwrap());

        // with the nonlinearity disabled and zero biases the map is linear
        let lin = projector(Activation::Identity);
        let y = Tensor::rand(-1f64, 1f64, 8, &Device::Cpu).unwrap();
        let f = |t: &Tensor| to_vec_f64(&lin.apply(t).unwrap()).unwrap();
        let lhs = f(&(&x + &y).unwrap());
        let (fx, fy) = (f(&x), f(&y));
        for i in 0..4 {
            assert!((lhs[i] - (fx[i] + fy[i])).abs() < 1e-12);
        }

        let nan = Tensor::new(&[f64::NAN; 8], &Device::Cpu).unwrap();
        assert!(matches!(p.project(&nan, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_projector_gives_zero() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let p = PromptProjector::new(&mut init, "proj", 8, 4).unwrap();
        for var in store.vars() {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let x = Tensor::rand(-1f64, 1f64, 8, &Device::Cpu).unwrap();
        assert_eq!(to_vec_f64(&p.project(&x, 0).unwrap().vector).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn projector_jacobian_matches_finite_differences() {
        let p = projector(Activation::Relu);
        let x0: Vec<f64> = (0..8).map(|i| 0.3 * (i as f64) - 1.1).collect();
        let x = Var::new(x0.as_slice(), &Device::Cpu).unwrap();
        let eval = |v: &[f64]| to_vec_f64(&p.apply(&Tensor::new(v, &Device::Cpu).unwrap()).unwrap()).unwrap();
        for out in 0..4 {
            let y = p.apply(x.as_tensor()).unwrap().i(out).unwrap();
            let g = to_vec_f64(&y.backward().unwrap().get(x.as_tensor()).unwrap().clone()).unwrap();
            for i in 0..8 {
                let eps = 1e-6;
                let mut a = x0.clone();
                a[i] += eps;
                let mut b = x0.clone();
                b[i] -= eps;
                let fd = (eval(&a)[out] - eval(&b)[out]) / (2.0 * eps);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
                assert!(rel < 1e-4 || (fd - g[i]).abs() < 1e-9, "out {out} in {i}: {fd} vs {}", g[i]);
            }
        }
    }
}
