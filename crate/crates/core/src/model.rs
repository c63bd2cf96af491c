//! The assembled video segmentation model: frame tokenizer, token reduction,
//! language model with a `<TRK>` token, prompt projector, frame encoder and
//! mask decoder sharing one parameter store.

use candle_core::{DType, IndexOp, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{fill_template, VideoSample};
use crate::error::{Error, Result};
use crate::maskdec::{FrameEncoder, FrameFeatures, MaskDecoder, MaskLogits};
use crate::params::{Init, ParamStore};
use crate::reasoner::{answer_start, extract_trk_embedding, Generation, LmConfig, PromptEmbedding, PromptProjector, Reasoner};
use crate::sampler::{reduce, sample_frames, FrameSelection, SampleMode, Strategy, TokenLayout};
use crate::tokenizer::{FrameTokenizer, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Architecture hyper-parameters. `lm.vocab_size` is filled from the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_vis: usize,
    pub t_sparse: usize,
    pub t_dense: usize,
    pub lm: LmConfig,
    pub d_prompt: usize,
    pub d_feat: usize,
    pub encoder_width: usize,
    /// Greedy decoding budget at inference.
    pub max_new_tokens: usize,
    /// Frames encoded per decoder call at inference.
    pub decode_chunk: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            patch_size: 16,
            d_vis: 128,
            t_sparse: 8,
            t_dense: 4,
            lm: LmConfig::default(),
            d_prompt: 64,
            d_feat: 64,
            encoder_width: 32,
            max_new_tokens: 8,
            decode_chunk: 8,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size.max(1), self.width / self.patch_size.max(1))
    }

    pub fn validate(&self, strategy: Strategy) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return bad(format!(
                "{}x{} frames are not divisible into {}-pixel patches",
                self.height, self.width, self.patch_size
            ));
        }
        let s = FrameEncoder::STRIDE;
        if self.height % s != 0 || self.width % s != 0 {
            return bad(format!("frame size must be divisible by the encoder stride {s}"));
        }
        if self.t_dense == 0 || self.t_dense > self.t_sparse {
            return bad(format!("need 1 <= t_dense <= t_sparse, got {} and {}", self.t_dense, self.t_sparse));
        }
        if [self.channels, self.d_vis, self.d_prompt, self.d_feat, self.encoder_width, self.decode_chunk]
            .contains(&0)
        {
            return bad("dimensions must be positive".into());
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive".into());
        }
        strategy
            .validate(self.t_sparse, self.t_dense, self.grid())
            .map_err(|e| Error::Config(e.to_string()))?;
        let visual = strategy.token_count(self.t_sparse, self.t_dense, self.grid());
        if visual >= self.lm.max_seq {
            return bad(format!("{visual} visual tokens leave no room in a {}-token context", self.lm.max_seq));
        }
        Ok(())
    }
}

/// Text side of one training example after teacher forcing.
#[derive(Debug, Clone)]
pub struct TextTargets {
    /// Logit rows (N, V) that predict the answer tokens.
    pub logits: Tensor,
    pub targets: Vec<u32>,
}

/// Everything a training step needs from one forward pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    pub text: TextTargets,
    pub prompt: PromptEmbedding,
    pub selection: FrameSelection,
}

/// The single prompt produced for one query.
#[derive(Debug, Clone)]
pub struct QueryPrompt {
    pub prompt: PromptEmbedding,
    pub selection: FrameSelection,
    pub generation: Generation,
}

#[derive(Debug, Clone)]
pub struct VideoSegModel {
    pub config: ModelConfig,
    pub strategy: Strategy,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub tokenizer: FrameTokenizer,
    pub reasoner: Reasoner,
    pub projector: PromptProjector,
    pub encoder: FrameEncoder,
    pub decoder: MaskDecoder,
}

impl VideoSegModel {
    pub fn new(config: &ModelConfig, strategy: Strategy, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate(strategy)?;
        let mut config = config.clone();
        config.lm.vocab_size = vocab.len();
        config.lm.validate()?;
        let mut store = ParamStore::new(config.precision.dtype());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let c = &config;
        let tokenizer = FrameTokenizer::new(&mut init, "tokenizer", c.height, c.width, c.channels, c.patch_size, c.d_vis)?;
        let reasoner = Reasoner::new(&mut init, "lm", &c.lm, c.d_vis)?;
        let projector = PromptProjector::new(&mut init, "projector", c.lm.d_model, c.d_prompt)?;
        let encoder = FrameEncoder::new(&mut init, "encoder", c.channels, c.encoder_width, c.d_feat)?;
        let decoder = MaskDecoder::new(&mut init, "decoder", c.d_prompt, c.d_feat, c.encoder_width)?;
        Ok(Self {
            config,
            strategy,
            vocab,
            store,
            tokenizer,
            reasoner,
            projector,
            encoder,
            decoder,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn check_sample(&self, sample: &VideoSample) -> Result<()> {
        let c = &self.config;
        let got = (sample.height(), sample.width(), sample.frames.dim().3);
        if got != (c.height, c.width, c.channels) {
            return Err(Error::Shape(format!(
                "model expects {}x{}x{} frames, video {} is {}x{}x{}",
                c.height, c.width, c.channels, sample.video_id, got.0, got.1, got.2
            )));
        }
        Ok(())
    }

    /// Frames at `indices` as an (N, H, W, C) tensor in the model dtype.
    pub fn frames_tensor(&self, sample: &VideoSample, indices: &[usize]) -> Result<Tensor> {
        self.check_sample(sample)?;
        let (h, w, c) = (sample.height(), sample.width(), sample.frames.dim().3);
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &t in indices {
            if t >= sample.num_frames() {
                return Err(Error::Argument(format!("frame {t} outside a {}-frame video", sample.num_frames())));
            }
            data.extend(sample.frame(t).iter().copied());
        }
        Ok(Tensor::from_vec(data, (indices.len(), h, w, c), self.store.device())?.to_dtype(self.dtype())?)
    }

    /// Binary masks at `indices` as an (N, H, W) tensor of 0/1 in the model dtype.
    pub fn masks_tensor(&self, sample: &VideoSample, indices: &[usize]) -> Result<Tensor> {
        let (h, w) = (sample.height(), sample.width());
        let mut data = Vec::with_capacity(indices.len() * h * w);
        for &t in indices {
            data.extend(sample.mask(t).iter().map(|&v| (v != 0) as u8 as f32));
        }
        Ok(Tensor::from_vec(data, (indices.len(), h, w), self.store.device())?.to_dtype(self.dtype())?)
    }

    /// Frame selection for this model's strategy.
    pub fn select(&self, num_frames: usize, mode: SampleMode, seed: u64) -> Result<FrameSelection> {
        let dense = self.strategy.dense_count(self.config.t_dense);
        sample_frames(num_frames, self.config.t_sparse, dense, mode, seed)
    }

    pub fn layout(&self, sample: &VideoSample, selection: &FrameSelection) -> Result<TokenLayout> {
        let frames = self.frames_tensor(sample, &selection.sparse_indices)?;
        let tokens = self.tokenizer.tokenize(&frames)?;
        reduce(&tokens, self.strategy, selection)
    }

    /// Full training conversation: template with answer, then `<EOS>`.
    pub fn conversation_ids(&self, expression: &str) -> Result<Vec<u32>> {
        let mut ids = self.vocab.encode(&fill_template(expression)?)?;
        ids.push(self.vocab.special().eos_id);
        Ok(ids)
    }

    /// The user turn up to and including `ASSISTANT :`.
    pub fn prompt_ids(&self, expression: &str) -> Result<Vec<u32>> {
        let ids = self.vocab.encode(&fill_template(expression)?)?;
        let end = answer_start(&ids, &self.vocab).ok_or_else(|| Error::Format("template has no assistant turn".into()))?;
        Ok(ids[..end].to_vec())
    }

    /// Teacher-forced forward pass of one sample.
    pub fn forward_train(&self, sample: &VideoSample, selection: &FrameSelection) -> Result<TrainForward> {
        let layout = self.layout(sample, selection)?;
        let ids = self.conversation_ids(&sample.expression)?;
        let seq = self.reasoner.assemble(&layout, &ids, &self.vocab)?;
        let (logits, hidden) = self.reasoner.forward(&seq.embeddings)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for p in 0..seq.len().saturating_sub(1) {
            if seq.role_mask[p + 1] {
                rows.push(p as u32);
                targets.push(seq.token_ids[p + 1].expect("answer positions hold text"));
            }
        }
        if rows.is_empty() {
            return Err(Error::Format("conversation has no answer tokens".into()));
        }
        let idx = Tensor::new(rows.as_slice(), logits.device())?;
        let text = TextTargets {
            logits: logits.index_select(&idx, 0)?,
            targets,
        };
        let (raw, pos) = extract_trk_embedding(&hidden, &seq.token_ids, &self.vocab)?;
        let prompt = self.projector.project(&raw, pos)?;
        Ok(TrainForward {
            text,
            prompt,
            selection: selection.clone(),
        })
    }

    /// Greedy answer generation and the single prompt embedding for a query.
    pub fn query(&self, sample: &VideoSample, expression: &str) -> Result<QueryPrompt> {
        let selection = self.select(sample.num_frames(), SampleMode::Infer, 0)?;
        let layout = self.layout(sample, &selection)?;
        let prompt_ids = self.prompt_ids(expression)?;
        let generation = self
            .reasoner
            .generate(&layout, &prompt_ids, &self.vocab, self.config.max_new_tokens)?;
        let prompt = self.projector.project(&generation.raw, generation.trk_position)?;
        Ok(QueryPrompt {
            prompt,
            selection,
            generation,
        })
    }

    pub fn encode_frames(&self, sample: &VideoSample, indices: &[usize]) -> Result<FrameFeatures> {
        self.encoder.encode(&self.frames_tensor(sample, indices)?)
    }

    /// Logits for the frames at `indices`, all from the same prompt vector.
    pub fn decode_frames(&self, sample: &VideoSample, indices: &[usize], prompt: &Tensor) -> Result<MaskLogits> {
        let feat = self.encode_frames(sample, indices)?;
        self.decoder.decode_vector(&feat, prompt)
    }

    /// `<TRK>` row of the token embedding table.
    pub fn trk_embedding_row(&self) -> Result<Tensor> {
        Ok(self.reasoner.tok_emb.i(self.vocab.special().trk_id as usize)?)
    }
}
