//! Word-level text vocabulary and the learned patch tokenizer for frames.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::Init;

pub const PAD: &str = "<PAD>";
pub const EOS: &str = "<EOS>";
pub const VIDEO: &str = "<VIDEO>";
pub const TRK: &str = "<TRK>";
/// Special tokens in id order.
pub const SPECIALS: [&str; 4] = [PAD, EOS, VIDEO, TRK];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad_id: u32,
    pub eos_id: u32,
    pub video_id: u32,
    pub trk_id: u32,
}

/// Split text into words: special tokens are atomic, whitespace separates,
/// and every ASCII punctuation character is its own word.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut rest = text;
    while let Some(ch) = rest.chars().next() {
        if let Some(special) = SPECIALS.iter().find(|s| rest.starts_with(**s)) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(special.to_string());
            rest = &rest[special.len()..];
            continue;
        }
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
        rest = &rest[ch.len_utf8()..];
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Canonical spacing: words joined by single spaces.
pub fn canonical_text(text: &str) -> String {
    split_words(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    special: SpecialIds,
}

impl Vocab {
    /// Specials first, then the corpus words in lexicographic order.
    pub fn build(corpus: &[String]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Argument("vocabulary corpus is empty".into()));
        }
        let words: BTreeSet<String> = corpus
            .iter()
            .flat_map(|s| split_words(s))
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("token {t:?} appears twice")));
            }
        }
        let id = |s: &str| {
            token_to_id
                .get(s)
                .copied()
                .ok_or_else(|| Error::Format(format!("special token {s} missing")))
        };
        let special = SpecialIds {
            pad_id: id(PAD)?,
            eos_id: id(EOS)?,
            video_id: id(VIDEO)?,
            trk_id: id(TRK)?,
        };
        Ok(Self {
            token_to_id,
            id_to_token,
            special,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        split_words(text)
            .into_iter()
            .map(|w| self.id(&w).ok_or(Error::OutOfVocabulary(w)))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words = ids
            .iter()
            .map(|&i| self.token(i).ok_or(Error::IdOutOfRange(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, u32> = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: HashMap<String, u32> = serde_json::from_str(text)?;
        let mut tokens = vec![None; map.len()];
        for (t, i) in map {
            let slot = tokens
                .get_mut(i as usize)
                .ok_or_else(|| Error::Format(format!("id {i} is not dense")))?;
            if slot.is_some() {
                return Err(Error::Format(format!("id {i} assigned twice")));
            }
            *slot = Some(t);
        }
        Self::from_tokens(tokens.into_iter().map(Option::unwrap).collect())
    }
}

/// Per-frame visual tokens on a (gh, gw) grid.
#[derive(Debug, Clone)]
pub struct FrameTokens {
    /// (T, L, d_vis)
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

impl FrameTokens {
    pub fn num_frames(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[2]
    }
}

/// Linear patch embedding plus a learned 2-D positional table.
#[derive(Debug, Clone)]
pub struct FrameTokenizer {
    pub proj: Linear,
    /// (L, d_vis)
    pub pos: Tensor,
    pub patch_size: usize,
    pub grid: (usize, usize),
    pub channels: usize,
}

impl FrameTokenizer {
    pub fn new(
        init: &mut Init,
        name: &str,
        height: usize,
        width: usize,
        channels: usize,
        patch_size: usize,
        d_vis: usize,
    ) -> Result<Self> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} frames are not divisible into {patch_size}-pixel patches"
            )));
        }
        let grid = (height / patch_size, width / patch_size);
        let patch_dim = patch_size * patch_size * channels;
        Ok(Self {
            proj: Linear::new(init, &format!("{name}.proj"), patch_dim, d_vis)?,
            pos: init.normal(&format!("{name}.pos"), &[grid.0 * grid.1, d_vis], 0.02)?,
            patch_size,
            grid,
            channels,
        })
    }

    /// `frames` is (T, H, W, C).
    pub fn tokenize(&self, frames: &Tensor) -> Result<FrameTokens> {
        let (t, h, w, c) = frames.dims4()?;
        let p = self.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "{h}x{w} frames are not divisible into {p}-pixel patches"
            )));
        }
        let grid = (h / p, w / p);
        if grid != self.grid || c != self.channels {
            return Err(Error::Shape(format!(
                "tokenizer expects a {:?} grid with {} channels, got {:?} with {c}",
                self.grid, self.channels, grid
            )));
        }
        let (gh, gw) = grid;
        let patches = frames
            .reshape((t, gh, p, gw, p, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((t, gh * gw, p * p * c))?;
        let tokens = self.proj.forward(&patches)?.broadcast_add(&self.pos)?;
        Ok(FrameTokens { tokens, grid })
    }
}
