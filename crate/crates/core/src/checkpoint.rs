//! Versioned checkpoint archive: a safetensors file whose metadata carries
//! the format version, model config, token-reduction strategy and vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VideoSegModel};
use crate::sampler::Strategy;
use crate::tokenizer::Vocab;

pub const FORMAT_VERSION: &str = "1";

const KEY_VERSION: &str = "format_version";
const KEY_CONFIG: &str = "model_config";
const KEY_STRATEGY: &str = "strategy";
const KEY_VOCAB: &str = "vocab";

pub fn save_checkpoint(model: &VideoSegModel, path: &Path) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert(KEY_VERSION.to_string(), FORMAT_VERSION.to_string());
    meta.insert(KEY_CONFIG.to_string(), serde_json::to_string(&model.config)?);
    meta.insert(KEY_STRATEGY.to_string(), serde_json::to_string(&model.strategy)?);
    meta.insert(KEY_VOCAB.to_string(), model.vocab.to_json()?);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tensors = model.store.tensors();
    safetensors::serialize_to_file(tensors.iter(), Some(meta), path).map_err(|e| Error::io(path, e))
}

fn meta_field<'a>(meta: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Compatibility(format!("checkpoint metadata lacks {key:?}")))
}

pub fn load_checkpoint(path: &Path) -> Result<VideoSegModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Format(format!("{}: not a checkpoint archive ({e})", path.display())))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::Compatibility("checkpoint has no metadata".into()))?;
    let version = meta_field(&meta, KEY_VERSION)?;
    if version != FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint format {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let config: ModelConfig = serde_json::from_str(meta_field(&meta, KEY_CONFIG)?)?;
    let strategy: Strategy = serde_json::from_str(meta_field(&meta, KEY_STRATEGY)?)?;
    let vocab = Vocab::from_json(meta_field(&meta, KEY_VOCAB)?)?;
    if config.lm.vocab_size != vocab.len() {
        return Err(Error::Compatibility(format!(
            "model was built for {} tokens but the embedded vocabulary has {}",
            config.lm.vocab_size,
            vocab.len()
        )));
    }
    let model = VideoSegModel::new(&config, strategy, vocab, 0)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, model.store.device())?;
    let tensors = tensors
        .into_iter()
        .map(|(k, v)| Ok((k, v.to_dtype(model.dtype())?)))
        .collect::<Result<HashMap<_, _>>>()?;
    model.store.assign_all(&tensors)?;
    Ok(model)
}

/// Fail unless `vocab` is exactly the checkpoint's vocabulary.
pub fn check_vocab(model: &VideoSegModel, vocab: &Vocab) -> Result<()> {
    if model.vocab != *vocab {
        return Err(Error::Compatibility("vocabulary differs from the checkpoint's".into()));
    }
    Ok(())
}
