//! Python bindings. Masks and logits cross the boundary as nested lists.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use trkseg::checkpoint::{load_checkpoint, save_checkpoint};
use trkseg::datakit::grammar::conversation_corpus;
use trkseg::datakit::{generate_synthetic_dataset, load_sample, read_frame_dir, DatasetManifest, QueryType, Split, SynthConfig, VideoSample};
use trkseg::eval::evaluate_benchmark;
use trkseg::inferpost::{post_optimize, segment_video, PropagationConfig};
use trkseg::sampler::{sample_frames, SampleMode, Strategy};
use trkseg::tokenizer;
use trkseg::trainer::{train, TrainConfig};
use trkseg::Error;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn mask2(rows: Vec<Vec<u8>>) -> PyResult<Array2<u8>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("ragged mask rows"));
    }
    Ok(Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect()).expect("checked shape"))
}

fn mask3(frames: Vec<Vec<Vec<u8>>>) -> PyResult<Array3<u8>> {
    let planes = frames.into_iter().map(mask2).collect::<PyResult<Vec<_>>>()?;
    let (h, w) = planes.first().map_or((0, 0), |p| p.dim());
    if planes.iter().any(|p| p.dim() != (h, w)) {
        return Err(PyValueError::new_err("frames differ in size"));
    }
    let mut out = Array3::zeros((planes.len(), h, w));
    for (i, p) in planes.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(p);
    }
    Ok(out)
}

fn to_lists(a: &Array3<u8>) -> Vec<Vec<Vec<u8>>> {
    a.outer_iter()
        .map(|f| f.outer_iter().map(|r| r.to_vec()).collect())
        .collect()
}

/// Word-level vocabulary with the special tokens first.
#[pyclass(name = "Vocab")]
struct PyVocab {
    inner: tokenizer::Vocab,
}

#[pymethods]
impl PyVocab {
    /// The vocabulary covering the synthetic grammar and the conversation template.
    #[staticmethod]
    fn default_corpus() -> PyResult<Self> {
        Ok(Self {
            inner: tokenizer::Vocab::build(&conversation_corpus()).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: tokenizer::Vocab::from_json(text).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    fn encode(&self, text: &str) -> PyResult<Vec<u32>> {
        self.inner.encode(text).map_err(py_err)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A trained model loaded from a checkpoint archive.
#[pyclass(name = "Model")]
struct PyModel {
    inner: trkseg::VideoSegModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    /// Train from a JSON `TrainConfig` on the videos of a manifest.
    /// Returns the model and its list of per-iteration total losses.
    #[staticmethod]
    fn train(config_json: &str, manifest: PathBuf) -> PyResult<(Self, Vec<f64>)> {
        let config: TrainConfig = serde_json::from_str(config_json).map_err(json_err)?;
        let m = DatasetManifest::load(&manifest).map_err(py_err)?;
        let samples = m
            .entries
            .iter()
            .map(|e| load_sample(&m, &e.video_id))
            .collect::<trkseg::Result<Vec<_>>>()
            .map_err(py_err)?;
        let vocab = tokenizer::Vocab::build(&conversation_corpus()).map_err(py_err)?;
        let out = train(&config, &samples, vocab, None).map_err(py_err)?;
        let losses = out.log.iter().map(|r| r.loss_total).collect();
        Ok((Self { inner: out.model }, losses))
    }

    /// Segment a directory of frame PNGs. Returns (masks T x H x W, forced, provenance).
    #[pyo3(signature = (video_dir, expression, post_opt = false))]
    fn segment(&self, video_dir: PathBuf, expression: &str, post_opt: bool) -> PyResult<(Vec<Vec<Vec<u8>>>, bool, Vec<String>)> {
        let frames = read_frame_dir(&video_dir).map_err(py_err)?;
        let (t, h, w, _) = frames.dim();
        let video = VideoSample::new("video", frames, Array3::zeros((t, h, w)), expression, QueryType::Short, "external")
            .map_err(py_err)?;
        let pred = segment_video(&self.inner, &video, expression).map_err(py_err)?;
        let set = if post_opt {
            post_optimize(&self.inner, &video, &pred.mask_set, &pred.selection, &PropagationConfig::default())
                .map_err(py_err)?
        } else {
            pred.mask_set
        };
        let provenance = set
            .provenance
            .iter()
            .map(|p| serde_json::to_value(p).map(|v| v.as_str().unwrap_or_default().to_string()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(json_err)?;
        Ok((to_lists(&set.masks), pred.forced, provenance))
    }

    fn num_parameters(&self) -> usize {
        self.inner.store.num_scalars()
    }
}

/// Write a synthetic split to `out_dir`; returns the number of videos.
#[pyfunction]
#[pyo3(signature = (out_dir, num_videos, seed = 0, split = "train"))]
fn generate_dataset(out_dir: PathBuf, num_videos: usize, seed: u64, split: &str) -> PyResult<usize> {
    let split: Split = serde_json::from_value(serde_json::Value::String(split.to_string())).map_err(json_err)?;
    let cfg = SynthConfig {
        num_videos,
        seed,
        ..SynthConfig::default()
    };
    let m = generate_synthetic_dataset(&cfg, &out_dir, split).map_err(py_err)?;
    Ok(m.entries.len())
}

/// (sparse frame indices, dense slots) for one video.
#[pyfunction]
#[pyo3(signature = (t_total, t_sparse, t_dense, train = false, seed = 0))]
fn py_sample_frames(t_total: usize, t_sparse: usize, t_dense: usize, train: bool, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let mode = if train { SampleMode::Train } else { SampleMode::Infer };
    let s = sample_frames(t_total, t_sparse, t_dense, mode, seed).map_err(py_err)?;
    Ok((s.sparse_indices, s.dense_slots))
}

/// Visual sequence length of a token-reduction strategy.
#[pyfunction]
fn token_count(strategy: &str, t_sparse: usize, t_dense: usize, grid_h: usize, grid_w: usize) -> PyResult<usize> {
    let s: Strategy = strategy.parse().map_err(py_err)?;
    s.validate(t_sparse, t_dense, (grid_h, grid_w)).map_err(py_err)?;
    Ok(s.token_count(t_sparse, t_dense, (grid_h, grid_w)))
}

#[pyfunction]
fn iou(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<f64> {
    trkseg::metrics::iou(mask2(pred)?.view(), mask2(gt)?.view()).map_err(py_err)
}

#[pyfunction]
fn giou_ciou(pairs: Vec<(Vec<Vec<u8>>, Vec<Vec<u8>>)>) -> PyResult<(f64, f64)> {
    let owned = pairs
        .into_iter()
        .map(|(p, g)| Ok((mask2(p)?, mask2(g)?)))
        .collect::<PyResult<Vec<_>>>()?;
    trkseg::metrics::giou_ciou(owned.iter().map(|(p, g)| (p.view(), g.view()))).map_err(py_err)
}

/// (J, F, J&F) of one video.
#[pyfunction]
fn score_video(pred: Vec<Vec<Vec<u8>>>, gt: Vec<Vec<Vec<u8>>>) -> PyResult<(f64, f64, f64)> {
    let s = trkseg::metrics::score_video(mask3(pred)?.view(), mask3(gt)?.view()).map_err(py_err)?;
    Ok((s.j, s.f, s.j_and_f()))
}

fn loss_inputs(logits: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<(candle_core::Tensor, candle_core::Tensor)> {
    let to_tensor = |rows: Vec<Vec<f64>>| -> PyResult<candle_core::Tensor> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("ragged rows"));
        }
        candle_core::Tensor::from_vec(rows.into_iter().flatten().collect::<Vec<_>>(), (h, w), &candle_core::Device::Cpu)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    };
    Ok((to_tensor(logits)?, to_tensor(gt)?))
}

fn scalar(t: candle_core::Tensor) -> PyResult<f64> {
    t.to_scalar::<f64>().map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn bce_loss(logits: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<f64> {
    let (x, y) = loss_inputs(logits, gt)?;
    scalar(trkseg::trainer::bce_loss(&x, &y).map_err(py_err)?)
}

#[pyfunction]
fn dice_loss(logits: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<f64> {
    let (x, y) = loss_inputs(logits, gt)?;
    scalar(trkseg::trainer::dice_loss(&x, &y).map_err(py_err)?)
}

/// Score a predictions directory against a manifest; returns the report as JSON.
#[pyfunction]
fn evaluate(manifest: PathBuf, predictions_dir: PathBuf) -> PyResult<String> {
    let m = DatasetManifest::load(&manifest).map_err(py_err)?;
    let report = evaluate_benchmark(&m, &predictions_dir).map_err(py_err)?;
    serde_json::to_string(&report).map_err(json_err)
}

#[pymodule]
fn pytrkseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add("sample_frames", wrap_pyfunction!(py_sample_frames, m)?)?;
    m.add_function(wrap_pyfunction!(token_count, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou_ciou, m)?)?;
    m.add_function(wrap_pyfunction!(score_video, m)?)?;
    m.add_function(wrap_pyfunction!(bce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
