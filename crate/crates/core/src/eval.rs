//! Benchmark evaluation over manifests, in-memory model evaluation, the
//! ablation runner and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datakit::{grammar::Family, load_sample, read_mask_dir, DatasetManifest, QueryType, VideoSample};
use crate::error::{Error, Result};
use crate::inferpost::{post_optimize, segment_video, PropagationConfig};
use crate::metrics::{intersection_union, score_video};
use crate::model::{ModelConfig, VideoSegModel};
use crate::sampler::Strategy;
use crate::trainer::{Objective, TrainConfig};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

/// Hex SHA-256 of the value's JSON serialisation.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub video_id: String,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    pub query_type: QueryType,
    pub source: String,
    /// Why the sample was scored 0 without comparison, if it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JandF")]
    pub j_and_f: f64,
    #[serde(rename = "gIoU")]
    pub giou: f64,
    #[serde(rename = "cIoU")]
    pub ciou: f64,
    pub videos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<SampleScore>,
    pub aggregates: Aggregates,
    /// Keyed by query type ("short", "long").
    pub by_query_type: BTreeMap<String, Aggregates>,
    /// Keyed by the sample source (e.g. "synthetic-motion").
    pub by_source: BTreeMap<String, Aggregates>,
    /// Ids of samples that could not be scored.
    pub flagged: Vec<String>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn has_failures(&self) -> bool {
        !self.flagged.is_empty()
    }

    /// J&F restricted to one synthetic query family, if present.
    pub fn family_j_and_f(&self, family: Family) -> Option<f64> {
        self.by_source.get(&family.source_tag()).map(|a| a.j_and_f)
    }
}

/// A sample with its prediction, or the reason there is none.
pub struct ScoredInput<'a> {
    pub sample: &'a VideoSample,
    pub prediction: std::result::Result<ArrayView3<'a, u8>, String>,
}

#[derive(Default)]
struct Accumulator {
    j: f64,
    f: f64,
    videos: usize,
    iou_sum: f64,
    frames: usize,
    inter: u64,
    union: u64,
}

impl Accumulator {
    fn finish(&self) -> Aggregates {
        let n = self.videos.max(1) as f64;
        let (j, f) = (self.j / n, self.f / n);
        Aggregates {
            j,
            f,
            j_and_f: (j + f) / 2.0,
            giou: if self.frames == 0 { 0.0 } else { self.iou_sum / self.frames as f64 },
            ciou: if self.union == 0 { 1.0 } else { self.inter as f64 / self.union as f64 },
            videos: self.videos,
        }
    }
}

/// Score every input; missing or malformed predictions score 0 and are flagged.
pub fn score_inputs(inputs: &[ScoredInput<'_>], config_digest: String) -> Result<EvalReport> {
    if inputs.is_empty() {
        return Err(Error::Argument("nothing to evaluate".into()));
    }
    let mut per_sample = Vec::with_capacity(inputs.len());
    let mut flagged = Vec::new();
    let mut all = Accumulator::default();
    let mut by_query: BTreeMap<String, Accumulator> = BTreeMap::new();
    let mut by_source: BTreeMap<String, Accumulator> = BTreeMap::new();
    for input in inputs {
        let s = input.sample;
        let gt = s.gt_masks.view();
        let checked = input.prediction.clone().and_then(|p| {
            if p.dim() == gt.dim() {
                Ok(p)
            } else {
                Err(format!("prediction is {:?}, ground truth is {:?}", p.dim(), gt.dim()))
            }
        });
        let (score, frame_stats) = match checked {
            Ok(pred) => {
                let v = score_video(pred, gt)?;
                let mut stats = Vec::with_capacity(s.num_frames());
                for (p, g) in pred.outer_iter().zip(gt.outer_iter()) {
                    stats.push(intersection_union(p, g)?);
                }
                (
                    SampleScore {
                        video_id: s.video_id.clone(),
                        j: v.j,
                        f: v.f,
                        query_type: s.query_type,
                        source: s.source.clone(),
                        error: None,
                    },
                    Some(stats),
                )
            }
            Err(reason) => {
                flagged.push(s.video_id.clone());
                (
                    SampleScore {
                        video_id: s.video_id.clone(),
                        j: 0.0,
                        f: 0.0,
                        query_type: s.query_type,
                        source: s.source.clone(),
                        error: Some(reason),
                    },
                    None,
                )
            }
        };
        let query_key = serde_json::to_value(s.query_type)?
            .as_str()
            .unwrap_or_default()
            .to_string();
        for acc in [
            &mut all,
            by_query.entry(query_key).or_default(),
            by_source.entry(s.source.clone()).or_default(),
        ] {
            acc.j += score.j;
            acc.f += score.f;
            acc.videos += 1;
            match &frame_stats {
                Some(stats) => {
                    for &(i, u) in stats {
                        acc.iou_sum += if u == 0 { 1.0 } else { i as f64 / u as f64 };
                        acc.inter += i;
                        acc.union += u;
                        acc.frames += 1;
                    }
                }
                None => {
                    // a missing prediction counts as empty masks with IoU 0
                    for g in gt.outer_iter() {
                        acc.union += g.iter().filter(|&&v| v != 0).count() as u64;
                        acc.frames += 1;
                    }
                }
            }
        }
        per_sample.push(score);
    }
    Ok(EvalReport {
        per_sample,
        aggregates: all.finish(),
        by_query_type: by_query.into_iter().map(|(k, v)| (k, v.finish())).collect(),
        by_source: by_source.into_iter().map(|(k, v)| (k, v.finish())).collect(),
        flagged,
        config_digest,
    })
}

/// Score `predictions_dir/{video_id}/{t:05}.png` against every manifest entry.
pub fn evaluate_benchmark(manifest: &DatasetManifest, predictions_dir: &Path) -> Result<EvalReport> {
    let samples = manifest
        .entries
        .iter()
        .map(|e| load_sample(manifest, &e.video_id))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<std::result::Result<Array3<u8>, String>> = samples
        .iter()
        .map(|s| {
            let dir = predictions_dir.join(&s.video_id);
            if !dir.is_dir() {
                return Err(format!("missing prediction directory {}", dir.display()));
            }
            read_mask_dir(&dir).map_err(|e| e.to_string())
        })
        .collect();
    let inputs: Vec<ScoredInput> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| ScoredInput {
            sample: s,
            prediction: p.as_ref().map(|a| a.view()).map_err(Clone::clone),
        })
        .collect();
    let digest = config_digest(&(
        &manifest.split,
        manifest.entries.iter().map(|e| &e.video_id).collect::<Vec<_>>(),
    ))?;
    score_inputs(&inputs, digest)
}

/// Run the model on every sample and score the result.
pub fn evaluate_model(
    model: &VideoSegModel,
    samples: &[VideoSample],
    post_opt: Option<&PropagationConfig>,
    config_digest: String,
) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = segment_video(model, s, &s.expression)?;
        let masks = match post_opt {
            Some(cfg) => post_optimize(model, s, &pred.mask_set, &pred.selection, cfg)?.masks,
            None => pred.mask_set.masks,
        };
        preds.push(masks);
    }
    let inputs: Vec<ScoredInput> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| ScoredInput {
            sample: s,
            prediction: Ok(p.view()),
        })
        .collect();
    score_inputs(&inputs, config_digest)
}

fn fmt_row(cells: &[String], widths: &[usize]) -> String {
    let mut line = String::new();
    for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
        if i == 0 {
            let _ = write!(line, "{c:<w$}");
        } else {
            let _ = write!(line, "  {c:>w$}");
        }
    }
    line.trim_end().to_string()
}

/// Left-aligned first column, right-aligned numeric columns.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let head: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    let mut out = fmt_row(&head, &widths);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    out
}

fn agg_row(name: &str, a: &Aggregates) -> Vec<String> {
    vec![
        name.to_string(),
        a.videos.to_string(),
        format!("{:.4}", a.j),
        format!("{:.4}", a.f),
        format!("{:.4}", a.j_and_f),
        format!("{:.4}", a.giou),
        format!("{:.4}", a.ciou),
    ]
}

pub fn render_report(report: &EvalReport) -> String {
    let header = ["group", "videos", "J", "F", "J&F", "gIoU", "cIoU"];
    let mut rows = vec![agg_row("all", &report.aggregates)];
    for (k, a) in &report.by_query_type {
        rows.push(agg_row(&format!("query:{k}"), a));
    }
    for (k, a) in &report.by_source {
        rows.push(agg_row(&format!("source:{k}"), a));
    }
    let mut out = render_table(&header, &rows);
    out.push('\n');
    let sample_rows: Vec<Vec<String>> = report
        .per_sample
        .iter()
        .map(|s| {
            vec![
                s.video_id.clone(),
                format!("{:.4}", s.j),
                format!("{:.4}", s.f),
                if s.error.is_some() { "MISSING".into() } else { "ok".into() },
            ]
        })
        .collect();
    out.push_str(&render_table(&["video", "J", "F", "status"], &sample_rows));
    let _ = writeln!(out, "\nconfig digest: {}", report.config_digest);
    if !report.flagged.is_empty() {
        let _ = writeln!(out, "flagged: {}", report.flagged.join(", "));
    }
    out
}

/// Write `report.json` and `report.txt` into `dir`.
pub fn write_report<T: Serialize>(value: &T, text: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(REPORT_JSON);
    let txt_path = dir.join(REPORT_TXT);
    fs::write(&json_path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(&json_path, e))?;
    fs::write(&txt_path, text).map_err(|e| Error::io(&txt_path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Strategy,
    Objective,
    PostOpt,
}

/// The n-frame baseline whose token count is closest to, and not below, the
/// sparse-dense budget: `T_dense + ceil(T_sparse / L)` frames.
pub fn matched_n_frame(model: &ModelConfig) -> Strategy {
    let (gh, gw) = model.grid();
    let l = (gh * gw).max(1);
    let n = (model.t_dense + model.t_sparse.div_ceil(l)).min(model.t_sparse);
    Strategy::NFrame { n }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub base: TrainConfig,
    pub axes: Vec<AblationAxis>,
    /// Strategy axis values; empty means sparse_dense, matched n_frame, st_pool and slow_fast.
    pub strategies: Vec<Strategy>,
    pub propagation: PropagationConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            axes: vec![AblationAxis::Objective],
            strategies: Vec::new(),
            propagation: PropagationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub strategy: Strategy,
    pub objective: Objective,
    pub post_opt: bool,
}

impl AblationCell {
    pub fn name(&self) -> String {
        format!(
            "{}/{}{}",
            self.strategy.name(),
            self.objective.name(),
            if self.post_opt { "+post" } else { "" }
        )
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            strategy: self.strategy,
            objective: self.objective,
            ..base.clone()
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = self.axes.clone();
        seen.sort_by_key(|a| *a as u8);
        seen.dedup();
        if seen.len() != self.axes.len() {
            return Err(Error::Config("ablation axes must not repeat".into()));
        }
        self.base.validate()
    }

    fn strategy_values(&self) -> Vec<Strategy> {
        if !self.strategies.is_empty() {
            return self.strategies.clone();
        }
        vec![
            Strategy::SparseDense,
            matched_n_frame(&self.base.model),
            Strategy::StPool {
                spatial_pool: 2,
                temporal_groups: 2,
            },
            Strategy::SlowFast { fast_pool: 2 },
        ]
    }

    /// Cartesian product over the requested axes; other axes keep the base value
    /// (post-optimization off).
    pub fn cells(&self) -> Vec<AblationCell> {
        let strategies = if self.axes.contains(&AblationAxis::Strategy) {
            self.strategy_values()
        } else {
            vec![self.base.strategy]
        };
        let objectives = if self.axes.contains(&AblationAxis::Objective) {
            vec![Objective::SegAll, Objective::SegOne]
        } else {
            vec![self.base.objective]
        };
        let posts = if self.axes.contains(&AblationAxis::PostOpt) {
            vec![false, true]
        } else {
            vec![false]
        };
        let mut cells = Vec::new();
        for &strategy in &strategies {
            for &objective in &objectives {
                for &post_opt in &posts {
                    cells.push(AblationCell {
                        strategy,
                        objective,
                        post_opt,
                    });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub name: String,
    pub config_digest: String,
    /// `None` when training or evaluation failed.
    pub aggregates: Option<Aggregates>,
    /// J&F per sample source.
    pub by_source: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub from: String,
    pub to: String,
    /// J&F of `to` minus J&F of `from`.
    pub delta_j_and_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub deltas: Vec<AblationDelta>,
}

impl AblationTable {
    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    pub fn row(&self, cell: &AblationCell) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == *cell)
    }
}

fn differs_in_one_axis(a: &AblationCell, b: &AblationCell) -> bool {
    let diffs = (a.strategy != b.strategy) as u8 + (a.objective != b.objective) as u8 + (a.post_opt != b.post_opt) as u8;
    diffs == 1
}

/// Train one model per distinct (strategy, objective) with `train_fn` and
/// evaluate every cell on `val`. A failed cell is recorded, not propagated.
pub fn run_ablation_with<F>(config: &AblationConfig, val: &[VideoSample], mut train_fn: F) -> Result<AblationTable>
where
    F: FnMut(&TrainConfig) -> Result<VideoSegModel>,
{
    config.validate()?;
    let cells = config.cells();
    let mut models: Vec<(TrainConfig, std::result::Result<VideoSegModel, String>)> = Vec::new();
    let mut rows = Vec::with_capacity(cells.len());
    for cell in &cells {
        let tc = cell.train_config(&config.base);
        let digest = config_digest(&(&tc, cell.post_opt, &config.propagation))?;
        let slot = match models.iter().position(|(c, _)| *c == tc) {
            Some(i) => i,
            None => {
                models.push((tc.clone(), train_fn(&tc).map_err(|e| e.to_string())));
                models.len() - 1
            }
        };
        let post = cell.post_opt.then_some(&config.propagation);
        let outcome = match &models[slot].1 {
            Ok(model) => evaluate_model(model, val, post, digest.clone()).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        rows.push(match outcome {
            Ok(report) => AblationRow {
                cell: *cell,
                name: cell.name(),
                config_digest: digest,
                aggregates: Some(report.aggregates),
                by_source: report.by_source.iter().map(|(k, a)| (k.clone(), a.j_and_f)).collect(),
                error: None,
            },
            Err(e) => AblationRow {
                cell: *cell,
                name: cell.name(),
                config_digest: digest,
                aggregates: None,
                by_source: BTreeMap::new(),
                error: Some(e),
            },
        });
    }
    let mut deltas = Vec::new();
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            if let (Some(x), Some(y)) = (&a.aggregates, &b.aggregates) {
                if differs_in_one_axis(&a.cell, &b.cell) {
                    deltas.push(AblationDelta {
                        from: a.name.clone(),
                        to: b.name.clone(),
                        delta_j_and_f: y.j_and_f - x.j_and_f,
                    });
                }
            }
        }
    }
    Ok(AblationTable { rows, deltas })
}

/// Train every cell from scratch on `train` and evaluate on `val`.
pub fn run_ablation(
    config: &AblationConfig,
    train: &[VideoSample],
    val: &[VideoSample],
    vocab: &crate::tokenizer::Vocab,
) -> Result<AblationTable> {
    run_ablation_with(config, val, |tc| {
        crate::trainer::train(tc, train, vocab.clone(), None).map(|o| o.model)
    })
}

pub fn render_ablation(table: &AblationTable) -> String {
    let mut sources: Vec<&String> = table.rows.iter().flat_map(|r| r.by_source.keys()).collect();
    sources.sort();
    sources.dedup();
    let mut header: Vec<String> = ["cell", "J", "F", "J&F"].iter().map(|s| s.to_string()).collect();
    header.extend(sources.iter().map(|s| format!("J&F {s}")));
    header.push("digest".into());
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.name.clone()];
            match &r.aggregates {
                Some(a) => row.extend([format!("{:.4}", a.j), format!("{:.4}", a.f), format!("{:.4}", a.j_and_f)]),
                None => row.extend(["FAILED".to_string(), "-".into(), "-".into()]),
            }
            for s in &sources {
                row.push(r.by_source.get(*s).map_or("-".into(), |v| format!("{v:.4}")));
            }
            row.push(r.config_digest[..12].to_string());
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut out = render_table(&header_refs, &rows);
    if !table.deltas.is_empty() {
        out.push('\n');
        let delta_rows: Vec<Vec<String>> = table
            .deltas
            .iter()
            .map(|d| vec![d.from.clone(), d.to.clone(), format!("{:+.4}", d.delta_j_and_f)])
            .collect();
        out.push_str(&render_table(&["from", "to", "dJ&F"], &delta_rows));
    }
    out
}
