//! On-disk layout: `frames/{video_id}/{t:05}.png`, `masks/{video_id}/{t:05}.png`
//! and a JSON manifest next to them.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::synth::{synthesize_videos, SynthConfig};
use super::{QueryType, VideoSample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Relative to the manifest's directory.
    pub frames_dir: String,
    pub masks_dir: String,
    pub expression: String,
    pub query_type: QueryType,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(split: Split, root: impl Into<PathBuf>) -> Self {
        Self {
            split,
            entries: Vec::new(),
            root: root.into(),
        }
    }

    pub fn entry(&self, video_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.video_id == video_id)
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.video_id.as_str()) {
                return Err(Error::Format(format!("duplicate video_id {}", e.video_id)));
            }
        }
        Ok(())
    }

    /// Read a manifest and check that ids are unique and every directory exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        manifest.check_unique_ids()?;
        for e in &manifest.entries {
            for dir in [&e.frames_dir, &e.masks_dir] {
                let p = manifest.root.join(dir);
                if !p.is_dir() {
                    return Err(Error::io(p, "directory does not exist"));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.check_unique_ids()?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `{dir}/{t:05}.png`
pub fn frame_file(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("{t:05}.png"))
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    Ok(files)
}

/// Writes a {0,1} mask as a {0,255} grayscale PNG.
pub fn write_mask_png(mask: ArrayView2<'_, u8>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| Error::io(path, e))
}

/// Reads a grayscale mask; values of 128 and above map to 1.
pub fn read_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| Error::io(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        (img.get_pixel(x as u32, y as u32)[0] >= 128) as u8
    }))
}

fn write_frame_png(sample: &VideoSample, t: usize, path: &Path) -> Result<()> {
    let frame = sample.frame(t);
    let (h, w, c) = frame.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = frame[[y as usize, x as usize, ch.min(c - 1)]];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| Error::io(path, e))
}

/// Write a sample's frames and masks under `root` and return its manifest entry.
pub fn save_sample(sample: &VideoSample, root: &Path) -> Result<ManifestEntry> {
    let frames_rel = format!("frames/{}", sample.video_id);
    let masks_rel = format!("masks/{}", sample.video_id);
    let frames_dir = root.join(&frames_rel);
    let masks_dir = root.join(&masks_rel);
    for d in [&frames_dir, &masks_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for t in 0..sample.num_frames() {
        write_frame_png(sample, t, &frame_file(&frames_dir, t))?;
        write_mask_png(sample.mask(t), &frame_file(&masks_dir, t))?;
    }
    Ok(ManifestEntry {
        video_id: sample.video_id.clone(),
        frames_dir: frames_rel,
        masks_dir: masks_rel,
        expression: sample.expression.clone(),
        query_type: sample.query_type,
        source: sample.source.clone(),
    })
}

/// Read every mask PNG in a directory, in file-name order, as a (T, H, W) stack.
pub fn read_mask_dir(dir: &Path) -> Result<Array3<u8>> {
    let files = sorted_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::io(dir, "no mask files"));
    }
    let masks = files
        .iter()
        .map(|f| read_mask_png(f))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = masks[0].dim();
    let mut out = Array3::<u8>::zeros((masks.len(), h, w));
    for (t, m) in masks.iter().enumerate() {
        if m.dim() != (h, w) {
            return Err(Error::io(&files[t], "mask size differs from the first mask"));
        }
        out.index_axis_mut(Axis(0), t).assign(m);
    }
    Ok(out)
}

/// Read every frame PNG in a directory, in file-name order, as (T, H, W, 3) in [0, 1].
pub fn read_frame_dir(dir: &Path) -> Result<Array4<f32>> {
    let files = sorted_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::io(dir, "no frame files"));
    }
    let mut frames: Option<Array4<f32>> = None;
    for (t, f) in files.iter().enumerate() {
        let img = image::open(f).map_err(|e| Error::io(f, e))?.to_rgb8();
        let (w, h) = img.dimensions();
        let buf = frames.get_or_insert_with(|| Array4::zeros((files.len(), h as usize, w as usize, 3)));
        if buf.dim().1 != h as usize || buf.dim().2 != w as usize {
            return Err(Error::io(f, "frame size differs from the first frame"));
        }
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                buf[[t, y as usize, x as usize, c]] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(frames.expect("at least one frame"))
}

/// Materialise one manifest entry.
pub fn load_sample(manifest: &DatasetManifest, video_id: &str) -> Result<VideoSample> {
    let entry = manifest
        .entry(video_id)
        .ok_or_else(|| Error::NotFound(format!("video {video_id}")))?;
    let frames = read_frame_dir(&manifest.root.join(&entry.frames_dir))?;
    let masks_dir = manifest.root.join(&entry.masks_dir);
    let masks = read_mask_dir(&masks_dir)?;
    if masks.dim().0 != frames.dim().0 {
        return Err(Error::io(
            &masks_dir,
            format!("{} masks for {} frames", masks.dim().0, frames.dim().0),
        ));
    }
    VideoSample::new(
        entry.video_id.clone(),
        frames,
        masks,
        entry.expression.clone(),
        entry.query_type,
        entry.source.clone(),
    )
}

/// Synthesize a corpus, write it under `out_dir`, and save `out_dir/manifest.json`.
pub fn generate_synthetic_dataset(
    config: &SynthConfig,
    out_dir: impl AsRef<Path>,
    split: Split,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let videos = synthesize_videos(config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest::new(split, out_dir);
    for v in &videos {
        manifest.entries.push(save_sample(&v.sample, out_dir)?);
    }
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig {
            num_videos: 3,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic_dataset(&tiny(), dir.path(), Split::Train).unwrap();
        let reloaded = DatasetManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(reloaded.entries, manifest.entries);
        let originals = synthesize_videos(&tiny()).unwrap();
        for v in &originals {
            let s = load_sample(&reloaded, &v.sample.video_id).unwrap();
            assert_eq!(s, v.sample);
            assert_eq!(s.num_frames(), sorted_pngs(&dir.path().join(&reloaded.entry(&s.video_id).unwrap().frames_dir)).unwrap().len());
        }
        // re-save and reload
        let dir2 = tempfile::tempdir().unwrap();
        let s = load_sample(&reloaded, "v00000").unwrap();
        let entry = save_sample(&s, dir2.path()).unwrap();
        let mut m2 = DatasetManifest::new(Split::Train, dir2.path());
        m2.entries.push(entry);
        assert_eq!(load_sample(&m2, "v00000").unwrap().gt_masks, s.gt_masks);
    }

    #[test]
    fn regenerated_files_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&tiny(), a.path(), Split::Val).unwrap();
        generate_synthetic_dataset(&tiny(), b.path(), Split::Val).unwrap();
        for rel in ["manifest.json", "frames/v00001/00003.png", "masks/v00002/00007.png"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn unknown_id_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_synthetic_dataset(&tiny(), dir.path(), Split::Train).unwrap();
        assert!(matches!(load_sample(&manifest, "zzz"), Err(Error::NotFound(_))));
        fs::remove_file(dir.path().join("masks/v00001/00002.png")).unwrap();
        match load_sample(&manifest, "v00001") {
            Err(Error::Io { path, .. }) => assert!(path.to_string_lossy().contains("v00001")),
            other => panic!("expected io error, got {other:?}"),
        }
        fs::remove_dir_all(dir.path().join("frames/v00002")).unwrap();
        assert!(matches!(
            DatasetManifest::load(dir.path().join(MANIFEST_FILE)),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut m = DatasetManifest::new(Split::Test, ".");
        let e = ManifestEntry {
            video_id: "a".into(),
            frames_dir: "f".into(),
            masks_dir: "m".into(),
            expression: "x".into(),
            query_type: QueryType::Short,
            source: "s".into(),
        };
        m.entries = vec![e.clone(), e];
        assert!(matches!(m.check_unique_ids(), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_json_shape() {
        let m = DatasetManifest::new(Split::Val, ".");
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["split"], "val");
        assert!(v["entries"].as_array().unwrap().is_empty());
        assert!(v.get("root").is_none());
    }
}
