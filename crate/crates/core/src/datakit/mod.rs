//! Video samples, the synthetic corpus, preprocessing, and manifests.

pub mod grammar;
mod io;
mod synth;

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    frame_file, generate_synthetic_dataset, load_sample, read_frame_dir, read_mask_dir, read_mask_png, save_sample,
    write_mask_png, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE,
};
pub use synth::{synthesize_videos, MotionKind, PaletteEntry, SynthConfig, SynthObject, SynthVideo};

pub const VIDEO_TOKEN: &str = "<VIDEO>";
pub const TRK_TOKEN: &str = "<TRK>";
/// The assistant reply every conversation ends with.
pub const ANSWER_TEXT: &str = "Sure, it is <TRK>.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryType {
    Short,
    Long,
}

/// A video with one referring expression and its per-frame target masks.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    /// (T, H, W, C), values in [0, 1].
    pub frames: Array4<f32>,
    /// (T, H, W), values in {0, 1}.
    pub gt_masks: Array3<u8>,
    pub expression: String,
    pub query_type: QueryType,
    pub source: String,
}

impl VideoSample {
    pub fn new(
        video_id: impl Into<String>,
        frames: Array4<f32>,
        gt_masks: Array3<u8>,
        expression: impl Into<String>,
        query_type: QueryType,
        source: impl Into<String>,
    ) -> Result<Self> {
        let sample = Self {
            video_id: video_id.into(),
            frames,
            gt_masks,
            expression: expression.into(),
            query_type,
            source: source.into(),
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, h, w, _) = self.frames.dim();
        if self.gt_masks.dim() != (t, h, w) {
            return Err(Error::Shape(format!(
                "frames are {:?} but masks are {:?}",
                self.frames.dim(),
                self.gt_masks.dim()
            )));
        }
        if t == 0 {
            return Err(Error::Shape("video has no frames".into()));
        }
        if self.gt_masks.iter().any(|&v| v > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        if self.expression.trim().is_empty() {
            return Err(Error::Argument("expression is empty".into()));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), t)
    }

    pub fn mask(&self, t: usize) -> ArrayView2<'_, u8> {
        self.gt_masks.index_axis(Axis(0), t)
    }
}

/// Pixelwise union of N instance masks.
pub fn merge_class_masks(instance_masks: ArrayView3<'_, u8>) -> Result<Array2<u8>> {
    let (n, h, w) = instance_masks.dim();
    if n == 0 {
        return Err(Error::EmptyInput("no instance masks to merge".into()));
    }
    let mut out = Array2::<u8>::zeros((h, w));
    for m in instance_masks.outer_iter() {
        out.zip_mut_with(&m, |o, &v| *o |= (v != 0) as u8);
    }
    Ok(out)
}

/// Repeat an image and its mask `num_frames` times.
pub fn image_to_pseudo_video(
    video_id: impl Into<String>,
    image: ArrayView3<'_, f32>,
    mask: ArrayView2<'_, u8>,
    num_frames: usize,
    expression: impl Into<String>,
) -> Result<VideoSample> {
    if num_frames < 1 {
        return Err(Error::Argument("pseudo video needs at least one frame".into()));
    }
    let (h, w, c) = image.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "image is {h}x{w} but mask is {:?}",
            mask.dim()
        )));
    }
    let frames = image
        .insert_axis(Axis(0))
        .broadcast((num_frames, h, w, c))
        .expect("leading axis has length 1")
        .to_owned();
    let masks = mask
        .insert_axis(Axis(0))
        .broadcast((num_frames, h, w))
        .expect("leading axis has length 1")
        .to_owned();
    VideoSample::new(video_id, frames, masks, expression, QueryType::Short, "pseudo-video")
}

/// The conversation a referring description is wrapped into.
pub fn fill_template(description: &str) -> Result<String> {
    let description = description.trim();
    if description.is_empty() {
        return Err(Error::Argument("description is empty".into()));
    }
    Ok(format!(
        "USER: {VIDEO_TOKEN} Can you segment {description} in this scene? ASSISTANT: {ANSWER_TEXT}"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    #[test]
    fn template_matches_expected_text() {
        assert_eq!(
            fill_template("the red circle").unwrap(),
            "USER: <VIDEO> Can you segment the red circle in this scene? ASSISTANT: Sure, it is <TRK>."
        );
        assert!(matches!(fill_template(""), Err(Error::Argument(_))));
        assert!(matches!(fill_template("   "), Err(Error::Argument(_))));
    }

    #[test]
    fn template_has_one_trk_and_one_video() {
        for e in grammar::all_expressions() {
            let s = fill_template(&e).unwrap();
            assert_eq!(s.matches(TRK_TOKEN).count(), 1);
            assert_eq!(s.matches(VIDEO_TOKEN).count(), 1);
        }
    }

    #[test]
    fn merge_disjoint_masks() {
        let mut m = Array3::<u8>::zeros((2, 4, 4));
        for i in 0..4 {
            m[[0, 0, i]] = 1;
            m[[1, 3, i]] = 1;
        }
        let u = merge_class_masks(m.view()).unwrap();
        assert_eq!(u.iter().map(|&v| v as usize).sum::<usize>(), 8);
    }

    #[test]
    fn merge_is_idempotent() {
        let mut m = Array3::<u8>::zeros((2, 3, 3));
        m[[0, 1, 1]] = 1;
        m[[1, 1, 1]] = 1;
        let u = merge_class_masks(m.view()).unwrap();
        assert_eq!(u, m.index_axis(Axis(0), 0));
    }

    #[test]
    fn merge_empty_is_error() {
        let m = Array3::<u8>::zeros((0, 3, 3));
        assert!(matches!(merge_class_masks(m.view()), Err(Error::EmptyInput(_))));
    }

    proptest! {
        #[test]
        fn merge_equals_pixelwise_or(bits in proptest::collection::vec(0u8..2, 3 * 8 * 8)) {
            let m = Array3::from_shape_vec((3, 8, 8), bits.clone()).unwrap();
            let u = merge_class_masks(m.view()).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let any = (0..3).any(|n| bits[n * 64 + y * 8 + x] == 1);
                    prop_assert_eq!(u[[y, x]], any as u8);
                }
            }
        }
    }

    #[test]
    fn pseudo_video_duplicates() {
        let img = Array3::<f32>::from_shape_fn((8, 8, 3), |(y, x, c)| (y * 8 + x + c) as f32 / 100.0);
        let mut mask = Array2::<u8>::zeros((8, 8));
        mask[[2, 3]] = 1;
        let v = image_to_pseudo_video("img", img.view(), mask.view(), 4, "the thing").unwrap();
        assert_eq!(v.num_frames(), 4);
        assert_eq!(v.frame(0), v.frame(3));
        assert_eq!(v.frame(0), img.view());
        assert_eq!(v.mask(3), mask.view());
        v.validate().unwrap();
        let one = image_to_pseudo_video("img", img.view(), mask.view(), 1, "x").unwrap();
        assert_eq!(one.num_frames(), 1);
        assert!(matches!(
            image_to_pseudo_video("img", img.view(), mask.view(), 0, "x"),
            Err(Error::Argument(_))
        ));
    }
}
