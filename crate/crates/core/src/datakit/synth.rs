//! Seeded synthetic referring-video generator.
//!
//! Shapes are hard-rasterised with integer geometry, so the ground truth is
//! exact and re-rasterising an object reproduces its mask bit for bit.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, Array4};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{self, Color, Direction, Family, ShapeKind};
use super::{QueryType, VideoSample};
use crate::error::{Error, Result};

const BACKGROUND: [u8; 3] = [20, 20, 20];
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Static,
    Linear,
    FastestOfGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub shape: ShapeKind,
    pub color: Color,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape_palette: Vec<PaletteEntry>,
    pub motion_kinds: BTreeSet<MotionKind>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let shape_palette = Color::ALL
            .iter()
            .flat_map(|&color| ShapeKind::ALL.iter().map(move |&shape| PaletteEntry { shape, color }))
            .collect();
        Self {
            num_videos: 8,
            num_frames: 8,
            height: 64,
            width: 64,
            shape_palette,
            motion_kinds: [MotionKind::Static, MotionKind::Linear, MotionKind::FastestOfGroup]
                .into_iter()
                .collect(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos < 1 {
            return Err(Error::Config("num_videos must be at least 1".into()));
        }
        if self.num_frames < 2 {
            return Err(Error::Config("num_frames must be at least 2".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("height and width must be at least 16".into()));
        }
        if self.shape_palette.is_empty() {
            return Err(Error::Config("shape palette is empty".into()));
        }
        let unique: BTreeSet<_> = self
            .shape_palette
            .iter()
            .map(|p| (p.shape, p.color))
            .collect();
        if unique.len() != self.shape_palette.len() {
            return Err(Error::Config("shape palette has duplicate entries".into()));
        }
        if self.motion_kinds.is_empty() {
            return Err(Error::Config("motion_kinds is empty".into()));
        }
        if self.families().is_empty() {
            return Err(Error::Config(
                "no expression family can be generated from this palette and motion set".into(),
            ));
        }
        Ok(())
    }

    /// Expression families this configuration can produce, in generation order.
    pub fn families(&self) -> Vec<Family> {
        let mut out = Vec::new();
        let distinct = self.shape_palette.len() >= 2;
        if distinct {
            out.push(Family::Attribute);
        }
        if self.motion_kinds.contains(&MotionKind::Linear) {
            out.push(Family::Motion);
        }
        if distinct && self.motion_kinds.contains(&MotionKind::FastestOfGroup) {
            out.push(Family::Relational);
        }
        out
    }

    fn half_size(&self) -> i32 {
        (self.height.min(self.width) as i32 / 10).max(3)
    }
}

/// One rasterised object and its constant-velocity trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub half_size: i32,
    pub start: (i32, i32),
    pub velocity: (i32, i32),
}

impl SynthObject {
    pub fn center(&self, t: usize) -> (i32, i32) {
        (
            self.start.0 + self.velocity.0 * t as i32,
            self.start.1 + self.velocity.1 * t as i32,
        )
    }

    pub fn speed(&self) -> i32 {
        self.velocity.0.abs() + self.velocity.1.abs()
    }

    /// Whether pixel (x, y) is covered at frame `t`.
    pub fn covers(&self, t: usize, x: i32, y: i32) -> bool {
        let (cx, cy) = self.center(t);
        let s = self.half_size;
        let (dx, dy) = (x - cx, y - cy);
        match self.shape {
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Square => dx.abs() <= s && dy.abs() <= s,
            ShapeKind::Triangle => {
                let from_top = dy + s;
                (0..=2 * s).contains(&from_top) && 2 * dx.abs() <= from_top
            }
        }
    }

    /// Inclusive bounding box (x0, y0, x1, y1) at frame `t`.
    pub fn bbox(&self, t: usize) -> (i32, i32, i32, i32) {
        let (cx, cy) = self.center(t);
        let s = self.half_size;
        (cx - s, cy - s, cx + s, cy + s)
    }

    pub fn rasterize(&self, t: usize, height: usize, width: usize) -> Array2<u8> {
        Array2::from_shape_fn((height, width), |(y, x)| self.covers(t, x as i32, y as i32) as u8)
    }
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub sample: VideoSample,
    pub objects: Vec<SynthObject>,
    pub referent: usize,
    pub family: Family,
    pub direction: Option<Direction>,
}

fn video_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser over (seed, index)
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate every video described by `config`, in index order.
pub fn synthesize_videos(config: &SynthConfig) -> Result<Vec<SynthVideo>> {
    config.validate()?;
    let families = config.families();
    (0..config.num_videos)
        .map(|i| {
            let family = families[i % families.len()];
            synthesize_one(config, i, family)
        })
        .collect()
}

struct Plan {
    objects: Vec<(PaletteEntry, (i32, i32))>,
    referent: usize,
    expression: String,
    direction: Option<Direction>,
}

fn plan_video(config: &SynthConfig, family: Family, rng: &mut ChaCha8Rng) -> Plan {
    let palette = &config.shape_palette;
    let allow_static = config.motion_kinds.contains(&MotionKind::Static);
    let allow_linear = config.motion_kinds.contains(&MotionKind::Linear);
    let random_dir = |rng: &mut ChaCha8Rng| *Direction::ALL.choose(rng).unwrap();
    let scaled = |d: Direction, speed: i32| (d.unit().0 * speed, d.unit().1 * speed);
    let background_motion = |rng: &mut ChaCha8Rng| -> (i32, i32) {
        if allow_linear && (!allow_static || rng.random_bool(0.5)) {
            scaled(random_dir(rng), rng.random_range(1..=2))
        } else {
            (0, 0)
        }
    };
    match family {
        Family::Attribute => {
            let n = rng.random_range(2..=4usize).min(palette.len());
            let entries: Vec<PaletteEntry> = palette.choose_multiple(rng, n).copied().collect();
            let objects = entries
                .iter()
                .map(|&e| (e, background_motion(rng)))
                .collect();
            Plan {
                expression: grammar::attribute_expression(entries[0].color, entries[0].shape),
                objects,
                referent: 0,
                direction: None,
            }
        }
        Family::Motion => {
            let twin = *palette.choose(rng).unwrap();
            let dir = random_dir(rng);
            let speed = rng.random_range(2..=3);
            let mut objects = vec![(twin, scaled(dir, speed)), (twin, scaled(dir.opposite(), speed))];
            let others: Vec<PaletteEntry> = palette
                .iter()
                .filter(|p| p.shape != twin.shape)
                .copied()
                .collect();
            let extra = rng.random_range(0..=2usize).min(others.len());
            for e in others.choose_multiple(rng, extra) {
                objects.push((*e, background_motion(rng)));
            }
            Plan {
                expression: grammar::motion_expression(twin.shape, dir),
                objects,
                referent: 0,
                direction: Some(dir),
            }
        }
        Family::Relational => {
            let n = rng.random_range(2..=4usize).min(palette.len());
            let entries: Vec<PaletteEntry> = palette.choose_multiple(rng, n).copied().collect();
            let mut objects = vec![(entries[0], scaled(random_dir(rng), 3))];
            for e in &entries[1..] {
                let speed = if allow_static { rng.random_range(0..=1) } else { 1 };
                objects.push((*e, scaled(random_dir(rng), speed)));
            }
            let template = grammar::RELATIONAL_TEMPLATES.choose(rng).unwrap();
            Plan {
                expression: template.to_string(),
                objects,
                referent: 0,
                direction: None,
            }
        }
    }
}

fn boxes_separated(a: (i32, i32, i32, i32), b: (i32, i32, i32, i32)) -> bool {
    // at least one background pixel between the boxes
    a.2 + 1 < b.0 || b.2 + 1 < a.0 || a.3 + 1 < b.1 || b.3 + 1 < a.1
}

fn place(
    config: &SynthConfig,
    plan: &Plan,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<SynthObject>> {
    let s = config.half_size();
    let span = config.num_frames as i32 - 1;
    let (w, h) = (config.width as i32, config.height as i32);
    let mut placed: Vec<SynthObject> = Vec::with_capacity(plan.objects.len());
    for &(entry, velocity) in &plan.objects {
        let lo_x = s - (velocity.0 * span).min(0);
        let hi_x = w - 1 - s - (velocity.0 * span).max(0);
        let lo_y = s - (velocity.1 * span).min(0);
        let hi_y = h - 1 - s - (velocity.1 * span).max(0);
        if lo_x > hi_x || lo_y > hi_y {
            return None;
        }
        let obj = SynthObject {
            shape: entry.shape,
            color: entry.color,
            half_size: s,
            start: (rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y)),
            velocity,
        };
        let clear = placed.iter().all(|other| {
            (0..config.num_frames).all(|t| boxes_separated(obj.bbox(t), other.bbox(t)))
        });
        if !clear {
            return None;
        }
        placed.push(obj);
    }
    Some(placed)
}

fn render(config: &SynthConfig, objects: &[SynthObject], referent: usize) -> (Array4<f32>, Array3<u8>) {
    let (t_len, h, w) = (config.num_frames, config.height, config.width);
    let mut frames = Array4::<f32>::zeros((t_len, h, w, 3));
    let mut masks = Array3::<u8>::zeros((t_len, h, w));
    for t in 0..t_len {
        for y in 0..h {
            for x in 0..w {
                let mut rgb = BACKGROUND;
                for (k, obj) in objects.iter().enumerate() {
                    if obj.covers(t, x as i32, y as i32) {
                        rgb = obj.color.rgb();
                        if k == referent {
                            masks[[t, y, x]] = 1;
                        }
                    }
                }
                for c in 0..3 {
                    frames[[t, y, x, c]] = rgb[c] as f32 / 255.0;
                }
            }
        }
    }
    (frames, masks)
}

fn synthesize_one(config: &SynthConfig, index: usize, family: Family) -> Result<SynthVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(config.seed, index));
    for _ in 0..MAX_ATTEMPTS {
        let plan = plan_video(config, family, &mut rng);
        let Some(mut objects) = place(config, &plan, &mut rng) else {
            continue;
        };
        // draw order carries no information about the referent
        let referent_obj = objects[plan.referent].clone();
        objects.shuffle(&mut rng);
        let referent = objects.iter().position(|o| *o == referent_obj).unwrap();
        let (frames, masks) = render(config, &objects, referent);
        let query_type = match family {
            Family::Relational => QueryType::Long,
            _ => QueryType::Short,
        };
        let sample = VideoSample::new(
            format!("v{index:05}"),
            frames,
            masks,
            plan.expression,
            query_type,
            family.source_tag(),
        )?;
        return Ok(SynthVideo {
            sample,
            objects,
            referent,
            family,
            direction: plan.direction,
        });
    }
    Err(Error::Generation {
        video_index: index,
        attempts: MAX_ATTEMPTS,
    })
}
