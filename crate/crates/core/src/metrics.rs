//! Segmentation metrics: IoU, gIoU / cIoU, region similarity J and the
//! boundary F-measure with DAVIS-style tolerance.
//!
//! Conventions: IoU of two empty masks is 1. For F, two empty boundaries
//! score 1, exactly one empty boundary scores 0, and P = R = 0 scores 0.
//! Boundaries are `m XOR erode(m)` with 4-connected erosion (pixels outside
//! the image count as background); matching uses city-block dilation of
//! radius `ceil(tol_factor * diagonal)`.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

pub const DEFAULT_TOL_FACTOR: f64 = 0.008;

fn check_same(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("mask shapes differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// (intersection, union) pixel counts.
pub fn intersection_union(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<(u64, u64)> {
    check_same(pred.dim(), gt.dim())?;
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok((inter, union))
}

pub fn iou(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// (gIoU, cIoU): mean of per-pair IoU, and cumulative intersection over cumulative union.
pub fn giou_ciou<'a, I>(pairs: I) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = (ArrayView2<'a, u8>, ArrayView2<'a, u8>)>,
{
    let mut sum_iou = 0.0;
    let mut n = 0usize;
    let (mut ci, mut cu) = (0u64, 0u64);
    for (p, g) in pairs {
        let (i, u) = intersection_union(p, g)?;
        sum_iou += if u == 0 { 1.0 } else { i as f64 / u as f64 };
        ci += i;
        cu += u;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Argument("no mask pairs".into()));
    }
    let ciou = if cu == 0 { 1.0 } else { ci as f64 / cu as f64 };
    Ok((sum_iou / n as f64, ciou))
}

fn check_stacks(pred: &ArrayView3<'_, u8>, gt: &ArrayView3<'_, u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "mask stacks differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if pred.dim().0 == 0 {
        return Err(Error::Argument("empty mask stack".into()));
    }
    Ok(())
}

/// Mean IoU over the frames of one video.
pub fn region_similarity_j(pred: ArrayView3<'_, u8>, gt: ArrayView3<'_, u8>) -> Result<f64> {
    check_stacks(&pred, &gt)?;
    let mut s = 0.0;
    for (p, g) in pred.outer_iter().zip(gt.outer_iter()) {
        s += iou(p, g)?;
    }
    Ok(s / pred.dim().0 as f64)
}

pub fn boundary(mask: ArrayView2<'_, u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let at = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]] != 0
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (yi, xi) = (y as isize, x as isize);
        let on = at(yi, xi);
        let eroded = on && at(yi - 1, xi) && at(yi + 1, xi) && at(yi, xi - 1) && at(yi, xi + 1);
        (on && !eroded) as u8
    })
}

/// City-block dilation by `radius`, as `radius` 4-neighbour dilation steps.
pub fn dilate(mask: ArrayView2<'_, u8>, radius: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    let mut cur = mask.mapv(|v| (v != 0) as u8);
    for _ in 0..radius {
        let prev = cur.clone();
        for y in 0..h {
            for x in 0..w {
                if prev[[y, x]] != 0 {
                    continue;
                }
                let hit = (y > 0 && prev[[y - 1, x]] != 0)
                    || (y + 1 < h && prev[[y + 1, x]] != 0)
                    || (x > 0 && prev[[y, x - 1]] != 0)
                    || (x + 1 < w && prev[[y, x + 1]] != 0);
                if hit {
                    cur[[y, x]] = 1;
                }
            }
        }
    }
    cur
}

pub fn tolerance_radius(h: usize, w: usize, tol_factor: f64) -> usize {
    (tol_factor * ((h * h + w * w) as f64).sqrt()).ceil() as usize
}

/// Boundary F-measure of one frame.
pub fn boundary_f(pred: ArrayView2<'_, u8>, gt: ArrayView2<'_, u8>, tol_factor: f64) -> Result<f64> {
    check_same(pred.dim(), gt.dim())?;
    let (h, w) = pred.dim();
    let r = tolerance_radius(h, w, tol_factor);
    let bp = boundary(pred);
    let bg = boundary(gt);
    let np = bp.iter().filter(|&&v| v != 0).count();
    let ng = bg.iter().filter(|&&v| v != 0).count();
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let dg = dilate(bg.view(), r);
    let dp = dilate(bp.view(), r);
    let matched_p = bp.iter().zip(dg.iter()).filter(|(&b, &d)| b != 0 && d != 0).count();
    let matched_g = bg.iter().zip(dp.iter()).filter(|(&b, &d)| b != 0 && d != 0).count();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean boundary F over the frames of one video.
pub fn contour_accuracy_f(pred: ArrayView3<'_, u8>, gt: ArrayView3<'_, u8>, tol_factor: f64) -> Result<f64> {
    check_stacks(&pred, &gt)?;
    let mut s = 0.0;
    for t in 0..pred.dim().0 {
        s += boundary_f(pred.index_axis(Axis(0), t), gt.index_axis(Axis(0), t), tol_factor)?;
    }
    Ok(s / pred.dim().0 as f64)
}

/// J, F and their mean for one video.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoScore {
    pub j: f64,
    pub f: f64,
}

impl VideoScore {
    pub fn j_and_f(&self) -> f64 {
        (self.j + self.f) / 2.0
    }
}

pub fn score_video(pred: ArrayView3<'_, u8>, gt: ArrayView3<'_, u8>) -> Result<VideoScore> {
    Ok(VideoScore {
        j: region_similarity_j(pred, gt)?,
        f: contour_accuracy_f(pred, gt, DEFAULT_TOL_FACTOR)?,
    })
}
