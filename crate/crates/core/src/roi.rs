//! Locator boxes, the bounding-box pyramid, RoI cropping and paste-back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::label_components;
use crate::volume::{Triple, Volume};

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_MIN_VOXELS: usize = 2;
pub const DEFAULT_MARGIN: usize = 1;

/// Pyramid level: I is full resolution, III the coarsest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    I,
    II,
    III,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox3 {
    pub level: Level,
    pub start: Triple,
    pub size: Triple,
}

impl BBox3 {
    pub fn new(level: Level, start: Triple, size: Triple) -> Self {
        BBox3 { level, start, size }
    }

    pub fn end(&self) -> Triple {
        [0, 1, 2].map(|a| self.start[a] + self.size[a])
    }

    pub fn voxels(&self) -> usize {
        self.size.iter().product()
    }

    pub fn fits(&self, extent: Triple) -> bool {
        (0..3).all(|a| self.size[a] > 0 && self.end()[a] <= extent[a])
    }

    /// Scale start and size by `stride` into the next finer level.
    pub fn scaled(&self, stride: Triple, level: Level) -> BBox3 {
        BBox3 {
            level,
            start: [0, 1, 2].map(|a| self.start[a] * stride[a]),
            size: [0, 1, 2].map(|a| self.size[a] * stride[a]),
        }
    }

    /// Exact inverse of [`BBox3::scaled`], or `None` when not divisible.
    pub fn unscaled(&self, stride: Triple, level: Level) -> Option<BBox3> {
        if (0..3).any(|a| self.start[a] % stride[a] != 0 || self.size[a] % stride[a] != 0) {
            return None;
        }
        Some(BBox3 {
            level,
            start: [0, 1, 2].map(|a| self.start[a] / stride[a]),
            size: [0, 1, 2].map(|a| self.size[a] / stride[a]),
        })
    }
}

/// Boxes at levels III, II, I in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBoxPyramid {
    pub levels: [BBox3; 3],
}

impl BBoxPyramid {
    pub fn level(&self, level: Level) -> &BBox3 {
        match level {
            Level::III => &self.levels[0],
            Level::II => &self.levels[1],
            Level::I => &self.levels[2],
        }
    }
}

/// Tight boxes of the 26-connected components of `prob >= threshold`,
/// largest first (ties broken by start), each with at least `min_voxels`.
pub fn extract_boxes(prob: &Volume, threshold: f32, min_voxels: usize) -> Vec<BBox3> {
    let lab = label_components(&prob.binarize(threshold));
    let mut comps: Vec<_> = lab.components.into_iter().filter(|c| c.voxels >= min_voxels).collect();
    comps.sort_by(|a, b| b.voxels.cmp(&a.voxels).then(a.start.cmp(&b.start)).then(a.size.cmp(&b.size)));
    comps.into_iter().map(|c| BBox3::new(Level::III, c.start, c.size)).collect()
}

/// Grow a level-III box by `margin`, clamp it to `extent`, then scale it by
/// `strides` (deepest pooling first) into levels II and I.
pub fn build_pyramid(box3: BBox3, strides: [Triple; 2], margin: usize, extent: Triple) -> Result<BBoxPyramid> {
    if box3.level != Level::III {
        return Err(Error::BBox(format!("pyramid must start at level III, got {:?}", box3.level)));
    }
    let mut start = [0; 3];
    let mut size = [0; 3];
    for a in 0..3 {
        let lo = box3.start[a].saturating_sub(margin);
        let hi = (box3.start[a] + box3.size[a] + margin).min(extent[a]);
        if hi <= lo {
            return Err(Error::BBox(format!("box {box3:?} is empty inside extent {extent:?}")));
        }
        start[a] = lo;
        size[a] = hi - lo;
    }
    let l3 = BBox3::new(Level::III, start, size);
    let l2 = l3.scaled(strides[0], Level::II);
    let l1 = l2.scaled(strides[1], Level::I);
    Ok(BBoxPyramid { levels: [l3, l2, l1] })
}

/// Raw crops `(f1, f2, f3)` of the feature maps.
#[derive(Clone, Debug)]
pub struct RoiPyramid {
    pub f1: Volume,
    pub f2: Volume,
    pub f3: Volume,
    pub boxes: BBoxPyramid,
}

pub fn crop_pyramid(f1: &Volume, f2: &Volume, f3: &Volume, pyr: &BBoxPyramid) -> Result<RoiPyramid> {
    let crop = |v: &Volume, b: &BBox3| v.crop(b.start, b.size);
    Ok(RoiPyramid {
        f1: crop(f1, pyr.level(Level::I))?,
        f2: crop(f2, pyr.level(Level::II))?,
        f3: crop(f3, pyr.level(Level::III))?,
        boxes: *pyr,
    })
}

/// Write `region` into `canvas` at a level-I box by voxelwise maximum.
pub fn paste_predictions(canvas: &mut Volume, box1: &BBox3, region: &Volume) -> Result<()> {
    if region.dims() != box1.size {
        return Err(Error::BBox(format!(
            "prediction {:?} does not match box size {:?}",
            region.dims(),
            box1.size
        )));
    }
    if !box1.fits(canvas.dims()) {
        return Err(Error::BBox(format!("box {box1:?} exceeds canvas {:?}", canvas.dims())));
    }
    let [_, h, w] = canvas.dims();
    let [bd, bh, bw] = box1.size;
    let src = region.channel(0, 0);
    let dst = canvas.channel_mut(0, 0);
    for z in 0..bd {
        for y in 0..bh {
            let s = (z * bh + y) * bw;
            let d = ((box1.start[0] + z) * h + box1.start[1] + y) * w + box1.start[2];
            for (o, &v) in dst[d..d + bw].iter_mut().zip(&src[s..s + bw]) {
                *o = o.max(v);
            }
        }
    }
    Ok(())
}
