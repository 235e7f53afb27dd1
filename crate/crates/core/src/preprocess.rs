//! Body masking, intensity normalization, resampling, cropping and
//! augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{close, largest_component};
use crate::roi::{BBox3, Level};
use crate::volume::{Spacing, Triple, Volume};

pub const OTSU_BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Otsu {
    /// Values at or above this are foreground.
    pub threshold: f32,
    /// Last histogram bin of the background class.
    pub bin: usize,
    pub min: f32,
    pub bin_width: f32,
    /// Constant input: `threshold` is its single value.
    pub degenerate: bool,
}

impl Otsu {
    pub fn bin_of(&self, v: f32) -> usize {
        histogram_bin(v, self.min, self.bin_width)
    }

    pub fn is_foreground(&self, v: f32) -> bool {
        !self.degenerate && self.bin_of(v) > self.bin
    }
}

pub fn histogram_bin(v: f32, min: f32, width: f32) -> usize {
    if width <= 0.0 {
        return 0;
    }
    (((v - min) / width) as usize).min(OTSU_BINS - 1)
}

/// Otsu threshold over a 256-bin histogram of the value range.
pub fn otsu_threshold(volume: &Volume) -> Result<Otsu> {
    let data = volume.data();
    if data.is_empty() {
        return Err(Error::Empty("volume"));
    }
    let (min, max) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if max <= min {
        return Ok(Otsu {
            threshold: min,
            bin: 0,
            min,
            bin_width: 0.0,
            degenerate: true,
        });
    }
    let width = (max - min) / OTSU_BINS as f32;
    let mut hist = [0u64; OTSU_BINS];
    for &v in data {
        hist[histogram_bin(v, min, width)] += 1;
    }
    let total = data.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (t, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best.0 {
            best = (between, t);
        }
    }
    let bin = best.1;
    Ok(Otsu {
        threshold: min + (bin + 1) as f32 * width,
        bin,
        min,
        bin_width: width,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyMask {
    pub mask: Volume,
    pub bbox: BBox3,
    pub n_mask: usize,
}

/// Tight level-I box of the nonzero voxels, if any.
pub fn tight_bbox(mask: &Volume) -> Option<BBox3> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for p in mask.nonzero_coords() {
        any = true;
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a] + 1);
        }
    }
    any.then(|| BBox3::new(Level::I, lo, [0, 1, 2].map(|a| hi[a] - lo[a])))
}

/// Otsu foreground, largest 26-connected component, 6-connected closing.
pub fn body_mask(volume: &Volume) -> Result<BodyMask> {
    let otsu = otsu_threshold(volume)?;
    let fg = volume.map(|v| if otsu.is_foreground(v) { 1.0 } else { 0.0 });
    let mask = close(&largest_component(&fg));
    let bbox = tight_bbox(&mask).ok_or(Error::Empty("body foreground"))?;
    Ok(BodyMask {
        n_mask: mask.count_nonzero(),
        mask,
        bbox,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub volume: Volume,
    pub mean: f64,
    pub std: f64,
    /// Zero in-body spread: output is all zeros.
    pub degenerate: bool,
}

/// `(x − mean)/std` with statistics over mask voxels only.
pub fn normalize_in_body(volume: &Volume, mask: &Volume) -> Result<Normalized> {
    volume.check_same_shape(mask)?;
    let inside: Vec<f64> = volume
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m != 0.0)
        .map(|(&v, _)| v as f64)
        .collect();
    if inside.len() < 2 {
        return Err(Error::InvalidShape(format!("body mask has {} voxels, need 2", inside.len())));
    }
    let n = inside.len() as f64;
    let mean = inside.iter().sum::<f64>() / n;
    let std = (inside.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Ok(Normalized {
            volume: volume.map(|_| 0.0),
            mean,
            std,
            degenerate: true,
        });
    }
    Ok(Normalized {
        volume: volume.map(|v| ((v as f64 - mean) / std) as f32),
        mean,
        std,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    /// Trilinear, for images.
    Linear,
    /// Nearest neighbor, for masks.
    Nearest,
}

/// Sample a single-channel volume at fractional index `p` (clamped to edge).
fn sample(v: &Volume, p: [f64; 3], interp: Interp) -> f32 {
    let dims = v.dims();
    let data = v.channel(0, 0);
    let at = |z: usize, y: usize, x: usize| data[(z * dims[1] + y) * dims[2] + x];
    let c = [0, 1, 2].map(|a| p[a].clamp(0.0, (dims[a] - 1) as f64));
    match interp {
        Interp::Nearest => {
            let i = [0, 1, 2].map(|a| (c[a] + 0.5).floor().min((dims[a] - 1) as f64) as usize);
            at(i[0], i[1], i[2])
        }
        Interp::Linear => {
            let i0 = [0, 1, 2].map(|a| c[a].floor() as usize);
            let i1 = [0, 1, 2].map(|a| (i0[a] + 1).min(dims[a] - 1));
            let t = [0, 1, 2].map(|a| c[a] - i0[a] as f64);
            let mut acc = 0.0f64;
            for (dz, wz) in [(false, 1.0 - t[0]), (true, t[0])] {
                for (dy, wy) in [(false, 1.0 - t[1]), (true, t[1])] {
                    for (dx, wx) in [(false, 1.0 - t[2]), (true, t[2])] {
                        let wgt = wz * wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let z = if dz { i1[0] } else { i0[0] };
                        let y = if dy { i1[1] } else { i0[1] };
                        let x = if dx { i1[2] } else { i0[2] };
                        acc += wgt * at(z, y, x) as f64;
                    }
                }
            }
            acc as f32
        }
    }
}

/// Resample onto `target` spacing with a shared origin; output extent is the
/// rounded physical extent.
pub fn resample(volume: &Volume, target: Spacing, interp: Interp) -> Result<Volume> {
    let src = volume.spacing();
    let dims = volume.dims();
    let out_dims: Triple = [0, 1, 2].map(|a| ((dims[a] as f64 * src[a] / target[a]).round() as usize).max(1));
    resample_to(volume, out_dims, target, interp)
}

/// Resample onto an explicit grid of `dims` voxels at `target` spacing,
/// sharing the origin with `volume`.
pub fn resample_to(volume: &Volume, dims: Triple, target: Spacing, interp: Interp) -> Result<Volume> {
    let src = volume.spacing();
    if src.iter().chain(&target).any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!("spacings must be positive: {src:?} -> {target:?}")));
    }
    if src == target && dims == volume.dims() {
        return Ok(volume.clone());
    }
    let mut out = Volume::zeros(volume.shape().with_channels(1).with_dims(dims)).with_spacing(target);
    let [od, oh, ow] = dims;
    let data = out.data_mut();
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let p = [z, y, x];
                let q = [0, 1, 2].map(|a| p[a] as f64 * target[a] / src[a]);
                data[(z * oh + y) * ow + x] = sample(volume, q, interp);
            }
        }
    }
    Ok(out)
}

/// How a volume was cropped and padded, for exact un-cropping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub original: Triple,
    pub bbox: BBox3,
    pub pad_before: Triple,
    pub pad_after: Triple,
}

impl CropRecord {
    pub fn cropped_dims(&self) -> Triple {
        [0, 1, 2].map(|a| self.pad_before[a] + self.bbox.size[a] + self.pad_after[a])
    }

    /// Crop then zero-pad `volume` (any channel count) like the original.
    pub fn apply(&self, volume: &Volume) -> Result<Volume> {
        Ok(volume
            .crop(self.bbox.start, self.bbox.size)?
            .pad(self.pad_before, self.pad_after))
    }

    /// Place a cropped-frame volume back into the original extent.
    pub fn uncrop(&self, cropped: &Volume) -> Result<Volume> {
        let inner = cropped.crop(self.pad_before, self.bbox.size)?;
        let mut out = Volume::zeros(cropped.shape().with_dims(self.original)).with_spacing(cropped.spacing());
        out.write_box(&inner, self.bbox.start);
        Ok(out)
    }
}

/// Crop to `bbox` and zero-pad each axis up to a multiple of `multiple`,
/// splitting the padding as evenly as possible.
pub fn crop_to_box(volume: &Volume, bbox: BBox3, multiple: Triple) -> Result<(Volume, CropRecord)> {
    let mut pad_before = [0; 3];
    let mut pad_after = [0; 3];
    for a in 0..3 {
        let extra = bbox.size[a].div_ceil(multiple[a]) * multiple[a] - bbox.size[a];
        pad_before[a] = extra / 2;
        pad_after[a] = extra - extra / 2;
    }
    let record = CropRecord {
        original: volume.dims(),
        bbox,
        pad_before,
        pad_after,
    };
    Ok((record.apply(volume)?, record))
}

pub fn crop_to_body(volume: &Volume, body: &BodyMask, multiple: Triple) -> Result<(Volume, CropRecord)> {
    crop_to_box(volume, body.bbox, multiple)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub scale: [f64; 2],
    pub flip_x_prob: f64,
    pub intensity: [f64; 2],
    /// RoI center shift as a fraction of the box size per axis.
    pub roi_shift: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            scale: [0.9, 1.1],
            flip_x_prob: 0.5,
            intensity: [0.9, 1.1],
            roi_shift: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        AugmentationConfig {
            scale: [1.0, 1.0],
            flip_x_prob: 0.0,
            intensity: [1.0, 1.0],
            roi_shift: 0.0,
        }
    }
}

fn uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Mirror along the x axis.
pub fn flip_x(v: &Volume) -> Volume {
    let mut out = v.clone();
    let w = v.shape().w;
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Isotropic zoom by `s` about the volume center, keeping the extent.
pub fn zoom(v: &Volume, s: f64, interp: Interp) -> Volume {
    let dims = v.dims();
    let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let mut out = Volume::zeros(v.shape().with_channels(1)).with_spacing(v.spacing());
    let [d, h, w] = dims;
    let data = out.data_mut();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z, y, x];
                let q = [0, 1, 2].map(|a| c[a] + (p[a] as f64 - c[a]) / s);
                let inside = (0..3).all(|a| q[a] >= -0.5 && q[a] <= dims[a] as f64 - 0.5);
                data[(z * h + y) * w + x] = match interp {
                    Interp::Nearest if !inside => 0.0,
                    _ => sample(v, q, interp),
                };
            }
        }
    }
    out
}

/// One random geometric and intensity transform, applied identically to an
/// image (trilinear, jittered) and its mask (nearest).
pub fn augment(image: &Volume, mask: &Volume, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<(Volume, Volume)> {
    image.check_same_shape(mask)?;
    let s = uniform(rng, cfg.scale);
    let flip = cfg.flip_x_prob > 0.0 && rng.random_bool(cfg.flip_x_prob.min(1.0));
    let gain = uniform(rng, cfg.intensity) as f32;
    let (mut img, mut msk) = if s == 1.0 {
        (image.clone(), mask.clone())
    } else {
        (zoom(image, s, Interp::Linear), zoom(mask, s, Interp::Nearest))
    };
    if flip {
        img = flip_x(&img);
        msk = flip_x(&msk);
    }
    if gain != 1.0 {
        img = img.map(|v| v * gain);
    }
    Ok((img, msk))
}

/// Shift a box by up to `cfg.roi_shift` of its size per axis, kept inside `extent`.
pub fn jitter_box(b: BBox3, extent: Triple, cfg: &AugmentationConfig, rng: &mut impl Rng) -> BBox3 {
    let mut start = b.start;
    for a in 0..3 {
        let max_shift = (cfg.roi_shift * b.size[a] as f64).floor() as i64;
        let shift = if max_shift > 0 {
            rng.random_range(-max_shift..=max_shift) as isize
        } else {
            0
        };
        let hi = extent[a].saturating_sub(b.size[a]) as isize;
        start[a] = (b.start[a] as isize + shift).clamp(0, hi) as usize;
    }
    BBox3 { start, ..b }
}
