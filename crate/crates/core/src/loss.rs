//! Dice losses, contour labels and the multi-task objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::erode;
use crate::net::{Bound, Network};
use crate::ops::maxpool3d;
use crate::tape::{Tape, TensorId};
use crate::volume::{Triple, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub epsilon: f32,
    pub lambda_c: f32,
    pub beta: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-4,
            lambda_c: 0.5,
            beta: 1e-4,
        }
    }
}

fn dice_sums(p: &Volume, g: &Volume) -> Result<(f64, f64, f64)> {
    p.check_same_shape(g)?;
    let mut pg = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&a, &b) in p.data().iter().zip(g.data()) {
        pg += a as f64 * b as f64;
        sp += a as f64;
        sg += b as f64;
    }
    Ok((pg, sp, sg))
}

/// `1 − (2·Σpg + ε)/(Σp + Σg + ε)`, evaluated directly in f64.
pub fn dice_value(p: &Volume, g: &Volume, epsilon: f32) -> Result<f64> {
    let (pg, sp, sg) = dice_sums(p, g)?;
    let e = epsilon as f64;
    Ok(1.0 - (2.0 * pg + e) / (sp + sg + e))
}

/// Closed-form `∂L/∂p_k = (2Σpg + ε − 2·g_k·(Σp + Σg + ε)) / (Σp + Σg + ε)²`.
pub fn dice_grad(p: &Volume, g: &Volume, epsilon: f32) -> Result<Volume> {
    let (pg, sp, sg) = dice_sums(p, g)?;
    let e = epsilon as f64;
    let num = 2.0 * pg + e;
    let den = sp + sg + e;
    Ok(g.map(|gk| ((num - 2.0 * gk as f64 * den) / (den * den)) as f32))
}

/// Taped Dice loss built from elementary ops.
pub fn dice_loss(tape: &mut Tape, p: TensorId, g: TensorId, epsilon: f32) -> Result<TensorId> {
    tape.value(p).check_same_shape(tape.value(g))?;
    let pg = tape.mul(p, g)?;
    let inter = tape.sum(pg)?;
    let sp = tape.sum(p)?;
    let sg = tape.sum(g)?;
    let twice = tape.scale(inter, 2.0)?;
    let num = tape.offset(twice, epsilon)?;
    let total = tape.add(sp, sg)?;
    let den = tape.offset(total, epsilon)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0)?;
    tape.offset(neg, 1.0)
}

/// Dice loss of the locator map against the level-III annotation.
pub fn global_loss(tape: &mut Tape, locator: TensorId, gt_down: TensorId, epsilon: f32) -> Result<TensorId> {
    let (a, b) = (tape.value(locator).dims(), tape.value(gt_down).dims());
    if a != b {
        return Err(Error::InvalidShape(format!(
            "locator resolution {a:?} differs from annotation {b:?}"
        )));
    }
    dice_loss(tape, locator, gt_down, epsilon)
}

/// Taped region and contour Dice terms of one RoI.
pub fn local_loss(
    tape: &mut Tape,
    region: TensorId,
    contour: TensorId,
    region_gt: TensorId,
    contour_gt: TensorId,
    epsilon: f32,
) -> Result<(TensorId, TensorId)> {
    Ok((
        dice_loss(tape, region, region_gt, epsilon)?,
        dice_loss(tape, contour, contour_gt, epsilon)?,
    ))
}

/// Max-pool a binary mask through `strides` so any covered cell is foreground.
pub fn downsample_mask(mask: &Volume, strides: &[Triple]) -> Result<Volume> {
    let mut m = mask.clone();
    for &s in strides {
        m = maxpool3d(&m, s, s)?.0;
    }
    Ok(m)
}

/// One-voxel contour: the mask minus its 6-connected erosion.
pub fn make_contour_labels(region_gt: &Volume) -> Volume {
    let inner = erode(region_gt, false);
    region_gt
        .zip_map(&inner, |r, e| if r != 0.0 && e == 0.0 { 1.0 } else { 0.0 })
        .expect("erosion preserves shape")
}

/// Taped `‖W‖²` over convolution and up-convolution kernels.
pub fn kernel_sq_norm(tape: &mut Tape, net: &Network, bound: &Bound) -> Result<Option<TensorId>> {
    let mut acc: Option<TensorId> = None;
    for (p, &id) in net.params().iter().zip(bound.ids()) {
        if !p.kind.is_kernel() {
            continue;
        }
        let sq = tape.mul(id, id)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc)
}

/// Scalar terms of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_global: f64,
    pub l_region: f64,
    pub l_contour: f64,
    /// `beta·‖W‖²`.
    pub l_weight_decay: f64,
    pub l_total: f64,
    pub lambda_c: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl LossTerms {
    pub fn new(l_global: f64, l_region: f64, l_contour: f64, kernel_sq: f64, cfg: &LossConfig) -> Self {
        let lambda_c = cfg.lambda_c as f64;
        let beta = cfg.beta as f64;
        let l_weight_decay = beta * kernel_sq;
        LossTerms {
            l_global,
            l_region,
            l_contour,
            l_weight_decay,
            l_total: l_global + l_region + lambda_c * l_contour + l_weight_decay,
            lambda_c,
            beta,
            epsilon: cfg.epsilon as f64,
        }
    }

    /// Deviation of `l_total` from the sum of its parts.
    pub fn identity_residual(&self) -> f64 {
        (self.l_total - (self.l_global + self.l_region + self.lambda_c * self.l_contour + self.l_weight_decay)).abs()
    }
}

/// Taped `global + region + λ_c·contour + β·‖W‖²`; absent terms are skipped.
pub fn total_loss(
    tape: &mut Tape,
    global: Option<TensorId>,
    local: Option<(TensorId, TensorId)>,
    kernel_sq: Option<TensorId>,
    cfg: &LossConfig,
) -> Result<TensorId> {
    let mut parts = Vec::new();
    parts.extend(global);
    if let Some((r, c)) = local {
        parts.push(r);
        parts.push(tape.scale(c, cfg.lambda_c)?);
    }
    if let Some(w) = kernel_sq {
        parts.push(tape.scale(w, cfg.beta)?);
    }
    let mut it = parts.into_iter();
    let mut acc = it.next().ok_or(Error::Empty("loss terms"))?;
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}
