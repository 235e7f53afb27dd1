//! Two-phase training: locator first, then the joint objective.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::infer::{decode_rois, infer_frame, pooling_strides, prepare_image, pyramid_strides, pyramids_for};
use super::synth::Case;
use crate::error::{Error, Result};
use crate::loss::{self, LossTerms};
use crate::metrics;
use crate::net::{Network, NetworkSpec};
use crate::optim::Adam;
use crate::preprocess;
use crate::roi::{self, BBox3};
use crate::tape::Tape;
use crate::volume::Volume;

/// A case in the network frame: normalized image, annotation and its
/// level-III reduction.
#[derive(Clone, Debug)]
pub struct TrainingCase {
    pub name: String,
    pub image: Volume,
    pub region: Volume,
}

pub fn prepare_case(case: &Case, cfg: &Config, spec: &NetworkSpec) -> Result<TrainingCase> {
    let prep = prepare_image(&case.image, cfg.data.target_spacing, spec.cumulative_stride())?
        .ok_or_else(|| Error::Config(format!("{}: no body found", case.name)))?;
    Ok(TrainingCase {
        name: case.name.clone(),
        region: prep.mask_to_frame(&case.region, cfg.data.target_spacing)?,
        image: prep.input,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "locator")]
    Locator,
    #[serde(rename = "joint")]
    Joint,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Locator => "locator",
            Phase::Joint => "joint",
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub case: String,
    pub lr: f64,
    pub rois: usize,
    pub teacher_forced: bool,
    #[serde(flatten)]
    pub terms: LossTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub val_global_loss: f64,
    pub val_locator_dsc: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: Network,
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub best_val_dsc: Option<f64>,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 20) | stream);
    rng
}

struct Validation {
    global_loss: f64,
    locator_dsc: f64,
    dsc: Option<f64>,
}

fn validate(net: &Network, cases: &[TrainingCase], cfg: &Config, with_decoder: bool) -> Result<Validation> {
    let strides = pooling_strides(net.spec());
    let mut global = 0.0;
    let mut loc_dsc = 0.0;
    let mut dsc = 0.0;
    for c in cases {
        let down = loss::downsample_mask(&c.region, &strides)?;
        let out = infer_frame(net, &c.image, &cfg.roi)?;
        global += loss::dice_value(&out.locator, &down, cfg.train.loss.epsilon)?;
        loc_dsc += metrics::dsc(&out.locator.binarize(cfg.roi.threshold), &down)?;
        if with_decoder {
            dsc += metrics::dsc(&out.region.binarize(metrics::BINARIZE_AT), &c.region)?;
        }
    }
    let n = cases.len().max(1) as f64;
    Ok(Validation {
        global_loss: global / n,
        locator_dsc: loc_dsc / n,
        dsc: with_decoder.then_some(dsc / n),
    })
}

struct Trainer<'a> {
    cfg: &'a Config,
    net: Network,
    opt: Adam,
    step: usize,
    log: &'a mut dyn Write,
}

impl Trainer<'_> {
    fn record(&mut self, entry: &StepLog) -> Result<()> {
        if !entry.terms.l_total.is_finite() {
            return Err(Error::Diverged {
                step: entry.step,
                phase: entry.phase.name(),
                detail: format!("{}: non-finite loss {:?}", entry.case, entry.terms),
            });
        }
        serde_json::to_writer(&mut *self.log, entry)?;
        self.log.write_all(b"\n")?;
        Ok(())
    }

    /// Augmented copy of a case for one epoch.
    fn augmented(&self, case: &TrainingCase, rng: &mut ChaCha8Rng) -> Result<(Volume, Volume)> {
        let (img, msk) = preprocess::augment(&case.image, &case.region, &self.cfg.train.augmentation, rng)?;
        Ok((img, msk.binarize(0.5)))
    }

    fn locator_step(&mut self, name: &str, epoch: usize, image: &Volume, region: &Volume) -> Result<()> {
        let cfg = self.cfg;
        let down = loss::downsample_mask(region, &pooling_strides(self.net.spec()))?;
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, true);
        let x = tape.constant(image.clone());
        let f = self.net.encoder_forward(&mut tape, &bound, x)?;
        let loc = self.net.locator_forward(&mut tape, &bound, f.f3)?;
        let g = tape.constant(down);
        let l = loss::global_loss(&mut tape, loc, g, cfg.train.loss.epsilon)?;
        let l_global = tape.value(l).item()? as f64;
        self.step += 1;
        self.record(&StepLog {
            step: self.step,
            phase: Phase::Locator,
            epoch,
            case: name.to_string(),
            lr: cfg.train.optimizer.lr,
            rois: 0,
            teacher_forced: false,
            terms: LossTerms::new(l_global, 0.0, 0.0, 0.0, &cfg.train.loss),
        })?;
        let grads = tape.backward(l)?;
        self.opt.step(&mut self.net, &bound, &grads)
    }

    fn joint_step(
        &mut self,
        name: &str,
        epoch: usize,
        image: &Volume,
        region: &Volume,
        teacher: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let cfg = self.cfg;
        let spec = self.net.spec().clone();
        let down = loss::downsample_mask(region, &pooling_strides(&spec))?;
        let contour = loss::make_contour_labels(region);
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, true);
        let x = tape.constant(image.clone());
        let f = self.net.encoder_forward(&mut tape, &bound, x)?;
        let loc = self.net.locator_forward(&mut tape, &bound, f.f3)?;
        let g = tape.constant(down.clone());
        let lg = loss::global_loss(&mut tape, loc, g, cfg.train.loss.epsilon)?;

        let annotated = || roi::extract_boxes(&down, 0.5, 1);
        let mut teacher_forced = teacher;
        let mut boxes: Vec<BBox3> = if teacher {
            annotated()
        } else {
            roi::extract_boxes(tape.value(loc), cfg.roi.threshold, cfg.roi.min_voxels)
        };
        if boxes.is_empty() {
            boxes = annotated();
            teacher_forced = true;
        }
        let extent = down.dims();
        let boxes: Vec<BBox3> = boxes
            .into_iter()
            .map(|b| preprocess::jitter_box(b, extent, &cfg.train.augmentation, rng))
            .collect();
        let pyramids = pyramids_for(&boxes, pyramid_strides(&spec)?, cfg.roi.margin, extent)?;
        let outputs = decode_rois(&self.net, &mut tape, &bound, &f, &pyramids)?;

        let mut local = None;
        for (p, out) in pyramids.iter().zip(&outputs) {
            let b = p.levels[2];
            let rg = tape.constant(region.crop(b.start, b.size)?);
            let cg = tape.constant(contour.crop(b.start, b.size)?);
            let (lr, lc) = loss::local_loss(&mut tape, out.region, out.contour, rg, cg, cfg.train.loss.epsilon)?;
            local = Some(match local {
                None => (lr, lc),
                Some((ar, ac)) => (tape.add(ar, lr)?, tape.add(ac, lc)?),
            });
        }
        let local = match local {
            Some((r, c)) => {
                let k = 1.0 / pyramids.len() as f32;
                Some((tape.scale(r, k)?, tape.scale(c, k)?))
            }
            None => None,
        };
        let kernel_sq = loss::kernel_sq_norm(&mut tape, &self.net, &bound)?;
        let total = loss::total_loss(&mut tape, Some(lg), local, kernel_sq, &cfg.train.loss)?;
        let scalar = |id| tape.value(id).item().map(|v| v as f64);
        let (l_region, l_contour) = match local {
            Some((r, c)) => (scalar(r)?, scalar(c)?),
            None => (0.0, 0.0),
        };
        let ksq = match kernel_sq {
            Some(k) => scalar(k)?,
            None => 0.0,
        };
        self.step += 1;
        self.record(&StepLog {
            step: self.step,
            phase: Phase::Joint,
            epoch,
            case: name.to_string(),
            lr: cfg.train.optimizer.lr,
            rois: pyramids.len(),
            teacher_forced,
            terms: LossTerms::new(scalar(lg)?, l_region, l_contour, ksq, &cfg.train.loss),
        })?;
        if !scalar(total)?.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                phase: Phase::Joint.name(),
                detail: format!("{name}: taped total is not finite"),
            });
        }
        let grads = tape.backward(total)?;
        self.opt.step(&mut self.net, &bound, &grads)
    }
}

/// Train from scratch on `train`, stopping and checkpointing on `val`.
pub fn train(cfg: &Config, train: &[TrainingCase], val: &[TrainingCase], log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training cases"));
    }
    let val = if val.is_empty() { train } else { val };
    let net = Network::new(cfg.network.spec(cfg.seed))?;
    let opt = Adam::new(&net, cfg.train.optimizer);
    let mut t = Trainer {
        cfg,
        net,
        opt,
        step: 0,
        log,
    };
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    // Phase 1: locator only, early-stopped on validation global loss.
    let mut best = (f64::INFINITY, t.net.clone());
    let mut stale = 0;
    for epoch in 0..cfg.train.phase1_max_epochs {
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, 0));
        for (i, &k) in order.iter().enumerate() {
            let (img, msk) = t.augmented(&train[k], &mut epoch_rng(cfg.seed, epoch, 1 + i as u64))?;
            t.locator_step(&train[k].name, epoch, &img, &msk)?;
        }
        let v = validate(&t.net, val, cfg, false)?;
        epochs.push(EpochLog {
            phase: Phase::Locator,
            epoch,
            val_global_loss: v.global_loss,
            val_locator_dsc: v.locator_dsc,
            val_dsc: None,
        });
        log::info!("phase 1 epoch {epoch}: val global loss {:.4}, locator dsc {:.3}", v.global_loss, v.locator_dsc);
        if v.global_loss < best.0 {
            best = (v.global_loss, t.net.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.train.phase1_patience {
                break;
            }
        }
    }
    t.net = best.1;

    // Phase 2: joint objective, checkpointed on validation segmentation DSC.
    let v = validate(&t.net, val, cfg, false)?;
    let mut teacher = v.locator_dsc <= cfg.train.teacher_forcing_dice;
    let mut best_dsc: Option<(f64, Network)> = None;
    let offset = epochs.len();
    for e in 0..cfg.train.phase2_epochs {
        let epoch = offset + e;
        order.shuffle(&mut epoch_rng(cfg.seed, epoch, 0));
        for (i, &k) in order.iter().enumerate() {
            let mut rng = epoch_rng(cfg.seed, epoch, 1 + i as u64);
            let (img, msk) = t.augmented(&train[k], &mut rng)?;
            t.joint_step(&train[k].name, epoch, &img, &msk, teacher, &mut rng)?;
        }
        let v = validate(&t.net, val, cfg, true)?;
        let dsc = v.dsc.unwrap_or(0.0);
        epochs.push(EpochLog {
            phase: Phase::Joint,
            epoch,
            val_global_loss: v.global_loss,
            val_locator_dsc: v.locator_dsc,
            val_dsc: v.dsc,
        });
        log::info!(
            "phase 2 epoch {epoch}: val dsc {dsc:.3}, locator dsc {:.3}, teacher forcing {teacher}",
            v.locator_dsc
        );
        teacher = v.locator_dsc <= cfg.train.teacher_forcing_dice;
        if best_dsc.as_ref().is_none_or(|(b, _)| dsc > *b) {
            best_dsc = Some((dsc, t.net.clone()));
        }
    }
    let best_val_dsc = best_dsc.as_ref().map(|b| b.0);
    if let Some((_, net)) = best_dsc {
        t.net = net;
    }
    Ok(TrainOutcome {
        net: t.net,
        epochs,
        steps: t.step,
        best_val_dsc,
    })
}
