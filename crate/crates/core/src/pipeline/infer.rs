//! Whole-volume preparation, RoI decoding and inference.

use std::fs;
use std::path::Path;
use std::time::Instant;

use super::config::{Config, RoiConfig};
use crate::error::{Error, Result};
use crate::net::{weights, Bound, DecoderOutput, Features, Network, NetworkSpec};
use crate::preprocess::{self, CropRecord, Interp};
use crate::roi::{self, BBox3, BBoxPyramid};
use crate::tape::Tape;
use crate::volume::{Spacing, Triple, Volume};

/// A network input in the cropped, normalized frame plus what is needed to
/// map predictions back onto the original grid.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub input: Volume,
    pub record: CropRecord,
    pub original_dims: Triple,
    pub original_spacing: Spacing,
}

impl PreparedImage {
    /// Map a single-channel map in the network frame back onto the original grid.
    pub fn restore(&self, map: &Volume, target_spacing: Spacing, interp: Interp) -> Result<Volume> {
        let uncropped = self.record.uncrop(map)?.with_spacing(target_spacing);
        preprocess::resample_to(&uncropped, self.original_dims, self.original_spacing, interp)
    }

    /// Bring an annotation into the network frame.
    pub fn mask_to_frame(&self, mask: &Volume, target_spacing: Spacing) -> Result<Volume> {
        let resampled = preprocess::resample(mask, target_spacing, Interp::Nearest)?;
        self.record.apply(&resampled)
    }
}

/// Resample, body-mask, crop to the body with divisibility padding and
/// normalize inside the body. `None` when no body can be found.
pub fn prepare_image(image: &Volume, target_spacing: Spacing, multiple: Triple) -> Result<Option<PreparedImage>> {
    let resampled = preprocess::resample(image, target_spacing, Interp::Linear)?;
    let body = match preprocess::body_mask(&resampled) {
        Ok(b) => b,
        Err(Error::Empty(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if body.n_mask < 2 {
        return Ok(None);
    }
    let (cropped, record) = preprocess::crop_to_body(&resampled, &body, multiple)?;
    let mask = record.apply(&body.mask)?;
    let norm = preprocess::normalize_in_body(&cropped, &mask)?;
    Ok(Some(PreparedImage {
        input: norm.volume.with_spacing(target_spacing),
        record,
        original_dims: image.dims(),
        original_spacing: image.spacing(),
    }))
}

/// Pooling strides deepest first, as the pyramid expects.
pub fn pyramid_strides(spec: &NetworkSpec) -> Result<[Triple; 2]> {
    let pools = spec.pools();
    if pools.len() != 2 {
        return Err(Error::Spec(format!("expected 2 pooling layers, found {}", pools.len())));
    }
    Ok([pools[1].stride, pools[0].stride])
}

/// Pooling strides shallowest first, for annotation downsampling.
pub fn pooling_strides(spec: &NetworkSpec) -> Vec<Triple> {
    spec.pools().iter().map(|p| p.stride).collect()
}

/// Crop the feature maps at each pyramid and run the decoder on them.
pub fn decode_rois(
    net: &Network,
    tape: &mut Tape,
    bound: &Bound,
    features: &Features,
    pyramids: &[BBoxPyramid],
) -> Result<Vec<DecoderOutput>> {
    pyramids
        .iter()
        .map(|p| {
            let c1 = tape.crop(features.f1, p.levels[2].start, p.levels[2].size)?;
            let c2 = tape.crop(features.f2, p.levels[1].start, p.levels[1].size)?;
            let c3 = tape.crop(features.f3, p.levels[0].start, p.levels[0].size)?;
            net.decoder_forward(tape, bound, [c1, c2, c3])
        })
        .collect()
}

/// Level-III locator boxes grown and scaled into pyramids.
pub fn pyramids_for(boxes: &[BBox3], strides: [Triple; 2], margin: usize, extent: Triple) -> Result<Vec<BBoxPyramid>> {
    boxes.iter().map(|b| roi::build_pyramid(*b, strides, margin, extent)).collect()
}

#[derive(Clone, Debug)]
pub struct Inference {
    /// Region probability on the original grid.
    pub prob: Volume,
    /// Locator probability on the level-III grid of the network frame.
    pub locator: Option<Volume>,
    /// Level-I boxes in the network frame.
    pub boxes: Vec<BBox3>,
    /// Number of decoder invocations.
    pub decoder_calls: usize,
    pub loc_seconds: f64,
    pub seg_seconds: f64,
}

/// Locator and decoder outputs in the network frame.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub locator: Volume,
    pub region: Volume,
    pub boxes: Vec<BBox3>,
    pub decoder_calls: usize,
    pub loc_seconds: f64,
    pub seg_seconds: f64,
}

/// Encoder, locator, boxes, one decoder call per box, paste by maximum.
pub fn infer_frame(net: &Network, input: &Volume, roi_cfg: &RoiConfig) -> Result<FrameOutput> {
    let strides = pyramid_strides(net.spec())?;
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let x = tape.constant(input.clone());
    let features = net.encoder_forward(&mut tape, &bound, x)?;
    let loc = net.locator_forward(&mut tape, &bound, features.f3)?;
    let locator = tape.value(loc).clone();
    let boxes3 = roi::extract_boxes(&locator, roi_cfg.threshold, roi_cfg.min_voxels);
    let pyramids = pyramids_for(&boxes3, strides, roi_cfg.margin, locator.dims())?;
    let loc_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut region = Volume::zeros(input.shape().with_channels(1)).with_spacing(input.spacing());
    let outputs = decode_rois(net, &mut tape, &bound, &features, &pyramids)?;
    for (p, out) in pyramids.iter().zip(&outputs) {
        roi::paste_predictions(&mut region, &p.levels[2], tape.value(out.region))?;
    }
    Ok(FrameOutput {
        locator,
        region,
        boxes: pyramids.iter().map(|p| p.levels[2]).collect(),
        decoder_calls: outputs.len(),
        loc_seconds,
        seg_seconds: t1.elapsed().as_secs_f64(),
    })
}

/// Full inference on a raw image; an image without a body or without
/// detections yields an all-zero map.
pub fn infer(net: &Network, image: &Volume, cfg: &Config) -> Result<Inference> {
    let multiple = net.spec().cumulative_stride();
    let Some(prep) = prepare_image(image, cfg.data.target_spacing, multiple)? else {
        return Ok(Inference {
            prob: Volume::zeros(image.shape().with_channels(1)).with_spacing(image.spacing()),
            locator: None,
            boxes: Vec::new(),
            decoder_calls: 0,
            loc_seconds: 0.0,
            seg_seconds: 0.0,
        });
    };
    let out = infer_frame(net, &prep.input, &cfg.roi)?;
    Ok(Inference {
        prob: prep.restore(&out.region, cfg.data.target_spacing, Interp::Linear)?,
        locator: Some(out.locator),
        boxes: out.boxes,
        decoder_calls: out.decoder_calls,
        loc_seconds: out.loc_seconds,
        seg_seconds: out.seg_seconds,
    })
}

/// Voxelwise mean of the members' probability maps.
pub fn ensemble_mean(maps: &[Volume]) -> Result<Volume> {
    let first = maps.first().ok_or(Error::Empty("ensemble members"))?;
    let mut acc = vec![0.0f64; first.len()];
    for m in maps {
        m.check_same_shape(first)?;
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v as f64;
        }
    }
    let n = maps.len() as f64;
    Volume::from_vec(first.shape(), acc.into_iter().map(|a| (a / n) as f32).collect()).map(|v| v.with_spacing(first.spacing()))
}

#[derive(Clone, Debug)]
pub struct EnsembleInference {
    pub prob: Volume,
    pub mask: Volume,
    pub members: Vec<Inference>,
}

/// Average the members' whole-volume maps, then threshold at 0.5.
pub fn ensemble_infer(nets: &[Network], image: &Volume, cfg: &Config) -> Result<EnsembleInference> {
    if nets.is_empty() {
        return Err(Error::Empty("ensemble members"));
    }
    let members = nets.iter().map(|n| infer(n, image, cfg)).collect::<Result<Vec<_>>>()?;
    let maps: Vec<Volume> = members.iter().map(|m| m.prob.clone()).collect();
    let prob = ensemble_mean(&maps)?;
    let mask = prob.binarize(crate::metrics::BINARIZE_AT);
    Ok(EnsembleInference { prob, mask, members })
}

pub const NETWORK_FILE: &str = "network.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

pub fn save_model(net: &Network, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(NETWORK_FILE), serde_json::to_string_pretty(net.spec())? + "\n")?;
    weights::save(net, &dir.join(WEIGHTS_FILE))
}

pub fn load_model(dir: &Path) -> Result<Network> {
    let spec: NetworkSpec = serde_json::from_slice(&fs::read(dir.join(NETWORK_FILE))?)?;
    let mut net = Network::new(spec)?;
    weights::load(&mut net, &dir.join(WEIGHTS_FILE))?;
    Ok(net)
}
