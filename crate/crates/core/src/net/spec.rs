//! Declarative layer graph.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Triple;

/// Name of the implicit network input.
pub const IMAGE: &str = "image";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    ResBlock,
    MaxPool,
    UpConv,
    Add,
    /// 1×1×1 convolution followed by a sigmoid.
    Head,
    /// Crop of one encoder feature map at one pyramid level.
    RoiCrop,
}

/// Which part of the network a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Encoder,
    RoiPyramid,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub part: Part,
    pub inputs: Vec<String>,
    pub kernel: Triple,
    pub stride: Triple,
    pub dilation: Triple,
    pub out_channels: usize,
}

impl LayerSpec {
    fn new(name: &str, kind: LayerKind, part: Part, inputs: &[&str], kernel: Triple, out_channels: usize) -> Self {
        let stride = match kind {
            LayerKind::MaxPool | LayerKind::UpConv => kernel,
            _ => [1, 1, 1],
        };
        LayerSpec {
            name: name.to_string(),
            kind,
            part,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            kernel,
            stride,
            dilation: [1, 1, 1],
            out_channels,
        }
    }

    fn dilated(mut self, dilation: Triple) -> Self {
        self.dilation = dilation;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RfVariant {
    #[serde(rename = "rf64")]
    Rf64,
    #[serde(rename = "rf88")]
    Rf88,
    #[serde(rename = "rf112")]
    Rf112,
}

impl RfVariant {
    pub const ALL: [RfVariant; 3] = [RfVariant::Rf64, RfVariant::Rf88, RfVariant::Rf112];

    pub fn as_str(self) -> &'static str {
        match self {
            RfVariant::Rf64 => "rf64",
            RfVariant::Rf88 => "rf88",
            RfVariant::Rf112 => "rf112",
        }
    }
}

impl fmt::Display for RfVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RfVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rf64" | "64" => Ok(RfVariant::Rf64),
            "rf88" | "88" => Ok(RfVariant::Rf88),
            "rf112" | "112" => Ok(RfVariant::Rf112),
            other => Err(Error::Spec(format!("unknown receptive-field variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub rf_variant: RfVariant,
    pub seed: u64,
}

/// In-plane dilation used by the dilated variants; depth stays undilated.
const PLANAR_DILATION: Triple = [1, 2, 2];

/// The 3-level RoI U-Net with 48/96/192 channels.
pub fn build_default_spec(rf_variant: RfVariant) -> NetworkSpec {
    build_spec(rf_variant, [48, 96, 192], 0)
}

/// Same topology with custom channel widths (used for small experiments).
pub fn build_spec(rf_variant: RfVariant, channels: [usize; 3], seed: u64) -> NetworkSpec {
    use LayerKind::*;
    use Part::*;
    let [c1, c2, c3] = channels;
    let dil = |on: bool| if on { PLANAR_DILATION } else { [1, 1, 1] };
    let (d2, d3, d4) = match rf_variant {
        RfVariant::Rf64 => (false, false, false),
        RfVariant::Rf88 => (false, true, false),
        RfVariant::Rf112 => (true, true, true),
    };
    let layers = vec![
        LayerSpec::new("ResBlock1", ResBlock, Encoder, &[IMAGE], [1, 3, 3], c1),
        LayerSpec::new("MaxPooling1", MaxPool, Encoder, &["ResBlock1"], [1, 2, 2], c1),
        LayerSpec::new("ResBlock2", ResBlock, Encoder, &["MaxPooling1"], [3, 3, 3], c2).dilated(dil(d2)),
        LayerSpec::new("MaxPooling2", MaxPool, Encoder, &["ResBlock2"], [2, 2, 2], c2),
        LayerSpec::new("ResBlock3", ResBlock, Encoder, &["MaxPooling2"], [3, 3, 3], c3).dilated(dil(d3)),
        LayerSpec::new("Locator", Head, Encoder, &["ResBlock3"], [1, 1, 1], 1),
        LayerSpec::new("RoITensor1", RoiCrop, RoiPyramid, &["ResBlock1"], [1, 1, 1], c1),
        LayerSpec::new("RoITensor2", RoiCrop, RoiPyramid, &["ResBlock2"], [1, 1, 1], c2),
        LayerSpec::new("RoITensor3", RoiCrop, RoiPyramid, &["ResBlock3"], [1, 1, 1], c3),
        LayerSpec::new("UpConv1", UpConv, Decoder, &["RoITensor3"], [2, 2, 2], c2),
        LayerSpec::new("Add1", Add, Decoder, &["RoITensor2", "UpConv1"], [1, 1, 1], c2),
        LayerSpec::new("ResBlock4", ResBlock, Decoder, &["Add1"], [3, 3, 3], c2).dilated(dil(d4)),
        LayerSpec::new("UpConv2", UpConv, Decoder, &["ResBlock4"], [1, 2, 2], c1),
        LayerSpec::new("Add2", Add, Decoder, &["RoITensor1", "UpConv2"], [1, 1, 1], c1),
        LayerSpec::new("ResBlock5", ResBlock, Decoder, &["Add2"], [1, 3, 3], c1),
        LayerSpec::new("SegHead1", Head, Decoder, &["ResBlock5"], [1, 1, 1], 1),
        LayerSpec::new("SegHead2", Head, Decoder, &["ResBlock5"], [1, 1, 1], 1),
    ];
    NetworkSpec {
        layers,
        rf_variant,
        seed,
    }
}

pub const LOCATOR: &str = "Locator";
pub const REGION_HEAD: &str = "SegHead1";
pub const CONTOUR_HEAD: &str = "SegHead2";

impl NetworkSpec {
    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Check declaration order, references, head shapes and channel agreement.
    pub fn validate(&self) -> Result<()> {
        let mut channels: HashMap<&str, usize> = HashMap::from([(IMAGE, 1)]);
        for l in &self.layers {
            if channels.contains_key(l.name.as_str()) {
                return Err(Error::Spec(format!("duplicate layer `{}`", l.name)));
            }
            if l.inputs.is_empty() {
                return Err(Error::Spec(format!("layer `{}` has no inputs", l.name)));
            }
            let mut in_ch = Vec::new();
            for i in &l.inputs {
                match channels.get(i.as_str()) {
                    Some(&c) => in_ch.push(c),
                    None if self.layers.iter().any(|o| &o.name == i) => {
                        return Err(Error::Spec(format!(
                            "layer `{}` consumes `{i}` before it is declared (cycle or bad order)",
                            l.name
                        )))
                    }
                    None => return Err(Error::Spec(format!("layer `{}` references unknown `{i}`", l.name))),
                }
            }
            if [l.kernel, l.stride, l.dilation].iter().flatten().any(|&v| v == 0) || l.out_channels == 0 {
                return Err(Error::Spec(format!("layer `{}` has a zero kernel/stride/dilation/channel", l.name)));
            }
            match l.kind {
                LayerKind::Head if l.kernel != [1, 1, 1] || l.out_channels != 1 => {
                    return Err(Error::Spec(format!("head `{}` must be 1x1x1 with one channel", l.name)))
                }
                LayerKind::Add if in_ch.iter().any(|&c| c != l.out_channels) => {
                    return Err(Error::Spec(format!("add `{}` inputs have channels {in_ch:?}", l.name)))
                }
                LayerKind::MaxPool | LayerKind::RoiCrop if in_ch[0] != l.out_channels => {
                    return Err(Error::Spec(format!("`{}` cannot change channel count", l.name)))
                }
                LayerKind::UpConv if l.kernel != l.stride => {
                    return Err(Error::Spec(format!("upconv `{}` needs kernel == stride", l.name)))
                }
                _ => {}
            }
            channels.insert(&l.name, l.out_channels);
        }
        Ok(())
    }

    /// Channel count flowing into `layer` (its first input).
    pub fn in_channels(&self, layer: &LayerSpec) -> usize {
        let src = &layer.inputs[0];
        if src == IMAGE {
            1
        } else {
            self.layer(src).map_or(1, |l| l.out_channels)
        }
    }

    /// Pooling layers of the encoder in order.
    pub fn pools(&self) -> Vec<&LayerSpec> {
        self.layers.iter().filter(|l| l.kind == LayerKind::MaxPool).collect()
    }

    /// Product of all pooling strides per axis.
    pub fn cumulative_stride(&self) -> Triple {
        self.pools().iter().fold([1, 1, 1], |acc, p| [0, 1, 2].map(|a| acc[a] * p.stride[a]))
    }

    /// Encoder feature maps feeding pyramid levels I, II, III.
    pub fn pyramid_sources(&self) -> Vec<(&LayerSpec, &str)> {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::RoiCrop)
            .map(|l| (l, l.inputs[0].as_str()))
            .collect()
    }
}
