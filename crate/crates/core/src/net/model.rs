//! Parameters and forward passes of a [`NetworkSpec`].

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spec::{LayerKind, LayerSpec, NetworkSpec, Part, CONTOUR_HEAD, IMAGE, LOCATOR, REGION_HEAD};
use crate::error::{Error, Result};
use crate::ops::{ConvParams, DEFAULT_EPS};
use crate::tape::{vector, Tape, TensorId};
use crate::volume::{Shape, Triple, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    ConvWeight,
    UpConvWeight,
    Bias,
    NormGamma,
    NormBeta,
}

impl ParamKind {
    /// Convolution kernels (regular and transposed) carry the L2 penalty.
    pub fn is_kernel(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::UpConvWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Volume,
    /// Inputs feeding each output element; the He-init scale.
    pub fan_in: usize,
}

/// A network: its spec plus one value per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Parameter tensors registered on a tape, aligned with [`Network::params`].
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<TensorId>,
}

impl Bound {
    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

/// Whole-volume encoder feature maps at pyramid levels I, II, III.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub f1: TensorId,
    pub f2: TensorId,
    pub f3: TensorId,
}

/// Decoder outputs at RoI level-I resolution.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub region: TensorId,
    pub contour: TensorId,
}

struct ParamBuilder {
    params: Vec<Param>,
}

impl ParamBuilder {
    fn conv(&mut self, prefix: &str, p: &ConvParams) {
        self.params.push(Param {
            name: format!("{prefix}.weight"),
            kind: ParamKind::ConvWeight,
            value: Volume::zeros(p.weight_shape()),
            fan_in: p.in_channels * p.kernel_volume(),
        });
        self.params.push(Param {
            name: format!("{prefix}.bias"),
            kind: ParamKind::Bias,
            value: vector(vec![0.0; p.out_channels]),
            fan_in: 0,
        });
    }

    fn norm(&mut self, prefix: &str, channels: usize) {
        self.params.push(Param {
            name: format!("{prefix}.gamma"),
            kind: ParamKind::NormGamma,
            value: vector(vec![1.0; channels]),
            fan_in: 0,
        });
        self.params.push(Param {
            name: format!("{prefix}.beta"),
            kind: ParamKind::NormBeta,
            value: vector(vec![0.0; channels]),
            fan_in: 0,
        });
    }
}

fn resblock_convs(layer: &LayerSpec, in_channels: usize) -> [ConvParams; 3] {
    let c = layer.out_channels;
    [
        ConvParams::same(in_channels, c, layer.kernel, layer.dilation),
        ConvParams::same(c, c, layer.kernel, layer.dilation),
        ConvParams::same(c, c, layer.kernel, layer.dilation),
    ]
}

impl Network {
    /// Validate `spec` and He-initialize every convolution from `spec.seed`.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = ParamBuilder { params: Vec::new() };
        for layer in &spec.layers {
            let cin = spec.in_channels(layer);
            let name = &layer.name;
            match layer.kind {
                LayerKind::ResBlock => {
                    for (i, p) in resblock_convs(layer, cin).iter().enumerate() {
                        b.conv(&format!("{name}.conv{}", i + 1), p);
                        b.norm(&format!("{name}.norm{}", i + 1), layer.out_channels);
                    }
                    if cin != layer.out_channels {
                        b.conv(&format!("{name}.proj"), &ConvParams::pointwise(cin, layer.out_channels));
                    }
                }
                LayerKind::Head => b.conv(name, &ConvParams::pointwise(cin, layer.out_channels)),
                LayerKind::UpConv => b.params.push(Param {
                    name: format!("{name}.weight"),
                    kind: ParamKind::UpConvWeight,
                    value: Volume::zeros(Shape::new(
                        cin,
                        layer.out_channels,
                        layer.kernel[0],
                        layer.kernel[1],
                        layer.kernel[2],
                    )),
                    fan_in: cin,
                }),
                LayerKind::MaxPool | LayerKind::Add | LayerKind::RoiCrop => {}
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for p in b.params.iter_mut().filter(|p| p.kind.is_kernel()) {
            let normal = Normal::new(0.0f32, (2.0 / p.fan_in as f32).sqrt()).expect("positive std");
            p.value.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        Ok(Self::from_params(spec, b.params))
    }

    fn from_params(spec: NetworkSpec, params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Network { spec, params, index }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same weights under another spec with an identical parameter layout
    /// (e.g. a different dilation variant).
    pub fn transplant(&self, spec: NetworkSpec) -> Result<Network> {
        let target = Network::new(spec)?;
        if target.params.len() != self.params.len() {
            return Err(Error::Spec("parameter layouts differ".into()));
        }
        for (a, b) in target.params.iter().zip(&self.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Spec(format!("parameter `{}` differs from `{}`", a.name, b.name)));
            }
        }
        Ok(Network::from_params(target.spec, self.params.clone()))
    }

    /// Register every parameter on `tape`; `trainable` controls whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            ids: self.params.iter().map(|p| tape.leaf(p.value.clone(), trainable)).collect(),
        }
    }

    fn pid(&self, bound: &Bound, name: &str) -> Result<TensorId> {
        self.index
            .get(name)
            .map(|&i| bound.ids[i])
            .ok_or_else(|| Error::Spec(format!("missing parameter `{name}`")))
    }

    fn conv(&self, tape: &mut Tape, bound: &Bound, prefix: &str, x: TensorId, p: ConvParams) -> Result<TensorId> {
        let w = self.pid(bound, &format!("{prefix}.weight"))?;
        let b = self.pid(bound, &format!("{prefix}.bias"))?;
        tape.conv3d(x, w, Some(b), p)
    }

    fn resblock(&self, tape: &mut Tape, bound: &Bound, layer: &LayerSpec, x: TensorId) -> Result<TensorId> {
        let cin = tape.value(x).shape().c;
        let name = &layer.name;
        let mut h = x;
        for (i, p) in resblock_convs(layer, cin).into_iter().enumerate() {
            h = self.conv(tape, bound, &format!("{name}.conv{}", i + 1), h, p)?;
            let g = self.pid(bound, &format!("{name}.norm{}.gamma", i + 1))?;
            let b = self.pid(bound, &format!("{name}.norm{}.beta", i + 1))?;
            h = tape.instance_norm(h, g, b, DEFAULT_EPS)?;
            if i < 2 {
                h = tape.relu(h)?;
            }
        }
        let skip = if cin != layer.out_channels {
            self.conv(tape, bound, &format!("{name}.proj"), x, ConvParams::pointwise(cin, layer.out_channels))?
        } else {
            x
        };
        let sum = tape.add(h, skip)?;
        tape.relu(sum)
    }

    fn run_layer(&self, tape: &mut Tape, bound: &Bound, layer: &LayerSpec, env: &HashMap<String, TensorId>) -> Result<TensorId> {
        let input = |k: usize| {
            env.get(&layer.inputs[k])
                .copied()
                .ok_or_else(|| Error::Spec(format!("`{}` input `{}` not computed", layer.name, layer.inputs[k])))
        };
        match layer.kind {
            LayerKind::ResBlock => self.resblock(tape, bound, layer, input(0)?),
            LayerKind::MaxPool => tape.maxpool3d(input(0)?, layer.kernel, layer.stride),
            LayerKind::UpConv => {
                let w = self.pid(bound, &format!("{}.weight", layer.name))?;
                tape.upconv3d(input(0)?, w, layer.stride)
            }
            LayerKind::Add => tape.add(input(0)?, input(1)?),
            LayerKind::Head => {
                let x = input(0)?;
                let cin = tape.value(x).shape().c;
                let logits = self.conv(tape, bound, &layer.name, x, ConvParams::pointwise(cin, 1))?;
                tape.sigmoid(logits)
            }
            LayerKind::RoiCrop => Err(Error::Spec(format!("`{}` is filled by the RoI pyramid", layer.name))),
        }
    }

    /// Run the encoder over a whole `1×1×d×h×w` image whose spatial axes are
    /// multiples of the cumulative pooling stride.
    pub fn encoder_forward(&self, tape: &mut Tape, bound: &Bound, image: TensorId) -> Result<Features> {
        let dims = tape.value(image).dims();
        let cum = self.spec.cumulative_stride();
        for (a, name) in ["d", "h", "w"].into_iter().enumerate() {
            if dims[a] % cum[a] != 0 {
                return Err(Error::NotDivisible {
                    axis: name,
                    len: dims[a],
                    stride: cum[a],
                });
            }
        }
        let mut env = HashMap::from([(IMAGE.to_string(), image)]);
        for layer in &self.spec.layers {
            if layer.part != Part::Encoder || layer.kind == LayerKind::Head {
                continue;
            }
            let out = self.run_layer(tape, bound, layer, &env)?;
            env.insert(layer.name.clone(), out);
        }
        let levels: Vec<TensorId> = self
            .spec
            .pyramid_sources()
            .iter()
            .map(|(_, src)| env.get(*src).copied().ok_or_else(|| Error::Spec(format!("no feature `{src}`"))))
            .collect::<Result<_>>()?;
        match levels[..] {
            [f1, f2, f3] => Ok(Features { f1, f2, f3 }),
            _ => Err(Error::Spec(format!("expected 3 pyramid levels, found {}", levels.len()))),
        }
    }

    /// Probability map of the locator head on the deepest feature map.
    pub fn locator_forward(&self, tape: &mut Tape, bound: &Bound, f3: TensorId) -> Result<TensorId> {
        let layer = self.spec.layer(LOCATOR).ok_or_else(|| Error::Spec("no locator head".into()))?;
        let env = HashMap::from([(layer.inputs[0].clone(), f3)]);
        self.run_layer(tape, bound, layer, &env)
    }

    /// Decode one RoI tensor pyramid `(f1, f2, f3)` into region and contour
    /// probabilities at `f1`'s resolution.
    pub fn decoder_forward(&self, tape: &mut Tape, bound: &Bound, pyramid: [TensorId; 3]) -> Result<DecoderOutput> {
        let crops: Vec<&LayerSpec> = self.spec.layers.iter().filter(|l| l.kind == LayerKind::RoiCrop).collect();
        let mut env: HashMap<String, TensorId> = HashMap::new();
        for (layer, id) in crops.iter().zip(pyramid) {
            env.insert(layer.name.clone(), id);
        }
        self.check_pyramid(tape, &env)?;
        for layer in &self.spec.layers {
            if layer.part != Part::Decoder {
                continue;
            }
            let out = self.run_layer(tape, bound, layer, &env)?;
            env.insert(layer.name.clone(), out);
        }
        let get = |n: &str| env.get(n).copied().ok_or_else(|| Error::Spec(format!("no head `{n}`")));
        Ok(DecoderOutput {
            region: get(REGION_HEAD)?,
            contour: get(CONTOUR_HEAD)?,
        })
    }

    /// Propagate spatial sizes through the decoder and require every fusion
    /// to see matching extents and channels.
    fn check_pyramid(&self, tape: &Tape, env: &HashMap<String, TensorId>) -> Result<()> {
        let mut dims: HashMap<&str, (Triple, usize)> = env
            .iter()
            .map(|(k, &id)| {
                let s = tape.value(id).shape();
                (k.as_str(), (s.dims(), s.c))
            })
            .collect();
        for layer in self.spec.layers.iter().filter(|l| l.part == Part::Decoder) {
            let (d, c) = *dims
                .get(layer.inputs[0].as_str())
                .ok_or_else(|| Error::Spec(format!("decoder input `{}` missing", layer.inputs[0])))?;
            let out = match layer.kind {
                LayerKind::UpConv => ([0, 1, 2].map(|a| d[a] * layer.stride[a]), layer.out_channels),
                LayerKind::Add => {
                    let (d2, c2) = dims[layer.inputs[1].as_str()];
                    if d != d2 || c != c2 {
                        return Err(Error::InvalidShape(format!(
                            "inconsistent RoI pyramid at `{}`: {} has {d:?}x{c}, {} has {d2:?}x{c2}",
                            layer.name, layer.inputs[0], layer.inputs[1]
                        )));
                    }
                    (d, c)
                }
                _ => (d, layer.out_channels),
            };
            dims.insert(&layer.name, out);
        }
        Ok(())
    }
}
