//! Convolutional networks: encoder, adjustment (also the SOL corrector),
//! multi-scale decoder (also the standalone super-resolution model) and
//! Dil-ResNet.
//!
//! All convolutions keep the spatial size. Every layer except the last one is
//! followed by Leaky ReLU (slope 0.2), or ReLU for Dil-ResNet.

mod checkpoint;
mod conv;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, expect_arch, load_checkpoint, save_checkpoint, CheckpointMeta, NetworkEntry,
    CHECKPOINT_MAGIC,
};
pub use conv::{conv2d, upsample2, Padding};

use crate::autodiff::{Gradients, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Reynolds numbers enter networks as a constant channel scaled by this.
pub const REYNOLDS_SCALE: f64 = 1.0 / 1500.0;

/// Network family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Encoder,
    Adjustment,
    Decoder,
    DilResnet,
}

/// Shape of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
}

impl LayerSpec {
    fn new(in_channels: usize, out_channels: usize, kernel_size: usize, dilation: usize) -> Self {
        Self { in_channels, out_channels, kernel_size, dilation }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size * self.kernel_size + self.out_channels
    }
}

/// Architecture descriptor: everything needed to rebuild a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: Padding,
}

const DIL_RESNET_RATES: [usize; 7] = [1, 2, 4, 8, 4, 2, 1];
const DECODER_BRANCH_RATES: [usize; 3] = [1, 2, 4];
const DECODER_BRANCH_WIDTH: usize = 24;

impl ArchSpec {
    pub fn new(kind: ArchKind, in_channels: usize, out_channels: usize, padding: Padding) -> Self {
        Self { kind, in_channels, out_channels, padding }
    }

    /// Layers in declaration order (the order of checkpoint blocks and of
    /// flattened parameter vectors).
    pub fn layers(&self) -> Vec<LayerSpec> {
        let (i, o) = (self.in_channels, self.out_channels);
        match self.kind {
            ArchKind::Encoder => vec![LayerSpec::new(i, 32, 5, 1), LayerSpec::new(32, 16, 5, 1), LayerSpec::new(16, o, 5, 1)],
            ArchKind::Adjustment => {
                let mut l = vec![LayerSpec::new(i, 32, 5, 1)];
                l.extend((0..10).map(|_| LayerSpec::new(32, 32, 5, 1)));
                l.push(LayerSpec::new(32, o, 5, 1));
                l
            }
            ArchKind::DilResnet => {
                let mut l = vec![LayerSpec::new(i, 32, 3, 1)];
                for _ in 0..4 {
                    l.extend(DIL_RESNET_RATES.iter().map(|&d| LayerSpec::new(32, 32, 3, d)));
                }
                l.push(LayerSpec::new(32, o, 3, 1));
                l
            }
            ArchKind::Decoder => {
                let b = DECODER_BRANCH_WIDTH;
                let mut l = Vec::new();
                for &d in &DECODER_BRANCH_RATES {
                    l.extend([LayerSpec::new(i, b, 3, d), LayerSpec::new(b, b, 3, d), LayerSpec::new(b, b, 3, d)]);
                }
                l.push(LayerSpec::new(3 * b, 48, 3, 1));
                l.push(LayerSpec::new(48, 32, 3, 1));
                l.push(LayerSpec::new(32, 32, 3, 1));
                l.push(LayerSpec::new(32, 32, 3, 1));
                l.push(LayerSpec::new(32, o, 3, 1));
                l
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::parameter_count).sum()
    }

    /// Spatial scale from input to output.
    pub fn upscale(&self) -> usize {
        if self.kind == ArchKind::Decoder {
            4
        } else {
            1
        }
    }

    /// Distance in cells over which one input cell can influence the output.
    pub fn receptive_radius(&self) -> usize {
        match self.kind {
            ArchKind::Decoder => usize::MAX,
            _ => self.layers().iter().map(|l| l.kernel_size / 2 * l.dilation).sum(),
        }
    }
}

/// One convolution with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Real> {
    pub spec: LayerSpec,
    pub padding: Padding,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// A layer's parameters on a tape.
#[derive(Clone, Debug)]
pub struct LayerVars<'t, T: Real> {
    pub weights: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(spec: LayerSpec, padding: Padding) -> Self {
        Self { spec, padding, weights: Tensor::zeros(&spec.weight_shape()), bias: Tensor::zeros(&[spec.out_channels]) }
    }

    pub fn forward<'t>(&self, vars: &LayerVars<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        conv2d(x, &vars.weights, &vars.bias, self.spec.dilation, self.padding)
    }
}

/// A network: descriptor plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Real> {
    pub spec: ArchSpec,
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> Network<T> {
    pub fn zeros(spec: ArchSpec) -> Self {
        Self { spec, layers: spec.layers().into_iter().map(|l| ConvLayer::zeros(l, spec.padding)).collect() }
    }

    /// Fan-in scaled uniform initialization: weights and biases drawn from
    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init(spec: ArchSpec, seed: u64) -> Self {
        let mut net = Self::zeros(spec);
        for (idx, layer) in net.layers.iter_mut().enumerate() {
            let mut rng = crate::rng::stream(seed, &[idx as u64]);
            let fan_in = (layer.spec.in_channels * layer.spec.kernel_size * layer.spec.kernel_size) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let mut draw = |n: usize| (0..n).map(|_| T::cast(rng.random_range(-bound..bound))).collect::<Vec<_>>();
            let w = draw(layer.weights.len());
            let b = draw(layer.bias.len());
            layer.weights = Tensor::from_parts(layer.weights.shape().to_vec(), w);
            layer.bias = Tensor::from_parts(layer.bias.shape().to_vec(), b);
        }
        net
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters as trainable leaves on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<LayerVars<'t, T>> {
        self.layers
            .iter()
            .map(|l| LayerVars { weights: tape.param(l.weights.clone()), bias: tape.param(l.bias.clone()) })
            .collect()
    }

    /// Parameters as constants on `tape`.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Vec<LayerVars<'t, T>> {
        self.layers
            .iter()
            .map(|l| LayerVars { weights: tape.constant(l.weights.clone()), bias: tape.constant(l.bias.clone()) })
            .collect()
    }

    /// Flattened parameters in declaration order, weights before bias.
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::shape("set_flat", format!("{} values for {} parameters", values.len(), self.parameter_count())));
        }
        let mut rest = values;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            let (b, tail) = tail.split_at(l.bias.len());
            l.weights = Tensor::from_parts(l.weights.shape().to_vec(), w.to_vec());
            l.bias = Tensor::from_parts(l.bias.shape().to_vec(), b.to_vec());
            rest = tail;
        }
        Ok(())
    }

    /// Flattened gradient matching [`Network::flat`].
    pub fn gradient(&self, grads: &Gradients<T>, vars: &[LayerVars<'_, T>]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for v in vars {
            out.extend_from_slice(grads.wrt(&v.weights).data());
            out.extend_from_slice(grads.wrt(&v.bias).data());
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec,
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer { spec: l.spec, padding: l.padding, weights: l.weights.cast(), bias: l.bias.cast() })
                .collect(),
        }
    }

    /// Forward pass of a `[C, H, W]` input with the given parameter vars.
    pub fn forward<'t>(&self, vars: &[LayerVars<'t, T>], x: &Var<'t, T>) -> Result<Var<'t, T>> {
        if vars.len() != self.layers.len() {
            return Err(Error::shape("network", format!("{} layer vars for {} layers", vars.len(), self.layers.len())));
        }
        match x.shape() {
            [c, _, _] if *c == self.spec.in_channels => {}
            s => {
                return Err(Error::shape(
                    "network",
                    format!("{:?} expects {} input channels, got {s:?}", self.spec.kind, self.spec.in_channels),
                ))
            }
        }
        let slope = T::cast(LEAKY_SLOPE);
        let act = |v: Var<'t, T>| v.leaky_relu(slope);
        let conv = |i: usize, v: &Var<'t, T>| self.layers[i].forward(&vars[i], v);
        let last = self.layers.len() - 1;
        match self.spec.kind {
            ArchKind::Encoder => {
                let h = act(conv(0, x)?);
                let h = act(conv(1, &h)?);
                conv(2, &h)
            }
            ArchKind::Adjustment => {
                let mut h = act(conv(0, x)?);
                for b in 0..5 {
                    let inner = act(conv(1 + 2 * b, &h)?);
                    let inner = act(conv(2 + 2 * b, &inner)?);
                    h = h.add(&inner)?;
                }
                conv(last, &h)
            }
            ArchKind::DilResnet => {
                let mut h = conv(0, x)?;
                for b in 0..4 {
                    let mut inner = h.clone();
                    for l in 0..DIL_RESNET_RATES.len() {
                        inner = conv(1 + b * DIL_RESNET_RATES.len() + l, &inner)?.relu();
                    }
                    h = h.add(&inner)?;
                }
                conv(last, &h)
            }
            ArchKind::Decoder => {
                let mut branches = Vec::with_capacity(3);
                for b in 0..DECODER_BRANCH_RATES.len() {
                    let mut h = x.clone();
                    for l in 0..3 {
                        h = act(conv(3 * b + l, &h)?);
                    }
                    branches.push(h);
                }
                let refs: Vec<&Var<'t, T>> = branches.iter().collect();
                let h = Var::concat_channels(&refs)?;
                let h = act(conv(9, &h)?);
                let h = act(conv(10, &h)?);
                let h = act(conv(11, &upsample2(&h, self.spec.padding)?)?);
                let h = act(conv(12, &upsample2(&h, self.spec.padding)?)?);
                conv(13, &h)
            }
        }
    }

    /// Inference without recording gradients.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let vars = self.bind_frozen(&tape);
        Ok(self.forward(&vars, &tape.constant(x.clone()))?.value().clone())
    }
}

/// Appends constant channels, one per conditioning scalar.
pub fn with_conditioning<'t, T: Real>(x: &Var<'t, T>, scalars: &[f64]) -> Result<Var<'t, T>> {
    if scalars.is_empty() {
        return Ok(x.clone());
    }
    let [h, w] = match x.shape() {
        [_, h, w] => [*h, *w],
        s => return Err(Error::shape("with_conditioning", format!("expected [C, H, W], got {s:?}"))),
    };
    let mut data = Vec::with_capacity(scalars.len() * h * w);
    for &s in scalars {
        data.extend(std::iter::repeat_n(T::cast(s), h * w));
    }
    let extra = x.tape().constant(Tensor::from_parts(vec![scalars.len(), h, w], data));
    Var::concat_channels(&[x, &extra])
}

/// Which network a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Encoder,
    Adjustment,
    Decoder,
    DilResnet,
    SolCorrector,
    SuperResolution,
}

impl ModelRole {
    pub const ALL: [ModelRole; 6] = [
        ModelRole::Encoder,
        ModelRole::Adjustment,
        ModelRole::Decoder,
        ModelRole::DilResnet,
        ModelRole::SolCorrector,
        ModelRole::SuperResolution,
    ];

    pub fn kind(self) -> ArchKind {
        match self {
            ModelRole::Encoder => ArchKind::Encoder,
            ModelRole::Adjustment | ModelRole::SolCorrector => ArchKind::Adjustment,
            ModelRole::Decoder | ModelRole::SuperResolution => ArchKind::Decoder,
            ModelRole::DilResnet => ArchKind::DilResnet,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelRole::Encoder => "encoder",
            ModelRole::Adjustment => "adjustment",
            ModelRole::Decoder => "decoder",
            ModelRole::DilResnet => "dil_resnet",
            ModelRole::SolCorrector => "sol_corrector",
            ModelRole::SuperResolution => "super_resolution",
        }
    }

    fn index(self) -> u64 {
        ModelRole::ALL.iter().position(|&r| r == self).unwrap() as u64
    }
}

/// Input layout shared by all networks of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub padding: Padding,
    /// Channels appended to the 2 velocity channels: marker and conditioning.
    pub extra_inputs: usize,
    pub roles: Vec<ModelRole>,
}

impl ModelConfig {
    pub fn ato(padding: Padding, extra_inputs: usize) -> Self {
        Self { padding, extra_inputs, roles: vec![ModelRole::Encoder, ModelRole::Adjustment, ModelRole::Decoder] }
    }

    pub fn arch(&self, role: ModelRole) -> ArchSpec {
        let (i, o) = match role {
            ModelRole::Decoder | ModelRole::SuperResolution => (2, 2),
            _ => (2 + self.extra_inputs, 2),
        };
        ArchSpec::new(role.kind(), i, o, self.padding)
    }
}

/// The parameter collections of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSet<T: Real = f32> {
    pub networks: BTreeMap<ModelRole, Network<T>>,
}

impl<T: Real> Default for ModelSet<T> {
    fn default() -> Self {
        Self { networks: BTreeMap::new() }
    }
}

impl<T: Real> ModelSet<T> {
    pub fn get(&self, role: ModelRole) -> Option<&Network<T>> {
        self.networks.get(&role)
    }

    pub fn get_mut(&mut self, role: ModelRole) -> Option<&mut Network<T>> {
        self.networks.get_mut(&role)
    }

    pub fn require(&self, role: ModelRole) -> Result<&Network<T>> {
        self.get(role).ok_or_else(|| Error::IncompatibleCheckpoint(format!("model set has no {} network", role.name())))
    }

    pub fn insert(&mut self, role: ModelRole, net: Network<T>) {
        self.networks.insert(role, net);
    }

    pub fn cast<U: Real>(&self) -> ModelSet<U> {
        ModelSet { networks: self.networks.iter().map(|(r, n)| (*r, n.cast())).collect() }
    }

    pub fn count_parameters(&self) -> ParameterReport {
        ParameterReport { counts: self.networks.iter().map(|(r, n)| (*r, n.parameter_count())).collect() }
    }
}

/// Deterministic initialization of every role in `config`.
pub fn parameter_init<T: Real>(config: &ModelConfig, seed: u64) -> ModelSet<T> {
    let mut set = ModelSet::default();
    for &role in &config.roles {
        set.insert(role, Network::init(config.arch(role), crate::rng::derive_seed(seed, &[0x6e6e, role.index()])));
    }
    set
}

/// Parameter counts per network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub counts: BTreeMap<ModelRole, usize>,
}

impl ParameterReport {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Reference budget per family and whether `count` lies within 10% of it.
    pub fn budget(kind: ArchKind) -> usize {
        match kind {
            ArchKind::Encoder => 15_000,
            ArchKind::Adjustment | ArchKind::DilResnet => 260_000,
            ArchKind::Decoder => 97_000,
        }
    }

    pub fn within_budget(&self) -> bool {
        self.counts.iter().all(|(role, &n)| {
            let b = Self::budget(role.kind()) as f64;
            (n as f64 - b).abs() <= 0.1 * b
        })
    }
}

impl std::fmt::Display for ParameterReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (role, n) in &self.counts {
            writeln!(f, "{:<17} {n:>8}", role.name())?;
        }
        write!(f, "{:<17} {:>8}", "total", self.total())
    }
}

#[cfg(test)]
mod tests;
