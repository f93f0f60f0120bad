//! U-Net builders.
//!
//! A [`Model`] is a list of parameterised layers plus a straight-line wiring
//! program. Every [`Step`] reads earlier slots and writes exactly one new
//! slot; slot 0 holds the network input and the last slot holds the logits.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{self, Conv2d, Padding, SeparableConv2d};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("input {height}x{width} is not divisible by {factor} (2^(levels-1))")]
    Indivisible { height: usize, width: usize, factor: usize },
    #[error("encoder filters must be non-empty and strictly increasing, got {0:?}")]
    Filters(Vec<usize>),
    #[error("num_classes must be at least 2, got {0}")]
    TooFewClasses(usize),
    #[error("input needs at least one channel")]
    NoChannels,
    #[error("the Xception-style builder requires separable_double blocks")]
    WrongBlock,
    #[error("unknown value {value:?} for {what}")]
    Parse { what: &'static str, value: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    DenseDouble,
    SeparableDouble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipMerge {
    Add,
    Concat,
}

/// Which builder produced a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Symmetric encoder/decoder with encoder-to-decoder skip merges.
    UNet,
    /// Separable blocks with residual chaining between consecutive blocks.
    Xception,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($variant:path => $kw:literal),+) => {
        impl FromStr for $ty {
            type Err = ArchError;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($kw => Ok($variant),)+
                    _ => Err(ArchError::Parse { what: $what, value: s.to_string() }),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $kw,)+ })
            }
        }
    };
}

keyword_enum!(BlockKind, "block", BlockKind::DenseDouble => "dense_double", BlockKind::SeparableDouble => "separable_double");
keyword_enum!(SkipMerge, "skip_merge", SkipMerge::Add => "add", SkipMerge::Concat => "concat");
keyword_enum!(Variant, "arch", Variant::UNet => "unet", Variant::Xception => "xception");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetSpec {
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
    pub encoder_filters: Vec<usize>,
    pub block: BlockKind,
    pub skip_merge: SkipMerge,
    pub num_classes: usize,
}

impl Default for UNetSpec {
    /// Desk-scale default: 64×64 RGB, filters 16/32/64.
    fn default() -> Self {
        Self {
            input_shape: (3, 64, 64),
            encoder_filters: vec![16, 32, 64],
            block: BlockKind::DenseDouble,
            skip_merge: SkipMerge::Add,
            num_classes: 3,
        }
    }
}

impl UNetSpec {
    /// 544×800 input with 32..512 filters.
    pub fn full_scale() -> Self {
        Self {
            input_shape: (3, 544, 800),
            encoder_filters: vec![32, 64, 128, 256, 512],
            ..Self::default()
        }
    }

    /// Separable-block spec with 32/64/128 filters.
    pub fn xception_default() -> Self {
        Self {
            encoder_filters: vec![32, 64, 128],
            block: BlockKind::SeparableDouble,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_filters.len()
    }

    /// Spatial extents must be multiples of this.
    pub fn size_factor(&self) -> usize {
        1 << self.levels().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let f = &self.encoder_filters;
        if f.is_empty() || f.contains(&0) || f.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ArchError::Filters(f.clone()));
        }
        if self.num_classes < 2 {
            return Err(ArchError::TooFewClasses(self.num_classes));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 {
            return Err(ArchError::NoChannels);
        }
        let factor = self.size_factor();
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(ArchError::Indivisible { height: h, width: w, factor });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Separable(SeparableConv2d),
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.param_count(),
            Layer::Separable(s) => s.param_count(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Layer::Conv(c) => c.out_channels(),
            Layer::Separable(s) => s.out_channels(),
        }
    }

    fn param_names(&self) -> &'static [&'static str] {
        match self {
            Layer::Conv(_) => &["weight", "bias"],
            Layer::Separable(_) => &["depthwise", "pointwise", "bias"],
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv(c) => c.params(),
            Layer::Separable(s) => s.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv(c) => c.params_mut(),
            Layer::Separable(s) => s.params_mut(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub layer: Layer,
}

pub type Slot = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Layer { layer: usize, input: Slot, relu: bool },
    MaxPool { input: Slot },
    Upsample { input: Slot },
    Add { lhs: Slot, rhs: Slot },
    Concat { lhs: Slot, rhs: Slot },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: (usize, usize, usize),
    layers: Vec<NamedLayer>,
    steps: Vec<Step>,
    labels: Vec<String>,
}

/// Logits plus the graph handles of every parameter, in
/// [`Model::parameters`] order.
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

impl Model {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn layers(&self) -> &[NamedLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NamedLayer] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name).map(|l| &l.layer)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name).map(|l| &mut l.layer)
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.layer.out_channels()).unwrap_or(0)
    }

    /// Merge steps as (lhs slot, rhs slot, output slot).
    pub fn merges(&self) -> Vec<(Slot, Slot, Slot)> {
        self.steps
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match *s {
                Step::Add { lhs, rhs } | Step::Concat { lhs, rhs } => Some((lhs, rhs, i + 1)),
                _ => None,
            })
            .collect()
    }

    pub fn pool_count(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s, Step::MaxPool { .. })).count()
    }

    pub fn upsample_count(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s, Step::Upsample { .. })).count()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.layer.param_count()).sum()
    }

    /// Parameters with stable dotted names, e.g. `enc0.conv1.weight`.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.layer
                    .param_names()
                    .iter()
                    .zip(l.layer.params())
                    .map(move |(p, t)| (format!("{}.{p}", l.name), t))
            })
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let names = l.layer.param_names();
                let prefix = l.name.clone();
                names
                    .iter()
                    .zip(l.layer.params_mut())
                    .map(move |(p, t)| (format!("{prefix}.{p}"), t))
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Forward, TensorError> {
        let mut params = Vec::new();
        let mut bound = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let start = params.len();
            for t in l.layer.params() {
                params.push(g.param(t));
            }
            bound.push(start);
        }
        let mut slots = vec![x];
        for step in &self.steps {
            let out = match *step {
                Step::Layer { layer, input, relu } => {
                    let p = &params[bound[layer]..];
                    let y = match &self.layers[layer].layer {
                        Layer::Conv(c) => c.forward(g, slots[input], &nn::ConvVars { weight: p[0], bias: p[1] })?,
                        Layer::Separable(s) => s.forward(
                            g,
                            slots[input],
                            &nn::SeparableVars { depthwise: p[0], pointwise: p[1], bias: p[2] },
                        )?,
                    };
                    if relu {
                        g.relu(y)
                    } else {
                        y
                    }
                }
                Step::MaxPool { input } => nn::maxpool2x2(g, slots[input])?,
                Step::Upsample { input } => nn::upsample_nearest2x(g, slots[input])?,
                Step::Add { lhs, rhs } => g.add(slots[lhs], slots[rhs])?,
                Step::Concat { lhs, rhs } => nn::concat_channels(g, &[slots[lhs], slots[rhs]])?,
            };
            slots.push(out);
        }
        Ok(Forward { logits: *slots.last().expect("model has steps"), params })
    }

    /// Logits for a batch without recording gradients.
    pub fn infer(&self, batch: Tensor) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let x = g.constant(batch);
        let f = self.forward(&mut g, x)?;
        Ok(g.value(f.logits).detached())
    }

    /// Per-step output shapes `(c, h, w)` for a given input, computed without
    /// running the network.
    pub fn shape_schedule(&self, input: (usize, usize, usize)) -> Vec<(usize, usize, usize)> {
        let mut shapes = vec![input];
        for step in &self.steps {
            let s = match *step {
                Step::Layer { layer, input, .. } => {
                    let (_, h, w) = shapes[input];
                    (self.layers[layer].layer.out_channels(), h, w)
                }
                Step::MaxPool { input } => {
                    let (c, h, w) = shapes[input];
                    (c, h / 2, w / 2)
                }
                Step::Upsample { input } => {
                    let (c, h, w) = shapes[input];
                    (c, h * 2, w * 2)
                }
                Step::Add { lhs, .. } => shapes[lhs],
                Step::Concat { lhs, rhs } => {
                    let (c1, h, w) = shapes[lhs];
                    (c1 + shapes[rhs].0, h, w)
                }
            };
            shapes.push(s);
        }
        shapes.remove(0);
        shapes
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        *self.shape_schedule(self.input_shape).last().expect("model has steps")
    }

    pub fn summarize(&self) -> Summary {
        let shapes = self.shape_schedule(self.input_shape);
        let rows = self
            .steps
            .iter()
            .zip(shapes)
            .zip(&self.labels)
            .map(|((step, shape), label)| {
                let (kind, params) = match *step {
                    Step::Layer { layer, relu, .. } => {
                        let l = &self.layers[layer].layer;
                        let kind = match (l, relu) {
                            (Layer::Conv(c), true) => format!("conv{k}x{k}+relu", k = c.weight.shape()[2]),
                            (Layer::Conv(c), false) => format!("conv{k}x{k}", k = c.weight.shape()[2]),
                            (Layer::Separable(_), true) => "sepconv+relu".to_string(),
                            (Layer::Separable(_), false) => "sepconv".to_string(),
                        };
                        (kind, l.param_count())
                    }
                    Step::MaxPool { .. } => ("maxpool2x2".into(), 0),
                    Step::Upsample { .. } => ("upsample2x".into(), 0),
                    Step::Add { .. } => ("add".into(), 0),
                    Step::Concat { .. } => ("concat".into(), 0),
                };
                SummaryRow { name: label.clone(), kind, output: shape, params }
            })
            .collect::<Vec<_>>();
        let total_params = rows.iter().map(|r| r.params).sum();
        Summary { rows, total_params }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryRow {
    pub name: String,
    pub kind: String,
    pub output: (usize, usize, usize),
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub total_params: usize,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:<16} {:>18} {:>10}", "layer", "kind", "output (c,h,w)", "params")?;
        for r in &self.rows {
            let shape = format!("{}x{}x{}", r.output.0, r.output.1, r.output.2);
            writeln!(f, "{:<20} {:<16} {:>18} {:>10}", r.name, r.kind, shape, r.params)?;
        }
        write!(f, "{:<20} {:<16} {:>18} {:>10}", "total", "", "", self.total_params)
    }
}

/// Incremental construction of a [`Model`].
pub struct ModelBuilder {
    input_shape: (usize, usize, usize),
    layers: Vec<NamedLayer>,
    steps: Vec<Step>,
    labels: Vec<String>,
    channels: Vec<usize>,
}

impl ModelBuilder {
    pub const INPUT: Slot = 0;

    pub fn new(input_shape: (usize, usize, usize)) -> Self {
        Self {
            input_shape,
            layers: Vec::new(),
            steps: Vec::new(),
            labels: Vec::new(),
            channels: vec![input_shape.0],
        }
    }

    pub fn channels(&self, slot: Slot) -> usize {
        self.channels[slot]
    }

    fn push(&mut self, step: Step, label: String, channels: usize) -> Slot {
        self.steps.push(step);
        self.labels.push(label);
        self.channels.push(channels);
        self.steps.len()
    }

    pub fn layer(&mut self, name: impl Into<String>, layer: Layer, input: Slot, relu: bool) -> Slot {
        let name = name.into();
        let out = layer.out_channels();
        self.layers.push(NamedLayer { name: name.clone(), layer });
        self.push(Step::Layer { layer: self.layers.len() - 1, input, relu }, name, out)
    }

    pub fn maxpool(&mut self, label: impl Into<String>, input: Slot) -> Slot {
        let c = self.channels[input];
        self.push(Step::MaxPool { input }, label.into(), c)
    }

    pub fn upsample(&mut self, label: impl Into<String>, input: Slot) -> Slot {
        let c = self.channels[input];
        self.push(Step::Upsample { input }, label.into(), c)
    }

    pub fn add(&mut self, label: impl Into<String>, lhs: Slot, rhs: Slot) -> Slot {
        let c = self.channels[lhs];
        self.push(Step::Add { lhs, rhs }, label.into(), c)
    }

    pub fn concat(&mut self, label: impl Into<String>, lhs: Slot, rhs: Slot) -> Slot {
        let c = self.channels[lhs] + self.channels[rhs];
        self.push(Step::Concat { lhs, rhs }, label.into(), c)
    }

    pub fn finish(self) -> Model {
        Model { input_shape: self.input_shape, layers: self.layers, steps: self.steps, labels: self.labels }
    }
}

fn conv_layer(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Conv(Conv2d::new(in_ch, out_ch, kernel, Padding::Same, rng))
}

fn double_block(b: &mut ModelBuilder, prefix: &str, kind: BlockKind, input: Slot, out: usize, rng: &mut ChaCha8Rng) -> Slot {
    let make = |i: usize, rng: &mut ChaCha8Rng| match kind {
        BlockKind::DenseDouble => conv_layer(i, out, 3, rng),
        BlockKind::SeparableDouble => Layer::Separable(SeparableConv2d::new(i, out, 3, Padding::Same, rng)),
    };
    let first = make(b.channels(input), rng);
    let x = b.layer(format!("{prefix}.conv1"), first, input, true);
    let second = make(out, rng);
    b.layer(format!("{prefix}.conv2"), second, x, true)
}

/// Symmetric U-Net: per level two convolutions then max-pooling on the way
/// down, upsampling, a skip merge and two convolutions on the way up, and a
/// final 1×1 convolution producing raw logits.
pub fn build_unet(spec: &UNetSpec, seed: u64) -> Result<Model, ArchError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ModelBuilder::new(spec.input_shape);
    let filters = &spec.encoder_filters;
    let levels = filters.len();
    let mut x = ModelBuilder::INPUT;
    let mut skips = Vec::with_capacity(levels);
    for (i, &f) in filters.iter().enumerate() {
        let name = if i + 1 == levels { "bottleneck".to_string() } else { format!("enc{i}") };
        x = double_block(&mut b, &name, spec.block, x, f, &mut rng);
        if i + 1 < levels {
            skips.push(x);
            x = b.maxpool(format!("enc{i}.pool"), x);
        }
    }
    for i in (0..levels - 1).rev() {
        x = b.upsample(format!("dec{i}.up"), x);
        let skip = skips[i];
        x = match spec.skip_merge {
            SkipMerge::Add => {
                let want = b.channels(skip);
                if b.channels(x) != want {
                    let proj = conv_layer(b.channels(x), want, 1, &mut rng);
                    x = b.layer(format!("dec{i}.proj"), proj, x, false);
                }
                b.add(format!("dec{i}.merge"), x, skip)
            }
            SkipMerge::Concat => b.concat(format!("dec{i}.merge"), x, skip),
        };
        x = double_block(&mut b, &format!("dec{i}"), spec.block, x, filters[i], &mut rng);
    }
    let head = conv_layer(b.channels(x), spec.num_classes, 1, &mut rng);
    b.layer("head", head, x, false);
    Ok(b.finish())
}

/// Separable-block U-Net in which every block's output is summed with a 1×1
/// projection of that block's input, in both the encoder and decoder. There
/// are no encoder-to-decoder merges.
pub fn build_xception_unet(spec: &UNetSpec, seed: u64) -> Result<Model, ArchError> {
    spec.validate()?;
    if spec.block != BlockKind::SeparableDouble {
        return Err(ArchError::WrongBlock);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ModelBuilder::new(spec.input_shape);
    let filters = &spec.encoder_filters;
    let levels = filters.len();
    let mut x = ModelBuilder::INPUT;
    let mut residual_block = |b: &mut ModelBuilder, prefix: String, input: Slot, out: usize| {
        let y = double_block(b, &prefix, BlockKind::SeparableDouble, input, out, &mut rng);
        let proj = conv_layer(b.channels(input), out, 1, &mut rng);
        let r = b.layer(format!("{prefix}.res"), proj, input, false);
        b.add(format!("{prefix}.merge"), y, r)
    };
    for (i, &f) in filters.iter().enumerate() {
        x = residual_block(&mut b, format!("enc{i}"), x, f);
        if i + 1 < levels {
            x = b.maxpool(format!("enc{i}.pool"), x);
        }
    }
    for i in (0..levels - 1).rev() {
        x = b.upsample(format!("dec{i}.up"), x);
        x = residual_block(&mut b, format!("dec{i}"), x, filters[i]);
    }
    let head = conv_layer(b.channels(x), spec.num_classes, 1, &mut rng);
    b.layer("head", head, x, false);
    Ok(b.finish())
}

pub fn build(variant: Variant, spec: &UNetSpec, seed: u64) -> Result<Model, ArchError> {
    match variant {
        Variant::UNet => build_unet(spec, seed),
        Variant::Xception => build_xception_unet(spec, seed),
    }
}
