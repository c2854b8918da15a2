//! Generator and discriminator architectures.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{BranchPair, Scheme, SchemeConfig, StageSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Conv2dLayer, Params, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

/// Widths double per level up to this multiple of the base width.
pub const MAX_WIDTH_MULT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeneratorBase {
    UNet,
    ResNet,
}

impl GeneratorBase {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorBase::UNet => "unet",
            GeneratorBase::ResNet => "resnet",
        }
    }
}

impl fmt::Display for GeneratorBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GeneratorBase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(GeneratorBase::UNet),
            "resnet" => Ok(GeneratorBase::ResNet),
            other => Err(Error::Config(format!("unknown generator base `{other}` (unet, resnet)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OutputHead {
    Linear,
    Tanh,
}

impl OutputHead {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputHead::Linear => "linear",
            OutputHead::Tanh => "tanh",
        }
    }
}

impl FromStr for OutputHead {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(OutputHead::Linear),
            "tanh" => Ok(OutputHead::Tanh),
            other => Err(Error::Config(format!("unknown output head `{other}` (linear, tanh)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GeneratorSpec {
    pub base: GeneratorBase,
    /// Number of stride-2 downsampling stages.
    pub depth: usize,
    pub base_width: usize,
    pub in_channels: usize,
    pub guide_channels: usize,
    pub out_channels: usize,
    pub head: OutputHead,
    /// Adds the first `out_channels` input channels to the head output.
    pub residual_input: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            base: GeneratorBase::UNet,
            depth: 4,
            base_width: 16,
            in_channels: 1,
            guide_channels: 3,
            out_channels: 1,
            head: OutputHead::Linear,
            residual_input: false,
        }
    }
}

fn level_width(base: usize, level: usize) -> usize {
    base << level.min(MAX_WIDTH_MULT.trailing_zeros() as usize)
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::Config(format!("generator depth {} outside 1..=8", self.depth)));
        }
        if self.base_width == 0 || self.in_channels == 0 || self.guide_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("generator widths and channel counts must be positive".into()));
        }
        if self.residual_input && self.in_channels < self.out_channels {
            return Err(Error::Config("residual_input needs in_channels >= out_channels".into()));
        }
        Ok(())
    }

    /// Encoder stage layout; every stage ends in one normalization site.
    pub fn stages(&self) -> Vec<StageSpec> {
        let w = self.base_width;
        let down = |l: usize| StageSpec { out_channels: level_width(w, l), kernel: 3, stride: 2, residual: false };
        match self.base {
            GeneratorBase::UNet => (0..self.depth).map(down).collect(),
            GeneratorBase::ResNet => {
                let mut s = vec![StageSpec { out_channels: w, kernel: 3, stride: 1, residual: false }];
                s.extend((1..=self.depth).map(down));
                let c = level_width(w, self.depth);
                s.push(StageSpec { out_channels: c, kernel: 3, stride: 1, residual: true });
                s
            }
        }
    }

    pub fn num_sites(&self) -> usize {
        self.stages().len()
    }

    /// Spatial dims must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::InvalidDims(format!(
                "spatial dims {h}x{w} must be positive multiples of {d} for depth {}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderStage {
    /// Transposed when the stage doubles resolution.
    conv: Conv2dLayer,
    /// Encoder feature concatenated after this stage.
    skip: Option<usize>,
}

/// Encoder pair plus decoder, wired according to a [`SchemeConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub scheme: SchemeConfig,
    pub encoder: BranchPair,
    decoder: Vec<DecoderStage>,
    head: Conv2dLayer,
}

impl Generator {
    pub fn new(spec: &GeneratorSpec, scheme: &SchemeConfig) -> Result<Self> {
        spec.validate()?;
        let stages = spec.stages();
        let encoder = BranchPair::new(scheme, "gen", &stages, spec.in_channels, spec.guide_channels)?;
        let fc = if scheme.scheme == Scheme::FeatureConcat { 2 } else { 1 };
        let last = stages.len() - 1;
        let mut cx = stages[last].out_channels * fc;
        let mut decoder = Vec::new();
        let mut push = |cin: usize, cout: usize, upsample: bool, skip: Option<usize>| {
            let name = format!("gen.dec.{}", decoder.len());
            let conv = if upsample { Conv2dLayer::up4(name, cin, cout) } else { Conv2dLayer::same3(name, cin, cout) };
            decoder.push(DecoderStage { conv: conv.without_bias(), skip });
        };
        match spec.base {
            GeneratorBase::UNet => {
                for l in (0..last).rev() {
                    let c = stages[l].out_channels;
                    push(cx, c, true, Some(l));
                    cx = 2 * c;
                }
            }
            GeneratorBase::ResNet => {
                let c = stages[last].out_channels;
                push(cx, c, false, None);
                cx = c;
                for l in (1..=spec.depth).rev() {
                    let c = stages[l - 1].out_channels;
                    push(cx, c, true, None);
                    cx = c;
                }
            }
        }
        let head = match spec.base {
            GeneratorBase::UNet => Conv2dLayer::up4("gen.head", cx, spec.out_channels),
            GeneratorBase::ResNet => Conv2dLayer::same3("gen.head", cx, spec.out_channels),
        };
        Ok(Self { spec: *spec, scheme: *scheme, encoder, decoder, head })
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2dLayer> {
        self.encoder
            .convs()
            .chain(self.decoder.iter().map(|d| &d.conv))
            .chain(std::iter::once(&self.head))
    }

    pub fn head(&self) -> &Conv2dLayer {
        &self.head
    }

    pub fn init<T: Element, R: rand::Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.encoder.init(store, rng);
        for d in &self.decoder {
            d.conv.init(store, rng);
        }
        self.head.init(store, rng);
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: Params<'_, T>, input: NodeId, guide: NodeId) -> Result<NodeId> {
        let (si, sg) = (g.shape(input), g.shape(guide));
        if si.c() != self.spec.in_channels {
            return Err(Error::ChannelMismatch { op: "generator input", expected: self.spec.in_channels, got: si.c() });
        }
        if sg.c() != self.spec.guide_channels {
            return Err(Error::ChannelMismatch { op: "generator guide", expected: self.spec.guide_channels, got: sg.c() });
        }
        self.spec.check_dims(si.h(), si.w())?;
        let enc = self.encoder.forward(g, p, input, guide)?;
        let mut x = *enc.input_features.last().expect("at least one stage");
        if let Some(gb) = enc.guide_bottleneck {
            x = g.concat(&[x, gb])?;
        }
        for d in &self.decoder {
            x = d.conv.forward(g, p, x)?;
            x = g.instance_norm(x)?;
            x = g.relu(x)?;
            if let Some(l) = d.skip {
                x = g.concat(&[x, enc.input_features[l]])?;
            }
        }
        let mut out = self.head.forward(g, p, x)?;
        if self.spec.residual_input {
            let skip = if self.spec.in_channels == self.spec.out_channels {
                input
            } else {
                let t = g.value(input).channels(0, self.spec.out_channels)?;
                g.input(t)
            };
            out = g.add(out, skip)?;
        }
        match self.spec.head {
            OutputHead::Linear => Ok(out),
            OutputHead::Tanh => g.tanh(out),
        }
    }

    /// Evaluates the generator without tracking parameter gradients.
    pub fn predict<T: Element>(&self, store: &ParamStore<T>, input: &Tensor<T>, guide: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let i = g.input(input.clone());
        let gd = g.input(guide.clone());
        let out = self.forward(&mut g, Params::frozen(store), i, gd)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DiscriminatorSpec {
    /// Number of stride-2 4x4 conv layers.
    pub layers: usize,
    pub base_width: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self { layers: 3, base_width: 16 }
    }
}

/// Patch discriminator over `(input, guide, candidate)` concatenated along
/// channels. Emits one logit per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    in_channels: usize,
    layers: Vec<Conv2dLayer>,
    out: Conv2dLayer,
}

impl Discriminator {
    pub fn new(spec: &DiscriminatorSpec, gen: &GeneratorSpec) -> Result<Self> {
        if spec.layers == 0 || spec.base_width == 0 {
            return Err(Error::Config("discriminator needs at least one layer and positive width".into()));
        }
        let in_channels = gen.in_channels + gen.guide_channels + gen.out_channels;
        let mut cin = in_channels;
        let layers = (0..spec.layers)
            .map(|i| {
                let c = level_width(spec.base_width, i);
                let l = Conv2dLayer::new(format!("disc.{i}"), cin, c, 4, 2, 1);
                let l = if i > 0 { l.without_bias() } else { l };
                cin = c;
                l
            })
            .collect();
        let out = Conv2dLayer::same3("disc.out", cin, 1);
        Ok(Self { spec: *spec, in_channels, layers, out })
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2dLayer> {
        self.layers.iter().chain(std::iter::once(&self.out))
    }

    pub fn init<T: Element, R: rand::Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for c in self.convs() {
            c.init(store, rng);
        }
    }

    /// Logit map for a candidate output given its conditioning.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: Params<'_, T>,
        input: NodeId,
        guide: NodeId,
        candidate: NodeId,
    ) -> Result<NodeId> {
        let mut x = g.concat(&[input, guide, candidate])?;
        let c = g.shape(x).c();
        if c != self.in_channels {
            return Err(Error::ChannelMismatch { op: "discriminator input", expected: self.in_channels, got: c });
        }
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, p, x)?;
            if i > 0 {
                x = g.instance_norm(x)?;
            }
            x = g.leaky_relu(x, LEAKY_SLOPE)?;
        }
        self.out.forward(g, p, x)
    }
}

/// Models and their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T: Element> {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub gen_params: ParamStore<T>,
    pub disc_params: ParamStore<T>,
}

impl<T: Element> ModelGraph<T> {
    pub fn init(generator: Generator, discriminator: Discriminator, seed: u64) -> Result<Self> {
        let mut gen_params = ParamStore::new();
        let mut disc_params = ParamStore::new();
        generator.init(&mut gen_params, &mut ChaCha8Rng::seed_from_u64(seed));
        discriminator.init(&mut disc_params, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xD15C_D15C_D15C_D15C));
        Ok(Self { generator, discriminator, gen_params, disc_params })
    }

    pub fn predict(&self, input: &Tensor<T>, guide: &Tensor<T>) -> Result<Tensor<T>> {
        self.generator.predict(&self.gen_params, input, guide)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::build_scheme;
    use crate::nn::AffineVariant;
    use crate::tensor::Shape;
    use rand::Rng;

    fn small(base: GeneratorBase) -> GeneratorSpec {
        GeneratorSpec { base, depth: 2, base_width: 4, ..GeneratorSpec::default() }
    }

    fn inputs(n: usize, h: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(Shape::new(n, 1, h, h), |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(Shape::new(n, 3, h, h), |_| rng.gen_range(-1.0..1.0));
        (a, b)
    }

    #[test]
    fn output_shapes_for_every_scheme_and_base() {
        for base in [GeneratorBase::UNet, GeneratorBase::ResNet] {
            for scheme in Scheme::ALL {
                let cfg = SchemeConfig { scheme, ft_layer_count: 2, ..SchemeConfig::default() };
                let m = build_scheme::<f32>(&cfg, &small(base), &DiscriminatorSpec { layers: 2, base_width: 4 }, 1).unwrap();
                let (i, gd) = inputs(2, 16, 3);
                let out = m.predict(&i, &gd).unwrap();
                assert_eq!(out.shape(), Shape::new(2, 1, 16, 16), "{base} {scheme}");
                let mut g = Graph::new();
                let (a, b, c) = (g.input(i.clone()), g.input(gd.clone()), g.input(out.clone()));
                let d = m.discriminator.forward(&mut g, Params::frozen(&m.disc_params), a, b, c).unwrap();
                assert_eq!(g.shape(d), Shape::new(2, 1, 4, 4));
            }
        }
    }

    #[test]
    fn site_counts() {
        assert_eq!(small(GeneratorBase::UNet).num_sites(), 2);
        assert_eq!(small(GeneratorBase::ResNet).num_sites(), 4);
        assert_eq!(GeneratorSpec::default().num_sites(), 4);
    }

    #[test]
    fn input_concat_first_conv_sees_both() {
        let cfg = SchemeConfig::with_scheme(Scheme::InputConcat);
        let g = Generator::new(&GeneratorSpec::default(), &cfg).unwrap();
        assert_eq!(g.encoder.input_encoder[0].conv.cin, 4);
        assert!(g.encoder.guide_encoder.is_none());
    }

    #[test]
    fn rejects_bad_dims_and_channels() {
        let m = build_scheme::<f32>(&SchemeConfig::default(), &GeneratorSpec::default(), &DiscriminatorSpec::default(), 0).unwrap();
        let (i, gd) = inputs(1, 24, 0);
        assert!(matches!(m.predict(&i, &gd), Err(Error::InvalidDims(_))));
        let (i, gd) = inputs(1, 32, 0);
        let bad_guide = gd.channels(0, 2).unwrap();
        assert!(matches!(m.predict(&i, &bad_guide), Err(Error::ChannelMismatch { .. })));
        let small_guide = Tensor::<f32>::zeros(Shape::new(1, 3, 16, 16));
        assert!(m.predict(&i, &small_guide).is_err());
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let cfg = SchemeConfig { ft_layer_count: 2, ..SchemeConfig::default() };
        let mut m = build_scheme::<f32>(&cfg, &small(GeneratorBase::UNet), &DiscriminatorSpec::default(), 2).unwrap();
        let head = m.generator.head().clone();
        for name in [head.weight_name(), head.bias_name()] {
            m.gen_params.get_mut(&name).unwrap().data_mut().fill(0.0);
        }
        let (i, gd) = inputs(1, 16, 1);
        assert!(m.predict(&i, &gd).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_variants_build() {
        for affine in [AffineVariant::FtSpatial, AffineVariant::FilmChannelwise, AffineVariant::AdaIn] {
            let cfg = SchemeConfig { affine, ft_layer_count: 2, ..SchemeConfig::default() };
            let m = build_scheme::<f32>(&cfg, &small(GeneratorBase::UNet), &DiscriminatorSpec::default(), 1).unwrap();
            let (i, gd) = inputs(1, 16, 1);
            assert!(m.predict(&i, &gd).unwrap().all_finite());
        }
    }
}
