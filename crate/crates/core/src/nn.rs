//! Layers built on [`Graph`]: convolution, the feature transformation layer
//! and its parameter generator, and the channelwise affine baselines.
//!
//! Layers are descriptors. Their tensors live in a [`ParamStore`] under
//! `<layer name>.weight` / `<layer name>.bias`, and each forward pass binds
//! them onto the graph through [`Params`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{conv_out_dims, Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::{Element, Shape};

/// Width of the hidden layer inside every [`ParamGenerator`].
pub const PG_BOTTLENECK: usize = 100;
/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;
/// The gamma head starts at gamma = 1 so a fresh FT layer behaves like plain
/// instance normalization.
pub const GAMMA_BIAS_INIT: f64 = 1.0;

/// Binds stored tensors onto a graph, either as trainable parameters or as
/// frozen named constants.
#[derive(Clone, Copy)]
pub struct Params<'a, T: Element> {
    store: &'a ParamStore<T>,
    trainable: bool,
}

impl<'a, T: Element> Params<'a, T> {
    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: false }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn leaf(&self, g: &mut Graph<T>, name: &str) -> Result<NodeId> {
        let t = self.store.get(name)?;
        Ok(if self.trainable { g.param(name, t) } else { g.frozen(name, t) })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    /// Transposed convolution; the weight is then `(Cin, Cout, k, k)`.
    pub transposed: bool,
}

impl Conv2dLayer {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { name: name.into(), cin, cout, kernel, stride, pad, bias: true, transposed: false }
    }

    /// 4x4 transposed conv, stride 2, pad 1: doubles spatial dims.
    pub fn up4(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self { transposed: true, ..Self::new(name, cin, cout, 4, 2, 1) }
    }

    /// Drops the bias, for convs whose output is instance-normalized (the
    /// normalization would cancel it).
    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// 3x3, stride 1, pad 1: keeps spatial dims.
    pub fn same3(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 3, 1, 1)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Shape {
        if self.transposed {
            Shape::new(self.cin, self.cout, self.kernel, self.kernel)
        } else {
            Shape::new(self.cout, self.cin, self.kernel, self.kernel)
        }
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.cout, 1, 1)
    }

    pub fn num_params(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + if self.bias { self.cout } else { 0 }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.transposed {
            let side = |n: usize| ((n.max(1) - 1) * self.stride + self.kernel).checked_sub(2 * self.pad).filter(|&v| v > 0);
            return match (side(h), side(w)) {
                (Some(a), Some(b)) if h > 0 && w > 0 => Ok((a, b)),
                _ => Err(Error::InvalidDims(format!("{}: no output for {h}x{w} input", self.name))),
            };
        }
        conv_out_dims(h, w, self.kernel, self.kernel, self.stride, self.pad)
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.init_truncated_normal(&self.weight_name(), self.weight_shape(), INIT_STD, rng);
        if self.bias {
            store.init_constant(&self.bias_name(), self.bias_shape(), 0.0);
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: Params<'_, T>, x: NodeId) -> Result<NodeId> {
        let c = g.shape(x).c();
        if c != self.cin {
            return Err(Error::ChannelMismatch { op: "conv2d", expected: self.cin, got: c });
        }
        let w = p.leaf(g, &self.weight_name())?;
        let b = if self.bias { Some(p.leaf(g, &self.bias_name())?) } else { None };
        if self.transposed {
            g.conv_transpose2d(x, w, b, self.stride, self.pad)
        } else {
            g.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

/// Produces spatially varying scale and shift tensors from one branch's
/// features: a shared 3x3 conv into a 100-channel bottleneck, a leaky ReLU,
/// then parallel 3x3 heads for gamma and beta.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGenerator {
    pub conv_a: Conv2dLayer,
    pub head_gamma: Conv2dLayer,
    pub head_beta: Conv2dLayer,
}

impl ParamGenerator {
    pub fn new(prefix: &str, source_channels: usize, target_channels: usize) -> Self {
        Self {
            conv_a: Conv2dLayer::same3(format!("{prefix}.conv_a"), source_channels, PG_BOTTLENECK),
            head_gamma: Conv2dLayer::same3(format!("{prefix}.head_gamma"), PG_BOTTLENECK, target_channels),
            head_beta: Conv2dLayer::same3(format!("{prefix}.head_beta"), PG_BOTTLENECK, target_channels),
        }
    }

    pub fn source_channels(&self) -> usize {
        self.conv_a.cin
    }

    pub fn target_channels(&self) -> usize {
        self.head_gamma.cout
    }

    pub fn num_params(&self) -> usize {
        self.conv_a.num_params() + self.head_gamma.num_params() + self.head_beta.num_params()
    }

    pub fn layers(&self) -> [&Conv2dLayer; 3] {
        [&self.conv_a, &self.head_gamma, &self.head_beta]
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for l in self.layers() {
            l.init(store, rng);
        }
        store.init_constant(&self.head_gamma.bias_name(), self.head_gamma.bias_shape(), GAMMA_BIAS_INIT);
    }

    /// Overwrites every tensor with zeros: the generator then emits gamma = beta = 0.
    pub fn set_zero<T: Element>(&self, store: &mut ParamStore<T>) {
        for l in self.layers() {
            store.init_constant(&l.weight_name(), l.weight_shape(), 0.0);
            store.init_constant(&l.bias_name(), l.bias_shape(), 0.0);
        }
    }

    /// Zeros everything except the gamma bias, which becomes 1: the generator
    /// then emits gamma = 1, beta = 0 for any input.
    pub fn set_identity<T: Element>(&self, store: &mut ParamStore<T>) {
        self.set_zero(store);
        store.init_constant(&self.head_gamma.bias_name(), self.head_gamma.bias_shape(), 1.0);
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: Params<'_, T>, source: NodeId) -> Result<(NodeId, NodeId)> {
        let h = self.conv_a.forward(g, p, source)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let gamma = self.head_gamma.forward(g, p, h)?;
        let beta = self.head_beta.forward(g, p, h)?;
        Ok((gamma, beta))
    }
}

pub fn param_generate<T: Element>(
    g: &mut Graph<T>,
    p: Params<'_, T>,
    guide_feat: NodeId,
    pg: &ParamGenerator,
) -> Result<(NodeId, NodeId)> {
    pg.forward(g, p, guide_feat)
}

/// `gamma * instance_norm(f) + beta` with tensor-valued gamma and beta of the
/// same dims as `f`.
pub fn ft_modulate<T: Element>(g: &mut Graph<T>, f: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
    let fs = g.shape(f);
    for (what, id) in [("ft_modulate gamma", gamma), ("ft_modulate beta", beta)] {
        let s = g.shape(id);
        if s != fs {
            return Err(Error::ShapeMismatch { op: what, lhs: fs, rhs: s });
        }
    }
    let normalized = g.instance_norm(f)?;
    let scaled = g.mul(normalized, gamma)?;
    g.add(scaled, beta)
}

/// Feature transformation layer: instance normalization followed by an
/// affine map whose parameters come from another branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FtLayer {
    pub pg: ParamGenerator,
}

impl FtLayer {
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: Params<'_, T>, f: NodeId, guide_feat: NodeId) -> Result<NodeId> {
        let (gamma, beta) = param_generate(g, p, guide_feat, &self.pg)?;
        ft_modulate(g, f, gamma, beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AffineVariant {
    /// Spatially varying tensors from a parameter generator.
    FtSpatial,
    /// Channelwise vectors: a parameter generator followed by global average pooling.
    FilmChannelwise,
    /// Channelwise statistics of the source features, nothing learned.
    AdaIn,
}

impl AffineVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AffineVariant::FtSpatial => "ft",
            AffineVariant::FilmChannelwise => "cin",
            AffineVariant::AdaIn => "adain",
        }
    }
}

impl fmt::Display for AffineVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AffineVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ft" => Ok(AffineVariant::FtSpatial),
            "cin" | "film" => Ok(AffineVariant::FilmChannelwise),
            "adain" => Ok(AffineVariant::AdaIn),
            other => Err(Error::Config(format!("unknown affine variant `{other}` (ft, cin, adain)"))),
        }
    }
}

/// Source of channelwise affine parameters.
#[derive(Clone, Copy, Debug)]
pub enum Channelwise<'a> {
    Cin(&'a ParamGenerator),
    /// `swapped` uses the mean as the scale and the std as the shift.
    AdaIn { swapped: bool },
}

/// `gamma_c * instance_norm(f) + beta_c` with `(N,C,1,1)` parameters broadcast
/// over space.
pub fn channelwise_modulate<T: Element>(
    g: &mut Graph<T>,
    p: Params<'_, T>,
    f: NodeId,
    variant: Channelwise<'_>,
    guide_feat: NodeId,
) -> Result<NodeId> {
    let (gamma, beta) = match variant {
        Channelwise::Cin(pg) => {
            let (gm, bt) = pg.forward(g, p, guide_feat)?;
            (g.spatial_mean(gm)?, g.spatial_mean(bt)?)
        }
        Channelwise::AdaIn { swapped } => {
            let (fc, gc) = (g.shape(f).c(), g.shape(guide_feat).c());
            if fc != gc {
                return Err(Error::ChannelMismatch { op: "adain", expected: fc, got: gc });
            }
            let mean = g.spatial_mean(guide_feat)?;
            let std = g.spatial_std(guide_feat)?;
            if swapped {
                (mean, std)
            } else {
                (std, mean)
            }
        }
    };
    let fs = g.shape(f);
    let want = Shape::new(fs.n(), fs.c(), 1, 1);
    if g.shape(gamma) != want {
        return Err(Error::ShapeMismatch { op: "channelwise_modulate", lhs: want, rhs: g.shape(gamma) });
    }
    let normalized = g.instance_norm(f)?;
    let scaled = g.mul(normalized, gamma)?;
    g.add(scaled, beta)
}

/// One direction of modulation at a normalization site.
#[derive(Clone, Debug, PartialEq)]
pub enum Modulator {
    Ft(ParamGenerator),
    Cin(ParamGenerator),
    AdaIn { swapped: bool },
}

impl Modulator {
    pub fn new(variant: AffineVariant, prefix: &str, source_channels: usize, target_channels: usize, adain_swapped: bool) -> Self {
        match variant {
            AffineVariant::FtSpatial => Modulator::Ft(ParamGenerator::new(prefix, source_channels, target_channels)),
            AffineVariant::FilmChannelwise => Modulator::Cin(ParamGenerator::new(prefix, source_channels, target_channels)),
            AffineVariant::AdaIn => Modulator::AdaIn { swapped: adain_swapped },
        }
    }

    pub fn param_generator(&self) -> Option<&ParamGenerator> {
        match self {
            Modulator::Ft(pg) | Modulator::Cin(pg) => Some(pg),
            Modulator::AdaIn { .. } => None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_generator().map_or(0, ParamGenerator::num_params)
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        if let Some(pg) = self.param_generator() {
            pg.init(store, rng);
        }
    }

    /// Modulates `target` using parameters derived from `source`.
    pub fn apply<T: Element>(&self, g: &mut Graph<T>, p: Params<'_, T>, target: NodeId, source: NodeId) -> Result<NodeId> {
        match self {
            Modulator::Ft(pg) => FtLayer { pg: pg.clone() }.forward(g, p, target, source),
            Modulator::Cin(pg) => channelwise_modulate(g, p, target, Channelwise::Cin(pg), source),
            Modulator::AdaIn { swapped } => {
                channelwise_modulate(g, p, target, Channelwise::AdaIn { swapped: *swapped }, source)
            }
        }
    }
}
