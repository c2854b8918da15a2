//! Wiring of the input and guidance branches.
//!
//! Four schemes are supported:
//!
//! * `input_concat` – the guide is concatenated to the input and a single
//!   encoder processes both.
//! * `feature_concat` – two independent encoders; their bottleneck features
//!   are concatenated before decoding.
//! * `uft` – two encoders; at each chosen normalization site the guide
//!   features produce the affine parameters for the input features.
//! * `bft` – as `uft`, and at the same time the input features produce the
//!   affine parameters for the guide features. Both directions read the
//!   features of the current site before either is updated.
//!
//! Sites that carry no modulation use plain instance normalization in both
//! branches.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::models::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ModelGraph};
use crate::nn::{AffineVariant, Conv2dLayer, Modulator, Params, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    InputConcat,
    FeatureConcat,
    UniFt,
    BiFt,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::InputConcat, Scheme::FeatureConcat, Scheme::UniFt, Scheme::BiFt];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::InputConcat => "input_concat",
            Scheme::FeatureConcat => "feature_concat",
            Scheme::UniFt => "uft",
            Scheme::BiFt => "bft",
        }
    }

    pub fn is_modulated(self) -> bool {
        matches!(self, Scheme::UniFt | Scheme::BiFt)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}` (input_concat, feature_concat, uft, bft)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FtPlacement {
    /// The deepest `ft_layer_count` encoder sites.
    DeepestK,
    /// Only the last encoder site, whatever `ft_layer_count` says.
    FinalLayerOnly,
}

impl FtPlacement {
    pub fn as_str(self) -> &'static str {
        match self {
            FtPlacement::DeepestK => "deepest_k",
            FtPlacement::FinalLayerOnly => "final_layer_only",
        }
    }
}

impl FromStr for FtPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deepest_k" => Ok(FtPlacement::DeepestK),
            "final_layer_only" => Ok(FtPlacement::FinalLayerOnly),
            other => Err(Error::Config(format!("unknown placement `{other}` (deepest_k, final_layer_only)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub affine: AffineVariant,
    pub ft_layer_count: usize,
    pub ft_placement: FtPlacement,
    /// AdaIN with the mean as the scale and the std as the shift.
    pub adain_swapped: bool,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::BiFt,
            affine: AffineVariant::FtSpatial,
            ft_layer_count: 4,
            ft_placement: FtPlacement::DeepestK,
            adain_swapped: false,
        }
    }
}

impl SchemeConfig {
    pub fn with_scheme(scheme: Scheme) -> Self {
        Self { scheme, ..Self::default() }
    }

    pub fn validate(&self, sites: usize) -> Result<()> {
        if self.scheme.is_modulated()
            && self.ft_placement == FtPlacement::DeepestK
            && !(1..=sites).contains(&self.ft_layer_count)
        {
            return Err(Error::Config(format!(
                "ft_layer_count {} outside 1..={sites} encoder normalization sites",
                self.ft_layer_count
            )));
        }
        Ok(())
    }

    /// Flags, per encoder site, whether that site is modulated.
    pub fn ft_sites(&self, sites: usize) -> Vec<bool> {
        if !self.scheme.is_modulated() {
            return vec![false; sites];
        }
        let k = match self.ft_placement {
            FtPlacement::DeepestK => self.ft_layer_count.min(sites),
            FtPlacement::FinalLayerOnly => 1,
        };
        (0..sites).map(|i| i + k >= sites).collect()
    }

    /// Number of modulated sites actually used.
    pub fn effective_ft_layers(&self, sites: usize) -> usize {
        self.ft_sites(sites).iter().filter(|&&b| b).count()
    }
}

/// One encoder stage: conv, normalization site, leaky ReLU, with an optional
/// identity shortcut around the whole stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage {
    pub conv: Conv2dLayer,
    pub residual: bool,
}

/// Stage layout an architecture asks the branch pair to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub residual: bool,
}

/// Modulators of one bi-directional site.
#[derive(Clone, Debug, PartialEq)]
pub struct FtSite {
    pub guide_to_input: Modulator,
    pub input_to_guide: Modulator,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SiteModulators {
    pub guide_to_input: Option<Modulator>,
    pub input_to_guide: Option<Modulator>,
}

/// Input and guidance encoders with their per-site modulators.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchPair {
    pub scheme: Scheme,
    pub input_encoder: Vec<EncoderStage>,
    pub guide_encoder: Option<Vec<EncoderStage>>,
    pub sites: Vec<SiteModulators>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Post-activation input-branch features of every stage.
    pub input_features: Vec<NodeId>,
    /// Guide-branch output of the last stage, when a consumer exists.
    pub guide_bottleneck: Option<NodeId>,
}

/// Simultaneous bi-directional modulation at one site: each branch is
/// modulated with parameters computed from the other branch's un-modulated
/// features.
pub fn bft_layer_step<T: Element>(
    g: &mut Graph<T>,
    p: Params<'_, T>,
    f_in: NodeId,
    f_guide: NodeId,
    site: &FtSite,
) -> Result<(NodeId, NodeId)> {
    let (si, sg) = (g.shape(f_in), g.shape(f_guide));
    if si.n() != sg.n() || si.h() != sg.h() || si.w() != sg.w() {
        return Err(Error::ShapeMismatch { op: "bft_layer_step", lhs: si, rhs: sg });
    }
    let new_in = site.guide_to_input.apply(g, p, f_in, f_guide)?;
    let new_guide = site.input_to_guide.apply(g, p, f_guide, f_in)?;
    Ok((new_in, new_guide))
}

impl BranchPair {
    pub fn new(
        cfg: &SchemeConfig,
        prefix: &str,
        stages: &[StageSpec],
        in_channels: usize,
        guide_channels: usize,
    ) -> Result<Self> {
        cfg.validate(stages.len())?;
        let build = |tag: &str, cin0: usize| -> Vec<EncoderStage> {
            let mut cin = cin0;
            stages
                .iter()
                .enumerate()
                .map(|(l, s)| {
                    let conv = Conv2dLayer::new(format!("{prefix}.{tag}.{l}"), cin, s.out_channels, s.kernel, s.stride, s.kernel / 2)
                        .without_bias();
                    cin = s.out_channels;
                    EncoderStage { conv, residual: s.residual }
                })
                .collect()
        };
        let (input_encoder, guide_encoder) = match cfg.scheme {
            Scheme::InputConcat => (build("enc", in_channels + guide_channels), None),
            _ => (build("enc_in", in_channels), Some(build("enc_guide", guide_channels))),
        };
        let ft = cfg.ft_sites(stages.len());
        let last = stages.len() - 1;
        let sites = stages
            .iter()
            .enumerate()
            .map(|(l, s)| {
                let c = s.out_channels;
                let make = |dir: &str| Modulator::new(cfg.affine, &format!("{prefix}.site{l}.{dir}"), c, c, cfg.adain_swapped);
                match (ft[l], cfg.scheme) {
                    (true, Scheme::UniFt) => SiteModulators { guide_to_input: Some(make("g2i")), input_to_guide: None },
                    // the guide branch ends at the last site, so nothing would
                    // read an input-to-guide modulation there
                    (true, Scheme::BiFt) if l == last => {
                        SiteModulators { guide_to_input: Some(make("g2i")), input_to_guide: None }
                    }
                    (true, Scheme::BiFt) => SiteModulators { guide_to_input: Some(make("g2i")), input_to_guide: Some(make("i2g")) },
                    _ => SiteModulators::default(),
                }
            })
            .collect();
        Ok(Self { scheme: cfg.scheme, input_encoder, guide_encoder, sites })
    }

    pub fn num_sites(&self) -> usize {
        self.input_encoder.len()
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2dLayer> {
        self.input_encoder
            .iter()
            .chain(self.guide_encoder.iter().flatten())
            .map(|s| &s.conv)
    }

    pub fn modulators(&self) -> impl Iterator<Item = &Modulator> {
        self.sites
            .iter()
            .flat_map(|s| s.guide_to_input.iter().chain(s.input_to_guide.iter()))
    }

    pub fn init<T: Element, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for c in self.convs() {
            c.init(store, rng);
        }
        for m in self.modulators() {
            m.init(store, rng);
        }
    }

    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: Params<'_, T>,
        input: NodeId,
        guide: NodeId,
    ) -> Result<EncoderOutput> {
        let (si, sg) = (g.shape(input), g.shape(guide));
        if si.n() != sg.n() || si.h() != sg.h() || si.w() != sg.w() {
            return Err(Error::ShapeMismatch { op: "encoder input/guide", lhs: si, rhs: sg });
        }
        let need_guide_out = self.scheme == Scheme::FeatureConcat;
        let mut xi = match self.guide_encoder {
            None => g.concat(&[input, guide])?,
            Some(_) => input,
        };
        let mut xg = guide;
        let mut input_features = Vec::with_capacity(self.input_encoder.len());
        let last = self.input_encoder.len() - 1;
        for (l, stage) in self.input_encoder.iter().enumerate() {
            let pre_i = stage.conv.forward(g, p, xi)?;
            let pre_g = match &self.guide_encoder {
                Some(enc) => Some(enc[l].conv.forward(g, p, xg)?),
                None => None,
            };
            if let Some(pg) = pre_g {
                let (a, b) = (g.shape(pre_i), g.shape(pg));
                if a.h() != b.h() || a.w() != b.w() {
                    return Err(Error::ShapeMismatch { op: "branch spatial dims", lhs: a, rhs: b });
                }
            }
            let guide_continues = pre_g.is_some() && (l < last || need_guide_out);
            let site = &self.sites[l];
            let (norm_i, norm_g) = match (pre_g, &site.guide_to_input, &site.input_to_guide) {
                (Some(pg), Some(g2i), Some(i2g)) => {
                    let ft = FtSite { guide_to_input: g2i.clone(), input_to_guide: i2g.clone() };
                    let (a, b) = bft_layer_step(g, p, pre_i, pg, &ft)?;
                    (a, Some(b))
                }
                (Some(pg), Some(g2i), None) => {
                    let a = g2i.apply(g, p, pre_i, pg)?;
                    let b = if guide_continues { Some(g.instance_norm(pg)?) } else { None };
                    (a, b)
                }
                (pg, _, _) => {
                    let a = g.instance_norm(pre_i)?;
                    let b = match pg {
                        Some(pg) if guide_continues => Some(g.instance_norm(pg)?),
                        _ => None,
                    };
                    (a, b)
                }
            };
            xi = activate(g, norm_i, stage.residual.then_some(xi))?;
            input_features.push(xi);
            if let (Some(ng), Some(enc)) = (norm_g, &self.guide_encoder) {
                if guide_continues {
                    xg = activate(g, ng, enc[l].residual.then_some(xg))?;
                }
            }
        }
        Ok(EncoderOutput {
            input_features,
            guide_bottleneck: need_guide_out.then_some(xg),
        })
    }
}

fn activate<T: Element>(g: &mut Graph<T>, x: NodeId, shortcut: Option<NodeId>) -> Result<NodeId> {
    let a = g.leaky_relu(x, LEAKY_SLOPE)?;
    match shortcut {
        Some(s) => g.add(s, a),
        None => Ok(a),
    }
}

/// Builds and initializes a generator/discriminator pair for `cfg`.
/// Initial parameters are a pure function of `(cfg, arch, disc, seed)`.
pub fn build_scheme<T: Element>(
    cfg: &SchemeConfig,
    arch: &GeneratorSpec,
    disc: &DiscriminatorSpec,
    seed: u64,
) -> Result<ModelGraph<T>> {
    let generator = Generator::new(arch, cfg)?;
    let discriminator = Discriminator::new(disc, arch)?;
    ModelGraph::init(generator, discriminator, seed)
}
