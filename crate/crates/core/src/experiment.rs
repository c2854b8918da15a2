//! Experiment drivers shared by the CLI and the acceptance tests: the
//! gradient-check suite, the scheme ablation harness and image previews.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{bft_layer_step, build_scheme, FtPlacement, FtSite, Scheme, SchemeConfig};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{check_all, worst, Coverage, FdReport};
use crate::graph::{BackwardFault, Graph, NodeId};
use crate::metrics::median;
use crate::models::{DiscriminatorSpec, GeneratorBase, GeneratorSpec, ModelGraph};
use crate::nn::{AffineVariant, Modulator, ParamGenerator, Params};
use crate::params::ParamStore;
use crate::synth::{Dataset, Pair};
use crate::tensor::{Shape, Tensor};
use crate::training::{evaluate, train, CheckpointPolicy, MetricsRow, TrainState};

/// Every differentiable primitive of the graph.
pub const OP_NAMES: [&str; 19] = [
    "conv2d",
    "conv_transpose2d",
    "instance_norm",
    "spatial_mean",
    "spatial_std",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "abs",
    "upsample_nearest",
    "concat",
    "sum",
    "mean",
    "bce_with_logits",
];

pub const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub worst: f64,
    pub worst_param: String,
    pub checked: usize,
    pub skipped: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.worst < GRADCHECK_TOL
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>>;

struct Case {
    name: String,
    store: ParamStore<f64>,
    eps: f64,
    coverage: Coverage,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values in `±[0.2, 1)`, away from the kinks of relu/abs.
fn off_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Random projection `sum(out * R)` turning any output into a scalar loss.
fn project(g: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, g.shape(out), -1.0, 1.0);
    let r = g.input(r);
    let m = g.mul(out, r)?;
    g.sum(m)
}

fn unary(name: &str, rng: &mut ChaCha8Rng, x: Tensor<f64>, op: fn(&mut Graph<f64>, NodeId) -> Result<NodeId>) -> Case {
    let mut store = ParamStore::new();
    store.insert("x", x);
    let seed = rng.gen();
    Case {
        name: name.to_string(),
        store,
        eps: 1e-5,
        coverage: Coverage::All,
        build: Box::new(move |g, s| {
            let x = Params::trainable(s).leaf(g, "x")?;
            let y = op(g, x)?;
            project(g, y, seed)
        }),
    }
}

fn binary(name: &str, rng: &mut ChaCha8Rng, a: Shape, b: Shape, op: fn(&mut Graph<f64>, NodeId, NodeId) -> Result<NodeId>) -> Case {
    let mut store = ParamStore::new();
    store.insert("a", uniform(rng, a, -1.0, 1.0));
    store.insert("b", uniform(rng, b, -1.0, 1.0));
    let seed = rng.gen();
    Case {
        name: name.to_string(),
        store,
        eps: 1e-5,
        coverage: Coverage::All,
        build: Box::new(move |g, s| {
            let p = Params::trainable(s);
            let (a, b) = (p.leaf(g, "a")?, p.leaf(g, "b")?);
            let y = op(g, a, b)?;
            project(g, y, seed)
        }),
    }
}

fn perturbed(rng: &mut ChaCha8Rng, store: &mut ParamStore<f64>, amount: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

/// Redraws every tensor at fan-in scale so activations, and hence gradients,
/// stay away from the roundoff floor of the difference quotient.
fn redrawn(rng: &mut ChaCha8Rng, store: &mut ParamStore<f64>) {
    for (_, t) in store.iter_mut() {
        let sh = t.shape();
        let a = if sh.n() == 1 { 0.5 } else { (3.0 / (sh.c() * sh.h() * sh.w()) as f64).sqrt() };
        for v in t.data_mut() {
            *v = rng.gen_range(-a..a);
        }
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let s4 = Shape::new(2, 3, 4, 4);
    let mut cases = Vec::new();

    for (name, stride, kernel) in [("conv2d", 1usize, 3usize), ("conv2d/stride2", 2, 4)] {
        let mut store = ParamStore::new();
        store.insert("x", uniform(rng, Shape::new(2, 3, 6, 6), -1.0, 1.0));
        store.insert("w", uniform(rng, Shape::new(4, 3, kernel, kernel), -0.5, 0.5));
        store.insert("b", uniform(rng, Shape::new(1, 4, 1, 1), -0.5, 0.5));
        let seed = rng.gen();
        cases.push(Case {
            name: name.into(),
            store,
            eps: 1e-5,
            coverage: Coverage::All,
            build: Box::new(move |g, s| {
                let p = Params::trainable(s);
                let (x, w, b) = (p.leaf(g, "x")?, p.leaf(g, "w")?, p.leaf(g, "b")?);
                let y = g.conv2d(x, w, Some(b), stride, 1)?;
                project(g, y, seed)
            }),
        });
    }
    for (name, stride, kernel, pad) in [("conv_transpose2d", 2usize, 4usize, 1usize), ("conv_transpose2d/stride1", 1, 3, 0)] {
        let mut store = ParamStore::new();
        store.insert("x", uniform(rng, Shape::new(2, 3, 4, 4), -1.0, 1.0));
        store.insert("w", uniform(rng, Shape::new(3, 2, kernel, kernel), -0.5, 0.5));
        store.insert("b", uniform(rng, Shape::new(1, 2, 1, 1), -0.5, 0.5));
        let seed = rng.gen();
        cases.push(Case {
            name: name.into(),
            store,
            eps: 1e-5,
            coverage: Coverage::All,
            build: Box::new(move |g, s| {
                let p = Params::trainable(s);
                let (x, w, b) = (p.leaf(g, "x")?, p.leaf(g, "w")?, p.leaf(g, "b")?);
                let y = g.conv_transpose2d(x, w, Some(b), stride, pad)?;
                project(g, y, seed)
            }),
        });
    }
    let x = uniform(rng, Shape::new(2, 3, 5, 5), -1.0, 1.0);
    cases.push(unary("instance_norm", rng, x, |g, x| g.instance_norm(x)));
    let x = uniform(rng, s4, -1.0, 1.0);
    cases.push(unary("spatial_mean", rng, x, |g, x| g.spatial_mean(x)));
    let x = uniform(rng, s4, -1.0, 1.0);
    cases.push(unary("spatial_std", rng, x, |g, x| g.spatial_std(x)));
    cases.push(binary("add", rng, s4, Shape::new(1, 3, 1, 1), |g, a, b| g.add(a, b)));
    cases.push(binary("sub", rng, Shape::new(2, 1, 4, 4), s4, |g, a, b| g.sub(a, b)));
    cases.push(binary("mul", rng, s4, Shape::new(2, 3, 1, 1), |g, a, b| g.mul(a, b)));
    let x = uniform(rng, s4, -1.0, 1.0);
    cases.push(unary("scale", rng, x, |g, x| g.scale(x, -1.75)));
    let x = off_zero(rng, s4);
    cases.push(unary("relu", rng, x, |g, x| g.relu(x)));
    let x = off_zero(rng, s4);
    cases.push(unary("leaky_relu", rng, x, |g, x| g.leaky_relu(x, 0.2)));
    let x = uniform(rng, s4, -2.0, 2.0);
    cases.push(unary("tanh", rng, x, |g, x| g.tanh(x)));
    let x = uniform(rng, s4, -3.0, 3.0);
    cases.push(unary("sigmoid", rng, x, |g, x| g.sigmoid(x)));
    let x = off_zero(rng, s4);
    cases.push(unary("abs", rng, x, |g, x| g.abs(x)));
    let x = uniform(rng, Shape::new(2, 3, 3, 3), -1.0, 1.0);
    cases.push(unary("upsample_nearest", rng, x, |g, x| g.upsample_nearest(x, 2)));
    cases.push(binary("concat", rng, s4, Shape::new(2, 1, 4, 4), |g, a, b| g.concat(&[a, b, a])));
    let x = uniform(rng, s4, -1.0, 1.0);
    cases.push(unary("sum", rng, x, |g, x| g.sum(x)));
    let x = uniform(rng, s4, -1.0, 1.0);
    cases.push(unary("mean", rng, x, |g, x| g.mean(x)));
    let x = uniform(rng, s4, -4.0, 4.0);
    cases.push(unary("bce_with_logits", rng, x, |g, x| {
        let a = g.bce_with_logits(x, 1.0)?;
        let b = g.bce_with_logits(x, 0.0)?;
        let b = g.scale(b, 0.5)?;
        g.add(a, b)
    }));
    cases
}

/// Modules assembled from the primitives.
fn composite_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    let eps = 1e-5;
    let sample = |seed: u64| Coverage::Sample { max: 12, seed };

    let modulators: [(&str, AffineVariant); 3] =
        [("ft_modulate", AffineVariant::FtSpatial), ("cin", AffineVariant::FilmChannelwise), ("adain", AffineVariant::AdaIn)];
    for (name, variant) in modulators {
        let m = Modulator::new(variant, "m", 4, 4, false);
        let mut store = ParamStore::new();
        m.init(&mut store, rng);
        perturbed(rng, &mut store, 0.2);
        store.insert("f", uniform(rng, Shape::new(2, 4, 4, 4), -1.0, 1.0));
        store.insert("guide", uniform(rng, Shape::new(2, 4, 4, 4), -1.0, 1.0));
        let seed = rng.gen();
        cases.push(Case {
            name: name.into(),
            store,
            eps,
            coverage: sample(rng.gen()),
            build: Box::new(move |g, s| {
                let p = Params::trainable(s);
                let (f, gd) = (p.leaf(g, "f")?, p.leaf(g, "guide")?);
                let y = m.apply(g, p, f, gd)?;
                project(g, y, seed)
            }),
        });
    }

    {
        let pg = ParamGenerator::new("pg", 4, 3);
        let mut store = ParamStore::new();
        pg.init(&mut store, rng);
        perturbed(rng, &mut store, 0.2);
        store.insert("src", uniform(rng, Shape::new(2, 4, 4, 4), -1.0, 1.0));
        let seed = rng.gen();
        cases.push(Case {
            name: "param_generator".into(),
            store,
            eps,
            coverage: sample(rng.gen()),
            build: Box::new(move |g, s| {
                let p = Params::trainable(s);
                let src = p.leaf(g, "src")?;
                let (gamma, beta) = pg.forward(g, p, src)?;
                let both = g.concat(&[gamma, beta])?;
                project(g, both, seed)
            }),
        });
    }

    {
        let site = FtSite {
            guide_to_input: Modulator::Ft(ParamGenerator::new("g2i", 4, 4)),
            input_to_guide: Modulator::Ft(ParamGenerator::new("i2g", 4, 4)),
        };
        let mut store = ParamStore::new();
        site.guide_to_input.init(&mut store, rng);
        site.input_to_guide.init(&mut store, rng);
        perturbed(rng, &mut store, 0.2);
        store.insert("f_in", uniform(rng, Shape::new(2, 4, 4, 4), -1.0, 1.0));
        store.insert("f_guide", uniform(rng, Shape::new(2, 4, 4, 4), -1.0, 1.0));
        let seed = rng.gen();
        cases.push(Case {
            name: "bft_layer_step".into(),
            store,
            eps,
            coverage: sample(rng.gen()),
            build: Box::new(move |g, s| {
                let p = Params::trainable(s);
                let (a, b) = (p.leaf(g, "f_in")?, p.leaf(g, "f_guide")?);
                let (a, b) = bft_layer_step(g, p, a, b, &site)?;
                let both = g.concat(&[a, b])?;
                project(g, both, seed)
            }),
        });
    }

    let spec = GeneratorSpec { base: GeneratorBase::UNet, depth: 2, base_width: 4, residual_input: true, ..GeneratorSpec::default() };
    let dspec = DiscriminatorSpec { layers: 2, base_width: 4 };
    let input = uniform(rng, Shape::new(2, 1, 8, 8), -1.0, 1.0);
    let guide = uniform(rng, Shape::new(2, 3, 8, 8), -1.0, 1.0);
    for scheme in Scheme::ALL {
        let cfg = SchemeConfig { scheme, ft_layer_count: 2, ft_placement: FtPlacement::DeepestK, ..SchemeConfig::default() };
        let mut m: ModelGraph<f64> = build_scheme(&cfg, &spec, &dspec, rng.gen())?;
        redrawn(rng, &mut m.gen_params);
        let seed = rng.gen();
        let (i, gd) = (input.clone(), guide.clone());
        let generator = m.generator.clone();
        cases.push(Case {
            name: format!("generator/{scheme}"),
            store: m.gen_params,
            eps,
            coverage: sample(rng.gen()),
            build: Box::new(move |g, s| {
                let (a, b) = (g.input(i.clone()), g.input(gd.clone()));
                let y = generator.forward(g, Params::trainable(s), a, b)?;
                project(g, y, seed)
            }),
        });
    }
    {
        let m: ModelGraph<f64> = build_scheme(&SchemeConfig::with_scheme(Scheme::InputConcat), &spec, &dspec, rng.gen())?;
        let mut store = m.disc_params.clone();
        redrawn(rng, &mut store);
        store.insert("candidate", uniform(rng, Shape::new(2, 1, 8, 8), -1.0, 1.0));
        let (i, gd) = (input.clone(), guide.clone());
        let d = m.discriminator.clone();
        cases.push(Case {
            name: "discriminator".into(),
            store,
            eps,
            coverage: sample(rng.gen()),
            build: Box::new(move |g, s| {
                let p = Params::trainable(s);
                let (a, b) = (g.input(i.clone()), g.input(gd.clone()));
                let c = p.leaf(g, "candidate")?;
                let y = d.forward(g, p, a, b, c)?;
                let l = g.bce_with_logits(y, 1.0)?;
                let r = project(g, y, 17)?;
                g.add(l, r)
            }),
        });
    }
    Ok(cases)
}

/// Finite-difference check of every primitive and every composite module.
/// `fault` corrupts the backward pass of one primitive.
pub fn gradcheck_suite(seed: u64, fault: Option<BackwardFault>) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = op_cases(&mut rng);
    cases.extend(composite_cases(&mut rng)?);
    cases
        .into_iter()
        .map(|c| {
            let build = &c.build;
            let reports = check_all(&c.store, c.eps, c.coverage, |g, s| {
                if let Some(f) = fault {
                    g.inject_fault(f);
                }
                build(g, s)
            })?;
            let w = worst(&reports);
            let worst_param = reports
                .iter()
                .find(|r| r.max_rel_err == w)
                .map(|r| r.param.clone())
                .unwrap_or_default();
            Ok(SuiteEntry { name: c.name, worst: w, worst_param, checked: reports.iter().map(|r: &FdReport| r.checked).sum(),
                skipped: reports.iter().map(|r| r.skipped).sum(),
            })
        })
        .collect()
}

pub fn format_suite(entries: &[SuiteEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(
            s,
            "{:<26} worst_rel_err={:.3e} coords={:<5} kink_skips={:<3} {}{}",
            e.name,
            e.worst,
            e.checked,
            e.skipped,
            if e.passed() { "ok" } else { "FAIL" },
            if e.passed() { String::new() } else { format!(" (param {})", e.worst_param) }
        );
    }
    s
}

/// One cell of an ablation grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub scheme: SchemeConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellOutcome {
    Done { rmse_cm: f64, ssim: f64, rows: Vec<MetricsRow> },
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: CellOutcome,
}

/// Trains and evaluates one cell on `data`. Mean per-sample test RMSE and
/// SSIM are reported.
pub fn run_cell(base: &ExperimentConfig, data: &Dataset, cell: Cell) -> Result<(f64, f64, Vec<MetricsRow>)> {
    let mut cfg = base.clone();
    cfg.scheme = cell.scheme;
    cfg.train.seed = cell.seed;
    cfg.validate()?;
    let model = build_scheme::<f32>(&cfg.scheme, &cfg.model, &cfg.disc, cell.seed)?;
    let mut state = TrainState::new(model);
    let rows = train(&mut state, data.config.task, &data.train, &[], &cfg.train, &CheckpointPolicy::default(), |_| {})?;
    let report = evaluate(&state.model, data.config.task, &data.test)?;
    Ok((report.rmse.mean, report.ssim.mean, rows))
}

/// Number of worker threads: `BIFT_THREADS` if set, else the available
/// parallelism.
pub fn worker_count() -> usize {
    std::env::var("BIFT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs every cell, in parallel up to `workers`, and returns results in
/// cell order. A failing cell is recorded and the rest continue.
pub fn run_ablation(
    base: &ExperimentConfig,
    data: &Dataset,
    cells: &[Cell],
    workers: usize,
    on_done: &(dyn Fn(&CellResult) + Sync),
) -> Vec<CellResult> {
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<CellResult>>> = cells.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&cell) = cells.get(i) else { break };
                let outcome = match run_cell(base, data, cell) {
                    Ok((rmse_cm, ssim, rows)) => CellOutcome::Done { rmse_cm, ssim, rows },
                    Err(e) => CellOutcome::Failed(e.to_string()),
                };
                let r = CellResult { cell, outcome };
                on_done(&r);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every cell ran")).collect()
}

pub const ABLATION_HEADER: &str = "scheme,affine,ft_layers,seed,rmse_cm,ssim";
pub const SUMMARY_HEADER: &str = "scheme,affine,ft_layers,n,median_rmse_cm,median_ssim";

fn variant_key(c: &SchemeConfig, sites: usize) -> (String, String, String) {
    if c.scheme.is_modulated() {
        let layers = match c.ft_placement {
            FtPlacement::DeepestK => c.effective_ft_layers(sites).to_string(),
            FtPlacement::FinalLayerOnly => "final".to_string(),
        };
        let affine = if c.affine == AffineVariant::AdaIn && c.adain_swapped { "adain_swapped".to_string() } else { c.affine.to_string() };
        (c.scheme.to_string(), affine, layers)
    } else {
        (c.scheme.to_string(), "-".into(), "-".into())
    }
}

/// Per-cell rows sorted by `(scheme, variant, seed)`, a blank line, then the
/// per-variant medians over successful seeds.
pub fn ablation_csv(results: &[CellResult], sites: usize) -> String {
    let mut sorted: Vec<&CellResult> = results.iter().collect();
    sorted.sort_by(|a, b| {
        let ka = variant_key(&a.cell.scheme, sites);
        let kb = variant_key(&b.cell.scheme, sites);
        (a.cell.scheme.scheme, ka, a.cell.seed).cmp(&(b.cell.scheme.scheme, kb, b.cell.seed))
    });
    let mut out = String::new();
    let _ = writeln!(out, "{ABLATION_HEADER}");
    let mut groups: Vec<((String, String, String), Vec<(f64, f64)>)> = Vec::new();
    for r in &sorted {
        let key = variant_key(&r.cell.scheme, sites);
        let (s, a, l) = &key;
        match &r.outcome {
            CellOutcome::Done { rmse_cm, ssim, .. } => {
                let _ = writeln!(out, "{s},{a},{l},{},{rmse_cm},{ssim}", r.cell.seed);
            }
            CellOutcome::Failed(_) => {
                let _ = writeln!(out, "{s},{a},{l},{},failed,failed", r.cell.seed);
            }
        }
        if groups.last().map(|g| &g.0) != Some(&key) {
            groups.push((key.clone(), Vec::new()));
        }
        if let CellOutcome::Done { rmse_cm, ssim, .. } = &r.outcome {
            groups.last_mut().expect("group pushed").1.push((*rmse_cm, *ssim));
        }
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{SUMMARY_HEADER}");
    for ((s, a, l), vals) in groups {
        let r: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let q: Vec<f64> = vals.iter().map(|v| v.1).collect();
        let _ = writeln!(out, "{s},{a},{l},{},{},{}", vals.len(), median(&r), median(&q));
    }
    out
}

/// Median test RMSE per scheme (first matching variant group).
pub fn median_rmse_by_scheme(results: &[CellResult], scheme: Scheme) -> Option<f64> {
    let v: Vec<f64> = results
        .iter()
        .filter(|r| r.cell.scheme.scheme == scheme)
        .filter_map(|r| match r.outcome {
            CellOutcome::Done { rmse_cm, .. } => Some(rmse_cm),
            CellOutcome::Failed(_) => None,
        })
        .collect();
    (!v.is_empty()).then(|| median(&v))
}

/// Binary PGM (P5) of a single plane, mapping `[lo, hi]` linearly to
/// `[0, 255]`.
pub fn write_pgm<W: Write>(t: &Tensor<f64>, lo: f64, hi: f64, sink: &mut W) -> Result<()> {
    let [_, c, h, w] = t.shape().0;
    if c != 1 {
        return Err(Error::ChannelMismatch { op: "write_pgm", expected: 1, got: c });
    }
    write!(sink, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = t.data()[..h * w].iter().map(|&v| to_byte(v, lo, hi)).collect();
    sink.write_all(&bytes)?;
    Ok(())
}

/// Binary PPM (P6) of a 3-channel image with values in `[0, 1]`.
pub fn write_ppm<W: Write>(t: &Tensor<f64>, sink: &mut W) -> Result<()> {
    let [_, c, h, w] = t.shape().0;
    if c != 3 {
        return Err(Error::ChannelMismatch { op: "write_ppm", expected: 3, got: c });
    }
    write!(sink, "P6\n{w} {h}\n255\n")?;
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push(to_byte(t[[0, ch, y, x]], 0.0, 1.0));
            }
        }
    }
    sink.write_all(&bytes)?;
    Ok(())
}

fn to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a pair as blobs and returns the file names.
pub fn write_pair(dir: &Path, prefix: &str, p: &Pair) -> Result<[String; 3]> {
    let names = ["input", "guide", "target"].map(|k| format!("{prefix}-{:05}-{k}.gbft", p.index));
    for (name, t) in names.iter().zip([&p.input, &p.guide, &p.target]) {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
        crate::blob::blob_write(t, &mut f)?;
        f.flush()?;
    }
    Ok(names)
}
