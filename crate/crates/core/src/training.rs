//! Objective, optimizer and the training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::metrics::{rmse_cm, ssim, MetricReport};
use crate::models::ModelGraph;
use crate::nn::Params;
use crate::params::{Gradients, ParamStore};
use crate::synth::{Pair, Task};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_l1: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_gan: bool,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    /// Checkpoint every this many epochs (0: only after the last epoch).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_l1: 100.0,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            use_gan: true,
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0) {
            return Err(Error::Config(format!("lambda_l1 must be >= 0, got {}", self.lambda_l1)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.lr >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("lr must be >= 0 and adam_eps > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Graph nodes of the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: NodeId,
    pub gan: Option<NodeId>,
    /// Unweighted `mean |fake - target|`.
    pub l1: NodeId,
}

pub fn l1_loss<T: Element>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::ShapeMismatch { op: "l1_loss", lhs: sa, rhs: sb });
    }
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// `BCE(d_fake, 1) + lambda * mean|fake - target|`, or only the weighted L1
/// term when `d_logits_fake` is `None`.
pub fn total_generator_loss<T: Element>(
    g: &mut Graph<T>,
    fake: NodeId,
    target: NodeId,
    d_logits_fake: Option<NodeId>,
    lambda_l1: f64,
) -> Result<LossTerms> {
    let l1 = l1_loss(g, fake, target)?;
    let weighted = g.scale(l1, lambda_l1)?;
    match d_logits_fake {
        Some(d) => {
            let gan = g.bce_with_logits(d, 1.0)?;
            let total = g.add(gan, weighted)?;
            Ok(LossTerms { total, gan: Some(gan), l1 })
        }
        None => Ok(LossTerms { total: weighted, gan: None, l1 }),
    }
}

/// `BCE(real, 1) + BCE(fake, 0)`, each averaged over the patch grid.
pub fn discriminator_loss<T: Element>(g: &mut Graph<T>, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
    let (sr, sf) = (g.shape(d_real), g.shape(d_fake));
    if sr != sf {
        return Err(Error::ShapeMismatch { op: "discriminator_loss", lhs: sr, rhs: sf });
    }
    let r = g.bce_with_logits(d_real, 1.0)?;
    let f = g.bce_with_logits(d_fake, 0.0)?;
    g.add(r, f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam update. Any non-finite gradient aborts before a
/// single parameter is touched.
pub fn adam_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name)?;
        if g.shape() != p.shape() || state.m.get(name)?.shape() != p.shape() {
            return Err(Error::ShapeMismatch { op: "adam_step", lhs: p.shape(), rhs: g.shape() });
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at flat index {i} is {}", g.data()[i].as_f64())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?.data();
        let m = state.m.get_mut(name)?.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = T::from_f64(b1 * mi.as_f64() + (1.0 - b1) * gi.as_f64());
        }
        let v = state.v.get_mut(name)?.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            let gi = gi.as_f64();
            *vi = T::from_f64(b2 * vi.as_f64() + (1.0 - b2) * gi * gi);
        }
        let (m, v) = (state.m.get(name)?.data(), state.v.get(name)?.data());
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mh = mi.as_f64() / c1;
            let vh = vi.as_f64() / c2;
            *pi = T::from_f64(pi.as_f64() - cfg.lr * mh / (vh.sqrt() + cfg.adam_eps));
        }
    }
    Ok(())
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Element> {
    pub model: ModelGraph<T>,
    pub adam_gen: AdamState<T>,
    pub adam_disc: AdamState<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps (batches).
    pub step: u64,
}

impl<T: Element> TrainState<T> {
    pub fn new(model: ModelGraph<T>) -> Self {
        let adam_gen = AdamState::new(&model.gen_params);
        let adam_disc = AdamState::new(&model.disc_params);
        Self { model, adam_gen, adam_disc, epoch: 0, step: 0 }
    }

    pub fn to_checkpoint(&self, config_hash: [u8; 32]) -> Checkpoint {
        let mut c = Checkpoint::new(config_hash);
        c.put_store("gen", &self.model.gen_params);
        c.put_store("disc", &self.model.disc_params);
        c.put_store("adam_gen_m", &self.adam_gen.m);
        c.put_store("adam_gen_v", &self.adam_gen.v);
        c.put_store("adam_disc_m", &self.adam_disc.m);
        c.put_store("adam_disc_v", &self.adam_disc.v);
        c.put_scalar("epoch", self.epoch as f64);
        c.put_scalar("step", self.step as f64);
        c.put_scalar("adam_gen_t", self.adam_gen.t as f64);
        c.put_scalar("adam_disc_t", self.adam_disc.t as f64);
        c
    }

    /// Restores state into `template`, which must have been built from the
    /// same configuration.
    pub fn from_checkpoint(mut template: ModelGraph<T>, c: &Checkpoint) -> Result<Self> {
        let load = |prefix: &str, like: &ParamStore<T>| -> Result<ParamStore<T>> {
            let s = c.take_store::<T>(prefix)?;
            let same_layout = s.len() == like.len()
                && like.iter().all(|(n, t)| s.get(n).map(|u| u.shape() == t.shape()).unwrap_or(false));
            if !same_layout {
                return Err(Error::Config(format!("checkpoint section `{prefix}` does not match the model layout")));
            }
            Ok(s)
        };
        let gen_like = template.gen_params.clone();
        let disc_like = template.disc_params.clone();
        template.gen_params = load("gen", &gen_like)?;
        template.disc_params = load("disc", &disc_like)?;
        let adam_gen = AdamState { m: load("adam_gen_m", &gen_like)?, v: load("adam_gen_v", &gen_like)?, t: c.scalar("adam_gen_t")? as u64 };
        let adam_disc = AdamState { m: load("adam_disc_m", &disc_like)?, v: load("adam_disc_v", &disc_like)?, t: c.scalar("adam_disc_t")? as u64 };
        Ok(Self { model: template, adam_gen, adam_disc, epoch: c.scalar("epoch")? as usize, step: c.scalar("step")? as u64 })
    }
}

/// Network-space tensors of one pair.
#[derive(Clone, Debug)]
pub struct Encoded<T: Element> {
    pub input: Tensor<T>,
    pub guide: Tensor<T>,
    pub target: Tensor<T>,
}

pub fn encode_pairs<T: Element>(task: Task, pairs: &[Pair]) -> Vec<Encoded<T>> {
    pairs
        .iter()
        .map(|p| Encoded { input: task.encode_input(&p.input), guide: task.encode_guide(&p.guide), target: task.encode_target(&p.target) })
        .collect()
}

/// Per-batch loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub gan: f64,
    pub l1: f64,
    pub disc: f64,
}

fn stack<T: Element>(items: &[&Encoded<T>]) -> Result<Encoded<T>> {
    Ok(Encoded {
        input: Tensor::stack_batch(&items.iter().map(|e| &e.input).collect::<Vec<_>>())?,
        guide: Tensor::stack_batch(&items.iter().map(|e| &e.guide).collect::<Vec<_>>())?,
        target: Tensor::stack_batch(&items.iter().map(|e| &e.target).collect::<Vec<_>>())?,
    })
}

fn scalar_of<T: Element>(g: &Graph<T>, id: NodeId) -> f64 {
    g.value(id).data()[0].as_f64()
}

/// One optimizer step on a batch: a discriminator update on the detached
/// generator output, then a generator update against the updated
/// discriminator. Without the adversarial term only the generator moves.
pub fn train_step<T: Element>(state: &mut TrainState<T>, batch: &Encoded<T>, cfg: &TrainConfig) -> Result<StepLosses> {
    let mut g = Graph::new();
    let input = g.input(batch.input.clone());
    let guide = g.input(batch.guide.clone());
    let target = g.input(batch.target.clone());
    let model = &mut state.model;
    let fake = model.generator.forward(&mut g, Params::trainable(&model.gen_params), input, guide)?;
    let mut losses = StepLosses::default();
    let d_fake = if cfg.use_gan {
        let mut dg = Graph::new();
        let (di, dgd) = (dg.input(batch.input.clone()), dg.input(batch.guide.clone()));
        let real = dg.input(batch.target.clone());
        let detached = dg.input(g.value(fake).clone());
        let p = Params::trainable(&model.disc_params);
        let d_real = model.discriminator.forward(&mut dg, p, di, dgd, real)?;
        let d_fake = model.discriminator.forward(&mut dg, p, di, dgd, detached)?;
        let loss = discriminator_loss(&mut dg, d_real, d_fake)?;
        dg.backward(loss)?;
        losses.disc = scalar_of(&dg, loss);
        let grads = dg.gradients(&model.disc_params);
        adam_step(&mut model.disc_params, &grads, &mut state.adam_disc, cfg)?;
        Some(model.discriminator.forward(&mut g, Params::frozen(&model.disc_params), input, guide, fake)?)
    } else {
        None
    };
    let terms = total_generator_loss(&mut g, fake, target, d_fake, cfg.lambda_l1)?;
    g.backward(terms.total)?;
    losses.total = scalar_of(&g, terms.total);
    losses.l1 = scalar_of(&g, terms.l1);
    losses.gan = terms.gan.map(|id| scalar_of(&g, id)).unwrap_or(0.0);
    let grads = g.gradients(&model.gen_params);
    adam_step(&mut model.gen_params, &grads, &mut state.adam_gen, cfg)?;
    state.step += 1;
    Ok(losses)
}

/// Sample order of `epoch` (1-based), a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    order.shuffle(&mut rng);
    order
}

/// Mean losses over one epoch.
pub fn train_epoch<T: Element>(state: &mut TrainState<T>, data: &[Encoded<T>], cfg: &TrainConfig) -> Result<StepLosses> {
    let epoch = state.epoch + 1;
    let order = epoch_order(cfg.seed, epoch, data.len());
    let mut acc = StepLosses::default();
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let items: Vec<&Encoded<T>> = chunk.iter().map(|&i| &data[i]).collect();
        let l = train_step(state, &stack(&items)?, cfg)?;
        if !(l.total.is_finite() && l.disc.is_finite()) {
            return Err(Error::NonFinite(format!("loss at epoch {epoch}, step {}", state.step)));
        }
        acc.total += l.total;
        acc.gan += l.gan;
        acc.l1 += l.l1;
        acc.disc += l.disc;
        batches += 1;
    }
    state.epoch = epoch;
    let n = batches.max(1) as f64;
    Ok(StepLosses { total: acc.total / n, gan: acc.gan / n, l1: acc.l1 / n, disc: acc.disc / n })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rmse: MetricReport,
    pub ssim: MetricReport,
}

/// RMSE in physical units and SSIM on `[0, 1]`-mapped values, per sample.
pub fn evaluate<T: Element>(model: &ModelGraph<T>, task: Task, pairs: &[Pair]) -> Result<EvalReport> {
    let mut r = Vec::with_capacity(pairs.len());
    let mut s = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = model.predict(&task.encode_input::<T>(&p.input), &task.encode_guide::<T>(&p.guide))?;
        let pred = task.decode_output(&out);
        r.push(rmse_cm(&pred, &p.target)?);
        s.push(ssim(&task.to_unit(&pred), &task.to_unit(&p.target))?);
    }
    Ok(EvalReport { rmse: MetricReport::from_values(r), ssim: MetricReport::from_values(s) })
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub scheme: String,
    pub loss_total: f64,
    pub loss_gan: f64,
    pub loss_l1: f64,
    pub eval_rmse_cm: Option<f64>,
    pub eval_ssim: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,step,seed,scheme,loss_total,loss_gan,loss_l1,eval_rmse_cm,eval_ssim";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.seed,
            self.scheme,
            self.loss_total,
            self.loss_gan,
            self.loss_l1,
            opt(self.eval_rmse_cm),
            opt(self.eval_ssim)
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], sink: &mut W) -> Result<()> {
    writeln!(sink, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(sink, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Where and how often the loop writes checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    pub config_hash: [u8; 32],
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}.gbck"))
}

/// Trains from `state.epoch` up to `cfg.epochs`, returning one metrics row
/// per epoch. On a non-finite loss the error is returned and checkpoints
/// already on disk are left untouched.
pub fn train<T: Element>(
    state: &mut TrainState<T>,
    task: Task,
    train_pairs: &[Pair],
    eval_pairs: &[Pair],
    cfg: &TrainConfig,
    ckpt: &CheckpointPolicy,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let data = encode_pairs::<T>(task, train_pairs);
    let scheme = state.model.generator.scheme.scheme.as_str().to_string();
    let mut rows = Vec::new();
    while state.epoch < cfg.epochs {
        let l = train_epoch(state, &data, cfg)?;
        let e = state.epoch;
        let last = e == cfg.epochs;
        let due = |every: usize| last || (every > 0 && e % every == 0);
        let eval = if due(cfg.eval_every) && !eval_pairs.is_empty() {
            Some(evaluate(&state.model, task, eval_pairs)?)
        } else {
            None
        };
        let row = MetricsRow {
            epoch: e,
            step: state.step,
            seed: cfg.seed,
            scheme: scheme.clone(),
            loss_total: l.total,
            loss_gan: l.gan,
            loss_l1: l.l1,
            eval_rmse_cm: eval.as_ref().map(|r| r.rmse.mean),
            eval_ssim: eval.as_ref().map(|r| r.ssim.mean),
        };
        on_epoch(&row);
        rows.push(row);
        if let Some(dir) = &ckpt.dir {
            if due(cfg.checkpoint_every) {
                state.to_checkpoint(ckpt.config_hash).save(&checkpoint_path(dir, e))?;
            }
        }
    }
    Ok(rows)
}
