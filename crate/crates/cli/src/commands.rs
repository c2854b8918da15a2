use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use bift::checkpoint::Checkpoint;
use bift::conditioning::{build_scheme, FtPlacement, Scheme, SchemeConfig};
use bift::config::ExperimentConfig;
use bift::experiment::{
    ablation_csv, format_suite, gradcheck_suite, run_ablation, worker_count, write_pair, write_pgm, write_ppm, Cell,
    CellOutcome, OP_NAMES,
};
use bift::graph::BackwardFault;
use bift::models::ModelGraph;
use bift::nn::AffineVariant;
use bift::synth::{Dataset, Pair, Task};
use bift::tensor::Tensor;
use bift::training::{evaluate, train as run_training, CheckpointPolicy, TrainState, METRICS_HEADER};

use crate::{rundir, Common, Failure};

type CmdResult = Result<(), Failure>;

/// Scale applied to a corrupted backward pass.
const FAULT_FACTOR: f64 = 1.01;
const PREVIEW_COUNT: usize = 4;

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(&c.config)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", c.config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fresh_model(cfg: &ExperimentConfig) -> Result<ModelGraph<f32>, Failure> {
    Ok(build_scheme::<f32>(&cfg.scheme, &cfg.model, &cfg.disc, cfg.train.seed)?)
}

fn load_state(cfg: &ExperimentConfig, path: &Path) -> Result<TrainState<f32>, Failure> {
    let ckpt = Checkpoint::load_matching(path, &cfg.config_hash())?;
    Ok(TrainState::from_checkpoint(fresh_model(cfg)?, &ckpt)?)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes one image per tensor, in `[0, 1]` after the task's unit mapping.
fn write_image(task: Task, physical: &Tensor<f64>, path_stem: &Path) -> CmdResult {
    let unit = match physical.shape().c() {
        1 => task.to_unit(physical),
        _ => physical.clone(),
    };
    if unit.shape().c() == 1 {
        let mut f = create(&path_stem.with_extension("pgm"))?;
        write_pgm(&unit, 0.0, 1.0, &mut f)?;
        f.flush()?;
    } else {
        let mut f = create(&path_stem.with_extension("ppm"))?;
        write_ppm(&unit, &mut f)?;
        f.flush()?;
    }
    Ok(())
}

fn write_pair_images(task: Task, dir: &Path, prefix: &str, p: &Pair, prediction: Option<&Tensor<f64>>) -> CmdResult {
    let stem = |k: &str| dir.join(format!("{prefix}-{:05}-{k}", p.index));
    write_image(task, &p.input, &stem("input"))?;
    write_image(task, &p.guide, &stem("guide"))?;
    write_image(task, &p.target, &stem("target"))?;
    if let Some(pred) = prediction {
        write_image(task, pred, &stem("prediction"))?;
    }
    Ok(())
}

fn predict(state: &TrainState<f32>, task: Task, p: &Pair) -> Result<Tensor<f64>, Failure> {
    let out = state.model.predict(&task.encode_input::<f32>(&p.input), &task.encode_guide::<f32>(&p.guide))?;
    Ok(task.decode_output(&out))
}

fn render_predictions(state: &TrainState<f32>, task: Task, pairs: &[Pair], dir: &Path) -> CmdResult {
    for p in pairs {
        let pred = predict(state, task, p)?;
        write_pair_images(task, dir, "test", p, Some(&pred))?;
    }
    Ok(())
}

pub fn gen_data(c: &Common) -> CmdResult {
    let cfg = load_config(c)?;
    let dir = rundir::create(&cfg, cfg.scheme.scheme.as_str())?;
    let data = Dataset::generate(&cfg.data)?;
    let blobs = rundir::subdir(&dir, "data")?;
    let mut manifest = create(&dir.join("manifest.csv"))?;
    writeln!(manifest, "split,index,seed,input,guide,target")?;
    for (split, pairs) in [("train", &data.train), ("test", &data.test)] {
        for p in pairs {
            let [i, g, t] = write_pair(&blobs, split, p)?;
            writeln!(manifest, "{split},{},{},data/{i},data/{g},data/{t}", p.index, p.seed)?;
        }
    }
    manifest.flush()?;
    if c.preview {
        let pv = rundir::subdir(&dir, "preview")?;
        for p in data.train.iter().take(PREVIEW_COUNT) {
            write_pair_images(cfg.data.task, &pv, "train", p, None)?;
        }
    }
    println!("{} train + {} test pairs written to {}", data.train.len(), data.test.len(), dir.display());
    Ok(())
}

pub fn train(c: &Common, resume: Option<&Path>) -> CmdResult {
    let cfg = load_config(c)?;
    let mut state = match resume {
        Some(p) => load_state(&cfg, p)?,
        None => TrainState::new(fresh_model(&cfg)?),
    };
    let dir = rundir::create(&cfg, cfg.scheme.scheme.as_str())?;
    let data = Dataset::generate(&cfg.data)?;
    let policy = CheckpointPolicy { dir: Some(rundir::subdir(&dir, "checkpoints")?), config_hash: cfg.config_hash() };
    let mut csv = create(&dir.join("metrics.csv"))?;
    writeln!(csv, "{METRICS_HEADER}")?;
    println!("{METRICS_HEADER}");
    let mut io_err: Option<std::io::Error> = None;
    let outcome = run_training(&mut state, cfg.data.task, &data.train, &data.test, &cfg.train, &policy, |row| {
        let line = row.to_csv();
        println!("{line}");
        if let Err(e) = writeln!(csv, "{line}").and_then(|_| csv.flush()) {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    outcome?;
    if c.preview {
        let pv = rundir::subdir(&dir, "preview")?;
        render_predictions(&state, cfg.data.task, &data.test[..PREVIEW_COUNT.min(data.test.len())], &pv)?;
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

pub fn eval(c: &Common, checkpoint: &Path) -> CmdResult {
    let cfg = load_config(c)?;
    let state = load_state(&cfg, checkpoint)?;
    let dir = rundir::create(&cfg, cfg.scheme.scheme.as_str())?;
    let data = Dataset::generate(&cfg.data)?;
    let report = evaluate(&state.model, cfg.data.task, &data.test)?;
    let mut f = create(&dir.join("eval.csv"))?;
    writeln!(f, "index,seed,rmse_cm,ssim")?;
    for ((p, r), s) in data.test.iter().zip(&report.rmse.values).zip(&report.ssim.values) {
        writeln!(f, "{},{},{r},{s}", p.index, p.seed)?;
    }
    f.flush()?;
    let mut f = create(&dir.join("eval_summary.csv"))?;
    writeln!(f, "metric,mean,median,std")?;
    println!("metric,mean,median,std");
    for (name, m) in [("rmse_cm", &report.rmse), ("ssim", &report.ssim)] {
        let line = format!("{name},{},{},{}", m.mean, m.median, m.std);
        writeln!(f, "{line}")?;
        println!("{line}");
    }
    f.flush()?;
    if c.preview {
        let pv = rundir::subdir(&dir, "preview")?;
        render_predictions(&state, cfg.data.task, &data.test[..PREVIEW_COUNT.min(data.test.len())], &pv)?;
    }
    Ok(())
}

pub fn render(c: &Common, checkpoint: &Path, count: usize) -> CmdResult {
    let cfg = load_config(c)?;
    let state = load_state(&cfg, checkpoint)?;
    let dir = rundir::create(&cfg, cfg.scheme.scheme.as_str())?;
    let data = Dataset::generate(&cfg.data)?;
    let out = rundir::subdir(&dir, "render")?;
    render_predictions(&state, cfg.data.task, &data.test[..count.min(data.test.len())], &out)?;
    println!("rendered {} samples to {}", count.min(data.test.len()), out.display());
    Ok(())
}

pub fn gradcheck(seed: u64, fault: Option<&str>) -> CmdResult {
    let fault = match fault {
        None => None,
        Some(name) => {
            let op = OP_NAMES
                .iter()
                .find(|&&o| o == name)
                .ok_or_else(|| Failure::Usage(format!("unknown op `{name}`; known: {}", OP_NAMES.join(", "))))?;
            Some(BackwardFault { op, factor: FAULT_FACTOR })
        }
    };
    let entries = gradcheck_suite(seed, fault)?;
    print!("{}", format_suite(&entries));
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        println!("gradcheck: all {} entries passed", entries.len());
        Ok(())
    } else {
        Err(Failure::Check(format!("gradcheck failed for {}", failed.join(", "))))
    }
}

fn parse_list<V: std::str::FromStr>(items: &[String], what: &str) -> Result<Vec<V>, Failure>
where
    V::Err: std::fmt::Display,
{
    items
        .iter()
        .map(|s| s.trim().parse::<V>().map_err(|e| Failure::Usage(format!("--{what} `{s}`: {e}"))))
        .collect()
}

/// Expands the sweep flags into the distinct scheme variants to train.
pub fn ablation_variants(
    base: &SchemeConfig,
    schemes: &[Scheme],
    ft_layers: &[usize],
    affines: &[AffineVariant],
    placements: &[FtPlacement],
) -> Vec<SchemeConfig> {
    let or = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let layers = or(ft_layers, base.ft_layer_count);
    let affines = if affines.is_empty() { vec![base.affine] } else { affines.to_vec() };
    let placements = if placements.is_empty() { vec![base.ft_placement] } else { placements.to_vec() };
    let mut out: Vec<SchemeConfig> = Vec::new();
    let mut push = |c: SchemeConfig| {
        if !out.contains(&c) {
            out.push(c);
        }
    };
    for &scheme in schemes {
        if !scheme.is_modulated() {
            push(SchemeConfig { scheme, ..*base });
            continue;
        }
        for &affine in &affines {
            for &placement in &placements {
                for &n in &layers {
                    let n = if placement == FtPlacement::FinalLayerOnly { base.ft_layer_count } else { n };
                    push(SchemeConfig { scheme, affine, ft_layer_count: n, ft_placement: placement, ..*base });
                }
            }
        }
    }
    out
}

pub fn ablate(
    c: &Common,
    schemes: &[String],
    seeds: u64,
    ft_layers: &[usize],
    affine: &[String],
    placement: &[String],
) -> CmdResult {
    let cfg = load_config(c)?;
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let schemes: Vec<Scheme> = if schemes.is_empty() { vec![cfg.scheme.scheme] } else { parse_list(schemes, "schemes")? };
    let affines: Vec<AffineVariant> = parse_list(affine, "affine")?;
    let placements: Vec<FtPlacement> = parse_list(placement, "placement")?;
    let variants = ablation_variants(&cfg.scheme, &schemes, ft_layers, &affines, &placements);
    let sites = cfg.model.num_sites();
    for v in &variants {
        v.validate(sites)?;
    }
    let base_seed = cfg.train.seed;
    let cells: Vec<Cell> = variants
        .iter()
        .flat_map(|&scheme| (base_seed..base_seed + seeds).map(move |seed| Cell { scheme, seed }))
        .collect();
    let dir = rundir::create(&cfg, "ablate")?;
    let data = Dataset::generate(&cfg.data)?;
    let results = run_ablation(&cfg, &data, &cells, worker_count(), &|r| match &r.outcome {
        CellOutcome::Done { rmse_cm, ssim, .. } => {
            eprintln!("done {} seed {}: rmse_cm {rmse_cm:.4} ssim {ssim:.4}", r.cell.scheme.scheme, r.cell.seed)
        }
        CellOutcome::Failed(m) => eprintln!("failed {} seed {}: {m}", r.cell.scheme.scheme, r.cell.seed),
    });
    let csv = ablation_csv(&results, sites);
    std::fs::write(dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    let failed = results.iter().filter(|r| matches!(r.outcome, CellOutcome::Failed(_))).count();
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} of {} cells failed", results.len())));
    }
    Ok(())
}
