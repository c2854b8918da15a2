//! Plain-text experiment configuration.
//!
//! ```text
//! # comment
//! [data]
//! task = depth
//! scale = 4
//! [scheme]
//! scheme = bft
//! ```
//!
//! Sections are `data`, `model`, `scheme`, `train` and `out`. Every key is
//! optional; unknown sections and keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::conditioning::SchemeConfig;
use crate::error::{Error, Result};
use crate::models::{DiscriminatorSpec, GeneratorSpec};
use crate::synth::{DataConfig, Task};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: GeneratorSpec,
    pub disc: DiscriminatorSpec,
    pub scheme: SchemeConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        let mut model = GeneratorSpec { residual_input: true, ..GeneratorSpec::default() };
        set_channels(&mut model, data.task);
        Self {
            data,
            model,
            disc: DiscriminatorSpec::default(),
            scheme: SchemeConfig::default(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn set_channels(model: &mut GeneratorSpec, task: Task) {
    let (i, g, o) = task.channels();
    model.in_channels = i;
    model.guide_channels = g;
    model.out_channels = o;
}

fn parse_value<V: FromStr>(section: &str, key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("[{section}] {key} = `{value}`: {e}")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key} = `{value}`: expected true or false"))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut task_set = false;
        let mut residual_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["data", "model", "scheme", "train", "out"].contains(&name) {
                    return Err(Error::Config(format!("line {}: unknown section [{name}]", lineno + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            let Some(sec) = section.as_deref() else {
                return Err(Error::Config(format!("line {}: key `{k}` outside any section", lineno + 1)));
            };
            if sec == "data" && k == "task" {
                task_set = true;
            }
            residual_set |= sec == "model" && k == "residual_input";
            cfg.set(sec, k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        if task_set {
            set_channels(&mut cfg.model, cfg.data.task);
            if !residual_set {
                cfg.model.residual_input = cfg.data.task == Task::Depth;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assigns one key. Channel counts follow from the task and cannot be set.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let s = section;
        match (section, key) {
            ("data", "task") => self.data.task = parse_value(s, key, v)?,
            ("data", "height") => self.data.height = parse_value(s, key, v)?,
            ("data", "width") => self.data.width = parse_value(s, key, v)?,
            ("data", "scale") => self.data.scale = parse_value(s, key, v)?,
            ("data", "n_train") => self.data.n_train = parse_value(s, key, v)?,
            ("data", "n_test") => self.data.n_test = parse_value(s, key, v)?,
            ("data", "seed") => self.data.seed = parse_value(s, key, v)?,
            ("data", "complexity") => self.data.complexity = parse_value(s, key, v)?,
            ("model", "base") => self.model.base = parse_value(s, key, v)?,
            ("model", "depth") => self.model.depth = parse_value(s, key, v)?,
            ("model", "base_width") => self.model.base_width = parse_value(s, key, v)?,
            ("model", "head") => self.model.head = parse_value(s, key, v)?,
            ("model", "residual_input") => self.model.residual_input = parse_bool(s, key, v)?,
            ("model", "disc_layers") => self.disc.layers = parse_value(s, key, v)?,
            ("model", "disc_width") => self.disc.base_width = parse_value(s, key, v)?,
            ("scheme", "scheme") => self.scheme.scheme = parse_value(s, key, v)?,
            ("scheme", "affine") => self.scheme.affine = parse_value(s, key, v)?,
            ("scheme", "ft_layer_count") => self.scheme.ft_layer_count = parse_value(s, key, v)?,
            ("scheme", "ft_placement") => self.scheme.ft_placement = parse_value(s, key, v)?,
            ("scheme", "adain_swapped") => self.scheme.adain_swapped = parse_bool(s, key, v)?,
            ("train", "lambda_l1") => self.train.lambda_l1 = parse_value(s, key, v)?,
            ("train", "lr") => self.train.lr = parse_value(s, key, v)?,
            ("train", "beta1") => self.train.beta1 = parse_value(s, key, v)?,
            ("train", "beta2") => self.train.beta2 = parse_value(s, key, v)?,
            ("train", "adam_eps") => self.train.adam_eps = parse_value(s, key, v)?,
            ("train", "epochs") => self.train.epochs = parse_value(s, key, v)?,
            ("train", "batch_size") => self.train.batch_size = parse_value(s, key, v)?,
            ("train", "seed") => self.train.seed = parse_value(s, key, v)?,
            ("train", "use_gan") => self.train.use_gan = parse_bool(s, key, v)?,
            ("train", "eval_every") => self.train.eval_every = parse_value(s, key, v)?,
            ("train", "checkpoint_every") => self.train.checkpoint_every = parse_value(s, key, v)?,
            ("out", "dir") => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}` in [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.model.check_dims(self.data.height, self.data.width)?;
        self.scheme.validate(self.model.num_sites())?;
        self.train.validate()?;
        if self.disc.layers == 0 || self.data.height >> self.disc.layers == 0 || self.data.width >> self.disc.layers == 0 {
            return Err(Error::Config(format!("{} discriminator layers leave no patch grid", self.disc.layers)));
        }
        Ok(())
    }

    fn section_text(&self, name: &str) -> String {
        let mut s = String::new();
        let d = &self.data;
        let m = &self.model;
        let sc = &self.scheme;
        let t = &self.train;
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match name {
            "data" => {
                kv("task", &d.task);
                kv("height", &d.height);
                kv("width", &d.width);
                kv("scale", &d.scale);
                kv("n_train", &d.n_train);
                kv("n_test", &d.n_test);
                kv("seed", &d.seed);
                kv("complexity", &d.complexity);
            }
            "model" => {
                kv("base", &m.base);
                kv("depth", &m.depth);
                kv("base_width", &m.base_width);
                kv("head", &m.head.as_str());
                kv("residual_input", &m.residual_input);
                kv("disc_layers", &self.disc.layers);
                kv("disc_width", &self.disc.base_width);
            }
            "scheme" => {
                kv("scheme", &sc.scheme);
                kv("affine", &sc.affine);
                kv("ft_layer_count", &sc.ft_layer_count);
                kv("ft_placement", &sc.ft_placement.as_str());
                kv("adain_swapped", &sc.adain_swapped);
            }
            "train" => {
                kv("lambda_l1", &t.lambda_l1);
                kv("lr", &t.lr);
                kv("beta1", &t.beta1);
                kv("beta2", &t.beta2);
                kv("adam_eps", &t.adam_eps);
                kv("epochs", &t.epochs);
                kv("batch_size", &t.batch_size);
                kv("seed", &t.seed);
                kv("use_gan", &t.use_gan);
                kv("eval_every", &t.eval_every);
                kv("checkpoint_every", &t.checkpoint_every);
            }
            "out" => kv("dir", &self.out_dir.display()),
            _ => unreachable!("known section"),
        }
        s
    }

    /// Fully resolved configuration; parsing it yields `self` again.
    pub fn to_text(&self) -> String {
        ["data", "model", "scheme", "train", "out"]
            .iter()
            .map(|sec| format!("[{sec}]\n{}", self.section_text(sec)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Hash of everything that shapes the training trajectory. The epoch
    /// count, logging cadence and output directory are left out so a run can
    /// be resumed with a longer schedule.
    pub fn config_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for sec in ["data", "model", "scheme"] {
            h.update(self.section_text(sec));
        }
        for line in self.section_text("train").lines() {
            let key = line.split('=').next().unwrap_or("").trim();
            if !["epochs", "eval_every", "checkpoint_every"].contains(&key) {
                h.update(line);
                h.update("\n");
            }
        }
        h.finalize().into()
    }
}
