//! Run configuration as flat `key = value` text with dotted sections.
//!
//! Keys are written as `section.key`; a `[section]` header line prefixes the
//! keys that follow it. `#` starts a comment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::DEFAULT_LAMBDA;
use crate::metrics::Aggregation;
use crate::model::ModelConfig;
use crate::optim::{AdamWConfig, DEFAULT_POLY_POWER};
use crate::synth::dataset::{DatasetConfig, SplitCounts, SPLITS};
use crate::synth::perturb::{Family, PerturbConfig};
use crate::train::{EvalOptions, TrainOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub adamw: AdamWConfig,
    pub poly_power: f64,
    pub iterations: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            adamw: AdamWConfig::default(),
            poly_power: DEFAULT_POLY_POWER,
            iterations: 500,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    pub dataset: DatasetConfig,
    pub counts: SplitCounts,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            dataset: DatasetConfig::default(),
            counts: SplitCounts {
                train: 64,
                val: 16,
                test: 32,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub flip: bool,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            checkpoint: PathBuf::from("runs/model.ckpt"),
            log: PathBuf::from("runs/train_log.txt"),
            log_every: 10,
            checkpoint_every: 100,
            flip: true,
            deterministic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub split: String,
    pub aggregation: Aggregation,
    pub perturb_families: Vec<Family>,
    pub perturb_intensity: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "test".into(),
            aggregation: Aggregation::Micro,
            perturb_families: Family::ALL.to_vec(),
            perturb_intensity: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lambda: f64,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            lambda: DEFAULT_LAMBDA,
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(key, format!("cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Every field as `(key, value)` in file order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let o = &self.optim;
        let d = &self.data;
        let s = &d.dataset.scene;
        let t = &self.train;
        let e = &self.eval;
        vec![
            ("model.channels", m.channels.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.top_k", m.gate.k.to_string()),
            ("model.w_im", m.gate.w_im.to_string()),
            ("model.theta", m.theta.to_string()),
            ("model.mask_threshold", m.mask_threshold.to_string()),
            ("model.heads", m.heads.map_or_else(|| "auto".into(), |h| h.to_string())),
            ("model.positional", m.positional.to_string()),
            ("model.use_noise", m.use_noise.to_string()),
            ("loss.lambda", self.lambda.to_string()),
            ("optim.lr", o.adamw.lr.to_string()),
            ("optim.beta1", o.adamw.betas.0.to_string()),
            ("optim.beta2", o.adamw.betas.1.to_string()),
            ("optim.weight_decay", o.adamw.weight_decay.to_string()),
            ("optim.eps", o.adamw.eps.to_string()),
            ("optim.poly_power", o.poly_power.to_string()),
            ("optim.iterations", o.iterations.to_string()),
            ("optim.batch_size", o.batch_size.to_string()),
            ("data.root", d.root.display().to_string()),
            ("data.height", s.height.to_string()),
            ("data.width", s.width.to_string()),
            ("data.faces_min", s.faces.0.to_string()),
            ("data.faces_max", s.faces.1.to_string()),
            ("data.tamper_prob", s.tamper_prob.to_string()),
            ("data.blend", s.blend.to_string()),
            ("data.smoothing", s.smoothing.to_string()),
            ("data.grain", s.grain.to_string()),
            ("data.fake_ratio", d.dataset.fake_ratio.to_string()),
            ("data.train", d.counts.train.to_string()),
            ("data.val", d.counts.val.to_string()),
            ("data.test", d.counts.test.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint", t.checkpoint.display().to_string()),
            ("train.log", t.log.display().to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.flip", t.flip.to_string()),
            ("train.deterministic", t.deterministic.to_string()),
            ("eval.split", e.split.clone()),
            (
                "eval.aggregation",
                match e.aggregation {
                    Aggregation::Micro => "micro".into(),
                    Aggregation::Macro => "macro".into(),
                },
            ),
            (
                "eval.perturb_families",
                e.perturb_families.iter().map(|f| f.name()).collect::<Vec<_>>().join(","),
            ),
            ("eval.perturb_intensity", e.perturb_intensity.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.data.dataset.scene;
        match key {
            "model.channels" => self.model.channels = parse(key, v)?,
            "model.depth" => self.model.depth = parse(key, v)?,
            "model.top_k" => self.model.gate.k = parse(key, v)?,
            "model.w_im" => self.model.gate.w_im = parse(key, v)?,
            "model.theta" => self.model.theta = parse(key, v)?,
            "model.mask_threshold" => self.model.mask_threshold = parse(key, v)?,
            "model.heads" => self.model.heads = if v == "auto" { None } else { Some(parse(key, v)?) },
            "model.positional" => self.model.positional = parse_bool(key, v)?,
            "model.use_noise" => self.model.use_noise = parse_bool(key, v)?,
            "loss.lambda" => self.lambda = parse(key, v)?,
            "optim.lr" => self.optim.adamw.lr = parse(key, v)?,
            "optim.beta1" => self.optim.adamw.betas.0 = parse(key, v)?,
            "optim.beta2" => self.optim.adamw.betas.1 = parse(key, v)?,
            "optim.weight_decay" => self.optim.adamw.weight_decay = parse(key, v)?,
            "optim.eps" => self.optim.adamw.eps = parse(key, v)?,
            "optim.poly_power" => self.optim.poly_power = parse(key, v)?,
            "optim.iterations" => self.optim.iterations = parse(key, v)?,
            "optim.batch_size" => self.optim.batch_size = parse(key, v)?,
            "data.root" => self.data.root = PathBuf::from(v),
            "data.height" => s.height = parse(key, v)?,
            "data.width" => s.width = parse(key, v)?,
            "data.faces_min" => s.faces.0 = parse(key, v)?,
            "data.faces_max" => s.faces.1 = parse(key, v)?,
            "data.tamper_prob" => s.tamper_prob = parse(key, v)?,
            "data.blend" => s.blend = parse(key, v)?,
            "data.smoothing" => s.smoothing = parse(key, v)?,
            "data.grain" => s.grain = parse(key, v)?,
            "data.fake_ratio" => self.data.dataset.fake_ratio = parse(key, v)?,
            "data.train" => self.data.counts.train = parse(key, v)?,
            "data.val" => self.data.counts.val = parse(key, v)?,
            "data.test" => self.data.counts.test = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.checkpoint" => self.train.checkpoint = PathBuf::from(v),
            "train.log" => self.train.log = PathBuf::from(v),
            "train.log_every" => self.train.log_every = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.flip" => self.train.flip = parse_bool(key, v)?,
            "train.deterministic" => self.train.deterministic = parse_bool(key, v)?,
            "eval.split" => self.eval.split = v.to_string(),
            "eval.aggregation" => {
                self.eval.aggregation = match v {
                    "micro" => Aggregation::Micro,
                    "macro" => Aggregation::Macro,
                    _ => return Err(Error::config(key, format!("expected micro or macro, got {v:?}"))),
                }
            }
            "eval.perturb_families" => {
                self.eval.perturb_families = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| Error::config(key, format!("unknown family {s:?}"))))
                    .collect::<Result<_>>()?
            }
            "eval.perturb_intensity" => self.eval.perturb_intensity = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses over the defaults; absent keys keep their default value.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            cfg.set(&key, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_text(&text)
    }

    /// Range checks; errors name the offending key.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| match e {
            Error::InvalidParam { name, detail } => {
                let key = if name == "k" { "top_k".to_string() } else { name };
                Error::config(format!("model.{key}"), detail)
            }
            other => other,
        })?;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("loss.lambda", format!("must be positive, got {}", self.lambda)));
        }
        self.optim.adamw.validate().map_err(|e| match e {
            Error::InvalidParam { name, detail } => Error::config(format!("optim.{name}"), detail),
            other => other,
        })?;
        if !(self.optim.poly_power >= 0.0 && self.optim.poly_power.is_finite()) {
            return Err(Error::config("optim.poly_power", "must be non-negative"));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be at least 1"));
        }
        self.data.dataset.validate().map_err(|e| match e {
            Error::Config { field, detail } if !field.starts_with("data.") => Error::config(
                match field.as_str() {
                    "faces" => "data.faces_min".to_string(),
                    f => format!("data.{f}"),
                },
                detail,
            ),
            other => other,
        })?;
        if self.train.log_every == 0 {
            return Err(Error::config("train.log_every", "must be at least 1"));
        }
        if self.train.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be at least 1"));
        }
        if !SPLITS.contains(&self.eval.split.as_str()) {
            return Err(Error::config("eval.split", format!("expected one of {SPLITS:?}, got {:?}", self.eval.split)));
        }
        PerturbConfig {
            families: self.eval.perturb_families.clone(),
            intensity: self.eval.perturb_intensity,
            seed: 0,
        }
        .validate()
        .map_err(|e| match e {
            Error::Config { field, detail } => Error::config(field.replace("perturb.", "eval.perturb_"), detail),
            other => other,
        })?;
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            iterations: self.optim.iterations,
            batch_size: self.optim.batch_size,
            lambda: self.lambda,
            adamw: self.optim.adamw,
            poly_power: self.optim.poly_power,
            flip: self.train.flip,
            seed: self.train.seed,
            log_every: self.train.log_every,
            checkpoint_every: self.train.checkpoint_every,
            checkpoint: Some(self.train.checkpoint.clone()),
            log: Some(self.train.log.clone()),
            config_text: self.to_text(),
        }
    }

    pub fn eval_options(&self, perturbed: bool) -> EvalOptions {
        EvalOptions {
            batch_size: self.optim.batch_size,
            lambda: self.lambda,
            aggregation: self.eval.aggregation,
            perturb: perturbed.then(|| self.perturb()),
        }
    }

    pub fn perturb(&self) -> PerturbConfig {
        PerturbConfig {
            families: self.eval.perturb_families.clone(),
            intensity: self.eval.perturb_intensity,
            seed: self.train.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_echo_optimizer_settings() {
        let text = RunConfig::default().to_text();
        assert!(text.contains("optim.lr = 0.00006\n"), "{text}");
        assert!(text.contains("optim.weight_decay = 0.01\n"));
        assert!(text.contains("loss.lambda = 10\n"));
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn sections_and_comments() {
        let c = RunConfig::from_text("optim.lr = 1e-3\n# run\n[model]\nchannels = 8 # small\n\n[data]\nheight=128\n").unwrap();
        assert_eq!(c.model.channels, 8);
        assert_eq!(c.data.dataset.scene.height, 128);
        assert_eq!(c.optim.adamw.lr, 1e-3);
        // keys under a header are prefixed with it
        assert!(RunConfig::from_text("[data]\noptim.lr = 1e-3\n").is_err());
    }

    #[test]
    fn errors_name_the_field() {
        let err = |t: &str| match RunConfig::from_text(t).and_then(|c| c.validate()) {
            Err(Error::Config { field, .. }) => field,
            r => panic!("expected config error, got {r:?}"),
        };
        assert_eq!(err("data.height = 100\n"), "data.height");
        assert_eq!(err("model.top_k = 7\n"), "model.top_k");
        assert_eq!(err("model.theta = 2\n"), "model.theta");
        assert_eq!(err("optim.lr = -1\n"), "optim.lr");
        assert_eq!(err("model.channels = x\n"), "model.channels");
        assert_eq!(err("bogus.key = 1\n"), "bogus.key");
        assert_eq!(err("eval.split = holdout\n"), "eval.split");
        assert_eq!(err("eval.perturb_intensity = 3\n"), "eval.perturb_intensity");
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            c in 1usize..32, k in 1usize..=4, w in 0.0f64..1.0, th in 0.0f64..=1.0,
            lr in 1e-7f64..1.0, seed in any::<u64>(), heads in prop::option::of(1usize..4),
            flip in any::<bool>(), intensity in 0.0f64..=1.0,
        ) {
            let mut cfg = RunConfig::default();
            cfg.model.channels = c;
            cfg.model.gate.k = k;
            cfg.model.gate.w_im = w;
            cfg.model.theta = th;
            cfg.model.heads = heads;
            cfg.optim.adamw.lr = lr;
            cfg.train.seed = seed;
            cfg.train.flip = flip;
            cfg.eval.perturb_intensity = intensity;
            cfg.eval.perturb_families = vec![Family::Edge, Family::External];
            let back = RunConfig::from_text(&cfg.to_text()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
