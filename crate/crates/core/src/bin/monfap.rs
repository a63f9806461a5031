//! `monfap` command-line harness: gen-data, train, eval, predict.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! input, 3 missing or incompatible checkpoint.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use monfap::backbone::Image;
use monfap::checkpoint::Checkpoint;
use monfap::config::RunConfig;
use monfap::mask::BinaryMask;
use monfap::metrics::{binarize_mask, fake_probability};
use monfap::model::Monfap;
use monfap::synth::dataset::{load_image, save_mask, SPLITS};
use monfap::synth::{build_split, load_split};
use monfap::train::{evaluate, train};
use monfap::{Error, Tensor};

#[derive(Parser)]
#[command(name = "monfap", version, about = "Multi-face manipulation detection and localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`key = value` text). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Strict single-threaded deterministic mode.
    #[arg(long)]
    deterministic: bool,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val/test splits under `data.root`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train from scratch on the train split and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint and print the metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Split to evaluate (overrides `eval.split`).
        #[arg(long)]
        split: Option<String>,
        /// Apply randomly combined perturbations before inference.
        #[arg(long)]
        perturb: bool,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a single image; writes `<stem>.prob.txt`, `<stem>.mask.png` and `<stem>.overlay.png`.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        image: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::InvalidParam { .. } | Error::Dimension(_) => 2,
            Error::CheckpointMismatch(_) => 3,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

fn resolve(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => fail(2, e.to_string()),
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| fail(2, format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(ck) = &common.checkpoint {
        cfg.train.checkpoint = ck.clone();
    }
    if common.deterministic {
        cfg.train.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.is_file() {
        return Err(fail(3, format!("checkpoint not found: {}", path.display())));
    }
    Checkpoint::load(path).map_err(|e| fail(3, e.to_string()))
}

fn gen_data(cfg: &RunConfig) -> Result<(), Failure> {
    let records = build_split(&cfg.data.root, cfg.data.counts, &cfg.data.dataset, cfg.train.seed)?;
    for split in SPLITS {
        let recs: Vec<_> = records.iter().filter(|r| r.split == split).collect();
        let fake = recs.iter().filter(|r| r.label.is_manipulated()).count();
        println!(
            "split={split} samples={} manipulated={fake} genuine={} manifest={}",
            recs.len(),
            recs.len() - fake,
            cfg.data.root.join(split).join("manifest.txt").display()
        );
    }
    Ok(())
}

fn run_train(cfg: &RunConfig) -> Result<(), Failure> {
    let samples = load_split(&cfg.data.root, "train")?;
    let (model, mut store) = Monfap::build(cfg.model, cfg.train.seed)?;
    let opts = cfg.train_options();
    let report = train(&model, &mut store, &samples, &opts)?;
    if let Some(last) = report.steps.last() {
        println!("{}", last.to_line());
    }
    println!("checkpoint={}", cfg.train.checkpoint.display());
    Ok(())
}

fn run_eval(cfg: &RunConfig, perturbed: bool, out: Option<&Path>) -> Result<(), Failure> {
    let ck = load_checkpoint(&cfg.train.checkpoint)?;
    let (model, mut store) = Monfap::build(cfg.model, cfg.train.seed)?;
    ck.apply(&mut store)?;
    let samples = load_split(&cfg.data.root, &cfg.eval.split)?;
    let report = evaluate(&model, &store, &samples, &cfg.eval_options(perturbed))?;
    let text = report.to_string();
    print!("split={}\nperturbed={perturbed}\n{text}", cfg.eval.split);
    if let Some(path) = out {
        fs::write(path, &text).map_err(|e| Failure::from(Error::Io { path: path.display().to_string(), source: e }))?;
    }
    Ok(())
}

fn overlay(image: &Tensor, mask: &BinaryMask) -> image::RgbImage {
    let (h, w) = (mask.height, mask.width);
    let d = image.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let px = |c: usize| d[(c * h + y) * w + x];
        let rgb = if mask.get(y, x) == 1 {
            [0.5 * px(0) + 0.5, 0.5 * px(1), 0.5 * px(2)]
        } else {
            [px(0), px(1), px(2)]
        };
        image::Rgb(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn predict(checkpoint: &Path, image: &Path, out: &Path) -> Result<(), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = RunConfig::from_text(&ck.config)
        .and_then(|c| c.validate().map(|_| c))
        .map_err(|e| fail(3, format!("checkpoint carries an invalid configuration: {e}")))?;
    let (model, mut store) = Monfap::build(cfg.model, cfg.train.seed)?;
    ck.apply(&mut store)?;
    let raw = load_image(image).map_err(|e| fail(2, e.to_string()))?;
    let (h, w) = (raw.shape()[1], raw.shape()[2]);
    let padded = Image::reflect_padded(&raw)?;
    let pred = model.predict(&store, &padded)?;
    let full = binarize_mask(&pred.mask_logits, padded.height(), padded.width());
    let mut mask = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            mask.set(y, x, full.get(y, x));
        }
    }
    fs::create_dir_all(out).map_err(|e| Failure::from(Error::Io { path: out.display().to_string(), source: e }))?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let prob = fake_probability(pred.logits);
    let prob_path = out.join(format!("{stem}.prob.txt"));
    fs::write(&prob_path, format!("fake_probability={prob}\nlabel={}\n", if pred.logits[1] > pred.logits[0] { "manipulated" } else { "genuine" }))
        .map_err(|e| Failure::from(Error::Io { path: prob_path.display().to_string(), source: e }))?;
    let mask_path = out.join(format!("{stem}.mask.png"));
    save_mask(&mask_path, &mask)?;
    let overlay_path = out.join(format!("{stem}.overlay.png"));
    overlay(&raw, &mask)
        .save(&overlay_path)
        .map_err(|e| Failure::from(Error::Image { path: overlay_path.display().to_string(), source: e }))?;
    println!("fake_probability={prob}\nmask={}\noverlay={}", mask_path.display(), overlay_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { common } => gen_data(&resolve(&common)?),
        Command::Train { common } => run_train(&resolve(&common)?),
        Command::Eval { common, split, perturb, out } => {
            let mut common = common;
            if let Some(s) = split {
                common.overrides.push(format!("eval.split={s}"));
            }
            run_eval(&resolve(&common)?, perturb, out.as_deref())
        }
        Command::Predict { checkpoint, out, image } => predict(&checkpoint, &image, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
