//! Command-line surface. Settings resolve in three layers: the profile
//! preset, then the `--config` JSON file, then individual flags.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autograd::{BackwardFault, OP_NAMES};
use crate::checkpoint::Checkpoint;
use crate::data::{filter_split, generate_synthetic, load_annotations, load_ppm, write_jsonl, CaptionRecord, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{check_variant, GradCheckReport};
use crate::metrics::Smoothing;
use crate::model::Variant;
use crate::train::{evaluate, run_training, DataSource, Profile, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "meshcap", version, about = "Patch-transformer image captioner with mesh decoding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Greedy-decode a caption for one PPM image.
    Caption(CaptionArgs),
    /// Finite-difference check of micro models.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic JSONL dataset.
    GenerateData(GenerateArgs),
    /// Print the resolved run configuration as JSON.
    PrintConfig(RunArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfileArg {
    Toy,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Toy => Profile::Toy,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Full run configuration in JSON; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    pub profile: ProfileArg,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Base learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub constant_epochs: Option<u32>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// JSONL annotation file; replaces the synthetic source.
    #[arg(long, conflicts_with = "n")]
    pub data: Option<PathBuf>,
    /// Size of the synthetic dataset.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub captions_per_image: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL annotation file; synthetic scenes are used otherwise.
    #[arg(long, conflicts_with = "n")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Epsilon added to zero BLEU counts; unsmoothed when absent.
    #[arg(long)]
    pub bleu_epsilon: Option<f64>,
    /// Where to write the report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Binary or ASCII PPM matching the model's image size.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check one variant; all five when absent.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Scale the backward rule of OP by 1.5 (negative control).
    #[arg(long, value_name = "OP")]
    pub corrupt_backward: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?
            }
            None => RunConfig::preset(self.profile.into(), self.variant.unwrap_or(Variant::M5)),
        };
        if let Some(v) = self.variant {
            cfg.model.variant = v;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.model.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.lr.base = lr;
        }
        if let Some(d) = self.lr_decay {
            cfg.lr.decay = d;
        }
        if let Some(c) = self.constant_epochs {
            cfg.lr.constant_epochs = c;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(c) = self.captions_per_image {
            cfg.captions_per_image = c;
        }
        if let Some(path) = &self.data {
            cfg.data = DataSource::Jsonl { path: path.clone() };
        }
        if self.n.is_some() || self.data_seed.is_some() {
            let (n0, s0) = match cfg.data {
                DataSource::Synthetic { n, seed } => (n, seed),
                DataSource::Jsonl { .. } => (512, 0),
            };
            cfg.data = DataSource::Synthetic {
                n: self.n.unwrap_or(n0),
                seed: self.data_seed.unwrap_or(s0),
            };
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format!("{text}\n")).map_err(|e| Error::io(path, e))
}

fn load_eval_records(args: &EvalArgs) -> Result<Vec<CaptionRecord>> {
    let records = match &args.data {
        Some(path) => load_annotations(path)?,
        None => generate_synthetic(args.n, args.data_seed)?,
    };
    if args.split == "all" {
        return Ok(records);
    }
    let split = Split::parse(&args.split)
        .ok_or_else(|| Error::Input(format!("unknown split `{}`; use train, val, test or all", args.split)))?;
    let picked = filter_split(&records, split);
    if picked.is_empty() {
        return Err(Error::Input(format!("split `{}` is empty", args.split)));
    }
    Ok(picked)
}

/// Per-group table for one variant.
pub fn format_gradcheck(variant: Variant, report: &GradCheckReport, tol: f64) -> String {
    let mut s = format!("variant {variant} ({})\n", variant.describe());
    s += &format!("  {:<32} {:>6} {:>12} {:>12}  {}\n", "group", "coords", "max_rel", "max_abs", "status");
    for g in &report.groups {
        let status = if g.max_rel_error <= tol { "pass" } else { "FAIL" };
        s += &format!(
            "  {:<32} {:>6} {:>12.3e} {:>12.3e}  {status}\n",
            g.name, g.coords, g.max_rel_error, g.max_abs_error
        );
    }
    let status = if report.passed(tol) { "PASS" } else { "FAIL" };
    s += &format!("  {variant}: max rel error {:.3e} (tol {tol:.0e}) {status}\n", report.max_rel_error);
    s
}

/// Runs one command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let io = |e| Error::io("<stdout>", e);
    match cli.command {
        Command::PrintConfig(args) => {
            let cfg = args.resolve()?;
            writeln!(out, "{}", serde_json::to_string_pretty(&cfg)?).map_err(io)?;
        }
        Command::Train(args) => {
            let cfg = args.run.resolve()?;
            let summary = run_training(cfg, args.resume.as_deref())?;
            for log in &summary.logs {
                writeln!(out, "{}", serde_json::to_string(log)?).map_err(io)?;
            }
            writeln!(out, "{}", summary.report).map_err(io)?;
            writeln!(out, "run directory: {}", summary.out.display()).map_err(io)?;
        }
        Command::Eval(args) => {
            let records = load_eval_records(&args)?;
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let (model, vocab, _) = ckpt.into_model()?;
            let smoothing = args.bleu_epsilon.map_or(Smoothing::None, Smoothing::Epsilon);
            let report = evaluate(&model, &vocab, &records, smoothing)?;
            if let Some(path) = &args.out {
                write_json_file(path, &serde_json::to_string_pretty(&report)?)?;
            }
            writeln!(out, "{report}").map_err(io)?;
        }
        Command::Caption(args) => {
            let (model, vocab, _) = Checkpoint::load(&args.checkpoint)?.into_model()?;
            let image = load_ppm(&args.image)?;
            let max_len = args.max_len.unwrap_or(model.config.max_len);
            let seq = model.greedy_decode(&image, max_len)?;
            writeln!(out, "{}", vocab.decode(&seq.ids)?).map_err(io)?;
        }
        Command::Gradcheck(args) => {
            let fault = match &args.corrupt_backward {
                Some(op) => {
                    let op = OP_NAMES.iter().copied().find(|n| *n == op.as_str()).ok_or_else(|| {
                        Error::Input(format!("unknown op `{op}`; expected one of {}", OP_NAMES.join(", ")))
                    })?;
                    Some(BackwardFault { op, factor: 1.5 })
                }
                None => None,
            };
            let variants = args.variant.map_or(Variant::ALL.to_vec(), |v| vec![v]);
            let mut failed = Vec::new();
            for v in variants {
                let report = check_variant(v, args.seed, fault.clone())?;
                write!(out, "{}", format_gradcheck(v, &report, args.tol)).map_err(io)?;
                if !report.passed(args.tol) {
                    failed.push(format!("{v} ({:.3e})", report.max_rel_error));
                }
            }
            if !failed.is_empty() {
                return Err(Error::GradCheck(format!("exceeded tolerance {:.0e}: {}", args.tol, failed.join(", "))));
            }
        }
        Command::GenerateData(args) => {
            let records = generate_synthetic(args.n, args.seed)?;
            if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_jsonl(&args.out, &records)?;
            let count = |s| records.iter().filter(|r| r.split == s).count();
            writeln!(
                out,
                "wrote {} records to {} (train {}, val {}, test {})",
                records.len(),
                args.out.display(),
                count(Split::Train),
                count(Split::Val),
                count(Split::Test)
            )
            .map_err(io)?;
        }
    }
    Ok(())
}
