//! Run configuration, the epoch loop, evaluation and run-directory output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{filter_split, generate_synthetic, load_annotations, CaptionRecord, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_captions, EvalReport, Smoothing};
use crate::model::{train_step, Captioner, Example, ModelConfig, Variant};
use crate::optim::{AdamConfig, AdamState, LrSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Desk-scale defaults for the synthetic scenes.
    Toy,
    /// Published widths and schedule; representable, not practical here.
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { n: usize, seed: u64 },
    Jsonl { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<CaptionRecord>> {
        match self {
            DataSource::Synthetic { n, seed } => generate_synthetic(*n, *seed),
            DataSource::Jsonl { path } => load_annotations(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `vocab_size` 0 means "size of the vocabulary built from the training
    /// split".
    pub model: ModelConfig,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    /// Seeds model initialization and batch shuffling.
    pub seed: u64,
    pub data: DataSource,
    pub out: PathBuf,
    /// Threads computing per-example gradients; results do not depend on it.
    pub workers: usize,
    /// Training pairs taken per record, starting from its first reference.
    pub captions_per_image: usize,
    pub smoothing: Smoothing,
}

impl RunConfig {
    pub fn preset(profile: Profile, variant: Variant) -> Self {
        match profile {
            Profile::Toy => RunConfig {
                model: ModelConfig::toy(variant, 0),
                epochs: 20,
                batch_size: 16,
                lr: LrSchedule { base: 1e-3, decay: 0.99, constant_epochs: 5 },
                adam: AdamConfig::default(),
                seed: 0,
                data: DataSource::Synthetic { n: 512, seed: 0 },
                out: PathBuf::from("runs/toy"),
                workers: 1,
                captions_per_image: 1,
                smoothing: Smoothing::None,
            },
            Profile::Paper => RunConfig {
                model: ModelConfig::paper(variant, 0),
                epochs: 20,
                batch_size: 500,
                lr: LrSchedule::default(),
                adam: AdamConfig::default(),
                seed: 0,
                data: DataSource::Jsonl { path: PathBuf::from("annotations.jsonl") },
                out: PathBuf::from("runs/paper"),
                workers: 1,
                captions_per_image: 5,
                smoothing: Smoothing::None,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr.base > 0.0 && self.lr.base.is_finite()) {
            return Err(Error::config("lr.base", "must be positive"));
        }
        if !(self.lr.decay > 0.0 && self.lr.decay <= 1.0) {
            return Err(Error::config("lr.decay", "must lie in (0, 1]"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if self.captions_per_image == 0 {
            return Err(Error::config("captions_per_image", "must be at least 1"));
        }
        Ok(())
    }
}

/// One line of `logs.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    /// `null` when the dataset has no validation split.
    pub val_bleu4: Option<f64>,
}

/// Teacher-forcing examples for every record in `records`.
pub fn examples(
    records: &[CaptionRecord],
    vocab: &Vocabulary,
    max_len: usize,
    captions_per_image: usize,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for r in records {
        let pixels = r.pixels()?;
        for c in r.captions.iter().take(captions_per_image) {
            out.push(Example { pixels: pixels.clone(), tokens: vocab.encode(c, max_len)? });
        }
    }
    Ok(out)
}

/// Greedy-decodes each record and scores it against all its references.
pub fn evaluate(model: &Captioner, vocab: &Vocabulary, records: &[CaptionRecord], smoothing: Smoothing) -> Result<EvalReport> {
    let mut ids = Vec::with_capacity(records.len());
    let mut cands = Vec::with_capacity(records.len());
    let mut refs = Vec::with_capacity(records.len());
    for r in records {
        let seq = model.greedy_decode(&r.pixels()?, model.config.max_len)?;
        ids.push(r.id.clone());
        cands.push(vocab.decode(&seq.ids)?);
        refs.push(r.captions.clone());
    }
    evaluate_captions(&ids, &cands, &refs, smoothing)
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Captioner,
    pub vocab: Vocabulary,
    pub adam: AdamState,
    pub train: Vec<CaptionRecord>,
    pub val: Vec<CaptionRecord>,
    pub test: Vec<CaptionRecord>,
    examples: Vec<Example>,
    /// Completed epochs.
    pub epoch: u32,
}

impl Trainer {
    /// Fresh model; the vocabulary comes from the training split.
    pub fn new(config: RunConfig, records: Vec<CaptionRecord>) -> Result<Self> {
        config.validate()?;
        let train = filter_split(&records, Split::Train);
        if train.is_empty() {
            return Err(Error::Input("dataset has no training records".into()));
        }
        let vocab = Vocabulary::build(&train);
        let mut model_cfg = config.model.clone();
        model_cfg.seed = config.seed;
        if model_cfg.vocab_size == 0 {
            model_cfg.vocab_size = vocab.len();
        } else if model_cfg.vocab_size != vocab.len() {
            return Err(Error::config(
                "model.vocab_size",
                format!("{} does not match the {} tokens in the training split", model_cfg.vocab_size, vocab.len()),
            ));
        }
        let model = Captioner::new(model_cfg)?;
        let adam = AdamState::new(&model.store, config.adam.clone());
        Self::assemble(config, model, vocab, adam, records, 0)
    }

    /// Continues from a checkpoint written by an earlier run of `config`.
    pub fn resume(config: RunConfig, records: Vec<CaptionRecord>, checkpoint: Checkpoint) -> Result<Self> {
        config.validate()?;
        let mut expected = config.model.clone();
        expected.seed = config.seed;
        if expected.vocab_size == 0 {
            expected.vocab_size = checkpoint.config.vocab_size;
        }
        checkpoint.check_config(&expected)?;
        if checkpoint.seed != config.seed {
            return Err(Error::ConfigMismatch {
                field: "seed".into(),
                found: checkpoint.seed.to_string(),
                expected: config.seed.to_string(),
            });
        }
        let epoch = checkpoint.epoch;
        let (model, vocab, adam) = checkpoint.into_model()?;
        let adam = adam.ok_or_else(|| Error::CorruptCheckpoint("checkpoint has no optimizer state".into()))?;
        Self::assemble(config, model, vocab, adam, records, epoch)
    }

    fn assemble(
        config: RunConfig,
        model: Captioner,
        vocab: Vocabulary,
        adam: AdamState,
        records: Vec<CaptionRecord>,
        epoch: u32,
    ) -> Result<Self> {
        let train = filter_split(&records, Split::Train);
        let examples = examples(&train, &vocab, model.config.max_len, config.captions_per_image)?;
        Ok(Trainer {
            val: filter_split(&records, Split::Val),
            test: filter_split(&records, Split::Test),
            train,
            examples,
            config,
            model,
            vocab,
            adam,
            epoch,
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr.lr(self.epoch)
    }

    /// One pass over the shuffled training examples. Shuffling depends only
    /// on `(seed, epoch)`, so resumed runs replay the same order.
    pub fn train_epoch(&mut self) -> Result<(f64, f64)> {
        let lr = self.lr();
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(u64::from(self.epoch) + 1);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| self.examples[i].clone()).collect();
            let loss = train_step(&mut self.model, &batch, &mut self.adam, lr, self.config.workers)?;
            total += loss * batch.len() as f64;
        }
        self.epoch += 1;
        Ok((lr, total / self.examples.len() as f64))
    }

    /// Mean teacher-forcing loss over the training examples, no update.
    pub fn train_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for ex in &self.examples {
            let mut g = crate::autograd::Graph::inference();
            let l = self.model.loss(&mut g, &ex.pixels, &ex.tokens)?;
            total += g.value(l).item();
        }
        Ok(total / self.examples.len() as f64)
    }

    pub fn evaluate(&self, records: &[CaptionRecord]) -> Result<EvalReport> {
        evaluate(&self.model, &self.vocab, records, self.config.smoothing)
    }

    /// Trains one epoch and scores the validation split.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch;
        let (lr, train_loss) = self.train_epoch()?;
        let val_bleu4 = if self.val.is_empty() { None } else { Some(self.evaluate(&self.val)?.bleu4) };
        Ok(EpochLog { epoch, lr, train_loss, val_bleu4 })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::capture(
            &self.model,
            &self.vocab,
            Some(&self.adam),
            self.epoch,
            self.config.seed,
            serde_json::to_value(&self.config)?,
        ))
    }
}

/// Outcome of a full run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub logs: Vec<EpochLog>,
    pub report: EvalReport,
    pub out: PathBuf,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains for the configured epochs and writes the run directory:
/// `config.json`, `logs.jsonl`, `checkpoints/{final,best}.ckpt` and
/// `report.json` (scores of the final model on the test split, or the
/// validation or training split when the test split is empty).
pub fn run_training(config: RunConfig, resume: Option<&Path>) -> Result<RunSummary> {
    config.validate()?;
    let records = config.data.load()?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config.clone(), records, Checkpoint::load(p)?)?,
        None => Trainer::new(config.clone(), records)?,
    };
    let out = config.out.clone();
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut resolved = config.clone();
    resolved.model = trainer.model.config.clone();
    write_json(&out.join("config.json"), &resolved)?;

    let log_path = out.join("logs.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut logs = Vec::new();
    let mut best = f64::NEG_INFINITY;
    while trainer.epoch < config.epochs {
        let entry = trainer.run_epoch()?;
        writeln!(log, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&log_path, e))?;
        let score = entry.val_bleu4.unwrap_or(-entry.train_loss);
        if score > best {
            best = score;
            trainer.checkpoint()?.save(&ckpt_dir.join("best.ckpt"))?;
        }
        logs.push(entry);
    }
    trainer.checkpoint()?.save(&ckpt_dir.join("final.ckpt"))?;
    let eval_split = [&trainer.test, &trainer.val, &trainer.train]
        .into_iter()
        .find(|s| !s.is_empty())
        .expect("training split is nonempty");
    let report = trainer.evaluate(eval_split)?;
    write_json(&out.join("report.json"), &report)?;
    Ok(RunSummary { logs, report, out })
}
