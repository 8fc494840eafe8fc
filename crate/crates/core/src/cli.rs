//! Command-line surface: run configuration, checkpoints, training loops and the
//! `train`, `eval`, `generate`, `synth` and `params` subcommands.
//!
//! A run directory holds `config.toml` (the resolved configuration),
//! `train.log.jsonl` (one record per update), `epochs.jsonl`, `last.ckpt`,
//! `best.ckpt` and `train_report.json`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cells::UnitKind;
use crate::charlm::{evaluate_bpc, generate_text, prepare_corpus, CorpusSplit, SplitRatios, SymbolMode, Vocabulary, PAPER_VOCAB_SIZE};
use crate::error::{check_len, Error, Result};
use crate::gfstack::{
    count_parameters, paper_capacity_config, paper_capacity_rows, parameter_breakdown, Arch, Model, ModelConfig, StackState, UnitGateSource,
};
use crate::numerics::{Real, Rng};
use crate::progeval::{
    build_heatmap, build_splits, encode_sample, interpret, mean_nll, read_dataset, teacher_forced_accuracy, write_dataset, Curriculum,
    EncodedSample, EncoderDecoder, GridSpec, ProgramSample, Seq2SeqTrainer, TaskVocab, DEFAULT_BATCH_SIZE, ENCODER_TRUNCATION,
    INPUT_VOCAB_SIZE, OUTPUT_VOCAB_SIZE,
};
use crate::training::{BatchPlan, ExplosionRule, OptimizerConfig, OptimizerState, StreamTrainer, Trainer, UpdateRecord};

pub const DEFAULT_PATIENCE: u64 = 5;
pub const CHARLM_MAX_EPOCHS: u64 = 100;
pub const PROGEVAL_EPOCHS: u64 = 30;
/// Generated characters when `--n` is not given.
pub const DEFAULT_GENERATE_LEN: usize = 250;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Charlm,
    Progeval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub unit: UnitKind,
    pub units_per_layer: Vec<usize>,
    #[serde(default)]
    pub freeze_gates_to_one: bool,
    #[serde(default)]
    pub skip_connections: bool,
    #[serde(default)]
    pub readout_all_layers: bool,
    #[serde(default)]
    pub unit_gate_source: UnitGateSource,
    #[serde(default)]
    pub strict: bool,
}

impl ModelSpec {
    pub fn to_config(&self, input_vocab: usize, output_vocab: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.arch, self.unit, self.units_per_layer.clone(), input_vocab, output_vocab);
        cfg.freeze_gates_to_one = self.freeze_gates_to_one;
        cfg.skip_connections = self.skip_connections;
        cfg.readout_all_layers = self.readout_all_layers;
        cfg.unit_gate_source = self.unit_gate_source;
        cfg.strict = self.strict;
        cfg
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    /// Directory with `train.tsv`, `valid.tsv` and `test.tsv`.
    pub dataset: Option<PathBuf>,
    /// Run directory.
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CharlmOptions {
    pub vocab_size: usize,
    pub mode: SymbolMode,
    pub split: SplitRatios,
    pub batch: BatchPlan,
}

impl Default for CharlmOptions {
    fn default() -> Self {
        CharlmOptions { vocab_size: PAPER_VOCAB_SIZE, mode: SymbolMode::Byte, split: SplitRatios::default(), batch: BatchPlan::PAPER }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProgevalOptions {
    pub batch_size: usize,
    /// Encoder steps per gradient segment; 0 backpropagates through whole scripts.
    pub truncation: usize,
}

impl Default for ProgevalOptions {
    fn default() -> Self {
        ProgevalOptions { batch_size: DEFAULT_BATCH_SIZE, truncation: ENCODER_TRUNCATION }
    }
}

fn default_patience() -> u64 {
    DEFAULT_PATIENCE
}

/// Everything a training run depends on. The seed has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    /// Defaults to 100 for charlm and 30 for progeval.
    #[serde(default)]
    pub epochs: Option<u64>,
    #[serde(default = "default_patience")]
    pub patience: u64,
    /// Stop after this many updates in total, counting earlier resumed work.
    #[serde(default)]
    pub max_updates: Option<u64>,
    pub model: ModelSpec,
    /// Defaults to the task's paper recipe.
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub explosion: ExplosionRule,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub charlm: CharlmOptions,
    #[serde(default)]
    pub progeval: ProgevalOptions,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn max_epochs(&self) -> u64 {
        self.epochs.unwrap_or(match self.task {
            Task::Charlm => CHARLM_MAX_EPOCHS,
            Task::Progeval => PROGEVAL_EPOCHS,
        })
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        self.optimizer.clone().unwrap_or_else(|| match self.task {
            Task::Charlm => OptimizerConfig::rmsprop_for(self.model.unit),
            Task::Progeval => OptimizerConfig::adam(),
        })
    }

    pub fn truncation(&self) -> Option<usize> {
        (self.progeval.truncation > 0).then_some(self.progeval.truncation)
    }

    /// Checks values and that the input paths exist.
    pub fn validate(&self) -> Result<()> {
        self.optimizer_config().validate()?;
        self.model.to_config(2, 2).validate()?;
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        match self.task {
            Task::Charlm => {
                self.charlm.batch.validate()?;
                if self.charlm.vocab_size < 2 {
                    return Err(Error::config("charlm.vocab_size", "must be at least 2"));
                }
                let p = self.paths.corpus.as_ref().ok_or_else(|| Error::config("paths.corpus", "required for charlm"))?;
                if !p.is_file() {
                    return Err(Error::config("paths.corpus", format!("{} is not a file", p.display())));
                }
            }
            Task::Progeval => {
                if self.progeval.batch_size == 0 {
                    return Err(Error::config("progeval.batch_size", "must be at least 1"));
                }
                let p = self.paths.dataset.as_ref().ok_or_else(|| Error::config("paths.dataset", "required for progeval"))?;
                for f in ["train.tsv", "valid.tsv", "test.tsv"] {
                    if !p.join(f).is_file() {
                        return Err(Error::config("paths.dataset", format!("{} is missing", p.join(f).display())));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Counters that locate a run inside its schedule.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub updates: u64,
    pub skipped: u64,
    pub optimizer_steps: u64,
    pub epoch: u64,
    pub position: usize,
    pub since_reset: usize,
    pub stale_epochs: u64,
}

/// Full training state, enough to resume bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Vocabulary sidecar text (character tasks only).
    pub vocab: String,
    pub manifest: Vec<(String, usize)>,
    pub params: Vec<Real>,
    pub optimizer_first: Vec<Real>,
    pub optimizer_second: Vec<Real>,
    pub learning_rate: Real,
    pub norm_ema: Option<Real>,
    pub best_metric: Real,
    pub progress: Progress,
    /// Carried hidden states of the training streams, flattened.
    pub states: Vec<Vec<Real>>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GFRNNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_reals(out: &mut Vec<u8>, v: &[Real]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| Error::Checkpoint("section length exceeds file size".into()))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("section is not UTF-8".into()))
    }

    fn reals(&mut self) -> Result<Vec<Real>> {
        let n = self.u64()? as usize;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad array length".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| Real::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, self.config.to_toml().as_bytes());
        put_bytes(&mut out, self.vocab.as_bytes());
        let manifest: String = self.manifest.iter().map(|(n, k)| format!("{n}\t{k}\n")).collect();
        put_bytes(&mut out, manifest.as_bytes());
        put_bytes(&mut out, serde_json::to_string(&self.progress).expect("progress serializes").as_bytes());
        put_reals(
            &mut out,
            &[self.learning_rate, self.norm_ema.unwrap_or(Real::NAN), Real::from(u8::from(self.norm_ema.is_some())), self.best_metric],
        );
        put_reals(&mut out, &self.params);
        put_reals(&mut out, &self.optimizer_first);
        put_reals(&mut out, &self.optimizer_second);
        out.extend_from_slice(&(self.states.len() as u64).to_le_bytes());
        for s in &self.states {
            put_reals(&mut out, s);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a gfrnn checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let config = RunConfig::from_toml(&r.text()?)?;
        let vocab = r.text()?;
        let manifest = r
            .text()?
            .lines()
            .map(|l| {
                let (n, k) = l.split_once('\t').ok_or_else(|| Error::Checkpoint(format!("bad manifest line `{l}`")))?;
                Ok((n.to_string(), k.parse().map_err(|_| Error::Checkpoint(format!("bad manifest line `{l}`")))?))
            })
            .collect::<Result<_>>()?;
        let progress: Progress = serde_json::from_str(&r.text()?).map_err(|e| Error::Checkpoint(format!("bad progress record: {e}")))?;
        let scalars = r.reals()?;
        if scalars.len() != 4 {
            return Err(Error::Checkpoint("bad scalar section".into()));
        }
        let params = r.reals()?;
        let optimizer_first = r.reals()?;
        let optimizer_second = r.reals()?;
        let n_states = r.u64()?;
        let states = (0..n_states).map(|_| r.reals()).collect::<Result<_>>()?;
        if !r.buf.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            vocab,
            manifest,
            params,
            optimizer_first,
            optimizer_second,
            learning_rate: scalars[0],
            norm_ema: (scalars[2] != 0.0).then_some(scalars[1]),
            best_metric: scalars[3],
            progress,
            states,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    fn check_manifest(&self, expected: &[(String, usize)]) -> Result<()> {
        if self.manifest != expected {
            return Err(Error::Checkpoint("parameter manifest does not match the configured model".into()));
        }
        check_len("checkpoint parameters", expected.iter().map(|(_, n)| n).sum(), self.params.len())?;
        check_len("checkpoint optimizer state", self.params.len(), self.optimizer_first.len())?;
        check_len("checkpoint optimizer state", self.params.len(), self.optimizer_second.len())
    }

    fn restore_trainer(&self, t: &mut Trainer) {
        t.state = OptimizerState {
            first: self.optimizer_first.clone(),
            second: self.optimizer_second.clone(),
            steps: self.progress.optimizer_steps,
        };
        t.optimizer.learning_rate = self.learning_rate;
        t.norm_ema = self.norm_ema;
        t.updates = self.progress.updates;
        t.skipped = self.progress.skipped;
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// A resumable training run of either task.
pub trait Run {
    fn config(&self) -> &RunConfig;
    fn trainer(&self) -> &Trainer;
    fn epoch(&self) -> u64;
    fn step(&mut self, log: &mut dyn FnMut(&UpdateRecord)) -> Result<UpdateRecord>;
    /// Validation score; lower is better.
    fn validation_metric(&self) -> Result<Real>;
    fn metric_name(&self) -> &'static str;
    fn checkpoint(&self) -> Checkpoint;
    fn best_metric(&self) -> Real;
    fn stale_epochs(&self) -> u64;
    fn record_validation(&mut self, metric: Real) -> bool;
}

/// Character-level language model run over one corpus.
#[derive(Clone, Debug)]
pub struct CharlmRun {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub split: CorpusSplit,
    pub model: Model,
    pub trainer: StreamTrainer,
    pub best_metric: Real,
    pub stale_epochs: u64,
}

impl CharlmRun {
    pub fn model_config(config: &RunConfig, vocab: &Vocabulary) -> ModelConfig {
        config.model.to_config(vocab.len(), vocab.len())
    }

    pub fn new(config: RunConfig, raw: &[u8]) -> Result<Self> {
        let o = &config.charlm;
        let (vocab, split) = prepare_corpus(raw, o.vocab_size, o.mode, o.split)?;
        let mut rng = Rng::new(config.seed);
        let model = Model::new(CharlmRun::model_config(&config, &vocab), &mut rng)?;
        let trainer = StreamTrainer::new(&model, config.optimizer_config(), config.explosion.clone(), o.batch, split.train.len())?;
        Ok(CharlmRun { config, vocab, split, model, trainer, best_metric: Real::INFINITY, stale_epochs: 0 })
    }

    /// Rebuilds a run from a checkpoint; the corpus must produce the stored vocabulary.
    pub fn resume(ck: &Checkpoint, raw: &[u8]) -> Result<Self> {
        let mut run = CharlmRun::new(ck.config.clone(), raw)?;
        let stored = Vocabulary::from_sidecar(&ck.vocab)?;
        if stored != run.vocab {
            return Err(Error::Data("vocabulary mismatch: the corpus does not reproduce the checkpoint vocabulary".into()));
        }
        ck.check_manifest(&run.model.params.manifest())?;
        run.model.params.set_flat(&ck.params)?;
        ck.restore_trainer(&mut run.trainer.trainer);
        let t = &mut run.trainer;
        if ck.states.len() != t.states.len() {
            return Err(Error::Checkpoint("carried state count does not match n_streams".into()));
        }
        t.states = ck.states.iter().map(|s| StackState::from_flat(&run.model.cfg, s)).collect::<Result<_>>()?;
        t.epoch = ck.progress.epoch;
        t.position = ck.progress.position;
        t.since_reset = ck.progress.since_reset;
        run.best_metric = ck.best_metric;
        run.stale_epochs = ck.progress.stale_epochs;
        Ok(run)
    }
}

impl Run for CharlmRun {
    fn config(&self) -> &RunConfig {
        &self.config
    }

    fn trainer(&self) -> &Trainer {
        &self.trainer.trainer
    }

    fn epoch(&self) -> u64 {
        self.trainer.epoch
    }

    fn step(&mut self, log: &mut dyn FnMut(&UpdateRecord)) -> Result<UpdateRecord> {
        self.trainer.step(&mut self.model, &self.split.train, log)
    }

    fn validation_metric(&self) -> Result<Real> {
        evaluate_bpc(&self.model, &self.split.valid)
    }

    fn metric_name(&self) -> &'static str {
        "valid_bpc"
    }

    fn checkpoint(&self) -> Checkpoint {
        let t = &self.trainer;
        Checkpoint {
            config: self.config.clone(),
            vocab: self.vocab.to_sidecar(),
            manifest: self.model.params.manifest(),
            params: self.model.params.to_flat(),
            optimizer_first: t.trainer.state.first.clone(),
            optimizer_second: t.trainer.state.second.clone(),
            learning_rate: t.trainer.learning_rate(),
            norm_ema: t.trainer.norm_ema,
            best_metric: self.best_metric,
            progress: Progress {
                updates: t.trainer.updates,
                skipped: t.trainer.skipped,
                optimizer_steps: t.trainer.state.steps,
                epoch: t.epoch,
                position: t.position,
                since_reset: t.since_reset,
                stale_epochs: self.stale_epochs,
            },
            states: t.states.iter().map(StackState::to_flat).collect(),
        }
    }

    fn best_metric(&self) -> Real {
        self.best_metric
    }

    fn stale_epochs(&self) -> u64 {
        self.stale_epochs
    }

    fn record_validation(&mut self, metric: Real) -> bool {
        record(&mut self.best_metric, &mut self.stale_epochs, metric)
    }
}

fn record(best: &mut Real, stale: &mut u64, metric: Real) -> bool {
    if metric < *best {
        *best = metric;
        *stale = 0;
        true
    } else {
        *stale += 1;
        false
    }
}

/// Encoded program-evaluation splits plus the training scripts for overlap checks.
#[derive(Clone, Debug)]
pub struct ProgevalData {
    pub train: Vec<EncodedSample>,
    pub valid: Vec<EncodedSample>,
    pub test: Vec<EncodedSample>,
    pub train_scripts: HashSet<String>,
}

impl ProgevalData {
    pub fn from_samples(train: &[ProgramSample], valid: &[ProgramSample], test: &[ProgramSample]) -> Result<Self> {
        let vocab = TaskVocab::v1();
        let enc = |s: &[ProgramSample]| s.iter().map(|p| encode_sample(&vocab, p)).collect::<Result<Vec<_>>>();
        Ok(ProgevalData {
            train: enc(train)?,
            valid: enc(valid)?,
            test: enc(test)?,
            train_scripts: train.iter().map(|p| p.script.clone()).collect(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        ProgevalData::from_samples(
            &read_dataset(&dir.join("train.tsv"))?,
            &read_dataset(&dir.join("valid.tsv"))?,
            &read_dataset(&dir.join("test.tsv"))?,
        )
    }
}

#[derive(Clone, Debug)]
pub struct ProgevalRun {
    pub config: RunConfig,
    pub data: ProgevalData,
    pub model: EncoderDecoder,
    pub trainer: Seq2SeqTrainer,
    pub best_metric: Real,
    pub stale_epochs: u64,
}

fn prefixed_manifest(ed: &EncoderDecoder) -> Vec<(String, usize)> {
    let mut m: Vec<(String, usize)> = ed.encoder.params.manifest().into_iter().map(|(n, k)| (format!("encoder.{n}"), k)).collect();
    m.extend(ed.decoder.params.manifest().into_iter().map(|(n, k)| (format!("decoder.{n}"), k)));
    m
}

impl ProgevalRun {
    pub fn build_model(config: &RunConfig) -> Result<EncoderDecoder> {
        let mut rng = Rng::new(config.seed);
        let encoder = Model::new(config.model.to_config(INPUT_VOCAB_SIZE, 0), &mut rng)?;
        let decoder = Model::new(config.model.to_config(OUTPUT_VOCAB_SIZE, OUTPUT_VOCAB_SIZE), &mut rng)?;
        EncoderDecoder::from_models(encoder, decoder, config.truncation())
    }

    pub fn new(config: RunConfig, data: ProgevalData) -> Result<Self> {
        let model = ProgevalRun::build_model(&config)?;
        let trainer =
            Seq2SeqTrainer::new(&model, config.optimizer_config(), config.explosion.clone(), config.progeval.batch_size, config.seed)?;
        Ok(ProgevalRun { config, data, model, trainer, best_metric: Real::INFINITY, stale_epochs: 0 })
    }

    pub fn resume(ck: &Checkpoint, data: ProgevalData) -> Result<Self> {
        let mut run = ProgevalRun::new(ck.config.clone(), data)?;
        ck.check_manifest(&prefixed_manifest(&run.model))?;
        run.model.set_flat(&ck.params)?;
        ck.restore_trainer(&mut run.trainer.trainer);
        run.trainer.epoch = ck.progress.epoch;
        run.trainer.position = ck.progress.position;
        run.best_metric = ck.best_metric;
        run.stale_epochs = ck.progress.stale_epochs;
        Ok(run)
    }

    /// Loads only the model of a progeval checkpoint.
    pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<EncoderDecoder> {
        if ck.config.task != Task::Progeval {
            return Err(Error::Checkpoint("checkpoint is not a progeval model".into()));
        }
        let mut ed = ProgevalRun::build_model(&ck.config)?;
        ck.check_manifest(&prefixed_manifest(&ed))?;
        ed.set_flat(&ck.params)?;
        Ok(ed)
    }
}

impl Run for ProgevalRun {
    fn config(&self) -> &RunConfig {
        &self.config
    }

    fn trainer(&self) -> &Trainer {
        &self.trainer.trainer
    }

    fn epoch(&self) -> u64 {
        self.trainer.epoch
    }

    fn step(&mut self, log: &mut dyn FnMut(&UpdateRecord)) -> Result<UpdateRecord> {
        self.trainer.step(&mut self.model, &self.data.train, log)
    }

    fn validation_metric(&self) -> Result<Real> {
        mean_nll(&self.model, &self.data.valid)
    }

    fn metric_name(&self) -> &'static str {
        "valid_nll"
    }

    fn checkpoint(&self) -> Checkpoint {
        let t = &self.trainer.trainer;
        Checkpoint {
            config: self.config.clone(),
            vocab: String::new(),
            manifest: prefixed_manifest(&self.model),
            params: self.model.to_flat(),
            optimizer_first: t.state.first.clone(),
            optimizer_second: t.state.second.clone(),
            learning_rate: t.learning_rate(),
            norm_ema: t.norm_ema,
            best_metric: self.best_metric,
            progress: Progress {
                updates: t.updates,
                skipped: t.skipped,
                optimizer_steps: t.state.steps,
                epoch: self.trainer.epoch,
                position: self.trainer.position,
                since_reset: 0,
                stale_epochs: self.stale_epochs,
            },
            states: Vec::new(),
        }
    }

    fn best_metric(&self) -> Real {
        self.best_metric
    }

    fn stale_epochs(&self) -> u64 {
        self.stale_epochs
    }

    fn record_validation(&mut self, metric: Real) -> bool {
        record(&mut self.best_metric, &mut self.stale_epochs, metric)
    }
}

/// Loads a charlm model and vocabulary from a checkpoint.
pub fn charlm_model_from_checkpoint(ck: &Checkpoint) -> Result<(Model, Vocabulary)> {
    if ck.config.task != Task::Charlm {
        return Err(Error::Checkpoint("checkpoint is not a charlm model".into()));
    }
    let vocab = Vocabulary::from_sidecar(&ck.vocab)?;
    let mut model = Model::new(CharlmRun::model_config(&ck.config, &vocab), &mut Rng::new(0))?;
    ck.check_manifest(&model.params.manifest())?;
    model.params.set_flat(&ck.params)?;
    Ok((model, vocab))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLine {
    pub epoch: u64,
    pub updates: u64,
    pub train_nll: Real,
    pub metric: &'static str,
    pub value: Real,
    pub lr: Real,
    pub skipped: usize,
    pub improved: bool,
    pub checkpoint_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub task: Task,
    pub updates: u64,
    pub epochs_completed: u64,
    pub metric: &'static str,
    pub best_value: Real,
    pub best_checkpoint: PathBuf,
    pub best_checkpoint_sha256: String,
    pub stopped_early: bool,
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Epoch loop with validation, patience-based stopping and checkpoints in `out`.
///
/// Update records are buffered and flushed to `train.log.jsonl` once per epoch.
pub fn train_loop(run: &mut dyn Run, out: &Path) -> Result<TrainReport> {
    let cfg = run.config().clone();
    let max_epochs = cfg.max_epochs();
    let budget = cfg.max_updates.unwrap_or(u64::MAX);
    let log_path = out.join("train.log.jsonl");
    let best_path = out.join("best.ckpt");
    let mut best_sha = if best_path.is_file() { file_sha256(&best_path)? } else { String::new() };
    let mut stopped_early = false;
    while run.epoch() < max_epochs && run.trainer().updates < budget {
        let epoch = run.epoch();
        let mut lines = String::new();
        let (mut nll, mut n, mut skipped) = (0.0, 0usize, 0usize);
        while run.epoch() == epoch && run.trainer().updates < budget {
            let r = run.step(&mut |r| {
                lines.push_str(&serde_json::to_string(r).expect("record serializes"));
                lines.push('\n');
            })?;
            nll += r.nll;
            n += 1;
            skipped += usize::from(!r.applied);
        }
        append(&log_path, &lines)?;
        let value = run.validation_metric()?;
        let improved = run.record_validation(value);
        let ck = run.checkpoint();
        let sha = ck.save(&out.join("last.ckpt"))?;
        if improved {
            best_sha = ck.save(&best_path)?;
        }
        let line = EpochLine {
            epoch,
            updates: run.trainer().updates,
            train_nll: nll / n.max(1) as Real,
            metric: run.metric_name(),
            value,
            lr: run.trainer().learning_rate(),
            skipped,
            improved,
            checkpoint_sha256: sha,
        };
        append(&out.join("epochs.jsonl"), &(serde_json::to_string(&line).expect("line serializes") + "\n"))?;
        if run.stale_epochs() >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let report = TrainReport {
        task: cfg.task,
        updates: run.trainer().updates,
        epochs_completed: run.epoch(),
        metric: run.metric_name(),
        best_value: run.best_metric(),
        best_checkpoint: best_path,
        best_checkpoint_sha256: best_sha,
        stopped_early,
    };
    write_file(&out.join("train_report.json"), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok(report)
}

#[derive(Parser, Debug)]
#[command(name = "gfrnn", version, about = "Gated-feedback RNN training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes checkpoints and logs into the run directory.
    Train(TrainArgs),
    /// Score a checkpoint on held-out data.
    Eval(EvalArgs),
    /// Sample text from a character-level checkpoint.
    Generate(GenerateArgs),
    /// Write a program-evaluation dataset.
    Synth(SynthArgs),
    /// Count parameters of a model configuration.
    Params(ParamsArgs),
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// TOML run configuration supplying defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint; its configuration replaces `--config`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub unit: Option<String>,
    /// Layer sizes, e.g. `3x200` or `200,150`.
    #[arg(long)]
    pub units: Option<String>,
    #[arg(long)]
    pub freeze_gates: bool,
    #[arg(long)]
    pub lr: Option<Real>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub patience: Option<u64>,
    #[arg(long)]
    pub max_updates: Option<u64>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_streams: Option<usize>,
    #[arg(long)]
    pub subseq_len: Option<usize>,
    #[arg(long)]
    pub reset_interval: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub truncation: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split to score: train, valid or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Corpus file (defaults to the training corpus).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Dataset directory (defaults to the training dataset).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Second progeval checkpoint; enables the difficulty heatmap.
    #[arg(long)]
    pub against: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 3])]
    pub nestings: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 3, 4, 5])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub samples_per_cell: usize,
    /// Seed for heatmap test sets (defaults to the run seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report directory (defaults to the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "The ")]
    pub seed_text: String,
    #[arg(long, default_value_t = DEFAULT_GENERATE_LEN)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: Real,
    /// Sampling seed (defaults to the run seed).
    #[arg(long)]
    pub rng_seed: Option<u64>,
    /// Write the sample here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Training samples.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub valid: usize,
    #[arg(long, default_value_t = 2000)]
    pub test: usize,
    /// Inclusive nesting range, e.g. `1,3`.
    #[arg(long, value_delimiter = ',')]
    pub nesting: Option<Vec<usize>>,
    /// Inclusive target-length range, e.g. `1,5`.
    #[arg(long, value_delimiter = ',')]
    pub length: Option<Vec<usize>>,
    /// 320 000 samples, nesting 1 to 5, lengths 1 to 10.
    #[arg(long)]
    pub paper: bool,
}

#[derive(Args, Debug, Default)]
pub struct ParamsArgs {
    /// Print the paper's model-size table instead of one model.
    #[arg(long)]
    pub table: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub unit: Option<String>,
    #[arg(long)]
    pub units: Option<String>,
    #[arg(long, default_value_t = PAPER_VOCAB_SIZE)]
    pub vocab: usize,
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub skip_connections: bool,
    #[arg(long)]
    pub all_layer_unit_gates: bool,
    #[arg(long)]
    pub readout_all_layers: bool,
}

/// `3x200` → `[200, 200, 200]`; `200,150` → `[200, 150]`.
pub fn parse_units(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::config("units", format!("cannot parse `{s}`; use `3x200` or `200,150`"));
    if let Some((l, n)) = s.split_once('x') {
        let l: usize = l.trim().parse().map_err(|_| bad())?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        return Ok(vec![n; l]);
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse::<toml::Table>().map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

fn sub_table<'a>(t: &'a mut toml::Table, key: &str) -> &'a mut toml::Table {
    let entry = t.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    if !entry.is_table() {
        *entry = toml::Value::Table(toml::Table::new());
    }
    entry.as_table_mut().unwrap()
}

fn path_value(p: &Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

/// Resolves the run configuration: checkpoint or config file first, then flags.
pub fn resolve_train_config(args: &TrainArgs) -> Result<(RunConfig, Option<Checkpoint>)> {
    let ck = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut t = match (&ck, &args.config) {
        (Some(ck), _) => ck.config.to_toml().parse::<toml::Table>().expect("own toml parses"),
        (None, Some(p)) => read_table(p)?,
        (None, None) => toml::Table::new(),
    };
    let int = |v: u64| toml::Value::Integer(v as i64);
    if let Some(v) = &args.task {
        t.insert("task".into(), toml::Value::String(v.clone()));
    }
    if let Some(v) = args.seed {
        t.insert("seed".into(), int(v));
    }
    if let Some(v) = args.epochs {
        t.insert("epochs".into(), int(v));
    }
    if let Some(v) = args.patience {
        t.insert("patience".into(), int(v));
    }
    if let Some(v) = args.max_updates {
        t.insert("max_updates".into(), int(v));
    }
    {
        let m = sub_table(&mut t, "model");
        if let Some(v) = &args.arch {
            let arch: Arch = v.parse()?;
            m.insert("arch".into(), toml::Value::String(arch.to_string()));
        }
        if let Some(v) = &args.unit {
            let unit: UnitKind = v.parse()?;
            m.insert("unit".into(), toml::Value::String(unit.to_string()));
        }
        if let Some(v) = &args.units {
            m.insert("units_per_layer".into(), toml::Value::Array(parse_units(v)?.into_iter().map(|n| int(n as u64)).collect()));
        }
        if args.freeze_gates {
            m.insert("freeze_gates_to_one".into(), toml::Value::Boolean(true));
        }
    }
    {
        let p = sub_table(&mut t, "paths");
        for (key, v) in [("corpus", &args.corpus), ("dataset", &args.dataset), ("out", &args.out)] {
            if let Some(v) = v {
                p.insert(key.into(), path_value(v));
            }
        }
    }
    {
        let c = sub_table(&mut t, "charlm");
        if let Some(v) = args.vocab_size {
            c.insert("vocab_size".into(), int(v as u64));
        }
        let b = sub_table(c, "batch");
        for (key, v) in [("n_streams", args.n_streams), ("subseq_len", args.subseq_len), ("reset_interval", args.reset_interval)] {
            if let Some(v) = v {
                b.insert(key.into(), int(v as u64));
            }
        }
        if b.is_empty() {
            c.remove("batch");
        } else {
            for (key, v) in [("n_streams", 100), ("subseq_len", 100), ("reset_interval", 100)] {
                b.entry(key.to_string()).or_insert(int(v));
            }
        }
    }
    {
        let p = sub_table(&mut t, "progeval");
        if let Some(v) = args.batch_size {
            p.insert("batch_size".into(), int(v as u64));
        }
        if let Some(v) = args.truncation {
            p.insert("truncation".into(), int(v as u64));
        }
    }
    let mut cfg: RunConfig = t.try_into().map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
    if let Some(lr) = args.lr {
        let mut o = cfg.optimizer_config();
        o.learning_rate = lr;
        cfg.optimizer = Some(o);
    }
    cfg.validate()?;
    if cfg.paths.out.is_none() {
        return Err(Error::config("paths.out", "a run directory is required (--out)"));
    }
    Ok((cfg, ck))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(args: &TrainArgs) -> Result<String> {
    let (cfg, ck) = resolve_train_config(args)?;
    let out = cfg.paths.out.clone().unwrap();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    if ck.is_none() {
        for f in ["train.log.jsonl", "epochs.jsonl"] {
            let p = out.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    let report = match cfg.task {
        Task::Charlm => {
            let raw = read_bytes(cfg.paths.corpus.as_ref().unwrap())?;
            let mut run = match &ck {
                Some(ck) => {
                    let mut c = ck.clone();
                    c.config = cfg.clone();
                    CharlmRun::resume(&c, &raw)?
                }
                None => CharlmRun::new(cfg.clone(), &raw)?,
            };
            run.vocab.save(&out.join("vocab.txt"))?;
            train_loop(&mut run, &out)?
        }
        Task::Progeval => {
            let data = ProgevalData::load(cfg.paths.dataset.as_ref().unwrap())?;
            let mut run = match &ck {
                Some(ck) => {
                    let mut c = ck.clone();
                    c.config = cfg.clone();
                    ProgevalRun::resume(&c, data)?
                }
                None => ProgevalRun::new(cfg.clone(), data)?,
            };
            train_loop(&mut run, &out)?
        }
    };
    Ok(format!(
        "trained {} updates over {} epochs; best {} = {:.6} ({})\n",
        report.updates,
        report.epochs_completed,
        report.metric,
        report.best_value,
        report.best_checkpoint.display()
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub task: Task,
    pub split: String,
    pub positions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bpc: Option<Real>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Real>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<Real>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmap_against: Option<String>,
}

fn pick_split<'a, T>(split: &str, train: &'a [T], valid: &'a [T], test: &'a [T]) -> Result<&'a [T]> {
    match split {
        "train" => Ok(train),
        "valid" => Ok(valid),
        "test" => Ok(test),
        other => Err(Error::config("split", format!("unknown split `{other}`"))),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(String, EvalReport)> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let sha = file_sha256(&args.checkpoint)?;
    let out = args.out.clone().unwrap_or_else(|| args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut report = EvalReport {
        checkpoint: args.checkpoint.clone(),
        checkpoint_sha256: sha,
        task: ck.config.task,
        split: args.split.clone(),
        positions: 0,
        bpc: None,
        accuracy: None,
        nll: None,
        heatmap_against: None,
    };
    let mut text = String::new();
    match ck.config.task {
        Task::Charlm => {
            let (model, vocab) = charlm_model_from_checkpoint(&ck)?;
            let corpus = args
                .corpus
                .clone()
                .or(ck.config.paths.corpus.clone())
                .ok_or_else(|| Error::config("corpus", "no corpus given and none recorded in the checkpoint"))?;
            let o = &ck.config.charlm;
            let (v2, split) = prepare_corpus(&read_bytes(&corpus)?, o.vocab_size, o.mode, o.split)?;
            if v2 != vocab {
                return Err(Error::Data(format!(
                    "vocabulary mismatch: {} does not reproduce the checkpoint vocabulary ({} vs {} symbols)",
                    corpus.display(),
                    v2.len(),
                    vocab.len()
                )));
            }
            let seq = pick_split(&args.split, &split.train, &split.valid, &split.test)?;
            let bpc = evaluate_bpc(&model, seq)?;
            report.positions = seq.len() - 1;
            report.bpc = Some(bpc);
            text.push_str(&format!("{} bpc: {bpc:.6} over {} positions\n", args.split, report.positions));
        }
        Task::Progeval => {
            let ed = ProgevalRun::model_from_checkpoint(&ck)?;
            let dir = args
                .dataset
                .clone()
                .or(ck.config.paths.dataset.clone())
                .ok_or_else(|| Error::config("dataset", "no dataset given and none recorded in the checkpoint"))?;
            let data = ProgevalData::load(&dir)?;
            let set = pick_split(&args.split, &data.train, &data.valid, &data.test)?;
            let acc = teacher_forced_accuracy(&ed, set)?;
            let nll = mean_nll(&ed, set)?;
            report.positions = set.iter().map(EncodedSample::positions).sum();
            report.accuracy = Some(acc);
            report.nll = Some(nll);
            text.push_str(&format!("{} accuracy: {acc:.6}, nll/symbol: {nll:.6}\n", args.split));
            if let Some(other_path) = &args.against {
                let other_ck = Checkpoint::load(other_path)?;
                let other = ProgevalRun::model_from_checkpoint(&other_ck)?;
                // The gated-feedback model goes in the second slot when exactly one of them is one.
                let (stacked, gf) = if other_ck.config.model.arch == Arch::GatedFeedback && ck.config.model.arch != Arch::GatedFeedback {
                    (&ed, &other)
                } else {
                    (&other, &ed)
                };
                let grid =
                    GridSpec { nestings: args.nestings.clone(), lengths: args.lengths.clone(), samples_per_cell: args.samples_per_cell };
                let rng = Rng::new(args.seed.unwrap_or(ck.config.seed));
                let h = build_heatmap(stacked, gf, &grid, &data.train_scripts, &rng)?;
                h.write_csvs(&out)?;
                report.heatmap_against = Some(file_sha256(other_path)?);
                text.push_str(&format!("heatmaps written to {}\n", out.display()));
            }
        }
    }
    write_file(&out.join("eval_config.toml"), &ck.config.to_toml())?;
    let path = out.join(format!("eval_{}.json", args.split));
    write_file(&path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok((text, report))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<String> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (model, vocab) = charlm_model_from_checkpoint(&ck)?;
    let seed = args.seed_text.as_bytes();
    if seed.is_empty() {
        return Err(Error::config("seed_text", "must not be empty"));
    }
    if vocab.decode(&vocab.encode(seed)) != seed {
        return Err(Error::config("seed_text", "contains characters outside the checkpoint vocabulary"));
    }
    let mut rng = Rng::new(args.rng_seed.unwrap_or(ck.config.seed));
    let bytes = generate_text(&model, &vocab, seed, args.n, &mut rng, args.temperature)?;
    let text = String::from_utf8_lossy(&bytes).into_owned();
    match &args.out {
        Some(p) => {
            write_file(p, &text)?;
            let snapshot = format!(
                "checkpoint = {:?}\ncheckpoint_sha256 = {:?}\nseed_text = {:?}\nn = {}\ntemperature = {}\nrng_seed = {}\n",
                args.checkpoint.display().to_string(),
                file_sha256(&args.checkpoint)?,
                args.seed_text,
                args.n,
                args.temperature,
                args.rng_seed.unwrap_or(ck.config.seed)
            );
            write_file(&p.with_extension("config.toml"), &snapshot)?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

/// Synthesis settings written next to the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub curriculum: Curriculum,
}

pub fn resolve_synth_config(args: &SynthArgs) -> Result<SynthConfig> {
    let mut curriculum = if args.paper { Curriculum::PAPER } else { Curriculum::DESK };
    let range = |v: &Vec<usize>, field: &str| match v[..] {
        [lo, hi] => Ok((lo, hi)),
        [n] => Ok((n, n)),
        _ => Err(Error::config(field, "expected `lo,hi`")),
    };
    if let Some(v) = &args.nesting {
        curriculum.nesting = range(v, "nesting")?;
    }
    if let Some(v) = &args.length {
        curriculum.length = range(v, "length")?;
    }
    curriculum.validate()?;
    let train = args.count.unwrap_or(if args.paper { Curriculum::PAPER_TRAIN_SAMPLES } else { Curriculum::DESK_TRAIN_SAMPLES });
    Ok(SynthConfig { seed: args.seed, train, valid: args.valid, test: args.test, curriculum })
}

pub fn cmd_synth(args: &SynthArgs) -> Result<String> {
    let cfg = resolve_synth_config(args)?;
    let mut rng = Rng::new(cfg.seed);
    let splits = build_splits(&cfg.curriculum, (cfg.train, cfg.valid, cfg.test), &mut rng)?;
    for s in splits.train.iter().chain(&splits.valid).chain(&splits.test) {
        let got = interpret(&s.script)?;
        if got != s.target {
            return Err(Error::Generation(format!("oracle disagrees on {:?}: {got} vs {}", s.script, s.target)));
        }
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_dataset(&args.out.join("train.tsv"), &splits.train)?;
    write_dataset(&args.out.join("valid.tsv"), &splits.valid)?;
    write_dataset(&args.out.join("test.tsv"), &splits.test)?;
    write_file(&args.out.join("synth.toml"), &toml::to_string(&cfg).expect("synth config serializes"))?;
    Ok(format!(
        "wrote {} / {} / {} samples to {} (nesting {:?}, length {:?}); all verified by the interpreter\n",
        cfg.train,
        cfg.valid,
        cfg.test,
        args.out.display(),
        cfg.curriculum.nesting,
        cfg.curriculum.length
    ))
}

fn format_breakdown(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    for (name, n) in parameter_breakdown(cfg) {
        s.push_str(&format!("{name:<24}{n:>12}\n"));
    }
    s.push_str(&format!("{:<24}{:>12}\n", "total", count_parameters(cfg)));
    s
}

pub fn cmd_params(args: &ParamsArgs) -> Result<String> {
    if args.table {
        let mut s = String::from("unit  architecture           units     params  vs single\n");
        let mut base = 0usize;
        for row in paper_capacity_rows() {
            let n = count_parameters(&paper_capacity_config(&row, args.vocab));
            if row.arch == Arch::Single {
                base = n;
            }
            let units = format!("{}x{}", row.units_per_layer.len(), row.units_per_layer[0]);
            s.push_str(&format!(
                "{:<5} {:<22} {:<7} {:>10}  {:+.1}%\n",
                row.unit.to_string(),
                row.label,
                units,
                n,
                100.0 * (n as Real / base as Real - 1.0)
            ));
        }
        return Ok(s);
    }
    let cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let run = RunConfig::from_toml(&text)?;
            match run.task {
                Task::Charlm => run.model.to_config(run.charlm.vocab_size, run.charlm.vocab_size),
                Task::Progeval => {
                    let enc = run.model.to_config(INPUT_VOCAB_SIZE, 0);
                    let dec = run.model.to_config(OUTPUT_VOCAB_SIZE, OUTPUT_VOCAB_SIZE);
                    enc.validate()?;
                    dec.validate()?;
                    return Ok(format!(
                        "encoder\n{}decoder\n{}total {}\n",
                        format_breakdown(&enc),
                        format_breakdown(&dec),
                        count_parameters(&enc) + count_parameters(&dec)
                    ));
                }
            }
        }
        None => {
            let field = |v: &Option<String>, name: &str| v.clone().ok_or_else(|| Error::config(name, "required without --config"));
            let arch: Arch = field(&args.arch, "arch")?.parse()?;
            let unit: UnitKind = field(&args.unit, "unit")?.parse()?;
            let units = parse_units(&field(&args.units, "units")?)?;
            let mut cfg = ModelConfig::new(arch, unit, units, args.vocab, args.vocab);
            cfg.strict = args.strict;
            cfg.skip_connections = args.skip_connections;
            cfg.readout_all_layers = args.readout_all_layers;
            if args.all_layer_unit_gates {
                cfg.unit_gate_source = UnitGateSource::AllLayers;
            }
            cfg
        }
    };
    cfg.validate()?;
    Ok(format_breakdown(&cfg))
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a).map(|(t, _)| t),
        Command::Generate(a) => cmd_generate(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Params(a) => cmd_params(&a),
    }
}

/// Parses process arguments, runs the command and maps errors to exit code 1.
pub fn main_entry() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
