//! Staged transfer learning: each stage trains the previous stage's weights
//! on its own corpus with a fresh AdamW state, evaluating after every epoch.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StageRecord, CHECKPOINT_VERSION};
pub use optim::{adamw_step, adamw_update, OptimizerConfig, OptimizerState, DEFAULT_FINAL_LR, DEFAULT_LR};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_corpus, make_synthetic, split_corpus, Corpus, StageRole};
use crate::error::{Error, Result};
use crate::generation::{greedy_decode, GenerationConfig};
use crate::model::{forward_loss, loss_and_grads, ModelConfig, TokenPair};
use crate::rouge::{corpus_rouge, RougeReport};
use crate::tokenizer::{Vocab, EOS_ID};

/// Where a stage's pairs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// A JSONL corpus file.
    Path(PathBuf),
    /// Generated in memory by [`make_synthetic`].
    Synthetic {
        role: StageRole,
        size: usize,
        #[serde(default = "one")]
        length_scale: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> usize {
    1
}

impl CorpusSource {
    pub fn load(&self) -> Result<Corpus> {
        match self {
            CorpusSource::Path(p) => load_corpus(p),
            CorpusSource::Synthetic { role, size, length_scale, seed } => {
                Ok(make_synthetic(*role, *size, *length_scale, *seed)?.corpus)
            }
        }
    }
}

fn default_batch_size() -> usize {
    2
}

fn default_eval_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    pub corpus: CorpusSource,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Held-out share of the corpus; 0 evaluates on the training pairs.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Longest source in tokens including bos/eos; defaults to the model
    /// maximum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_src_len: Option<usize>,
    /// Longest target in tokens including bos/eos; defaults to the model
    /// maximum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tgt_len: Option<usize>,
}

impl StageConfig {
    pub fn src_limit(&self, model: &ModelConfig) -> usize {
        self.max_src_len.unwrap_or(model.max_src_pos)
    }

    pub fn tgt_limit(&self, model: &ModelConfig) -> usize {
        self.max_tgt_len.unwrap_or(model.max_tgt_pos)
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let err = |msg: String| Err(Error::Config(format!("stage `{}`: {msg}", self.name)));
        if self.name.is_empty() {
            return Err(Error::Config("stage name must be non-empty".into()));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return err(format!("eval_fraction must be in [0, 1), got {}", self.eval_fraction));
        }
        let (src, tgt) = (self.src_limit(model), self.tgt_limit(model));
        if !(2..=model.max_src_pos).contains(&src) {
            return err(format!("max_src_len must be in 2..={}, got {src}", model.max_src_pos));
        }
        if !(2..=model.max_tgt_pos).contains(&tgt) {
            return err(format!("max_tgt_len must be in 2..={}, got {tgt}", model.max_tgt_pos));
        }
        if let CorpusSource::Synthetic { size: 0, .. } | CorpusSource::Synthetic { length_scale: 0, .. } = self.corpus
        {
            return err("synthetic size and length_scale must be at least 1".into());
        }
        self.optimizer.validate().or_else(|e| err(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    /// Vocabulary file; built from every stage corpus when absent. Ignored
    /// when starting from a checkpoint, which carries its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    /// Weight initialization seed.
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    /// Parses a config document. A final stage without an explicit `lr`
    /// gets [`DEFAULT_FINAL_LR`].
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        if let Some(last) = value.get_mut("stages").and_then(|s| s.as_array_mut()).and_then(|s| s.last_mut()) {
            if let Some(stage) = last.as_object_mut() {
                let opt = stage.entry("optimizer").or_insert_with(|| serde_json::json!({}));
                if let Some(opt) = opt.as_object_mut() {
                    opt.entry("lr").or_insert_with(|| serde_json::json!(DEFAULT_FINAL_LR));
                }
            }
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.init_checkpoint.as_mut().map(rebase);
        cfg.vocab.as_mut().map(rebase);
        for stage in &mut cfg.stages {
            if let CorpusSource::Path(p) = &mut stage.corpus {
                rebase(p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("a pipeline needs at least one stage".into()));
        }
        let mut names = HashSet::new();
        for stage in &self.stages {
            if !names.insert(stage.name.as_str()) {
                return Err(Error::Config(format!("duplicate stage name `{}`", stage.name)));
            }
            stage.validate(&self.model)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub rouge: RougeReport,
}

/// Per-epoch metrics of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub stage: String,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub truncated: usize,
    pub epochs: Vec<EpochMetrics>,
}

/// One JSON object per epoch across all stages.
pub fn metrics_jsonl(logs: &[MetricLog]) -> String {
    let mut out = String::new();
    for e in logs.iter().flat_map(|l| &l.epochs) {
        out.push_str(&serde_json::to_string(e).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub epochs: usize,
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub truncated: usize,
    pub last: Option<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub stages: Vec<StageSummary>,
    pub provenance: Vec<StageRecord>,
    pub optimizer_steps: u64,
}

impl PipelineSummary {
    pub fn new(logs: &[MetricLog], checkpoint: &Checkpoint) -> Self {
        let stages = logs
            .iter()
            .map(|l| StageSummary {
                name: l.stage.clone(),
                epochs: l.epochs.len(),
                train_pairs: l.train_pairs,
                eval_pairs: l.eval_pairs,
                truncated: l.truncated,
                last: l.epochs.last().cloned(),
            })
            .collect();
        Self { stages, provenance: checkpoint.provenance.clone(), optimizer_steps: checkpoint.optimizer.step }
    }
}

/// Encodes with bos/eos and keeps the head of anything over `limit`,
/// re-terminating it with eos. Returns whether truncation happened.
pub fn encode_truncated(vocab: &Vocab, text: &str, limit: usize) -> (Vec<usize>, bool) {
    let mut ids = vocab.encode(text, true);
    if ids.len() <= limit {
        return (ids, false);
    }
    ids.truncate(limit - 1);
    ids.push(EOS_ID);
    (ids, true)
}

struct Prepared {
    pairs: Vec<TokenPair>,
    references: Vec<String>,
}

fn prepare(corpus: &Corpus, vocab: &Vocab, src_limit: usize, tgt_limit: usize, truncated: &mut usize) -> Prepared {
    let mut pairs = Vec::with_capacity(corpus.len());
    let mut references = Vec::with_capacity(corpus.len());
    for p in &corpus.pairs {
        let (src, cut_src) = encode_truncated(vocab, &p.source, src_limit);
        let (tgt, cut_tgt) = encode_truncated(vocab, &p.target, tgt_limit);
        if cut_src || cut_tgt {
            *truncated += 1;
        }
        pairs.push((src, tgt));
        references.push(p.target.clone());
    }
    Prepared { pairs, references }
}

/// Trains `start` on one stage. Moments start from zero; the returned
/// checkpoint carries the stage's final moments and an extended history.
pub fn run_stage(start: &Checkpoint, stage: &StageConfig) -> Result<(Checkpoint, MetricLog)> {
    let cfg = &start.config;
    stage.validate(cfg)?;
    let corpus = stage.corpus.load()?;
    let (train, eval) = if stage.eval_fraction == 0.0 {
        (corpus.clone(), corpus)
    } else {
        let split = split_corpus(&corpus, stage.eval_fraction, stage.seed)?;
        (split.train, split.eval)
    };
    let (src_limit, tgt_limit) = (stage.src_limit(cfg), stage.tgt_limit(cfg));
    let mut truncated = 0;
    let train = prepare(&train, &start.vocab, src_limit, tgt_limit, &mut truncated);
    let eval = prepare(&eval, &start.vocab, src_limit, tgt_limit, &mut truncated);
    if truncated > 0 {
        log::warn!("stage `{}`: truncated {truncated} pairs to {src_limit}/{tgt_limit} tokens", stage.name);
    }
    let gen = GenerationConfig { max_new_tokens: tgt_limit - 1 };

    let mut params = start.params.clone();
    let mut state = OptimizerState::zeros(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stage.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(stage.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = MetricLog {
        stage: stage.name.clone(),
        train_pairs: train.pairs.len(),
        eval_pairs: eval.pairs.len(),
        truncated,
        epochs: Vec::with_capacity(stage.epochs),
    };
    let mut order: Vec<usize> = (0..train.pairs.len()).collect();
    for epoch in 1..=stage.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(stage.batch_size).enumerate() {
            let batch: Vec<TokenPair> = chunk.iter().map(|&i| train.pairs[i].clone()).collect();
            let (loss, grads) = loss_and_grads(&params, &batch, cfg, Some(&mut dropout_rng))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: step + 1 });
            }
            adamw_step(&mut params, &grads, &mut state, &stage.optimizer)?;
            total += loss;
            batches += 1;
        }
        let metrics = evaluate(&params, cfg, &start.vocab, &eval, &gen, stage, epoch, total / batches as f64)?;
        log::info!(
            "stage {} epoch {epoch}/{}: train loss {:.4}, eval loss {:.4}, rouge1 f1 {:.4}",
            stage.name,
            stage.epochs,
            metrics.train_loss,
            metrics.eval_loss,
            metrics.rouge.rouge1.f1
        );
        log.epochs.push(metrics);
    }

    let mut provenance = start.provenance.clone();
    provenance.push(StageRecord { stage: stage.name.clone(), epochs: stage.epochs });
    let next = Checkpoint { config: cfg.clone(), vocab: start.vocab.clone(), params, optimizer: state, provenance };
    Ok((next, log))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    params: &crate::model::ModelParams,
    cfg: &ModelConfig,
    vocab: &Vocab,
    eval: &Prepared,
    gen: &GenerationConfig,
    stage: &StageConfig,
    epoch: usize,
    train_loss: f64,
) -> Result<EpochMetrics> {
    let mut loss = 0.0;
    let mut outputs = Vec::with_capacity(eval.pairs.len());
    for (pair, reference) in eval.pairs.iter().zip(&eval.references) {
        loss += forward_loss(params, std::slice::from_ref(pair), cfg)?.item();
        let ids = greedy_decode(params, &pair.0, gen, cfg)?;
        outputs.push((vocab.decode_lossy(&ids), reference.as_str()));
    }
    Ok(EpochMetrics {
        stage: stage.name.clone(),
        epoch,
        train_loss,
        eval_loss: loss / eval.pairs.len() as f64,
        rouge: corpus_rouge(&outputs)?,
    })
}

/// Vocabulary over sources and targets of every stage corpus, capped at
/// the model's embedding size.
pub fn build_vocab(pcfg: &PipelineConfig) -> Result<Vocab> {
    let corpora = pcfg.stages.iter().map(|s| s.corpus.load()).collect::<Result<Vec<_>>>()?;
    let texts = corpora.iter().flat_map(|c| &c.pairs).flat_map(|p| [p.source.as_str(), p.target.as_str()]);
    Vocab::build(texts, 1, pcfg.model.vocab_size)
}

/// Initial checkpoint of a pipeline: `init_checkpoint` if set, otherwise
/// seeded weights over the configured or corpus-built vocabulary.
pub fn initial_checkpoint(pcfg: &PipelineConfig) -> Result<Checkpoint> {
    match &pcfg.init_checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.params_for(&pcfg.model)?;
            Ok(ckpt)
        }
        None => {
            let vocab = match &pcfg.vocab {
                Some(path) => Vocab::load(path)?,
                None => build_vocab(pcfg)?,
            };
            Checkpoint::init(pcfg.model.clone(), vocab, pcfg.seed)
        }
    }
}

/// Runs every stage in order, each starting from the previous stage's
/// weights.
pub fn run_pipeline(pcfg: &PipelineConfig) -> Result<(Checkpoint, Vec<MetricLog>)> {
    pcfg.validate()?;
    let mut ckpt = initial_checkpoint(pcfg)?;
    let mut logs = Vec::with_capacity(pcfg.stages.len());
    for stage in &pcfg.stages {
        let (next, log) =
            run_stage(&ckpt, stage).map_err(|e| Error::Stage { stage: stage.name.clone(), source: Box::new(e) })?;
        ckpt = next;
        logs.push(log);
    }
    Ok((ckpt, logs))
}
