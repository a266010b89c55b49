//! The training loop shared by meta-training and joint training.
//!
//! ```text
//! <out>/last/              checkpoint after the latest completed iteration
//! <out>/best/              checkpoint with the lowest validation WER so far
//! <out>/train_log.ndjson   one record per iteration
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{fomaml_meta_step, joint_train_step, AsrBatch, AsrObjective, Episode, MetaConfig, MetaError};
use crate::data::Utterance;
use crate::decode::DecodeConfig;
use crate::model::{build_model, check_params, GraphemeVocab, ModelConfig};
use crate::numerics::{load_checkpoint, save_checkpoint, AdamState, ParamStore};
use crate::rng::{stream, sub_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Maml,
    Joint,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Maml => "maml",
            Mode::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub meta: MetaConfig,
    pub checkpoint_every: usize,
    /// Iterations between validation passes; 0 validates only at the end.
    pub validate_every: usize,
    /// Validation utterances decoded per validation accent.
    pub val_utterances: usize,
    pub val_decode: DecodeConfig,
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            meta: MetaConfig::default(),
            checkpoint_every: 100,
            validate_every: 100,
            val_utterances: 20,
            val_decode: DecodeConfig::default(),
            dropout: true,
        }
    }
}

pub struct TrainData<'a> {
    pub train: &'a BTreeMap<String, Vec<Utterance>>,
    pub val: &'a BTreeMap<String, Vec<Utterance>>,
    pub vocab: &'a GraphemeVocab,
}

/// Caller metadata stored in each checkpoint's `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: Mode,
    /// Completed iterations.
    pub iteration: usize,
    pub model: ModelConfig,
    pub vocab: GraphemeVocab,
    pub meta_config: MetaConfig,
    pub best_val_wer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub mode: Mode,
    /// Pre-adaptation support loss per sampled accent (empty in joint mode).
    pub per_accent_support_loss: BTreeMap<String, f64>,
    /// Post-adaptation query loss per sampled accent; joint mode logs the
    /// mixed-batch loss under `"mixed"`.
    pub per_accent_query_loss: BTreeMap<String, f64>,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_wer: Option<f64>,
}

pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub iterations: usize,
    pub best_val_wer: Option<f64>,
    pub last_dir: PathBuf,
    pub best_dir: Option<PathBuf>,
}

/// Where training starts from.
pub enum Start {
    Fresh,
    /// Continue a run of the same mode from its checkpoint, optimizer included.
    Resume(PathBuf),
    /// Fresh optimizer from pretrained weights, e.g. meta-training on top of
    /// a joint-trained model.
    Init(PathBuf),
}

pub fn load_trained(dir: &Path) -> Result<(CheckpointMeta, ParamStore<f32>), MetaError> {
    let ck = load_checkpoint::<CheckpointMeta>(dir)?;
    check_params(&ck.meta.model, &ck.params)?;
    Ok((ck.meta, ck.params))
}

/// Episodes for one meta-iteration: `meta_batch` distinct accents drawn
/// uniformly, each with disjoint support and query index sets.
pub fn sample_episodes<U>(
    train: &BTreeMap<String, Vec<U>>,
    cfg: &MetaConfig,
    iteration: usize,
) -> Result<Vec<Episode<Vec<usize>>>, MetaError> {
    let accents: Vec<&String> = train.keys().collect();
    if accents.len() < cfg.meta_batch {
        return Err(MetaError::Config(format!(
            "meta_batch {} exceeds the {} training accents",
            cfg.meta_batch,
            accents.len()
        )));
    }
    let mut rng = stream(cfg.seed, "meta/accents", iteration as u64);
    let mut chosen: Vec<&String> = rand::seq::index::sample(&mut rng, accents.len(), cfg.meta_batch)
        .into_iter()
        .map(|i| accents[i])
        .collect();
    chosen.sort();
    chosen
        .into_iter()
        .map(|a| {
            let n = train[a].len();
            if n < 2 {
                return Err(MetaError::Config(format!(
                    "accent {a} has {n} utterances; an episode needs at least 2"
                )));
            }
            let (s, q) = episode_sizes(n, cfg.support_batch, cfg.query_batch);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut stream(cfg.seed, &format!("episode/{a}"), iteration as u64));
            Ok(Episode {
                accent: a.clone(),
                support: idx[..s].to_vec(),
                query: idx[s..s + q].to_vec(),
            })
        })
        .collect()
}

/// Requested sizes, or a proportional split when the accent is too small.
fn episode_sizes(n: usize, s: usize, q: usize) -> (usize, usize) {
    if n >= s + q {
        return (s, q);
    }
    let s2 = (n * s / (s + q)).clamp(1, n - 1);
    (s2, n - s2)
}

/// An accent-mixed batch of `meta_batch * (support_batch + query_batch)`
/// utterances drawn without replacement from the pooled training set, so
/// both modes see the same number of utterances per iteration.
pub fn sample_joint_batch<U>(
    train: &BTreeMap<String, Vec<U>>,
    cfg: &MetaConfig,
    iteration: usize,
) -> Vec<(String, usize)> {
    let pooled: Vec<(String, usize)> = train
        .iter()
        .flat_map(|(a, v)| (0..v.len()).map(move |i| (a.clone(), i)))
        .collect();
    let k = (cfg.meta_batch * (cfg.support_batch + cfg.query_batch)).min(pooled.len());
    let mut rng = stream(cfg.seed, "joint", iteration as u64);
    rand::seq::index::sample(&mut rng, pooled.len(), k)
        .into_iter()
        .map(|i| pooled[i].clone())
        .collect()
}

fn io_err(p: &Path, e: std::io::Error) -> MetaError {
    MetaError::Io(format!("{}: {e}", p.display()))
}

fn check_resume(meta: &CheckpointMeta, mode: Mode, model: &ModelConfig, vocab: &GraphemeVocab, cfg: &MetaConfig) -> Result<(), MetaError> {
    if meta.mode != mode {
        return Err(MetaError::Congruence(format!(
            "checkpoint was trained in {} mode, run is {}",
            meta.mode.as_str(),
            mode.as_str()
        )));
    }
    if &meta.model != model {
        return Err(MetaError::Congruence("model configuration differs".into()));
    }
    if &meta.vocab != vocab {
        return Err(MetaError::Congruence("vocabulary differs".into()));
    }
    let strip = |c: &MetaConfig| MetaConfig { total_iterations: 0, ..c.clone() };
    if strip(&meta.meta_config) != strip(cfg) {
        return Err(MetaError::Congruence("meta configuration differs (other than total_iterations)".into()));
    }
    Ok(())
}

fn validation_wer(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
) -> Result<Option<f64>, MetaError> {
    if data.val.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (accent, utts) in data.val {
        let subset: Vec<&Utterance> = utts.iter().take(cfg.val_utterances).collect();
        let decoded = crate::eval::decode_utterances(params, model, data.vocab, &subset, &cfg.val_decode)
            .map_err(|e| MetaError::Eval(format!("accent {accent}: {e}")))?;
        total += crate::eval::pooled_wer(&decoded).map_err(|e| MetaError::Eval(format!("accent {accent}: {e}")))?;
    }
    Ok(Some(total / data.val.len() as f64))
}

fn gather<'u>(utts: &'u [Utterance], idx: &[usize]) -> Vec<&'u Utterance> {
    idx.iter().map(|&i| &utts[i]).collect()
}

/// Runs `total_iterations` meta or joint updates, checkpointing to `out`.
/// Work within an iteration runs on the current rayon pool; results do not
/// depend on its size.
pub fn train(
    mode: Mode,
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    out: &Path,
    start: Start,
) -> Result<TrainOutcome, MetaError> {
    cfg.meta.validate()?;
    model.validate()?;
    if model.vocab_size != data.vocab.len() {
        return Err(MetaError::Config(format!(
            "model vocab_size {} but vocabulary has {} symbols",
            model.vocab_size,
            data.vocab.len()
        )));
    }
    if data.train.is_empty() {
        return Err(MetaError::Config("no training accents".into()));
    }
    if mode == Mode::Maml && data.train.len() < cfg.meta.meta_batch {
        return Err(MetaError::Config(format!(
            "meta_batch {} exceeds the {} training accents",
            cfg.meta.meta_batch,
            data.train.len()
        )));
    }
    let obj = AsrObjective { model: model.clone() };
    let adam = cfg.meta.outer_optimizer();
    let (mut params, mut state, first, mut best) = match start {
        Start::Fresh => {
            let p = build_model::<f32>(model, cfg.meta.seed)?;
            let s = AdamState::fresh(&p);
            (p, s, 0, None)
        }
        Start::Resume(dir) => {
            let ck = load_checkpoint::<CheckpointMeta>(&dir)?;
            check_resume(&ck.meta, mode, model, data.vocab, &cfg.meta)?;
            check_params(model, &ck.params)?;
            let (s, _) = ck
                .optimizer
                .ok_or_else(|| MetaError::Congruence(format!("{} has no optimizer state", dir.display())))?;
            (ck.params, s, ck.meta.iteration, ck.meta.best_val_wer)
        }
        Start::Init(dir) => {
            let ck = load_checkpoint::<CheckpointMeta>(&dir)?;
            if &ck.meta.model != model || &ck.meta.vocab != data.vocab {
                return Err(MetaError::Congruence(format!(
                    "{} has a different model or vocabulary",
                    dir.display()
                )));
            }
            check_params(model, &ck.params)?;
            let s = AdamState::fresh(&ck.params);
            (ck.params, s, 0, None)
        }
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let log_path = out.join("train_log.ndjson");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(first > 0)
        .truncate(first == 0)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let last_dir = out.join("last");
    let best_dir = out.join("best");
    let dropout_on = cfg.dropout && model.dropout_rate > 0.0;
    let total = cfg.meta.total_iterations;
    let ckpt_meta = |iteration: usize, best: Option<f64>| CheckpointMeta {
        mode,
        iteration,
        model: model.clone(),
        vocab: data.vocab.clone(),
        meta_config: cfg.meta.clone(),
        best_val_wer: best,
    };
    for it in first..total {
        let t0 = Instant::now();
        let dropout_seed = dropout_on.then(|| sub_seed(cfg.meta.seed, "dropout", it as u64));
        let mut record = LogRecord {
            iteration: it,
            mode,
            per_accent_support_loss: BTreeMap::new(),
            per_accent_query_loss: BTreeMap::new(),
            wall_ms: 0,
            val_wer: None,
        };
        match mode {
            Mode::Maml => {
                let episodes = sample_episodes(data.train, &cfg.meta, it)?
                    .into_iter()
                    .map(|e| {
                        let utts = &data.train[&e.accent];
                        let build = |idx: &[usize]| AsrBatch::from_utterances(&gather(utts, idx), data.vocab, model.n_mels);
                        Ok(Episode {
                            support: build(&e.support)?,
                            query: build(&e.query)?,
                            accent: e.accent,
                        })
                    })
                    .collect::<Result<Vec<_>, MetaError>>()?;
                let (p, s, m) = fomaml_meta_step(&obj, &params, &state, &episodes, &cfg.meta, dropout_seed)?;
                params = p;
                state = s;
                record.per_accent_support_loss = m.support_loss;
                record.per_accent_query_loss = m.query_loss;
            }
            Mode::Joint => {
                let picks = sample_joint_batch(data.train, &cfg.meta, it);
                let utts: Vec<&Utterance> = picks.iter().map(|(a, i)| &data.train[a][*i]).collect();
                let batch = AsrBatch::from_utterances(&utts, data.vocab, model.n_mels)?;
                let (p, s, loss) = joint_train_step(&obj, &params, &state, &batch, &adam, dropout_seed)?;
                params = p;
                state = s;
                record.per_accent_query_loss.insert("mixed".into(), loss);
            }
        }
        let done = it + 1;
        let validate = done == total || (cfg.validate_every > 0 && done % cfg.validate_every == 0);
        if validate {
            if let Some(w) = validation_wer(&params, model, cfg, data)? {
                record.val_wer = Some(w);
                if best.map_or(true, |b| w < b) {
                    best = Some(w);
                    save_checkpoint(&best_dir, &ckpt_meta(done, best), &params, Some((&state, &adam)))?;
                }
            }
        }
        if done == total || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            save_checkpoint(&last_dir, &ckpt_meta(done, best), &params, Some((&state, &adam)))?;
        }
        record.wall_ms = t0.elapsed().as_millis() as u64;
        let line = serde_json::to_string(&record).map_err(|e| MetaError::Io(format!("log record: {e}")))?;
        writeln!(log, "{line}").map_err(|e| io_err(&log_path, e))?;
        log::debug!("{} iteration {done}/{total}", mode.as_str());
    }
    if first >= total {
        save_checkpoint(&last_dir, &ckpt_meta(first, best), &params, Some((&state, &adam)))?;
    }
    Ok(TrainOutcome {
        params,
        iterations: total.max(first),
        best_val_wer: best,
        last_dir,
        best_dir: best.map(|_| best_dir),
    })
}
