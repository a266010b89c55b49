//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    accent_stats, convert_commonvoice, format_stats, generate_synthetic_corpus, load_manifest,
    load_synthetic_corpus, make_split, save_synthetic_corpus, synthetic_accent_id, AccentSplitPreset,
    DataError, DatasetSplit, ManifestOptions, SyntheticConfig, Utterance,
};
use crate::decode::{DecodeConfig, DecodeError};
use crate::eval::{run_sweep, EvalError, SweepCheckpoint, SweepGrid, WerReport};
use crate::features::FeatureError;
use crate::meta::{
    finetune, load_trained, train, AsrBatch, AsrObjective, FinetuneProtocol, MetaError,
    Mode, Start, TrainConfig, TrainData,
};
use crate::model::{loss_gradcheck, GraphemeVocab, ModelConfig, ModelError};
use crate::numerics::{primitive_suite, save_checkpoint, GradCheckConfig, NumericsError};

pub const SEED_ENV: &str = "METACCENT_SEED";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("numerics: {0}")]
    Numerics(#[from] NumericsError),
    #[error("features: {0}")]
    Features(#[from] FeatureError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("meta: {0}")]
    Meta(#[from] MetaError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("cli: {0}")]
    Usage(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSpec {
    pub method: String,
    #[serde(default)]
    pub variant: String,
    pub path: PathBuf,
}

/// Everything a run depends on. Written to `run.json` in the output
/// directory; passing that file back with `--config` repeats the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub out: PathBuf,
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<PathBuf>,
    /// `mixed_region`, `cross_region`, `custom` (uses `custom_preset`) or
    /// `blocks:<n_train>:<n_val>` over the sorted accent list. Defaults to
    /// `mixed_region` for manifests and `blocks:5:1` for synthetic corpora.
    pub preset: Option<String>,
    pub custom_preset: Option<AccentSplitPreset>,
    /// Model size profile: `toy` or `full`.
    pub profile: String,
    /// Resolved model configuration; overrides `profile` when set.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub finetune: FinetuneProtocol,
    pub sweep: SweepGrid,
    pub synthetic_gen: SyntheticConfig,
    pub checkpoints: Vec<CheckpointSpec>,
    pub accents: Vec<String>,
    pub resume: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub any_accent: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: None,
            jobs: 0,
            out: PathBuf::from("out"),
            manifest: None,
            synthetic: None,
            preset: None,
            custom_preset: None,
            profile: "toy".into(),
            model: None,
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            finetune: FinetuneProtocol::default(),
            sweep: SweepGrid::default(),
            synthetic_gen: SyntheticConfig::default(),
            checkpoints: Vec::new(),
            accents: Vec::new(),
            resume: None,
            init: None,
            any_accent: false,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "metaccent", version, about = "Cross-accent speech recognition with first-order MAML")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Falls back to the config file, then METACCENT_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    #[arg(long, conflicts_with = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Directory written by `synth-gen`.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DecodeArgs {
    #[arg(long)]
    pub decode_eta: Option<f64>,
    #[arg(long)]
    pub decode_gamma: Option<f64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct FoldArgs {
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub fold_size: Option<usize>,
    /// Accents to evaluate (default: the preset's test accents).
    #[arg(long = "accent", alias = "accents", value_delimiter = ',')]
    pub accents: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Continue from a checkpoint of the same mode (default `<out>/last`).
    #[arg(long, num_args = 0..=1)]
    pub resume: Option<Option<PathBuf>>,
    /// Start from pretrained weights with a fresh optimizer.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub meta_batch: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub validate_every: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// First-order MAML over training accents.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Supervised training on accent-mixed batches.
    JointTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// k-shot fine-tuning of a checkpoint on one accent.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        accent: String,
        #[arg(long)]
        shot: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Zero-shot fold evaluation of one checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        folds: FoldArgs,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Fine-tune and evaluate every (method, accent, shot) cell.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// `METHOD[@VARIANT]=DIR`, repeatable.
        #[arg(long = "checkpoint", alias = "checkpoints")]
        checkpoints: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        shot: Vec<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        folds: FoldArgs,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Writes a synthetic accented corpus.
    SynthGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        accents: Option<usize>,
        #[arg(long)]
        utterances: Option<usize>,
    },
    /// Finite-difference checks of every primitive and of the full loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "toy")]
        profile: String,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Coordinates probed per parameter tensor of the full model.
        #[arg(long, default_value_t = 3)]
        coords: usize,
    },
    /// Per-accent counts and hours of a manifest.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        /// Keep rows whose accent is not a known label.
        #[arg(long)]
        any_accent: bool,
    },
    /// Maps a CommonVoice `validated.tsv` to a manifest.
    Convert {
        #[arg(long)]
        validated: PathBuf,
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn io_err(p: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("{}: {e}", p.display()))
}

impl RunConfig {
    fn load(common: &Common, command: &str) -> Result<Self, CliError> {
        let mut rc = match &common.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                serde_json::from_str(&text).map_err(|e| io_err(p, e))?
            }
            None => RunConfig::default(),
        };
        rc.command = command.into();
        if common.seed.is_some() {
            rc.seed = common.seed;
        }
        if rc.seed.is_none() {
            rc.seed = match std::env::var(SEED_ENV) {
                Ok(v) => Some(v.trim().parse().map_err(|_| {
                    CliError::Usage(format!("{SEED_ENV}={v} is not an unsigned integer"))
                })?),
                Err(_) => Some(0),
            };
        }
        let seed = rc.seed.unwrap_or(0);
        rc.train.meta.seed = seed;
        rc.finetune.seed = seed;
        if let Some(j) = common.jobs {
            rc.jobs = j;
        }
        if let Some(o) = &common.out {
            rc.out = o.clone();
        }
        Ok(rc)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn apply_data(&mut self, d: &DataArgs) {
        if d.manifest.is_some() {
            self.manifest = d.manifest.clone();
            self.synthetic = None;
        }
        if d.synthetic.is_some() {
            self.synthetic = d.synthetic.clone();
            self.manifest = None;
        }
        if d.preset.is_some() {
            self.preset = d.preset.clone();
        }
    }

    fn apply_decode(&mut self, d: &DecodeArgs) {
        if let Some(v) = d.decode_eta {
            self.decode.eta = v;
        }
        if let Some(v) = d.decode_gamma {
            self.decode.gamma = v;
        }
        if let Some(v) = d.beam {
            self.decode.beam_size = v;
        }
        if let Some(v) = d.max_len {
            self.decode.max_len = v;
        }
    }

    fn apply_folds(&mut self, f: &FoldArgs) {
        if let Some(v) = f.folds {
            self.sweep.n_folds = v;
        }
        if let Some(v) = f.fold_size {
            self.sweep.fold_size = v;
        }
        if !f.accents.is_empty() {
            self.accents = f.accents.clone();
        }
    }

    fn write(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        let p = self.out.join(RUN_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| io_err(&p, e))?;
        std::fs::write(&p, text + "\n").map_err(|e| io_err(&p, e))
    }
}

/// Utterances, their accent split and the grapheme vocabulary.
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub split: DatasetSplit,
    pub vocab: GraphemeVocab,
}

fn resolve_preset(rc: &RunConfig, accents: &[String]) -> Result<AccentSplitPreset, CliError> {
    let default = if rc.synthetic.is_some() { "blocks:5:1" } else { "mixed_region" };
    let name = rc.preset.as_deref().unwrap_or(default);
    if name == "custom" {
        return rc
            .custom_preset
            .clone()
            .ok_or_else(|| CliError::Usage("preset custom needs custom_preset in the config file".into()));
    }
    if let Some(rest) = name.strip_prefix("blocks:") {
        let parts: Vec<usize> = rest
            .split(':')
            .map(|s| s.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("bad preset `{name}`; expected blocks:<n_train>:<n_val>")))?;
        if parts.len() != 2 {
            return Err(CliError::Usage(format!("bad preset `{name}`; expected blocks:<n_train>:<n_val>")));
        }
        let mut a = accents.to_vec();
        a.sort();
        a.dedup();
        return Ok(AccentSplitPreset::from_blocks(&a, parts[0], parts[1])?);
    }
    Ok(AccentSplitPreset::named(name)?)
}

pub fn load_dataset(rc: &RunConfig) -> Result<Dataset, CliError> {
    let utterances = match (&rc.synthetic, &rc.manifest) {
        (Some(dir), _) => load_synthetic_corpus(dir)?.1.utterances,
        (None, Some(m)) => {
            let man = load_manifest(m, ManifestOptions { any_accent: rc.any_accent })?;
            if !man.rejects.is_empty() {
                log::warn!("{}: {} rows rejected", m.display(), man.rejects.len());
            }
            man.utterances
        }
        (None, None) => return Err(CliError::Usage("one of --manifest or --synthetic is required".into())),
    };
    let accents: Vec<String> = utterances.iter().map(|u| u.accent.clone()).collect();
    let preset = resolve_preset(rc, &accents)?;
    let vocab = crate::data::build_vocab(&utterances)?;
    let split = make_split(&preset, &utterances, rc.seed())?;
    Ok(Dataset { utterances, split, vocab })
}

fn resolve_model(rc: &RunConfig, vocab: &GraphemeVocab) -> Result<ModelConfig, CliError> {
    let m = match &rc.model {
        Some(m) => m.clone(),
        None => ModelConfig::profile(&rc.profile, vocab.len())?,
    };
    if m.vocab_size != vocab.len() {
        return Err(CliError::Usage(format!(
            "model vocab_size {} does not match the {}-symbol vocabulary",
            m.vocab_size,
            vocab.len()
        )));
    }
    m.validate()?;
    Ok(m)
}

fn with_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn format_reports(reports: &[WerReport]) -> String {
    let mut s = format!("{:<8} {:<16} {:>6} {:>8} {:>8}\n", "method", "accent", "shot", "WER%", "SE");
    for r in reports {
        s += &format!(
            "{:<8} {:<16} {:>6} {:>8.2} {:>8.2}{}\n",
            r.method,
            r.accent,
            r.shot,
            100.0 * r.mean_wer,
            100.0 * r.standard_error,
            if r.single_fold { "  (single fold)" } else { "" }
        );
    }
    s
}

fn parse_checkpoint_spec(s: &str) -> Result<CheckpointSpec, CliError> {
    let (key, path) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("checkpoint `{s}` should be METHOD[@VARIANT]=DIR")))?;
    let (method, variant) = key.split_once('@').unwrap_or((key, ""));
    Ok(CheckpointSpec {
        method: method.into(),
        variant: variant.into(),
        path: path.into(),
    })
}

fn test_accents(rc: &RunConfig, ds: &Dataset) -> Vec<String> {
    if rc.accents.is_empty() {
        ds.split.adapt.keys().cloned().collect()
    } else {
        rc.accents.clone()
    }
}

/// Runs one command and returns the text to print.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::MetaTrain { common, args } => run_train(Mode::Maml, &common, &args),
        Command::JointTrain { common, args } => run_train(Mode::Joint, &common, &args),
        Command::Finetune { common, data, checkpoint, accent, shot, lr } => {
            let mut rc = RunConfig::load(&common, "finetune")?;
            rc.apply_data(&data);
            if let Some(s) = shot {
                rc.finetune.shot_fraction = s;
            }
            if let Some(l) = lr {
                rc.finetune.learning_rate = l;
            }
            rc.checkpoints = vec![CheckpointSpec { method: String::new(), variant: String::new(), path: checkpoint.clone() }];
            rc.accents = vec![accent.clone()];
            rc.write()?;
            let ds = load_dataset(&rc)?;
            let (meta, params) = load_trained(&checkpoint)?;
            let split = ds
                .split
                .adapt
                .get(&accent)
                .ok_or_else(|| CliError::Usage(format!("accent {accent} is not a test accent of the preset")))?;
            let obj = AsrObjective { model: meta.model.clone() };
            let make = |b: &[&Utterance]| AsrBatch::from_utterances(b, &meta.vocab, meta.model.n_mels);
            let (adapted, report) = with_pool(rc.jobs, || {
                finetune(&obj, &params, &split.train, make, &rc.finetune, &accent)
            })??;
            save_checkpoint(&rc.out.join("checkpoint"), &meta, &adapted, None)?;
            let ids: Vec<&str> = report.selected.iter().map(|&i| split.train[i].id.as_str()).collect();
            let sel = serde_json::json!({ "accent": accent, "selected": ids, "pass_losses": report.pass_losses });
            let p = rc.out.join("selection.json");
            std::fs::write(&p, serde_json::to_string_pretty(&sel).unwrap() + "\n").map_err(|e| io_err(&p, e))?;
            Ok(format!(
                "fine-tuned on {} of {} {accent} utterances; checkpoint in {}\n",
                ids.len(),
                split.train.len(),
                rc.out.join("checkpoint").display()
            ))
        }
        Command::Evaluate { common, data, checkpoint, folds, decode } => {
            let mut rc = RunConfig::load(&common, "evaluate")?;
            rc.apply_data(&data);
            rc.apply_folds(&folds);
            rc.apply_decode(&decode);
            let (meta, _) = load_trained(&checkpoint)?;
            let method = meta.mode.as_str().to_string();
            rc.checkpoints = vec![CheckpointSpec { method: method.clone(), variant: String::new(), path: checkpoint.clone() }];
            rc.sweep.shot_fractions = vec![0.0];
            rc.sweep.methods = vec![method];
            rc.sweep.pretraining_variants.clear();
            sweep_checkpoints(rc)
        }
        Command::Sweep { common, data, checkpoints, shot, lr, folds, decode } => {
            let mut rc = RunConfig::load(&common, "sweep")?;
            rc.apply_data(&data);
            rc.apply_folds(&folds);
            rc.apply_decode(&decode);
            if !shot.is_empty() {
                rc.sweep.shot_fractions = shot;
            }
            if let Some(l) = lr {
                rc.finetune.learning_rate = l;
            }
            if !checkpoints.is_empty() {
                rc.checkpoints = checkpoints.iter().map(|s| parse_checkpoint_spec(s)).collect::<Result<_, _>>()?;
                let mut methods: Vec<String> = rc.checkpoints.iter().map(|c| c.method.clone()).collect();
                methods.dedup();
                rc.sweep.methods = methods;
                let mut variants: Vec<String> = rc.checkpoints.iter().map(|c| c.variant.clone()).filter(|v| !v.is_empty()).collect();
                variants.sort();
                variants.dedup();
                rc.sweep.pretraining_variants = variants;
            }
            if rc.checkpoints.is_empty() {
                return Err(CliError::Usage("sweep needs at least one --checkpoint METHOD=DIR".into()));
            }
            sweep_checkpoints(rc)
        }
        Command::SynthGen { common, accents, utterances } => {
            let mut rc = RunConfig::load(&common, "synth-gen")?;
            if let Some(a) = accents {
                rc.synthetic_gen.n_accents = a;
            }
            if let Some(u) = utterances {
                rc.synthetic_gen.utterances_per_accent = u;
            }
            let corpus = generate_synthetic_corpus(&rc.synthetic_gen, rc.seed())?;
            let manifest = save_synthetic_corpus(&rc.out, &corpus)?;
            rc.write()?;
            Ok(format!(
                "{} utterances over accents {}..{} written to {}\n",
                corpus.utterances.len(),
                synthetic_accent_id(0),
                synthetic_accent_id(rc.synthetic_gen.n_accents.saturating_sub(1)),
                manifest.display()
            ))
        }
        Command::Gradcheck { common, profile, tolerance, seeds, coords } => {
            let rc = RunConfig::load(&common, "gradcheck")?;
            let gc = GradCheckConfig {
                tolerance,
                max_coords_per_tensor: Some(coords),
                ..GradCheckConfig::default()
            };
            let base = rc.seed();
            let mut out = String::new();
            let mut failures = Vec::new();
            for (name, seed, rep) in primitive_suite(base..base + seeds, &gc)? {
                if !rep.passed() {
                    failures.push(format!("{name} (seed {seed}): max relative error {:.3e}", rep.max_rel_error()));
                }
            }
            out += &format!("primitives: {} checks, {} failed\n", crate::numerics::PRIMITIVES.len() as u64 * seeds, failures.len());
            // vocabulary of 30 symbols keeps the toy loss realistic
            let model = ModelConfig::profile(&profile, 30)?;
            for seed in base..base + seeds {
                let rep = loss_gradcheck(&model, seed, &gc)?;
                out += &format!("full loss, seed {seed}: max relative error {:.3e}\n", rep.max_rel_error());
                if !rep.passed() {
                    failures.push(format!("full loss (seed {seed}): {:?}", rep.worst(1)));
                }
            }
            if failures.is_empty() {
                Ok(out + "all gradient checks passed\n")
            } else {
                print!("{out}");
                Err(CliError::Numerics(NumericsError::Usage(format!(
                    "gradient check failed: {}",
                    failures.join("; ")
                ))))
            }
        }
        Command::Stats { manifest, any_accent } => {
            let m = load_manifest(&manifest, ManifestOptions { any_accent })?;
            let mut s = format_stats(&accent_stats(&m.utterances));
            for r in &m.rejects {
                s += &format!("rejected line {} ({}): {}\n", r.line, r.id, r.reason);
            }
            Ok(s)
        }
        Command::Convert { validated, clips, out } => {
            let (written, skipped) = convert_commonvoice(&validated, &clips, &out)?;
            Ok(format!("{written} rows written to {}, {skipped} skipped\n", out.display()))
        }
    }
}

fn run_train(mode: Mode, common: &Common, a: &TrainArgs) -> Result<String, CliError> {
    let mut rc = RunConfig::load(common, &format!("{}-train", if mode == Mode::Maml { "meta" } else { "joint" }))?;
    rc.apply_data(&a.data);
    if let Some(p) = &a.profile {
        rc.profile = p.clone();
        rc.model = None;
    }
    let m = &mut rc.train.meta;
    if let Some(v) = a.iterations {
        m.total_iterations = v;
    }
    if let Some(v) = a.alpha {
        m.alpha = v;
    }
    if let Some(v) = a.beta {
        m.beta = v;
    }
    if let Some(v) = a.meta_batch {
        m.meta_batch = v;
    }
    if let Some(v) = a.checkpoint_every {
        rc.train.checkpoint_every = v;
    }
    if let Some(v) = a.validate_every {
        rc.train.validate_every = v;
    }
    if let Some(r) = &a.resume {
        rc.resume = Some(r.clone().unwrap_or_else(|| rc.out.join("last")));
    }
    if a.init.is_some() {
        rc.init = a.init.clone();
    }
    let ds = load_dataset(&rc)?;
    let model = resolve_model(&rc, &ds.vocab)?;
    rc.model = Some(model.clone());
    rc.write()?;
    let start = match (&rc.resume, &rc.init) {
        (Some(r), _) => Start::Resume(r.clone()),
        (None, Some(i)) => Start::Init(i.clone()),
        (None, None) => Start::Fresh,
    };
    let data = TrainData {
        train: &ds.split.train,
        val: &ds.split.val,
        vocab: &ds.vocab,
    };
    let outcome = with_pool(rc.jobs, || train(mode, &model, &rc.train, &data, &rc.out, start))??;
    let mut s = format!(
        "{} training finished after {} iterations; checkpoint in {}\n",
        mode.as_str(),
        outcome.iterations,
        outcome.last_dir.display()
    );
    if let Some(w) = outcome.best_val_wer {
        s += &format!("best validation WER {:.2}%\n", 100.0 * w);
    }
    Ok(s)
}

fn sweep_checkpoints(rc: RunConfig) -> Result<String, CliError> {
    rc.write()?;
    let ds = load_dataset(&rc)?;
    let cks = rc
        .checkpoints
        .iter()
        .map(|c| SweepCheckpoint::load(&c.method, &c.variant, &c.path))
        .collect::<Result<Vec<_>, _>>()?;
    for c in &cks {
        rc.decode.validate(&c.model)?;
    }
    let accents = test_accents(&rc, &ds);
    let reports = with_pool(rc.jobs, || {
        run_sweep(&cks, &ds.split.adapt, &accents, &rc.sweep, &rc.finetune, &rc.decode, rc.seed(), &rc.out)
    })??;
    Ok(format_reports(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_specs_parse() {
        let c = parse_checkpoint_spec("maml@joint-pre=out/a").unwrap();
        assert_eq!((c.method.as_str(), c.variant.as_str(), c.path.as_path()), ("maml", "joint-pre", Path::new("out/a")));
        assert_eq!(parse_checkpoint_spec("joint=x").unwrap().variant, "");
        assert!(parse_checkpoint_spec("joint").is_err());
    }

    #[test]
    fn config_roundtrips_and_fills_defaults() {
        let rc: RunConfig = serde_json::from_str(r#"{"train": {"meta": {"alpha": 0.5}}}"#).unwrap();
        assert_eq!(rc.train.meta.alpha, 0.5);
        assert_eq!(rc.train.meta.inner_steps, 1);
        assert_eq!(rc.decode, DecodeConfig::default());
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&rc).unwrap()).unwrap();
        assert_eq!(back, rc);
    }

    #[test]
    fn block_presets() {
        let rc = RunConfig { synthetic: Some("x".into()), ..RunConfig::default() };
        let accents: Vec<String> = (0..8).map(synthetic_accent_id).collect();
        let p = resolve_preset(&rc, &accents).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (5, 1, 2));
        let rc = RunConfig { preset: Some("blocks:x".into()), ..RunConfig::default() };
        assert!(resolve_preset(&rc, &accents).is_err());
        assert_eq!(resolve_preset(&RunConfig::default(), &accents).unwrap(), AccentSplitPreset::mixed_region());
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let c = Cli::try_parse_from(["metaccent", "meta-train", "--synthetic", "d", "--resume", "--seed", "7"]).unwrap();
        match c.command {
            Command::MetaTrain { common, args } => {
                assert_eq!(common.seed, Some(7));
                assert_eq!(args.resume, Some(None));
            }
            _ => panic!(),
        }
        for (argv, want) in [(vec!["--resume"], None), (vec!["--resume", "r/last"], Some(PathBuf::from("r/last")))] {
            let c = Cli::try_parse_from([&["metaccent", "joint-train", "--synthetic", "d"], argv.as_slice()].concat()).unwrap();
            let Command::JointTrain { args, .. } = c.command else { panic!() };
            assert_eq!(args.resume, Some(want));
        }
    }
}
