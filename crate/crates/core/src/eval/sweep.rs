use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{decode_utterances, write_report_csv, write_summary_csv, write_sweep_csv, EvalError, WerReport};
use crate::data::{AdaptSplit, Utterance};
use crate::decode::DecodeConfig;
use crate::meta::{finetune, load_trained, AsrBatch, AsrObjective, FinetuneProtocol, SHOT_FRACTIONS};
use crate::model::{GraphemeVocab, ModelConfig};
use crate::numerics::ParamStore;
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub shot_fractions: Vec<f64>,
    pub methods: Vec<String>,
    /// Empty means one unnamed variant written directly to the output directory.
    pub pretraining_variants: Vec<String>,
    pub n_folds: usize,
    pub fold_size: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            shot_fractions: SHOT_FRACTIONS.to_vec(),
            methods: vec!["maml".into(), "joint".into()],
            pretraining_variants: Vec::new(),
            n_folds: 10,
            fold_size: 100,
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_folds < 1 || self.fold_size < 1 {
            return Err(EvalError::Protocol("n_folds and fold_size must be at least 1".into()));
        }
        if let Some(s) = self.shot_fractions.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(EvalError::Protocol(format!("shot fraction {s} is outside [0, 1]")));
        }
        Ok(())
    }
}

/// A trained model entering the sweep under `method` (and `variant`).
#[derive(Clone, Debug)]
pub struct SweepCheckpoint {
    pub method: String,
    pub variant: String,
    pub model: ModelConfig,
    pub vocab: GraphemeVocab,
    pub params: ParamStore<f32>,
}

impl SweepCheckpoint {
    pub fn load(method: &str, variant: &str, dir: &Path) -> Result<Self, EvalError> {
        let (meta, params) = load_trained(dir).map_err(|e| {
            EvalError::Protocol(format!(
                "checkpoint for method {method}{} at {}: {e}",
                if variant.is_empty() { String::new() } else { format!(" variant {variant}") },
                dir.display()
            ))
        })?;
        Ok(Self {
            method: method.into(),
            variant: variant.into(),
            model: meta.model,
            vocab: meta.vocab,
            params,
        })
    }
}

/// `n_folds` folds of up to `fold_size` distinct indices out of `pool_len`.
/// Folds are drawn independently, so they may overlap.
pub fn sample_folds(
    pool_len: usize,
    n_folds: usize,
    fold_size: usize,
    seed: u64,
    key: &str,
) -> Result<Vec<Vec<usize>>, EvalError> {
    if pool_len == 0 {
        return Err(EvalError::Protocol(format!("no evaluation utterances for {key}")));
    }
    let k = fold_size.min(pool_len);
    Ok((0..n_folds)
        .map(|f| {
            let mut rng = stream(seed, &format!("folds/{key}"), f as u64);
            let mut idx = rand::seq::index::sample(&mut rng, pool_len, k).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect())
}

fn fold_wers(
    params: &ParamStore<f32>,
    ck: &SweepCheckpoint,
    pool: &[Utterance],
    folds: &[Vec<usize>],
    dcfg: &DecodeConfig,
) -> Result<Vec<f64>, EvalError> {
    let needed: Vec<usize> = folds.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let utts: Vec<&Utterance> = needed.iter().map(|&i| &pool[i]).collect();
    let decoded = decode_utterances(params, &ck.model, &ck.vocab, &utts, dcfg)?;
    let by_index: BTreeMap<usize, (usize, usize)> = needed
        .iter()
        .zip(&decoded)
        .map(|(&i, d)| (i, (d.errors, d.ref_words)))
        .collect();
    folds
        .iter()
        .map(|f| {
            let (e, n) = f.iter().fold((0, 0), |(e, n), i| {
                let (de, dn) = by_index[i];
                (e + de, n + dn)
            });
            if n == 0 {
                return Err(EvalError::Protocol("fold has no reference words".into()));
            }
            Ok(e as f64 / n as f64)
        })
        .collect()
}

/// For every (checkpoint, accent, shot): fine-tune on the accent's
/// adaptation-train split (skipped at zero shots), evaluate on folds drawn
/// from its adaptation-test split, and write `report.csv`, `summary.csv` and
/// `sweep.csv` under `out_dir` (or `out_dir/<variant>`).
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    checkpoints: &[SweepCheckpoint],
    adapt: &BTreeMap<String, AdaptSplit>,
    accents: &[String],
    grid: &SweepGrid,
    protocol: &FinetuneProtocol,
    dcfg: &DecodeConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<WerReport>, EvalError> {
    grid.validate()?;
    let mut variants: BTreeMap<&str, Vec<WerReport>> = BTreeMap::new();
    for method in &grid.methods {
        let wanted: Vec<&str> = if grid.pretraining_variants.is_empty() {
            vec![""]
        } else {
            grid.pretraining_variants.iter().map(|s| s.as_str()).collect()
        };
        for v in wanted {
            if !checkpoints.iter().any(|c| &c.method == method && c.variant == v) {
                return Err(EvalError::Protocol(format!(
                    "missing checkpoint for method {method}{}",
                    if v.is_empty() { String::new() } else { format!(" variant {v}") }
                )));
            }
        }
    }
    for ck in checkpoints {
        let obj = AsrObjective { model: ck.model.clone() };
        for accent in accents {
            let split = adapt
                .get(accent)
                .ok_or_else(|| EvalError::Protocol(format!("accent {accent} has no adaptation split")))?;
            let folds = sample_folds(split.test.len(), grid.n_folds, grid.fold_size, seed, accent)?;
            for &shot in &grid.shot_fractions {
                let cell = format!("method {} accent {accent} shot {shot}", ck.method);
                let params = if shot == 0.0 {
                    ck.params.clone()
                } else {
                    let p = FinetuneProtocol { shot_fraction: shot, ..protocol.clone() };
                    let make = |b: &[&Utterance]| AsrBatch::from_utterances(b, &ck.vocab, ck.model.n_mels);
                    finetune(&obj, &ck.params, &split.train, make, &p, accent)
                        .map_err(|e| EvalError::Protocol(format!("{cell}: {e}")))?
                        .0
                };
                let wers = fold_wers(&params, ck, &split.test, &folds, dcfg)?;
                log::info!("{cell}: mean WER {:.4}", wers.iter().sum::<f64>() / wers.len() as f64);
                variants
                    .entry(ck.variant.as_str())
                    .or_default()
                    .push(WerReport::from_folds(accent, &ck.method, shot, wers)?);
            }
        }
    }
    let mut all = Vec::new();
    for (variant, reports) in variants {
        let dir = if variant.is_empty() { out_dir.to_path_buf() } else { out_dir.join(variant) };
        std::fs::create_dir_all(&dir).map_err(|e| EvalError::Io(format!("{}: {e}", dir.display())))?;
        write_report_csv(&dir.join("report.csv"), &reports)?;
        write_summary_csv(&dir.join("summary.csv"), &reports)?;
        write_sweep_csv(&dir.join("sweep.csv"), &reports)?;
        all.extend(reports);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_are_reproducible_and_internally_distinct() {
        let a = sample_folds(50, 10, 20, 3, "ph").unwrap();
        assert_eq!(a, sample_folds(50, 10, 20, 3, "ph").unwrap());
        assert_eq!(a.len(), 10);
        for f in &a {
            assert_eq!(f.iter().collect::<BTreeSet<_>>().len(), 20);
            assert!(f.iter().all(|&i| i < 50));
        }
        assert_ne!(a[0], a[1]);
        // fold size larger than the pool takes the whole pool
        assert_eq!(sample_folds(7, 2, 100, 0, "be").unwrap()[1], (0..7).collect::<Vec<_>>());
        assert!(sample_folds(0, 2, 100, 0, "be").is_err());
    }
}
