use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{MetaError, Objective};
use crate::numerics::{sgd_step, Elem, ParamStore};
use crate::rng::{stream, sub_seed};

/// The shot settings reported in the sweep by default.
pub const SHOT_FRACTIONS: [f64; 4] = [0.0, 0.05, 0.25, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneProtocol {
    pub shot_fraction: f64,
    /// Full passes over the selected utterances.
    pub iterations_per_sample: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneProtocol {
    fn default() -> Self {
        Self {
            shot_fraction: 0.25,
            iterations_per_sample: 10,
            learning_rate: 0.05,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl FinetuneProtocol {
    pub fn validate(&self) -> Result<(), MetaError> {
        if !(0.0..=1.0).contains(&self.shot_fraction) {
            return Err(MetaError::Config(format!(
                "shot fraction {} is outside [0, 1]",
                self.shot_fraction
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(MetaError::Config("fine-tuning learning rate must be non-negative".into()));
        }
        if self.batch_size < 1 {
            return Err(MetaError::Config("fine-tuning batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Indices into the adaptation pool, ascending.
    pub selected: Vec<usize>,
    /// Mean mini-batch loss of each pass.
    pub pass_losses: Vec<f64>,
}

/// Seeded choice of floor(fraction * n) indices out of `n`, keyed by `key`
/// (normally the accent) so accents draw independently.
pub fn select_shots(n: usize, fraction: f64, seed: u64, key: &str) -> Result<Vec<usize>, MetaError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(MetaError::Config(format!("shot fraction {fraction} is outside [0, 1]")));
    }
    // Guards against 0.29 * 100 = 28.999999999999996.
    let k = ((fraction * n as f64) + 1e-9).floor() as usize;
    let k = k.min(n);
    if k == 0 && fraction > 0.0 {
        return Err(MetaError::Protocol(format!(
            "shot fraction {fraction} of {n} utterances selects nothing"
        )));
    }
    let mut rng = stream(seed, &format!("finetune/select/{key}"), 0);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Selects the k-shot subset of `pool` and runs `iterations_per_sample`
/// shuffled, mini-batched SGD passes over it. Zero shots return `theta`
/// untouched.
pub fn finetune<T: Elem, O: Objective<T>, U>(
    obj: &O,
    theta: &ParamStore<T>,
    pool: &[U],
    make_batch: impl Fn(&[&U]) -> Result<O::Batch, MetaError>,
    protocol: &FinetuneProtocol,
    key: &str,
) -> Result<(ParamStore<T>, FinetuneReport), MetaError> {
    protocol.validate()?;
    if protocol.shot_fraction == 0.0 {
        return Ok((theta.clone(), FinetuneReport::default()));
    }
    let selected = select_shots(pool.len(), protocol.shot_fraction, protocol.seed, key)?;
    let mut params = theta.clone();
    let mut pass_losses = Vec::with_capacity(protocol.iterations_per_sample);
    let mut step = 0u64;
    for pass in 0..protocol.iterations_per_sample {
        let mut order = selected.clone();
        order.shuffle(&mut stream(protocol.seed, &format!("finetune/pass/{key}"), pass as u64));
        let mut losses = Vec::new();
        for chunk in order.chunks(protocol.batch_size) {
            let items: Vec<&U> = chunk.iter().map(|&i| &pool[i]).collect();
            let batch = make_batch(&items)?;
            let mut rng = stream(sub_seed(protocol.seed, &format!("finetune/dropout/{key}"), 0), "step", step);
            let (loss, g) = obj.loss_and_grad(&params, &batch, Some(&mut rng))?;
            if !loss.is_finite() || !g.all_finite() {
                return Err(MetaError::Divergence { step: step as usize, loss });
            }
            losses.push(loss);
            params = sgd_step(&params, &g, protocol.learning_rate)?;
            step += 1;
        }
        pass_losses.push(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    Ok((params, FinetuneReport { selected, pass_losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::Quadratic;

    #[test]
    fn selection_is_seeded_and_sized() {
        let a = select_shots(100, 0.25, 3, "ph").unwrap();
        assert_eq!(a.len(), 25);
        assert_eq!(a, select_shots(100, 0.25, 3, "ph").unwrap());
        assert_ne!(a, select_shots(100, 0.25, 4, "ph").unwrap());
        assert_eq!(select_shots(100, 0.29, 0, "x").unwrap().len(), 29);
        assert_eq!(select_shots(7, 1.0, 0, "x").unwrap(), (0..7).collect::<Vec<_>>());
        assert_eq!(select_shots(10, 0.05, 0, "x").unwrap_err().to_string(),
            "protocol error: shot fraction 0.05 of 10 utterances selects nothing");
    }

    #[test]
    fn zero_shot_is_identity() {
        let theta = Quadratic::params::<f64>(0.3);
        let p = FinetuneProtocol { shot_fraction: 0.0, ..FinetuneProtocol::default() };
        let (out, rep) = finetune(&Quadratic, &theta, &[1.0f64], |_| unreachable!(), &p, "a").unwrap();
        assert_eq!(out, theta);
        assert!(rep.selected.is_empty());
    }

    #[test]
    fn passes_reduce_loss() {
        let theta = Quadratic::params::<f64>(0.0);
        let pool = [1.0, 2.0, 3.0, 4.0];
        let p = FinetuneProtocol {
            shot_fraction: 1.0,
            learning_rate: 0.1,
            batch_size: 4,
            ..FinetuneProtocol::default()
        };
        let (out, rep) =
            finetune(&Quadratic, &theta, &pool, |b| Ok(b.iter().map(|&&c| c).collect()), &p, "a").unwrap();
        assert_eq!(rep.pass_losses.len(), 10);
        assert!(rep.pass_losses.windows(2).all(|w| w[1] < w[0]));
        assert!((out.get("theta").unwrap().data()[0] - 2.5).abs() < 0.5);
    }

    #[test]
    fn asr_finetuning_lowers_the_loss() {
        use crate::data::{build_vocab, generate_synthetic_corpus, SyntheticConfig, Utterance};
        use crate::meta::{AsrBatch, AsrObjective};
        use crate::model::{build_model, ModelConfig};

        let corpus =
            generate_synthetic_corpus(&SyntheticConfig { utterances_per_accent: 4, ..SyntheticConfig::default() }, 2)
                .unwrap();
        let pool: Vec<Utterance> = corpus.utterances.iter().filter(|u| u.accent == "x00").cloned().collect();
        let vocab = build_vocab(&corpus.utterances).unwrap();
        let model = ModelConfig::toy(vocab.len());
        let theta = build_model::<f32>(&model, 2).unwrap();
        let obj = AsrObjective { model: model.clone() };
        let p = FinetuneProtocol {
            shot_fraction: 1.0,
            learning_rate: 0.05,
            batch_size: 4,
            ..FinetuneProtocol::default()
        };
        let make = |b: &[&Utterance]| AsrBatch::from_utterances(b, &vocab, model.n_mels);
        let (_, rep) = finetune(&obj, &theta, &pool, make, &p, "x00").unwrap();
        assert_eq!(rep.selected, vec![0, 1, 2, 3]);
        assert!(rep.pass_losses[..5].windows(2).all(|w| w[1] < w[0]), "{:?}", rep.pass_losses);
    }
}
