//! First-order MAML over accent tasks, the joint-training baseline and
//! k-shot fine-tuning.

mod finetune;
mod train;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::features::SpectrogramConfig;
use crate::model::{self, GraphemeVocab, ModelConfig, ModelError, SourceBatch, TargetBatch};
use crate::numerics::{adam_step, sgd_step, AdamConfig, AdamState, Elem, NumericsError, ParamStore, Tensor};
use crate::rng::stream;

pub use finetune::{finetune, select_shots, FinetuneProtocol, FinetuneReport, SHOT_FRACTIONS};
pub use train::{
    load_trained, sample_episodes, sample_joint_batch, train, CheckpointMeta, LogRecord, Mode, Start,
    TrainConfig, TrainData, TrainOutcome,
};

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("config error: {0}")]
    Config(String),
    #[error("divergence at inner step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("episode for accent {accent}: {source}")]
    Episode {
        accent: String,
        #[source]
        source: Box<MetaError>,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("checkpoint does not match the run: {0}")]
    Congruence(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("validation: {0}")]
    Eval(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub meta_batch: usize,
    pub support_batch: usize,
    pub query_batch: usize,
    pub total_iterations: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1e-3,
            inner_steps: 1,
            meta_batch: 4,
            support_batch: 8,
            query_batch: 8,
            total_iterations: 1000,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        let bad = |m: &str| Err(MetaError::Config(m.into()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.inner_steps < 1 {
            return bad("inner_steps must be at least 1");
        }
        if self.meta_batch < 1 {
            return bad("meta_batch must be at least 1");
        }
        if self.support_batch < 1 || self.query_batch < 1 {
            return bad("support_batch and query_batch must be at least 1");
        }
        Ok(())
    }

    /// Adam for the outer loop, with step size beta.
    pub fn outer_optimizer(&self) -> AdamConfig {
        AdamConfig {
            lr: self.beta,
            ..AdamConfig::default()
        }
    }
}

/// A differentiable training loss over batches of type `Batch`.
pub trait Objective<T: Elem>: Sync {
    type Batch: Sync;

    /// Loss and gradient at `params`. `dropout` enables stochastic layers.
    fn loss_and_grad(
        &self,
        params: &ParamStore<T>,
        batch: &Self::Batch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, ParamStore<T>), MetaError>;

    fn loss(&self, params: &ParamStore<T>, batch: &Self::Batch) -> Result<f64, MetaError>;
}

#[derive(Clone, Debug)]
pub struct Episode<B> {
    pub accent: String,
    pub support: B,
    pub query: B,
}

/// `inner_steps` SGD steps on the support loss starting from `theta`.
/// Returns the adapted parameters and the loss before each step.
pub fn inner_adapt<T: Elem, O: Objective<T>>(
    obj: &O,
    theta: &ParamStore<T>,
    support: &O::Batch,
    alpha: f64,
    inner_steps: usize,
    dropout_seed: Option<u64>,
) -> Result<(ParamStore<T>, Vec<f64>), MetaError> {
    if inner_steps < 1 {
        return Err(MetaError::Config("inner_steps must be at least 1".into()));
    }
    let mut cur = theta.clone();
    let mut losses = Vec::with_capacity(inner_steps);
    for step in 0..inner_steps {
        let mut rng = dropout_seed.map(|s| stream(s, "inner", step as u64));
        let (loss, grads) = obj.loss_and_grad(&cur, support, rng.as_mut())?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(MetaError::Divergence { step, loss });
        }
        losses.push(loss);
        // lr 0 must give theta back bit for bit, and p - 0*g can flip the sign of a zero.
        if alpha != 0.0 {
            cur = sgd_step(&cur, &grads, alpha)?;
        }
    }
    Ok((cur, losses))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Support loss before adaptation, per accent.
    pub support_loss: BTreeMap<String, f64>,
    /// Query loss at the adapted parameters, per accent.
    pub query_loss: BTreeMap<String, f64>,
}

/// First-order outer gradient: the query gradient at each adapted θ′ᵢ,
/// summed over episodes in lexicographic accent order. Episodes run in
/// parallel on the current rayon pool.
pub fn fomaml_outer_gradient<T: Elem, O: Objective<T>>(
    obj: &O,
    theta: &ParamStore<T>,
    episodes: &[Episode<O::Batch>],
    alpha: f64,
    inner_steps: usize,
    dropout_seed: Option<u64>,
) -> Result<(ParamStore<T>, StepMetrics), MetaError> {
    if episodes.is_empty() {
        return Err(MetaError::Config("no episodes".into()));
    }
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.sort_by(|&a, &b| episodes[a].accent.cmp(&episodes[b].accent));
    let results: Vec<_> = order
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let ep = &episodes[i];
            let seed = dropout_seed.map(|s| crate::rng::sub_seed(s, &ep.accent, slot as u64));
            let run = || -> Result<_, MetaError> {
                let (adapted, losses) = inner_adapt(obj, theta, &ep.support, alpha, inner_steps, seed)?;
                let mut rng = seed.map(|s| stream(s, "query", 0));
                let (q, g) = obj.loss_and_grad(&adapted, &ep.query, rng.as_mut())?;
                if !q.is_finite() || !g.all_finite() {
                    return Err(MetaError::Divergence { step: inner_steps, loss: q });
                }
                Ok((losses[0], q, g))
            };
            run().map_err(|e| MetaError::Episode {
                accent: ep.accent.clone(),
                source: Box::new(e),
            })
        })
        .collect();
    let mut total: Option<ParamStore<T>> = None;
    let mut metrics = StepMetrics::default();
    for (r, &i) in results.into_iter().zip(&order) {
        let (s, q, g) = r?;
        let accent = &episodes[i].accent;
        // Repeated accents keep the mean of their losses in the metrics.
        accumulate(&mut metrics.support_loss, accent, s);
        accumulate(&mut metrics.query_loss, accent, q);
        match total.as_mut() {
            None => total = Some(g),
            Some(t) => t.axpy(T::one(), &g)?,
        }
    }
    let counts = count_by_accent(episodes);
    for (a, n) in counts {
        *metrics.support_loss.get_mut(&a).unwrap() /= n as f64;
        *metrics.query_loss.get_mut(&a).unwrap() /= n as f64;
    }
    Ok((total.expect("episodes is non-empty"), metrics))
}

fn accumulate(m: &mut BTreeMap<String, f64>, k: &str, v: f64) {
    *m.entry(k.to_string()).or_insert(0.0) += v;
}

fn count_by_accent<B>(episodes: &[Episode<B>]) -> BTreeMap<String, usize> {
    let mut c = BTreeMap::new();
    for e in episodes {
        *c.entry(e.accent.clone()).or_insert(0) += 1;
    }
    c
}

/// One meta-update: the first-order outer gradient applied to θ with Adam.
pub fn fomaml_meta_step<T: Elem, O: Objective<T>>(
    obj: &O,
    theta: &ParamStore<T>,
    state: &AdamState<T>,
    episodes: &[Episode<O::Batch>],
    cfg: &MetaConfig,
    dropout_seed: Option<u64>,
) -> Result<(ParamStore<T>, AdamState<T>, StepMetrics), MetaError> {
    let (g, metrics) = fomaml_outer_gradient(obj, theta, episodes, cfg.alpha, cfg.inner_steps, dropout_seed)?;
    let (next, state) = adam_step(state, theta, &g, &cfg.outer_optimizer())?;
    Ok((next, state, metrics))
}

/// Gradient of the loss on an accent-mixed batch.
pub fn joint_gradient<T: Elem, O: Objective<T>>(
    obj: &O,
    theta: &ParamStore<T>,
    batch: &O::Batch,
    dropout_seed: Option<u64>,
) -> Result<(f64, ParamStore<T>), MetaError> {
    let mut rng = dropout_seed.map(|s| stream(s, "joint", 0));
    let (loss, g) = obj.loss_and_grad(theta, batch, rng.as_mut())?;
    if !loss.is_finite() || !g.all_finite() {
        return Err(MetaError::Divergence { step: 0, loss });
    }
    Ok((loss, g))
}

/// One supervised Adam step on an accent-mixed batch.
pub fn joint_train_step<T: Elem, O: Objective<T>>(
    obj: &O,
    theta: &ParamStore<T>,
    state: &AdamState<T>,
    batch: &O::Batch,
    adam: &AdamConfig,
    dropout_seed: Option<u64>,
) -> Result<(ParamStore<T>, AdamState<T>, f64), MetaError> {
    let (loss, g) = joint_gradient(obj, theta, batch, dropout_seed)?;
    let (next, state) = adam_step(state, theta, &g, adam)?;
    Ok((next, state, loss))
}

/// `L(θ) = mean_i (θ - c_i)^2` over a single scalar parameter `"theta"`.
/// Each batch is a list of targets `c_i`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Quadratic;

impl Quadratic {
    pub fn params<T: Elem>(theta: f64) -> ParamStore<T> {
        let mut p = ParamStore::new();
        p.insert("theta", Tensor::scalar(T::lit(theta)));
        p
    }
}

impl<T: Elem> Objective<T> for Quadratic {
    type Batch = Vec<f64>;

    fn loss_and_grad(
        &self,
        params: &ParamStore<T>,
        batch: &Vec<f64>,
        _dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, ParamStore<T>), MetaError> {
        if batch.is_empty() {
            return Err(MetaError::Protocol("empty batch".into()));
        }
        let theta = params
            .get("theta")
            .ok_or_else(|| MetaError::Config("missing parameter theta".into()))?
            .data()[0]
            .as_f64();
        let n = batch.len() as f64;
        let loss = batch.iter().map(|c| (theta - c).powi(2)).sum::<f64>() / n;
        let grad = batch.iter().map(|c| 2.0 * (theta - c)).sum::<f64>() / n;
        let mut g = ParamStore::new();
        g.insert("theta", Tensor::scalar(T::lit(grad)));
        Ok((loss, g))
    }

    fn loss(&self, params: &ParamStore<T>, batch: &Vec<f64>) -> Result<f64, MetaError> {
        Ok(Objective::<T>::loss_and_grad(self, params, batch, None)?.0)
    }
}

/// Padded source features and targets for one utterance batch.
#[derive(Clone, Debug)]
pub struct AsrBatch {
    pub src: SourceBatch,
    pub tgt: TargetBatch,
}

impl AsrBatch {
    /// Needs features already attached or loadable for each utterance.
    pub fn from_utterances(
        utts: &[&Utterance],
        vocab: &GraphemeVocab,
        n_mels: usize,
    ) -> Result<Self, MetaError> {
        if utts.is_empty() {
            return Err(MetaError::Protocol("empty utterance batch".into()));
        }
        let spec = SpectrogramConfig::with_mels(n_mels);
        let feats = utts
            .iter()
            .map(|u| u.load_features(&spec))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<_> = feats.iter().map(|f| f.as_ref()).collect();
        let targets: Vec<Vec<usize>> = utts.iter().map(|u| vocab.encode_target(&u.transcript)).collect();
        let trefs: Vec<&[usize]> = targets.iter().map(|t| t.as_slice()).collect();
        Ok(Self {
            src: SourceBatch::new(&refs)?,
            tgt: TargetBatch::new(&trefs)?,
        })
    }
}

/// Mean per-token negative log-likelihood of the transformer.
#[derive(Clone, Debug)]
pub struct AsrObjective {
    pub model: ModelConfig,
}

impl<T: Elem> Objective<T> for AsrObjective {
    type Batch = AsrBatch;

    fn loss_and_grad(
        &self,
        params: &ParamStore<T>,
        batch: &AsrBatch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, ParamStore<T>), MetaError> {
        Ok(model::loss_and_grad(params, &self.model, &batch.src, &batch.tgt, dropout)?)
    }

    fn loss(&self, params: &ParamStore<T>, batch: &AsrBatch) -> Result<f64, MetaError> {
        Ok(model::nll_loss(params, &self.model, &batch.src, &batch.tgt)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theta(x: f64) -> ParamStore<f64> {
        Quadratic::params(x)
    }

    fn val(p: &ParamStore<f64>) -> f64 {
        p.get("theta").unwrap().data()[0]
    }

    #[test]
    fn inner_step_on_quadratic() {
        // L = (θ-3)^2, ∇ = 2(θ-3) = -6 at 0, so θ' = 0 + 0.25*6
        let (p, losses) = inner_adapt(&Quadratic, &theta(0.0), &vec![3.0], 0.25, 1, None).unwrap();
        assert_eq!(val(&p), 1.5);
        assert_eq!(losses, vec![9.0]);
        let after = Objective::<f64>::loss(&Quadratic, &p, &vec![3.0]).unwrap();
        assert!(after <= losses[0]);
    }

    #[test]
    fn alpha_zero_is_bitwise_identity() {
        let mut p = theta(0.0);
        p.insert("z", Tensor::new(vec![2], vec![-0.0, 1.0]).unwrap());
        struct Neg;
        impl Objective<f64> for Neg {
            type Batch = ();
            fn loss_and_grad(
                &self,
                p: &ParamStore<f64>,
                _: &(),
                _: Option<&mut ChaCha8Rng>,
            ) -> Result<(f64, ParamStore<f64>), MetaError> {
                Ok((1.0, p.map(|_, t| Tensor::full(t.shape(), -1.0))))
            }
            fn loss(&self, _: &ParamStore<f64>, _: &()) -> Result<f64, MetaError> {
                Ok(1.0)
            }
        }
        let (q, _) = inner_adapt(&Neg, &p, &(), 0.0, 3, None).unwrap();
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn divergence_names_step_and_accent() {
        let eps = vec![Episode {
            accent: "zz".into(),
            support: vec![f64::INFINITY],
            query: vec![0.0],
        }];
        let err = fomaml_outer_gradient(&Quadratic, &theta(0.0), &eps, 0.1, 2, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("accent zz") && msg.contains("inner step 0"), "{msg}");
    }

    #[test]
    fn quadratic_outer_gradient_matches_hand_derivation() {
        // θ' = θ - 0.1*2(θ - c) = 0.8θ + 0.2c; first-order gradient 2(θ' - c)
        let t = 1.7;
        for c in [-2.0, 0.0, 0.5, 3.0] {
            let eps = vec![Episode { accent: "a".into(), support: vec![c], query: vec![c] }];
            let (g, _) = fomaml_outer_gradient(&Quadratic, &theta(t), &eps, 0.1, 1, None).unwrap();
            let expected = 2.0 * (0.8 * t + 0.2 * c - c);
            assert!((val(&g) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn outer_gradient_is_additive_and_pure() {
        let e = Episode { accent: "a".into(), support: vec![1.0, 2.0], query: vec![4.0] };
        let t = theta(0.3);
        let before = format!("{:?}", t);
        let (one, _) = fomaml_outer_gradient(&Quadratic, &t, &[e.clone()], 0.05, 2, None).unwrap();
        let (two, m) = fomaml_outer_gradient(&Quadratic, &t, &[e.clone(), e], 0.05, 2, None).unwrap();
        assert_eq!(val(&two), 2.0 * val(&one));
        assert_eq!(m.query_loss.len(), 1);
        assert_eq!(before, format!("{:?}", t));
    }

    #[test]
    fn alpha_zero_outer_gradient_is_the_joint_gradient() {
        let q = vec![1.0, -0.5, 2.0];
        let eps = vec![Episode { accent: "a".into(), support: vec![9.0], query: q.clone() }];
        let (g, _) = fomaml_outer_gradient(&Quadratic, &theta(0.7), &eps, 0.0, 1, None).unwrap();
        let (_, j) = joint_gradient(&Quadratic, &theta(0.7), &q, None).unwrap();
        assert_eq!(val(&g), val(&j));
    }

    #[test]
    fn meta_step_moves_toward_tasks() {
        let cfg = MetaConfig { alpha: 0.1, beta: 0.1, ..MetaConfig::default() };
        let eps: Vec<_> = [("b", 2.0), ("a", 1.0)]
            .iter()
            .map(|&(a, c)| Episode { accent: a.into(), support: vec![c], query: vec![c] })
            .collect();
        let t = theta(0.0);
        let (next, st, m) = fomaml_meta_step(&Quadratic, &t, &AdamState::fresh(&t), &eps, &cfg, None).unwrap();
        assert!(val(&next) > 0.0);
        assert_eq!(st.step, 1);
        assert_eq!(m.support_loss.keys().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(m.support_loss["b"], 4.0);
    }

    #[test]
    fn config_validation() {
        assert!(MetaConfig::default().validate().is_ok());
        assert!(MetaConfig { alpha: 0.0, ..MetaConfig::default() }.validate().is_err());
        assert!(MetaConfig { inner_steps: 0, ..MetaConfig::default() }.validate().is_err());
        assert!(MetaConfig { meta_batch: 0, ..MetaConfig::default() }.validate().is_err());
    }
}
