//! Auto-regressive beam search with a word-count bonus on finished hypotheses.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::features::FeatureSequence;
use crate::model::{
    decode_step, encode, Encoded, GraphemeVocab, ModelConfig, ModelError, SourceBatch, EOS,
    RESERVED, SOS,
};
use crate::numerics::{Elem, ParamStore, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub eta: f64,
    pub gamma: f64,
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            gamma: 0.1,
            beam_size: 5,
            max_len: 60,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), DecodeError> {
        if self.beam_size < 1 {
            return Err(DecodeError::Config("beam_size must be at least 1".into()));
        }
        if self.max_len < 1 {
            return Err(DecodeError::Config("max_len must be at least 1".into()));
        }
        if self.max_len > model.max_target_len {
            return Err(DecodeError::Config(format!(
                "max_len {} exceeds the model's max_target_len {}",
                self.max_len, model.max_target_len
            )));
        }
        if !self.eta.is_finite() || !self.gamma.is_finite() {
            return Err(DecodeError::Config("eta and gamma must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Emitted tokens, without `<sos>`; ends with `<eos>` unless truncated.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
    pub word_count: usize,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Every finished or truncated hypothesis, best first.
    pub beam: Vec<Hypothesis>,
}

pub fn score_hypothesis(log_prob: f64, word_count: i64, cfg: &DecodeConfig) -> Result<f64, DecodeError> {
    if word_count < 0 {
        return Err(DecodeError::Domain(format!("word count {word_count} is negative")));
    }
    Ok(cfg.eta * log_prob + cfg.gamma * (word_count as f64).sqrt())
}

pub fn word_count(tokens: &[usize], vocab: &GraphemeVocab) -> usize {
    vocab.decode(tokens).split_whitespace().count()
}

fn finish(tokens: Vec<usize>, log_prob: f64, cfg: &DecodeConfig, vocab: &GraphemeVocab) -> Hypothesis {
    let wc = word_count(&tokens, vocab);
    let truncated = tokens.last() != Some(&EOS);
    Hypothesis {
        score: cfg.eta * log_prob + cfg.gamma * (wc as f64).sqrt(),
        tokens,
        log_prob,
        word_count: wc,
        truncated,
    }
}

/// Tokens the decoder may emit: `<eos>` and the characters.
pub fn emittable(vocab_size: usize) -> impl Iterator<Item = usize> {
    std::iter::once(EOS).chain(RESERVED..vocab_size)
}

/// Log-softmax of the last-position logits of item `b`, in f64.
fn last_log_probs<T: Elem>(logits: &Tensor<T>, b: usize) -> Vec<f64> {
    let s = logits.shape();
    let (len, v) = (s[1], s[2]);
    let off = (b * len + len - 1) * v;
    let row: Vec<f64> = logits.data()[off..off + v].iter().map(|x| x.as_f64()).collect();
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn repeat_encoded<T: Elem>(enc: &Encoded<T>, n: usize) -> Result<Encoded<T>, ModelError> {
    let s = enc.states.shape();
    let mut shape = s.to_vec();
    shape[0] = n;
    let data: Vec<T> = (0..n).flat_map(|_| enc.states.data().iter().copied()).collect();
    Ok(Encoded {
        states: Tensor::new(shape, data)?,
        lengths: vec![enc.lengths[0]; n],
    })
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

fn encode_one<T: Elem>(
    params: &ParamStore<T>,
    model: &ModelConfig,
    features: &FeatureSequence,
) -> Result<Encoded<T>, DecodeError> {
    Ok(encode(params, model, &SourceBatch::new(&[features])?)?)
}

/// Beam search: per-step pruning keeps the `beam_size` best continuations by
/// accumulated log-probability; `<eos>` moves a hypothesis to the finished
/// set, and finished hypotheses are re-ranked by
/// `eta * log_prob + gamma * sqrt(word_count)`. Ties go to the
/// lexicographically smaller token sequence.
pub fn beam_search<T: Elem>(
    params: &ParamStore<T>,
    model: &ModelConfig,
    features: &FeatureSequence,
    cfg: &DecodeConfig,
    vocab: &GraphemeVocab,
) -> Result<BeamResult, DecodeError> {
    cfg.validate(model)?;
    let enc = encode_one(params, model, features)?;
    beam_search_encoded(params, model, &enc, cfg, vocab)
}

pub fn beam_search_encoded<T: Elem>(
    params: &ParamStore<T>,
    model: &ModelConfig,
    enc: &Encoded<T>,
    cfg: &DecodeConfig,
    vocab: &GraphemeVocab,
) -> Result<BeamResult, DecodeError> {
    cfg.validate(model)?;
    let v = model.vocab_size;
    let mut active: Vec<(Vec<usize>, f64)> = vec![(vec![SOS], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        if active.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = active.iter().map(|(p, _)| p.clone()).collect();
        let logits = decode_step(params, model, &repeat_encoded(enc, active.len())?, &prefixes)?;
        let mut cands: Vec<(Vec<usize>, f64)> = Vec::with_capacity(active.len() * v);
        for (b, (prefix, lp)) in active.iter().enumerate() {
            let lps = last_log_probs(&logits, b);
            for tok in emittable(v) {
                let mut next = prefix.clone();
                next.push(tok);
                cands.push((next, lp + lps[tok]));
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        cands.truncate(cfg.beam_size);
        let last = step + 1 == cfg.max_len;
        active.clear();
        for (seq, lp) in cands {
            if seq.last() == Some(&EOS) || last {
                finished.push(finish(seq[1..].to_vec(), lp, cfg, vocab));
            } else {
                active.push((seq, lp));
            }
        }
    }
    finished.sort_by(rank);
    Ok(BeamResult {
        best: finished[0].clone(),
        beam: finished,
    })
}

/// Argmax decoding; ties go to the lower token index.
pub fn greedy_decode<T: Elem>(
    params: &ParamStore<T>,
    model: &ModelConfig,
    features: &FeatureSequence,
    cfg: &DecodeConfig,
    vocab: &GraphemeVocab,
) -> Result<Hypothesis, DecodeError> {
    cfg.validate(model)?;
    let enc = encode_one(params, model, features)?;
    let mut prefix = vec![SOS];
    let mut lp = 0.0;
    for _ in 0..cfg.max_len {
        let logits = decode_step(params, model, &enc, std::slice::from_ref(&prefix))?;
        let lps = last_log_probs(&logits, 0);
        let mut best = EOS;
        for tok in emittable(model.vocab_size) {
            if lps[tok] > lps[best] || (lps[tok] == lps[best] && tok < best) {
                best = tok;
            }
        }
        lp += lps[best];
        prefix.push(best);
        if best == EOS {
            break;
        }
    }
    Ok(finish(prefix[1..].to_vec(), lp, cfg, vocab))
}

/// Log-probability of emitting `tokens` after `<sos>`, from one teacher-forced
/// decoder pass.
pub fn sequence_log_prob<T: Elem>(
    params: &ParamStore<T>,
    model: &ModelConfig,
    features: &FeatureSequence,
    tokens: &[usize],
) -> Result<f64, DecodeError> {
    let enc = encode_one(params, model, features)?;
    let mut prefix = vec![SOS];
    prefix.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
    let logits = decode_step(params, model, &enc, &[prefix])?;
    let v = model.vocab_size;
    let mut total = 0.0;
    for (i, &tok) in tokens.iter().enumerate() {
        let row: Vec<f64> = logits.data()[i * v..(i + 1) * v].iter().map(|x| x.as_f64()).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += row[tok] - lse;
    }
    Ok(total)
}
