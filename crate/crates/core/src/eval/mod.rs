//! Word error rate, fold-based reporting and the few-shot sweep.

mod report;
mod sweep;

use rayon::prelude::*;

use crate::data::Utterance;
use crate::decode::{beam_search, DecodeConfig, DecodeError};
use crate::features::SpectrogramConfig;
use crate::model::{GraphemeVocab, ModelConfig};
use crate::numerics::ParamStore;

pub use report::{
    mean_and_se, read_report_csv, write_report_csv, write_summary_csv, write_sweep_csv, FoldRow,
    WerReport,
};
pub use sweep::{run_sweep, sample_folds, SweepCheckpoint, SweepGrid};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("utterance {id}: {source}")]
    Decode {
        id: String,
        #[source]
        source: DecodeError,
    },
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Meta(#[from] crate::meta::MetaError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

/// Levenshtein distance with unit insertion, deletion and substitution costs.
pub fn edit_distance<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Word-level edit operations and reference length.
pub fn word_errors(reference: &str, hypothesis: &str) -> Result<(usize, usize), EvalError> {
    let r = words(reference);
    if r.is_empty() {
        return Err(EvalError::Protocol("empty reference".into()));
    }
    Ok((edit_distance(&r, &words(hypothesis)), r.len()))
}

pub fn wer(reference: &str, hypothesis: &str) -> Result<f64, EvalError> {
    let (e, n) = word_errors(reference, hypothesis)?;
    Ok(e as f64 / n as f64)
}

/// Pooled errors over pooled reference words.
pub fn corpus_wer<'s>(pairs: impl IntoIterator<Item = (&'s str, &'s str)>) -> Result<f64, EvalError> {
    let (mut e, mut n) = (0, 0);
    for (r, h) in pairs {
        let (de, dn) = word_errors(r, h)?;
        e += de;
        n += dn;
    }
    if n == 0 {
        return Err(EvalError::Protocol("no reference words".into()));
    }
    Ok(e as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub errors: usize,
    pub ref_words: usize,
}

/// Beam-decodes every utterance (in parallel on the current rayon pool);
/// results keep the input order.
pub fn decode_utterances(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    vocab: &GraphemeVocab,
    utts: &[&Utterance],
    cfg: &DecodeConfig,
) -> Result<Vec<Decoded>, EvalError> {
    let spec = SpectrogramConfig::with_mels(model.n_mels);
    utts.par_iter()
        .map(|u| {
            let feats = u.load_features(&spec)?;
            let hyp = beam_search(params, model, &feats, cfg, vocab)
                .map_err(|source| EvalError::Decode {
                    id: u.id.clone(),
                    source,
                })?
                .best;
            let hypothesis = vocab.decode(&hyp.tokens);
            let (errors, ref_words) = word_errors(&u.transcript, &hypothesis)
                .map_err(|e| EvalError::Protocol(format!("utterance {}: {e}", u.id)))?;
            Ok(Decoded {
                id: u.id.clone(),
                reference: u.transcript.clone(),
                hypothesis,
                errors,
                ref_words,
            })
        })
        .collect()
}

/// Corpus-level WER of one fold.
pub fn evaluate_fold(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    vocab: &GraphemeVocab,
    fold: &[&Utterance],
    cfg: &DecodeConfig,
) -> Result<f64, EvalError> {
    pooled_wer(&decode_utterances(params, model, vocab, fold, cfg)?)
}

pub fn pooled_wer(decoded: &[Decoded]) -> Result<f64, EvalError> {
    let e: usize = decoded.iter().map(|d| d.errors).sum();
    let n: usize = decoded.iter().map(|d| d.ref_words).sum();
    if n == 0 {
        return Err(EvalError::Protocol("fold has no reference words".into()));
    }
    Ok(e as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use super::*;

    fn recursive(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() || b.is_empty() {
            return a.len().max(b.len());
        }
        if let Some(&v) = memo.get(&(a.len(), b.len())) {
            return v;
        }
        let v = (recursive(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]))
            .min(recursive(&a[1..], b, memo) + 1)
            .min(recursive(a, &b[1..], memo) + 1);
        memo.insert((a.len(), b.len()), v);
        v
    }

    #[test]
    fn examples() {
        assert_eq!(edit_distance(&["the", "cat", "sat"], &["the", "bat", "sat", "on"]), 2);
        assert_eq!(edit_distance::<&str>(&["a", "b"], &[]), 2);
        assert_eq!(wer("hello world", "hello word").unwrap(), 0.5);
        assert_eq!(wer("a b", "a b").unwrap(), 0.0);
        assert_eq!(wer("a", "b c d").unwrap(), 3.0);
        assert!(matches!(wer("  ", "x"), Err(EvalError::Protocol(_))));
        let c = corpus_wer([("a b c d", "a b c d"), ("e", "f")]).unwrap();
        assert_eq!(c, 1.0 / 5.0);
    }

    proptest! {
        #[test]
        fn matches_recursive_oracle(a in proptest::collection::vec(0u8..3, 0..8), b in proptest::collection::vec(0u8..3, 0..8)) {
            prop_assert_eq!(edit_distance(&a, &b), recursive(&a, &b, &mut HashMap::new()));
        }

        #[test]
        fn is_a_metric(a in proptest::collection::vec(0u8..4, 0..10), b in proptest::collection::vec(0u8..4, 0..10), c in proptest::collection::vec(0u8..4, 0..10)) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }

        #[test]
        fn self_wer_is_zero(s in "[a-z' ]{0,30}") {
            let n = crate::data::normalize_text(&s);
            prop_assume!(!n.is_empty());
            prop_assert_eq!(wer(&n, &n).unwrap(), 0.0);
        }
    }
}
