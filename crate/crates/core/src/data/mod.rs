//! Manifests, accent presets, text normalization, vocabularies and the
//! synthetic accent corpus.

mod accents;
mod manifest;
mod split;
mod synthetic;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::features::{wav_features, FeatureError, FeatureSequence, SpectrogramConfig};
use crate::model::GraphemeVocab;
use crate::numerics::{read_raw_f32, NumericsError};

pub use accents::{
    accent_code, accent_name, AccentSplitPreset, ACCENTS, REFERENCE_STATS, REFERENCE_TOTAL,
};
pub use manifest::{
    accent_stats, convert_commonvoice, format_stats, load_manifest, write_manifest, AccentStats,
    Manifest, ManifestOptions, Reject, MANIFEST_HEADER,
};
pub use split::{make_split, AdaptSplit, DatasetSplit};
pub use synthetic::{
    generate_synthetic_corpus, load_synthetic_corpus, save_synthetic_corpus, synthetic_accent_id, SyntheticAccentSpec,
    SyntheticConfig, SyntheticCorpus, SYNTHETIC_META,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}:{line}: malformed row: {msg}")]
    Malformed { path: String, line: u64, msg: String },
    #[error("preset error: {0}")]
    Preset(String),
    #[error("empty corpus: {0}")]
    Empty(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio_path: PathBuf,
    pub features: Option<Arc<FeatureSequence>>,
    pub transcript: String,
    pub accent: String,
    pub duration_s: f64,
}

impl Utterance {
    /// Features from memory, a raw `.f32` matrix with `n_mels` columns, or a WAV file.
    pub fn load_features(&self, spec: &SpectrogramConfig) -> Result<Arc<FeatureSequence>, DataError> {
        if let Some(f) = &self.features {
            return Ok(f.clone());
        }
        let path = &self.audio_path;
        if path.extension().is_some_and(|e| e == "f32") {
            return Ok(Arc::new(read_feature_matrix(path, spec.n_mels)?));
        }
        Ok(Arc::new(wav_features(path, spec)?))
    }
}

pub fn read_feature_matrix(path: &Path, dim: usize) -> Result<FeatureSequence, DataError> {
    let bytes = std::fs::metadata(path)
        .map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?
        .len() as usize;
    let n = bytes / 4;
    if n == 0 || n % dim != 0 {
        return Err(DataError::Io(format!(
            "{}: {n} values do not form frames of width {dim}",
            path.display()
        )));
    }
    let t = read_raw_f32(path, &[n / dim, dim])?;
    Ok(FeatureSequence::from_flat(t.data(), dim, 10.0, 25.0))
}

/// Fills in `features` for every utterance that lacks them.
pub fn preload_features(utts: &mut [Utterance], spec: &SpectrogramConfig) -> Result<(), DataError> {
    use rayon::prelude::*;
    let loaded: Vec<Result<Arc<FeatureSequence>, DataError>> =
        utts.par_iter().map(|u| u.load_features(spec)).collect();
    for (u, f) in utts.iter_mut().zip(loaded) {
        u.features = Some(f.map_err(|e| DataError::Io(format!("utterance {}: {e}", u.id)))?);
    }
    Ok(())
}

/// Lowercase, keep apostrophes, drop other punctuation, collapse whitespace.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars().flat_map(char::to_lowercase) {
        let c = if c == '\u{2019}' || c == '\u{2018}' { '\'' } else { c };
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if c.is_ascii_lowercase() || c == '\'' {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    out
}

pub fn build_vocab(utts: &[Utterance]) -> Result<GraphemeVocab, DataError> {
    if utts.is_empty() {
        return Err(DataError::Empty("cannot build a vocabulary from no utterances".into()));
    }
    Ok(GraphemeVocab::from_texts(utts.iter().map(|u| u.transcript.as_str())))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_text("Hello, World!"), "hello world");
        assert_eq!(normalize_text("don't  STOP"), "don't stop");
        assert_eq!(normalize_text("  \t"), "");
        assert_eq!(normalize_text("It\u{2019}s 4 o'clock."), "it's o'clock");
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent_and_closed(s in "\\PC{0,40}") {
            let n = normalize_text(&s);
            prop_assert_eq!(normalize_text(&n), n.clone());
            prop_assert!(n.chars().all(|c| c.is_ascii_lowercase() || c == '\'' || c == ' '));
            prop_assert!(!n.starts_with(' ') && !n.ends_with(' ') && !n.contains("  "));
        }
    }

    #[test]
    fn vocab_from_transcripts() {
        let u = |t: &str| Utterance {
            id: "x".into(),
            audio_path: PathBuf::new(),
            features: None,
            transcript: t.into(),
            accent: "us".into(),
            duration_s: 1.0,
        };
        let v = build_vocab(&[u("ba"), u("a c")]).unwrap();
        assert_eq!(v.chars(), &[' ', 'a', 'b', 'c']);
        assert!(build_vocab(&[]).is_err());
    }
}
