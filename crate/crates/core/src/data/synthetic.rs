//! Synthetic accented corpus: words are fixed random frame templates and each
//! accent applies its own per-bin gain, bin permutation and noise.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_manifest, read_feature_matrix, write_manifest, DataError, Manifest, ManifestOptions, Utterance};
use crate::features::FeatureSequence;
use crate::numerics::{write_raw_f32, Tensor};
use crate::rng::stream;

pub const SYNTHETIC_META: &str = "synthetic.json";
const FRAME_SHIFT_S: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_accents: usize,
    pub utterances_per_accent: usize,
    /// Number of distinct words.
    pub base_vocab_size: usize,
    pub n_mels: usize,
    /// Words are spelled with the first `alphabet` lowercase letters.
    pub alphabet: usize,
    pub min_word_len: usize,
    pub max_word_len: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub frames_per_char: usize,
    pub noise_std: f64,
    /// Log-gains are drawn uniformly from `[-gain_spread, gain_spread]`.
    pub gain_spread: f64,
    /// Random transpositions composing each accent's bin permutation.
    pub perm_swaps: usize,
    /// Probability that a template frame is emitted twice.
    pub token_duration_jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_accents: 8,
            utterances_per_accent: 120,
            base_vocab_size: 12,
            n_mels: 20,
            alphabet: 8,
            min_word_len: 2,
            max_word_len: 3,
            min_words: 1,
            max_words: 3,
            frames_per_char: 2,
            noise_std: 0.1,
            gain_spread: 0.7,
            perm_swaps: 6,
            token_duration_jitter: 0.1,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Preset(format!("synthetic config: {m}")));
        if self.n_accents == 0 || self.utterances_per_accent == 0 || self.base_vocab_size == 0 {
            return bad("counts must be at least 1");
        }
        if self.n_mels == 0 || self.frames_per_char == 0 {
            return bad("n_mels and frames_per_char must be positive");
        }
        if !(1..=26).contains(&self.alphabet) {
            return bad("alphabet must be 1..=26 letters");
        }
        if self.min_word_len == 0 || self.min_word_len > self.max_word_len {
            return bad("word length range is empty");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("words-per-utterance range is empty");
        }
        let distinct: f64 = (self.min_word_len..=self.max_word_len)
            .map(|l| (self.alphabet as f64).powi(l as i32))
            .sum();
        if distinct < self.base_vocab_size as f64 {
            return bad("alphabet and word lengths cannot produce that many distinct words");
        }
        if !(0.0..1.0).contains(&self.token_duration_jitter) || self.noise_std < 0.0 || self.gain_spread < 0.0 {
            return bad("jitter must be in [0, 1); noise and gain spread non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAccentSpec {
    pub accent_id: String,
    /// Output bin `f` reads input bin `permutation[f]` scaled by `gains[f]`.
    pub gains: Vec<f64>,
    pub permutation: Vec<usize>,
    pub noise_std: f64,
    pub token_duration_jitter: f64,
}

impl SyntheticAccentSpec {
    pub fn identity(accent_id: &str, n_mels: usize) -> Self {
        Self {
            accent_id: accent_id.into(),
            gains: vec![1.0; n_mels],
            permutation: (0..n_mels).collect(),
            noise_std: 0.0,
            token_duration_jitter: 0.0,
        }
    }

    fn apply(&self, frame: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
        self.permutation
            .iter()
            .zip(&self.gains)
            .map(|(&src, &g)| {
                let noise = if self.noise_std > 0.0 {
                    // uniform with unit variance
                    self.noise_std * rng.gen_range(-3f64.sqrt()..3f64.sqrt())
                } else {
                    0.0
                };
                (g * frame[src] as f64 + noise) as f32
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub words: Vec<String>,
    /// One `frames x n_mels` template per word.
    pub templates: Vec<Vec<Vec<f32>>>,
    pub specs: Vec<SyntheticAccentSpec>,
    #[serde(skip)]
    pub utterances: Vec<Utterance>,
}

impl SyntheticCorpus {
    pub fn accents(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.accent_id.clone()).collect()
    }

    /// Frames of the word sequence `words` under `spec`: templates joined by
    /// a silent frame, with duration jitter and noise drawn from `rng`.
    pub fn render(&self, words: &[usize], spec: &SyntheticAccentSpec, rng: &mut ChaCha8Rng) -> FeatureSequence {
        let silence = vec![0.0f32; self.config.n_mels];
        let mut frames = Vec::new();
        for (k, &w) in words.iter().enumerate() {
            if k > 0 {
                frames.push(spec.apply(&silence, rng));
            }
            for f in &self.templates[w] {
                frames.push(spec.apply(f, rng));
                if spec.token_duration_jitter > 0.0 && rng.gen::<f64>() < spec.token_duration_jitter {
                    frames.push(spec.apply(f, rng));
                }
            }
        }
        FeatureSequence {
            frames,
            frame_shift_ms: (FRAME_SHIFT_S * 1000.0) as f32,
            frame_length_ms: 25.0,
        }
    }
}

pub fn synthetic_accent_id(i: usize) -> String {
    format!("x{i:02}")
}

fn random_word(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> String {
    let len = rng.gen_range(cfg.min_word_len..=cfg.max_word_len);
    (0..len)
        .map(|_| (b'a' + rng.gen_range(0..cfg.alphabet) as u8) as char)
        .collect()
}

/// Deterministic in `(cfg, seed)`; every accent and utterance draws from its
/// own keyed stream.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticCorpus, DataError> {
    cfg.validate()?;
    let mut wr = stream(seed, "words", 0);
    let mut words: Vec<String> = Vec::new();
    while words.len() < cfg.base_vocab_size {
        let w = random_word(&mut wr, cfg);
        if !words.contains(&w) {
            words.push(w);
        }
    }
    let templates = words
        .iter()
        .map(|w| {
            (0..w.len() * cfg.frames_per_char)
                .map(|_| (0..cfg.n_mels).map(|_| wr.gen_range(-1.0f32..1.0)).collect())
                .collect()
        })
        .collect();
    let specs = (0..cfg.n_accents)
        .map(|a| {
            let mut r = stream(seed, "accent", a as u64);
            let gains = (0..cfg.n_mels)
                .map(|_| r.gen_range(-cfg.gain_spread..=cfg.gain_spread).exp())
                .collect();
            let mut permutation: Vec<usize> = (0..cfg.n_mels).collect();
            for _ in 0..cfg.perm_swaps {
                let (i, j) = (r.gen_range(0..cfg.n_mels), r.gen_range(0..cfg.n_mels));
                permutation.swap(i, j);
            }
            SyntheticAccentSpec {
                accent_id: synthetic_accent_id(a),
                gains,
                permutation,
                noise_std: cfg.noise_std,
                token_duration_jitter: cfg.token_duration_jitter,
            }
        })
        .collect();
    let mut corpus = SyntheticCorpus {
        config: cfg.clone(),
        seed,
        words,
        templates,
        specs,
        utterances: Vec::new(),
    };
    let word_ids: Vec<usize> = (0..cfg.base_vocab_size).collect();
    for spec in &corpus.specs {
        for i in 0..cfg.utterances_per_accent {
            let mut r = stream(seed, &format!("utt/{}", spec.accent_id), i as u64);
            let n = r.gen_range(cfg.min_words..=cfg.max_words);
            let seq: Vec<usize> = (0..n).map(|_| *word_ids.choose(&mut r).unwrap()).collect();
            let feats = corpus.render(&seq, spec, &mut r);
            let id = format!("{}-{i:05}", spec.accent_id);
            corpus.utterances.push(Utterance {
                audio_path: PathBuf::from("feats").join(format!("{id}.f32")),
                id,
                duration_s: feats.num_frames() as f64 * FRAME_SHIFT_S,
                features: Some(Arc::new(feats)),
                transcript: seq.iter().map(|&w| corpus.words[w].as_str()).collect::<Vec<_>>().join(" "),
                accent: spec.accent_id.clone(),
            });
        }
    }
    Ok(corpus)
}

/// Writes `manifest.tsv`, one raw f32 matrix per utterance under `feats/`,
/// and the generator description in `synthetic.json`.
pub fn save_synthetic_corpus(dir: &Path, corpus: &SyntheticCorpus) -> Result<PathBuf, DataError> {
    let io = |p: &Path, e: std::io::Error| DataError::Io(format!("{}: {e}", p.display()));
    let feats = dir.join("feats");
    std::fs::create_dir_all(&feats).map_err(|e| io(&feats, e))?;
    let mut rows = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let f = u
            .features
            .as_ref()
            .ok_or_else(|| DataError::Empty(format!("utterance {} has no features", u.id)))?;
        let path = dir.join(&u.audio_path);
        let t = Tensor::new(vec![f.num_frames(), f.dim()], f.flat())?;
        write_raw_f32(&path, &t)?;
        rows.push(Utterance {
            audio_path: path,
            features: None,
            ..u.clone()
        });
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &rows)?;
    let meta = dir.join(SYNTHETIC_META);
    let text = serde_json::to_string_pretty(corpus).map_err(|e| DataError::Io(e.to_string()))?;
    std::fs::write(&meta, text + "\n").map_err(|e| io(&meta, e))?;
    Ok(manifest)
}

/// Reads a corpus written by [`save_synthetic_corpus`] with features loaded.
pub fn load_synthetic_corpus(dir: &Path) -> Result<(SyntheticCorpus, Manifest), DataError> {
    let meta = dir.join(SYNTHETIC_META);
    let text = std::fs::read_to_string(&meta).map_err(|e| DataError::Io(format!("{}: {e}", meta.display())))?;
    let mut corpus: SyntheticCorpus =
        serde_json::from_str(&text).map_err(|e| DataError::Io(format!("{}: {e}", meta.display())))?;
    let mut manifest = load_manifest(&dir.join("manifest.tsv"), ManifestOptions { any_accent: true })?;
    for u in &mut manifest.utterances {
        u.features = Some(Arc::new(read_feature_matrix(&u.audio_path, corpus.config.n_mels)?));
    }
    corpus.utterances = manifest.utterances.clone();
    Ok((corpus, manifest))
}
