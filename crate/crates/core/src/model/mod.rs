//! Convolutional front end, transformer encoder, causal transformer decoder
//! and the teacher-forced grapheme likelihood.

mod forward;
mod vocab;

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Elem, NumericsError, ParamStore, Tensor};

pub use forward::{
    decode_on_tape, decode_step, encode, encode_on_tape, loss_and_grad, loss_gradcheck, loss_on_tape, nll_loss,
    Encoded, SourceBatch, TargetBatch,
};
pub use vocab::{GraphemeVocab, EOS, PAD, RESERVED, SOS, UNK};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub dim_model: usize,
    pub dim_inner: usize,
    pub dim_emb: usize,
    pub n_heads: usize,
    /// Output channels of each conv block; every block halves time and frequency.
    pub vgg_channels: Vec<usize>,
    pub n_mels: usize,
    pub dropout_rate: f64,
    pub vocab_size: usize,
    pub max_target_len: usize,
}

impl ModelConfig {
    /// Full-size configuration: 2 encoder and 4 decoder layers of width 512.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            n_enc_layers: 2,
            n_dec_layers: 4,
            dim_model: 512,
            dim_inner: 2048,
            dim_emb: 512,
            n_heads: 8,
            vgg_channels: vec![64, 128],
            n_mels: 80,
            dropout_rate: 0.1,
            vocab_size,
            max_target_len: 400,
        }
    }

    /// Desk-scale profile used by the tests and the synthetic benchmark.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_enc_layers: 1,
            n_dec_layers: 2,
            dim_model: 64,
            dim_inner: 256,
            dim_emb: 64,
            n_heads: 4,
            vgg_channels: vec![8, 16],
            n_mels: 20,
            dropout_rate: 0.1,
            vocab_size,
            max_target_len: 64,
        }
    }

    pub fn profile(name: &str, vocab_size: usize) -> Result<Self, ModelError> {
        match name {
            "full" => Ok(Self::full(vocab_size)),
            "toy" => Ok(Self::toy(vocab_size)),
            other => Err(ModelError::Config(format!(
                "unknown model profile `{other}` (expected full or toy)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("dim_model", self.dim_model),
            ("dim_inner", self.dim_inner),
            ("dim_emb", self.dim_emb),
            ("n_heads", self.n_heads),
            ("n_mels", self.n_mels),
            ("vocab_size", self.vocab_size),
            ("max_target_len", self.max_target_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.vgg_channels.contains(&0) {
            return Err(ModelError::Config("vgg channel counts must be positive".into()));
        }
        if self.dim_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "dim_model {} is not divisible by n_heads {}",
                self.dim_model, self.n_heads
            )));
        }
        if self.vocab_size <= RESERVED {
            return Err(ModelError::Config(format!(
                "vocab_size {} leaves no room past the {RESERVED} reserved symbols",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn downsample(&self) -> usize {
        1 << self.vgg_channels.len()
    }

    /// Frequency extent after the conv blocks.
    pub fn reduced_mels(&self) -> usize {
        self.vgg_channels
            .iter()
            .fold(self.n_mels, |f, _| f.div_ceil(2))
    }

    pub fn head_dim(&self) -> usize {
        self.dim_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

fn attention_layout(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        linear_layout(out, &format!("{prefix}.{proj}"), d, d);
    }
}

fn linear_layout(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, i: usize, o: usize) {
    out.push((
        format!("{prefix}.weight"),
        vec![i, o],
        Init::Xavier {
            fan_in: i,
            fan_out: o,
        },
    ));
    out.push((format!("{prefix}.bias"), vec![o], Init::Zeros));
}

fn norm_layout(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gain"), vec![d], Init::Ones));
    out.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let d = cfg.dim_model;
    let mut c_in = 1;
    for (b, &c) in cfg.vgg_channels.iter().enumerate() {
        for (conv, ci) in [("conv1", c_in), ("conv2", c)] {
            out.push((
                format!("vgg.{b}.{conv}.weight"),
                vec![c, ci, 3, 3],
                Init::Xavier {
                    fan_in: ci * 9,
                    fan_out: c * 9,
                },
            ));
            out.push((format!("vgg.{b}.{conv}.bias"), vec![c], Init::Zeros));
        }
        c_in = c;
    }
    linear_layout(&mut out, "enc.proj", c_in * cfg.reduced_mels(), d);
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc.layers.{l}");
        norm_layout(&mut out, &format!("{p}.ln1"), d);
        attention_layout(&mut out, &format!("{p}.self_attn"), d);
        norm_layout(&mut out, &format!("{p}.ln2"), d);
        linear_layout(&mut out, &format!("{p}.ffn.fc1"), d, cfg.dim_inner);
        linear_layout(&mut out, &format!("{p}.ffn.fc2"), cfg.dim_inner, d);
    }
    norm_layout(&mut out, "enc.ln_f", d);
    out.push((
        "dec.embed.weight".into(),
        vec![cfg.vocab_size, cfg.dim_emb],
        Init::Xavier {
            fan_in: cfg.vocab_size,
            fan_out: cfg.dim_emb,
        },
    ));
    if cfg.dim_emb != d {
        out.push((
            "dec.embed_proj.weight".into(),
            vec![cfg.dim_emb, d],
            Init::Xavier {
                fan_in: cfg.dim_emb,
                fan_out: d,
            },
        ));
    }
    for l in 0..cfg.n_dec_layers {
        let p = format!("dec.layers.{l}");
        norm_layout(&mut out, &format!("{p}.ln1"), d);
        attention_layout(&mut out, &format!("{p}.self_attn"), d);
        norm_layout(&mut out, &format!("{p}.ln2"), d);
        attention_layout(&mut out, &format!("{p}.cross_attn"), d);
        norm_layout(&mut out, &format!("{p}.ln3"), d);
        linear_layout(&mut out, &format!("{p}.ffn.fc1"), d, cfg.dim_inner);
        linear_layout(&mut out, &format!("{p}.ffn.fc2"), cfg.dim_inner, d);
    }
    norm_layout(&mut out, "dec.ln_f", d);
    linear_layout(&mut out, "dec.out", d, cfg.vocab_size);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Parameter names and shapes in lexicographic order.
pub fn param_shapes(cfg: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>, ModelError> {
    cfg.validate()?;
    Ok(layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect())
}

pub fn param_count(cfg: &ModelConfig) -> Result<usize, ModelError> {
    Ok(param_shapes(cfg)?
        .values()
        .map(|s| s.iter().product::<usize>())
        .sum())
}

/// Xavier-uniform matrices, zero biases, unit layer-norm gains.
pub fn build_model<T: Elem>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| T::lit(rng.gen_range(-a..a))).collect()
            }
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Checks that `params` has exactly the layout `cfg` builds.
pub fn check_params<T: Elem>(cfg: &ModelConfig, params: &ParamStore<T>) -> Result<(), ModelError> {
    let want = param_shapes(cfg)?;
    let got: BTreeMap<String, Vec<usize>> = params
        .iter()
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    if want != got {
        let missing = want.keys().find(|k| got.get(*k) != want.get(*k));
        let extra = got.keys().find(|k| !want.contains_key(*k));
        return Err(ModelError::Numerics(NumericsError::Structure(format!(
            "parameters do not match the model config (first mismatch: {})",
            missing.or(extra).map_or("?", |s| s.as_str())
        ))));
    }
    Ok(())
}
