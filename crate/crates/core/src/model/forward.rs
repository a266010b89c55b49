use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, EOS, PAD, RESERVED, SOS};
use crate::features::FeatureSequence;
use crate::numerics::{
    finite_diff_check, Bound, Elem, GradCheckConfig, GradCheckReport, NumericsError, ParamStore, Tape, Tensor, Var,
};

const MASKED: f64 = -1e9;

/// Zero-padded `[batch, frames, dim]` features with per-item lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    data: Vec<f32>,
    batch: usize,
    frames: usize,
    dim: usize,
    lengths: Vec<usize>,
}

impl SourceBatch {
    pub fn new(seqs: &[&FeatureSequence]) -> Result<Self, ModelError> {
        Self::padded(seqs, 0)
    }

    /// Pads every item to at least `min_frames` frames.
    pub fn padded(seqs: &[&FeatureSequence], min_frames: usize) -> Result<Self, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::Data("empty source batch".into()));
        }
        let dim = seqs[0].dim();
        let frames = seqs
            .iter()
            .map(|s| s.num_frames())
            .max()
            .unwrap_or(0)
            .max(min_frames);
        let mut data = vec![0.0; seqs.len() * frames * dim];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            if s.num_frames() == 0 {
                return Err(ModelError::Data(format!("source item {b} has no frames")));
            }
            for (t, row) in s.frames.iter().enumerate() {
                if row.len() != dim {
                    return Err(ModelError::Data(format!(
                        "source item {b} frame {t} has width {} (expected {dim})",
                        row.len()
                    )));
                }
                let off = (b * frames + t) * dim;
                data[off..off + dim].copy_from_slice(row);
            }
            lengths.push(s.num_frames());
        }
        Ok(Self {
            data,
            batch: seqs.len(),
            frames,
            dim,
            lengths,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }
}

/// Teacher-forced targets: decoder inputs are `<sos>` followed by the target
/// shifted right; outputs end with `<eos>`. Both padded with `<pad>`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    batch: usize,
    len: usize,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    pad: Vec<bool>,
}

impl TargetBatch {
    pub fn new(targets: &[&[usize]]) -> Result<Self, ModelError> {
        Self::padded(targets, 0)
    }

    pub fn padded(targets: &[&[usize]], min_len: usize) -> Result<Self, ModelError> {
        if targets.is_empty() {
            return Err(ModelError::Data("empty target batch".into()));
        }
        for (b, t) in targets.iter().enumerate() {
            if t.is_empty() {
                return Err(ModelError::Data(format!("target {b} is empty")));
            }
            if t.last() != Some(&EOS) {
                return Err(ModelError::Data(format!("target {b} does not end with <eos>")));
            }
            if t.contains(&PAD) {
                return Err(ModelError::Data(format!("target {b} contains <pad>")));
            }
        }
        let len = targets.iter().map(|t| t.len()).max().unwrap().max(min_len);
        let n = targets.len() * len;
        let (mut inputs, mut outputs, mut pad) = (vec![PAD; n], vec![PAD; n], vec![true; n]);
        for (b, t) in targets.iter().enumerate() {
            let row = b * len;
            inputs[row] = SOS;
            for (i, &tok) in t.iter().enumerate() {
                outputs[row + i] = tok;
                pad[row + i] = false;
                if i + 1 < t.len() {
                    inputs[row + i + 1] = tok;
                }
            }
        }
        Ok(Self {
            batch: targets.len(),
            len,
            inputs,
            outputs,
            pad,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad
    }
}

/// Encoder output `[batch, steps, dim_model]` and per-item valid steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<T: Elem> {
    pub states: Tensor<T>,
    pub lengths: Vec<usize>,
}

struct Ctx<'c, 'r> {
    cfg: &'c ModelConfig,
    dropout: Option<&'r mut ChaCha8Rng>,
}

impl Ctx<'_, '_> {
    fn dropout<T: Elem>(&mut self, t: &mut Tape<'_, T>, x: Var) -> Result<Var, ModelError> {
        let p = self.cfg.dropout_rate;
        let Some(rng) = self.dropout.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let shape = t.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = t.constant(Tensor::new(shape, mask)?);
        Ok(t.mul(x, m)?)
    }
}

fn linear<T: Elem>(t: &mut Tape<'_, T>, p: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = t.matmul(x, w)?;
    Ok(t.add(y, b)?)
}

fn norm<T: Elem>(t: &mut Tape<'_, T>, p: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let g = p.get(&format!("{name}.gain"))?;
    let b = p.get(&format!("{name}.bias"))?;
    Ok(t.layer_norm(x, g, b, 1e-5)?)
}

pub(crate) fn positional_encoding<T: Elem>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 / rate;
            data.push(T::lit(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(vec![len, dim], data).expect("positive extents")
}

/// Additive attention mask `[batch * heads, tq, tk]`: keys at or past
/// `key_lens[b]` are masked, and with `causal` so is every key after the query.
fn attention_mask<T: Elem>(
    heads: usize,
    tq: usize,
    tk: usize,
    key_lens: &[usize],
    causal: bool,
) -> Tensor<T> {
    let masked = T::lit(MASKED);
    let mut data = Vec::with_capacity(key_lens.len() * heads * tq * tk);
    for &kl in key_lens {
        for _ in 0..heads {
            for q in 0..tq {
                for k in 0..tk {
                    let hidden = k >= kl || (causal && k > q);
                    data.push(if hidden { masked } else { T::zero() });
                }
            }
        }
    }
    Tensor::new(vec![key_lens.len() * heads, tq, tk], data).expect("positive extents")
}

fn split_heads<T: Elem>(t: &mut Tape<'_, T>, x: Var, h: usize) -> Result<Var, ModelError> {
    let s = t.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = t.reshape(x, &[b, n, h, d / h])?;
    let x = t.permute(x, &[0, 2, 1, 3])?;
    Ok(t.reshape(x, &[b * h, n, d / h])?)
}

fn attention<T: Elem>(
    t: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &ModelConfig,
    name: &str,
    xq: Var,
    xkv: Var,
    mask: Var,
) -> Result<Var, ModelError> {
    let h = cfg.n_heads;
    let sq = t.shape(xq).to_vec();
    let (b, tq, d) = (sq[0], sq[1], sq[2]);
    let q = linear(t, p, &format!("{name}.q"), xq)?;
    let k = linear(t, p, &format!("{name}.k"), xkv)?;
    let v = linear(t, p, &format!("{name}.v"), xkv)?;
    let (q, k, v) = (split_heads(t, q, h)?, split_heads(t, k, h)?, split_heads(t, v, h)?);
    let scores = t.batch_matmul_t(q, k)?;
    let scores = t.scale(scores, T::lit(1.0 / (cfg.head_dim() as f64).sqrt()));
    let scores = t.add(scores, mask)?;
    let probs = t.softmax(scores, 2)?;
    let ctx = t.batch_matmul(probs, v)?;
    let ctx = t.reshape(ctx, &[b, h, tq, d / h])?;
    let ctx = t.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = t.reshape(ctx, &[b, tq, d])?;
    linear(t, p, &format!("{name}.o"), ctx)
}

fn feed_forward<T: Elem>(
    t: &mut Tape<'_, T>,
    p: &Bound,
    ctx: &mut Ctx,
    name: &str,
    x: Var,
) -> Result<Var, ModelError> {
    let hdn = linear(t, p, &format!("{name}.fc1"), x)?;
    let hdn = t.relu(hdn);
    let hdn = ctx.dropout(t, hdn)?;
    linear(t, p, &format!("{name}.fc2"), hdn)
}

fn time_mask<T: Elem>(shape: &[usize], lens: &[usize]) -> Tensor<T> {
    let (b, c, tt, f) = (shape[0], shape[1], shape[2], shape[3]);
    let mut data = Vec::with_capacity(b * c * tt * f);
    for &len in lens.iter().take(b) {
        for _ in 0..c {
            for step in 0..tt {
                let v = if step < len { T::one() } else { T::zero() };
                data.extend(std::iter::repeat_n(v, f));
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

fn conv_relu_masked<T: Elem>(
    t: &mut Tape<'_, T>,
    p: &Bound,
    name: &str,
    x: Var,
    lens: &[usize],
) -> Result<Var, ModelError> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = t.conv2d_strided(x, w, b, (1, 1), (1, 1))?;
    let y = t.relu(y);
    let m = t.constant(time_mask(t.shape(y), lens));
    Ok(t.mul(y, m)?)
}

fn encode_impl<T: Elem>(
    t: &mut Tape<'_, T>,
    p: &Bound,
    ctx: &mut Ctx,
    src: &SourceBatch,
) -> Result<(Var, Vec<usize>), ModelError> {
    let cfg = ctx.cfg;
    if src.dim != cfg.n_mels {
        return Err(ModelError::Numerics(crate::numerics::NumericsError::Shape(format!(
            "feature width {} does not match the configured {} bins",
            src.dim, cfg.n_mels
        ))));
    }
    let (b, mut frames) = (src.batch, src.frames);
    let data: Vec<T> = src.data.iter().map(|&v| T::lit(v as f64)).collect();
    let mut x = t.constant(Tensor::new(vec![b, 1, frames, src.dim], data)?);
    let mut lens = src.lengths.clone();
    for blk in 0..cfg.vgg_channels.len() {
        x = conv_relu_masked(t, p, &format!("vgg.{blk}.conv1"), x, &lens)?;
        x = conv_relu_masked(t, p, &format!("vgg.{blk}.conv2"), x, &lens)?;
        // inputs are masked and non-negative, so padded frames never win the max
        x = t.max_pool2d(x, 2)?;
        frames = frames.div_ceil(2);
        lens.iter_mut().for_each(|l| *l = l.div_ceil(2));
    }
    let s = t.shape(x).to_vec();
    let x = t.permute(x, &[0, 2, 1, 3])?;
    let x = t.reshape(x, &[b, frames, s[1] * s[3]])?;
    let x = linear(t, p, "enc.proj", x)?;
    let pe = t.constant(positional_encoding(frames, cfg.dim_model));
    let mut x = t.add(x, pe)?;
    x = ctx.dropout(t, x)?;
    let mask = t.constant(attention_mask(cfg.n_heads, frames, frames, &lens, false));
    for l in 0..cfg.n_enc_layers {
        let pre = format!("enc.layers.{l}");
        let h = norm(t, p, &format!("{pre}.ln1"), x)?;
        let h = attention(t, p, cfg, &format!("{pre}.self_attn"), h, h, mask)?;
        let h = ctx.dropout(t, h)?;
        x = t.add(x, h)?;
        let h = norm(t, p, &format!("{pre}.ln2"), x)?;
        let h = feed_forward(t, p, ctx, &format!("{pre}.ffn"), h)?;
        let h = ctx.dropout(t, h)?;
        x = t.add(x, h)?;
    }
    Ok((norm(t, p, "enc.ln_f", x)?, lens))
}

fn decode_impl<T: Elem>(
    t: &mut Tape<'_, T>,
    p: &Bound,
    ctx: &mut Ctx,
    enc: Var,
    enc_lens: &[usize],
    tokens: &[usize],
    len: usize,
) -> Result<Var, ModelError> {
    let cfg = ctx.cfg;
    let b = enc_lens.len();
    if len > cfg.max_target_len {
        return Err(ModelError::Length(format!(
            "target length {len} exceeds max_target_len {}",
            cfg.max_target_len
        )));
    }
    if tokens.len() != b * len {
        return Err(ModelError::Data(format!(
            "{} target tokens for batch {b} x length {len}",
            tokens.len()
        )));
    }
    let table = p.get("dec.embed.weight")?;
    let e = t.embedding(table, tokens)?;
    let e = t.reshape(e, &[b, len, cfg.dim_emb])?;
    let e = if cfg.dim_emb != cfg.dim_model {
        let w = p.get("dec.embed_proj.weight")?;
        t.matmul(e, w)?
    } else {
        e
    };
    let e = t.scale(e, T::lit((cfg.dim_model as f64).sqrt()));
    let pe = t.constant(positional_encoding(len, cfg.dim_model));
    let mut x = t.add(e, pe)?;
    x = ctx.dropout(t, x)?;
    let src_steps = t.shape(enc)[1];
    let self_mask = t.constant(attention_mask(cfg.n_heads, len, len, &vec![len; b], true));
    let cross_mask = t.constant(attention_mask(cfg.n_heads, len, src_steps, enc_lens, false));
    for l in 0..cfg.n_dec_layers {
        let pre = format!("dec.layers.{l}");
        let h = norm(t, p, &format!("{pre}.ln1"), x)?;
        let h = attention(t, p, cfg, &format!("{pre}.self_attn"), h, h, self_mask)?;
        let h = ctx.dropout(t, h)?;
        x = t.add(x, h)?;
        let h = norm(t, p, &format!("{pre}.ln2"), x)?;
        let h = attention(t, p, cfg, &format!("{pre}.cross_attn"), h, enc, cross_mask)?;
        let h = ctx.dropout(t, h)?;
        x = t.add(x, h)?;
        let h = norm(t, p, &format!("{pre}.ln3"), x)?;
        let h = feed_forward(t, p, ctx, &format!("{pre}.ffn"), h)?;
        let h = ctx.dropout(t, h)?;
        x = t.add(x, h)?;
    }
    let x = norm(t, p, "dec.ln_f", x)?;
    linear(t, p, "dec.out", x)
}

/// Encoder states `[batch, ceil(frames / downsample), dim_model]` on `t`.
pub fn encode_on_tape<T: Elem>(
    t: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &ModelConfig,
    src: &SourceBatch,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<usize>), ModelError> {
    encode_impl(t, p, &mut Ctx { cfg, dropout }, src)
}

/// Decoder logits `[batch, len, vocab]` for row-major `tokens`.
pub fn decode_on_tape<T: Elem>(
    t: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &ModelConfig,
    enc: Var,
    enc_lens: &[usize],
    tokens: &[usize],
    len: usize,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    decode_impl(t, p, &mut Ctx { cfg, dropout }, enc, enc_lens, tokens, len)
}

/// Mean negative log-likelihood over non-pad target positions.
pub fn loss_on_tape<T: Elem>(
    t: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &ModelConfig,
    src: &SourceBatch,
    tgt: &TargetBatch,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    if src.batch != tgt.batch {
        return Err(ModelError::Data(format!(
            "{} sources but {} targets",
            src.batch, tgt.batch
        )));
    }
    let mut ctx = Ctx { cfg, dropout };
    let (enc, lens) = encode_impl(t, p, &mut ctx, src)?;
    let logits = decode_impl(t, p, &mut ctx, enc, &lens, &tgt.inputs, tgt.len)?;
    let logits = t.reshape(logits, &[tgt.batch * tgt.len, cfg.vocab_size])?;
    Ok(t.cross_entropy_masked(logits, &tgt.outputs, &tgt.pad)?)
}

pub fn nll_loss<T: Elem>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    src: &SourceBatch,
    tgt: &TargetBatch,
) -> Result<f64, ModelError> {
    let mut t = Tape::new();
    let p = t.bind(params, false);
    let loss = loss_on_tape(&mut t, &p, cfg, src, tgt, None)?;
    Ok(t.value(loss).item().as_f64())
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_grad<T: Elem>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    src: &SourceBatch,
    tgt: &TargetBatch,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ParamStore<T>), ModelError> {
    let mut t = Tape::new();
    let p = t.bind(params, true);
    let loss = loss_on_tape(&mut t, &p, cfg, src, tgt, dropout)?;
    let value = t.value(loss).item().as_f64();
    let grads = t.backward(loss)?;
    Ok((value, grads.for_params(&p)))
}

pub fn encode<T: Elem>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    src: &SourceBatch,
) -> Result<Encoded<T>, ModelError> {
    let mut t = Tape::new();
    let p = t.bind(params, false);
    let (states, lengths) = encode_on_tape(&mut t, &p, cfg, src, None)?;
    Ok(Encoded {
        states: t.value(states).clone().with_grad(false),
        lengths,
    })
}

/// Logits `[batch, max prefix length, vocab]`. Each prefix starts with
/// `<sos>`; shorter prefixes are right-padded, which the causal mask keeps
/// from affecting their own positions.
pub fn decode_step<T: Elem>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    enc: &Encoded<T>,
    prefixes: &[Vec<usize>],
) -> Result<Tensor<T>, ModelError> {
    if prefixes.len() != enc.lengths.len() {
        return Err(ModelError::Data(format!(
            "{} prefixes for {} encoded items",
            prefixes.len(),
            enc.lengths.len()
        )));
    }
    if let Some(i) = prefixes.iter().position(|p| p.first() != Some(&SOS)) {
        return Err(ModelError::Data(format!("prefix {i} does not start with <sos>")));
    }
    let len = prefixes.iter().map(|p| p.len()).max().unwrap_or(0);
    let mut tokens = vec![PAD; prefixes.len() * len];
    for (b, pr) in prefixes.iter().enumerate() {
        tokens[b * len..b * len + pr.len()].copy_from_slice(pr);
    }
    let mut t = Tape::new();
    let p = t.bind(params, false);
    let e = t.borrowed(&enc.states, false);
    let logits = decode_on_tape(&mut t, &p, cfg, e, &enc.lengths, &tokens, len, None)?;
    Ok(t.value(logits).clone())
}

/// Finite-difference check of the full training loss on a random two-utterance
/// batch, at parameters jittered by up to 0.05 so no ReLU input sits exactly
/// on its kink. Kinks can still fall inside the difference step, so failing
/// coordinates are re-probed with smaller steps.
pub fn loss_gradcheck(
    cfg: &ModelConfig,
    seed: u64,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport, ModelError> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::sub_seed(seed, "gradcheck", 0));
    let p = super::build_model::<f64>(cfg, seed)?.map(|_, t| {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05));
        t
    });
    let min_frames = 4 * cfg.downsample();
    let xs: Vec<FeatureSequence> = (0..2)
        .map(|_| {
            let n = rng.gen_range(min_frames..2 * min_frames);
            FeatureSequence {
                frames: (0..n)
                    .map(|_| (0..cfg.n_mels).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
                frame_shift_ms: 10.0,
                frame_length_ms: 25.0,
            }
        })
        .collect();
    let ys: Vec<Vec<usize>> = (0..2)
        .map(|_| {
            let n = rng.gen_range(1..5);
            let mut v: Vec<usize> = (0..n).map(|_| rng.gen_range(RESERVED..cfg.vocab_size)).collect();
            v.push(EOS);
            v
        })
        .collect();
    let xr: Vec<&FeatureSequence> = xs.iter().collect();
    let yr: Vec<&[usize]> = ys.iter().map(|y| y.as_slice()).collect();
    let (src, tgt) = (SourceBatch::new(&xr)?, TargetBatch::new(&yr)?);
    Ok(finite_diff_check(
        |t, b| loss_on_tape(t, b, cfg, &src, &tgt, None).map_err(|e| NumericsError::Usage(e.to_string())),
        &p,
        &GradCheckConfig { seed, step_refinements: gc.step_refinements.max(4), ..gc.clone() },
    )?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::model::build_model;
    use crate::numerics::{finite_diff_check, GradCheckConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_enc_layers: 1,
            n_dec_layers: 1,
            dim_model: 16,
            dim_inner: 32,
            dim_emb: 16,
            n_heads: 2,
            vgg_channels: vec![3, 4],
            n_mels: 8,
            dropout_rate: 0.0,
            vocab_size: 30,
            max_target_len: 20,
        }
    }

    fn feats(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FeatureSequence {
        FeatureSequence {
            frames: (0..frames)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            frame_shift_ms: 10.0,
            frame_length_ms: 25.0,
        }
    }

    fn target(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..len).map(|_| rng.gen_range(4..vocab)).collect();
        v.push(EOS);
        v
    }

    #[test]
    fn teacher_forcing_layout() {
        let tb = TargetBatch::new(&[&[5, 6, EOS], &[7, EOS]]).unwrap();
        assert_eq!(tb.inputs(), &[SOS, 5, 6, SOS, 7, PAD]);
        assert_eq!(tb.outputs(), &[5, 6, EOS, 7, EOS, PAD]);
        assert_eq!(tb.pad_mask(), &[false, false, false, false, false, true]);
        assert!(matches!(TargetBatch::new(&[&[]]), Err(ModelError::Data(_))));
        assert!(TargetBatch::new(&[&[5, 6]]).is_err());
    }

    #[test]
    fn encoder_downsamples_by_four() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = build_model::<f32>(&c, 0).unwrap();
        let (a, b) = (feats(&mut rng, 13, 8), feats(&mut rng, 6, 8));
        let enc = encode(&p, &c, &SourceBatch::new(&[&a, &b]).unwrap()).unwrap();
        assert_eq!(enc.states.shape(), &[2, 4, 16]);
        assert_eq!(enc.lengths, vec![4, 2]);
        let wrong = feats(&mut rng, 6, 9);
        let err = encode(&p, &c, &SourceBatch::new(&[&wrong]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("feature width"), "{err}");
    }

    #[test]
    fn decoder_shapes_and_length_limit() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = build_model::<f32>(&c, 0).unwrap();
        let enc = encode(&p, &c, &SourceBatch::new(&[&feats(&mut rng, 9, 8)]).unwrap()).unwrap();
        let out = decode_step(&p, &c, &enc, &[vec![SOS]]).unwrap();
        assert_eq!(out.shape(), &[1, 1, 30]);
        let long = vec![SOS; 21];
        assert!(matches!(decode_step(&p, &c, &enc, &[long]), Err(ModelError::Length(_))));
    }

    #[test]
    fn causal_logits_ignore_later_tokens() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = build_model::<f32>(&c, 5).unwrap();
        let enc = encode(&p, &c, &SourceBatch::new(&[&feats(&mut rng, 10, 8)]).unwrap()).unwrap();
        for _ in 0..20 {
            let mut prefix = vec![SOS];
            prefix.extend((0..7).map(|_| rng.gen_range(0..30)));
            let j = rng.gen_range(1..8);
            let mut other = prefix.clone();
            other[j] = (other[j] + 1 + rng.gen_range(0..28)) % 30;
            let a = decode_step(&p, &c, &enc, &[prefix]).unwrap();
            let b = decode_step(&p, &c, &enc, &[other]).unwrap();
            let (a, b) = (a.data(), b.data());
            for pos in 0..j {
                let r = pos * 30..(pos + 1) * 30;
                let bits = |s: &[f32]| s.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a[r.clone()]), bits(&b[r]), "position {pos} changed by token {j}");
            }
            assert_ne!(a[j * 30..(j + 1) * 30], b[j * 30..(j + 1) * 30]);
        }
    }

    #[test]
    fn batch_order_is_equivariant() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = build_model::<f64>(&c, 1).unwrap();
        let xs: Vec<_> = [7, 12, 5].iter().map(|&n| feats(&mut rng, n, 8)).collect();
        let ys: Vec<_> = [3, 5, 2].iter().map(|&n| target(&mut rng, n, 30)).collect();
        let perm = [2, 0, 1];
        let enc = encode(&p, &c, &SourceBatch::new(&xs.iter().collect::<Vec<_>>()).unwrap()).unwrap();
        let prefixes: Vec<Vec<usize>> = ys.iter().map(|y| [&[SOS], &y[..y.len() - 1]].concat()).collect();
        let out = decode_step(&p, &c, &enc, &prefixes).unwrap();
        let pxs: Vec<_> = perm.iter().map(|&i| &xs[i]).collect();
        let penc = encode(&p, &c, &SourceBatch::new(&pxs).unwrap()).unwrap();
        let pprefixes: Vec<_> = perm.iter().map(|&i| prefixes[i].clone()).collect();
        let pout = decode_step(&p, &c, &penc, &pprefixes).unwrap();
        let (l, v) = (out.shape()[1], 30);
        for (k, &i) in perm.iter().enumerate() {
            for pos in 0..prefixes[i].len() {
                for tok in 0..v {
                    let a = out.data()[(i * l + pos) * v + tok];
                    let b = pout.data()[(k * l + pos) * v + tok];
                    assert!((a - b).abs() < 1e-9, "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn padding_leaves_loss_unchanged() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = build_model::<f32>(&c, 2).unwrap();
        let xs: Vec<_> = [9, 14].iter().map(|&n| feats(&mut rng, n, 8)).collect();
        let ys: Vec<_> = [4, 6].iter().map(|&n| target(&mut rng, n, 30)).collect();
        let xr: Vec<_> = xs.iter().collect();
        let yr: Vec<&[usize]> = ys.iter().map(|y| y.as_slice()).collect();
        let base = nll_loss(&p, &c, &SourceBatch::new(&xr).unwrap(), &TargetBatch::new(&yr).unwrap())
            .unwrap();
        for extra in [1, 3, 8] {
            let src = SourceBatch::padded(&xr, 14 + extra).unwrap();
            let tgt = TargetBatch::padded(&yr, 7 + extra).unwrap();
            let l = nll_loss(&p, &c, &src, &tgt).unwrap();
            assert!((l - base).abs() < 1e-5, "{extra}: {l} vs {base}");
        }
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = build_model::<f64>(&c, 9).unwrap();
        let xs: Vec<_> = (0..6).map(|_| feats(&mut rng, 12, 8)).collect();
        let ys: Vec<_> = (0..6).map(|_| target(&mut rng, 8, 30)).collect();
        let xr: Vec<_> = xs.iter().collect();
        let yr: Vec<&[usize]> = ys.iter().map(|y| y.as_slice()).collect();
        let l = nll_loss(&p, &c, &SourceBatch::new(&xr).unwrap(), &TargetBatch::new(&yr).unwrap())
            .unwrap();
        assert!((l - 30f64.ln()).abs() < 0.5, "{l}");
    }

    #[test]
    fn rigged_output_gives_zero_loss() {
        let c = cfg();
        let mut p = build_model::<f32>(&c, 0).unwrap();
        p.get_mut("dec.out.weight").unwrap().data_mut().fill(0.0);
        p.get_mut("dec.out.bias").unwrap().data_mut()[EOS] = 200.0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = feats(&mut rng, 8, 8);
        let l = nll_loss(
            &p,
            &c,
            &SourceBatch::new(&[&x]).unwrap(),
            &TargetBatch::new(&[&[EOS]]).unwrap(),
        )
        .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // zero biases put ReLU inputs exactly on the kink wherever a conv patch is all zero
        let p = build_model::<f64>(&c, 3)
            .unwrap()
            .map(|_, t| {
                let mut t = t.clone();
                t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05));
                t
            });
        let xs: Vec<_> = [6, 9].iter().map(|&n| feats(&mut rng, n, 8)).collect();
        let ys: Vec<_> = [3, 2].iter().map(|&n| target(&mut rng, n, 30)).collect();
        let xr: Vec<_> = xs.iter().collect();
        let yr: Vec<&[usize]> = ys.iter().map(|y| y.as_slice()).collect();
        let (src, tgt) = (SourceBatch::new(&xr).unwrap(), TargetBatch::new(&yr).unwrap());
        let gc = GradCheckConfig {
            max_coords_per_tensor: Some(4),
            ..GradCheckConfig::default()
        };
        let report = finite_diff_check(
            |t, b| {
                loss_on_tape(t, b, &c, &src, &tgt, None)
                    .map_err(|e| crate::numerics::NumericsError::Usage(e.to_string()))
            },
            &p,
            &gc,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst(3));
    }

    #[test]
    fn dropout_is_seeded() {
        let mut c = cfg();
        c.dropout_rate = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = build_model::<f32>(&c, 0).unwrap();
        let x = feats(&mut rng, 8, 8);
        let y = target(&mut rng, 4, 30);
        let (src, tgt) = (SourceBatch::new(&[&x]).unwrap(), TargetBatch::new(&[&y]).unwrap());
        let run = |s| loss_and_grad(&p, &c, &src, &tgt, Some(&mut ChaCha8Rng::seed_from_u64(s))).unwrap().0;
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        let clean = nll_loss(&p, &c, &src, &tgt).unwrap();
        assert_eq!(loss_and_grad(&p, &c, &src, &tgt, None).unwrap().0, clean);
    }
}
