//! Randomized finite-difference checks, one per autodiff primitive.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    finite_diff_check, Bound, GradCheckConfig, GradCheckReport, NumericsError, ParamStore, Tape,
    Tensor, Var,
};

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "batch_matmul",
    "batch_matmul_t",
    "add",
    "add_broadcast",
    "sub",
    "mul",
    "scale",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "conv2d_strided",
    "max_pool2d",
    "concat",
    "permute",
    "transpose",
    "reshape",
    "cross_entropy_masked",
    "sum",
    "mean",
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, hi: usize) -> usize {
    rng.gen_range(1..=hi)
}

/// Contracts `y` against a fixed random tensor so every output entry gets a
/// distinct upstream gradient.
fn probe(tape: &mut Tape<'_, f64>, y: Var, weights: &Tensor<f64>) -> Result<Var, NumericsError> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

struct Case {
    params: ParamStore<f64>,
    weights: Tensor<f64>,
}

fn case(rng: &mut ChaCha8Rng, inputs: &[(&str, Vec<usize>)], out_shape: &[usize]) -> Case {
    let mut params = ParamStore::new();
    for (name, shape) in inputs {
        params.insert(*name, rand_tensor(rng, shape));
    }
    Case {
        params,
        weights: rand_tensor(rng, out_shape),
    }
}

fn run<F>(c: &Case, cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport, NumericsError>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &Bound) -> Result<Var, NumericsError>,
{
    let w = &c.weights;
    finite_diff_check(
        |tape, b| {
            let y = f(tape, b)?;
            probe(tape, y, w)
        },
        &c.params,
        cfg,
    )
}

/// Checks primitive `name` on random shapes drawn from `seed`.
pub fn check_primitive(
    name: &str,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = &mut rng;
    match name {
        "matmul" => {
            let (m, k, n) = (dim(r, 6), dim(r, 7), dim(r, 5));
            let c = case(r, &[("a", vec![m, k]), ("b", vec![k, n])], &[m, n]);
            run(&c, cfg, |t, b| t.matmul(b.get("a")?, b.get("b")?))
        }
        "batch_matmul" => {
            let (s, m, k, n) = (dim(r, 3), dim(r, 4), dim(r, 5), dim(r, 4));
            let c = case(r, &[("a", vec![s, m, k]), ("b", vec![s, k, n])], &[s, m, n]);
            run(&c, cfg, |t, b| t.batch_matmul(b.get("a")?, b.get("b")?))
        }
        "batch_matmul_t" => {
            let (s, m, k, n) = (dim(r, 3), dim(r, 4), dim(r, 5), dim(r, 4));
            let c = case(r, &[("a", vec![s, m, k]), ("b", vec![s, n, k])], &[s, m, n]);
            run(&c, cfg, |t, b| t.batch_matmul_t(b.get("a")?, b.get("b")?))
        }
        "add" | "sub" | "mul" => {
            let shape = vec![dim(r, 4), dim(r, 5)];
            let c = case(r, &[("a", shape.clone()), ("b", shape.clone())], &shape);
            let op = name.to_string();
            run(&c, cfg, move |t, b| {
                let (x, y) = (b.get("a")?, b.get("b")?);
                match op.as_str() {
                    "add" => t.add(x, y),
                    "sub" => t.sub(x, y),
                    _ => t.mul(x, y),
                }
            })
        }
        "add_broadcast" => {
            let (p, q, n) = (dim(r, 3), dim(r, 4), dim(r, 5));
            let c = case(r, &[("a", vec![p, q, n]), ("b", vec![q, n])], &[p, q, n]);
            run(&c, cfg, |t, b| t.add(b.get("a")?, b.get("b")?))
        }
        "scale" => {
            let shape = vec![dim(r, 4), dim(r, 4)];
            let s = r.gen_range(-2.0..2.0);
            let c = case(r, &[("a", shape.clone())], &shape);
            run(&c, cfg, move |t, b| Ok(t.scale(b.get("a")?, s)))
        }
        "relu" => {
            let shape = vec![dim(r, 5), dim(r, 5)];
            let c = case(r, &[("a", shape.clone())], &shape);
            run(&c, cfg, |t, b| Ok(t.relu(b.get("a")?)))
        }
        "softmax" | "log_softmax" => {
            let shape = vec![dim(r, 3), dim(r, 4), dim(r, 5)];
            let axis = r.gen_range(0..3);
            let c = case(r, &[("a", shape.clone())], &shape);
            let log = name == "log_softmax";
            run(&c, cfg, move |t, b| {
                let x = t.scale(b.get("a")?, 3.0);
                if log {
                    t.log_softmax(x, axis)
                } else {
                    t.softmax(x, axis)
                }
            })
        }
        "layer_norm" => {
            let (rows, d) = (dim(r, 4), r.gen_range(2..=6));
            let c = case(
                r,
                &[("x", vec![rows, d]), ("g", vec![d]), ("b", vec![d])],
                &[rows, d],
            );
            run(&c, cfg, |t, b| t.layer_norm(b.get("x")?, b.get("g")?, b.get("b")?, 1e-5))
        }
        "embedding" => {
            let (v, d, n) = (dim(r, 6), dim(r, 4), dim(r, 7));
            let idx: Vec<usize> = (0..n).map(|_| r.gen_range(0..v)).collect();
            let c = case(r, &[("e", vec![v, d])], &[n, d]);
            run(&c, cfg, move |t, b| t.embedding(b.get("e")?, &idx))
        }
        "conv2d_strided" => {
            let (bs, ci, co) = (dim(r, 2), dim(r, 3), dim(r, 3));
            let (kh, kw) = (dim(r, 3), dim(r, 3));
            let (sh, sw) = (dim(r, 2), dim(r, 2));
            let (ph, pw) = (r.gen_range(0..=1), r.gen_range(0..=1));
            let (h, w) = (kh + dim(r, 4), kw + dim(r, 4));
            let ho = (h + 2 * ph - kh) / sh + 1;
            let wo = (w + 2 * pw - kw) / sw + 1;
            let c = case(
                r,
                &[
                    ("x", vec![bs, ci, h, w]),
                    ("w", vec![co, ci, kh, kw]),
                    ("b", vec![co]),
                ],
                &[bs, co, ho, wo],
            );
            run(&c, cfg, move |t, b| {
                t.conv2d_strided(b.get("x")?, b.get("w")?, b.get("b")?, (sh, sw), (ph, pw))
            })
        }
        "max_pool2d" => {
            let (bs, ch, h, w) = (dim(r, 2), dim(r, 2), dim(r, 5), dim(r, 5));
            let k = r.gen_range(1..=3);
            let c = case(
                r,
                &[("x", vec![bs, ch, h, w])],
                &[bs, ch, h.div_ceil(k), w.div_ceil(k)],
            );
            run(&c, cfg, move |t, b| t.max_pool2d(b.get("x")?, k))
        }
        "concat" => {
            let (p, q) = (dim(r, 3), dim(r, 3));
            let (n1, n2) = (dim(r, 4), dim(r, 4));
            let c = case(r, &[("a", vec![p, n1, q]), ("b", vec![p, n2, q])], &[p, n1 + n2, q]);
            run(&c, cfg, |t, b| t.concat(&[b.get("a")?, b.get("b")?], 1))
        }
        "permute" => {
            let shape = vec![dim(r, 3), dim(r, 4), dim(r, 2), dim(r, 3)];
            let perm = [2, 0, 3, 1];
            let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
            let c = case(r, &[("a", shape)], &out);
            run(&c, cfg, move |t, b| t.permute(b.get("a")?, &perm))
        }
        "transpose" => {
            let (p, m, n) = (dim(r, 3), dim(r, 4), dim(r, 5));
            let c = case(r, &[("a", vec![p, m, n])], &[p, n, m]);
            run(&c, cfg, |t, b| t.transpose(b.get("a")?))
        }
        "reshape" => {
            let (m, n) = (dim(r, 4), dim(r, 5));
            let c = case(r, &[("a", vec![m, n])], &[n, m]);
            run(&c, cfg, move |t, b| t.reshape(b.get("a")?, &[n, m]))
        }
        "cross_entropy_masked" => {
            let (rows, v) = (dim(r, 6), r.gen_range(2..=7));
            let targets: Vec<usize> = (0..rows).map(|_| r.gen_range(0..v)).collect();
            let mut mask: Vec<bool> = (0..rows).map(|_| r.gen_bool(0.3)).collect();
            mask[0] = false;
            let c = case(r, &[("l", vec![rows, v])], &[1]);
            run(&c, cfg, move |t, b| {
                let l = t.scale(b.get("l")?, 2.0);
                t.cross_entropy_masked(l, &targets, &mask)
            })
        }
        "sum" | "mean" => {
            let shape = vec![dim(r, 4), dim(r, 4)];
            let c = case(r, &[("a", shape)], &[1]);
            let mean = name == "mean";
            run(&c, cfg, move |t, b| {
                let x = b.get("a")?;
                let sq = t.mul(x, x)?;
                Ok(if mean { t.mean(sq) } else { t.sum(sq) })
            })
        }
        other => Err(NumericsError::Usage(format!("unknown primitive `{other}`"))),
    }
}

/// Every primitive over `seeds` random draws.
pub fn primitive_suite(
    seeds: std::ops::Range<u64>,
    cfg: &GradCheckConfig,
) -> Result<Vec<(&'static str, u64, GradCheckReport)>, NumericsError> {
    let mut out = Vec::new();
    for &name in PRIMITIVES {
        for seed in seeds.clone() {
            out.push((name, seed, check_primitive(name, seed, cfg)?));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let cfg = GradCheckConfig::default();
        for (name, seed, report) in primitive_suite(0..10, &cfg).unwrap() {
            assert!(
                report.passed(),
                "{name} seed {seed}: {:?}",
                report.worst(1)
            );
        }
    }

    #[test]
    fn unknown_primitive_is_rejected() {
        assert!(check_primitive("nope", 0, &GradCheckConfig::default()).is_err());
    }
}
