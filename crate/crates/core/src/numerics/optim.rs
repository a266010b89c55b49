use serde::{Deserialize, Serialize};

use super::{Elem, NumericsError, ParamStore};

/// Plain gradient descent. Returns a new store; `params` is left untouched.
pub fn sgd_step<T: Elem>(
    params: &ParamStore<T>,
    grads: &ParamStore<T>,
    lr: f64,
) -> Result<ParamStore<T>, NumericsError> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(NumericsError::Usage(format!("learning rate {lr} is invalid")));
    }
    let lr = T::lit(lr);
    params.zip_with(grads, |p, g| p - lr * g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Elem> AdamState<T> {
    pub fn fresh(params: &ParamStore<T>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Elem>(
    state: &AdamState<T>,
    params: &ParamStore<T>,
    grads: &ParamStore<T>,
    cfg: &AdamConfig,
) -> Result<(ParamStore<T>, AdamState<T>), NumericsError> {
    params.check_congruent(grads)?;
    params.check_congruent(&state.m)?;
    params.check_congruent(&state.v)?;
    let step = state.step + 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let m = state.m.zip_with(grads, |m, g| b1 * m + (one - b1) * g)?;
    let v = state.v.zip_with(grads, |v, g| b2 * v + (one - b2) * g * g)?;
    let bc1 = T::lit(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(step as i32));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    let mut next = ParamStore::new();
    for (((name, p), (_, mt)), (_, vt)) in params.iter().zip(m.iter()).zip(v.iter()) {
        let data = p
            .data()
            .iter()
            .zip(mt.data())
            .zip(vt.data())
            .map(|((&p, &m), &v)| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                p - lr * mhat / (vhat.sqrt() + eps)
            })
            .collect();
        next.insert(name, super::Tensor::from_parts(p.shape().to_vec(), data));
    }
    Ok((next, AdamState { step, m, v }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_f64(&[vals.len()], vals).unwrap());
        p
    }

    #[test]
    fn sgd_values() {
        let p = store(&[1.0]);
        let g = store(&[2.0]);
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        let next = sgd_step(&p, &g, 0.1).unwrap();
        assert!((next.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.get("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn sgd_on_quadratic() {
        // L = (θ - 3)², dL/dθ = 2(θ - 3)
        let p = store(&[0.0]);
        let g = store(&[2.0 * (0.0 - 3.0)]);
        let next = sgd_step(&p, &g, 0.25).unwrap();
        assert_eq!(next.get("w").unwrap().data()[0], 1.5);
    }

    #[test]
    fn sgd_rejects_incongruent_grads() {
        let p = store(&[1.0, 2.0]);
        let g = store(&[1.0]);
        assert!(matches!(sgd_step(&p, &g, 0.1), Err(NumericsError::Structure(_))));
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let p = store(&[1.5, -2.0]);
        let g = store(&[0.0, 0.0]);
        let (next, st) = adam_step(&AdamState::fresh(&p), &p, &g, &AdamConfig::default()).unwrap();
        assert_eq!(next, p);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let p = store(&[0.0]);
        let g = store(&[1.0]);
        let cfg = AdamConfig::default();
        let (next, _) = adam_step(&AdamState::fresh(&p), &p, &g, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let delta = next.get("w").unwrap().data()[0];
        assert!((delta + 1e-3 / (1.0 + 1e-9)).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_reference_recurrence_on_quadratic() {
        // independent scalar recurrence
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let (mut th, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut p = store(&[0.0]);
        let mut st = AdamState::fresh(&p);
        let mut losses = Vec::new();
        for t in 1..=100 {
            let g = 2.0 * (th - 3.0);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            th -= cfg.lr * mh / (vh.sqrt() + cfg.eps);

            let cur = p.get("w").unwrap().data()[0];
            let grads = store(&[2.0 * (cur - 3.0)]);
            let (np, ns) = adam_step(&st, &p, &grads, &cfg).unwrap();
            p = np;
            st = ns;
            let now = p.get("w").unwrap().data()[0];
            assert!((now - th).abs() < 1e-12, "step {t}: {now} vs {th}");
            losses.push((now - 3.0).powi(2));
        }
        // small steps never overshoot the minimum at 3, so the loss falls every step
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
        assert!(losses[99] < 9.0 * 0.5);
    }
}
