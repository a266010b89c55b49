//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bound, NumericsError, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients that vanish are
    /// judged on absolute error `tolerance * abs_floor`.
    pub abs_floor: f64,
    /// Probe at most this many coordinates per tensor (all when `None`).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// A coordinate that fails is re-probed with the step divided by 4, up to
    /// this many times. Functions with kinks (ReLU, max) can have one within
    /// `step` of the probe point; a wrong gradient stays wrong at every step.
    pub step_refinements: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
            step_refinements: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    /// The `n` parameters with the largest error, worst first.
    pub fn worst(&self, n: usize) -> Vec<&ParamCheck> {
        let mut v: Vec<&ParamCheck> = self.params.iter().collect();
        v.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        v.truncate(n);
        v
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &ParamStore<f64>) -> Result<f64, NumericsError>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &Bound) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params, false);
    let out = f(&mut tape, &bound)?;
    Ok(tape.value(out).item())
}

/// Tape gradients of `f` at `params`.
pub fn analytic_gradients<F>(f: &F, params: &ParamStore<f64>) -> Result<ParamStore<f64>, NumericsError>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &Bound) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params, true);
    let out = f(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    Ok(grads.for_params(&bound))
}

/// Compares `analytic` against central differences of `f`.
pub fn check_against<F>(
    f: &F,
    params: &ParamStore<f64>,
    analytic: &ParamStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &Bound) -> Result<Var, NumericsError>,
{
    params.check_congruent(analytic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = params.clone();
    let mut out = Vec::new();
    for (name, t) in params.iter() {
        let n = t.len();
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let ga = analytic.get(name).expect("congruent").data();
        let mut check = ParamCheck {
            name: name.to_string(),
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let orig = t.data()[i];
            let mut step = cfg.step;
            let (mut numeric, mut e) = (f64::NAN, f64::NAN);
            for _ in 0..=cfg.step_refinements {
                probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
                let plus = evaluate(f, &probe)?;
                probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
                let minus = evaluate(f, &probe)?;
                probe.get_mut(name).unwrap().data_mut()[i] = orig;
                let n = (plus - minus) / (2.0 * step);
                let err = rel_error(ga[i], n, cfg.abs_floor);
                let err = if err.is_finite() { err } else { f64::INFINITY };
                if e.is_nan() || err < e {
                    (numeric, e) = (n, err);
                }
                if e < cfg.tolerance {
                    break;
                }
                step /= 4.0;
            }
            if e > check.max_rel_error || !e.is_finite() {
                check.max_rel_error = if e.is_finite() { e } else { f64::INFINITY };
                check.worst_index = i;
                check.analytic = ga[i];
                check.numeric = numeric;
            }
        }
        out.push(check);
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params: out,
    })
}

/// Compares backward-pass gradients of `f` with central finite differences.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamStore<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, NumericsError>
where
    F: for<'a> Fn(&mut Tape<'a, f64>, &Bound) -> Result<Var, NumericsError>,
{
    let analytic = analytic_gradients(&f, params)?;
    check_against(&f, params, &analytic, cfg)
}
