use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many (randomly chosen) entries of each parameter.
    pub max_elements_per_param: Option<usize>,
    /// Seed for choosing the checked entries.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_elements_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-parameter relative error.
    pub max_relative_error: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` per
    /// parameter tensor, with vector norms over the checked entries.
    pub per_param: Vec<f64>,
    /// Number of entries compared.
    pub checked: usize,
}

/// Compares tape gradients against central finite differences in 64-bit.
///
/// `build` records a scalar loss on a fresh tape given the parameter
/// handles; it is re-run once per perturbed entry.
pub fn grad_check<F>(params: &[Tensor<f64>], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(Error::invalid("grad_check builder must return a scalar"));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if !tape.value(loss).all_finite() {
        return Err(Error::NonFinite("loss in gradient check".into()));
    }
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    let mut checked = 0;
    for (pi, (p, var)) in params.iter().zip(&vars).enumerate() {
        let zero = Tensor::zeros(p.shape())?;
        let analytic = grads.get(*var).unwrap_or(&zero);
        if !analytic.all_finite() {
            return Err(Error::NonFinite(format!("analytic gradient of parameter {pi}")));
        }
        let n = p.numel();
        let indices: Vec<usize> = match opts.max_elements_per_param {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &indices {
            let orig = p.data()[i];
            work[pi] = with_entry(p, i, orig + opts.step);
            let plus = eval(&work)?;
            work[pi] = with_entry(p, i, orig - opts.step);
            let minus = eval(&work)?;
            work[pi] = p.clone();
            let numeric = (plus - minus) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference of parameter {pi} entry {i}"
                )));
            }
            let a = analytic.data()[i];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        checked += indices.len();
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-8);
        per_param.push(diff2.sqrt() / denom);
    }
    let max_relative_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_param,
        checked,
    })
}

fn with_entry(t: &Tensor<f64>, i: usize, v: f64) -> Tensor<f64> {
    let mut d = t.data().to_vec();
    d[i] = v;
    Tensor::new(t.shape().to_vec(), d).expect("same shape")
}
