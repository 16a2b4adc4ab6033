//! Central finite-difference gradient checking in double precision.
//!
//! The function under test maps a set of input tensors to an output tensor.
//! Its output is contracted with a fixed zero-mean random probe to give a
//! scalar, whose autograd gradient is compared entry by entry with the
//! central difference `(L(x + h) - L(x - h)) / 2h`. A zero-mean probe keeps
//! constant parts of the output (normalized rows, say) from inflating the
//! roundoff of `L`.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor of the relative error, so entries with vanishing
    /// gradients are compared absolutely.
    pub floor: f64,
    pub probe_seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            // About the cube root of f64 epsilon: balances truncation against
            // roundoff in the central difference.
            step: 1e-5,
            floor: 1e-6,
            probe_seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub entries: usize,
    /// `(input index, flat entry)` of the worst relative error.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol && self.max_relative_error.is_finite()
    }
}

/// Uniform random f64 tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn objective<F>(f: &F, inputs: &[Tensor], probe: &Option<Tensor>) -> Result<Tensor>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let out = f(inputs)?;
    match probe {
        Some(p) => Ok((out * p)?.sum_all()?),
        None => Ok(out.sum_all()?),
    }
}

/// Compare autograd and finite-difference gradients of `f` with respect to
/// every entry of every input. Inputs must be f64.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if inputs.iter().any(|t| t.dtype() != DType::F64) {
        return Err(param_err!("gradient checks require f64 inputs"));
    }
    let out = f(inputs)?;
    let probe = if out.elem_count() == 1 {
        None
    } else {
        Some(random_tensor(out.dims(), -1.0, 1.0, cfg.probe_seed)?)
    };

    let vars = inputs
        .iter()
        .map(Var::from_tensor)
        .collect::<candle_core::Result<Vec<_>>>()?;
    let tracked: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let loss = objective(&f, &tracked, &probe)?;
    let grads = loss.backward()?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        entries: 0,
        worst: (0, 0),
    };
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(var) {
            Some(g) => g.flatten_all()?.to_vec1()?,
            None => vec![0.0; var.elem_count()],
        };
        let base: Vec<f64> = inputs[i].flatten_all()?.to_vec1()?;
        for (j, &a) in analytic.iter().enumerate() {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[j] += delta;
                let mut xs = inputs.to_vec();
                xs[i] = Tensor::from_vec(v, inputs[i].dims(), inputs[i].device())?;
                Ok(objective(&f, &xs, &probe)?.to_scalar::<f64>()?)
            };
            let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            report.entries += 1;
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = random_tensor(&[3, 4], -1.0, 1.0, 1).unwrap();
        let r = check_gradients(|xs| Ok((xs[0].sqr()? * 3.0)?), &[x], GradCheckConfig::default()).unwrap();
        assert!(r.passes(1e-6), "{r:?}");
        assert_eq!(r.entries, 12);
    }

    #[test]
    fn detached_path_is_caught() {
        let x = random_tensor(&[4], 0.5, 1.0, 2).unwrap();
        let r = check_gradients(|xs| Ok(xs[0].detach().sqr()?), &[x], GradCheckConfig::default()).unwrap();
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn rejects_f32() {
        let x = random_tensor(&[2], 0.0, 1.0, 3).unwrap().to_dtype(DType::F32).unwrap();
        assert!(check_gradients(|xs| Ok(xs[0].clone()), &[x], GradCheckConfig::default()).is_err());
    }
}
