use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{default_hvp_eps, hvp_estimate, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PowerOptions {
    /// Relative tolerance on successive eigenvalue estimates.
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Finite-difference step for HVPs; `None` uses [`default_hvp_eps`].
    pub hvp_eps: Option<f64>,
}

impl Default for PowerOptions {
    fn default() -> Self {
        PowerOptions {
            tol: 1e-3,
            max_iters: 100,
            seed: 0,
            hvp_eps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenEstimate {
    /// Algebraically largest eigenvalue.
    pub lambda_max: f64,
    /// Magnitude of the dominant eigenvalue from the first phase.
    pub lambda_abs: f64,
    /// HVP iterations over both phases.
    pub iterations: usize,
    pub converged: bool,
}

fn norm<T: Real>(v: &ParameterStore<T>) -> f64 {
    v.dot(v).as_f64().sqrt()
}

fn scaled<T: Real>(v: &ParameterStore<T>, s: f64) -> ParameterStore<T> {
    let mut out = v.zeros_like();
    out.add_scaled(v, T::of(s)).expect("same structure");
    out
}

fn random_unit<T: Real>(theta: &ParameterStore<T>, rng: &mut ChaCha8Rng) -> Result<ParameterStore<T>> {
    let mut v = ParameterStore::new();
    for (name, t) in theta.trainable() {
        let data = (0..t.numel()).map(|_| T::of(StandardNormal.sample(rng))).collect();
        v.insert(name, Tensor::new(t.shape().to_vec(), data)?);
    }
    let n0 = norm(&v);
    if n0 == 0.0 {
        return Err(Error::argument("no trainable parameters"));
    }
    Ok(scaled(&v, 1.0 / n0))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() < tol * (1.0 + b.abs())
}

/// Largest Hessian eigenvalue by shifted power iteration on HVPs.
///
/// Phase 1 power-iterates `H` to get the dominant magnitude `lambda_abs`.
/// Phase 2 iterates `H + (lambda_abs + delta) I`, whose spectrum is
/// non-negative, so its dominant eigenvalue `mu` belongs to the algebraically
/// largest eigenvalue of `H`: `lambda_max = mu - lambda_abs - delta`.
pub fn top_hessian_eigenvalue<T, F>(
    theta: &ParameterStore<T>,
    mut grad_fn: F,
    opts: &PowerOptions,
) -> Result<EigenEstimate>
where
    T: Real,
    F: FnMut(&ParameterStore<T>) -> Result<ParameterStore<T>>,
{
    if !(opts.tol > 0.0) || opts.max_iters == 0 {
        return Err(Error::argument("power iteration needs tol > 0 and max_iters >= 1"));
    }
    let mut work = theta.clone();
    let eps = opts.hvp_eps.map(T::of).unwrap_or_else(|| default_hvp_eps(theta));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut v = random_unit(theta, &mut rng)?;
    let mut hvp = |v: &ParameterStore<T>, work: &mut ParameterStore<T>| hvp_estimate(work, &mut grad_fn, v, eps);

    let mut iterations = 0;
    let mut lambda_abs = 0.0;
    let mut converged_abs = false;
    for _ in 0..opts.max_iters {
        let hv = hvp(&v, &mut work)?;
        iterations += 1;
        let est = norm(&hv);
        if est == 0.0 {
            lambda_abs = 0.0;
            converged_abs = true;
            break;
        }
        v = scaled(&hv, 1.0 / est);
        let done = iterations > 1 && close(est, lambda_abs, opts.tol);
        lambda_abs = est;
        if done {
            converged_abs = true;
            break;
        }
    }

    // A fresh start: the phase-1 vector can be nearly orthogonal to the
    // wanted eigenvector when the dominant eigenvalue is negative.
    v = random_unit(theta, &mut rng)?;
    let shift = lambda_abs + 0.01 * lambda_abs.max(1e-8);
    let mut mu = f64::NAN;
    let mut converged = false;
    for k in 0..opts.max_iters {
        let hv = hvp(&v, &mut work)?;
        iterations += 1;
        let mut u = hv;
        u.add_scaled(&v, T::of(shift))?;
        let rayleigh = v.dot(&u).as_f64();
        let nu = norm(&u);
        let done = k > 0 && close(rayleigh, mu, opts.tol);
        mu = rayleigh;
        if nu == 0.0 || done {
            converged = true;
            break;
        }
        v = scaled(&u, 1.0 / nu);
    }
    Ok(EigenEstimate {
        lambda_max: mu - shift,
        lambda_abs,
        iterations,
        converged: converged && converged_abs,
    })
}
