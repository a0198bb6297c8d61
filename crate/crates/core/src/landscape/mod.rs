//! Loss-landscape grids along filter-normalized directions and the
//! distribution of top Hessian eigenvalues over mini-batches.

mod grid;
mod hessian;
mod kde;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::model::{Session, SpectralVit};
use crate::params::ParameterStore;
use crate::tensor::Real;
use crate::training::label_smoothing_ce;

pub use grid::{landscape_grid, linspace, make_directions, DirectionPair, GridOptions, LandscapeGrid, DEFAULT_CAP};
pub use hessian::{top_hessian_eigenvalue, EigenEstimate, PowerOptions};
pub use kde::{eigen_distribution, kde_density, scott_bandwidth, EigenSampleSet, CURVE_POINTS};

/// Label-smoothing loss of a model over a fixed list of samples, with batch
/// norm in eval mode so the loss depends on the parameters alone.
pub struct DatasetObjective<'a> {
    pub model: &'a SpectralVit,
    pub set: &'a PatchSet,
    pub indices: Vec<usize>,
    pub alpha: f64,
    pub batch_size: usize,
}

impl<'a> DatasetObjective<'a> {
    pub fn new(model: &'a SpectralVit, set: &'a PatchSet, indices: Vec<usize>, alpha: f64) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::data("objective needs at least one sample"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= set.len()) {
            return Err(Error::argument(format!("sample index {bad} out of range")));
        }
        Ok(DatasetObjective {
            model,
            set,
            indices,
            alpha,
            batch_size: 256,
        })
    }

    fn batch_loss<T: Real>(
        &self,
        params: &ParameterStore<T>,
        chunk: &[usize],
        grads: bool,
    ) -> Result<(T, Option<ParameterStore<T>>)> {
        let (x, labels) = self.set.batch::<T>(chunk);
        let mut s = Session::new(params, false, grads);
        let input = s.input(x);
        let logits = self.model.forward(&mut s, input)?;
        let loss = label_smoothing_ce(&mut s.binding.tape, logits, &labels, self.alpha)?;
        let value = s.value(loss).item();
        let g = if grads { Some(s.binding.gradients(loss)?) } else { None };
        Ok((value, g))
    }

    /// Mean loss over all samples.
    pub fn loss<T: Real>(&self, params: &ParameterStore<T>) -> Result<T> {
        let mut total = T::zero();
        for chunk in self.indices.chunks(self.batch_size.max(1)) {
            let (l, _) = self.batch_loss(params, chunk, false)?;
            total += l * T::of_usize(chunk.len());
        }
        Ok(total / T::of_usize(self.indices.len()))
    }

    /// Gradient of [`Self::loss`] with respect to the trainable parameters.
    pub fn gradient<T: Real>(&self, params: &ParameterStore<T>) -> Result<ParameterStore<T>> {
        let n = T::of_usize(self.indices.len());
        let mut acc: Option<ParameterStore<T>> = None;
        for chunk in self.indices.chunks(self.batch_size.max(1)) {
            let (_, g) = self.batch_loss(params, chunk, true)?;
            let g = g.expect("requested gradients");
            let w = T::of_usize(chunk.len()) / n;
            match acc.as_mut() {
                None => {
                    let mut z = g.zeros_like();
                    z.add_scaled(&g, w)?;
                    acc = Some(z);
                }
                Some(a) => a.add_scaled(&g, w)?,
            }
        }
        Ok(acc.expect("non-empty objective"))
    }
}

/// Seeded subset of `k` distinct indices from `0..n`, in ascending order;
/// all indices when `k >= n`.
pub fn subset_indices(n: usize, k: Option<usize>, seed: u64) -> Vec<usize> {
    match k {
        Some(k) if k < n => {
            let mut v = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianOptions {
    /// Number of mini-batches, one eigenvalue each.
    pub batches: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub seed: u64,
    pub power: PowerOptions,
}

impl Default for HessianOptions {
    fn default() -> Self {
        HessianOptions {
            batches: 64,
            batch_size: 64,
            alpha: 0.1,
            seed: 0,
            power: PowerOptions::default(),
        }
    }
}

/// One top-eigenvalue estimate per seeded mini-batch of `set`.
pub fn hessian_samples<T: Real>(
    model: &SpectralVit,
    params: &ParameterStore<T>,
    set: &PatchSet,
    opts: &HessianOptions,
) -> Result<Vec<EigenEstimate>> {
    if set.is_empty() || opts.batches == 0 || opts.batch_size == 0 {
        return Err(Error::argument(
            "hessian sampling needs data, batches >= 1 and batch size >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let k = opts.batch_size.min(set.len());
    (0..opts.batches)
        .map(|b| {
            let mut idx = sample(&mut rng, set.len(), k).into_vec();
            idx.sort_unstable();
            let obj = DatasetObjective::new(model, set, idx, opts.alpha)?;
            let power = PowerOptions {
                seed: opts.power.seed.wrapping_add(b as u64),
                ..opts.power.clone()
            };
            let est = top_hessian_eigenvalue(params, |p| obj.gradient(p), &power)?;
            if !est.converged {
                log::warn!(
                    "power iteration on batch {b} stopped after {} HVPs without converging",
                    est.iterations
                );
            }
            Ok(est)
        })
        .collect()
}

/// Direction pair scaled by `c`, for metamorphic checks.
pub fn scale_directions<T: Real>(pair: &DirectionPair<T>, cx: f64, cy: f64) -> DirectionPair<T> {
    let scale = |s: &ParameterStore<T>, c: f64| {
        let mut out = ParameterStore::new();
        for (name, t) in s.iter() {
            out.insert(name, t.map(|v| v * T::of(c)));
        }
        out
    };
    DirectionPair {
        nu_x: scale(&pair.nu_x, cx),
        nu_y: scale(&pair.nu_y, cy),
        seed: pair.seed,
    }
}
