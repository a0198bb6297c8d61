use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_CAP: f64 = 100.0;

/// Two filter-normalized random directions in parameter space.
#[derive(Debug, Clone)]
pub struct DirectionPair<T: Real> {
    pub nu_x: ParameterStore<T>,
    pub nu_y: ParameterStore<T>,
    pub seed: u64,
}

/// Slices a tensor into its filters: rows along the leading axis for rank
/// >= 2, the whole tensor otherwise.
fn filter_len(t: &Tensor<impl Real>) -> usize {
    if t.rank() >= 2 {
        t.numel() / t.shape()[0].max(1)
    } else {
        t.numel().max(1)
    }
}

fn normal_direction<T: Real>(theta: &ParameterStore<T>, rng: &mut ChaCha8Rng) -> ParameterStore<T> {
    let mut out = ParameterStore::new();
    for (name, t) in theta.trainable() {
        let mut data: Vec<T> = (0..t.numel()).map(|_| T::of(StandardNormal.sample(rng))).collect();
        let len = filter_len(t);
        for (d, w) in data.chunks_mut(len).zip(t.data().chunks(len)) {
            let target = w.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            let norm = d.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            let scale = if target == 0.0 || norm == 0.0 {
                0.0
            } else {
                target / norm
            };
            for v in d.iter_mut() {
                *v = T::of(v.as_f64() * scale);
            }
        }
        out.insert(name, Tensor::new(t.shape().to_vec(), data).expect("same shape"));
    }
    out
}

/// Standard-normal directions rescaled so each filter matches the norm of
/// the corresponding filter of `theta`. Buffers are skipped.
pub fn make_directions<T: Real>(theta: &ParameterStore<T>, seed: u64) -> DirectionPair<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu_x = normal_direction(theta, &mut rng);
    let nu_y = normal_direction(theta, &mut rng);
    DirectionPair { nu_x, nu_y, seed }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOptions {
    pub cap: f64,
    /// Coefficient of the `sum(theta^2)` term added to the data loss.
    pub weight_decay: f64,
    pub parallel: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            cap: DEFAULT_CAP,
            weight_decay: 1e-4,
            parallel: true,
        }
    }
}

/// Aligned losses over `w_values x w_values`; `values[i][j]` sits at
/// `theta + w[i] nu_x + w[j] nu_y`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeGrid {
    pub n: usize,
    pub w_values: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub cap: f64,
    /// Loss at the unperturbed point, subtracted from every cell.
    pub base_loss: f64,
    /// Cells whose loss was non-finite; they hold `cap`.
    pub non_finite: Vec<(usize, usize)>,
    /// Cells whose aligned loss exceeded `cap`.
    pub saturated: Vec<(usize, usize)>,
}

pub fn linspace(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

fn l2<T: Real>(theta: &ParameterStore<T>) -> f64 {
    theta
        .trainable()
        .map(|(_, t)| t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
        .sum()
}

/// Evaluates `loss(theta + w_x nu_x + w_y nu_y) + wd * sum(theta^2)` on an
/// `n x n` grid over [-1, 1]^2, aligned so the unperturbed value reads 0.
pub fn landscape_grid<T, F>(
    theta: &ParameterStore<T>,
    pair: &DirectionPair<T>,
    n: usize,
    loss: F,
    opts: &GridOptions,
) -> Result<LandscapeGrid>
where
    T: Real,
    F: Fn(&ParameterStore<T>) -> Result<T> + Sync,
{
    if n == 0 {
        return Err(Error::argument("grid needs at least one point per axis"));
    }
    if !(opts.cap > 0.0) {
        return Err(Error::argument("cap must be positive"));
    }
    let objective = |p: &ParameterStore<T>| -> Result<f64> { Ok(loss(p)?.as_f64() + opts.weight_decay * l2(p)) };
    let base = objective(theta)?;
    if !base.is_finite() {
        return Err(Error::numeric("loss at the unperturbed parameters is not finite"));
    }
    let w = linspace(n);
    let cell = |k: usize| -> Result<f64> {
        let (i, j) = (k / n, k % n);
        let mut p = theta.clone();
        p.add_scaled(&pair.nu_x, T::of(w[i]))?;
        p.add_scaled(&pair.nu_y, T::of(w[j]))?;
        Ok(objective(&p)? - base)
    };
    let raw: Vec<f64> = if opts.parallel {
        (0..n * n).into_par_iter().map(cell).collect::<Result<_>>()?
    } else {
        (0..n * n).map(cell).collect::<Result<_>>()?
    };
    let mut grid = LandscapeGrid {
        n,
        w_values: w,
        values: vec![vec![0.0; n]; n],
        cap: opts.cap,
        base_loss: base,
        non_finite: Vec::new(),
        saturated: Vec::new(),
    };
    for (k, v) in raw.into_iter().enumerate() {
        let (i, j) = (k / n, k % n);
        grid.values[i][j] = if !v.is_finite() {
            grid.non_finite.push((i, j));
            opts.cap
        } else if v > opts.cap {
            grid.saturated.push((i, j));
            opts.cap
        } else {
            v
        };
    }
    Ok(grid)
}

impl LandscapeGrid {
    /// CSV whose first row and column carry the w values.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let header: Vec<String> = self.w_values.iter().map(|v| v.to_string()).collect();
        writeln!(w, "w_x\\w_y,{}", header.join(","))?;
        for (wx, row) in self.w_values.iter().zip(&self.values) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{wx},{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert(
            "conv.weight",
            Tensor::from_f64(&[3, 2], &[1.0, 2.0, 0.0, 0.0, -3.0, 4.0]).unwrap(),
        );
        s.insert("bn.bias", Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap());
        s.insert("bn.running_mean", Tensor::from_f64(&[2], &[9.0, 9.0]).unwrap());
        s
    }

    #[test]
    fn filters_match_trained_norms() {
        let pair = make_directions(&store(), 4);
        assert!(pair.nu_x.get("bn.running_mean").is_none());
        let w = pair.nu_x.get("conv.weight").unwrap().data();
        let norms: Vec<f64> = w
            .chunks(2)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        assert!((norms[0] - 5f64.sqrt()).abs() < 1e-12);
        assert_eq!(norms[1], 0.0);
        assert!((norms[2] - 5.0).abs() < 1e-12);
        let b = pair.nu_y.get("bn.bias").unwrap().data();
        assert!((b.iter().map(|v| v * v).sum::<f64>().sqrt() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn directions_deterministic() {
        let a = make_directions(&store(), 1);
        let b = make_directions(&store(), 1);
        assert_eq!(a.nu_x.get("conv.weight"), b.nu_x.get("conv.weight"));
        assert_ne!(a.nu_x.get("conv.weight"), a.nu_y.get("conv.weight"));
    }

    #[test]
    fn linspace_hits_zero_for_odd_n() {
        assert_eq!(linspace(11)[5], 0.0);
        assert_eq!(linspace(3), vec![-1.0, 0.0, 1.0]);
    }
}
