//! Label-smoothed loss, momentum SGD, the training loop and evaluation metrics.

mod metrics;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tape, Tensor, Var};

pub use metrics::{evaluate_metrics, summarize, Metrics, MultiSeedReport, Summary};
pub use trainer::{train, write_history_csv, EpochRecord, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Label-smoothing strength.
    pub alpha: f64,
    /// Seeds the epoch shuffle only; weight init takes its own seed.
    pub seed: u64,
    /// Keep the weights of the epoch with the highest validation OA instead
    /// of the final epoch.
    pub best_val: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            alpha: 0.1,
            seed: 0,
            best_val: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::argument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        check_alpha(self.alpha)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::argument("epochs and batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::argument(
                "momentum must lie in [0, 1) and weight decay be non-negative",
            ));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::argument(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    Ok(())
}

/// Smoothed one-hot targets `(1 - alpha) * y + alpha / C`.
pub fn smoothed_targets<T: Real>(labels: &[usize], classes: usize, alpha: f64) -> Result<Tensor<T>> {
    if classes < 2 {
        return Err(Error::argument(format!("need at least 2 classes, got {classes}")));
    }
    check_alpha(alpha)?;
    let off = alpha / classes as f64;
    let mut data = vec![T::of(off); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::argument(format!("label {y} out of range for {classes} classes")));
        }
        data[i * classes + y] = T::of(1.0 - alpha + off);
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Batch-mean label-smoothing cross entropy recorded on `tape`.
pub fn label_smoothing_ce<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize], alpha: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::argument(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let targets = smoothed_targets(labels, shape[1], alpha)?;
    tape.soft_cross_entropy(logits, targets)
}

/// Value-only form of [`label_smoothing_ce`].
pub fn label_smoothing_ce_value<T: Real>(logits: &Tensor<T>, labels: &[usize], alpha: f64) -> Result<T> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = label_smoothing_ce(&mut tape, z, labels, alpha)?;
    Ok(tape.value(loss).item())
}

/// Momentum buffers, one per trainable tensor.
#[derive(Debug, Clone, Default)]
pub struct SgdState<T: Real> {
    velocity: ParameterStore<T>,
}

impl<T: Real> SgdState<T> {
    pub fn new() -> Self {
        SgdState {
            velocity: ParameterStore::new(),
        }
    }

    pub fn velocity(&self) -> &ParameterStore<T> {
        &self.velocity
    }
}

/// SGD with coupled weight decay: `g' = g + wd * theta`,
/// `v = momentum * v + g'`, `theta -= lr * v`.
pub fn sgd_step<T: Real>(
    params: &mut ParameterStore<T>,
    grads: &ParameterStore<T>,
    state: &mut SgdState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let (lr, mu, wd) = (T::of(cfg.lr), T::of(cfg.momentum), T::of(cfg.weight_decay));
    for (name, g) in grads.iter() {
        let theta = params
            .get_mut(name)
            .ok_or_else(|| Error::argument(format!("gradient for unknown parameter `{name}`")))?;
        if theta.shape() != g.shape() {
            return Err(Error::argument(format!(
                "gradient shape {:?} does not match parameter `{name}` {:?}",
                g.shape(),
                theta.shape()
            )));
        }
        if state.velocity.get(name).is_none() {
            state.velocity.insert(name, Tensor::zeros(g.shape()));
        }
        let v = state.velocity.get_mut(name).expect("inserted above");
        for ((t, v), &g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let g = if cfg.weight_decay == 0.0 { g } else { g + wd * *t };
            *v = mu * *v + g;
            *t -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::from_f64(&[1], &[v]).unwrap());
        s
    }

    fn cfg(lr: f64, momentum: f64, weight_decay: f64) -> TrainConfig {
        TrainConfig {
            lr,
            momentum,
            weight_decay,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_examples() {
        let uniform = Tensor::<f64>::zeros(&[1, 2]);
        assert!((label_smoothing_ce_value(&uniform, &[0], 0.1).unwrap() - 2f64.ln()).abs() < 1e-12);
        let z = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 0.5, 0.3, 0.3, 4.0]).unwrap();
        let plain: f64 = [(0usize, [1.0, -2.0, 0.5]), (2, [0.3, 0.3, 4.0])]
            .iter()
            .map(|(y, row)| {
                let lse = row.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
                lse - row[*y]
            })
            .sum::<f64>()
            / 2.0;
        assert!((label_smoothing_ce_value(&z, &[0, 2], 0.0).unwrap() - plain).abs() < 1e-12);
        for alpha in [0.0, 0.1, 0.5, 0.9] {
            let u = Tensor::<f64>::full(&[3, 7], 0.25);
            let l = label_smoothing_ce_value(&u, &[0, 3, 6], alpha).unwrap();
            assert!((l - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_rejects_single_class_and_bad_labels() {
        let z = Tensor::<f64>::zeros(&[1, 1]);
        assert!(label_smoothing_ce_value(&z, &[0], 0.1).is_err());
        let z = Tensor::<f64>::zeros(&[1, 3]);
        assert!(label_smoothing_ce_value(&z, &[3], 0.1).is_err());
        assert!(label_smoothing_ce_value(&z, &[0], 1.0).is_err());
    }

    #[test]
    fn weight_decay_step() {
        let mut p = store(1.0);
        let g = store(0.0);
        sgd_step(&mut p, &g, &mut SgdState::new(), &cfg(0.001, 0.0, 0.1)).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn momentum_steps() {
        let mut p = store(0.0);
        let g = store(1.0);
        let mut st = SgdState::new();
        let c = cfg(0.1, 0.9, 0.0);
        sgd_step(&mut p, &g, &mut st, &c).unwrap();
        assert!((p.get("w").unwrap().data()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut st, &c).unwrap();
        assert!((p.get("w").unwrap().data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_and_plain_descent_are_exact() {
        let mut p = store(0.37);
        let g = store(-1.3);
        let mut c = cfg(0.1, 0.9, 1e-4);
        c.lr = 0.0;
        sgd_step(&mut p, &g, &mut SgdState::new(), &c).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0].to_bits(), 0.37f64.to_bits());
        let mut p = store(0.37);
        sgd_step(&mut p, &g, &mut SgdState::new(), &cfg(0.03, 0.0, 0.0)).unwrap();
        assert_eq!(
            p.get("w").unwrap().data()[0].to_bits(),
            (0.37 - 0.03 * -1.3f64).to_bits()
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = store(0.0);
        let mut g = ParameterStore::new();
        g.insert("w", Tensor::<f64>::zeros(&[2]));
        assert!(sgd_step(&mut p, &g, &mut SgdState::new(), &cfg(0.1, 0.0, 0.0)).is_err());
    }
}
