use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{evaluate_metrics, label_smoothing_ce, sgd_step, SgdState, TrainConfig};
use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::model::{Session, SpectralVit};
use crate::params::ParameterStore;
use crate::tensor::Real;

/// Keeps the shuffle stream distinct from a weight-init stream using the same seed.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when no validation set was supplied.
    pub val_oa: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were kept.
    pub kept_epoch: usize,
    /// Weights at the kept epoch; identical to the final weights unless
    /// `best_val` was requested.
    pub checkpoint: ParameterStore<T>,
}

/// Trains `params` in place for `cfg.epochs` epochs of mini-batch SGD over a
/// seeded per-epoch shuffle of `train_set`.
pub fn train<T: Real>(
    model: &SpectralVit,
    params: &mut ParameterStore<T>,
    train_set: &PatchSet,
    val_set: Option<&PatchSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut state = SgdState::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterStore<T>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train_set.batch::<T>(chunk);
            let (loss, grads, updates) = {
                let mut s = Session::new(params, true, true);
                let input = s.input(x);
                let logits = model.forward(&mut s, input)?;
                let loss = label_smoothing_ce(&mut s.binding.tape, logits, &labels, cfg.alpha)?;
                let value = s.value(loss).item().as_f64();
                if !value.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite training loss at epoch {epoch}, batch {batch_index}"
                    )));
                }
                (value, s.binding.gradients(loss)?, s.bn_updates)
            };
            sgd_step(params, &grads, &mut state, cfg)?;
            for (name, value) in updates {
                params.insert(name, value);
            }
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_oa = match val_set {
            Some(v) if !v.is_empty() => Some(evaluate_metrics(model, params, v, cfg.batch_size)?.oa),
            _ => None,
        };
        log::info!(
            "epoch {epoch}/{}: train_loss {train_loss:.6}{}",
            cfg.epochs,
            val_oa.map(|v| format!(" val_oa {v:.4}")).unwrap_or_default()
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_oa,
        });
        if cfg.best_val {
            if let Some(oa) = val_oa {
                if best.as_ref().is_none_or(|(b, _, _)| oa > *b) {
                    best = Some((oa, epoch, params.clone()));
                }
            }
        }
    }
    let (kept_epoch, checkpoint) = match best {
        Some((_, e, p)) => (e, p),
        None => (cfg.epochs, params.clone()),
    };
    Ok(TrainOutcome {
        history,
        kept_epoch,
        checkpoint,
    })
}

/// CSV with header `epoch,train_loss,val_oa`; a missing val OA is left empty.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], w: &mut W) -> Result<()> {
    writeln!(w, "epoch,train_loss,val_oa")?;
    for r in history {
        let val = r.val_oa.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{}", r.epoch, r.train_loss, val)?;
    }
    Ok(())
}
