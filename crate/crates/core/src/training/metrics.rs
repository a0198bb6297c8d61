use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::model::SpectralVit;
use crate::params::ParameterStore;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub seed: Option<u64>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if c == 0 || confusion.iter().any(|r| r.len() != c) {
            return Err(Error::argument("confusion matrix must be square and non-empty"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(Error::data("cannot compute metrics on an empty set"));
        }
        let n = total as f64;
        let trace: u64 = (0..c).map(|k| confusion[k][k]).sum();
        let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..c).map(|k| confusion.iter().map(|r| r[k]).sum()).collect();
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| (rows[k] > 0).then(|| confusion[k][k] as f64 / rows[k] as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.len() < c {
            let missing: Vec<usize> = (0..c).filter(|&k| rows[k] == 0).map(|k| k + 1).collect();
            log::warn!("classes {missing:?} absent from evaluation set; AA uses present classes only");
        }
        let aa = present.iter().sum::<f64>() / present.len() as f64;
        let po = trace as f64 / n;
        let pe: f64 = rows.iter().zip(&cols).map(|(&r, &k)| r as f64 * k as f64).sum::<f64>() / (n * n);
        // Chance agreement of 1 means truth and prediction share one class.
        let kappa = if pe >= 1.0 { 1.0 } else { (po - pe) / (1.0 - pe) };
        Ok(Metrics {
            oa: po,
            aa,
            kappa,
            per_class,
            confusion,
            seed: None,
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::argument("truth and prediction lengths differ"));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::argument(format!(
                    "class index out of range for {classes} classes"
                )));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// Evaluates in eval mode; batches are scored in parallel and their
/// confusion matrices summed.
pub fn evaluate_metrics<T: Real>(
    model: &SpectralVit,
    params: &ParameterStore<T>,
    set: &PatchSet,
    batch_size: usize,
) -> Result<Metrics> {
    if set.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    let classes = model.spec().classes;
    let indices: Vec<usize> = (0..set.len()).collect();
    let partial: Vec<Vec<Vec<u64>>> = indices
        .par_chunks(batch_size.max(1))
        .map(|chunk| -> Result<Vec<Vec<u64>>> {
            let (x, labels) = set.batch::<T>(chunk);
            let pred = model.predict(params, x)?;
            let mut m = vec![vec![0u64; classes]; classes];
            for (&t, &p) in labels.iter().zip(&pred) {
                if t >= classes {
                    return Err(Error::data(format!("label {} exceeds model classes {classes}", t + 1)));
                }
                m[t][p] += 1;
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let mut confusion = vec![vec![0u64; classes]; classes];
    for m in partial {
        for (row, prow) in confusion.iter_mut().zip(m) {
            for (a, b) in row.iter_mut().zip(prow) {
                *a += b;
            }
        }
    }
    Metrics::from_confusion(confusion)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub runs: Vec<Metrics>,
    pub oa: Summary,
    pub aa: Summary,
    pub kappa: Summary,
}

impl MultiSeedReport {
    /// Runs `run` once per seed and aggregates the results.
    pub fn collect<F>(seeds: &[u64], mut run: F) -> Result<Self>
    where
        F: FnMut(u64) -> Result<Metrics>,
    {
        let runs = seeds
            .iter()
            .map(|&s| run(s).map(|m| m.with_seed(s)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_runs(runs))
    }

    pub fn from_runs(runs: Vec<Metrics>) -> Self {
        let pick = |f: fn(&Metrics) -> f64| summarize(&runs.iter().map(f).collect::<Vec<_>>());
        MultiSeedReport {
            oa: pick(|m| m.oa),
            aa: pick(|m| m.aa),
            kappa: pick(|m| m.kappa),
            runs,
        }
    }
}
