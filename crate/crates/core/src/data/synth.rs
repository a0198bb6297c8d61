use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GroundTruth, HsiCube};
use crate::error::{Error, Result};

const BASELINE: f64 = 0.2;
const AMPLITUDE: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            bands: 16,
            height: 64,
            width: 64,
            sigma: 0.05,
            seed: 0,
        }
    }
}

/// Gaussian bump over band index, centered on a class-specific band.
fn signatures(classes: usize, bands: usize) -> Vec<Vec<f64>> {
    let spacing = bands as f64 / classes as f64;
    let width = (spacing / 2.0).max(0.5);
    (0..classes)
        .map(|k| {
            let center = (k as f64 + 0.5) * spacing - 0.5;
            (0..bands)
                .map(|b| {
                    let z = (b as f64 - center) / width;
                    BASELINE + AMPLITUDE * (-0.5 * z * z).exp()
                })
                .collect()
        })
        .collect()
}

fn min_pairwise_distance(sigs: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..sigs.len() {
        for j in i + 1..sigs.len() {
            let d: f64 = sigs[i].iter().zip(&sigs[j]).map(|(a, b)| (a - b).powi(2)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// Synthetic scene: Voronoi blobs of classes, each pixel carrying its class
/// signature plus i.i.d. Gaussian noise. Every pixel is labeled.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(HsiCube, GroundTruth)> {
    let SynthConfig {
        classes,
        bands,
        height,
        width,
        sigma,
        seed,
    } = *cfg;
    if classes < 2 {
        return Err(Error::argument(format!("need at least 2 classes, got {classes}")));
    }
    if classes > u16::MAX as usize || bands == 0 {
        return Err(Error::argument("class or band count out of range"));
    }
    let pixels = height
        .checked_mul(width)
        .ok_or_else(|| Error::argument("grid size overflow"))?;
    if pixels < 10 * classes {
        return Err(Error::argument(format!(
            "grid {height}x{width} too small for {classes} classes (need at least {} pixels)",
            10 * classes
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::argument(format!(
            "noise sigma must be finite and non-negative, got {sigma}"
        )));
    }
    let sigs = signatures(classes, bands);
    let separation = min_pairwise_distance(&sigs);
    if separation < 5.0 * sigma {
        return Err(Error::argument(format!(
            "signature separation {separation:.4} is below 5 sigma = {:.4}; lower sigma or add bands",
            5.0 * sigma
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sites = 2 * classes;
    let mut sites: Vec<usize> = Vec::with_capacity(n_sites);
    while sites.len() < n_sites {
        let p = rng.gen_range(0..pixels);
        if !sites.contains(&p) {
            sites.push(p);
        }
    }
    let labels: Vec<u16> = (0..pixels)
        .map(|p| {
            let (r, c) = ((p / width) as f64, (p % width) as f64);
            let nearest = (0..n_sites)
                .min_by(|&a, &b| {
                    let d = |s: usize| {
                        let (sr, sc) = ((sites[s] / width) as f64, (sites[s] % width) as f64);
                        (sr - r).powi(2) + (sc - c).powi(2)
                    };
                    d(a).total_cmp(&d(b))
                })
                .expect("at least one site");
            (nearest % classes + 1) as u16
        })
        .collect();

    let noise = Normal::new(0.0, sigma).map_err(|e| Error::argument(e.to_string()))?;
    let mut values = Vec::with_capacity(pixels * bands);
    for &l in &labels {
        for &s in &sigs[l as usize - 1] {
            values.push((s + noise.sample(&mut rng)) as f32);
        }
    }
    Ok((
        HsiCube::new(height, width, bands, values)?,
        GroundTruth::new(height, width, classes, labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separation_guard() {
        let cfg = SynthConfig {
            sigma: 10.0,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_generate(&cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn size_guards() {
        let small = SynthConfig {
            height: 3,
            width: 3,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&small).is_err());
        let one = SynthConfig {
            classes: 1,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&one).is_err());
    }

    #[test]
    fn every_class_present_on_minimum_grid() {
        for seed in 0..20 {
            let cfg = SynthConfig {
                classes: 5,
                height: 5,
                width: 10,
                seed,
                ..SynthConfig::default()
            };
            let (_, gt) = synth_generate(&cfg).unwrap();
            assert!(gt.class_counts().iter().all(|&n| n > 0));
        }
    }
}
