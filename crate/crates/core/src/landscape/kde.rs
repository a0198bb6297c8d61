use serde::Serialize;

use crate::error::{Error, Result};

pub const CURVE_POINTS: usize = 256;

/// Eigenvalue samples with their Gaussian KDE.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenSampleSet {
    pub samples: Vec<f64>,
    pub bandwidth: f64,
    /// `(x, density)` pairs.
    pub curve: Vec<[f64; 2]>,
}

fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Gaussian kernel density estimate at `x`.
pub fn kde_density(samples: &[f64], h: f64, x: f64) -> f64 {
    samples.iter().map(|s| phi((x - s) / h)).sum::<f64>() / (samples.len() as f64 * h)
}

/// Scott's rule `n^(-1/5) * std` with the sample (n - 1) standard deviation.
pub fn scott_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    n.powf(-0.2) * var.sqrt()
}

/// KDE over `[min - 3h, max + 3h]` at [`CURVE_POINTS`] points.
pub fn eigen_distribution(samples: &[f64], bandwidth: Option<f64>) -> Result<EigenSampleSet> {
    if samples.is_empty() || samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::argument("KDE needs at least one finite sample"));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::argument(format!("bandwidth must be positive, got {h}"))),
        None => {
            if samples.len() < 2 {
                return Err(Error::argument("automatic bandwidth needs at least 2 samples"));
            }
            let h = scott_bandwidth(samples);
            if h > 0.0 {
                h
            } else {
                let mean = samples.iter().sum::<f64>() / samples.len() as f64;
                log::warn!("eigenvalue samples have zero variance; using fallback bandwidth");
                0.01 * (1.0 + mean.abs())
            }
        }
    };
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (CURVE_POINTS - 1) as f64;
    let curve = (0..CURVE_POINTS)
        .map(|i| {
            let x = lo + step * i as f64;
            [x, kde_density(samples, h, x)]
        })
        .collect();
    Ok(EigenSampleSet {
        samples: samples.to_vec(),
        bandwidth: h,
        curve,
    })
}

impl EigenSampleSet {
    /// Trapezoidal integral of the curve.
    pub fn integral(&self) -> f64 {
        self.curve
            .windows(2)
            .map(|w| 0.5 * (w[1][0] - w[0][0]) * (w[0][1] + w[1][1]))
            .sum()
    }

    pub fn argmax(&self) -> f64 {
        self.curve.iter().fold(
            [f64::NAN, f64::NEG_INFINITY],
            |best, p| if p[1] > best[1] { *p } else { best },
        )[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_density_at_zero() {
        // (1 / (2 * 0.5)) * (phi(2) + phi(-2)) = 2 phi(2)
        let expected = 0.107_981_933_026_376_1;
        assert!((kde_density(&[-1.0, 1.0], 0.5, 0.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn repeated_sample_peaks_at_value() {
        let set = eigen_distribution(&[2.5; 6], None).unwrap();
        assert!((set.bandwidth - 0.035).abs() < 1e-15);
        let step = set.curve[1][0] - set.curve[0][0];
        assert!((set.argmax() - 2.5).abs() <= step);
    }

    #[test]
    fn integral_close_to_one() {
        let set = eigen_distribution(&[0.1, 0.4, 0.35, 2.0, 0.7], None).unwrap();
        let i = set.integral();
        assert!((0.95..=1.0).contains(&i), "{i}");
        assert!(set.curve.iter().all(|p| p[1] >= 0.0));
    }

    #[test]
    fn argument_errors() {
        assert!(eigen_distribution(&[1.0], None).is_err());
        assert!(eigen_distribution(&[1.0], Some(0.0)).is_err());
        assert!(eigen_distribution(&[1.0], Some(0.2)).is_ok());
    }
}
