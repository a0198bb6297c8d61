use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GroundTruth, Split};
use crate::error::{Error, Result};

/// Flat pixel indices (`row * width + col`) of each split.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn bucket(n: usize, frac: f64) -> usize {
    (n as f64 * frac).round_ties_even() as usize
}

/// Per-class stratified split. Each class is shuffled with a seeded RNG, the
/// first `round(n * train_frac)` pixels go to train, the next
/// `round(n * val_frac)` to val, and the rest to test.
pub fn stratified_split(gt: &GroundTruth, train_frac: f64, val_frac: f64, seed: u64) -> Result<SplitAssignment> {
    if !(0.0..1.0).contains(&train_frac) || !(0.0..1.0).contains(&val_frac) || train_frac + val_frac >= 1.0 {
        return Err(Error::argument(format!(
            "split fractions must be non-negative with sum below 1, got {train_frac} and {val_frac}"
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); gt.classes()];
    for i in gt.labeled() {
        per_class[gt.labels()[i] as usize - 1].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitAssignment::default();
    for (k, mut pixels) in per_class.into_iter().enumerate() {
        let n = pixels.len();
        if n == 0 {
            return Err(Error::data(format!("class {} has no labeled pixels", k + 1)));
        }
        if n < 3 {
            return Err(Error::data(format!(
                "class {} has {n} labeled pixels, at least 3 are required",
                k + 1
            )));
        }
        pixels.shuffle(&mut rng);
        let n_train = bucket(n, train_frac);
        let n_val = bucket(n, val_frac).min(n - n_train);
        out.train.extend_from_slice(&pixels[..n_train]);
        out.val.extend_from_slice(&pixels[n_train..n_train + n_val]);
        out.test.extend_from_slice(&pixels[n_train + n_val..]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt_with_counts(counts: &[usize]) -> GroundTruth {
        let mut labels = vec![0u16; 3];
        for (k, &n) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat_n((k + 1) as u16, n));
        }
        GroundTruth::new(1, labels.len(), counts.len(), labels).unwrap()
    }

    #[test]
    fn houston_class_one_counts() {
        let a = stratified_split(&gt_with_counts(&[1251]), 0.05, 0.05, 0).unwrap();
        // 1251 * 0.05 = 62.55 rounds to 63 for both buckets.
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (63, 63, 1125));
    }

    #[test]
    fn hundred_at_ten_percent() {
        let a = stratified_split(&gt_with_counts(&[100]), 0.1, 0.1, 7).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (10, 10, 80));
    }

    #[test]
    fn deterministic_per_seed() {
        let gt = gt_with_counts(&[40, 55]);
        assert_eq!(
            stratified_split(&gt, 0.2, 0.1, 3).unwrap(),
            stratified_split(&gt, 0.2, 0.1, 3).unwrap()
        );
        assert_ne!(
            stratified_split(&gt, 0.2, 0.1, 3).unwrap(),
            stratified_split(&gt, 0.2, 0.1, 4).unwrap()
        );
    }

    #[test]
    fn empty_class_named() {
        let err = stratified_split(&gt_with_counts(&[10, 0, 5]), 0.1, 0.1, 0).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("class 2")), "{err}");
        assert!(stratified_split(&gt_with_counts(&[10]), 0.5, 0.5, 0).is_err());
    }
}
