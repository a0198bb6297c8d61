use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{GroundTruth, HsiCube};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let last = n as isize - 1;
    loop {
        if i < 0 {
            i = -i;
        } else if i > last {
            i = 2 * last - i;
        } else {
            return i as usize;
        }
    }
}

fn check_window(cube: &HsiCube, row: usize, col: usize, s: usize) -> Result<()> {
    if s == 0 || s.is_multiple_of(2) {
        return Err(Error::argument(format!("patch size must be odd, got {s}")));
    }
    if row >= cube.height() || col >= cube.width() {
        return Err(Error::argument(format!(
            "pixel ({row}, {col}) outside {}x{} image",
            cube.height(),
            cube.width()
        )));
    }
    Ok(())
}

fn fill_patch(cube: &HsiCube, row: usize, col: usize, s: usize, out: &mut Vec<f32>) {
    let half = (s / 2) as isize;
    for dr in -half..=half {
        let r = reflect(row as isize + dr, cube.height());
        for dc in -half..=half {
            let c = reflect(col as isize + dc, cube.width());
            out.extend_from_slice(cube.pixel(r, c));
        }
    }
}

/// `s x s x bands` window centered on `(row, col)`, reflect-padded at borders.
pub fn extract_patch<T: Real>(cube: &HsiCube, row: usize, col: usize, s: usize) -> Result<Tensor<T>> {
    check_window(cube, row, col, s)?;
    let mut buf = Vec::with_capacity(s * s * cube.bands());
    fill_patch(cube, row, col, s, &mut buf);
    Tensor::new(
        vec![s, s, cube.bands()],
        buf.into_iter().map(|v| T::of(v as f64)).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::argument(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEntry {
    pub row: usize,
    pub col: usize,
    /// Class label, `1..=classes`.
    pub label: u16,
}

/// Patches for one split, stored contiguously as f32.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub split: Split,
    patch_size: usize,
    bands: usize,
    entries: Vec<PatchEntry>,
    data: Vec<f32>,
}

impl PatchSet {
    /// Extracts patches around the flat pixel indices `pixels` (`row * width + col`).
    pub fn build(cube: &HsiCube, gt: &GroundTruth, pixels: &[usize], patch_size: usize, split: Split) -> Result<Self> {
        gt.matches(cube)?;
        if patch_size == 0 || patch_size.is_multiple_of(2) {
            return Err(Error::argument(format!("patch size must be odd, got {patch_size}")));
        }
        let width = cube.width();
        let mut entries = Vec::with_capacity(pixels.len());
        let mut data = Vec::with_capacity(pixels.len() * patch_size * patch_size * cube.bands());
        for &p in pixels {
            let (row, col) = (p / width, p % width);
            check_window(cube, row, col, patch_size)?;
            let label = gt.label(row, col);
            if label == 0 {
                return Err(Error::data(format!("pixel ({row}, {col}) is unlabeled")));
            }
            entries.push(PatchEntry { row, col, label });
            fill_patch(cube, row, col, patch_size, &mut data);
        }
        Ok(PatchSet {
            split,
            patch_size,
            bands: cube.bands(),
            entries,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn entries(&self) -> &[PatchEntry] {
        &self.entries
    }

    fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.bands
    }

    pub fn patch<T: Real>(&self, i: usize) -> Tensor<T> {
        let n = self.patch_len();
        let data = self.data[i * n..(i + 1) * n].iter().map(|&v| T::of(v as f64)).collect();
        Tensor::new(vec![self.patch_size, self.patch_size, self.bands], data).expect("patch shape")
    }

    /// Stacks the selected patches into `[B, s, s, bands]` and returns
    /// zero-based class indices alongside.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let n = self.patch_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.data[i * n..(i + 1) * n].iter().map(|&v| T::of(v as f64)));
            labels.push(self.entries[i].label as usize - 1);
        }
        let shape = vec![indices.len(), self.patch_size, self.patch_size, self.bands];
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize) -> HsiCube {
        let values = (0..h * w).map(|i| (10 * (i / w) + i % w) as f32).collect();
        HsiCube::new(h, w, 1, values).unwrap()
    }

    fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
        let s = t.shape()[0];
        t.data().chunks(s).map(|r| r.to_vec()).collect()
    }

    #[test]
    fn corner_patch_reflects_without_edge_repeat() {
        let p = extract_patch::<f64>(&grid(5, 5), 0, 0, 3).unwrap();
        assert_eq!(
            rows(&p),
            vec![vec![11., 10., 11.], vec![1., 0., 1.], vec![11., 10., 11.]]
        );
    }

    #[test]
    fn interior_patch_is_literal_neighborhood() {
        let p = extract_patch::<f64>(&grid(5, 5), 2, 2, 3).unwrap();
        assert_eq!(
            rows(&p),
            vec![vec![11., 12., 13.], vec![21., 22., 23.], vec![31., 32., 33.]]
        );
    }

    #[test]
    fn even_size_rejected() {
        assert!(matches!(
            extract_patch::<f32>(&grid(5, 5), 0, 0, 4),
            Err(Error::Argument(_))
        ));
        assert!(extract_patch::<f32>(&grid(5, 5), 5, 0, 3).is_err());
    }

    #[test]
    fn oversize_window_on_tiny_image() {
        let p = extract_patch::<f64>(&grid(2, 1), 0, 0, 7).unwrap();
        assert_eq!(p.shape(), &[7, 7, 1]);
        assert_eq!(p.data()[3 * 7 + 3], 0.0);
    }

    #[test]
    fn batch_stacks_patches_and_shifts_labels() {
        let cube = grid(4, 4);
        let gt = GroundTruth::new(4, 4, 2, vec![1; 8].into_iter().chain(vec![2; 8]).collect()).unwrap();
        let set = PatchSet::build(&cube, &gt, &[0, 15], 3, Split::Train).unwrap();
        let (x, y) = set.batch::<f32>(&[1, 0]);
        assert_eq!(x.shape(), &[2, 3, 3, 1]);
        assert_eq!(y, vec![1, 0]);
        assert_eq!(x.data()[4], 33.0);
        assert_eq!(set.patch::<f32>(0).data()[4], 0.0);
    }
}
