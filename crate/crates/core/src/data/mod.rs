//! Hyperspectral cubes, label rasters, patches and dataset splits.

mod patch;
mod split;
mod synth;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub use patch::{extract_patch, PatchEntry, PatchSet, Split};
pub use split::{stratified_split, SplitAssignment};
pub use synth::{synth_generate, SynthConfig};

const CUBE_MAGIC: &[u8; 4] = b"HSC1";
const GT_MAGIC: &[u8; 4] = b"HSG1";

/// Hyperspectral image, band-interleaved by pixel: the value of band `b` at
/// `(row, col)` lives at `(row * width + col) * bands + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::argument("cube dimensions must be positive"));
        }
        let n = checked_len(&[height, width, bands], "dims")?;
        if values.len() != n {
            return Err(Error::argument(format!(
                "cube {height}x{width}x{bands} needs {n} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite cube value at index {i}")));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Spectrum of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let off = (row * self.width + col) * self.bands;
        &self.values[off..off + self.bands]
    }

    pub fn value(&self, row: usize, col: usize, band: usize) -> f32 {
        self.values[(row * self.width + col) * self.bands + band]
    }

    /// Rescales each band so its minimum maps to 0 and its maximum to 1.
    /// Constant bands become 0.
    pub fn normalize_per_band(&mut self) {
        let c = self.bands;
        let mut lo = vec![f32::INFINITY; c];
        let mut hi = vec![f32::NEG_INFINITY; c];
        for px in self.values.chunks_exact(c) {
            for b in 0..c {
                lo[b] = lo[b].min(px[b]);
                hi[b] = hi[b].max(px[b]);
            }
        }
        for px in self.values.chunks_exact_mut(c) {
            for b in 0..c {
                let range = hi[b] - lo[b];
                px[b] = if range > 0.0 {
                    ((px[b] - lo[b]) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CUBE_MAGIC)?;
        for d in [self.height, self.width, self.bands] {
            w.write_all(&dim_u32(d)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, normalize: bool) -> Result<Self> {
        let [h, w, c] = read_header(r, CUBE_MAGIC, ["height", "width", "bands"])?;
        let n = checked_len(&[h, w, c, 4], "dims")? / 4;
        let mut raw = vec![0u8; n * 4];
        read_exact(r, &mut raw, "payload")?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut cube = HsiCube::new(h, w, c, values).map_err(|e| match e {
            Error::Argument(m) => Error::format("dims", m),
            other => other,
        })?;
        if normalize {
            cube.normalize_per_band();
        }
        Ok(cube)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, normalize: bool) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?), normalize)
    }
}

/// Per-pixel class labels: 0 is unlabeled, `1..=classes` are classes.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u16>,
}

impl GroundTruth {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::argument("ground truth dimensions must be positive"));
        }
        let n = checked_len(&[height, width], "dims")?;
        if labels.len() != n {
            return Err(Error::argument(format!(
                "ground truth {height}x{width} needs {n} labels, got {}",
                labels.len()
            )));
        }
        if let Some(&max) = labels.iter().max() {
            if max as usize > classes {
                return Err(Error::data(format!(
                    "label {max} exceeds declared class count {classes}"
                )));
            }
        }
        Ok(GroundTruth {
            height,
            width,
            classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Flat indices of labeled pixels.
    pub fn labeled(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &l)| l > 0).map(|(i, _)| i)
    }

    /// Labeled-pixel count per class, index 0 holding class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            if l > 0 {
                counts[l as usize - 1] += 1;
            }
        }
        counts
    }

    pub fn matches(&self, cube: &HsiCube) -> Result<()> {
        if self.height != cube.height || self.width != cube.width {
            return Err(Error::data(format!(
                "ground truth {}x{} does not match cube {}x{}",
                self.height, self.width, cube.height, cube.width
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(GT_MAGIC)?;
        for d in [self.height, self.width, self.classes] {
            w.write_all(&dim_u32(d)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.labels.len() * 2);
        for l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let [h, w, classes] = read_header(r, GT_MAGIC, ["height", "width", "classes"])?;
        let n = checked_len(&[h, w, 2], "dims")? / 2;
        let mut raw = vec![0u8; n * 2];
        read_exact(r, &mut raw, "payload")?;
        let labels = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
        GroundTruth::new(h, w, classes, labels).map_err(|e| match e {
            Error::Argument(m) => Error::format("dims", m),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::format("dims", format!("dimension {d} exceeds u32")))
}

fn checked_len(dims: &[usize], field: &str) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(field, "dimension overflow"))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], field: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(field, format!("{field} short")),
        _ => Error::Io(e),
    })
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4], fields: [&str; 3]) -> Result<[usize; 3]> {
    let mut m = [0u8; 4];
    read_exact(r, &mut m, "magic")?;
    if &m != magic {
        return Err(Error::format(
            "magic",
            format!("expected {}, found {:?}", String::from_utf8_lossy(magic), m),
        ));
    }
    let mut out = [0usize; 3];
    for (slot, field) in out.iter_mut().zip(fields) {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, field)?;
        *slot = u32::from_le_bytes(b) as usize;
        if *slot == 0 && field != "classes" {
            return Err(Error::format(field, "must be positive"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube() -> HsiCube {
        let values = (0..4 * 5 * 6).map(|i| (i as f32 * 0.37).sin() * 10.0).collect();
        HsiCube::new(4, 5, 6, values).unwrap()
    }

    #[test]
    fn cube_round_trip_is_bit_exact() {
        let c = cube();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HSC1");
        assert_eq!(buf.len(), 16 + 4 * 120);
        let back = HsiCube::read_from(&mut buf.as_slice(), false).unwrap();
        assert_eq!(
            back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn one_serializes_little_endian() {
        let c = HsiCube::new(1, 1, 1, vec![1.0]).unwrap();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(&buf[16..], &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn format_errors() {
        let mut buf = Vec::new();
        cube().write_to(&mut buf).unwrap();
        let err = HsiCube::read_from(&mut &buf[..buf.len() - 1], false).unwrap_err();
        assert!(err.to_string().contains("payload short"), "{err}");
        let mut bad = buf.clone();
        bad[3] = b'2';
        assert!(
            matches!(HsiCube::read_from(&mut bad.as_slice(), false), Err(Error::Format { field, .. }) if field == "magic")
        );
        let mut huge = b"HSC1".to_vec();
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let err = HsiCube::read_from(&mut huge.as_slice(), false).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn normalization_maps_band_extremes() {
        let mut buf = Vec::new();
        cube().write_to(&mut buf).unwrap();
        let c = HsiCube::read_from(&mut buf.as_slice(), true).unwrap();
        for b in 0..c.bands() {
            let band: Vec<f32> = c.values().iter().skip(b).step_by(c.bands()).copied().collect();
            let lo = band.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = band.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            assert!(lo.abs() < 1e-6 && (hi - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ground_truth_round_trip_and_validation() {
        let gt = GroundTruth::new(2, 3, 4, vec![0, 1, 2, 3, 4, 1]).unwrap();
        let mut buf = Vec::new();
        gt.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HSG1");
        assert_eq!(&buf[16..18], &[0, 0]);
        assert_eq!(&buf[18..20], &[1, 0]);
        assert_eq!(GroundTruth::read_from(&mut buf.as_slice()).unwrap(), gt);
        assert_eq!(gt.class_counts(), vec![2, 1, 1, 1]);
        assert!(GroundTruth::new(1, 2, 1, vec![1, 2]).is_err());
    }
}
