//! Named parameter tensors, their binary checkpoint format, and binding them
//! onto a tape for differentiation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"SMLW";
const VERSION: u32 = 1;

/// Suffixes of non-trainable state kept alongside the parameters.
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

/// True for running statistics that are stored but never trained or perturbed.
pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Insertion-ordered map of named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries that are learned, i.e. everything except running statistics.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(k, _)| !is_buffer(k))
    }

    /// Number of learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Store holding only the learnable entries.
    pub fn trainable_only(&self) -> Self {
        ParameterStore {
            entries: self.trainable().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Adds `scale * other[name]` to every entry named in `other`.
    pub fn add_scaled(&mut self, other: &ParameterStore<T>, scale: T) -> Result<()> {
        for (name, delta) in other.iter() {
            let target = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::argument(format!("unknown parameter `{name}`")))?;
            target.expect_same_shape(delta)?;
            for (t, d) in target.data_mut().iter_mut().zip(delta.data()) {
                *t += scale * *d;
            }
        }
        Ok(())
    }

    /// Sum of elementwise products over the entries both stores share.
    pub fn dot(&self, other: &ParameterStore<T>) -> T {
        self.iter()
            .filter_map(|(k, a)| other.get(k).map(|b| (a, b)))
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).sum::<T>())
            .sum()
    }

    /// Largest absolute value over all entries.
    pub fn max_abs(&self) -> T {
        self.entries.values().fold(T::zero(), |m, t| m.max(t.max_abs()))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let count = u32::try_from(self.len()).map_err(|_| Error::format("count", "too many entries"))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in self.iter() {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::format("name", format!("`{name}` longer than 65535 bytes")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::format("rank", "rank above 255"))?;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::format("dims", "dimension above u32"))?;
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_field(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::format("magic", format!("expected SMLW, found {magic:?}")));
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let count = read_u32(r, "count")?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            read_field(r, &mut len, "name length")?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_field(r, &mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| Error::format("name", "not UTF-8"))?;
            let mut rank = [0u8; 1];
            read_field(r, &mut rank, "rank")?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(r, "dims")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4).map(|_| n))
                .ok_or_else(|| Error::format("dims", format!("`{name}` dimensions overflow")))?;
            let mut raw = vec![0u8; numel * 4];
            read_field(r, &mut raw, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| Error::format("dims", format!("`{name}`: {e}")))?;
            store.insert(name, tensor);
        }
        Ok(store)
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

fn read_field<R: Read>(r: &mut R, buf: &mut [u8], field: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(field, format!("{field} short")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_field(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b))
}

/// Binds a [`ParameterStore`] onto a fresh tape, creating leaves lazily as
/// parameters are requested.
pub struct Binding<'s, T: Real> {
    store: &'s ParameterStore<T>,
    pub tape: Tape<T>,
    vars: IndexMap<String, Var>,
    track_grads: bool,
}

impl<'s, T: Real> Binding<'s, T> {
    /// With `track_grads` off parameters are recorded as constants and no
    /// backward pass is possible.
    pub fn new(store: &'s ParameterStore<T>, track_grads: bool) -> Self {
        Binding {
            store,
            tape: Tape::new(),
            vars: IndexMap::new(),
            track_grads,
        }
    }

    pub fn store(&self) -> &'s ParameterStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::argument(format!("missing parameter `{name}`")))?
            .clone();
        let v = if self.track_grads && !is_buffer(name) {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'s Tensor<T>> {
        self.store
            .get(name)
            .ok_or_else(|| Error::argument(format!("missing buffer `{name}`")))
    }

    /// Gradient of `loss` for every learnable entry in the store; entries the
    /// loss never touched get exact zeros.
    pub fn gradients(&self, loss: Var) -> Result<ParameterStore<T>> {
        let grads = self.tape.backward(loss)?;
        let mut out = ParameterStore::new();
        for (name, value) in self.store.trainable() {
            let g = match self.vars.get(name) {
                Some(&v) => grads.get_or_zero(v),
                None => Tensor::zeros(value.shape()),
            };
            out.insert(name, g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.insert(
            "a.weight",
            Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-7, -0.0]).unwrap(),
        );
        s.insert("a.bias", Tensor::from_f64(&[2], &[0.25, 9.0]).unwrap());
        s.insert("bn.running_var", Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap());
        s
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SMLW");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &3u32.to_le_bytes());
        assert_eq!(&buf[12..14], &8u16.to_le_bytes());
        assert_eq!(&buf[14..22], b"a.weight");
        assert_eq!(buf[22], 2);
        // first float after two u32 dims
        assert_eq!(&buf[31..35], &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn round_trip_and_truncation() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParameterStore::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        let err = ParameterStore::<f32>::read_from(&mut &buf[..buf.len() - 2]).unwrap_err();
        assert!(err.to_string().contains("payload short"), "{err}");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            ParameterStore::<f32>::read_from(&mut bad.as_slice()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn buffers_are_not_trainable() {
        let s = sample();
        assert_eq!(s.trainable_count(), 8);
        assert!(s.trainable_only().get("bn.running_var").is_none());
    }
}
