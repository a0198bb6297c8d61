use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{conv, init_conv, init_linear, linear};
use super::mixer::{img2seq, init_mixer_block, mixer_block, seq2img};
use super::ModelSpec;
use crate::error::{Error, Result};
use crate::params::{Binding, ParameterStore};
use crate::tensor::{Real, Tensor, Var};

/// One forward evaluation: a tape bound to a parameter store plus the
/// train/eval switch for batch norm.
pub struct Session<'s, T: Real> {
    pub binding: Binding<'s, T>,
    pub train: bool,
    /// Running-statistic updates produced in training mode, applied by the caller.
    pub bn_updates: Vec<(String, Tensor<T>)>,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s ParameterStore<T>, train: bool, track_grads: bool) -> Self {
        Session {
            binding: Binding::new(store, track_grads),
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.binding.tape.constant(x)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.binding.tape.value(v)
    }
}

/// The four-stage hierarchical spectral vision-Transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVit {
    spec: ModelSpec,
}

impl SpectralVit {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(SpectralVit { spec })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn init<T: Real>(&self, seed: u64) -> ParameterStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let spec = &self.spec;
        let mut cin = spec.bands;
        for (i, (&depth, &cout)) in spec.stage_depths.iter().zip(&spec.stage_channels).enumerate() {
            init_conv(&mut store, &mut rng, &format!("stages.{i}.embed"), cin, cout, 1);
            for j in 0..depth {
                init_mixer_block(&mut store, &mut rng, &format!("stages.{i}.blocks.{j}"), spec, cout);
            }
            cin = cout;
        }
        init_linear(&mut store, &mut rng, "head", spec.stage_channels[3], spec.classes);
        store
    }

    /// Logits `[B, classes]` for patches `[B, s, s, bands]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, patches: Var) -> Result<Var> {
        let spec = &self.spec;
        let (b, l) = match *s.binding.tape.shape(patches) {
            [b, h, w, c] if h == spec.patch_size && w == spec.patch_size && c == spec.bands => (b, h * w),
            ref other => {
                return Err(Error::argument(format!(
                    "patches {other:?} do not match [B, {p}, {p}, {}]",
                    spec.bands,
                    p = spec.patch_size
                )))
            }
        };
        let mut x = s.binding.tape.reshape(patches, &[b, l, spec.bands])?;
        for (i, (&depth, &cout)) in spec.stage_depths.iter().zip(&spec.stage_channels).enumerate() {
            x = token_embed(s, &format!("stages.{i}.embed"), x, cout)?;
            for j in 0..depth {
                x = mixer_block(s, &format!("stages.{i}.blocks.{j}"), x, spec)?;
            }
        }
        // adaptive average pooling over the s x s grid, then flatten
        let pooled = s.binding.tape.mean_axis(x, 1)?;
        linear(s, "head", pooled)
    }

    /// Inference-mode logits without recording gradients.
    pub fn logits<T: Real>(&self, store: &ParameterStore<T>, patches: Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::new(store, false, false);
        let x = s.input(patches);
        let out = self.forward(&mut s, x)?;
        Ok(s.value(out).clone())
    }

    /// Arg-max class index per sample.
    pub fn predict<T: Real>(&self, store: &ParameterStore<T>, patches: Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(store, patches)?;
        Ok(argmax_rows(&logits))
    }
}

pub(crate) fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, T::neg_infinity()),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                )
                .0
        })
        .collect()
}

/// Seq2Img, 1x1 convolution to `cout` channels, Img2Seq.
pub fn token_embed<T: Real>(s: &mut Session<'_, T>, prefix: &str, x: Var, cout: usize) -> Result<Var> {
    let img = seq2img(&mut s.binding.tape, x)?;
    let y = conv(s, prefix, img, 0)?;
    if s.binding.tape.shape(y)[1] != cout {
        return Err(Error::argument(format!(
            "token embedding `{prefix}` produces {} channels, expected {cout}",
            s.binding.tape.shape(y)[1]
        )));
    }
    img2seq(&mut s.binding.tape, y)
}
