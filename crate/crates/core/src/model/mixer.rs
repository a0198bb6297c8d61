use rand::Rng;

use super::layers::{self, cn_block, layer_norm, mlp, msa};
use super::network::Session;
use super::{AttentionConfig, MixerKind, ModelSpec};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tape, Var};

fn side_of(l: usize) -> Result<usize> {
    let s = (l as f64).sqrt().round() as usize;
    if s * s != l {
        return Err(Error::argument(format!("sequence length {l} is not a perfect square")));
    }
    Ok(s)
}

fn dims3<T: Real>(tape: &Tape<T>, x: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [b, l, c] => Ok((b, l, c)),
        ref s => Err(Error::argument(format!("expected [B, L, C], got {s:?}"))),
    }
}

/// `[B, L, C]` sequence to `[B, C, s, s]` image with `L = s * s`.
pub fn seq2img<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (b, l, c) = dims3(tape, x)?;
    let side = side_of(l)?;
    let t = tape.permute(x, &[0, 2, 1])?;
    tape.reshape(t, &[b, c, side, side])
}

/// `[B, C, s, s]` image to `[B, s * s, C]` sequence.
pub fn img2seq<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (b, c, h, w) = match *tape.shape(x) {
        [b, c, h, w] => (b, c, h, w),
        ref s => return Err(Error::argument(format!("expected [B, C, H, W], got {s:?}"))),
    };
    let t = tape.reshape(x, &[b, c, h * w])?;
    tape.permute(t, &[0, 2, 1])
}

/// Swaps spatial-sequence `[B, L, C]` and channel-sequence `[B, C, L]`
/// layouts. This equals Img2Seq(Transpose(Seq2Img(x))) and is its own inverse.
pub fn channel_transpose<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    dims3(tape, x)?;
    tape.permute(x, &[0, 2, 1])
}

/// Creates the parameters of one mixer block operating on `channels` channels.
pub fn init_mixer_block<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    rng: &mut R,
    prefix: &str,
    spec: &ModelSpec,
    channels: usize,
) {
    let kind = spec.mixer;
    let features = if kind.has_channel_attention() {
        spec.tokens()
    } else {
        channels
    };
    if kind.has_cnn() {
        layers::init_cn_block(store, rng, &format!("{prefix}.cn"), channels);
    }
    if kind != MixerKind::Cnn {
        layers::init_layer_norm(store, &format!("{prefix}.norm1"), features);
        layers::init_msa(store, rng, &format!("{prefix}.attn"), features);
    }
    layers::init_layer_norm(store, &format!("{prefix}.norm2"), features);
    layers::init_mlp(
        store,
        rng,
        &format!("{prefix}.mlp"),
        features,
        spec.mlp_hidden(features),
    );
}

/// One Transformer layer with the token mixer selected by `spec.mixer`.
/// Maps `[B, L, C]` to `[B, L, C]`.
pub fn mixer_block<T: Real>(s: &mut Session<'_, T>, prefix: &str, x: Var, spec: &ModelSpec) -> Result<Var> {
    let (_, l, c) = dims3(&s.binding.tape, x)?;
    side_of(l)?;
    let p = |part: &str| format!("{prefix}.{part}");
    match spec.mixer {
        MixerKind::Cnn => {
            let img = seq2img(&mut s.binding.tape, x)?;
            let cn = cn_block(s, &p("cn"), img)?;
            let y = s.binding.tape.add(img, cn)?;
            let y = img2seq(&mut s.binding.tape, y)?;
            residual_mlp(s, prefix, y)
        }
        MixerKind::Ssa => {
            let cfg = AttentionConfig::new(c, spec.heads)?;
            let y = residual_attention(s, prefix, x, cfg)?;
            residual_mlp(s, prefix, y)
        }
        MixerKind::Csa => {
            let cfg = AttentionConfig::new(l, spec.channel_attention_heads())?;
            let xt = channel_transpose(&mut s.binding.tape, x)?;
            let y = residual_attention(s, prefix, xt, cfg)?;
            let z = residual_mlp(s, prefix, y)?;
            channel_transpose(&mut s.binding.tape, z)
        }
        MixerKind::SsaCnn => {
            let cfg = AttentionConfig::new(c, spec.heads)?;
            let y = residual_attention(s, prefix, x, cfg)?;
            let img = seq2img(&mut s.binding.tape, x)?;
            let cn = cn_block(s, &p("cn"), img)?;
            let cn = img2seq(&mut s.binding.tape, cn)?;
            let y = s.binding.tape.add(y, cn)?;
            residual_mlp(s, prefix, y)
        }
        MixerKind::CsaCnn => {
            let cfg = AttentionConfig::new(l, spec.channel_attention_heads())?;
            let xt = channel_transpose(&mut s.binding.tape, x)?;
            let y = residual_attention(s, prefix, xt, cfg)?;
            // The image layout [B, C, s, s] flattened is already channel-sequence layout.
            let img = seq2img(&mut s.binding.tape, x)?;
            let cn = cn_block(s, &p("cn"), img)?;
            let (b, _, _) = dims3(&s.binding.tape, x)?;
            let cn = s.binding.tape.reshape(cn, &[b, c, l])?;
            let y = s.binding.tape.add(y, cn)?;
            let z = residual_mlp(s, prefix, y)?;
            channel_transpose(&mut s.binding.tape, z)
        }
    }
}

/// `x + MSA(LN(x))`.
fn residual_attention<T: Real>(s: &mut Session<'_, T>, prefix: &str, x: Var, cfg: AttentionConfig) -> Result<Var> {
    let n = layer_norm(s, &format!("{prefix}.norm1"), x)?;
    let a = msa(s, &format!("{prefix}.attn"), n, cfg)?;
    s.binding.tape.add(x, a.out)
}

/// `y + MLP(LN(y))`.
fn residual_mlp<T: Real>(s: &mut Session<'_, T>, prefix: &str, y: Var) -> Result<Var> {
    let n = layer_norm(s, &format!("{prefix}.norm2"), y)?;
    let m = mlp(s, &format!("{prefix}.mlp"), n)?;
    s.binding.tape.add(y, m)
}
