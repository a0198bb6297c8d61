//! Parameterized building blocks. Each layer reads its tensors from the
//! session under a name prefix and has a matching `init_*` that creates them.

use rand::Rng;

use super::network::Session;
use super::AttentionConfig;
use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Weight and bias drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_linear<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.weight"), uniform(rng, &[fan_out, fan_in], bound));
    store.insert(format!("{prefix}.bias"), uniform(rng, &[fan_out], bound));
}

pub fn init_conv<T: Real, R: Rng>(
    store: &mut ParameterStore<T>,
    rng: &mut R,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    store.insert(format!("{prefix}.weight"), uniform(rng, &[cout, cin, k, k], bound));
    store.insert(format!("{prefix}.bias"), uniform(rng, &[cout], bound));
}

pub fn init_layer_norm<T: Real>(store: &mut ParameterStore<T>, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.weight"), Tensor::ones(&[dim]));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
}

pub fn init_batch_norm<T: Real>(store: &mut ParameterStore<T>, prefix: &str, channels: usize) {
    store.insert(format!("{prefix}.weight"), Tensor::ones(&[channels]));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[channels]));
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
    store.insert(format!("{prefix}.running_var"), Tensor::ones(&[channels]));
}

pub fn init_msa<T: Real, R: Rng>(store: &mut ParameterStore<T>, rng: &mut R, prefix: &str, dim: usize) {
    for proj in ["q", "k", "v", "proj"] {
        init_linear(store, rng, &format!("{prefix}.{proj}"), dim, dim);
    }
}

pub fn init_mlp<T: Real, R: Rng>(store: &mut ParameterStore<T>, rng: &mut R, prefix: &str, dim: usize, hidden: usize) {
    init_linear(store, rng, &format!("{prefix}.fc1"), dim, hidden);
    init_linear(store, rng, &format!("{prefix}.fc2"), hidden, dim);
}

/// Conv3x3(C -> 4C), batch norm, SiLU, Conv3x3(4C -> C).
pub fn init_cn_block<T: Real, R: Rng>(store: &mut ParameterStore<T>, rng: &mut R, prefix: &str, channels: usize) {
    let wide = 4 * channels;
    init_conv(store, rng, &format!("{prefix}.conv1"), channels, wide, 3);
    init_batch_norm(store, &format!("{prefix}.bn"), wide);
    init_conv(store, rng, &format!("{prefix}.conv2"), wide, channels, 3);
}

pub fn linear<T: Real>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = s.binding.param(&format!("{prefix}.weight"))?;
    let b = s.binding.param(&format!("{prefix}.bias"))?;
    s.binding.tape.linear(x, w, Some(b))
}

pub fn conv<T: Real>(s: &mut Session<'_, T>, prefix: &str, x: Var, padding: usize) -> Result<Var> {
    let w = s.binding.param(&format!("{prefix}.weight"))?;
    let b = s.binding.param(&format!("{prefix}.bias"))?;
    s.binding.tape.conv2d(x, w, b, padding)
}

pub fn layer_norm<T: Real>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let g = s.binding.param(&format!("{prefix}.weight"))?;
    let b = s.binding.param(&format!("{prefix}.bias"))?;
    s.binding.tape.layer_norm(x, g, b, T::of(LN_EPS))
}

/// Batch norm; in training mode the updated running statistics are queued on
/// the session instead of being written back.
pub fn batch_norm<T: Real>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let g = s.binding.param(&format!("{prefix}.weight"))?;
    let b = s.binding.param(&format!("{prefix}.bias"))?;
    let mean_name = format!("{prefix}.running_mean");
    let var_name = format!("{prefix}.running_var");
    let running_mean = s.binding.buffer(&mean_name)?;
    let running_var = s.binding.buffer(&var_name)?;
    let eps = T::of(BN_EPS);
    if !s.train {
        return s
            .binding
            .tape
            .batch_norm_eval(x, g, b, running_mean.data(), running_var.data(), eps);
    }
    let (out, mean, var) = s.binding.tape.batch_norm_train(x, g, b, eps)?;
    let m = T::of(BN_MOMENTUM);
    let blend = |old: &Tensor<T>, new: &[T]| {
        old.zip_map(&Tensor::new(old.shape().to_vec(), new.to_vec())?, |o, n| {
            (T::one() - m) * o + m * n
        })
    };
    let new_mean = blend(running_mean, &mean)?;
    let new_var = blend(running_var, &var)?;
    s.bn_updates.push((mean_name, new_mean));
    s.bn_updates.push((var_name, new_var));
    Ok(out)
}

/// CNN block on an image-layout tensor `[B, C, s, s]`; output has the same shape.
pub fn cn_block<T: Real>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let h = conv(s, &format!("{prefix}.conv1"), x, 1)?;
    let h = batch_norm(s, &format!("{prefix}.bn"), h)?;
    let h = s.binding.tape.silu(h);
    conv(s, &format!("{prefix}.conv2"), h, 1)
}

/// Two linear layers with a GELU in between.
pub fn mlp<T: Real>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(s, &format!("{prefix}.fc1"), x)?;
    let h = s.binding.tape.gelu(h);
    linear(s, &format!("{prefix}.fc2"), h)
}

/// Tape handles produced by [`msa`].
#[derive(Debug, Clone, Copy)]
pub struct MsaOutput {
    /// Output-projected result, `[B, L, d]`.
    pub out: Var,
    /// Scaled pre-softmax logits `QK^T / sqrt(d / heads)`, `[B * heads, L, L]`.
    pub scores: Var,
    /// Attention weights, rows summing to one, `[B * heads, L, L]`.
    pub weights: Var,
}

/// Multi-head self-attention over `x: [B, L, d]`.
pub fn msa<T: Real>(s: &mut Session<'_, T>, prefix: &str, x: Var, cfg: AttentionConfig) -> Result<MsaOutput> {
    let (b, l, d) = match *s.binding.tape.shape(x) {
        [b, l, d] => (b, l, d),
        ref other => return Err(crate::Error::argument(format!("msa expects [B, L, d], got {other:?}"))),
    };
    if d != cfg.embed_dim {
        return Err(crate::Error::argument(format!(
            "msa input width {d} does not match embedding dimension {}",
            cfg.embed_dim
        )));
    }
    let (h, dh) = (cfg.heads, cfg.head_dim());
    let q = linear(s, &format!("{prefix}.q"), x)?;
    let k = linear(s, &format!("{prefix}.k"), x)?;
    let v = linear(s, &format!("{prefix}.v"), x)?;
    let tape = &mut s.binding.tape;
    let split = |tape: &mut crate::tensor::Tape<T>, t: Var, perm: &[usize], shape: [usize; 3]| -> Result<Var> {
        let t = tape.reshape(t, &[b, l, h, dh])?;
        let t = tape.permute(t, perm)?;
        tape.reshape(t, &shape)
    };
    let q = split(tape, q, &[0, 2, 1, 3], [b * h, l, dh])?;
    let kt = split(tape, k, &[0, 2, 3, 1], [b * h, dh, l])?;
    let v = split(tape, v, &[0, 2, 1, 3], [b * h, l, dh])?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, T::of(cfg.scale()));
    let attn = tape.softmax(scores, 2)?;
    let ctx = tape.bmm(attn, v)?;
    let ctx = tape.reshape(ctx, &[b, h, l, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, l, d])?;
    let out = linear(s, &format!("{prefix}.proj"), ctx)?;
    Ok(MsaOutput {
        out,
        scores,
        weights: attn,
    })
}
