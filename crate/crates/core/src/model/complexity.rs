use serde::Serialize;

use super::{MixerKind, ModelSpec};
use crate::error::Result;

/// Learnable-parameter count and per-forward cost of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ComplexityReport {
    pub parameter_count: u64,
    /// Multiply-accumulates over convolutions, linear layers and attention products.
    pub macs: u64,
    /// `2 * macs`.
    pub flops: u64,
    pub batch: u64,
}

fn linear_params(fan_in: u64, fan_out: u64) -> u64 {
    fan_in * fan_out + fan_out
}

fn cn_block_params(c: u64) -> u64 {
    let wide = 4 * c;
    let conv1 = 9 * c * wide + wide;
    let bn = 2 * wide;
    let conv2 = 9 * wide * c + c;
    conv1 + bn + conv2
}

/// Counted in closed form from the architecture, independently of the
/// parameter store the model builds.
pub fn complexity_report(spec: &ModelSpec, batch: usize) -> Result<ComplexityReport> {
    spec.validate()?;
    let b = batch as u64;
    let l = spec.tokens() as u64;
    let mut params = 0u64;
    let mut macs = 0u64;
    let mut cin = spec.bands as u64;
    for (&depth, &cout) in spec.stage_depths.iter().zip(&spec.stage_channels) {
        let c = cout as u64;
        params += linear_params(cin, c);
        macs += b * l * cin * c;
        let (tokens, features) = if spec.mixer.has_channel_attention() {
            (c, l)
        } else {
            (l, c)
        };
        let hidden = spec.mlp_hidden(features as usize) as u64;
        // norm2 + MLP are common to every kind
        let mut block_params = 2 * features + linear_params(features, hidden) + linear_params(hidden, features);
        let mut block_macs = b * tokens * 2 * features * hidden;
        if spec.mixer.has_cnn() {
            block_params += cn_block_params(c);
            block_macs += b * l * 72 * c * c;
        }
        if spec.mixer != MixerKind::Cnn {
            block_params += 2 * features + 4 * linear_params(features, features);
            block_macs += b * (4 * tokens * features * features + 2 * tokens * tokens * features);
        }
        params += depth as u64 * block_params;
        macs += depth as u64 * block_macs;
        cin = c;
    }
    params += linear_params(cin, spec.classes as u64);
    macs += b * cin * spec.classes as u64;
    Ok(ComplexityReport {
        parameter_count: params,
        macs,
        flops: 2 * macs,
        batch: b,
    })
}
