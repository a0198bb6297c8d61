use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use smlw_core::model::MixerKind;
use smlw_core::tensor::PrecisionMode;

#[derive(Debug, Parser)]
#[command(
    name = "smlw",
    version,
    about = "Spectral vision-Transformer workbench for hyperspectral classification",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cube and label raster.
    SynthData(SynthArgs),
    /// Train one model per seed and report mean and std of the test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split of a labeled cube.
    Eval(EvalArgs),
    /// Render per-pixel predictions over all labeled pixels as a PPM image.
    PredictMap(PredictMapArgs),
    /// Loss landscape around a checkpoint along two filter-normalized directions.
    Landscape(LandscapeArgs),
    /// Distribution of top Hessian eigenvalues over mini-batches.
    Hessian(HessianArgs),
    /// Parameter count and multiply-accumulate cost of a model spec.
    Complexity(ComplexityArgs),
    /// Test accuracy as a function of patch size.
    SweepPatch(SweepPatchArgs),
    /// Test accuracy as a function of the training fraction.
    SweepRatio(SweepRatioArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::PredictMap(_) => "predict-map",
            Command::Landscape(_) => "landscape",
            Command::Hessian(_) => "hessian",
            Command::Complexity(_) => "complexity",
            Command::SweepPatch(_) => "sweep-patch",
            Command::SweepRatio(_) => "sweep-ratio",
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

fn parse_four(s: &str) -> Result<[usize; 4], String> {
    let v: Vec<usize> = parse_list(s)?;
    v.try_into()
        .map_err(|v: Vec<usize>| format!("expected 4 comma-separated values, got {}", v.len()))
}

/// Comma-separated list flag value.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct List<T>(pub Vec<T>);

fn parse_usizes(s: &str) -> Result<List<usize>, String> {
    parse_list(s).map(List)
}

fn parse_fracs(s: &str) -> Result<List<f64>, String> {
    parse_list(s).map(List)
}

/// Grid size as `N` or `HxW`.
fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

/// KDE bandwidth; `None` selects Scott's rule.
#[derive(Debug, Clone, Copy, Serialize)]
#[serde(transparent)]
pub struct Bandwidth(pub Option<f64>);

fn parse_bandwidth(s: &str) -> Result<Bandwidth, String> {
    if s == "auto" {
        return Ok(Bandwidth(None));
    }
    s.parse::<f64>()
        .map(|b| Bandwidth(Some(b)))
        .map_err(|e| format!("`{s}`: {e} (expected a number or `auto`)"))
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// Arithmetic: `standard` (f32) or `verify` (f64).
    #[arg(long)]
    pub precision: Option<PrecisionMode>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub bands: usize,
    /// `N` for an N x N grid or `HxW`.
    #[arg(long, default_value = "64", value_parser = parse_size)]
    pub size: (usize, usize),
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct DataArgs {
    /// HSC1 cube file.
    #[arg(long)]
    pub cube: PathBuf,
    /// HSG1 label file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Rescale every band to [0, 1] after loading.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = MixerKind::Ssa)]
    pub mixer: MixerKind,
    #[arg(long, default_value = "1,1,1,1", value_parser = parse_four)]
    pub depths: [usize; 4],
    #[arg(long, default_value = "16,16,16,16", value_parser = parse_four)]
    pub channels: [usize; 4],
    #[arg(long, default_value_t = 5)]
    pub patch: usize,
    #[arg(long, default_value_t = smlw_core::model::DEFAULT_HEADS)]
    pub heads: usize,
    #[arg(long, default_value_t = smlw_core::model::DEFAULT_MLP_RATIO)]
    pub mlp_ratio: f64,
    /// Heads for channel attention; defaults to `--heads` when it divides the
    /// token count, else 1.
    #[arg(long)]
    pub csa_heads: Option<usize>,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 0.05)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0.05)]
    pub val_frac: f64,
    /// Number of seeds; run i uses `seed + i`.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the split fixed at `--seed` across runs instead of reseeding it.
    #[arg(long)]
    pub fixed_split: bool,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Label-smoothing strength.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Keep the epoch with the best validation OA instead of the last one.
    #[arg(long)]
    pub best_val: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct CheckpointArgs {
    /// SMLW checkpoint; its `model.json` sidecar must sit in the same directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    /// Which pixels to score; splits are rebuilt from the sidecar.
    #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
    pub split: EvalSplit,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictMapArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long)]
    pub precision: Option<PrecisionMode>,
    /// Output PPM path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LandscapeArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    /// Samples per axis.
    #[arg(long, default_value_t = 11)]
    pub grid: usize,
    #[arg(long, default_value_t = 100.0)]
    pub cap: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate on a seeded subset of this many training samples.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Evaluate cells one after another instead of in parallel.
    #[arg(long)]
    pub serial: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct HessianArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    #[arg(long, default_value_t = 64)]
    pub batches: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// KDE bandwidth, or `auto` for Scott's rule.
    #[arg(long, default_value = "auto", value_parser = parse_bandwidth)]
    pub bandwidth: Bandwidth,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct ComplexityArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 144)]
    pub bands: usize,
    #[arg(long, default_value_t = 15)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepPatchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value = "5,7,9,11,13", value_parser = parse_usizes)]
    pub patches: List<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepRatioArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value = "0.01,0.02,0.05,0.1", value_parser = parse_fracs)]
    pub fracs: List<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn list_parsers() {
        assert_eq!(parse_four("3,2,4,2").unwrap(), [3, 2, 4, 2]);
        assert!(parse_four("1,2,3").is_err());
        assert_eq!(parse_size("12").unwrap(), (12, 12));
        assert_eq!(parse_size("8x5").unwrap(), (8, 5));
        assert!(parse_bandwidth("auto").unwrap().0.is_none());
        assert_eq!(parse_bandwidth("0.5").unwrap().0, Some(0.5));
    }

    #[test]
    fn every_subcommand_parses_with_required_flags() {
        let ckpt = ["--checkpoint", "m", "--cube", "c", "--gt", "g"];
        let data = ["--cube", "c", "--gt", "g"];
        let cases: Vec<Vec<&str>> = vec![
            vec!["synth-data", "--out", "o"],
            [&["train"][..], &data, &["--out", "o"]].concat(),
            [&["eval"][..], &ckpt, &["--out", "o", "--split", "all"]].concat(),
            [&["predict-map"][..], &ckpt, &["--out", "o.ppm"]].concat(),
            [&["landscape"][..], &ckpt, &["--out", "o", "--serial"]].concat(),
            [&["hessian"][..], &ckpt, &["--out", "o", "--bandwidth", "0.3"]].concat(),
            vec!["complexity", "--out", "o"],
            [&["sweep-patch"][..], &data, &["--out", "o", "--patches", "3,5"]].concat(),
            [&["sweep-ratio"][..], &data, &["--out", "o", "--fracs", "0.1,0.2"]].concat(),
        ];
        for mut argv in cases {
            argv.insert(0, "smlw");
            let cli = Cli::try_parse_from(&argv).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
            assert_eq!(cli.command.name(), argv[1]);
        }
    }
}
