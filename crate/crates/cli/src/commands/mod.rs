mod diagnostics;
mod synth;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use smlw_core::data::{stratified_split, GroundTruth, HsiCube, PatchSet, Split, SplitAssignment};
use smlw_core::model::ModelSpec;
use smlw_core::params::ParameterStore;
use smlw_core::tensor::{PrecisionMode, Real};

use crate::args::{Command, ModelArgs};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData(a) => synth::synth_data(&a),
        Command::Train(a) => train::train_cmd(&a),
        Command::Eval(a) => train::eval_cmd(&a),
        Command::PredictMap(a) => train::predict_map_cmd(&a),
        Command::Landscape(a) => diagnostics::landscape_cmd(&a),
        Command::Hessian(a) => diagnostics::hessian_cmd(&a),
        Command::Complexity(a) => diagnostics::complexity_cmd(&a),
        Command::SweepPatch(a) => train::sweep_patch_cmd(&a),
        Command::SweepRatio(a) => train::sweep_ratio_cmd(&a),
    }
}

/// Calls `$f::<f32>` or `$f::<f64>` according to a [`PrecisionMode`].
macro_rules! with_precision {
    ($mode:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $mode {
            smlw_core::tensor::PrecisionMode::Standard => $f::<f32>($($arg),*),
            smlw_core::tensor::PrecisionMode::Verify => $f::<f64>($($arg),*),
        }
    };
}
pub(crate) use with_precision;

/// Everything needed to rebuild a trained model and its data split,
/// stored as `model.json` next to the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: ModelSpec,
    pub normalize: bool,
    pub train_frac: f64,
    pub val_frac: f64,
    pub split_seed: u64,
    pub init_seed: u64,
    pub precision: PrecisionMode,
    pub kept_epoch: usize,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn of(a: &SplitAssignment) -> Self {
        SplitCounts {
            train: a.train.len(),
            val: a.val.len(),
            test: a.test.len(),
        }
    }
}

pub const CHECKPOINT_FILE: &str = "model.smlw";
pub const SIDECAR_FILE: &str = "model.json";

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(SIDECAR_FILE)
}

pub fn load_sidecar(checkpoint: &Path) -> Result<Sidecar> {
    let path = sidecar_path(checkpoint);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let sidecar: Sidecar = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(sidecar)
}

pub fn load_data(cube: &Path, gt: &Path, normalize: bool) -> Result<(HsiCube, GroundTruth)> {
    let c = HsiCube::load(cube, normalize).with_context(|| format!("loading cube {}", cube.display()))?;
    let g = GroundTruth::load(gt).with_context(|| format!("loading ground truth {}", gt.display()))?;
    g.matches(&c)?;
    Ok((c, g))
}

pub fn spec_from(args: &ModelArgs, patch: usize, bands: usize, classes: usize) -> ModelSpec {
    let mut spec = ModelSpec::new(args.depths, args.channels, args.mixer, patch, bands, classes);
    spec.heads = args.heads;
    spec.mlp_ratio = args.mlp_ratio;
    spec.csa_heads = args.csa_heads;
    spec
}

/// Loads a checkpoint with its sidecar and rebuilds the split it was trained on.
pub struct Restored<T: Real> {
    pub sidecar: Sidecar,
    pub params: ParameterStore<T>,
    pub cube: HsiCube,
    pub gt: GroundTruth,
    pub split: SplitAssignment,
}

impl<T: Real> Restored<T> {
    pub fn load(checkpoint: &Path, cube: &Path, gt: &Path) -> Result<Self> {
        let sidecar = load_sidecar(checkpoint)?;
        let params = ParameterStore::<f32>::load(checkpoint)
            .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?
            .cast::<T>();
        let (cube, gt) = load_data(cube, gt, sidecar.normalize)?;
        if cube.bands() != sidecar.spec.bands || gt.classes() != sidecar.spec.classes {
            return Err(smlw_core::Error::data(format!(
                "data has {} bands and {} classes, the model expects {} and {}",
                cube.bands(),
                gt.classes(),
                sidecar.spec.bands,
                sidecar.spec.classes
            ))
            .into());
        }
        let split = stratified_split(&gt, sidecar.train_frac, sidecar.val_frac, sidecar.split_seed)?;
        Ok(Restored {
            sidecar,
            params,
            cube,
            gt,
            split,
        })
    }

    pub fn patches(&self, split: Split) -> Result<PatchSet> {
        Ok(PatchSet::build(
            &self.cube,
            &self.gt,
            self.split.get(split),
            self.sidecar.spec.patch_size,
            split,
        )?)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
