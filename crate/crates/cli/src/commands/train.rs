use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use smlw_core::data::{stratified_split, GroundTruth, HsiCube, PatchSet, Split};
use smlw_core::model::{ModelSpec, SpectralVit};
use smlw_core::params::ParameterStore;
use smlw_core::tensor::{PrecisionMode, Real};
use smlw_core::training::{evaluate_metrics, train, write_history_csv, Metrics, MultiSeedReport, TrainConfig};

use super::{
    ensure_dir, load_data, spec_from, with_precision, write_json, Restored, Sidecar, SplitCounts, CHECKPOINT_FILE,
    SIDECAR_FILE,
};
use crate::args::{
    Common, DataArgs, EvalArgs, EvalSplit, ModelArgs, OptimArgs, PredictMapArgs, SweepPatchArgs, SweepRatioArgs,
    TrainArgs,
};
use crate::manifest::ManifestBuilder;

const EVAL_BATCH: usize = 256;

/// Sixteen distinguishable colors; class `k` uses entry `(k - 1) % 16`.
const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

struct RunPlan<'a> {
    cube: &'a HsiCube,
    gt: &'a GroundTruth,
    spec: ModelSpec,
    optim: &'a OptimArgs,
    train_frac: f64,
    normalize: bool,
    precision: PrecisionMode,
}

struct RunResult {
    metrics: Metrics,
    outputs: Vec<PathBuf>,
}

fn train_config(o: &OptimArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: o.epochs,
        batch_size: o.batch_size,
        lr: o.lr,
        momentum: o.momentum,
        weight_decay: o.weight_decay,
        alpha: o.alpha,
        seed,
        best_val: o.best_val,
    }
}

/// Trains one seed and writes checkpoint, sidecar, history and test metrics
/// into `dir`.
fn train_run<T: Real>(plan: &RunPlan<'_>, seed: u64, split_seed: u64, dir: &Path) -> Result<RunResult> {
    let o = plan.optim;
    let split = stratified_split(plan.gt, plan.train_frac, o.val_frac, split_seed)?;
    let s = plan.spec.patch_size;
    let tr = PatchSet::build(plan.cube, plan.gt, &split.train, s, Split::Train)?;
    let val = PatchSet::build(plan.cube, plan.gt, &split.val, s, Split::Val)?;
    let te = PatchSet::build(plan.cube, plan.gt, &split.test, s, Split::Test)?;
    if te.is_empty() {
        return Err(smlw_core::Error::data("test split is empty").into());
    }
    let model = SpectralVit::new(plan.spec.clone())?;
    let mut params = model.init::<T>(seed);
    let outcome = train(
        &model,
        &mut params,
        &tr,
        (!val.is_empty()).then_some(&val),
        &train_config(o, seed),
    )?;
    // Score the weights exactly as stored so `eval` reproduces these numbers.
    let stored: ParameterStore<T> = outcome.checkpoint.cast::<f32>().cast::<T>();
    let metrics = evaluate_metrics(&model, &stored, &te, EVAL_BATCH)?.with_seed(seed);

    ensure_dir(dir)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&ckpt)?;
    let sidecar = Sidecar {
        spec: plan.spec.clone(),
        normalize: plan.normalize,
        train_frac: plan.train_frac,
        val_frac: o.val_frac,
        split_seed,
        init_seed: seed,
        precision: plan.precision,
        kept_epoch: outcome.kept_epoch,
        counts: SplitCounts::of(&split),
    };
    let side = dir.join(SIDECAR_FILE);
    write_json(&side, &sidecar)?;
    let hist = dir.join("history.csv");
    let mut w = BufWriter::new(File::create(&hist)?);
    write_history_csv(&outcome.history, &mut w)?;
    w.flush()?;
    let met = dir.join("metrics.json");
    write_json(&met, &metrics)?;
    log::info!(
        "seed {seed}: test OA {:.4}, AA {:.4}, kappa {:.4}",
        metrics.oa,
        metrics.aa,
        metrics.kappa
    );
    Ok(RunResult {
        metrics,
        outputs: vec![ckpt, side, hist, met],
    })
}

/// Runs `optim.seeds` seeds starting at `first_seed` under `dir`.
fn multi_seed(
    plan: &RunPlan<'_>,
    first_seed: u64,
    dir: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<MultiSeedReport> {
    let o = plan.optim;
    if o.seeds == 0 {
        return Err(smlw_core::Error::argument("--seeds must be at least 1").into());
    }
    let mut runs = Vec::with_capacity(o.seeds);
    for i in 0..o.seeds as u64 {
        let seed = first_seed + i;
        let split_seed = if o.fixed_split { first_seed } else { seed };
        let r = with_precision!(
            plan.precision,
            train_run(plan, seed, split_seed, &dir.join(format!("seed-{seed}")))
        )?;
        manifest.seed(seed);
        for p in &r.outputs {
            manifest.output(p);
        }
        runs.push(r.metrics);
    }
    Ok(MultiSeedReport::from_runs(runs))
}

fn record_inputs(manifest: &mut ManifestBuilder, data: &DataArgs) {
    manifest.input(&data.cube);
    manifest.input(&data.gt);
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("train", a);
    record_inputs(&mut manifest, &a.data);
    let (cube, gt) = load_data(&a.data.cube, &a.data.gt, a.data.normalize)?;
    let plan = RunPlan {
        cube: &cube,
        gt: &gt,
        spec: spec_from(&a.model, a.model.patch, cube.bands(), gt.classes()),
        optim: &a.optim,
        train_frac: a.optim.train_frac,
        normalize: a.data.normalize,
        precision: a.common.precision.unwrap_or(PrecisionMode::Standard),
    };
    ensure_dir(&a.common.out)?;
    let report = multi_seed(&plan, a.optim.seed, &a.common.out, &mut manifest)?;
    let path = a.common.out.join("metrics.json");
    write_json(&path, &report)?;
    manifest.output(&path);
    manifest.finish(&a.common.out.join("manifest.json"))?;
    log::info!(
        "OA {:.4} +- {:.4} over {} seed(s)",
        report.oa.mean,
        report.oa.std,
        report.runs.len()
    );
    Ok(())
}

fn eval_typed<T: Real>(a: &EvalArgs, manifest: &mut ManifestBuilder) -> Result<()> {
    let r = Restored::<T>::load(&a.ckpt.checkpoint, &a.ckpt.cube, &a.ckpt.gt)?;
    let set = match a.split {
        EvalSplit::Train => r.patches(Split::Train)?,
        EvalSplit::Val => r.patches(Split::Val)?,
        EvalSplit::Test => r.patches(Split::Test)?,
        EvalSplit::All => {
            let all: Vec<usize> = r.gt.labeled().collect();
            PatchSet::build(&r.cube, &r.gt, &all, r.sidecar.spec.patch_size, Split::Test)?
        }
    };
    let model = SpectralVit::new(r.sidecar.spec.clone())?;
    let metrics = evaluate_metrics(&model, &r.params, &set, a.batch_size)?.with_seed(r.sidecar.init_seed);
    ensure_dir(&a.common.out)?;
    let path = a.common.out.join("metrics.json");
    write_json(&path, &metrics)?;
    manifest.seed(r.sidecar.init_seed);
    manifest.output(&path);
    println!(
        "{}",
        serde_json::to_string(&serde_json::json!({"oa": metrics.oa, "aa": metrics.aa, "kappa": metrics.kappa}))?
    );
    Ok(())
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("eval", a);
    manifest.input(&a.ckpt.checkpoint);
    manifest.input(&a.ckpt.cube);
    manifest.input(&a.ckpt.gt);
    let precision = match a.common.precision {
        Some(p) => p,
        None => super::load_sidecar(&a.ckpt.checkpoint)?.precision,
    };
    with_precision!(precision, eval_typed(a, &mut manifest))?;
    manifest.finish(&a.common.out.join("manifest.json"))?;
    Ok(())
}

fn predict_typed<T: Real>(a: &PredictMapArgs) -> Result<(u64, Vec<u8>, usize, usize)> {
    let r = Restored::<T>::load(&a.ckpt.checkpoint, &a.ckpt.cube, &a.ckpt.gt)?;
    let model = SpectralVit::new(r.sidecar.spec.clone())?;
    let (h, w) = (r.gt.height(), r.gt.width());
    let mut rgb = vec![0u8; h * w * 3];
    let labeled: Vec<usize> = r.gt.labeled().collect();
    for chunk in labeled.chunks(a.batch_size.max(1)) {
        let set = PatchSet::build(&r.cube, &r.gt, chunk, r.sidecar.spec.patch_size, Split::Test)?;
        let idx: Vec<usize> = (0..set.len()).collect();
        let (x, _) = set.batch::<T>(&idx);
        let pred = model.predict(&r.params, x)?;
        for (&p, &k) in chunk.iter().zip(&pred) {
            rgb[p * 3..p * 3 + 3].copy_from_slice(&PALETTE[k % PALETTE.len()]);
        }
    }
    Ok((r.sidecar.init_seed, rgb, h, w))
}

pub fn predict_map_cmd(a: &PredictMapArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("predict-map", a);
    manifest.input(&a.ckpt.checkpoint);
    manifest.input(&a.ckpt.cube);
    manifest.input(&a.ckpt.gt);
    let precision = match a.precision {
        Some(p) => p,
        None => super::load_sidecar(&a.ckpt.checkpoint)?.precision,
    };
    let (seed, rgb, h, w) = with_precision!(precision, predict_typed(a))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&rgb);
    fs::write(&a.out, bytes).with_context(|| format!("writing {}", a.out.display()))?;
    manifest.seed(seed);
    manifest.output(&a.out);
    manifest.finish(&a.out.with_extension("manifest.json"))?;
    Ok(())
}

struct SweepPoint {
    label: String,
    patch: usize,
    train_frac: f64,
}

struct SweepSetup<'a> {
    command: &'a str,
    column: &'a str,
    data: &'a DataArgs,
    model: &'a ModelArgs,
    optim: &'a OptimArgs,
    common: &'a Common,
}

fn sweep(setup: SweepSetup<'_>, points: Vec<SweepPoint>, config: &impl serde::Serialize) -> Result<()> {
    let SweepSetup {
        command,
        column,
        data,
        model,
        optim,
        common,
    } = setup;
    let out = &common.out;
    let mut manifest = ManifestBuilder::new(command, config);
    record_inputs(&mut manifest, data);
    let (cube, gt) = load_data(&data.cube, &data.gt, data.normalize)?;
    ensure_dir(out)?;
    let mut csv = format!("{column},oa_mean,oa_std,aa_mean,aa_std,kappa_mean,kappa_std\n");
    for (i, pt) in points.iter().enumerate() {
        let plan = RunPlan {
            cube: &cube,
            gt: &gt,
            spec: spec_from(model, pt.patch, cube.bands(), gt.classes()),
            optim,
            train_frac: pt.train_frac,
            normalize: data.normalize,
            precision: common.precision.unwrap_or(PrecisionMode::Standard),
        };
        let first_seed = optim.seed + (i * optim.seeds) as u64;
        let report = multi_seed(
            &plan,
            first_seed,
            &out.join(format!("{column}-{}", pt.label)),
            &mut manifest,
        )?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            pt.label, report.oa.mean, report.oa.std, report.aa.mean, report.aa.std, report.kappa.mean, report.kappa.std
        ));
    }
    let path = out.join("sweep.csv");
    fs::write(&path, csv)?;
    manifest.output(&path);
    manifest.finish(&out.join("manifest.json"))?;
    Ok(())
}

pub fn sweep_patch_cmd(a: &SweepPatchArgs) -> Result<()> {
    let points = a
        .patches
        .0
        .iter()
        .map(|&p| SweepPoint {
            label: p.to_string(),
            patch: p,
            train_frac: a.optim.train_frac,
        })
        .collect();
    let setup = SweepSetup {
        command: "sweep-patch",
        column: "patch",
        data: &a.data,
        model: &a.model,
        optim: &a.optim,
        common: &a.common,
    };
    sweep(setup, points, a)
}

pub fn sweep_ratio_cmd(a: &SweepRatioArgs) -> Result<()> {
    let points = a
        .fracs
        .0
        .iter()
        .map(|&f| SweepPoint {
            label: f.to_string(),
            patch: a.model.patch,
            train_frac: f,
        })
        .collect();
    let setup = SweepSetup {
        command: "sweep-ratio",
        column: "train_frac",
        data: &a.data,
        model: &a.model,
        optim: &a.optim,
        common: &a.common,
    };
    sweep(setup, points, a)
}
