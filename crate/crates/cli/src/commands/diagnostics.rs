use std::fs::File;
use std::io::{BufWriter, Write};

use anyhow::Result;
use serde::Serialize;
use smlw_core::data::Split;
use smlw_core::landscape::{
    eigen_distribution, hessian_samples, landscape_grid, make_directions, subset_indices, DatasetObjective,
    EigenEstimate, GridOptions, HessianOptions, PowerOptions,
};
use smlw_core::model::{complexity_report, SpectralVit};
use smlw_core::tensor::{PrecisionMode, Real};

use super::{ensure_dir, spec_from, with_precision, write_json, Restored};
use crate::args::{ComplexityArgs, HessianArgs, LandscapeArgs};
use crate::manifest::ManifestBuilder;

#[derive(Serialize)]
struct GridMeta<'a> {
    n: usize,
    seed: u64,
    cap: f64,
    subset: Option<usize>,
    samples: usize,
    weight_decay: f64,
    alpha: f64,
    base_loss: f64,
    w_values: &'a [f64],
    non_finite: &'a [(usize, usize)],
    saturated: &'a [(usize, usize)],
    precision: PrecisionMode,
}

fn landscape_typed<T: Real>(a: &LandscapeArgs, precision: PrecisionMode, manifest: &mut ManifestBuilder) -> Result<()> {
    let r = Restored::<T>::load(&a.ckpt.checkpoint, &a.ckpt.cube, &a.ckpt.gt)?;
    let set = r.patches(Split::Train)?;
    let model = SpectralVit::new(r.sidecar.spec.clone())?;
    let idx = subset_indices(set.len(), a.subset, a.seed);
    let samples = idx.len();
    let obj = DatasetObjective::new(&model, &set, idx, a.alpha)?;
    let pair = make_directions(&r.params, a.seed);
    let opts = GridOptions {
        cap: a.cap,
        weight_decay: a.weight_decay,
        parallel: !a.serial,
    };
    let grid = landscape_grid(&r.params, &pair, a.grid, |p| obj.loss(p), &opts)?;

    ensure_dir(&a.common.out)?;
    let csv = a.common.out.join("grid.csv");
    let mut w = BufWriter::new(File::create(&csv)?);
    grid.write_csv(&mut w)?;
    w.flush()?;
    let meta = a.common.out.join("grid.json");
    write_json(
        &meta,
        &GridMeta {
            n: grid.n,
            seed: a.seed,
            cap: grid.cap,
            subset: a.subset,
            samples,
            weight_decay: a.weight_decay,
            alpha: a.alpha,
            base_loss: grid.base_loss,
            w_values: &grid.w_values,
            non_finite: &grid.non_finite,
            saturated: &grid.saturated,
            precision,
        },
    )?;
    manifest.seed(a.seed);
    manifest.output(&csv);
    manifest.output(&meta);
    Ok(())
}

pub fn landscape_cmd(a: &LandscapeArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("landscape", a);
    manifest.input(&a.ckpt.checkpoint);
    manifest.input(&a.ckpt.cube);
    manifest.input(&a.ckpt.gt);
    let precision = a.common.precision.unwrap_or(PrecisionMode::Verify);
    with_precision!(precision, landscape_typed(a, precision, &mut manifest))?;
    manifest.finish(&a.common.out.join("manifest.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct EigenReport<'a> {
    samples: &'a [f64],
    bandwidth: f64,
    curve: &'a [[f64; 2]],
    integral: f64,
    estimates: &'a [EigenEstimate],
    batch_size: usize,
    seed: u64,
    precision: PrecisionMode,
}

fn hessian_typed<T: Real>(a: &HessianArgs, precision: PrecisionMode, manifest: &mut ManifestBuilder) -> Result<()> {
    let r = Restored::<T>::load(&a.ckpt.checkpoint, &a.ckpt.cube, &a.ckpt.gt)?;
    let set = r.patches(Split::Train)?;
    let model = SpectralVit::new(r.sidecar.spec.clone())?;
    let opts = HessianOptions {
        batches: a.batches,
        batch_size: a.batch_size,
        alpha: a.alpha,
        seed: a.seed,
        power: PowerOptions {
            tol: a.tol,
            max_iters: a.max_iters,
            seed: a.seed,
            hvp_eps: None,
        },
    };
    let estimates = hessian_samples(&model, &r.params, &set, &opts)?;
    let samples: Vec<f64> = estimates.iter().map(|e| e.lambda_max).collect();
    let kde = eigen_distribution(&samples, a.bandwidth.0)?;
    ensure_dir(&a.common.out)?;
    let path = a.common.out.join("eigen.json");
    write_json(
        &path,
        &EigenReport {
            samples: &kde.samples,
            bandwidth: kde.bandwidth,
            curve: &kde.curve,
            integral: kde.integral(),
            estimates: &estimates,
            batch_size: a.batch_size,
            seed: a.seed,
            precision,
        },
    )?;
    manifest.seed(a.seed);
    manifest.output(&path);
    Ok(())
}

pub fn hessian_cmd(a: &HessianArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("hessian", a);
    manifest.input(&a.ckpt.checkpoint);
    manifest.input(&a.ckpt.cube);
    manifest.input(&a.ckpt.gt);
    let precision = a.common.precision.unwrap_or(PrecisionMode::Verify);
    with_precision!(precision, hessian_typed(a, precision, &mut manifest))?;
    manifest.finish(&a.common.out.join("manifest.json"))?;
    Ok(())
}

pub fn complexity_cmd(a: &ComplexityArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("complexity", a);
    let spec = spec_from(&a.model, a.model.patch, a.bands, a.classes);
    let report = complexity_report(&spec, a.batch)?;
    ensure_dir(&a.out)?;
    let path = a.out.join("complexity.json");
    write_json(&path, &serde_json::json!({ "spec": spec, "report": report }))?;
    println!("{}", serde_json::to_string(&report)?);
    manifest.output(&path);
    manifest.finish(&a.out.join("manifest.json"))?;
    Ok(())
}
