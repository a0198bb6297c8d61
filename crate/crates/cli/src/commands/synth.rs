use anyhow::Result;
use smlw_core::data::{synth_generate, SynthConfig};

use super::ensure_dir;
use crate::args::SynthArgs;
use crate::manifest::ManifestBuilder;

pub fn synth_data(a: &SynthArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("synth-data", a);
    let cfg = SynthConfig {
        classes: a.classes,
        bands: a.bands,
        height: a.size.0,
        width: a.size.1,
        sigma: a.noise,
        seed: a.seed,
    };
    let (cube, gt) = synth_generate(&cfg)?;
    ensure_dir(&a.out)?;
    let cube_path = a.out.join("cube.hsc");
    let gt_path = a.out.join("gt.hsg");
    cube.save(&cube_path)?;
    gt.save(&gt_path)?;
    manifest.seed(a.seed);
    manifest.output(&cube_path);
    manifest.output(&gt_path);
    manifest.finish(&a.out.join("manifest.json"))?;
    log::info!("wrote {} and {}", cube_path.display(), gt_path.display());
    Ok(())
}
