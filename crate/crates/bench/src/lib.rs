//! Fixtures shared by the benchmarks under `benches/`.

use wildsplat::mask::OracleMasks;
use wildsplat::synth::{build_scene, render_gt, to_sfm_model, SynthScene, SynthSpec, ViewRef};
use wildsplat::trainer::Dataset;
use wildsplat::{Camera, GaussianField, ImageBuffer, Result};

/// The default 48×48 synthetic scene.
pub fn scene() -> Result<SynthScene> {
    build_scene(&SynthSpec::default())
}

/// Ground-truth field, first training camera and its observed image.
pub fn view(scene: &SynthScene) -> Result<(GaussianField, Camera, ImageBuffer)> {
    let cam = scene.train_cameras[0].clone();
    Ok((scene.gt_field.clone(), cam, render_gt(scene, ViewRef::Train(0))?))
}

pub fn dataset(scene: &SynthScene) -> Result<(Dataset, OracleMasks)> {
    let sfm = to_sfm_model(scene, 0.5, 0.02, scene.spec.seed)?;
    Ok((Dataset::from_scene(scene, sfm)?, OracleMasks::from_scene(scene)?))
}
