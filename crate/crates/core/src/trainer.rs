//! The optimization loop.
//!
//! Each iteration renders a training view and a reference view, asks the mask
//! provider which pixels are transient, refines the render against the
//! reference, and combines a masked ground-truth loss, a loss against the
//! refined render and, after warm-up, a pseudo-view loss and score
//! distillation. Gaussians and the refiner's adapter are updated together.
//! Replication and density control run on a fixed cadence once the pseudo
//! phase has begun.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::colmap::{init_field, parse_sfm, InitOptions, SfmFormat, SfmModel};
use crate::density::{densify_and_prune, sagr_replicate, AdcReport, DensifyStats, DensityConfig, FieldEdit, ViewStats};
use crate::error::{Error, Result};
use crate::io::{load_gray_png, load_png, save_ply, TensorFile};
use crate::losses::{opacity_weights, psnr, ssim, static_weights, weighted_photometric_grad, DEFAULT_LAMBDA, DEFAULT_OPACITY_FLOOR};
use crate::mask::{MaskProvider, MaskRequest, ProviderKind, ViewKind, DEFAULT_PROMPT};
use crate::raster::{backward, render, FieldGradients, RenderOutput, RenderSettings};
use crate::refiner::{sds_loss, LoraGrad, Refiner, RefinerConfig, TIMESTEPS};
use crate::scene::{Camera, Gaussian, GaussianField, ImageBuffer, ScalarMap, TransientMask};
use crate::synth::{interpolate_pose, read_manifest, render_gt, oracle_mask, test_image_name, train_image_name, SynthScene, ViewRef};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    pub position_final: f64,
    /// DC color coefficients; higher-order SH use a twentieth of this.
    pub sh: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub lora: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates { position: 1.6e-4, position_final: 1.6e-6, sh: 2.5e-3, opacity: 0.05, scale: 5e-3, rotation: 1e-3, lora: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ground_truth: f64,
    pub photo: f64,
    pub pseudo: f64,
    /// Score distillation on the training-view render.
    pub sds_train: f64,
    /// Score distillation on the pseudo-view render.
    pub sds_pseudo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ground_truth: 1.0, photo: 1.0, pseudo: 1.0, sds_train: 0.0, sds_pseudo: 0.02 }
    }
}

/// Image the transient mask is computed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    GroundTruth,
    Render,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub warmup_iters: u64,
    pub replication_cadence: u64,
    pub seed: u64,
    pub lambda: f64,
    pub lr: LearningRates,
    /// Multiplier on the position rate; derived from the camera spread when
    /// unset.
    pub position_lr_scale: Option<f64>,
    pub weights: LossWeights,
    pub provider: ProviderKind,
    pub prompt: String,
    pub ground_truth_mask: MaskSource,
    pub refine_mask: MaskSource,
    pub refine: bool,
    pub refiner: RefinerConfig,
    pub sagr: bool,
    pub densify: bool,
    pub density: DensityConfig,
    pub pseudo_opacity_floor: f64,
    pub sds_t_min: usize,
    pub sds_t_max: usize,
    pub init: InitOptions,
    pub background: [f64; 3],
    pub eval_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 3000,
            warmup_iters: 750,
            replication_cadence: 500,
            seed: 0,
            lambda: DEFAULT_LAMBDA,
            lr: LearningRates::default(),
            position_lr_scale: None,
            weights: LossWeights::default(),
            provider: ProviderKind::Oracle,
            prompt: DEFAULT_PROMPT.to_string(),
            ground_truth_mask: MaskSource::GroundTruth,
            refine_mask: MaskSource::Render,
            refine: true,
            refiner: RefinerConfig::default(),
            sagr: true,
            densify: true,
            density: DensityConfig::default(),
            pseudo_opacity_floor: DEFAULT_OPACITY_FLOOR,
            sds_t_min: 20,
            sds_t_max: 980,
            init: InitOptions::default(),
            background: [0.0; 3],
            eval_every: 500,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_iters == 0 {
            return bad("total_iters must be positive");
        }
        if self.warmup_iters >= self.total_iters {
            return bad("warmup_iters must be smaller than total_iters");
        }
        if self.replication_cadence == 0 {
            return bad("replication_cadence must be positive");
        }
        let lr = &self.lr;
        if [lr.position, lr.position_final, lr.sh, lr.opacity, lr.scale, lr.rotation, lr.lora].iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return bad("all learning rates must be positive");
        }
        if let Some(s) = self.position_lr_scale {
            if !(s > 0.0) {
                return bad("position_lr_scale must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        let w = &self.weights;
        if [w.ground_truth, w.photo, w.pseudo, w.sds_train, w.sds_pseudo].iter().any(|v| !(*v >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if !(self.pseudo_opacity_floor > 0.0) {
            return bad("pseudo_opacity_floor must be positive");
        }
        if self.sds_t_min >= self.sds_t_max || self.sds_t_max > TIMESTEPS {
            return bad("SDS timestep range must satisfy t_min < t_max <= 1000");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        self.refiner.validate()
    }
}

pub fn is_pseudo_phase(i: u64, config: &TrainConfig) -> bool {
    i >= config.warmup_iters
}

pub fn is_replication(i: u64, config: &TrainConfig) -> bool {
    is_pseudo_phase(i, config) && i % config.replication_cadence == 0
}

/// Uniform over views other than `current`.
pub fn select_reference_view(current: usize, n_views: usize, rng: &mut impl Rng) -> Result<usize> {
    if n_views < 2 || current >= n_views {
        return Err(Error::InvalidInput(format!("cannot pick a reference for view {current} of {n_views}")));
    }
    let r = rng.random_range(0..n_views - 1);
    Ok(if r >= current { r + 1 } else { r })
}

/// A view distinct from both `i` and `j`, or `j` when only two views exist.
pub fn select_pseudo_partner(i: usize, j: usize, n_views: usize, rng: &mut impl Rng) -> Result<usize> {
    if n_views < 3 {
        return select_reference_view(i, n_views, rng).map(|_| j);
    }
    let (lo, hi) = (i.min(j), i.max(j));
    let mut r = rng.random_range(0..n_views - 2);
    if r >= lo {
        r += 1;
    }
    if r >= hi {
        r += 1;
    }
    Ok(r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    pub image: ImageBuffer,
}

/// Training and held-out views plus the sparse reconstruction used to
/// initialize the field.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub sfm: SfmModel,
    /// Exact transient masks per training view, when known.
    pub oracle_masks: Option<Vec<TransientMask>>,
}

impl Dataset {
    pub fn from_scene(scene: &SynthScene, sfm: SfmModel) -> Result<Self> {
        let train = (0..scene.train_cameras.len())
            .map(|i| {
                Ok(View { name: train_image_name(i), camera: scene.train_cameras[i].clone(), image: render_gt(scene, ViewRef::Train(i))? })
            })
            .collect::<Result<_>>()?;
        let test = (0..scene.test_cameras.len())
            .map(|i| Ok(View { name: test_image_name(i), camera: scene.test_cameras[i].clone(), image: render_gt(scene, ViewRef::Test(i))? }))
            .collect::<Result<_>>()?;
        let masks = (0..scene.train_cameras.len()).map(|i| oracle_mask(scene, i)).collect::<Result<_>>()?;
        let ds = Dataset { train, test, sfm, oracle_masks: Some(masks) };
        ds.validate()?;
        Ok(ds)
    }

    /// Loads a directory written by scene export.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let sparse = dir.join("sparse/0");
        let format = if sparse.join("cameras.bin").exists() { SfmFormat::Binary } else { SfmFormat::Text };
        let sfm = parse_sfm(&sparse, format)?;
        let load_views = |views: &[crate::synth::ManifestView], sub: &str| -> Result<Vec<View>> {
            views
                .iter()
                .map(|v| Ok(View { name: v.name.clone(), camera: v.camera.clone(), image: load_png(&dir.join(sub).join(&v.name))? }))
                .collect()
        };
        let train = load_views(&manifest.train, "images")?;
        let test = load_views(&manifest.test, "test")?;
        let masks = if dir.join("masks").is_dir() {
            Some(manifest.train.iter().map(|v| TransientMask::new(load_gray_png(&dir.join("masks").join(&v.name))?)).collect::<Result<_>>()?)
        } else {
            None
        };
        let ds = Dataset { train, test, sfm, oracle_masks: masks };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.len() < 2 {
            return Err(Error::InvalidInput(format!("training needs at least 2 views, got {}", self.train.len())));
        }
        for v in self.train.iter().chain(&self.test) {
            v.camera.validate()?;
            if v.image.width != v.camera.width || v.image.height != v.camera.height {
                return Err(Error::InvalidInput(format!("image {} does not match its camera size", v.name)));
            }
        }
        if let Some(m) = &self.oracle_masks {
            if m.len() != self.train.len() {
                return Err(Error::InvalidInput("one oracle mask per training view required".into()));
            }
        }
        Ok(())
    }

    /// 1.1 × the largest distance of a training camera from their centroid.
    pub fn camera_extent(&self) -> f64 {
        let centers: Vec<Vector3<f64>> = self.train.iter().map(|v| v.camera.center()).collect();
        let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
        1.1 * centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max)
    }
}

/// Adam with per-Gaussian moments and step counts. Gaussians that receive an
/// all-zero gradient are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldOptimizer {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

impl FieldOptimizer {
    pub fn new(field: &GaussianField) -> Self {
        let p = field.gaussians.first().map_or(0, |g| g.to_params().len());
        let n = field.len();
        FieldOptimizer { m: vec![vec![0.0; p]; n], v: vec![vec![0.0; p]; n], steps: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// New Gaussians start with zero moments.
    pub fn apply_edit(&mut self, edit: &FieldEdit, n_params: usize) {
        let zeros = vec![0.0; n_params];
        self.m = edit.remap(&self.m, zeros.clone());
        self.v = edit.remap(&self.v, zeros);
        self.steps = edit.remap(&self.steps, 0);
    }

    pub fn step(&mut self, field: &mut GaussianField, grads: &FieldGradients, lrs: &[f64]) -> Result<()> {
        if grads.gaussians.len() != field.len() || self.len() != field.len() {
            return Err(Error::InvalidState("optimizer state is out of sync with the field".into()));
        }
        let sh_degree = field.sh_degree;
        field.gaussians.par_iter_mut().zip(&grads.gaussians).zip(self.m.par_iter_mut().zip(self.v.par_iter_mut()).zip(self.steps.par_iter_mut())).try_for_each(
            |((g, grad), ((m, v), step))| -> Result<()> {
                let flat = grad.to_flat();
                if flat.iter().all(|x| *x == 0.0) {
                    return Ok(());
                }
                *step += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*step as i32);
                let mut p = g.to_params();
                for k in 0..p.len() {
                    m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * flat[k];
                    v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * flat[k] * flat[k];
                    p[k] -= lrs[k] * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
                }
                *g = Gaussian::from_params(&p)?;
                debug_assert_eq!(g.sh.len(), crate::scene::sh_coeff_count(sh_degree));
                Ok(())
            },
        )
    }
}

/// Log-linear interpolation from the initial to the final position rate.
pub fn position_lr(i: u64, config: &TrainConfig) -> f64 {
    let t = (i as f64 / config.total_iters as f64).clamp(0.0, 1.0);
    ((1.0 - t) * config.lr.position.ln() + t * config.lr.position_final.ln()).exp()
}

fn parameter_rates(i: u64, config: &TrainConfig, position_scale: f64, n_params: usize) -> Vec<f64> {
    let lr = &config.lr;
    let mut rates = vec![lr.sh / 20.0; n_params];
    rates[..3].fill(position_lr(i, config) * position_scale);
    rates[3..6].fill(lr.scale);
    rates[6..10].fill(lr.rotation);
    rates[10] = lr.opacity;
    rates[11..14].fill(lr.sh);
    rates
}

/// Everything that evolves during training and must survive a resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Number of completed iterations.
    pub iteration: u64,
    pub field: GaussianField,
    pub optimizer: FieldOptimizer,
    pub refiner: Refiner,
    pub stats: DensifyStats,
    pub rng: ChaCha8Rng,
    pub order: Vec<usize>,
    pub cursor: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ground_truth: f64,
    pub photo: f64,
    pub pseudo: f64,
    pub sds: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicationReport {
    pub sagr_added: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub iteration: u64,
    pub view: usize,
    pub reference: usize,
    pub pseudo_partner: Option<usize>,
    pub pseudo_rendered: bool,
    pub loss: LossBreakdown,
    pub gaussians: usize,
    pub replication: Option<ReplicationReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// PSNR and SSIM of renders of `field` against each view's image.
pub fn evaluate(field: &GaussianField, views: &[View], background: [f64; 3]) -> Result<EvalReport> {
    let settings = RenderSettings { background };
    let per_view: Vec<ViewMetrics> = views
        .par_iter()
        .map(|v| {
            let img = if field.is_empty() {
                ImageBuffer::filled(v.camera.width, v.camera.height, background)
            } else {
                render(field, &v.camera, &settings)?.image
            };
            Ok(ViewMetrics { name: v.name.clone(), psnr: psnr(&img, &v.image, 1.0)?, ssim: ssim(&img, &v.image)?.0 })
        })
        .collect::<Result<_>>()?;
    let n = per_view.len().max(1) as f64;
    Ok(EvalReport {
        mean_psnr: per_view.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_ssim: per_view.iter().map(|v| v.ssim).sum::<f64>() / n,
        views: per_view,
    })
}

/// Fraction of training-view pixels with accumulated opacity below
/// `threshold`, and the median accumulated opacity over those pixels.
pub fn coverage(field: &GaussianField, views: &[View], threshold: f64) -> Result<(f64, f64)> {
    let mut all = Vec::new();
    for v in views {
        all.extend(crate::raster::render_opacity(field, &v.camera)?.values);
    }
    if all.is_empty() {
        return Ok((0.0, 0.0));
    }
    let sparse = all.iter().filter(|d| **d < threshold).count() as f64 / all.len() as f64;
    all.sort_by(f64::total_cmp);
    Ok((sparse, all[all.len() / 2]))
}

/// JSON-lines metrics, kept in memory and optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub lines: Vec<String>,
    writer: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `path` for appending. With `resume_at`, records stamped after
    /// that iteration are dropped first so a resumed run continues cleanly.
    pub fn open(path: &Path, resume_at: Option<u64>) -> Result<Self> {
        let mut lines = Vec::new();
        if let (Some(k), true) = (resume_at, path.exists()) {
            for line in std::fs::read_to_string(path)?.lines() {
                let iter = serde_json::from_str::<serde_json::Value>(line).ok().and_then(|v| v.get("iter").and_then(|i| i.as_u64()));
                if iter.is_some_and(|i| i <= k) {
                    lines.push(line.to_string());
                }
            }
        }
        let mut file = BufWriter::new(File::create(path)?);
        for l in &lines {
            writeln!(file, "{l}")?;
        }
        file.flush()?;
        Ok(MetricsLog { lines, writer: Some(file) })
    }

    pub fn push(&mut self, record: serde_json::Value) -> Result<()> {
        let line = record.to_string();
        if let Some(w) = &mut self.writer {
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        self.lines.push(line);
        Ok(())
    }
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub state: TrainState,
    pub log: MetricsLog,
    dataset: &'a Dataset,
    provider: &'a dyn MaskProvider,
    settings: RenderSettings,
    position_scale: f64,
    gt_masks: Vec<Option<TransientMask>>,
    checkpoint_dir: Option<PathBuf>,
    dump_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset, provider: &'a dyn MaskProvider) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let field = init_field(&dataset.sfm, &config.init)?;
        let refiner = Refiner::new(config.refiner.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut rng);
        let state = TrainState {
            iteration: 0,
            optimizer: FieldOptimizer::new(&field),
            stats: DensifyStats::new(field.len(), dataset.train.len()),
            field,
            refiner,
            rng,
            order,
            cursor: 0,
        };
        Self::with_state(config, dataset, provider, state)
    }

    pub fn with_state(config: TrainConfig, dataset: &'a Dataset, provider: &'a dyn MaskProvider, state: TrainState) -> Result<Self> {
        config.validate()?;
        if state.order.len() != dataset.train.len() || state.stats.views.len() != dataset.train.len() {
            return Err(Error::InvalidState("training state does not match the dataset".into()));
        }
        let position_scale = config.position_lr_scale.unwrap_or_else(|| dataset.camera_extent().max(1e-6));
        Ok(Trainer {
            settings: RenderSettings { background: config.background },
            config,
            state,
            log: MetricsLog::in_memory(),
            dataset,
            provider,
            position_scale,
            gt_masks: vec![None; dataset.train.len()],
            checkpoint_dir: None,
            dump_dir: None,
        })
    }

    pub fn with_log(mut self, log: MetricsLog) -> Self {
        self.log = log;
        self
    }

    /// Writes a checkpoint under `dir/iter_NNNNNN` at every evaluation.
    pub fn with_checkpoints(mut self, dir: PathBuf) -> Self {
        self.checkpoint_dir = Some(dir);
        self
    }

    /// Where to dump the offending render and field if training diverges.
    pub fn with_dump_dir(mut self, dir: PathBuf) -> Self {
        self.dump_dir = Some(dir);
        self
    }

    fn next_view(&mut self) -> usize {
        if self.state.cursor == self.state.order.len() {
            self.state.order.shuffle(&mut self.state.rng);
            self.state.cursor = 0;
        }
        let v = self.state.order[self.state.cursor];
        self.state.cursor += 1;
        v
    }

    fn mask(&mut self, source: MaskSource, view: usize, rendered: &ImageBuffer) -> Result<TransientMask> {
        let request = |image| MaskRequest { image, prompt: &self.config.prompt, view: ViewKind::Train(view) };
        match source {
            MaskSource::Render => self.provider.get_mask(&request(rendered)),
            MaskSource::GroundTruth => {
                if self.gt_masks[view].is_none() {
                    let m = self.provider.get_mask(&request(&self.dataset.train[view].image))?;
                    self.gt_masks[view] = Some(m);
                }
                Ok(self.gt_masks[view].clone().expect("cached above"))
            }
        }
    }

    fn diverged(&self, iteration: u64, view: &str, message: String, render: Option<&ImageBuffer>) -> Error {
        if let Some(dir) = &self.dump_dir {
            let dump = || -> Result<()> {
                std::fs::create_dir_all(dir)?;
                save_ply(&dir.join("field.ply"), &self.state.field)?;
                if let Some(img) = render {
                    crate::io::save_png(&dir.join(format!("{view}_iter{iteration}.png")), &img.clamped())?;
                }
                Ok(())
            };
            if let Err(e) = dump() {
                log::error!("could not write divergence dump: {e}");
            }
        }
        Error::Divergence { iteration, view: view.to_string(), message }
    }

    fn render(&self, camera: &Camera) -> Result<RenderOutput> {
        render(&self.state.field, camera, &self.settings)
    }

    /// Runs one iteration and returns what happened.
    pub fn step(&mut self) -> Result<StepReport> {
        let i = self.state.iteration;
        let cfg = self.config.clone();
        let n_views = self.dataset.train.len();
        if self.state.field.is_empty() {
            return Err(Error::InvalidState("the field has no Gaussians left".into()));
        }
        let v = self.next_view();
        let j = select_reference_view(v, n_views, &mut self.state.rng)?;
        let view = &self.dataset.train[v];
        let out = self.render(&view.camera)?;
        let out_ref = if cfg.refine { Some(self.render(&self.dataset.train[j].camera)?) } else { None };

        let mut loss = LossBreakdown::default();
        let mut lora = LoraGradSum::default();

        let gt_mask = self.mask(cfg.ground_truth_mask, v, &out.image)?;
        let (l_gt, g_gt) = weighted_photometric_grad(&out.image, &view.image, cfg.lambda, Some(&static_weights(&gt_mask)))?;
        loss.ground_truth = l_gt;
        let mut d_view: Vec<f64> = g_gt.iter().map(|g| cfg.weights.ground_truth * g).collect();

        // The refined render is a fixed target for the field; only the adapter
        // sees the gradient through it.
        let mut refine_ctx = None;
        if let Some(out_ref) = &out_ref {
            let refine_mask = if cfg.refine_mask == cfg.ground_truth_mask { gt_mask.clone() } else { self.mask(cfg.refine_mask, v, &out.image)? };
            let (refined, pred) = self.state.refiner.refine_with_cache(&out.image, &out_ref.image, &refine_mask)?;
            let (l_photo, g_photo) = weighted_photometric_grad(&out.image, &refined, cfg.lambda, None)?;
            loss.photo = l_photo;
            for (d, g) in d_view.iter_mut().zip(&g_photo) {
                *d += cfg.weights.photo * g;
            }
            if cfg.weights.photo > 0.0 {
                let (_, g_target) = weighted_photometric_grad(&refined, &out.image, cfg.lambda, None)?;
                let g_target: Vec<f64> = g_target.iter().map(|g| cfg.weights.photo * g).collect();
                lora.add(self.state.refiner.lora_grad_from_refined(&refined, &pred, &out.image, &g_target)?);
            }
            if cfg.weights.sds_train > 0.0 {
                let (l_sds, d_img, g) = self.sds(&out.image, &refined, cfg.weights.sds_train)?;
                loss.sds += l_sds;
                for (d, s) in d_view.iter_mut().zip(&d_img) {
                    *d += s;
                }
                lora.add(g);
            }
            refine_ctx = Some((refined, refine_mask, out_ref));
        }

        let mut grads = backward(&self.state.field, &view.camera, &out, &d_view, &vec![0.0; out.image.pixel_count()])?;
        let view_position_grads: Vec<Vector3<f64>> = grads.gaussians.iter().map(|g| g.position).collect();

        let mut pseudo_partner = None;
        let mut pseudo_rendered = false;
        let mut pseudo_image = None;
        if is_pseudo_phase(i, &cfg) {
            if let Some((refined, refine_mask, out_ref)) = &refine_ctx {
                let k = select_pseudo_partner(v, j, n_views, &mut self.state.rng)?;
                pseudo_partner = Some(k);
                let t = self.state.rng.random_range(0.3..0.7);
                let camera = interpolate_pose(&view.camera, &self.dataset.train[k].camera, t)?;
                let out_p = self.render(&camera)?;
                pseudo_rendered = true;
                let label = self.state.refiner.refine(&out_p.image, &out_ref.image, refine_mask)?;
                let weights = opacity_weights(&out_p.opacity, cfg.pseudo_opacity_floor);
                let (l_pseudo, g_pseudo) = weighted_photometric_grad(&out_p.image, &label, cfg.lambda, Some(&weights))?;
                loss.pseudo = l_pseudo;
                let mut d_pseudo: Vec<f64> = g_pseudo.iter().map(|g| cfg.weights.pseudo * g).collect();
                if cfg.weights.sds_pseudo > 0.0 {
                    let (l_sds, d_img, g) = self.sds(&out_p.image, refined, cfg.weights.sds_pseudo)?;
                    loss.sds += l_sds;
                    for (d, s) in d_pseudo.iter_mut().zip(&d_img) {
                        *d += s;
                    }
                    lora.add(g);
                }
                let g_p = backward(&self.state.field, &camera, &out_p, &d_pseudo, &vec![0.0; out_p.image.pixel_count()])?;
                grads.add_assign(&g_p);
                pseudo_image = Some(out_p.image);
            }
        }

        let w = &cfg.weights;
        loss.total = w.ground_truth * loss.ground_truth + w.photo * loss.photo + w.pseudo * loss.pseudo + loss.sds;
        let finite_grads = grads.gaussians.iter().all(|g| g.to_flat().iter().all(|x| x.is_finite()));
        if !loss.total.is_finite() || !finite_grads {
            let msg = if finite_grads { format!("non-finite loss {:?}", loss) } else { "non-finite gradient".to_string() };
            let img = pseudo_image.as_ref().unwrap_or(&out.image);
            return Err(self.diverged(i, &view.name, msg, Some(img)));
        }

        self.state.stats.record_step(v, &out.opacity, &out.depth, &view_position_grads, &cfg.density)?;
        let n_params = self.state.field.gaussians[0].to_params().len();
        let rates = parameter_rates(i, &cfg, self.position_scale, n_params);
        self.state.optimizer.step(&mut self.state.field, &grads, &rates)?;
        if !self.state.field.all_finite() {
            return Err(self.diverged(i, &view.name, "parameters became non-finite".into(), Some(&out.image)));
        }
        if let Some(g) = lora.total {
            self.state.refiner.lora_step(&g, cfg.lr.lora)?;
        }

        let replication = if is_replication(i, &cfg) { Some(self.replicate()?) } else { None };
        self.state.iteration += 1;
        let report = StepReport {
            iteration: i,
            view: v,
            reference: j,
            pseudo_partner,
            pseudo_rendered,
            loss,
            gaussians: self.state.field.len(),
            replication,
        };
        self.record(&report)?;
        Ok(report)
    }

    /// Score distillation against `reference`; returns the loss, the image
    /// gradient and the adapter gradient, all scaled by `weight`.
    fn sds(&mut self, image: &ImageBuffer, reference: &ImageBuffer, weight: f64) -> Result<(f64, Vec<f64>, LoraGrad)> {
        let t = self.state.rng.random_range(self.config.sds_t_min..self.config.sds_t_max);
        let noise: Vec<f64> = (0..image.rgb.len()).map(|_| StandardNormal.sample(&mut self.state.rng)).collect();
        let refiner = &self.state.refiner;
        let out = sds_loss(refiner, image, reference, t, &noise, &refiner.schedule)?;
        let n = out.residual.len() as f64;
        let d_image = out.d_image.iter().map(|g| weight * g / n).collect();
        let d_eps: Vec<f64> = out.residual.iter().map(|r| weight * 2.0 * r / n).collect();
        let lora = refiner.lora_grad(&out.prediction, &d_eps, image.width)?;
        Ok((weight * out.loss, d_image, lora))
    }

    fn replicate(&mut self) -> Result<ReplicationReport> {
        let cfg = self.config.clone();
        let n_params = self.state.field.gaussians[0].to_params().len();
        let mut report = ReplicationReport { sagr_added: 0, cloned: 0, split: 0, pruned: 0 };
        let cameras: Vec<Camera> = self.dataset.train.iter().map(|v| v.camera.clone()).collect();
        if cfg.sagr {
            let (field, edit, r) = sagr_replicate(&self.state.field, &self.state.stats, &cameras, &cfg.density, &mut self.state.rng)?;
            report.sagr_added = r.added;
            self.apply_edit(field, &edit, n_params);
        }
        if cfg.densify {
            let (field, edit, AdcReport { cloned, split, pruned }) = densify_and_prune(&self.state.field, &self.state.stats, &cfg.density, &mut self.state.rng)?;
            report.cloned = cloned;
            report.split = split;
            report.pruned = pruned;
            self.apply_edit(field, &edit, n_params);
            self.state.stats.reset_gradients(self.state.field.len());
        }
        log::info!(
            "iteration {}: replication added {}, cloned {}, split {}, pruned {} -> {} Gaussians",
            self.state.iteration,
            report.sagr_added,
            report.cloned,
            report.split,
            report.pruned,
            self.state.field.len()
        );
        Ok(report)
    }

    fn apply_edit(&mut self, field: GaussianField, edit: &FieldEdit, n_params: usize) {
        self.state.field = field;
        self.state.optimizer.apply_edit(edit, n_params);
        self.state.stats.apply_edit(edit);
    }

    fn record(&mut self, report: &StepReport) -> Result<()> {
        let done = self.state.iteration;
        if done % self.config.log_every == 0 || report.replication.is_some() {
            self.log.push(json!({
                "kind": "step",
                "iter": done,
                "view": report.view,
                "reference": report.reference,
                "pseudo": report.pseudo_rendered,
                "loss": report.loss,
                "gaussians": report.gaussians,
                "replication": report.replication,
            }))?;
        }
        let eval_due = self.config.eval_every > 0 && done % self.config.eval_every == 0;
        if eval_due || done == self.config.total_iters {
            self.evaluate_and_log()?;
            if let Some(dir) = self.checkpoint_dir.clone() {
                save_checkpoint(&dir.join(format!("iter_{done:06}")), &self.state, &self.config)?;
            }
        }
        Ok(())
    }

    pub fn evaluate_and_log(&mut self) -> Result<EvalReport> {
        let report = evaluate(&self.state.field, &self.dataset.test, self.config.background)?;
        self.log.push(json!({
            "kind": "eval",
            "iter": self.state.iteration,
            "mean_psnr": report.mean_psnr,
            "mean_ssim": report.mean_ssim,
            "views": report.views,
        }))?;
        log::info!("iteration {}: test PSNR {:.3} dB, SSIM {:.4}", self.state.iteration, report.mean_psnr, report.mean_ssim);
        Ok(report)
    }

    /// Trains until `total_iters`.
    pub fn run(&mut self) -> Result<()> {
        while self.state.iteration < self.config.total_iters {
            let report = self.step()?;
            if report.iteration % 100 == 0 {
                log::debug!("iteration {}: loss {:.5}, {} Gaussians", report.iteration, report.loss.total, report.gaussians);
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct LoraGradSum {
    total: Option<LoraGrad>,
}

impl LoraGradSum {
    fn add(&mut self, g: LoraGrad) {
        match &mut self.total {
            Some(t) => {
                t.a += g.a;
                t.b += g.b;
            }
            None => self.total = Some(g),
        }
    }
}

/// Trains from scratch and returns the final state and metrics log.
pub fn train(dataset: &Dataset, config: TrainConfig, provider: &dyn MaskProvider) -> Result<(TrainState, MetricsLog)> {
    let mut trainer = Trainer::new(config, dataset, provider)?;
    trainer.run()?;
    Ok((trainer.state, trainer.log))
}

const STATE_FILE: &str = "state.safetensors";
const REFINER_FILE: &str = "refiner.safetensors";
const FIELD_FILE: &str = "field.ply";

fn map_tensor(tf: &mut TensorFile, name: String, m: &ScalarMap) {
    tf.insert(name, vec![m.height, m.width], m.values.clone());
}

/// Writes `field.ply`, the refiner weights and the exact optimizer state.
pub fn save_checkpoint(dir: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_ply(&dir.join(FIELD_FILE), &state.field)?;
    state.refiner.save(&dir.join(REFINER_FILE))?;
    let n = state.field.len();
    let p = state.field.gaussians.first().map_or(0, |g| g.to_params().len());
    let mut tf = TensorFile::default();
    tf.insert("field", vec![n, p], state.field.gaussians.iter().flat_map(|g| g.to_params()).collect());
    tf.insert("adam.m", vec![n, p], state.optimizer.m.concat());
    tf.insert("adam.v", vec![n, p], state.optimizer.v.concat());
    tf.insert_vec("adam.steps", state.optimizer.steps.iter().map(|s| *s as f64).collect());
    tf.insert_vec("stats.grad_norm_sum", state.stats.grad_norm_sum.clone());
    tf.insert("stats.grad_sum", vec![n, 3], state.stats.grad_sum.iter().flat_map(|g| g.iter().copied()).collect());
    tf.insert_vec("stats.count", state.stats.count.iter().map(|c| *c as f64).collect());
    for (v, vs) in state.stats.views.iter().enumerate() {
        if let Some(vs) = vs {
            map_tensor(&mut tf, format!("view.{v}.sparsity"), &vs.sparsity);
            map_tensor(&mut tf, format!("view.{v}.opacity"), &vs.opacity);
            map_tensor(&mut tf, format!("view.{v}.depth"), &vs.depth);
            tf.metadata.insert(format!("view.{v}.observations"), vs.observations.to_string());
        }
    }
    let seed: String = state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    let meta = [
        ("iteration", state.iteration.to_string()),
        ("sh_degree", state.field.sh_degree.to_string()),
        ("views", state.stats.views.len().to_string()),
        ("order", serde_json::to_string(&state.order).expect("plain integers serialize")),
        ("cursor", state.cursor.to_string()),
        ("rng.seed", seed),
        ("rng.stream", state.rng.get_stream().to_string()),
        ("rng.word_pos", state.rng.get_word_pos().to_string()),
        ("config", serde_json::to_string(config).map_err(|e| Error::Config(e.to_string()))?),
    ];
    for (k, v) in meta {
        tf.metadata.insert(k.to_string(), v);
    }
    tf.save(&dir.join(STATE_FILE))
}

fn parse_meta<T: std::str::FromStr>(tf: &TensorFile, key: &str) -> Result<T> {
    tf.meta(key)?.parse().map_err(|_| Error::InvalidInput(format!("checkpoint metadata '{key}' is malformed")))
}

fn rows(data: &[f64], n: usize, p: usize, name: &str) -> Result<Vec<Vec<f64>>> {
    if data.len() != n * p {
        return Err(Error::InvalidInput(format!("checkpoint tensor '{name}' has {} values, expected {}", data.len(), n * p)));
    }
    Ok(if p == 0 { vec![Vec::new(); n] } else { data.chunks_exact(p).map(<[f64]>::to_vec).collect() })
}

/// Loads a checkpoint written by [`save_checkpoint`], with the configuration
/// it was saved under.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, TrainConfig)> {
    let path = dir.join(STATE_FILE);
    if !path.exists() {
        return Err(Error::NotFound(path));
    }
    let tf = TensorFile::load(&path)?;
    let config: TrainConfig = serde_json::from_str(tf.meta("config")?).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
    let (shape, data) = tf.tensors.get("field").ok_or_else(|| Error::InvalidInput("checkpoint has no field tensor".into()))?;
    let (n, p) = match shape.as_slice() {
        [n, p] => (*n, *p),
        _ => return Err(Error::InvalidInput("field tensor must be two-dimensional".into())),
    };
    let mut field = GaussianField::new(parse_meta(&tf, "sh_degree")?);
    for row in rows(data, n, p, "field")? {
        field.gaussians.push(Gaussian::from_params(&row)?);
    }
    field.validate()?;
    let optimizer = FieldOptimizer {
        m: rows(tf.get("adam.m")?, n, p, "adam.m")?,
        v: rows(tf.get("adam.v")?, n, p, "adam.v")?,
        steps: tf.get("adam.steps")?.iter().map(|s| *s as u64).collect(),
    };
    let n_views: usize = parse_meta(&tf, "views")?;
    let mut stats = DensifyStats::new(n, n_views);
    stats.grad_norm_sum = tf.get("stats.grad_norm_sum")?.to_vec();
    stats.grad_sum = rows(tf.get("stats.grad_sum")?, n, 3, "stats.grad_sum")?.into_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect();
    stats.count = tf.get("stats.count")?.iter().map(|c| *c as u64).collect();
    if optimizer.steps.len() != n || stats.grad_norm_sum.len() != n || stats.count.len() != n {
        return Err(Error::InvalidInput("checkpoint per-Gaussian tensors disagree in length".into()));
    }
    for v in 0..n_views {
        let Some((shape, _)) = tf.tensors.get(&format!("view.{v}.sparsity")) else { continue };
        let (h, w) = (shape[0], shape[1]);
        let map = |name: &str| -> Result<ScalarMap> { Ok(ScalarMap { width: w, height: h, values: tf.get(&format!("view.{v}.{name}"))?.to_vec() }) };
        stats.views[v] = Some(ViewStats {
            sparsity: map("sparsity")?,
            opacity: map("opacity")?,
            depth: map("depth")?,
            observations: parse_meta(&tf, &format!("view.{v}.observations"))?,
        });
    }
    let seed_hex = tf.meta("rng.seed")?;
    let mut seed = [0u8; 32];
    if seed_hex.len() != 64 {
        return Err(Error::InvalidInput("checkpoint RNG seed is malformed".into()));
    }
    for (k, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed_hex[2 * k..2 * k + 2], 16).map_err(|_| Error::InvalidInput("checkpoint RNG seed is malformed".into()))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(parse_meta(&tf, "rng.stream")?);
    rng.set_word_pos(parse_meta(&tf, "rng.word_pos")?);
    let order: Vec<usize> = serde_json::from_str(tf.meta("order")?).map_err(|_| Error::InvalidInput("checkpoint view order is malformed".into()))?;
    let state = TrainState {
        iteration: parse_meta(&tf, "iteration")?,
        field,
        optimizer,
        refiner: Refiner::load(&dir.join(REFINER_FILE))?,
        stats,
        rng,
        cursor: parse_meta(&tf, "cursor")?,
        order,
    };
    Ok((state, config))
}

/// The checkpoint directory with the highest iteration under `root`.
pub fn latest_checkpoint(root: &Path) -> Result<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    if root.is_dir() {
        for entry in std::fs::read_dir(root)? {
            let path = entry?.path();
            let iter = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("iter_")).and_then(|n| n.parse::<u64>().ok());
            if let Some(it) = iter {
                if path.join(STATE_FILE).exists() && best.as_ref().is_none_or(|(b, _)| it > *b) {
                    best = Some((it, path));
                }
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| Error::NotFound(root.join("iter_*")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colmap::{CameraModel, CameraRecord, ImageRecord, Point3D};
    use crate::mask::ZeroMasks;
    use crate::synth::{build_scene, to_sfm_model, SynthSpec};

    fn small_dataset() -> Dataset {
        let spec = SynthSpec { width: 24, height: 24, focal: 24.0, ..SynthSpec::new(2, 60, 4, 2, 0.5) };
        let scene = build_scene(&spec).unwrap();
        let sfm = to_sfm_model(&scene, 0.5, 0.02, 2).unwrap();
        Dataset::from_scene(&scene, sfm).unwrap()
    }

    fn quick_config(total: u64, warmup: u64) -> TrainConfig {
        TrainConfig { total_iters: total, warmup_iters: warmup, replication_cadence: 20, eval_every: 0, log_every: 5, ..Default::default() }
    }

    #[test]
    fn phase_boundaries() {
        let cfg = TrainConfig::default();
        assert_eq!((is_pseudo_phase(749, &cfg), is_replication(749, &cfg)), (false, false));
        assert!(is_pseudo_phase(750, &cfg));
        assert!(!is_replication(750, &cfg));
        assert!(is_replication(1000, &cfg));
        assert!(is_replication(1500, &cfg));
        assert!(!is_replication(500, &cfg));
    }

    #[test]
    fn reference_view_is_forced_with_two_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(select_reference_view(0, 2, &mut rng).unwrap(), 1);
        }
        assert!(select_reference_view(0, 1, &mut rng).is_err());
    }

    #[test]
    fn reference_view_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 6];
        let draws = 10_000;
        for _ in 0..draws {
            counts[select_reference_view(2, 6, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[2], 0);
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts.iter().enumerate().filter(|(i, _)| *i != 2).map(|(_, c)| (*c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of χ² with 4 degrees of freedom.
        assert!(chi2 < 18.47, "chi2 = {chi2}");
    }

    #[test]
    fn pseudo_triple_is_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mut t = [0, select_reference_view(0, 3, &mut rng).unwrap(), 0];
            t[2] = select_pseudo_partner(t[0], t[1], 3, &mut rng).unwrap();
            let mut s = t;
            s.sort();
            assert_eq!(s, [0, 1, 2]);
        }
        for _ in 0..100 {
            let i = rng.random_range(0..7);
            let j = select_reference_view(i, 7, &mut rng).unwrap();
            let k = select_pseudo_partner(i, j, 7, &mut rng).unwrap();
            assert!(k != i && k != j && k < 7);
        }
    }

    #[test]
    fn position_rate_decays_between_endpoints() {
        let cfg = TrainConfig::default();
        assert!((position_lr(0, &cfg) - 1.6e-4).abs() < 1e-18);
        assert!((position_lr(cfg.total_iters, &cfg) - 1.6e-6).abs() < 1e-18);
        assert!((position_lr(cfg.total_iters / 2, &cfg) - 1.6e-5).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { warmup_iters: 3000, ..Default::default() }.validate().is_err());
        let mut c = TrainConfig::default();
        c.lr.opacity = 0.0;
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"total_iter": 5}"#).is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"total_iters": 100, "warmup_iters": 10}"#).unwrap();
        assert_eq!(parsed.lr, LearningRates::default());
    }

    #[test]
    fn zero_gradient_adam_step_is_a_no_op() {
        let ds = small_dataset();
        let field = init_field(&ds.sfm, &InitOptions::default()).unwrap();
        let mut opt = FieldOptimizer::new(&field);
        let mut f = field.clone();
        let rates = parameter_rates(0, &TrainConfig::default(), 1.0, field.gaussians[0].to_params().len());
        opt.step(&mut f, &FieldGradients::zeros(&field), &rates).unwrap();
        assert_eq!(f, field);
        assert!(opt.steps.iter().all(|s| *s == 0));
    }

    #[test]
    fn single_gaussian_fits_a_constant_image() {
        let camera = Camera {
            fx: 20.0,
            fy: 20.0,
            cx: 8.0,
            cy: 8.0,
            width: 16,
            height: 16,
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0, 0.0, 0.0],
        };
        let color = [0.8, 0.3, 0.5];
        let view = View { name: "a".into(), camera: camera.clone(), image: ImageBuffer::filled(16, 16, color) };
        let mut sfm = SfmModel::default();
        sfm.cameras.insert(1, CameraRecord { model: CameraModel::Pinhole, width: 16, height: 16, params: vec![20.0, 20.0, 8.0, 8.0] });
        sfm.images.insert(1, ImageRecord { qvec: [1.0, 0.0, 0.0, 0.0], tvec: [0.0; 3], camera_id: 1, name: "a".into(), points2d: vec![] });
        sfm.points.insert(1, Point3D { xyz: [0.0, 0.0, 2.0], rgb: [204, 77, 128], error: 0.0, track: vec![] });
        // SfM colors points from the images. A lone point has no neighbours,
        // so the scale floor sets its size.
        let ds = Dataset { train: vec![view.clone(), view.clone()], test: vec![view], sfm, oracle_masks: None };
        let cfg = TrainConfig {
            total_iters: 300,
            warmup_iters: 299,
            refine: false,
            sagr: false,
            densify: false,
            eval_every: 0,
            init: InitOptions { min_scale: 3.0, sh_degree: 0, ..Default::default() },
            ..Default::default()
        };
        let (state, _) = train(&ds, cfg, &ZeroMasks).unwrap();
        assert_eq!(state.field.len(), 1);
        let report = evaluate(&state.field, &ds.test, [0.0; 3]).unwrap();
        assert!(report.mean_psnr > 40.0, "psnr {}", report.mean_psnr);
    }

    #[test]
    fn black_field_against_gray_scores_six_db() {
        let ds = small_dataset();
        let views: Vec<View> = ds.test.iter().map(|v| View { image: ImageBuffer::filled(24, 24, [0.5; 3]), ..v.clone() }).collect();
        let report = evaluate(&GaussianField::new(0), &views, [0.0; 3]).unwrap();
        assert!((report.mean_psnr - 10.0 * 4f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn warmup_steps_have_no_pseudo_term() {
        let ds = small_dataset();
        let provider = crate::mask::OracleMasks::new(ds.oracle_masks.clone().unwrap());
        let mut trainer = Trainer::new(quick_config(30, 20), &ds, &provider).unwrap();
        for _ in 0..30 {
            let r = trainer.step().unwrap();
            if r.iteration < 20 {
                assert_eq!(r.loss.pseudo, 0.0);
                assert!(!r.pseudo_rendered && r.pseudo_partner.is_none());
            } else {
                assert!(r.pseudo_rendered);
            }
        }
    }

    #[test]
    fn optimizer_tracks_field_through_replication() {
        let ds = small_dataset();
        let provider = crate::mask::OracleMasks::new(ds.oracle_masks.clone().unwrap());
        let mut cfg = quick_config(45, 20);
        cfg.density.grad_threshold = 0.0;
        let mut trainer = Trainer::new(cfg, &ds, &provider).unwrap();
        for _ in 0..45 {
            let r = trainer.step().unwrap();
            let s = &trainer.state;
            assert_eq!(s.optimizer.len(), s.field.len());
            assert_eq!(s.stats.count.len(), s.field.len());
            if r.replication.is_some() {
                assert!(s.field.len() > 0);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let ds = small_dataset();
        let provider = crate::mask::OracleMasks::new(ds.oracle_masks.clone().unwrap());
        let cfg = quick_config(25, 20);
        let mut trainer = Trainer::new(cfg.clone(), &ds, &provider).unwrap();
        for _ in 0..25 {
            trainer.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &trainer.state, &cfg).unwrap();
        let (state, loaded_cfg) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(state.field, trainer.state.field);
        assert_eq!(state.optimizer, trainer.state.optimizer);
        assert_eq!(state.stats, trainer.state.stats);
        assert_eq!(state.refiner, trainer.state.refiner);
        assert_eq!(state.rng, trainer.state.rng);
        assert_eq!((state.order, state.cursor, state.iteration), (trainer.state.order.clone(), trainer.state.cursor, 25));
    }
}
