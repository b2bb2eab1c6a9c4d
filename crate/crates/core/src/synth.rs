//! Synthetic benchmark scenes.
//!
//! A scene is a static Gaussian field (a textured back wall plus interior
//! blobs) seen from cameras on an arc. Some training views additionally
//! contain distractor Gaussians that exist in that view only, which makes the
//! transient mask of every view exact: it is the accumulated opacity of the
//! distractors alone.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::colmap::{CameraModel, CameraRecord, ImageRecord, Point2D, Point3D, SfmModel};
use crate::error::{Error, Result};
use crate::raster::{render, render_opacity, RenderSettings};
use crate::scene::{logit, rgb_to_sh_dc, Camera, Gaussian, GaussianField, ImageBuffer, TransientMask};

/// Parameters of a synthetic scene. The scene is a pure function of these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_background: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub distractor_rate: f64,
    pub max_distractors: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Half-width of the camera arc in degrees.
    pub arc_degrees: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            n_background: 300,
            n_train: 6,
            n_test: 4,
            distractor_rate: 0.5,
            max_distractors: 3,
            width: 48,
            height: 48,
            focal: 48.0,
            arc_degrees: 25.0,
        }
    }
}

impl SynthSpec {
    pub fn new(seed: u64, n_background: usize, n_train: usize, n_test: usize, distractor_rate: f64) -> Self {
        SynthSpec { seed, n_background, n_train, n_test, distractor_rate, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_background == 0 || self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidParameter("scene counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::InvalidParameter(format!("distractor_rate {} outside [0, 1]", self.distractor_rate)));
        }
        if self.max_distractors == 0 || self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return Err(Error::InvalidParameter("image size, focal length and max_distractors must be positive".into()));
        }
        if !(self.arc_degrees >= 0.0 && self.arc_degrees < 90.0) {
            return Err(Error::InvalidParameter("arc_degrees must lie in [0, 90)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub spec: SynthSpec,
    pub gt_field: GaussianField,
    /// One entry per training camera; empty for clean views.
    pub distractor_fields: Vec<GaussianField>,
    pub train_cameras: Vec<Camera>,
    pub test_cameras: Vec<Camera>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewRef {
    Train(usize),
    Test(usize),
}

const CAMERA_RADIUS: f64 = 3.5;
const WALL_DEPTH: f64 = 1.5;
const WALL_HALF_X: f64 = 5.0;
const WALL_HALF_Y: f64 = 3.5;
const DISTRACTOR_STREAM: u64 = 1000;

fn gaussian(position: Vector3<f64>, scale: Vector3<f64>, rotation: Quaternion<f64>, opacity: f64, rgb: [f64; 3]) -> Gaussian {
    Gaussian {
        position,
        log_scale: scale.map(f64::ln),
        rotation,
        opacity_logit: logit(opacity),
        sh: vec![rgb.map(rgb_to_sh_dc)],
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quaternion<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    let q = Quaternion::new(n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng));
    let q = q / q.norm();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

fn wall(n: usize) -> Vec<Gaussian> {
    let aspect = WALL_HALF_X / WALL_HALF_Y;
    let rows = ((n as f64 / aspect).sqrt().round() as usize).max(1);
    let cols = n.div_ceil(rows).max(1);
    let dx = 2.0 * WALL_HALF_X / cols as f64;
    let dy = 2.0 * WALL_HALF_Y / rows as f64;
    let mut out = Vec::with_capacity(n);
    'outer: for r in 0..rows {
        for c in 0..cols {
            if out.len() == n {
                break 'outer;
            }
            let x = -WALL_HALF_X + (c as f64 + 0.5) * dx;
            let y = -WALL_HALF_Y + (r as f64 + 0.5) * dy;
            let rgb = [
                0.5 + 0.35 * (0.9 * x).sin(),
                0.5 + 0.35 * (1.1 * y + 0.5).cos(),
                0.5 + 0.3 * (0.6 * (x + y)).sin(),
            ];
            let s = Vector3::new(0.75 * dx, 0.75 * dy, 0.05);
            out.push(gaussian(Vector3::new(x, y, WALL_DEPTH), s, Quaternion::identity(), 0.98, rgb));
        }
    }
    out
}

fn blobs(n: usize, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    (0..n)
        .map(|_| {
            let p = Vector3::new(rng.random_range(-1.2..1.2), rng.random_range(-1.0..1.0), rng.random_range(-0.8..1.0));
            let base: f64 = rng.random_range(0.08f64.ln()..0.22f64.ln());
            let s = Vector3::from_fn(|_, _| (base + rng.random_range(-0.4..0.4)).exp());
            let rgb = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
            gaussian(p, s, random_rotation(rng), rng.random_range(0.6..0.95), rgb)
        })
        .collect()
}

fn arc_camera(spec: &SynthSpec, degrees: f64, elevation: f64) -> Camera {
    let a = degrees.to_radians();
    let eye = Vector3::new(CAMERA_RADIUS * a.sin(), elevation, -CAMERA_RADIUS * a.cos());
    Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), spec.focal, spec.focal, spec.width, spec.height)
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Distractor count for a training view, replayable from the seed alone.
pub fn distractor_count(seed: u64, view: usize, rate: f64, max: usize) -> usize {
    let mut rng = distractor_rng(seed, view);
    if rng.random::<f64>() < rate {
        rng.random_range(1..=max)
    } else {
        0
    }
}

fn distractor_rng(seed: u64, view: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DISTRACTOR_STREAM + view as u64);
    rng
}

const DISTRACTOR_COLORS: [[f64; 3]; 5] =
    [[1.0, 0.15, 0.1], [0.1, 1.0, 0.2], [1.0, 0.95, 0.1], [1.0, 0.2, 1.0], [0.1, 0.9, 1.0]];

fn distractors(spec: &SynthSpec, view: usize, camera: &Camera) -> GaussianField {
    let mut rng = distractor_rng(spec.seed, view);
    let mut field = GaussianField::new(0);
    if rng.random::<f64>() >= spec.distractor_rate {
        return field;
    }
    let count = rng.random_range(1..=spec.max_distractors);
    let eye = camera.center();
    for _ in 0..count {
        let target = Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.5..0.5), 0.0);
        let frac = rng.random_range(0.5..0.8);
        let p = eye + frac * (target - eye);
        // Upright and taller than wide, like a passer-by.
        let s = Vector3::new(rng.random_range(0.12..0.25), rng.random_range(0.3..0.55), rng.random_range(0.1..0.15));
        let rgb = DISTRACTOR_COLORS[rng.random_range(0..DISTRACTOR_COLORS.len())];
        field.gaussians.push(gaussian(p, s, Quaternion::identity(), 0.97, rgb));
    }
    field
}

pub fn build_scene(spec: &SynthSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_wall = ((spec.n_background as f64) * 0.4).round() as usize;
    let mut gaussians = wall(n_wall);
    gaussians.extend(blobs(spec.n_background - n_wall, &mut rng));
    let gt_field = GaussianField { gaussians, sh_degree: 0 };

    let arc = spec.arc_degrees;
    let train_cameras: Vec<Camera> = linspace(-arc, arc, spec.n_train)
        .into_iter()
        .map(|deg| arc_camera(spec, deg, rng.random_range(-0.3..0.3)))
        .collect();
    let test_arc = arc * (1.0 - 1.0 / (spec.n_train.max(2) as f64));
    let test_cameras: Vec<Camera> = linspace(-test_arc, test_arc, spec.n_test)
        .into_iter()
        .map(|deg| arc_camera(spec, deg + rng.random_range(-2.0..2.0), rng.random_range(-0.3..0.3)))
        .collect();
    let distractor_fields = train_cameras.iter().enumerate().map(|(v, c)| distractors(spec, v, c)).collect();
    Ok(SynthScene { spec: spec.clone(), gt_field, distractor_fields, train_cameras, test_cameras })
}

impl SynthScene {
    pub fn camera(&self, view: ViewRef) -> Result<&Camera> {
        match view {
            ViewRef::Train(i) => self.train_cameras.get(i),
            ViewRef::Test(i) => self.test_cameras.get(i),
        }
        .ok_or_else(|| Error::InvalidInput(format!("no such view {view:?}")))
    }

    pub fn distractor_count(&self, view: usize) -> usize {
        self.distractor_fields.get(view).map_or(0, |f| f.len())
    }
}

/// Ground-truth image of a view. Training views include their distractors.
pub fn render_gt(scene: &SynthScene, view: ViewRef) -> Result<ImageBuffer> {
    let camera = scene.camera(view)?;
    let field = match view {
        ViewRef::Train(i) if !scene.distractor_fields[i].is_empty() => scene.gt_field.union(&scene.distractor_fields[i]),
        _ => scene.gt_field.clone(),
    };
    Ok(render(&field, camera, &RenderSettings::default())?.image)
}

/// Accumulated opacity of the view's distractors rendered alone.
pub fn oracle_mask(scene: &SynthScene, view: usize) -> Result<TransientMask> {
    let camera = scene.camera(ViewRef::Train(view))?;
    let field = &scene.distractor_fields[view];
    if field.is_empty() {
        return Ok(TransientMask::zeros(camera.width, camera.height));
    }
    Ok(TransientMask::from_clamped(render_opacity(field, camera)?))
}

/// Camera between `a` and `b`: slerped orientation (shorter arc) and linearly
/// blended center.
pub fn interpolate_pose(a: &Camera, b: &Camera, t: f64) -> Result<Camera> {
    if !a.same_intrinsics(b) {
        return Err(Error::InvalidInput("cannot interpolate cameras with different intrinsics".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let qa = UnitQuaternion::from_quaternion(a.quaternion()).inverse();
    let mut qb = UnitQuaternion::from_quaternion(b.quaternion()).inverse();
    if qa.coords.dot(&qb.coords) < 0.0 {
        qb = UnitQuaternion::new_unchecked(-qb.into_inner());
    }
    let c2w = qa.try_slerp(&qb, t, 1e-12).unwrap_or(qa);
    let center = a.center() * (1.0 - t) + b.center() * t;
    let w2c = c2w.inverse();
    let q = w2c.into_inner();
    let q = if q.w < 0.0 { -q } else { q };
    let tr = -(w2c.to_rotation_matrix() * center);
    Ok(Camera { rotation: [q.w, q.i, q.j, q.k], translation: [tr.x, tr.y, tr.z], ..a.clone() })
}

/// Index of the camera whose center is closest to `cameras[k]`'s.
pub fn nearest_camera(cameras: &[Camera], k: usize) -> Option<usize> {
    let c = cameras[k].center();
    (0..cameras.len())
        .filter(|&j| j != k)
        .min_by(|&i, &j| (cameras[i].center() - c).norm().total_cmp(&(cameras[j].center() - c).norm()))
}

/// Pseudo-view camera between `cameras[k]` and its nearest neighbour, at a
/// uniform position in [0.3, 0.7] along the path.
pub fn sample_pseudo_camera(cameras: &[Camera], k: usize, rng: &mut impl Rng) -> Result<Camera> {
    let Some(j) = nearest_camera(cameras, k) else {
        return Ok(cameras[k].clone());
    };
    let t = rng.random_range(0.3..0.7);
    interpolate_pose(&cameras[k], &cameras[j], t)
}

/// Simulated structure-from-motion output: a random subset of the static
/// Gaussians' centers with Gaussian position noise, observed by every training
/// camera in which they project inside the image.
pub fn to_sfm_model(scene: &SynthScene, fraction: f64, noise: f64, seed: u64) -> Result<SfmModel> {
    if !(fraction > 0.0 && fraction <= 1.0) || !(noise >= 0.0) {
        return Err(Error::InvalidParameter("fraction must lie in (0, 1] and noise be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).unwrap();
    let cam = &scene.train_cameras[0];
    let mut model = SfmModel::default();
    model.cameras.insert(
        1,
        CameraRecord {
            model: CameraModel::Pinhole,
            width: cam.width as u64,
            height: cam.height as u64,
            params: vec![cam.fx, cam.fy, cam.cx, cam.cy],
        },
    );
    for (i, c) in scene.train_cameras.iter().enumerate() {
        model.images.insert(
            i as u32 + 1,
            ImageRecord { qvec: c.rotation, tvec: c.translation, camera_id: 1, name: train_image_name(i), points2d: Vec::new() },
        );
    }
    let mut next_id = 1u64;
    for g in &scene.gt_field.gaussians {
        if rng.random::<f64>() >= fraction {
            continue;
        }
        let jitter = if noise > 0.0 { Vector3::from_fn(|_, _| normal.sample(&mut rng)) } else { Vector3::zeros() };
        let p = g.position + jitter;
        let rgb = crate::scene::sh_color(&g.sh[..1], &crate::scene::sh_basis(0, &Vector3::z())).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        let mut track = Vec::new();
        for (i, c) in scene.train_cameras.iter().enumerate() {
            let pc = c.world_to_camera(&p);
            if pc.z <= 0.0 {
                continue;
            }
            let (u, v) = (c.fx * pc.x / pc.z + c.cx, c.fy * pc.y / pc.z + c.cy);
            if u < 0.0 || v < 0.0 || u >= c.width as f64 || v >= c.height as f64 {
                continue;
            }
            let img = model.images.get_mut(&(i as u32 + 1)).unwrap();
            track.push((i as u32 + 1, img.points2d.len() as u32));
            img.points2d.push(Point2D { x: u, y: v, point3d_id: Some(next_id) });
        }
        model.points.insert(next_id, Point3D { xyz: [p.x, p.y, p.z], rgb, error: noise, track });
        next_id += 1;
    }
    if model.points.is_empty() {
        return Err(Error::InvalidInput("sampling fraction produced no points".into()));
    }
    Ok(model)
}

pub fn train_image_name(i: usize) -> String {
    format!("train_{i:03}.png")
}

pub fn test_image_name(i: usize) -> String {
    format!("test_{i:03}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub name: String,
    pub camera: Camera,
    pub distractors: usize,
}

/// JSON description of an exported scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub train: Vec<ManifestView>,
    pub test: Vec<ManifestView>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl Manifest {
    pub fn from_scene(scene: &SynthScene) -> Self {
        Manifest {
            spec: scene.spec.clone(),
            train: scene
                .train_cameras
                .iter()
                .enumerate()
                .map(|(i, c)| ManifestView { name: train_image_name(i), camera: c.clone(), distractors: scene.distractor_count(i) })
                .collect(),
            test: scene
                .test_cameras
                .iter()
                .enumerate()
                .map(|(i, c)| ManifestView { name: test_image_name(i), camera: c.clone(), distractors: 0 })
                .collect(),
            extra: BTreeMap::new(),
        }
    }
}

/// Writes `manifest.json`, `gt_field.ply`, a text sparse model under
/// `sparse/0`, and training/test images and oracle masks as PNG.
pub fn export_scene(scene: &SynthScene, dir: &Path, sfm: &SfmModel) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    std::fs::create_dir_all(dir.join("test"))?;
    std::fs::create_dir_all(dir.join("sparse/0"))?;
    let manifest = Manifest::from_scene(scene);
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?)?;
    crate::io::save_ply(&dir.join("gt_field.ply"), &scene.gt_field)?;
    crate::colmap::serialize_sfm(sfm, &dir.join("sparse/0"), crate::colmap::SfmFormat::Text)?;
    for i in 0..scene.train_cameras.len() {
        crate::io::save_png(&dir.join("images").join(train_image_name(i)), &render_gt(scene, ViewRef::Train(i))?)?;
        crate::io::save_gray_png(&dir.join("masks").join(train_image_name(i)), &oracle_mask(scene, i)?.into_inner())?;
    }
    for i in 0..scene.test_cameras.len() {
        crate::io::save_png(&dir.join("test").join(test_image_name(i)), &render_gt(scene, ViewRef::Test(i))?)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::NotFound(path));
    }
    serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        location: format!("line {}", e.line()),
        message: e.to_string(),
    })
}
