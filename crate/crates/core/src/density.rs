//! Density control: opacity-driven replication into sparse regions, and
//! gradient-driven clone/split/prune.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{logit, quat_to_matrix, renormalize, Camera, GaussianField, OpacityMap, ScalarMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Jitter {
    /// Fixed standard deviation in world units.
    Fixed(f64),
    /// Multiple of the source Gaussian's nearest-neighbour distance.
    NeighborScaled(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub sparsity_threshold: f64,
    pub ema_decay: f64,
    /// Replication budget per invocation.
    pub max_new: usize,
    pub jitter: Jitter,
    /// Below this accumulated opacity the rendered depth is not trusted.
    pub depth_confidence: f64,
    /// Sparse components are cut into square cells of this many pixels.
    pub component_cell: usize,
    pub new_opacity: f64,
    pub grad_threshold: f64,
    pub scale_threshold: f64,
    pub opacity_floor: f64,
    pub max_gaussians: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            sparsity_threshold: 0.5,
            ema_decay: 0.9,
            max_new: 200,
            jitter: Jitter::NeighborScaled(0.5),
            depth_confidence: 0.05,
            component_cell: 8,
            new_opacity: 0.1,
            grad_threshold: 2e-4,
            scale_threshold: 0.1,
            opacity_floor: 0.005,
            max_gaussians: 20_000,
        }
    }
}

/// How a new field's Gaussians relate to the old one: `sources[new] = Some(old)`
/// for carried-over Gaussians and `None` for newly created ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldEdit {
    pub sources: Vec<Option<usize>>,
}

impl FieldEdit {
    pub fn identity(n: usize) -> Self {
        FieldEdit { sources: (0..n).map(Some).collect() }
    }

    pub fn is_identity(&self) -> bool {
        self.sources.iter().enumerate().all(|(i, s)| *s == Some(i))
    }

    /// Reorders per-Gaussian data, filling new entries with `fill`.
    pub fn remap<T: Clone>(&self, old: &[T], fill: T) -> Vec<T> {
        self.sources.iter().map(|s| s.map_or_else(|| fill.clone(), |i| old[i].clone())).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewStats {
    /// Exponential moving average of `D̂ < τ`.
    pub sparsity: ScalarMap,
    pub opacity: OpacityMap,
    pub depth: ScalarMap,
    pub observations: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_norm_sum: Vec<f64>,
    pub grad_sum: Vec<Vector3<f64>>,
    pub count: Vec<u64>,
    pub views: Vec<Option<ViewStats>>,
}

impl DensifyStats {
    pub fn new(n_gaussians: usize, n_views: usize) -> Self {
        DensifyStats {
            grad_norm_sum: vec![0.0; n_gaussians],
            grad_sum: vec![Vector3::zeros(); n_gaussians],
            count: vec![0; n_gaussians],
            views: vec![None; n_views],
        }
    }

    pub fn record_step(
        &mut self,
        view: usize,
        opacity: &OpacityMap,
        depth: &ScalarMap,
        position_grads: &[Vector3<f64>],
        config: &DensityConfig,
    ) -> Result<()> {
        if position_grads.len() != self.count.len() {
            return Err(Error::InvalidInput(format!(
                "{} gradients for {} tracked Gaussians",
                position_grads.len(),
                self.count.len()
            )));
        }
        if opacity.width != depth.width || opacity.height != depth.height {
            return Err(Error::InvalidInput("opacity and depth maps differ in size".into()));
        }
        let slot = self.views.get_mut(view).ok_or_else(|| Error::InvalidInput(format!("no view {view}")))?;
        let vs = slot.get_or_insert_with(|| ViewStats {
            sparsity: ScalarMap::new(opacity.width, opacity.height),
            ..Default::default()
        });
        if vs.sparsity.width != opacity.width || vs.sparsity.height != opacity.height {
            return Err(Error::InvalidInput("view resolution changed between steps".into()));
        }
        let d = config.ema_decay;
        for (s, o) in vs.sparsity.values.iter_mut().zip(&opacity.values) {
            let sparse = if *o < config.sparsity_threshold { 1.0 } else { 0.0 };
            *s = d * *s + (1.0 - d) * sparse;
        }
        vs.opacity = opacity.clone();
        vs.depth = depth.clone();
        vs.observations += 1;
        for (i, g) in position_grads.iter().enumerate() {
            let n = g.norm();
            if n > 0.0 {
                self.grad_norm_sum[i] += n;
                self.grad_sum[i] += g;
                self.count[i] += 1;
            }
        }
        Ok(())
    }

    pub fn reset_gradients(&mut self, n: usize) {
        self.grad_norm_sum = vec![0.0; n];
        self.grad_sum = vec![Vector3::zeros(); n];
        self.count = vec![0; n];
    }

    pub fn apply_edit(&mut self, edit: &FieldEdit) {
        self.grad_norm_sum = edit.remap(&self.grad_norm_sum, 0.0);
        self.grad_sum = edit.remap(&self.grad_sum, Vector3::zeros());
        self.count = edit.remap(&self.count, 0);
    }

    /// Fraction of pixels over all recorded views whose latest `D̂` is below
    /// `threshold`.
    pub fn sparse_fraction(&self, threshold: f64) -> f64 {
        let (mut sparse, mut total) = (0usize, 0usize);
        for vs in self.views.iter().flatten() {
            sparse += vs.opacity.values.iter().filter(|v| **v < threshold).count();
            total += vs.opacity.values.len();
        }
        if total == 0 {
            0.0
        } else {
            sparse as f64 / total as f64
        }
    }
}

/// A cluster of sparse pixels in one view.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRegion {
    pub view: usize,
    pub pixels: Vec<usize>,
    /// Mean pixel-center coordinates.
    pub centroid: (f64, f64),
}

/// 4-connected components of `mask`, each cut by a grid of `cell × cell`
/// squares so large holes yield several regions.
pub fn sparse_regions(view: usize, sparsity: &ScalarMap, threshold: f64, cell: usize) -> Vec<SparseRegion> {
    let (w, h) = (sparsity.width, sparsity.height);
    let cell = cell.max(1);
    let mut label = vec![usize::MAX; w * h];
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if label[start] != usize::MAX || sparsity.values[start] <= threshold {
            continue;
        }
        let id = components.len();
        let mut component = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            component.push(p);
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if label[q] == usize::MAX && sparsity.values[q] > threshold {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    let mut regions = Vec::new();
    for component in components {
        let mut cells: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
        for p in component {
            cells.entry(((p / w) / cell, (p % w) / cell)).or_default().push(p);
        }
        for pixels in cells.into_values() {
            let n = pixels.len() as f64;
            let cx = pixels.iter().map(|p| (p % w) as f64 + 0.5).sum::<f64>() / n;
            let cy = pixels.iter().map(|p| (p / w) as f64 + 0.5).sum::<f64>() / n;
            regions.push(SparseRegion { view, pixels, centroid: (cx, cy) });
        }
    }
    regions
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

fn median_visible_depth(field: &GaussianField, camera: &Camera) -> Option<f64> {
    let visible: Vec<f64> = field
        .gaussians
        .iter()
        .filter_map(|g| {
            let p = camera.world_to_camera(&g.position);
            let (u, v) = (camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy);
            (p.z > crate::raster::NEAR_PLANE && u >= 0.0 && v >= 0.0 && u < camera.width as f64 && v < camera.height as f64)
                .then_some(p.z)
        })
        .collect();
    median(visible).or_else(|| {
        median(field.gaussians.iter().map(|g| camera.world_to_camera(&g.position).z).filter(|z| *z > 0.0).collect())
    })
}

/// World point for a region: the centroid ray at the region's normalized
/// rendered depth, or at the median depth of visible Gaussians when the
/// region is too transparent for its depth to mean anything.
pub fn backproject_region(region: &SparseRegion, stats: &ViewStats, camera: &Camera, field: &GaussianField, confidence: f64) -> Option<Vector3<f64>> {
    let n = region.pixels.len() as f64;
    let mean_alpha = region.pixels.iter().map(|p| stats.opacity.values[*p]).sum::<f64>() / n;
    let z = if mean_alpha >= confidence {
        let depth = region.pixels.iter().map(|p| stats.depth.values[*p]).sum::<f64>() / n;
        depth / mean_alpha
    } else {
        median_visible_depth(field, camera)?
    };
    if !(z > 0.0) || !z.is_finite() {
        return None;
    }
    let (u, v) = region.centroid;
    let p_cam = Vector3::new((u - camera.cx) / camera.fx * z, (v - camera.cy) / camera.fy * z, z);
    Some(camera.rotation_matrix().transpose() * (p_cam - camera.translation()))
}

fn nearest(field: &GaussianField, p: &Vector3<f64>, skip: Option<usize>) -> Option<(usize, f64)> {
    field
        .gaussians
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(i, g)| (i, (g.position - p).norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SagrReport {
    pub regions: usize,
    pub added: usize,
    pub targets: Vec<Vector3<f64>>,
}

/// Clones Gaussians into regions whose accumulated opacity has stayed low.
pub fn sagr_replicate(
    field: &GaussianField,
    stats: &DensifyStats,
    cameras: &[Camera],
    config: &DensityConfig,
    rng: &mut impl Rng,
) -> Result<(GaussianField, FieldEdit, SagrReport)> {
    if field.is_empty() {
        return Err(Error::InvalidState("cannot replicate into an empty field".into()));
    }
    let mut report = SagrReport::default();
    let mut regions = Vec::new();
    for (v, vs) in stats.views.iter().enumerate() {
        if let Some(vs) = vs {
            regions.extend(sparse_regions(v, &vs.sparsity, config.sparsity_threshold, config.component_cell));
        }
    }
    report.regions = regions.len();
    // Largest first; the sort is stable so ties keep view/scan order.
    regions.sort_by(|a, b| b.pixels.len().cmp(&a.pixels.len()));
    let budget = config.max_new.min(config.max_gaussians.saturating_sub(field.len()));
    let mut out = field.clone();
    let normal = Normal::new(0.0, 1.0).unwrap();
    for region in regions.iter().take(budget) {
        let vs = stats.views[region.view].as_ref().expect("region comes from a recorded view");
        let camera = cameras.get(region.view).ok_or_else(|| Error::InvalidInput(format!("no camera for view {}", region.view)))?;
        let Some(target) = backproject_region(region, vs, camera, field, config.depth_confidence) else {
            continue;
        };
        let (src, _) = nearest(field, &target, None).expect("field is non-empty");
        let sigma = match config.jitter {
            Jitter::Fixed(s) => s,
            Jitter::NeighborScaled(k) => k * nearest(field, &field.gaussians[src].position, Some(src)).map_or(0.0, |(_, d)| d),
        };
        let mut g = field.gaussians[src].clone();
        g.position = target + Vector3::from_fn(|_, _| sigma * normal.sample(rng));
        g.opacity_logit = logit(config.new_opacity);
        out.gaussians.push(g);
        report.targets.push(target);
    }
    report.added = out.len() - field.len();
    let mut edit = FieldEdit::identity(field.len());
    edit.sources.extend(std::iter::repeat_n(None, report.added));
    Ok((out, edit, report))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AdcReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// Uniform sample in the unit ball.
fn unit_ball(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            return v;
        }
    }
}

/// Gradient-driven densification followed by opacity pruning.
pub fn densify_and_prune(
    field: &GaussianField,
    stats: &DensifyStats,
    config: &DensityConfig,
    rng: &mut impl Rng,
) -> Result<(GaussianField, FieldEdit, AdcReport)> {
    if stats.count.len() != field.len() {
        return Err(Error::InvalidState("density statistics are out of sync with the field".into()));
    }
    let mut report = AdcReport::default();
    let mut kept = Vec::with_capacity(field.len());
    let mut born = Vec::new();
    let mut room = config.max_gaussians.saturating_sub(field.len());
    for (i, g) in field.gaussians.iter().enumerate() {
        let avg = if stats.count[i] > 0 { stats.grad_norm_sum[i] / stats.count[i] as f64 } else { 0.0 };
        if avg < config.grad_threshold || room == 0 {
            kept.push((g.clone(), Some(i)));
            continue;
        }
        let scale = g.scale();
        let s_max = scale.max();
        if s_max <= config.scale_threshold {
            let dir = -stats.grad_sum[i];
            let shift = if dir.norm() > 0.0 { dir.normalize() * s_max } else { Vector3::zeros() };
            let mut c = g.clone();
            c.position += shift;
            kept.push((g.clone(), Some(i)));
            born.push(c);
            report.cloned += 1;
        } else {
            let r = quat_to_matrix(&renormalize(g.rotation));
            for _ in 0..2 {
                let mut c = g.clone();
                c.position = g.position + r * scale.component_mul(&unit_ball(rng));
                c.log_scale = g.log_scale.map(|s| s - SPLIT_SCALE_DIVISOR.ln());
                born.push(c);
            }
            report.split += 1;
        }
        room -= 1;
    }
    let min_logit = logit(config.opacity_floor);
    let mut out = GaussianField::new(field.sh_degree);
    let mut edit = FieldEdit { sources: Vec::new() };
    for (g, src) in kept.into_iter().chain(born.into_iter().map(|g| (g, None))) {
        if g.opacity_logit < min_logit || !g.is_finite() {
            report.pruned += 1;
            continue;
        }
        out.gaussians.push(g);
        edit.sources.push(src);
    }
    Ok((out, edit, report))
}
