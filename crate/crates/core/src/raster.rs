//! Differentiable EWA splatting on the CPU.
//!
//! Forward compositing runs per 16×16 tile in parallel. Every pixel keeps the
//! list of splats it blended (with their alpha and incoming transmittance) so
//! the backward pass replays exactly what the forward pass did. Gradients are
//! accumulated into tile-private buffers and reduced in tile order, which
//! makes the results bitwise reproducible regardless of thread scheduling.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{
    quat_to_matrix, quat_to_matrix_grad, renormalize, sh_basis, sh_basis_grad, sh_coeff_count, sh_color, Camera,
    GaussianField, ImageBuffer, OpacityMap, ScalarMap,
};

/// Splats at or in front of this camera-space depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic screen-space dilation added to every projected covariance.
pub const LOW_PASS: f64 = 0.3;
/// Upper bound on any single splat's alpha.
pub const ALPHA_MAX: f64 = 0.99;
/// Compositing stops once transmittance falls below this value.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Per-pixel contributions with alpha below this are skipped.
pub const ALPHA_EPS: f64 = 1e-10;
const MIN_DET: f64 = 1e-12;
const TILE: usize = 16;

#[derive(Clone, Debug)]
pub struct RenderSettings {
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings { background: [0.0; 3] }
    }
}

/// A Gaussian projected into one camera.
#[derive(Clone, Debug)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub color: [f64; 3],
    pub base_opacity: f64,
    pub source: usize,
    conic: Matrix2<f64>,
    p_cam: Vector3<f64>,
    jacobian: Matrix2x3<f64>,
    view_cov: Matrix3<f64>,
    view_dir: Vector3<f64>,
    view_dist: f64,
    support: f64,
}

#[derive(Clone, Copy, Debug)]
struct Contribution {
    splat: u32,
    local: u32,
    alpha: f64,
    transmittance: f64,
    clamped: bool,
}

/// Result of a forward render, including what the backward pass needs.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// Composited color clamped to `[0, 1]`.
    pub image: ImageBuffer,
    /// Accumulated alpha `Σ α_k T_k` (background excluded).
    pub opacity: OpacityMap,
    /// Alpha-weighted expected depth `Σ z_k α_k T_k`.
    pub depth: ScalarMap,
    pub splats: Vec<Splat2D>,
    raw: Vec<f64>,
    final_transmittance: Vec<f64>,
    pixel_ranges: Vec<(usize, usize)>,
    contributions: Vec<Contribution>,
    tile_lists: Vec<Vec<u32>>,
    background: [f64; 3],
    field_len: usize,
}

impl RenderOutput {
    /// Number of splats blended at pixel `(x, y)`.
    pub fn contributor_count(&self, x: usize, y: usize) -> usize {
        self.pixel_ranges[y * self.image.width + x].1
    }
}

/// Per-Gaussian parameter gradients, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// (w, x, y, z)
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub sh: Vec<[f64; 3]>,
}

impl GaussianGrad {
    pub fn zeros(sh_count: usize) -> Self {
        GaussianGrad {
            position: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rotation: [0.0; 4],
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]; sh_count],
        }
    }

    /// Same layout as [`crate::scene::Gaussian::to_params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(11 + 3 * self.sh.len());
        p.extend(self.position.iter());
        p.extend(self.log_scale.iter());
        p.extend(self.rotation);
        p.push(self.opacity_logit);
        p.extend(self.sh.iter().flatten());
        p
    }

    pub fn add_assign(&mut self, other: &GaussianGrad) {
        self.position += other.position;
        self.log_scale += other.log_scale;
        for i in 0..4 {
            self.rotation[i] += other.rotation[i];
        }
        self.opacity_logit += other.opacity_logit;
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            for c in 0..3 {
                a[c] += b[c];
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.position *= s;
        self.log_scale *= s;
        for v in self.rotation.iter_mut() {
            *v *= s;
        }
        self.opacity_logit *= s;
        for v in self.sh.iter_mut().flatten() {
            *v *= s;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradients {
    pub gaussians: Vec<GaussianGrad>,
}

impl FieldGradients {
    pub fn zeros(field: &GaussianField) -> Self {
        let k = sh_coeff_count(field.sh_degree);
        FieldGradients { gaussians: vec![GaussianGrad::zeros(k); field.len()] }
    }

    pub fn add_assign(&mut self, other: &FieldGradients) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            a.add_assign(b);
        }
    }
}

/// The two terms of the positional gradient: through view-dependent color and
/// through the projected footprint (alpha).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionGradSplit {
    pub color_path: Vector3<f64>,
    pub opacity_path: Vector3<f64>,
}

/// Projects every Gaussian into `camera`, culling those behind the near plane
/// or whose 3σ footprint misses the image.
pub fn project(field: &GaussianField, camera: &Camera) -> Vec<Splat2D> {
    let w = camera.rotation_matrix();
    let t = camera.translation();
    let center = camera.center();
    let (width, height) = (camera.width as f64, camera.height as f64);
    field
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            let p = w * g.position + t;
            if p.z <= NEAR_PLANE {
                return None;
            }
            let (fx, fy) = (camera.fx, camera.fy);
            let iz = 1.0 / p.z;
            let mean2d = Vector2::new(fx * p.x * iz + camera.cx, fy * p.y * iz + camera.cy);
            let jacobian = Matrix2x3::new(fx * iz, 0.0, -fx * p.x * iz * iz, 0.0, fy * iz, -fy * p.y * iz * iz);
            let r = quat_to_matrix(&renormalize(g.rotation));
            let sigma = crate::scene::covariance_from(&g.log_scale, &r);
            let view_cov = w * sigma * w.transpose();
            let mut cov2d = jacobian * view_cov * jacobian.transpose();
            cov2d = 0.5 * (cov2d + cov2d.transpose()) + Matrix2::identity() * LOW_PASS;
            let det = cov2d.determinant();
            if !(det >= MIN_DET) {
                return None;
            }
            let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
            let half = 0.5 * (cov2d[(0, 0)] - cov2d[(1, 1)]);
            let lambda_max = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]) + (half * half + cov2d[(0, 1)].powi(2)).sqrt();
            let r3 = 3.0 * lambda_max.sqrt();
            if mean2d.x + r3 < 0.0 || mean2d.x - r3 > width || mean2d.y + r3 < 0.0 || mean2d.y - r3 > height {
                return None;
            }
            let base_opacity = g.opacity();
            if base_opacity <= ALPHA_EPS {
                return None;
            }
            let support = (2.0 * lambda_max * (base_opacity / ALPHA_EPS).ln()).sqrt();
            let v = g.position - center;
            let view_dist = v.norm();
            let view_dir = if view_dist > 0.0 { v / view_dist } else { Vector3::z() };
            let color = sh_color(&g.sh, &sh_basis(field.sh_degree, &view_dir));
            Some(Splat2D {
                mean2d,
                cov2d,
                depth: p.z,
                color,
                base_opacity,
                source: i,
                conic,
                p_cam: p,
                jacobian,
                view_cov,
                view_dir,
                view_dist,
                support,
            })
        })
        .collect()
}

struct TileResult {
    pixels: Vec<(usize, [f64; 3], f64, f64, f64, usize)>,
    contributions: Vec<Contribution>,
}

/// Renders color, accumulated opacity and expected depth.
pub fn render(field: &GaussianField, camera: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    if field.is_empty() {
        return Err(Error::InvalidInput("cannot render an empty field".into()));
    }
    camera.validate()?;
    let mut splats = project(field, camera);
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));

    let (width, height) = (camera.width, camera.height);
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let x0 = ((s.mean2d.x - s.support).floor().max(0.0) as usize) / TILE;
        let x1 = ((s.mean2d.x + s.support).ceil().min(width as f64 - 1.0).max(0.0) as usize) / TILE;
        let y0 = ((s.mean2d.y - s.support).floor().max(0.0) as usize) / TILE;
        let y1 = ((s.mean2d.y + s.support).ceil().min(height as f64 - 1.0).max(0.0) as usize) / TILE;
        if s.mean2d.x + s.support < 0.0 || s.mean2d.y + s.support < 0.0 {
            continue;
        }
        for ty in y0..=y1.min(tiles_y - 1) {
            for tx in x0..=x1.min(tiles_x - 1) {
                tile_lists[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    let bg = settings.background;
    let results: Vec<TileResult> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let list = &tile_lists[tile];
            let mut pixels = Vec::with_capacity(TILE * TILE);
            let mut contributions = Vec::new();
            for py in ty * TILE..((ty + 1) * TILE).min(height) {
                for px in tx * TILE..((tx + 1) * TILE).min(width) {
                    let pix = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                    let start = contributions.len();
                    let mut t = 1.0;
                    let mut color = [0.0; 3];
                    let mut acc = 0.0;
                    let mut depth = 0.0;
                    for (local, &si) in list.iter().enumerate() {
                        let s = &splats[si as usize];
                        let d = pix - s.mean2d;
                        // Outside the support radius alpha is below ALPHA_EPS.
                        if d.x.abs() > s.support || d.y.abs() > s.support {
                            continue;
                        }
                        let power = -0.5 * (s.conic[(0, 0)] * d.x * d.x + 2.0 * s.conic[(0, 1)] * d.x * d.y + s.conic[(1, 1)] * d.y * d.y);
                        let raw_alpha = s.base_opacity * power.exp();
                        if raw_alpha < ALPHA_EPS {
                            continue;
                        }
                        let clamped = raw_alpha > ALPHA_MAX;
                        let alpha = if clamped { ALPHA_MAX } else { raw_alpha };
                        let w = alpha * t;
                        for c in 0..3 {
                            color[c] += s.color[c] * w;
                        }
                        acc += w;
                        depth += s.depth * w;
                        contributions.push(Contribution { splat: si, local: local as u32, alpha, transmittance: t, clamped });
                        t *= 1.0 - alpha;
                        if t < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    for c in 0..3 {
                        color[c] += t * bg[c];
                    }
                    pixels.push((py * width + px, color, acc, depth, t, start));
                }
            }
            TileResult { pixels, contributions }
        })
        .collect();

    let n_pix = width * height;
    let mut raw = vec![0.0; n_pix * 3];
    let mut opacity = ScalarMap::new(width, height);
    let mut depth_map = ScalarMap::new(width, height);
    let mut final_transmittance = vec![1.0; n_pix];
    let mut pixel_ranges = vec![(0, 0); n_pix];
    let mut contributions = Vec::with_capacity(results.iter().map(|r| r.contributions.len()).sum());
    for tr in results {
        let base = contributions.len();
        let total = tr.contributions.len();
        for (k, &(idx, color, acc, depth, t, start)) in tr.pixels.iter().enumerate() {
            let end = tr.pixels.get(k + 1).map_or(total, |p| p.5);
            raw[idx * 3..idx * 3 + 3].copy_from_slice(&color);
            opacity.values[idx] = acc;
            depth_map.values[idx] = depth;
            final_transmittance[idx] = t;
            pixel_ranges[idx] = (base + start, end - start);
        }
        contributions.extend(tr.contributions);
    }
    let image = ImageBuffer { width, height, rgb: raw.iter().map(|v| v.clamp(0.0, 1.0)).collect() };
    Ok(RenderOutput {
        image,
        opacity,
        depth: depth_map,
        splats,
        raw,
        final_transmittance,
        pixel_ranges,
        contributions,
        tile_lists,
        background: bg,
        field_len: field.len(),
    })
}

#[derive(Clone, Copy, Default)]
struct Grad2D {
    mean: [f64; 2],
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
}

impl Grad2D {
    fn add(&mut self, o: &Grad2D) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
    }
}

fn check_cotangents(out: &RenderOutput, d_image: &[f64], d_opacity: &[f64]) -> Result<()> {
    let n = out.image.pixel_count();
    if d_image.len() != 3 * n || d_opacity.len() != n {
        return Err(Error::InvalidInput(format!(
            "cotangent sizes ({}, {}) do not match a {}x{} render",
            d_image.len(),
            d_opacity.len(),
            out.image.width,
            out.image.height
        )));
    }
    Ok(())
}

fn screen_space_grads(out: &RenderOutput, d_image: &[f64], d_opacity: &[f64]) -> Vec<Grad2D> {
    let width = out.image.width;
    let height = out.image.height;
    let tiles_x = width.div_ceil(TILE);
    let per_tile: Vec<Vec<Grad2D>> = out
        .tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut acc = vec![Grad2D::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            for py in ty * TILE..((ty + 1) * TILE).min(height) {
                for px in tx * TILE..((tx + 1) * TILE).min(width) {
                    let idx = py * width + px;
                    let mut dc = [0.0; 3];
                    for c in 0..3 {
                        let raw = out.raw[idx * 3 + c];
                        if (0.0..=1.0).contains(&raw) {
                            dc[c] = d_image[idx * 3 + c];
                        }
                    }
                    let dd = d_opacity[idx];
                    if dc == [0.0; 3] && dd == 0.0 {
                        continue;
                    }
                    let (start, len) = out.pixel_ranges[idx];
                    let pix = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                    let t_final = out.final_transmittance[idx];
                    let mut color_after = [t_final * out.background[0], t_final * out.background[1], t_final * out.background[2]];
                    let mut alpha_after = 0.0;
                    for ctb in out.contributions[start..start + len].iter().rev() {
                        let s = &out.splats[ctb.splat as usize];
                        let g = &mut acc[ctb.local as usize];
                        let w = ctb.alpha * ctb.transmittance;
                        let inv = 1.0 / (1.0 - ctb.alpha);
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            g.color[c] += dc[c] * w;
                            d_alpha += dc[c] * (s.color[c] * ctb.transmittance - color_after[c] * inv);
                            color_after[c] += s.color[c] * w;
                        }
                        d_alpha += dd * (ctb.transmittance - alpha_after * inv);
                        alpha_after += w;
                        if ctb.clamped {
                            continue;
                        }
                        g.opacity += d_alpha * ctb.alpha / s.base_opacity;
                        let d_power = d_alpha * ctb.alpha;
                        let d = pix - s.mean2d;
                        let q = &s.conic;
                        g.mean[0] += d_power * (q[(0, 0)] * d.x + q[(0, 1)] * d.y);
                        g.mean[1] += d_power * (q[(0, 1)] * d.x + q[(1, 1)] * d.y);
                        g.conic[0] += d_power * (-0.5 * d.x * d.x);
                        g.conic[1] += d_power * (-0.5 * d.x * d.y);
                        g.conic[2] += d_power * (-0.5 * d.y * d.y);
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = vec![Grad2D::default(); out.splats.len()];
    for (list, acc) in out.tile_lists.iter().zip(&per_tile) {
        for (&si, g) in list.iter().zip(acc) {
            total[si as usize].add(g);
        }
    }
    total
}

fn backward_impl(
    field: &GaussianField,
    camera: &Camera,
    out: &RenderOutput,
    d_image: &[f64],
    d_opacity: &[f64],
) -> Result<(FieldGradients, Vec<PositionGradSplit>)> {
    check_cotangents(out, d_image, d_opacity)?;
    if out.field_len != field.len() {
        return Err(Error::InvalidInput("render output was produced from a different field".into()));
    }
    let screen = screen_space_grads(out, d_image, d_opacity);
    let w = camera.rotation_matrix();
    let (fx, fy) = (camera.fx, camera.fy);
    let degree = field.sh_degree;
    let per_splat: Vec<(usize, GaussianGrad, PositionGradSplit)> = out
        .splats
        .par_iter()
        .zip(screen.par_iter())
        .map(|(s, g2)| {
            let g = &field.gaussians[s.source];
            let mut grad = GaussianGrad::zeros(g.sh.len());

            // Color: SH coefficients and view direction.
            let basis = sh_basis(degree, &s.view_dir);
            for (k, y) in basis.iter().enumerate() {
                for c in 0..3 {
                    grad.sh[k][c] = g2.color[c] * y;
                }
            }
            let basis_grad = sh_basis_grad(degree, &s.view_dir);
            let mut d_dir = Vector3::zeros();
            for (k, dy) in basis_grad.iter().enumerate() {
                let w_k: f64 = (0..3).map(|c| g2.color[c] * g.sh[k][c]).sum();
                d_dir += dy * w_k;
            }
            let dir = s.view_dir;
            let color_path = (d_dir - dir * dir.dot(&d_dir)) / s.view_dist;

            // Opacity.
            grad.opacity_logit = g2.opacity * s.base_opacity * (1.0 - s.base_opacity);

            // Conic -> 2D covariance -> view covariance and Jacobian.
            let gq = Matrix2::new(g2.conic[0], g2.conic[1], g2.conic[1], g2.conic[2]);
            let g_cov2d = -(s.conic * gq * s.conic);
            let j = &s.jacobian;
            let g_view_cov = j.transpose() * g_cov2d * j;
            let g_j = 2.0 * g_cov2d * j * s.view_cov;

            let p = s.p_cam;
            let iz = 1.0 / p.z;
            let iz2 = iz * iz;
            let mut d_p = Vector3::new(g2.mean[0] * fx * iz, g2.mean[1] * fy * iz, -(g2.mean[0] * fx * p.x + g2.mean[1] * fy * p.y) * iz2);
            d_p.z += g_j[(0, 0)] * (-fx * iz2) + g_j[(1, 1)] * (-fy * iz2);
            d_p.x += g_j[(0, 2)] * (-fx * iz2);
            d_p.z += g_j[(0, 2)] * (2.0 * fx * p.x * iz2 * iz);
            d_p.y += g_j[(1, 2)] * (-fy * iz2);
            d_p.z += g_j[(1, 2)] * (2.0 * fy * p.y * iz2 * iz);
            let opacity_path = w.transpose() * d_p;
            grad.position = color_path + opacity_path;

            // World covariance -> scale and rotation.
            let g_sigma = w.transpose() * g_view_cov * w;
            let g_sigma = 0.5 * (g_sigma + g_sigma.transpose());
            let q_raw = g.rotation;
            let q_norm = q_raw.norm();
            let q_hat = renormalize(q_raw);
            let r = quat_to_matrix(&q_hat);
            let scale = g.log_scale.map(f64::exp);
            let m = r * Matrix3::from_diagonal(&scale);
            let g_m = 2.0 * g_sigma * m;
            let mut g_r = Matrix3::zeros();
            for i in 0..3 {
                let mut acc = 0.0;
                for row in 0..3 {
                    acc += g_m[(row, i)] * r[(row, i)];
                    g_r[(row, i)] = g_m[(row, i)] * scale[i];
                }
                grad.log_scale[i] = acc * scale[i];
            }
            let g_qhat = quat_to_matrix_grad(&q_hat, &g_r);
            let qh = [q_hat.w, q_hat.i, q_hat.j, q_hat.k];
            let dot: f64 = (0..4).map(|i| g_qhat[i] * qh[i]).sum();
            for i in 0..4 {
                grad.rotation[i] = (g_qhat[i] - qh[i] * dot) / q_norm;
            }
            (s.source, grad, PositionGradSplit { color_path, opacity_path })
        })
        .collect();

    let mut grads = FieldGradients::zeros(field);
    let mut splits = vec![PositionGradSplit { color_path: Vector3::zeros(), opacity_path: Vector3::zeros() }; field.len()];
    for (src, g, split) in per_splat {
        grads.gaussians[src] = g;
        splits[src] = split;
    }
    Ok((grads, splits))
}

/// Exact adjoint of [`render`] for the image and accumulated-opacity outputs.
pub fn backward(
    field: &GaussianField,
    camera: &Camera,
    out: &RenderOutput,
    d_image: &[f64],
    d_opacity: &[f64],
) -> Result<FieldGradients> {
    backward_impl(field, camera, out, d_image, d_opacity).map(|(g, _)| g)
}

/// Splits each Gaussian's positional gradient into the part flowing through
/// its view-dependent color and the part flowing through its alpha footprint.
pub fn gradient_decomposition(
    field: &GaussianField,
    camera: &Camera,
    out: &RenderOutput,
    d_image: &[f64],
) -> Result<Vec<PositionGradSplit>> {
    let zeros = vec![0.0; out.image.pixel_count()];
    backward_impl(field, camera, out, d_image, &zeros).map(|(_, s)| s)
}

/// Renders `field` and returns the pixel-wise accumulated opacity only.
pub fn render_opacity(field: &GaussianField, camera: &Camera) -> Result<OpacityMap> {
    if field.is_empty() {
        return Ok(ScalarMap::new(camera.width, camera.height));
    }
    Ok(render(field, camera, &RenderSettings::default())?.opacity)
}
