//! Scene representation: Gaussians, cameras, images and per-pixel maps.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest supported spherical-harmonics degree.
pub const MAX_SH_DEGREE: usize = 3;

const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of SH coefficients per color channel for `degree`.
pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rescales `q` to unit norm.
///
/// Quaternions already within a few ulps of unit norm are returned untouched,
/// which makes the operation idempotent bit-for-bit.
pub fn renormalize(q: Quaternion<f64>) -> Quaternion<f64> {
    let n = q.norm();
    if (n - 1.0).abs() <= 1e-15 || n == 0.0 {
        q
    } else {
        q / n
    }
}

/// Rotation matrix of a unit quaternion given as (w, x, y, z).
pub(crate) fn quat_to_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Back-propagates a gradient on the rotation matrix to the unit quaternion
/// that produced it (before normalization).
pub(crate) fn quat_to_matrix_grad(q: &Quaternion<f64>, g: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)]
            + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// `Σ = R · diag(exp(log_scale))² · Rᵀ`.
pub fn compose_covariance(log_scale: &Vector3<f64>, rotation: &Quaternion<f64>) -> Result<Matrix3<f64>> {
    if log_scale.iter().any(|v| !v.is_finite()) || rotation.coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite covariance parameters".into()));
    }
    if (rotation.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidParameter(format!(
            "rotation quaternion has norm {}, expected 1",
            rotation.norm()
        )));
    }
    Ok(covariance_from(log_scale, &quat_to_matrix(rotation)))
}

pub(crate) fn covariance_from(log_scale: &Vector3<f64>, r: &Matrix3<f64>) -> Matrix3<f64> {
    let s = log_scale.map(f64::exp);
    let m = r * Matrix3::from_diagonal(&s);
    m * m.transpose()
}

/// Real SH basis up to `degree`, evaluated at a unit direction.
pub fn sh_basis(degree: usize, dir: &Vector3<f64>) -> Vec<f64> {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut out = Vec::with_capacity(sh_coeff_count(degree));
    out.push(SH_C0);
    if degree >= 1 {
        out.extend([-SH_C1 * y, SH_C1 * z, -SH_C1 * x]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.extend([
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.extend([
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]);
    }
    out
}

/// Partial derivatives of every basis function with respect to the
/// (unnormalized) direction components.
pub(crate) fn sh_basis_grad(degree: usize, dir: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let v = Vector3::new;
    let mut out = Vec::with_capacity(sh_coeff_count(degree));
    out.push(Vector3::zeros());
    if degree >= 1 {
        out.extend([v(0.0, -SH_C1, 0.0), v(0.0, 0.0, SH_C1), v(-SH_C1, 0.0, 0.0)]);
    }
    if degree >= 2 {
        let c = SH_C2;
        out.extend([
            v(c[0] * y, c[0] * x, 0.0),
            v(0.0, c[1] * z, c[1] * y),
            v(-2.0 * c[2] * x, -2.0 * c[2] * y, 4.0 * c[2] * z),
            v(c[3] * z, 0.0, c[3] * x),
            v(2.0 * c[4] * x, -2.0 * c[4] * y, 0.0),
        ]);
    }
    if degree >= 3 {
        let c = SH_C3;
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.extend([
            v(6.0 * c[0] * x * y, c[0] * (3.0 * xx - 3.0 * yy), 0.0),
            v(c[1] * y * z, c[1] * x * z, c[1] * x * y),
            v(-2.0 * c[2] * x * y, c[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * c[2] * y * z),
            v(-6.0 * c[3] * x * z, -6.0 * c[3] * y * z, c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)),
            v(c[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * c[4] * x * y, 8.0 * c[4] * x * z),
            v(2.0 * c[5] * x * z, -2.0 * c[5] * y * z, c[5] * (xx - yy)),
            v(c[6] * (3.0 * xx - 3.0 * yy), -6.0 * c[6] * x * y, 0.0),
        ]);
    }
    out
}

/// View-dependent color: `0.5 + Σ c_lm · Y_lm(dir)` per channel, unclamped.
pub fn eval_sh(sh_coeffs: &[[f64; 3]], sh_degree: usize, view_dir: &Vector3<f64>) -> Result<[f64; 3]> {
    if sh_degree > MAX_SH_DEGREE {
        return Err(Error::InvalidParameter(format!("SH degree {sh_degree} exceeds {MAX_SH_DEGREE}")));
    }
    if sh_coeffs.len() != sh_coeff_count(sh_degree) {
        return Err(Error::InvalidParameter(format!(
            "degree {sh_degree} needs {} coefficients, got {}",
            sh_coeff_count(sh_degree),
            sh_coeffs.len()
        )));
    }
    Ok(sh_color(sh_coeffs, &sh_basis(sh_degree, view_dir)))
}

pub(crate) fn sh_color(sh_coeffs: &[[f64; 3]], basis: &[f64]) -> [f64; 3] {
    let mut rgb = [0.5; 3];
    for (coeff, y) in sh_coeffs.iter().zip(basis) {
        for c in 0..3 {
            rgb[c] += coeff[c] * y;
        }
    }
    rgb
}

/// Degree-0 SH coefficient reproducing `color` after the 0.5 offset.
pub fn rgb_to_sh_dc(color: f64) -> f64 {
    (color - 0.5) / SH_C0
}

/// A single anisotropic 3D Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Log of the per-axis standard deviation.
    pub log_scale: Vector3<f64>,
    /// Unit quaternion (w, x, y, z).
    pub rotation: Quaternion<f64>,
    pub opacity_logit: f64,
    /// `(L+1)²` RGB coefficient triples.
    pub sh: Vec<[f64; 3]>,
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_from(&self.log_scale, &quat_to_matrix(&renormalize(self.rotation)))
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }

    /// Flat parameter vector: position, log_scale, rotation (w,x,y,z),
    /// opacity_logit, then SH coefficients coefficient-major.
    pub fn to_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(11 + 3 * self.sh.len());
        p.extend(self.position.iter());
        p.extend(self.log_scale.iter());
        p.extend([self.rotation.w, self.rotation.i, self.rotation.j, self.rotation.k]);
        p.push(self.opacity_logit);
        p.extend(self.sh.iter().flatten());
        p
    }

    pub fn from_params(p: &[f64]) -> Result<Self> {
        if p.len() < 14 || (p.len() - 11) % 3 != 0 {
            return Err(Error::InvalidInput(format!("bad Gaussian parameter length {}", p.len())));
        }
        Ok(Gaussian {
            position: Vector3::new(p[0], p[1], p[2]),
            log_scale: Vector3::new(p[3], p[4], p[5]),
            rotation: Quaternion::new(p[6], p[7], p[8], p[9]),
            opacity_logit: p[10],
            sh: p[11..].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }
}

/// An ordered collection of Gaussians sharing one SH degree.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: usize,
}

impl GaussianField {
    pub fn new(sh_degree: usize) -> Self {
        GaussianField { gaussians: Vec::new(), sh_degree }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Checks the shared-degree invariant.
    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::InvalidParameter(format!("SH degree {} too large", self.sh_degree)));
        }
        let k = sh_coeff_count(self.sh_degree);
        if let Some(i) = self.gaussians.iter().position(|g| g.sh.len() != k) {
            return Err(Error::InvalidParameter(format!(
                "Gaussian {i} has {} SH coefficients, field degree {} needs {k}",
                self.gaussians[i].sh.len(),
                self.sh_degree
            )));
        }
        Ok(())
    }

    /// Concatenation of two fields of equal degree.
    pub fn union(&self, other: &GaussianField) -> GaussianField {
        debug_assert_eq!(self.sh_degree, other.sh_degree);
        let mut gaussians = self.gaussians.clone();
        gaussians.extend(other.gaussians.iter().cloned());
        GaussianField { gaussians, sh_degree: self.sh_degree }
    }

    pub fn all_finite(&self) -> bool {
        self.gaussians.iter().all(Gaussian::is_finite)
    }
}

/// Pinhole camera with a world-to-camera pose. The camera looks down +z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation (w, x, y, z).
    pub rotation: [f64; 4],
    /// World-to-camera translation (camera frame).
    pub translation: [f64; 3],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidParameter("principal point outside the image".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("empty image size".into()));
        }
        if (self.quaternion().norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter("camera rotation is not unit".into()));
        }
        Ok(())
    }

    pub fn quaternion(&self) -> Quaternion<f64> {
        let [w, x, y, z] = self.rotation;
        Quaternion::new(w, x, y, z)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&renormalize(self.quaternion()))
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Camera center in world coordinates: `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation()
    }

    /// World-space unit ray direction through pixel coordinates `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation_matrix().transpose() * d_cam).normalize()
    }

    /// Builds a camera at `eye` looking at `target` with the given world up
    /// vector (image y axis points along `-up`).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let forward = (target - eye).normalize();
        let right = (-up).cross(&forward).normalize();
        let down = forward.cross(&right).normalize();
        // Rows of the world-to-camera rotation are the camera axes in world space.
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let q = UnitQuaternion::from_matrix(&r).into_inner();
        let q = if q.w < 0.0 { -q } else { q };
        let t = -(r * eye);
        Camera {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation: [q.w, q.i, q.j, q.k],
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn same_intrinsics(&self, other: &Camera) -> bool {
        self.fx == other.fx
            && self.fy == other.fy
            && self.cx == other.cx
            && self.cy == other.cy
            && self.width == other.width
            && self.height == other.height
    }
}

/// Row-major RGB image with one `f64` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuffer { width, height, rgb: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.rgb.chunks_exact_mut(3) {
            px.copy_from_slice(&color);
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, rgb: Vec<f64>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::InvalidInput(format!(
                "expected {} values for a {width}x{height} RGB image, got {}",
                width * height * 3,
                rgb.len()
            )));
        }
        Ok(ImageBuffer { width, height, rgb })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn clamped(&self) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            rgb: self.rgb.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Single-channel per-pixel map (accumulated opacity, depth, weights).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize) -> Self {
        ScalarMap { width, height, values: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        ScalarMap { width, height, values: vec![v; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

/// Accumulated alpha `Σ α_k T_k` per pixel.
pub type OpacityMap = ScalarMap;

/// Per-pixel transient weight in `[0, 1]`; 1 marks transient content.
#[derive(Clone, Debug, PartialEq)]
pub struct TransientMask(ScalarMap);

impl TransientMask {
    pub fn new(map: ScalarMap) -> Result<Self> {
        if let Some(v) = map.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("mask value {v} outside [0, 1]")));
        }
        Ok(TransientMask(map))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        TransientMask(ScalarMap::new(width, height))
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        TransientMask(ScalarMap::filled(width, height, v.clamp(0.0, 1.0)))
    }

    /// Clamps arbitrary values into a valid mask.
    pub fn from_clamped(map: ScalarMap) -> Self {
        let values = map.values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        TransientMask(ScalarMap { values, ..map })
    }

    pub fn complement(&self) -> TransientMask {
        TransientMask(ScalarMap {
            width: self.0.width,
            height: self.0.height,
            values: self.0.values.iter().map(|v| 1.0 - v).collect(),
        })
    }

    pub fn into_inner(self) -> ScalarMap {
        self.0
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.values.iter().all(|&v| v == 0.0)
    }
}

impl std::ops::Deref for TransientMask {
    type Target = ScalarMap;
    fn deref(&self) -> &ScalarMap {
        &self.0
    }
}
