//! Test-only oracles and generators shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix3, Quaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wildsplat::colmap::{CameraModel, CameraRecord, ImageRecord, Point2D, Point3D, SfmModel};
use wildsplat::raster::{render, RenderSettings};
use wildsplat::scene::{sh_coeff_count, Camera, Gaussian, GaussianField};

pub fn camera(w: usize, h: usize) -> Camera {
    Camera::look_at(
        Vector3::new(0.3, -0.2, -3.0),
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(0.0, -1.0, 0.0),
        40.0,
        42.0,
        w,
        h,
    )
}

pub fn random_field(seed: u64, n: usize, degree: usize, max_opacity: f64) -> GaussianField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = sh_coeff_count(degree);
    let gaussians = (0..n)
        .map(|_| {
            let q = Quaternion::new(
                rng.random_range(0.2..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            );
            let opacity: f64 = rng.random_range(0.05..max_opacity);
            let mut sh: Vec<[f64; 3]> = vec![[0.0; 3]; k];
            sh[0] = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
            for c in sh.iter_mut().skip(1) {
                *c = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
            }
            Gaussian {
                position: Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)),
                log_scale: Vector3::new(rng.random_range(-2.6..-1.6), rng.random_range(-2.6..-1.6), rng.random_range(-2.6..-1.6)),
                rotation: q / q.norm(),
                opacity_logit: (opacity / (1.0 - opacity)).ln(),
                sh,
            }
        })
        .collect();
    GaussianField { gaussians, sh_degree: degree }
}

// Textbook formulas written out independently of the library.
fn sh_rgb(g: &Gaussian, degree: usize, d: Vector3<f64>) -> [f64; 3] {
    let c0 = 0.28209479177387814;
    let c1 = 0.4886025119029199;
    let mut basis = vec![c0];
    if degree >= 1 {
        basis.extend([-c1 * d.y, c1 * d.z, -c1 * d.x]);
    }
    assert!(degree <= 1, "oracle covers degree ≤ 1");
    let mut out = [0.5; 3];
    for (k, b) in basis.iter().enumerate() {
        for c in 0..3 {
            out[c] += b * g.sh[k][c];
        }
    }
    out
}

/// Per-pixel front-to-back compositing over every Gaussian, with no tiling
/// or culling beyond the near plane. Returns (rgb, accumulated alpha).
pub fn brute_force(field: &GaussianField, cam: &Camera, bg: [f64; 3]) -> (Vec<f64>, Vec<f64>) {
    let w = cam.rotation_matrix();
    let t = cam.translation();
    let center = -w.transpose() * t;
    struct P {
        depth: f64,
        idx: usize,
        mean: Vector2<f64>,
        conic: Matrix2<f64>,
        alpha0: f64,
        rgb: [f64; 3],
    }
    let mut ps = Vec::new();
    for (idx, g) in field.gaussians.iter().enumerate() {
        let pc = w * g.position + t;
        if pc.z <= 0.01 {
            continue;
        }
        let q = nalgebra::UnitQuaternion::from_quaternion(g.rotation);
        let r = q.to_rotation_matrix().into_inner();
        let s = Matrix3::from_diagonal(&g.log_scale.map(f64::exp));
        let sigma = r * s * s * r.transpose();
        let j = nalgebra::Matrix2x3::new(
            cam.fx / pc.z,
            0.0,
            -cam.fx * pc.x / (pc.z * pc.z),
            0.0,
            cam.fy / pc.z,
            -cam.fy * pc.y / (pc.z * pc.z),
        );
        let cov = j * w * sigma * w.transpose() * j.transpose() + Matrix2::identity() * 0.3;
        ps.push(P {
            depth: pc.z,
            idx,
            mean: Vector2::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy),
            conic: cov.try_inverse().unwrap(),
            alpha0: 1.0 / (1.0 + (-g.opacity_logit).exp()),
            rgb: sh_rgb(g, field.sh_degree, (g.position - center).normalize()),
        });
    }
    ps.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.idx.cmp(&b.idx)));
    let mut img = vec![0.0; cam.width * cam.height * 3];
    let mut acc = vec![0.0; cam.width * cam.height];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let pix = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut trans = 1.0;
            let mut c = [0.0; 3];
            let mut a = 0.0;
            for p in &ps {
                let d = pix - p.mean;
                let alpha = (p.alpha0 * (-0.5 * (d.transpose() * p.conic * d)[(0, 0)]).exp()).min(0.99);
                for k in 0..3 {
                    c[k] += p.rgb[k] * alpha * trans;
                }
                a += alpha * trans;
                trans *= 1.0 - alpha;
                // Compositing stops once the ray is nearly opaque.
                if trans < 1e-4 {
                    break;
                }
            }
            let i = y * cam.width + x;
            for k in 0..3 {
                img[3 * i + k] = (c[k] + trans * bg[k]).clamp(0.0, 1.0);
            }
            acc[i] = a;
        }
    }
    (img, acc)
}

/// `Σ wi·image + Σ wa·opacity`, whose gradient is what `backward` returns for
/// cotangents `(wi, wa)`.
pub fn weighted_loss(field: &GaussianField, cam: &Camera, wi: &[f64], wa: &[f64]) -> f64 {
    let out = render(field, cam, &RenderSettings::default()).unwrap();
    out.image.rgb.iter().zip(wi).map(|(a, b)| a * b).sum::<f64>() + out.opacity.values.iter().zip(wa).map(|(a, b)| a * b).sum::<f64>()
}

fn finite(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    // Mix short decimals with full-precision values.
    if rng.random_bool(0.3) {
        (rng.random_range(-scale..scale) * 100.0).round() / 100.0
    } else {
        rng.random_range(-scale..scale)
    }
}

/// A structurally valid sparse model with cross-referenced tracks.
pub fn random_sfm_model(seed: u64) -> SfmModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SfmModel::default();
    let n_cams = rng.random_range(1..4u32);
    for k in 0..n_cams {
        let id = k * rng.random_range(1..5u32) + k + 1;
        let (w, h) = (rng.random_range(16..4096u64), rng.random_range(16..4096u64));
        let record = if rng.random_bool(0.5) {
            CameraRecord { model: CameraModel::Pinhole, width: w, height: h, params: vec![rng.random_range(10.0..5000.0), rng.random_range(10.0..5000.0), w as f64 / 2.0, h as f64 / 2.0] }
        } else {
            CameraRecord { model: CameraModel::SimplePinhole, width: w, height: h, params: vec![rng.random_range(10.0..5000.0), w as f64 / 2.0 - 0.5, h as f64 / 2.0 - 0.5] }
        };
        model.cameras.insert(id, record);
    }
    let cam_ids: Vec<u32> = model.cameras.keys().copied().collect();
    let n_points = rng.random_range(1..40u64);
    let point_ids: Vec<u64> = (0..n_points).map(|k| k * 3 + rng.random_range(0..3u64) + 1).collect();
    let n_images = rng.random_range(1..6u32);
    let mut tracks: BTreeMap<u64, Vec<(u32, u32)>> = BTreeMap::new();
    for k in 0..n_images {
        let id = 2 * k + rng.random_range(1..3u32);
        let q = Quaternion::new(rng.random_range(0.1..1.0), finite(&mut rng, 1.0), finite(&mut rng, 1.0), finite(&mut rng, 1.0)).normalize();
        let n_obs = rng.random_range(0..12usize);
        let points2d = (0..n_obs)
            .map(|idx| {
                let pid = (!point_ids.is_empty() && rng.random_bool(0.7)).then(|| point_ids[rng.random_range(0..point_ids.len())]);
                if let Some(pid) = pid {
                    tracks.entry(pid).or_default().push((id, idx as u32));
                }
                Point2D { x: finite(&mut rng, 2000.0).abs(), y: finite(&mut rng, 2000.0).abs(), point3d_id: pid }
            })
            .collect();
        model.images.insert(
            id,
            ImageRecord {
                qvec: [q.w, q.i, q.j, q.k],
                tvec: [finite(&mut rng, 10.0), finite(&mut rng, 10.0), finite(&mut rng, 10.0)],
                camera_id: cam_ids[rng.random_range(0..cam_ids.len())],
                name: format!("img_{seed}_{k:03}.jpg"),
                points2d,
            },
        );
    }
    for pid in point_ids {
        model.points.insert(
            pid,
            Point3D {
                xyz: [finite(&mut rng, 5.0), finite(&mut rng, 5.0), finite(&mut rng, 5.0)],
                rgb: [rng.random(), rng.random(), rng.random()],
                error: rng.random_range(0.0..3.0),
                track: tracks.remove(&pid).unwrap_or_default(),
            },
        );
    }
    model
}
