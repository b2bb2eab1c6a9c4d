//! Photometric losses, pixel weighting and image-quality metrics.
//!
//! Every loss is a per-pixel map reduced by its mean. The `*_grad` functions
//! differentiate with respect to the first image only; the target and any
//! pixel weights are treated as constants.

use crate::error::{Error, Result};
use crate::scene::{ImageBuffer, OpacityMap, ScalarMap, TransientMask};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_OPACITY_FLOOR: f64 = 0.1;
pub const PSNR_CAP: f64 = 99.0;

/// Per-pixel non-negative loss values.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMap(pub ScalarMap);

impl LossMap {
    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    pub fn mean(&self) -> f64 {
        self.0.mean()
    }
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::InvalidInput(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn check_map(w: usize, h: usize, m: &ScalarMap, what: &str) -> Result<()> {
    if m.width != w || m.height != h {
        return Err(Error::InvalidInput(format!("{what} is {}x{}, expected {w}x{h}", m.width, m.height)));
    }
    Ok(())
}

pub fn l1_map(a: &ImageBuffer, b: &ImageBuffer) -> Result<LossMap> {
    check_dims(a, b)?;
    let values = a
        .rgb
        .chunks_exact(3)
        .zip(b.rgb.chunks_exact(3))
        .map(|(p, q)| ((p[0] - q[0]).abs() + (p[1] - q[1]).abs() + (p[2] - q[2]).abs()) / 3.0)
        .collect();
    Ok(LossMap(ScalarMap { width: a.width, height: a.height, values }))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Zero-padded "same" convolution with the separable SSIM window.
fn blur(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = xx as isize + i as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * x[y * w + sx as usize];
                }
            }
            tmp[y * w + xx] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = y as isize + i as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[sy as usize * w + xx];
                }
            }
            out[y * w + xx] = acc;
        }
    }
    out
}

struct SsimChannel {
    s: Vec<f64>,
    // Partial derivatives of the per-pixel index with respect to the local
    // mean of `a`, the windowed a·a and the windowed a·b.
    d_mean: Vec<f64>,
    d_aa: Vec<f64>,
    d_ab: Vec<f64>,
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW], with_grad: bool) -> SsimChannel {
    let ma = blur(a, w, h, k);
    let mb = blur(b, w, h, k);
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let eaa = blur(&sq(a, a), w, h, k);
    let ebb = blur(&sq(b, b), w, h, k);
    let eab = blur(&sq(a, b), w, h, k);
    let n = w * h;
    let mut out = SsimChannel {
        s: vec![0.0; n],
        d_mean: if with_grad { vec![0.0; n] } else { Vec::new() },
        d_aa: if with_grad { vec![0.0; n] } else { Vec::new() },
        d_ab: if with_grad { vec![0.0; n] } else { Vec::new() },
    };
    for i in 0..n {
        let (mu_a, mu_b) = (ma[i], mb[i]);
        let var_a = eaa[i] - mu_a * mu_a;
        let var_b = ebb[i] - mu_b * mu_b;
        let cov = eab[i] - mu_a * mu_b;
        let a1 = 2.0 * mu_a * mu_b + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
        let b2 = var_a + var_b + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        out.s[i] = s;
        if with_grad {
            out.d_mean[i] = 2.0 * mu_b * (a2 - a1) / (b1 * b2) - s * (2.0 * mu_a / b1 - 2.0 * mu_a / b2);
            out.d_ab[i] = 2.0 * a1 / (b1 * b2);
            out.d_aa[i] = -s / b2;
        }
    }
    out
}

fn channel(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.rgb.iter().skip(c).step_by(3).copied().collect()
}

fn check_window(a: &ImageBuffer) -> Result<()> {
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    Ok(())
}

/// Mean SSIM and the per-pixel index averaged over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ScalarMap)> {
    check_dims(a, b)?;
    check_window(a)?;
    let k = gaussian_window();
    let (w, h) = (a.width, a.height);
    let mut map = ScalarMap::new(w, h);
    for c in 0..3 {
        let ch = ssim_channel(&channel(a, c), &channel(b, c), w, h, &k, false);
        for (m, s) in map.values.iter_mut().zip(ch.s) {
            *m += s / 3.0;
        }
    }
    Ok((map.mean(), map))
}

/// `(1 − SSIM) / 2` per pixel.
pub fn dssim_map(a: &ImageBuffer, b: &ImageBuffer) -> Result<LossMap> {
    let (_, mut map) = ssim(a, b)?;
    for v in map.values.iter_mut() {
        *v = (1.0 - *v) / 2.0;
    }
    Ok(LossMap(map))
}

/// `(1 − λ)·L1 + λ·D-SSIM` per pixel.
pub fn photometric_map(a: &ImageBuffer, b: &ImageBuffer, lambda: f64) -> Result<LossMap> {
    let mut l1 = l1_map(a, b)?;
    if lambda != 0.0 {
        let ds = dssim_map(a, b)?;
        for (v, d) in l1.0.values.iter_mut().zip(ds.values()) {
            *v = (1.0 - lambda) * *v + lambda * d;
        }
    }
    Ok(l1)
}

pub fn photometric(a: &ImageBuffer, b: &ImageBuffer, lambda: f64) -> Result<f64> {
    Ok(photometric_map(a, b, lambda)?.mean())
}

/// Divides each pixel by `max(D̂, floor)`.
pub fn reweight_by_opacity(map: &LossMap, opacity: &OpacityMap, floor: f64) -> Result<LossMap> {
    check_map(map.width(), map.height(), opacity, "opacity map")?;
    let w = opacity_weights(opacity, floor);
    Ok(LossMap(multiply(&map.0, &w)))
}

/// Keeps only static pixels: each value is scaled by `1 − mask`.
pub fn apply_static_mask(map: &LossMap, mask: &TransientMask) -> Result<LossMap> {
    check_map(map.width(), map.height(), mask, "mask")?;
    Ok(LossMap(multiply(&map.0, &static_weights(mask))))
}

pub fn static_weights(mask: &TransientMask) -> ScalarMap {
    ScalarMap { width: mask.width, height: mask.height, values: mask.values.iter().map(|m| 1.0 - m).collect() }
}

pub fn opacity_weights(opacity: &OpacityMap, floor: f64) -> ScalarMap {
    ScalarMap {
        width: opacity.width,
        height: opacity.height,
        values: opacity.values.iter().map(|d| 1.0 / d.max(floor)).collect(),
    }
}

fn multiply(a: &ScalarMap, b: &ScalarMap) -> ScalarMap {
    ScalarMap { width: a.width, height: a.height, values: a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect() }
}

/// Mean of `weights ⊙ photometric_map(render, target, λ)` and its gradient
/// with respect to `render` (interleaved RGB, one entry per channel value).
pub fn weighted_photometric_grad(
    render: &ImageBuffer,
    target: &ImageBuffer,
    lambda: f64,
    weights: Option<&ScalarMap>,
) -> Result<(f64, Vec<f64>)> {
    check_dims(render, target)?;
    let (w, h) = (render.width, render.height);
    if let Some(wm) = weights {
        check_map(w, h, wm, "weight map")?;
    }
    let n = w * h;
    let weight = |i: usize| weights.map_or(1.0, |m| m.values[i]);
    let mut grad = vec![0.0; 3 * n];
    let mut loss = 0.0;
    for i in 0..n {
        let wi = weight(i);
        let mut l1 = 0.0;
        for c in 0..3 {
            let d = render.rgb[3 * i + c] - target.rgb[3 * i + c];
            l1 += d.abs() / 3.0;
            grad[3 * i + c] = wi * (1.0 - lambda) * d.signum() * (d != 0.0) as u8 as f64 / (3.0 * n as f64);
        }
        loss += wi * (1.0 - lambda) * l1;
    }
    if lambda != 0.0 {
        check_window(render)?;
        let k = gaussian_window();
        for c in 0..3 {
            let a = channel(render, c);
            let b = channel(target, c);
            let ch = ssim_channel(&a, &b, w, h, &k, true);
            // d loss / d S at each pixel.
            let up: Vec<f64> = (0..n).map(|i| -weight(i) * lambda / (6.0 * n as f64)).collect();
            for (i, s) in ch.s.iter().enumerate() {
                loss += weight(i) * lambda * (1.0 - s) / 6.0;
            }
            let gm: Vec<f64> = up.iter().zip(&ch.d_mean).map(|(u, d)| u * d).collect();
            let gaa: Vec<f64> = up.iter().zip(&ch.d_aa).map(|(u, d)| u * d).collect();
            let gab: Vec<f64> = up.iter().zip(&ch.d_ab).map(|(u, d)| u * d).collect();
            let bm = blur(&gm, w, h, &k);
            let baa = blur(&gaa, w, h, &k);
            let bab = blur(&gab, w, h, &k);
            for i in 0..n {
                grad[3 * i + c] += bm[i] + 2.0 * a[i] * baa[i] + b[i] * bab[i];
            }
        }
    }
    Ok((loss / n as f64, grad))
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.rgb.iter().zip(&b.rgb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.rgb.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, max_val: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / m).log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_vec(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn l1_identity_and_extremes() {
        let a = random_image(1, 12, 12);
        assert!(l1_map(&a, &a).unwrap().values().iter().all(|v| *v == 0.0));
        let ones = ImageBuffer::filled(4, 4, [1.0; 3]);
        let zeros = ImageBuffer::filled(4, 4, [0.0; 3]);
        assert!(l1_map(&ones, &zeros).unwrap().values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn l1_mean_matches_direct_sum_seed_2() {
        let a = random_image(2, 13, 17);
        let b = random_image(102, 13, 17);
        let mut s = 0.0;
        for i in 0..a.rgb.len() {
            s += (a.rgb[i] - b.rgb[i]).abs();
        }
        let expected = s / a.rgb.len() as f64;
        assert!((l1_map(&a, &b).unwrap().mean() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_self_is_one() {
        let a = random_image(3, 20, 16);
        let (s, _) = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(dssim_map(&a, &a).unwrap().mean().abs() < 1e-12);
    }

    // Direct evaluation of the SSIM formula at one pixel with explicit window
    // sums, independent of the separable blur.
    fn direct_ssim_pixel(a: &[f64], b: &[f64], w: usize, h: usize, x: usize, y: usize) -> f64 {
        let r = 5isize;
        let g = |d: isize| (-(d * d) as f64 / (2.0 * 1.5 * 1.5)).exp();
        let norm: f64 = (-r..=r).map(g).sum::<f64>().powi(2);
        let (mut ma, mut mb, mut eaa, mut ebb, mut eab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for dy in -r..=r {
            for dx in -r..=r {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                    continue;
                }
                let k = g(dx) * g(dy) / norm;
                let (p, q) = (a[sy as usize * w + sx as usize], b[sy as usize * w + sx as usize]);
                ma += k * p;
                mb += k * q;
                eaa += k * p * p;
                ebb += k * q * q;
                eab += k * p * q;
            }
        }
        let (va, vb, cov) = (eaa - ma * ma, ebb - mb * mb, eab - ma * mb);
        ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
    }

    #[test]
    fn ssim_matches_direct_formula_on_biased_constant() {
        let (w, h) = (16, 14);
        let a = ImageBuffer::filled(w, h, [0.5; 3]);
        let b = ImageBuffer::filled(w, h, [0.6; 3]);
        let (s, map) = ssim(&a, &b).unwrap();
        let ac = channel(&a, 0);
        let bc = channel(&b, 0);
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let d = direct_ssim_pixel(&ac, &bc, w, h, x, y);
                assert!((map.get(x, y) - d).abs() < 1e-6);
                total += d;
            }
        }
        assert!((s - total / (w * h) as f64).abs() < 1e-6);
    }

    #[test]
    fn ssim_matches_direct_formula_on_random_pair() {
        let (w, h) = (15, 12);
        let a = random_image(8, w, h);
        let b = random_image(9, w, h);
        let (_, map) = ssim(&a, &b).unwrap();
        for &(x, y) in &[(0, 0), (7, 6), (14, 11), (3, 10)] {
            let d: f64 = (0..3).map(|c| direct_ssim_pixel(&channel(&a, c), &channel(&b, c), w, h, x, y)).sum::<f64>() / 3.0;
            assert!((map.get(x, y) - d).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_of_complement_is_low() {
        let a = ImageBuffer::filled(16, 16, [0.0; 3]);
        let b = ImageBuffer::filled(16, 16, [1.0; 3]);
        assert!(ssim(&a, &b).unwrap().0 < 0.05);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ImageBuffer::filled(10, 20, [0.5; 3]);
        assert!(matches!(ssim(&a, &a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn photometric_is_convex_combination() {
        let a = random_image(4, 16, 16);
        let b = random_image(5, 16, 16);
        let l1 = l1_map(&a, &b).unwrap().mean();
        let ds = dssim_map(&a, &b).unwrap().mean();
        assert!((photometric(&a, &b, 0.0).unwrap() - l1).abs() < 1e-12);
        assert!((photometric(&a, &b, 1.0).unwrap() - ds).abs() < 1e-12);
        assert!((photometric(&a, &b, 0.2).unwrap() - (0.8 * l1 + 0.2 * ds)).abs() < 1e-12);
    }

    #[test]
    fn reweighting_examples() {
        let map = LossMap(ScalarMap::filled(4, 4, 0.3));
        let same = reweight_by_opacity(&map, &ScalarMap::filled(4, 4, 1.0), 0.1).unwrap();
        assert_eq!(same, map);
        let doubled = reweight_by_opacity(&map, &ScalarMap::filled(4, 4, 0.5), 0.1).unwrap();
        assert!(doubled.values().iter().all(|v| (v - 0.6).abs() < 1e-15));
        let floor = reweight_by_opacity(&map, &ScalarMap::filled(4, 4, 0.0), 0.1).unwrap();
        assert!(floor.values().iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn static_mask_examples() {
        let map = LossMap(ScalarMap::filled(4, 4, 1.0));
        assert_eq!(apply_static_mask(&map, &TransientMask::zeros(4, 4)).unwrap(), map);
        assert_eq!(apply_static_mask(&map, &TransientMask::filled(4, 4, 1.0)).unwrap().mean(), 0.0);
        let mut checker = ScalarMap::new(4, 4);
        for (i, v) in checker.values.iter_mut().enumerate() {
            *v = ((i % 4 + i / 4) % 2) as f64;
        }
        let masked = apply_static_mask(&map, &TransientMask::new(checker).unwrap()).unwrap();
        assert_eq!(masked.values().iter().filter(|v| **v == 0.0).count(), 8);
        assert!((masked.mean() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(6, 8, 8);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let z = ImageBuffer::filled(8, 8, [0.0; 3]);
        assert!((psnr(&z, &ImageBuffer::filled(8, 8, [1.0; 3]), 1.0).unwrap()).abs() < 1e-12);
        assert!((psnr(&z, &ImageBuffer::filled(8, 8, [0.1; 3]), 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = ImageBuffer::new(12, 12);
        let b = ImageBuffer::new(12, 13);
        assert!(l1_map(&a, &b).is_err());
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn weighted_gradient_matches_finite_differences() {
        let (w, h) = (14, 13);
        let a = random_image(10, w, h);
        let b = random_image(11, w, h);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let wm = ScalarMap { width: w, height: h, values: (0..w * h).map(|_| rng.random_range(0.0..2.0)).collect() };
        let (loss, grad) = weighted_photometric_grad(&a, &b, 0.2, Some(&wm)).unwrap();
        let direct = LossMap(multiply(&photometric_map(&a, &b, 0.2).unwrap().0, &wm)).mean();
        assert!((loss - direct).abs() < 1e-12);
        let eps = 1e-6;
        for idx in [0, 5, 40, 200, 3 * w * h - 1] {
            let mut p = a.clone();
            p.rgb[idx] += eps;
            let mut m = a.clone();
            m.rgb[idx] -= eps;
            let fd = (weighted_photometric_grad(&p, &b, 0.2, Some(&wm)).unwrap().0
                - weighted_photometric_grad(&m, &b, 0.2, Some(&wm)).unwrap().0)
                / (2.0 * eps);
            assert!((fd - grad[idx]).abs() < 1e-7, "index {idx}: {fd} vs {}", grad[idx]);
        }
    }

    proptest! {
        #[test]
        fn losses_are_non_negative_and_bounded(seed in 0u64..1000, lambda in 0.0f64..=1.0) {
            let a = random_image(seed, 12, 12);
            let b = random_image(seed + 7, 12, 12);
            prop_assert!(photometric(&a, &b, lambda).unwrap() >= 0.0);
            prop_assert!(photometric(&a, &a, lambda).unwrap().abs() < 1e-12);
            let ds = dssim_map(&a, &b).unwrap();
            prop_assert!(ds.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn reweighting_is_monotone(d1 in 0.0f64..1.0, d2 in 0.0f64..1.0, v in 0.0f64..5.0) {
            let map = LossMap(ScalarMap::filled(1, 1, v));
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let at_lo = reweight_by_opacity(&map, &ScalarMap::filled(1, 1, lo), 0.1).unwrap().mean();
            let at_hi = reweight_by_opacity(&map, &ScalarMap::filled(1, 1, hi), 0.1).unwrap().mean();
            prop_assert!(at_lo >= at_hi);
        }

        #[test]
        fn complementary_masks_recompose(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
            let mask = TransientMask::new(ScalarMap { width: 6, height: 6, values: (0..36).map(|_| rng.random::<f64>()).collect() }).unwrap();
            let map = LossMap(ScalarMap { width: 6, height: 6, values: vals });
            let a = apply_static_mask(&map, &mask).unwrap();
            let b = apply_static_mask(&map, &mask.complement()).unwrap();
            for i in 0..36 {
                prop_assert!((a.values()[i] + b.values()[i] - map.values()[i]).abs() < 1e-15);
            }
        }
    }
}
