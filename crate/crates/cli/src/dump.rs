//! Diagnostic images: opacity heatmaps and mask overlays.

use wildsplat::{ImageBuffer, ScalarMap};

const RAMP: [[f64; 3]; 4] = [[0.0, 0.0, 0.0], [0.45, 0.05, 0.55], [0.95, 0.45, 0.1], [1.0, 1.0, 0.6]];

fn ramp(v: f64) -> [f64; 3] {
    let t = v.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let k = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - k as f64;
    std::array::from_fn(|c| RAMP[k][c] * (1.0 - f) + RAMP[k + 1][c] * f)
}

/// Colors a map with values in `[0, 1]`: dark where low, bright where high.
pub fn heatmap(map: &ScalarMap) -> ImageBuffer {
    let rgb = map.values.iter().flat_map(|v| ramp(*v)).collect();
    ImageBuffer { width: map.width, height: map.height, rgb }
}

/// Tints `image` red in proportion to `mask`.
pub fn mask_overlay(image: &ImageBuffer, mask: &ScalarMap) -> ImageBuffer {
    let mut out = image.clone();
    for (px, m) in out.rgb.chunks_exact_mut(3).zip(&mask.values) {
        let a = 0.6 * m.clamp(0.0, 1.0);
        px[0] = px[0] * (1.0 - a) + a;
        px[1] *= 1.0 - a;
        px[2] *= 1.0 - a;
    }
    out
}
