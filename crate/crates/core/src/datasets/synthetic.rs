//! Procedural fundus-like images: bright curvilinear structures of known
//! width on a noisy, unevenly lit background.

use std::f32::consts::TAU;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FundusSample, LabelMask};

pub const DEFAULT_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub size: usize,
    pub curves: usize,
    pub min_width: u8,
    pub max_width: u8,
    pub noise_std: f32,
    /// Range of the intensity step a structure adds over the background.
    pub contrast: (f32, f32),
    /// Contrast scales with `(width / max_width)^width_falloff`, so thin
    /// structures are fainter. 0 disables the scaling.
    pub width_falloff: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: DEFAULT_SIZE,
            curves: 14,
            min_width: 1,
            max_width: 7,
            noise_std: 0.05,
            contrast: (0.15, 0.35),
            width_falloff: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub sample: FundusSample,
    /// Nominal width of the structure covering each pixel; 0 on background.
    pub widths: Array2<u8>,
}

pub fn generate(id: &str, cfg: &SyntheticConfig, rng: &mut impl Rng) -> SyntheticSample {
    let n = cfg.size;
    let mut widths = Array2::<u8>::zeros((n, n));
    let mut boost = Array2::<f32>::zeros((n, n));
    for _ in 0..cfg.curves {
        let width = rng.gen_range(cfg.min_width..=cfg.max_width);
        let contrast = rng.gen_range(cfg.contrast.0..cfg.contrast.1)
            * (width as f32 / cfg.max_width as f32).powf(cfg.width_falloff);
        trace_curve(&mut widths, &mut boost, width, contrast, rng);
    }
    let phase: (f32, f32) = (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU));
    let noise = Normal::new(0.0f32, cfg.noise_std).expect("noise std is finite");
    let mut image = Array3::<f32>::zeros((3, n, n));
    for y in 0..n {
        for x in 0..n {
            let light = 0.35 + 0.1 * (x as f32 / 40.0 + phase.0).sin() * (y as f32 / 50.0 + phase.1).cos();
            let v = light + boost[[y, x]] + noise.sample(rng);
            image[[0, y, x]] = (0.8 * v + 0.1).clamp(0.0, 1.0);
            image[[1, y, x]] = v.clamp(0.0, 1.0);
            image[[2, y, x]] = (0.5 * v + noise.sample(rng) * 0.5).clamp(0.0, 1.0);
        }
    }
    let label = LabelMask::from_bools(&widths.mapv(|w| w > 0));
    let sample = FundusSample::new(id, image, label, None).expect("generated arrays share a shape");
    SyntheticSample { sample, widths }
}

fn trace_curve(
    widths: &mut Array2<u8>,
    boost: &mut Array2<f32>,
    width: u8,
    contrast: f32,
    rng: &mut impl Rng,
) {
    let (h, w) = widths.dim();
    let size = h.min(w) as f64;
    let mut y = rng.gen_range(0.0..h as f64);
    let mut x = rng.gen_range(0.0..w as f64);
    let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let length = rng.gen_range(0.4..1.2) * size;
    let bend = Normal::new(0.0, 0.04).expect("finite std");
    let radius = width as f64 / 2.0;
    let reach = radius.ceil() as isize + 1;
    let step = 0.5;
    let mut travelled = 0.0;
    while travelled < length {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let py = y.round() as isize + dy;
                let px = x.round() as isize + dx;
                if py < 0 || px < 0 || py >= h as isize || px >= w as isize {
                    continue;
                }
                let ey = py as f64 - y;
                let ex = px as f64 - x;
                let r2 = ey * ey + ex * ex;
                if r2 <= radius * radius {
                    let cell = &mut widths[[py as usize, px as usize]];
                    *cell = if *cell == 0 { width } else { (*cell).min(width) };
                }
                // cylindrical cross-section, fading over half a pixel past the edge
                let outer = radius + 0.5;
                if r2 < outer * outer {
                    let v = contrast * (1.0 - r2 / (outer * outer)).sqrt() as f32;
                    let b = &mut boost[[py as usize, px as usize]];
                    *b = b.max(v);
                }
            }
        }
        heading += bend.sample(rng);
        y += step * heading.sin();
        x += step * heading.cos();
        travelled += step;
        if y < -2.0 || x < -2.0 || y > h as f64 + 1.0 || x > w as f64 + 1.0 {
            break;
        }
    }
}

/// `count` samples with ids `{prefix}{index:02}`.
pub fn generate_set(prefix: &str, count: usize, cfg: &SyntheticConfig, seed: u64) -> Vec<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| generate(&format!("{prefix}{i:02}"), cfg, &mut rng))
        .collect()
}

/// Fixed 16-train / 8-test synthetic dataset used by the CLI.
pub fn default_dataset() -> Vec<SyntheticSample> {
    let cfg = SyntheticConfig::default();
    let mut out = generate_set("syn_train_", 16, &cfg, 0);
    out.extend(generate_set("syn_test_", 8, &cfg, 1));
    out
}
