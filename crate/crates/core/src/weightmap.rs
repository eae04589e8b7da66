//! Distance-transform vessel weight maps and weighted cross-entropy.
//!
//! The weight of a pixel is `alpha * exp(-d^2 / beta^2)` where `d` is the
//! exact Euclidean distance to the nearest vessel pixel, so vessels and the
//! gaps between nearby vessels are penalised most.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::datasets::LabelMask;
use crate::error::{shape_err, Error, Result};
use crate::imageio;

/// Exact squared Euclidean distance transform of `seeds` (distance from every
/// pixel to the nearest `true` pixel) together with the coordinates of that
/// nearest pixel. Pixels are unreachable (`f64::INFINITY`) only when `seeds`
/// has no `true` entry.
pub fn squared_edt(seeds: ArrayView2<bool>) -> (Array2<f64>, Array2<[u32; 2]>) {
    let (h, w) = seeds.dim();
    // Column pass: nearest seed row in each column.
    let mut col_dist = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    let mut col_arg = Array2::<u32>::zeros((h, w));
    let mut f = vec![0.0f64; h.max(w)];
    let mut out = vec![0.0f64; h.max(w)];
    let mut arg = vec![0usize; h.max(w)];
    let mut env = Envelope::with_capacity(h.max(w));
    for x in 0..w {
        for y in 0..h {
            f[y] = if seeds[[y, x]] { 0.0 } else { f64::INFINITY };
        }
        env.transform(&f[..h], &mut out[..h], &mut arg[..h]);
        for y in 0..h {
            col_dist[[y, x]] = out[y];
            col_arg[[y, x]] = arg[y] as u32;
        }
    }
    // Row pass over the column results.
    let mut dist = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    let mut nearest = Array2::<[u32; 2]>::from_elem((h, w), [0, 0]);
    for y in 0..h {
        for x in 0..w {
            f[x] = col_dist[[y, x]];
        }
        env.transform(&f[..w], &mut out[..w], &mut arg[..w]);
        for x in 0..w {
            dist[[y, x]] = out[x];
            if out[x].is_finite() {
                let sx = arg[x];
                nearest[[y, x]] = [col_arg[[y, sx]], sx as u32];
            }
        }
    }
    (dist, nearest)
}

/// Lower envelope of parabolas `(q - i)^2 + f[i]` (Felzenszwalb & Huttenlocher).
struct Envelope {
    vertices: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            vertices: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    fn transform(&mut self, f: &[f64], d: &mut [f64], arg: &mut [usize]) {
        let n = f.len();
        self.vertices.clear();
        self.bounds.clear();
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            let fq = f[q] + (q * q) as f64;
            loop {
                let Some(&v) = self.vertices.last() else {
                    self.vertices.push(q);
                    self.bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let s = (fq - (f[v] + (v * v) as f64)) / (2.0 * (q as f64 - v as f64));
                if s <= *self.bounds.last().unwrap() {
                    self.vertices.pop();
                    self.bounds.pop();
                } else {
                    self.vertices.push(q);
                    self.bounds.push(s);
                    break;
                }
            }
        }
        if self.vertices.is_empty() {
            d.fill(f64::INFINITY);
            arg.fill(0);
            return;
        }
        let mut k = 0;
        for q in 0..n {
            while k + 1 < self.vertices.len() && self.bounds[k + 1] < q as f64 {
                k += 1;
            }
            let v = self.vertices[k];
            let diff = q as f64 - v as f64;
            d[q] = diff * diff + f[v];
            arg[q] = v;
        }
    }
}

/// Euclidean distance from each pixel to the nearest vessel pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    pub d: Array2<f64>,
}

pub fn distance_transform(mask: &LabelMask) -> Result<DistanceField> {
    if mask.vessel_count() == 0 {
        return Err(Error::Degenerate(
            "distance transform of a mask without vessel pixels".into(),
        ));
    }
    let seeds = mask.mask().mapv(|v| v == 1);
    let (sq, _) = squared_edt(seeds.view());
    Ok(DistanceField { d: sq.mapv(f64::sqrt) })
}

/// Per-pixel loss multipliers in `(0, alpha]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub w: Array2<f32>,
    pub alpha: f64,
    pub beta: f64,
}

/// `alpha * exp(-d^2 / beta^2)` evaluated in f64. Far-field values are
/// floored at the smallest normal f32 so stored weights stay strictly positive.
pub fn weight_from_distance(d: f64, alpha: f64, beta: f64) -> f32 {
    let w = alpha * (-(d * d) / (beta * beta)).exp();
    (w as f32).max(f32::MIN_POSITIVE)
}

pub fn compute_weight_map(mask: &LabelMask, alpha: f64, beta: f64) -> Result<WeightMap> {
    if !(alpha > 0.0 && alpha.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "weight map needs positive alpha and beta, got alpha={alpha}, beta={beta}"
        )));
    }
    let field = distance_transform(mask)?;
    Ok(WeightMap {
        w: field.d.mapv(|d| weight_from_distance(d, alpha, beta)),
        alpha,
        beta,
    })
}

fn check_ce_inputs(
    logits: &ArrayView3<f64>,
    target: &LabelMask,
    pixel_weights: Option<&WeightMap>,
    class_weights: &[f64],
) -> Result<()> {
    let (c, h, w) = logits.dim();
    if c != LabelMask::NUM_CLASSES {
        return Err(shape_err!("expected {} logit channels, got {}", LabelMask::NUM_CLASSES, c));
    }
    if target.dim() != (h, w) {
        return Err(shape_err!(
            "logits are {}x{} but target is {:?}",
            h,
            w,
            target.dim()
        ));
    }
    if let Some(pw) = pixel_weights {
        if pw.w.dim() != (h, w) {
            return Err(shape_err!("weight map is {:?}, logits are {}x{}", pw.w.dim(), h, w));
        }
    }
    if class_weights.len() != c {
        return Err(shape_err!("{} class weights for {} classes", class_weights.len(), c));
    }
    Ok(())
}

fn pixel_weight(
    y: usize,
    x: usize,
    t: usize,
    pixel_weights: Option<&WeightMap>,
    class_weights: &[f64],
) -> f64 {
    class_weights[t] * pixel_weights.map_or(1.0, |pw| pw.w[[y, x]] as f64)
}

/// Mean over pixels of `-weight(p) * log softmax(logits)(p)[target(p)]`.
///
/// `weight(p)` is the target's class weight, multiplied by the vessel weight
/// map when one is supplied.
pub fn weighted_cross_entropy(
    logits: ArrayView3<f64>,
    target: &LabelMask,
    pixel_weights: Option<&WeightMap>,
    class_weights: &[f64],
) -> Result<f64> {
    check_ce_inputs(&logits, target, pixel_weights, class_weights)?;
    let (c, h, w) = logits.dim();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let t = target.mask()[[y, x]] as usize;
            let max = (0..c).map(|k| logits[[k, y, x]]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|k| (logits[[k, y, x]] - max).exp()).sum::<f64>().ln();
            total -= pixel_weight(y, x, t, pixel_weights, class_weights) * (logits[[t, y, x]] - lse);
        }
    }
    Ok(total / (h * w) as f64)
}

/// Analytic gradient of [`weighted_cross_entropy`] with respect to the logits.
pub fn weighted_cross_entropy_grad(
    logits: ArrayView3<f64>,
    target: &LabelMask,
    pixel_weights: Option<&WeightMap>,
    class_weights: &[f64],
) -> Result<Array3<f64>> {
    check_ce_inputs(&logits, target, pixel_weights, class_weights)?;
    let (c, h, w) = logits.dim();
    let n = (h * w) as f64;
    let mut grad = Array3::<f64>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let t = target.mask()[[y, x]] as usize;
            let max = (0..c).map(|k| logits[[k, y, x]]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..c).map(|k| (logits[[k, y, x]] - max).exp()).sum();
            let wp = pixel_weight(y, x, t, pixel_weights, class_weights) / n;
            for k in 0..c {
                let p = (logits[[k, y, x]] - max).exp() / denom;
                grad[[k, y, x]] = wp * (p - if k == t { 1.0 } else { 0.0 });
            }
        }
    }
    Ok(grad)
}

/// Writes the map as an 8-bit PNG (`[0, alpha]` mapped linearly to
/// `[0, 255]`) and a CSV of the raw values.
pub fn write_preview(map: &WeightMap, png: &Path, csv: &Path) -> Result<()> {
    let scaled = map
        .w
        .mapv(|v| ((v as f64 / map.alpha) * 255.0).round().clamp(0.0, 255.0) as u8);
    imageio::save_gray(&scaled.view(), png)?;
    let (h, w) = map.w.dim();
    let mut text = String::with_capacity(h * w * 10);
    for y in 0..h {
        for x in 0..w {
            if x > 0 {
                text.push(',');
            }
            let _ = write!(text, "{:.6}", map.w[[y, x]]);
        }
        text.push('\n');
    }
    std::fs::write(csv, text)?;
    Ok(())
}
