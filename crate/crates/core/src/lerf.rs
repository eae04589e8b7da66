//! Layer-wise receptive fields, vessel width statistics measured on label
//! skeletons, and the matching rule that places the auxiliary head.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datasets::LabelMask;
use crate::error::{Error, Result};
use crate::weightmap::squared_edt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Pool,
}

/// Geometry of one encoder layer. `stage` is 1-based; a pooling layer belongs
/// to the stage whose resolution it produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeom {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub stage: usize,
}

impl LayerGeom {
    pub fn conv(kernel: usize, stride: usize, stage: usize) -> Self {
        Self { kind: LayerKind::Conv, kernel, stride, stage }
    }

    pub fn pool(kernel: usize, stage: usize) -> Self {
        Self { kind: LayerKind::Pool, kernel, stride: kernel, stage }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRF {
    /// 1-based position in the encoder.
    pub layer_index: usize,
    pub geom: LayerGeom,
    pub rf: usize,
    pub jump: usize,
}

/// Theoretical receptive field side and cumulative stride after each layer.
pub fn receptive_fields(layers: &[LayerGeom]) -> Result<Vec<LayerRF>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("receptive fields need at least one layer".into()));
    }
    let (mut rf, mut jump) = (1usize, 1usize);
    let mut out = Vec::with_capacity(layers.len());
    for (i, g) in layers.iter().enumerate() {
        if g.kernel == 0 || g.stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "layer {} has kernel {} and stride {}",
                i + 1,
                g.kernel,
                g.stride
            )));
        }
        rf += (g.kernel - 1) * jump;
        jump *= g.stride;
        out.push(LayerRF { layer_index: i + 1, geom: *g, rf, jump });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselWidthStats {
    /// Mean width over all skeleton pixels.
    pub mean_width: f64,
    /// Skeleton pixel count per rounded width.
    pub histogram: BTreeMap<u32, u64>,
    /// Share of vessel pixels whose (nearest-skeleton) width rounds to 3 or less.
    pub thin_fraction: f64,
    /// Share of image area covered by vessels.
    pub vessel_fraction: f64,
}

impl VesselWidthStats {
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("width,count\n");
        for (w, c) in &self.histogram {
            let _ = writeln!(s, "{w},{c}");
        }
        s
    }

    pub fn write_histogram(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.histogram_csv())?;
        Ok(())
    }
}

/// Zhang-Suen thinning; pixels outside the image count as background.
pub fn skeletonize(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut img = mask.clone();
    let at = |img: &Array2<bool>, y: isize, x: isize| -> u8 {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && img[[y as usize, x as usize]]) as u8
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for ((y, x), &v) in img.indexed_iter() {
                if !v {
                    continue;
                }
                let (y, x) = (y as isize, x as isize);
                // P2..P9 clockwise from north
                let n = [
                    at(&img, y - 1, x),
                    at(&img, y - 1, x + 1),
                    at(&img, y, x + 1),
                    at(&img, y + 1, x + 1),
                    at(&img, y + 1, x),
                    at(&img, y + 1, x - 1),
                    at(&img, y, x - 1),
                    at(&img, y - 1, x - 1),
                ];
                let b: u8 = n.iter().sum();
                let a = (0..8).filter(|&i| n[i] == 0 && n[(i + 1) % 8] == 1).count();
                let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                let cond = if pass == 0 {
                    p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                } else {
                    p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                };
                if (2..=6).contains(&b) && a == 1 && cond {
                    remove.push((y as usize, x as usize));
                }
            }
            changed |= !remove.is_empty();
            for p in remove {
                img[p] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}

/// Width at each skeleton pixel: distance to the nearest background pixel on
/// one side plus the run to background in the opposite direction, minus the
/// shared centre pixel. The image border stops the run like background.
fn skeleton_widths(mask: &Array2<bool>, skeleton: &Array2<bool>) -> Vec<((usize, usize), f64)> {
    let (h, w) = mask.dim();
    let background = mask.mapv(|v| !v);
    if !background.iter().any(|&v| v) {
        // no background anywhere: the vessel spans the image
        let span = h.min(w) as f64;
        return skeleton.indexed_iter().filter(|(_, &s)| s).map(|(p, _)| (p, span)).collect();
    }
    let (d2, nearest) = squared_edt(background.view());
    let mut out = Vec::new();
    for ((y, x), &s) in skeleton.indexed_iter() {
        if !s {
            continue;
        }
        let d_near = d2[[y, x]].sqrt();
        let [by, bx] = nearest[[y, x]];
        let (uy, ux) = ((y as f64 - by as f64) / d_near, (x as f64 - bx as f64) / d_near);
        let mut t = 0.25;
        let d_far = loop {
            let qy = (y as f64 + t * uy).round() as isize;
            let qx = (x as f64 + t * ux).round() as isize;
            let outside = qy < 0 || qx < 0 || qy >= h as isize || qx >= w as isize;
            if outside || !mask[[qy as usize, qx as usize]] {
                let (dy, dx) = ((qy - y as isize) as f64, (qx - x as isize) as f64);
                break (dy * dy + dx * dx).sqrt();
            }
            t += 0.25;
        };
        out.push(((y, x), d_near + d_far - 1.0));
    }
    out
}

/// Per-pixel vessel width: each vessel pixel takes the width of its nearest
/// skeleton pixel; background is 0. `None` for an all-background label.
pub fn vessel_width_map(label: &LabelMask) -> Option<Array2<f32>> {
    let mask = label.mask().mapv(|v| v == 1);
    if !mask.iter().any(|&v| v) {
        return None;
    }
    let skeleton = skeletonize(&mask);
    let widths = skeleton_widths(&mask, &skeleton);
    let mut at_skeleton = Array2::<f64>::zeros(mask.dim());
    for ((y, x), wd) in &widths {
        at_skeleton[[*y, *x]] = *wd;
    }
    let (_, nearest) = squared_edt(skeleton.view());
    Some(Array2::from_shape_fn(mask.dim(), |(y, x)| {
        if mask[[y, x]] {
            let [sy, sx] = nearest[[y, x]];
            at_skeleton[[sy as usize, sx as usize]] as f32
        } else {
            0.0
        }
    }))
}

/// Width statistics over a set of (training) labels. All-background labels
/// are skipped with a warning.
pub fn vessel_width_stats(labels: &[&LabelMask]) -> Result<VesselWidthStats> {
    let mut histogram = BTreeMap::new();
    let (mut sum, mut count) = (0.0f64, 0u64);
    let (mut vessel_px, mut thin_px, mut area) = (0u64, 0u64, 0u64);
    for (i, label) in labels.iter().enumerate() {
        area += label.mask().len() as u64;
        let mask = label.mask().mapv(|v| v == 1);
        if !mask.iter().any(|&v| v) {
            log::warn!("label {i} has no vessel pixels; skipped for width statistics");
            continue;
        }
        let skeleton = skeletonize(&mask);
        for (_, wd) in skeleton_widths(&mask, &skeleton) {
            sum += wd;
            count += 1;
            *histogram.entry(wd.round() as u32).or_insert(0) += 1;
        }
        let map = vessel_width_map(label).expect("label has vessel pixels");
        for (&m, &wd) in mask.iter().zip(map.iter()) {
            if m {
                vessel_px += 1;
                thin_px += u64::from(wd.round() <= 3.0);
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("no vessel pixels in any label".into()));
    }
    Ok(VesselWidthStats {
        mean_width: sum / count as f64,
        histogram,
        thin_fraction: thin_px as f64 / vessel_px as f64,
        vessel_fraction: vessel_px as f64 / area as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreeminentLayer {
    /// 1-based encoder layer index.
    pub layer_index: usize,
    pub stage: usize,
    pub rf: usize,
}

/// Layer whose receptive field is closest to the mean vessel width; ties go
/// to the deeper layer.
pub fn select_preeminent_layer(rfs: &[LayerRF], mean_width: f64) -> Result<PreeminentLayer> {
    let mut best: Option<(&LayerRF, f64)> = None;
    for l in rfs {
        let gap = (l.rf as f64 - mean_width).abs();
        if best.is_none_or(|(_, g)| gap <= g) {
            best = Some((l, gap));
        }
    }
    let (l, _) = best.ok_or_else(|| Error::InvalidArgument("no layers to choose from".into()))?;
    Ok(PreeminentLayer { layer_index: l.layer_index, stage: l.geom.stage, rf: l.rf })
}

/// Decoder stages mirror encoder stages, so the target stage is the
/// preeminent layer's stage.
pub fn target_stage(preeminent_stage: usize, num_stages: usize) -> Result<usize> {
    if preeminent_stage == 0 || preeminent_stage > num_stages {
        return Err(Error::InvalidArgument(format!(
            "stage {preeminent_stage} is outside 1..={num_stages}"
        )));
    }
    Ok(preeminent_stage)
}

/// Text table of the layer geometry and receptive fields.
pub fn format_rf_table(rfs: &[LayerRF]) -> String {
    let mut s = format!("{:>5} {:>5} {:>6} {:>6} {:>5} {:>5}\n", "layer", "stage", "kind", "kernel", "rf", "jump");
    for l in rfs {
        let kind = match l.geom.kind {
            LayerKind::Conv => "conv",
            LayerKind::Pool => "pool",
        };
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:>6} {:>6} {:>5} {:>5}",
            l.layer_index, l.geom.stage, kind, format!("{}/{}", l.geom.kernel, l.geom.stride), l.rf, l.jump
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn conv_chain(spec: &[(usize, usize)]) -> Vec<LayerGeom> {
        spec.iter().map(|&(k, s)| LayerGeom::conv(k, s, 1)).collect()
    }

    fn rf_values(layers: &[LayerGeom]) -> Vec<usize> {
        receptive_fields(layers).unwrap().iter().map(|l| l.rf).collect()
    }

    /// Side of the input footprint with nonzero gradient for output pixel
    /// (0, 0) of a valid-padding chain with all-positive weights.
    fn gradient_footprint(layers: &[LayerGeom]) -> usize {
        let rfs = receptive_fields(layers).unwrap();
        let last = rfs.last().unwrap();
        let n = last.rf + 2 * last.jump;
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 1, n, n], 1.0));
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            let k = l.kernel;
            let w: Vec<f32> = (0..k * k).map(|j| 0.5 + ((i * 7 + j * 3) % 5) as f32 / 10.0).collect();
            let w = g.constant(Tensor::from_vec(&[1, 1, k, k], w).unwrap());
            h = g.conv2d(h, w, None, l.stride, 0).unwrap();
        }
        let shape = g.value(h).shape().to_vec();
        let mut seed = Tensor::zeros(&shape);
        seed.data_mut()[0] = 1.0;
        let grads = g.backward_with_seed(h, seed).unwrap();
        let gx = grads.get(x).unwrap();
        let (mut ymax, mut xmax) = (0, 0);
        for yy in 0..n {
            for xx in 0..n {
                if gx.data()[yy * n + xx] != 0.0 {
                    ymax = ymax.max(yy + 1);
                    xmax = xmax.max(xx + 1);
                }
            }
        }
        assert_eq!(ymax, xmax);
        assert!(gx.data()[(ymax - 1) * n + xmax - 1] != 0.0);
        ymax
    }

    #[test]
    fn two_three_by_three_convs() {
        assert_eq!(rf_values(&conv_chain(&[(3, 1), (3, 1)])), vec![3, 5]);
    }

    #[test]
    fn pool_between_convs() {
        let layers = vec![LayerGeom::conv(3, 1, 1), LayerGeom::pool(2, 2), LayerGeom::conv(3, 1, 2)];
        assert_eq!(rf_values(&layers), vec![3, 4, 8]);
        let jumps: Vec<usize> = receptive_fields(&layers).unwrap().iter().map(|l| l.jump).collect();
        assert_eq!(jumps, vec![1, 2, 2]);
        // pooling realised as a positive 2x2 stride-2 conv for the oracle
        let mut prefix = Vec::new();
        for (l, rf) in layers.iter().zip([3, 4, 8]) {
            prefix.push(*l);
            assert_eq!(gradient_footprint(&prefix), rf);
        }
    }

    #[test]
    fn pointwise_layers_keep_unit_field() {
        assert_eq!(rf_values(&conv_chain(&[(1, 1); 5])), vec![1; 5]);
    }

    #[test]
    fn empty_spec_is_rejected() {
        assert!(receptive_fields(&[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn recursion_matches_gradient_masking(spec in proptest::collection::vec((1usize..=4, 1usize..=2), 1..=6)) {
            let layers = conv_chain(&spec);
            for depth in 1..=layers.len() {
                let rf = rf_values(&layers[..depth]);
                prop_assert_eq!(gradient_footprint(&layers[..depth]), rf[depth - 1]);
            }
        }

        #[test]
        fn appending_a_wide_layer_grows_the_field(
            spec in proptest::collection::vec((1usize..=5, 1usize..=3), 1..=6),
            k in 2usize..=5,
            s in 1usize..=3,
        ) {
            let mut layers = conv_chain(&spec);
            let before = *rf_values(&layers).last().unwrap();
            layers.push(LayerGeom::conv(k, s, 1));
            prop_assert!(*rf_values(&layers).last().unwrap() > before);
            let rfs = receptive_fields(&layers).unwrap();
            for pair in rfs.windows(2) {
                prop_assert!(pair[1].rf >= pair[0].rf && pair[1].jump >= pair[0].jump);
            }
        }

        #[test]
        fn matching_is_scale_consistent(
            rfs in proptest::collection::btree_set(1usize..60, 1..8),
            width in 1usize..60,
            factor in 2usize..5,
        ) {
            let mk = |f: usize| -> Vec<LayerRF> {
                rfs.iter().enumerate().map(|(i, &r)| LayerRF {
                    layer_index: i + 1,
                    geom: LayerGeom::conv(3, 1, 1),
                    rf: r * f,
                    jump: 1,
                }).collect()
            };
            let a = select_preeminent_layer(&mk(1), width as f64).unwrap();
            let b = select_preeminent_layer(&mk(factor), (width * factor) as f64).unwrap();
            prop_assert_eq!(a.layer_index, b.layer_index);
        }
    }

    fn bar_mask(h: usize, w: usize, rows: std::ops::Range<usize>) -> LabelMask {
        LabelMask::from_bools(&Array2::from_shape_fn((h, w), |(y, _)| rows.contains(&y)))
    }

    #[test]
    fn horizontal_bar_of_height_three() {
        let stats = vessel_width_stats(&[&bar_mask(20, 40, 8..11)]).unwrap();
        assert!((stats.mean_width - 3.0).abs() <= 0.5, "{}", stats.mean_width);
    }

    fn two_bars(scale: usize) -> LabelMask {
        // widths 2 and 6, same length
        let (h, w) = (40 * scale, 40 * scale);
        LabelMask::from_bools(&Array2::from_shape_fn((h, w), |(y, x)| {
            let in_x = (4 * scale..36 * scale).contains(&x);
            in_x && ((8 * scale..10 * scale).contains(&y) || (20 * scale..26 * scale).contains(&y))
        }))
    }

    #[test]
    fn two_bars_average_their_widths() {
        let stats = vessel_width_stats(&[&two_bars(1)]).unwrap();
        assert!((stats.mean_width - 4.0).abs() <= 0.5, "{}", stats.mean_width);
        let doubled = vessel_width_stats(&[&two_bars(2)]).unwrap();
        assert!((doubled.mean_width - 8.0).abs() <= 1.0, "{}", doubled.mean_width);
    }

    #[test]
    fn histogram_mean_agrees_with_mean_width() {
        let stats = vessel_width_stats(&[&two_bars(1), &bar_mask(20, 40, 8..11)]).unwrap();
        let (num, den) = stats
            .histogram
            .iter()
            .fold((0.0, 0.0), |(n, d), (&w, &c)| (n + w as f64 * c as f64, d + c as f64));
        assert!((num / den - stats.mean_width).abs() <= 0.5);
    }

    #[test]
    fn thin_fraction_counts_vessel_pixels() {
        // bar of width 2 (64 px) and bar of width 6 (192 px)
        let stats = vessel_width_stats(&[&two_bars(1)]).unwrap();
        assert_abs_diff_eq!(stats.thin_fraction, 0.25, epsilon = 0.03);
        assert_abs_diff_eq!(stats.vessel_fraction, 256.0 / 1600.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_labels_are_skipped_or_rejected() {
        let empty = LabelMask::from_bools(&Array2::from_elem((8, 8), false));
        assert!(vessel_width_stats(&[&empty]).is_err());
        let stats = vessel_width_stats(&[&empty, &bar_mask(20, 40, 8..11)]).unwrap();
        assert!((stats.mean_width - 3.0).abs() <= 0.5);
        assert!(vessel_width_map(&empty).is_none());
    }

    #[test]
    fn skeleton_of_a_bar_is_one_pixel_thick() {
        let mask = bar_mask(20, 40, 8..13).mask().mapv(|v| v == 1);
        let sk = skeletonize(&mask);
        for x in 5..35 {
            let col: usize = (0..20).filter(|&y| sk[[y, x]]).count();
            assert_eq!(col, 1, "column {x}");
        }
    }

    fn rf_list(values: &[usize]) -> Vec<LayerRF> {
        values
            .iter()
            .enumerate()
            .map(|(i, &rf)| LayerRF { layer_index: i + 1, geom: LayerGeom::conv(3, 1, i / 2 + 1), rf, jump: 1 })
            .collect()
    }

    #[test]
    fn nearest_field_wins_and_ties_go_deeper() {
        assert_eq!(select_preeminent_layer(&rf_list(&[3, 5, 7, 10]), 5.2).unwrap().layer_index, 2);
        assert_eq!(select_preeminent_layer(&rf_list(&[3, 5]), 4.0).unwrap().layer_index, 2);
        assert!(select_preeminent_layer(&[], 4.0).is_err());
    }

    #[test]
    fn target_stage_mirrors_encoder_stage() {
        assert_eq!(target_stage(1, 4).unwrap(), 1);
        assert_eq!(target_stage(3, 4).unwrap(), 3);
        assert!(target_stage(5, 4).is_err());
        assert!(target_stage(0, 4).is_err());
    }
}
