//! Fundus dataset ingestion, splits, patch sampling and class statistics.

mod augment;
mod loaders;
pub mod synthetic;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::weightmap;

pub use augment::{flip_horizontal, flip_vertical, rotate90, Transform};
pub use loaders::{load_cached, save_cached};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Drive,
    ChaseDb1,
    Stare,
    /// Procedurally generated curvilinear structures for desk-scale runs.
    Synthetic,
}

impl DatasetId {
    /// Square side length images are resized to at ingestion.
    pub fn target_size(self) -> usize {
        match self {
            DatasetId::Drive => 512,
            DatasetId::ChaseDb1 => 768,
            DatasetId::Stare => 592,
            DatasetId::Synthetic => synthetic::DEFAULT_SIZE,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Drive => "drive",
            DatasetId::ChaseDb1 => "chase_db1",
            DatasetId::Stare => "stare",
            DatasetId::Synthetic => "synthetic",
        }
    }

    pub fn has_fixed_split(self) -> bool {
        matches!(self, DatasetId::Drive | DatasetId::Synthetic)
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drive" => Ok(DatasetId::Drive),
            "chase_db1" | "chasedb1" | "chase" => Ok(DatasetId::ChaseDb1),
            "stare" => Ok(DatasetId::Stare),
            "synthetic" => Ok(DatasetId::Synthetic),
            other => Err(Error::Config(format!(
                "unknown dataset '{other}' (expected drive, chase_db1, stare or synthetic)"
            ))),
        }
    }
}

/// Binary vessel ground truth: 0 = background, 1 = vessel.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    mask: Array2<u8>,
}

impl LabelMask {
    pub const NUM_CLASSES: usize = 2;

    pub fn new(mask: Array2<u8>) -> Result<Self> {
        if let Some(v) = mask.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "label masks must be binary, found value {v}"
            )));
        }
        Ok(Self { mask })
    }

    pub fn from_bools(mask: &Array2<bool>) -> Self {
        Self {
            mask: mask.mapv(u8::from),
        }
    }

    pub fn mask(&self) -> &Array2<u8> {
        &self.mask
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn num_classes(&self) -> usize {
        Self::NUM_CLASSES
    }

    pub fn vessel_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }

    pub fn vessel_fraction(&self) -> f64 {
        self.vessel_count() as f64 / self.mask.len().max(1) as f64
    }
}

/// One fundus photograph with its annotation.
#[derive(Clone, Debug)]
pub struct FundusSample {
    pub id: String,
    /// `3 × H × W`, intensities in `[0, 1]`.
    pub image: Array3<f32>,
    pub label: LabelMask,
    pub fov: Option<Array2<bool>>,
}

impl FundusSample {
    pub fn new(id: impl Into<String>, image: Array3<f32>, label: LabelMask, fov: Option<Array2<bool>>) -> Result<Self> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(shape_err!("fundus images need 3 channels, got {}", c));
        }
        if label.dim() != (h, w) {
            return Err(shape_err!("image is {}x{} but label is {:?}", h, w, label.dim()));
        }
        if let Some(f) = &fov {
            if f.dim() != (h, w) {
                return Err(shape_err!("image is {}x{} but fov mask is {:?}", h, w, f.dim()));
            }
        }
        Ok(Self {
            id: id.into(),
            image,
            label,
            fov,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.label.dim()
    }
}

/// Loads every sample of a dataset from its published directory layout,
/// resized to the dataset's working resolution.
pub fn load_dataset(name: DatasetId, root: &Path) -> Result<Vec<FundusSample>> {
    match name {
        DatasetId::Drive => loaders::load_drive(root),
        DatasetId::ChaseDb1 => loaders::load_chase(root),
        DatasetId::Stare => loaders::load_stare(root),
        DatasetId::Synthetic => Ok(synthetic::default_dataset()
            .into_iter()
            .map(|s| s.sample)
            .collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

pub const NUM_FOLDS: usize = 4;

/// DRIVE (and the synthetic set) keep their published train/test partition;
/// CHASE_DB1 and STARE get a seeded 4-fold cross-validation.
pub fn make_splits(name: DatasetId, samples: &[FundusSample], seed: u64) -> Result<Vec<FoldSplit>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let mut ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    if name.has_fixed_split() {
        let (train_ids, test_ids): (Vec<String>, Vec<String>) =
            ids.into_iter().partition(|id| loaders::is_training_id(id));
        if train_ids.is_empty() || test_ids.is_empty() {
            return Err(Error::Degenerate(format!(
                "{name} needs both training and test images, found {} and {}",
                train_ids.len(),
                test_ids.len()
            )));
        }
        return Ok(vec![FoldSplit {
            fold_index: 0,
            train_ids,
            test_ids,
        }]);
    }
    if ids.len() < NUM_FOLDS {
        return Err(Error::Degenerate(format!(
            "{} samples cannot form {} folds",
            ids.len(),
            NUM_FOLDS
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = ids.len() / NUM_FOLDS;
    let extra = ids.len() % NUM_FOLDS;
    let mut folds = Vec::with_capacity(NUM_FOLDS);
    let mut start = 0;
    for k in 0..NUM_FOLDS {
        let len = base + usize::from(k < extra);
        let test_ids: Vec<String> = ids[start..start + len].to_vec();
        let train_ids: Vec<String> = ids[..start]
            .iter()
            .chain(&ids[start + len..])
            .cloned()
            .collect();
        folds.push(FoldSplit {
            fold_index: k,
            train_ids,
            test_ids,
        });
        start += len;
    }
    Ok(folds)
}

/// A sample with its full-resolution weight map, computed once so patches
/// keep distances to vessels outside the crop.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample: FundusSample,
    pub weight_map: Option<Array2<f32>>,
}

impl PreparedSample {
    pub fn new(sample: FundusSample, alpha: f64, beta: f64) -> Result<Self> {
        let weight_map = if sample.label.vessel_count() == 0 {
            log::warn!("sample {} has no vessel pixels; using unit weights", sample.id);
            None
        } else {
            Some(weightmap::compute_weight_map(&sample.label, alpha, beta)?.w)
        };
        Ok(Self { sample, weight_map })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchOptions {
    pub patch_size: usize,
    pub augment: bool,
    /// Rotate by an arbitrary angle instead of a multiple of 90°.
    pub arbitrary_rotation: bool,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self {
            patch_size: 128,
            augment: true,
            arbitrary_rotation: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchBatch {
    /// `[B, 3, P, P]`
    pub images: Tensor,
    /// `B × P × P` class indices.
    pub labels: Vec<u8>,
    /// `B × P × P` vessel weight-map values (1 where no map is available).
    pub weight_maps: Vec<f32>,
    pub class_weights: [f32; 2],
    pub ids: Vec<String>,
    pub patch_size: usize,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Per-pixel weights for the main loss: class weights only.
    pub fn main_weights(&self) -> Vec<f32> {
        self.labels
            .iter()
            .map(|&t| self.class_weights[t as usize])
            .collect()
    }

    /// Per-pixel weights for the auxiliary loss: class weight times the
    /// vessel weight map, or class weights alone when `use_map` is off.
    pub fn aux_weights(&self, use_map: bool) -> Vec<f32> {
        if !use_map {
            return self.main_weights();
        }
        self.labels
            .iter()
            .zip(&self.weight_maps)
            .map(|(&t, &w)| self.class_weights[t as usize] * w)
            .collect()
    }

    pub fn label_patch(&self, i: usize) -> Array2<u8> {
        let p = self.patch_size;
        Array2::from_shape_vec((p, p), self.labels[i * p * p..(i + 1) * p * p].to_vec())
            .expect("patch slice has P*P entries")
    }

    pub fn image_patch(&self, i: usize) -> Array3<f32> {
        let p = self.patch_size;
        let n = 3 * p * p;
        Array3::from_shape_vec((3, p, p), self.images.data()[i * n..(i + 1) * n].to_vec())
            .expect("patch slice has 3*P*P entries")
    }

    pub fn weight_patch(&self, i: usize) -> Array2<f32> {
        let p = self.patch_size;
        Array2::from_shape_vec((p, p), self.weight_maps[i * p * p..(i + 1) * p * p].to_vec())
            .expect("patch slice has P*P entries")
    }

    pub fn concat(parts: Vec<PatchBatch>) -> Result<PatchBatch> {
        let first = parts.first().ok_or_else(|| shape_err!("no patch batches to join"))?;
        let p = first.patch_size;
        let class_weights = first.class_weights;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut weight_maps = Vec::new();
        let mut ids = Vec::new();
        for b in parts {
            if b.patch_size != p {
                return Err(shape_err!("cannot join patches of size {} and {}", p, b.patch_size));
            }
            images.extend_from_slice(b.images.data());
            labels.extend(b.labels);
            weight_maps.extend(b.weight_maps);
            ids.extend(b.ids);
        }
        Ok(PatchBatch {
            images: Tensor::from_vec(&[ids.len(), 3, p, p], images)?,
            labels,
            weight_maps,
            class_weights,
            ids,
            patch_size: p,
        })
    }
}

/// Crops `count` patches at uniformly random positions, optionally applying
/// an independent random flip/rotation to each. Image, label and weight map
/// always receive the same transform.
pub fn sample_patches(
    sample: &PreparedSample,
    count: usize,
    opts: &PatchOptions,
    class_weights: [f32; 2],
    rng: &mut impl Rng,
) -> Result<PatchBatch> {
    let (h, w) = sample.sample.dim();
    let p = opts.patch_size;
    if p == 0 || h < p || w < p {
        return Err(Error::InvalidArgument(format!(
            "sample {} is {}x{}, smaller than the {}x{} patch",
            sample.sample.id, h, w, p, p
        )));
    }
    let ones;
    let wmap = match &sample.weight_map {
        Some(m) => m,
        None => {
            ones = Array2::<f32>::ones((h, w));
            &ones
        }
    };
    let mut images = Vec::with_capacity(count * 3 * p * p);
    let mut labels = Vec::with_capacity(count * p * p);
    let mut weights = Vec::with_capacity(count * p * p);
    for _ in 0..count {
        let (img, lab, wt) = if opts.augment && opts.arbitrary_rotation && augment::fits_rotation(h, w, p) {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            augment::rotated_crop(&sample.sample.image, sample.sample.label.mask(), wmap, p, angle, rng)
        } else {
            let top = rng.gen_range(0..=h - p);
            let left = rng.gen_range(0..=w - p);
            let img = sample.sample.image.slice(s![.., top..top + p, left..left + p]).to_owned();
            let lab = sample.sample.label.mask().slice(s![top..top + p, left..left + p]).to_owned();
            let wt = wmap.slice(s![top..top + p, left..left + p]).to_owned();
            if opts.augment {
                let t = Transform::random(rng);
                (t.apply3(&img), t.apply2(&lab), t.apply2(&wt))
            } else {
                (img, lab, wt)
            }
        };
        images.extend(img.iter());
        labels.extend(lab.iter());
        weights.extend(wt.iter());
    }
    Ok(PatchBatch {
        images: Tensor::from_vec(&[count, 3, p, p], images)?,
        labels,
        weight_maps: weights,
        class_weights,
        ids: vec![sample.sample.id.clone(); count],
        patch_size: p,
    })
}

/// Draws `batch_size` patches, each from a uniformly chosen sample.
pub fn sample_batch(
    samples: &[PreparedSample],
    batch_size: usize,
    opts: &PatchOptions,
    class_weights: [f32; 2],
    rng: &mut impl Rng,
) -> Result<PatchBatch> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to draw patches from".into()));
    }
    let mut parts = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let s = &samples[rng.gen_range(0..samples.len())];
        parts.push(sample_patches(s, 1, opts, class_weights, rng)?);
    }
    PatchBatch::concat(parts)
}

/// Weights inversely proportional to class pixel frequency, normalised to
/// average 1 across the two classes.
pub fn class_balance_weights(labels: &[&LabelMask]) -> Result<[f64; 2]> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("class weights need at least one label".into()));
    }
    let mut counts = [0u64; 2];
    for l in labels {
        let v = l.vessel_count() as u64;
        counts[1] += v;
        counts[0] += l.mask().len() as u64 - v;
    }
    if counts.contains(&0) {
        return Err(Error::Degenerate(format!(
            "class pixel counts {counts:?} contain an empty class"
        )));
    }
    let total = (counts[0] + counts[1]) as f64;
    let inv = [total / counts[0] as f64, total / counts[1] as f64];
    let mean = (inv[0] + inv[1]) / 2.0;
    Ok([inv[0] / mean, inv[1] / mean])
}
