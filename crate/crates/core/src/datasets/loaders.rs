use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DatasetId, FoldSplit, FundusSample, LabelMask};
use crate::error::{Error, Result};
use crate::imageio;

pub(super) fn is_training_id(id: &str) -> bool {
    id.ends_with("_training") || id.starts_with("syn_train")
}

fn require_dir(path: PathBuf) -> Result<PathBuf> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(Error::MissingPath(path))
    }
}

fn require_file(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingPath(path))
    }
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Bilinear resize for the photograph, nearest-neighbour plus re-binarisation
/// for masks.
fn build_sample(id: String, image: &Path, label: &Path, fov: Option<&Path>, size: usize) -> Result<FundusSample> {
    let s = size as u32;
    let rgb = imageio::open(image)?.to_rgb8();
    let rgb = imageops::resize(&rgb, s, s, FilterType::Triangle);
    let lab = imageio::open(label)?.to_luma8();
    let lab = imageops::resize(&lab, s, s, FilterType::Nearest);
    let fov = match fov {
        Some(p) => {
            let m = imageio::open(p)?.to_luma8();
            let m = imageops::resize(&m, s, s, FilterType::Nearest);
            Some(imageio::gray_to_binary(&m).mapv(|v| v == 1))
        }
        None => None,
    };
    FundusSample::new(
        id,
        imageio::rgb_to_array(&rgb),
        LabelMask::new(imageio::gray_to_binary(&lab))?,
        fov,
    )
}

/// `training/{images,1st_manual,mask}` and `test/...` with files like
/// `21_training.tif`, `21_manual1.gif`, `21_training_mask.gif`.
pub(super) fn load_drive(root: &Path) -> Result<Vec<FundusSample>> {
    let size = DatasetId::Drive.target_size();
    let mut out = Vec::new();
    for part in ["training", "test"] {
        let base = require_dir(root.join(part))?;
        let images = require_dir(base.join("images"))?;
        for img in sorted_files(&images)? {
            let name = file_name(&img);
            let Some(stem) = name.split('.').next().map(str::to_owned) else { continue };
            let Some(num) = stem.split('_').next() else { continue };
            let label = require_file(base.join("1st_manual").join(format!("{num}_manual1.gif")))?;
            let mask = base.join("mask").join(format!("{stem}_mask.gif"));
            let fov = mask.is_file().then_some(mask.as_path());
            out.push(build_sample(stem.clone(), &img, &label, fov, size)?);
        }
    }
    if out.is_empty() {
        return Err(Error::MissingPath(root.join("training/images")));
    }
    Ok(out)
}

/// Flat directory of `Image_01L.jpg` photographs with `Image_01L_1stHO.png` labels.
pub(super) fn load_chase(root: &Path) -> Result<Vec<FundusSample>> {
    let size = DatasetId::ChaseDb1.target_size();
    let root = require_dir(root.to_path_buf())?;
    let mut out = Vec::new();
    for label in sorted_files(&root)? {
        let name = file_name(&label);
        let Some(id) = name.strip_suffix("_1stHO.png") else { continue };
        let image = ["jpg", "png", "tif"]
            .iter()
            .map(|ext| root.join(format!("{id}.{ext}")))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::MissingPath(root.join(format!("{id}.jpg"))))?;
        out.push(build_sample(id.to_owned(), &image, &label, None, size)?);
    }
    if out.is_empty() {
        return Err(Error::MissingPath(root.join("Image_01L_1stHO.png")));
    }
    Ok(out)
}

/// `stare-images/im0001.ppm[.gz]` with `labels-ah/im0001.ah.ppm[.gz]`; an
/// optional `masks/` directory may hold `im0001*` field-of-view masks.
pub(super) fn load_stare(root: &Path) -> Result<Vec<FundusSample>> {
    let size = DatasetId::Stare.target_size();
    let images = require_dir(root.join("stare-images"))?;
    let labels = require_dir(root.join("labels-ah"))?;
    let masks = root.join("masks");
    let mask_files = if masks.is_dir() { sorted_files(&masks)? } else { Vec::new() };
    let mut out = Vec::new();
    for img in sorted_files(&images)? {
        let name = file_name(&img);
        let Some(id) = name.split('.').next().map(str::to_owned) else { continue };
        let gz = name.ends_with(".gz");
        let label_name = if gz { format!("{id}.ah.ppm.gz") } else { format!("{id}.ah.ppm") };
        let label = require_file(labels.join(label_name))?;
        let fov = mask_files.iter().find(|p| file_name(p).starts_with(&id));
        out.push(build_sample(id, &img, &label, fov.map(PathBuf::as_path), size)?);
    }
    if out.is_empty() {
        return Err(Error::MissingPath(images.join("im0001.ppm")));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dataset: DatasetId,
    size: usize,
    ids: Vec<String>,
    has_fov: Vec<bool>,
}

/// Writes resized samples as PNGs plus the manifest and splits.
pub fn save_cached(dir: &Path, dataset: DatasetId, samples: &[FundusSample], splits: &[FoldSplit]) -> Result<()> {
    for sub in ["images", "labels", "fov"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for s in samples {
        imageio::save_rgb(&imageio::array_to_rgb(&s.image), &dir.join("images").join(format!("{}.png", s.id)))?;
        let lab = s.label.mask().mapv(|v| v * 255);
        imageio::save_gray(&lab.view(), &dir.join("labels").join(format!("{}.png", s.id)))?;
        if let Some(f) = &s.fov {
            let m = f.mapv(|v| if v { 255u8 } else { 0 });
            imageio::save_gray(&m.view(), &dir.join("fov").join(format!("{}.png", s.id)))?;
        }
    }
    let manifest = Manifest {
        dataset,
        size: dataset.target_size(),
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        has_fov: samples.iter().map(|s| s.fov.is_some()).collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("splits.json"), serde_json::to_string_pretty(splits)?)?;
    Ok(())
}

/// Reads a directory written by [`save_cached`].
pub fn load_cached(dir: &Path) -> Result<(DatasetId, Vec<FundusSample>, Vec<FoldSplit>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(require_file(dir.join("manifest.json"))?)?)?;
    let splits: Vec<FoldSplit> = serde_json::from_str(&fs::read_to_string(require_file(dir.join("splits.json"))?)?)?;
    let mut samples = Vec::with_capacity(manifest.ids.len());
    for (id, has_fov) in manifest.ids.iter().zip(&manifest.has_fov) {
        let image = imageio::rgb_to_array(&imageio::open(&dir.join("images").join(format!("{id}.png")))?.to_rgb8());
        let label = imageio::gray_to_binary(&imageio::open(&dir.join("labels").join(format!("{id}.png")))?.to_luma8());
        let fov: Option<Array2<bool>> = if *has_fov {
            let m = imageio::open(&dir.join("fov").join(format!("{id}.png")))?.to_luma8();
            Some(imageio::gray_to_binary(&m).mapv(|v| v == 1))
        } else {
            None
        };
        samples.push(FundusSample::new(id.clone(), image, LabelMask::new(label)?, fov)?);
    }
    Ok((manifest.dataset, samples, splits))
}
