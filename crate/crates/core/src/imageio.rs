//! Reading and writing the raster formats the datasets ship in.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Opens PNG/TIFF/GIF/PPM/JPEG files; `.gz`-compressed files are inflated first.
pub fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let name = path.to_string_lossy().to_ascii_lowercase();
    if let Some(inner) = name.strip_suffix(".gz") {
        let mut bytes = Vec::new();
        flate2::read::GzDecoder::new(BufReader::new(File::open(path)?)).read_to_end(&mut bytes)?;
        let format = ImageFormat::from_path(inner).map_err(|e| image_err(path, e))?;
        return image::load_from_memory_with_format(&bytes, format).map_err(|e| image_err(path, e));
    }
    image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| image_err(path, e))
}

pub fn rgb_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f32 / 255.0;
        }
    }
    out
}

pub fn array_to_rgb(img: &Array3<f32>) -> RgbImage {
    let (_, h, w) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Gray image thresholded at the midpoint of the 8-bit range.
pub fn gray_to_binary(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        (img.get_pixel(x as u32, y as u32)[0] >= 128) as u8
    })
}

pub fn save_gray(data: &ArrayView2<u8>, path: &Path) -> Result<()> {
    let (h, w) = data.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([data[[y as usize, x as usize]]]));
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| image_err(path, e))
}

/// Probabilities in `[0, 1]` as an 8-bit gray PNG.
pub fn save_probability(probs: &ArrayView2<f32>, path: &Path) -> Result<()> {
    let bytes = probs.mapv(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8);
    save_gray(&bytes.view(), path)
}

/// Signed map rendered blue (negative) through white (zero) to red (positive),
/// saturating at `|v| = scale`.
pub fn save_diverging(map: &ArrayView2<f32>, scale: f32, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (map[[y as usize, x as usize]] / scale).clamp(-1.0, 1.0);
        let fade = ((1.0 - v.abs()) * 255.0).round() as u8;
        if v >= 0.0 {
            image::Rgb([255, fade, fade])
        } else {
            image::Rgb([fade, fade, 255])
        }
    });
    save_rgb(&img, path)
}
