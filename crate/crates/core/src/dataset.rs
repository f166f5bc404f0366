//! On-disk dataset layout: manifest reading/writing, PNG frame and mask
//! codecs, and sample loading.
//!
//! Layout under a dataset directory:
//!   - `manifest.json`
//!   - `<id>/frame_###.png` (8-bit grayscale)
//!   - `<id>/tumor_mask.png`, `<id>/liver_mask.png` (values 0 or 255)

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LtdError, Result};
use crate::imagery::{BinaryMask, DsaVideo, Frame, Sample};
use crate::synthgen::PhantomConfig;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub key_frame_index: usize,
    /// Augmented key-frame indices (`k+1`, `k+2`); train samples only.
    pub aug_frame_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config: PhantomConfig,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.samples.iter().filter(|e| e.split == split).collect()
    }
}

pub fn manifest_path(dataset_dir: &Path) -> PathBuf {
    dataset_dir.join("manifest.json")
}

pub fn write_manifest(manifest: &DatasetManifest, dataset_dir: &Path) -> Result<()> {
    let path = manifest_path(dataset_dir);
    let bytes = serde_json::to_vec_pretty(manifest)?;
    fs::write(&path, bytes).map_err(|e| LtdError::io(path.display().to_string(), e))
}

pub fn read_manifest(dataset_dir: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(dataset_dir);
    let bytes = fs::read(&path).map_err(|e| LtdError::io(path.display().to_string(), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:03}.png")
}

fn read_gray(path: &Path) -> Result<Array2<u8>> {
    let img = ImageReader::open(path)
        .map_err(|e| LtdError::io(path.display().to_string(), e))?
        .decode()
        .map_err(|e| LtdError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    }))
}

fn write_gray(pixels: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = pixels.dim();
    let mut img = GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in pixels.indexed_iter() {
        img.put_pixel(x as u32, y as u32, Luma([v]));
    }
    img.save(path).map_err(|e| LtdError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Quantize a `[0, 1]` intensity grid to 8 bits and write it as PNG.
pub fn write_frame_png(pixels: &Array2<f64>, path: &Path) -> Result<()> {
    write_gray(
        &pixels.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        path,
    )
}

/// Write a binary mask as a 0/255 PNG.
pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    write_gray(&mask.pixels().mapv(|v| v * 255), path)
}

/// Read a 0/255 PNG back into a binary mask.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let raw = read_gray(path)?;
    if raw.iter().any(|&v| v != 0 && v != 255) {
        return Err(LtdError::Image {
            path: path.display().to_string(),
            message: "mask PNG must contain only 0 and 255".into(),
        });
    }
    BinaryMask::new(raw.mapv(|v| u8::from(v == 255)))
}

/// Load a video directory (`frame_000.png ..`) into a [`DsaVideo`].
pub fn read_video_dir(dir: &Path) -> Result<DsaVideo> {
    let mut frames = Vec::new();
    for index in 0.. {
        let path = dir.join(frame_file_name(index));
        if !path.exists() {
            break;
        }
        frames.push(Frame::from_u8(&read_gray(&path)?)?);
    }
    DsaVideo::new(frames)
}

/// Load one sample listed in a manifest.
pub fn load_sample(dataset_dir: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let sample_dir = dataset_dir.join(&entry.id);
    let video = read_video_dir(&sample_dir)?;
    let tumor_mask = read_mask_png(&sample_dir.join("tumor_mask.png"))?;
    let liver_mask = read_mask_png(&sample_dir.join("liver_mask.png"))?;
    Ok(Sample {
        video,
        key_frame_index: entry.key_frame_index,
        tumor_mask,
        liver_mask,
        sample_id: entry.id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let pixels = Array2::from_shape_fn((16, 16), |(y, x)| ((y * 16 + x) as f64) / 255.0);
        write_frame_png(&pixels, &path).unwrap();
        let back = read_gray(&path).unwrap();
        for ((y, x), &v) in back.indexed_iter() {
            assert_eq!(v as usize, y * 16 + x);
        }
    }

    #[test]
    fn mask_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = BinaryMask::new(Array2::from_shape_fn((8, 8), |(y, _)| u8::from(y < 4))).unwrap();
        write_mask_png(&mask, &path).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), mask);

        // A grayscale PNG with intermediate values is not a mask.
        let bad = dir.path().join("bad.png");
        write_gray(&Array2::from_elem((8, 8), 128u8), &bad).unwrap();
        assert!(read_mask_png(&bad).is_err());
    }
}
