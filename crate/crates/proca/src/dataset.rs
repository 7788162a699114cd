//! Dataset directories: `images/NNNN.png` (RGB8), `labels/NNNN.png` (L8, class
//! index per pixel, 0 = ignore) and `manifest.json` with the generating spec
//! and SHA-256 checksums of every file.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};
use proca_core::datagen::{generate_split, Domain, ImageBatch, LabelMaps, LabeledBatch, SceneSpec, CHANNELS};
use proca_core::pipeline::DataSizes;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub image: String,
    pub label: String,
    pub image_sha256: String,
    pub label_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub domain: String,
    /// Index of the first image in the domain's stream.
    pub start: usize,
    pub files: Vec<FileEntry>,
}

fn domain_name(d: Domain) -> &'static str {
    match d {
        Domain::Source => "source",
        Domain::Target => "target",
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(write: impl FnOnce(&mut std::io::Cursor<Vec<u8>>) -> image::ImageResult<()>) -> AppResult<Vec<u8>> {
    let mut cur = std::io::Cursor::new(Vec::new());
    write(&mut cur).map_err(|e| AppError::Runtime(format!("png encode: {e}")))?;
    Ok(cur.into_inner())
}

fn write_file(path: &Path, bytes: &[u8]) -> AppResult<()> {
    std::fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

fn create_dir(path: &Path) -> AppResult<()> {
    std::fs::create_dir_all(path).map_err(|e| AppError::io(path, e))
}

/// Writes a labelled batch as a dataset directory.
pub fn write_dataset(dir: &Path, batch: &LabeledBatch, spec: &SceneSpec, domain: Domain, start: usize) -> AppResult<Manifest> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("labels"))?;
    let (h, w) = (batch.images.height, batch.images.width);
    let mut files = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let img = batch.images.image(i);
        let plane = h * w;
        let mut rgb = RgbImage::new(w as u32, h as u32);
        for (p, px) in rgb.pixels_mut().enumerate() {
            px.0 = [to_u8(img[p]), to_u8(img[plane + p]), to_u8(img[2 * plane + p])];
        }
        let gray = GrayImage::from_raw(w as u32, h as u32, batch.labels.map(i).to_vec()).expect("label map matches size");
        let image_bytes = encode_png(|c| rgb.write_to(c, ImageFormat::Png))?;
        let label_bytes = encode_png(|c| gray.write_to(c, ImageFormat::Png))?;
        let name = format!("{i:04}.png");
        write_file(&dir.join("images").join(&name), &image_bytes)?;
        write_file(&dir.join("labels").join(&name), &label_bytes)?;
        files.push(FileEntry {
            image: format!("images/{name}"),
            label: format!("labels/{name}"),
            image_sha256: sha256_hex(&image_bytes),
            label_sha256: sha256_hex(&label_bytes),
        });
    }
    let manifest = Manifest { spec: spec.clone(), domain: domain_name(domain).into(), start, files };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| AppError::Runtime(e.to_string()))?;
    write_file(&dir.join("manifest.json"), format!("{text}\n").as_bytes())?;
    Ok(manifest)
}

fn read_checked(dir: &Path, rel: &str, sha: &str) -> AppResult<Vec<u8>> {
    let path = dir.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| AppError::io(&path, e))?;
    if sha256_hex(&bytes) != sha {
        return Err(AppError::Runtime(format!("checksum mismatch for {}", path.display())));
    }
    Ok(bytes)
}

/// Reads a dataset directory back, verifying every checksum.
pub fn read_dataset(dir: &Path) -> AppResult<(Manifest, LabeledBatch)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| AppError::io(&path, e))?;
    let (h, w) = (manifest.spec.height, manifest.spec.width);
    let n = manifest.files.len();
    let mut images = Vec::with_capacity(n * CHANNELS * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for f in &manifest.files {
        let bytes = read_checked(dir, &f.image, &f.image_sha256)?;
        let rgb = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
            .map_err(|e| AppError::Runtime(format!("{}: {e}", f.image)))?
            .into_rgb8();
        let bytes = read_checked(dir, &f.label, &f.label_sha256)?;
        let gray = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
            .map_err(|e| AppError::Runtime(format!("{}: {e}", f.label)))?
            .into_luma8();
        if rgb.dimensions() != (w as u32, h as u32) || gray.dimensions() != (w as u32, h as u32) {
            return Err(AppError::Runtime(format!("{} does not match the manifest size", f.image)));
        }
        for c in 0..CHANNELS {
            images.extend(rgb.pixels().map(|p| p.0[c] as f32 / 255.0));
        }
        labels.extend_from_slice(gray.as_raw());
    }
    let batch = LabeledBatch::new(
        ImageBatch { n, height: h, width: w, data: images },
        LabelMaps { n, height: h, width: w, data: labels },
        manifest.spec.num_classes,
    )?;
    Ok((manifest, batch))
}

pub const SPLITS: [&str; 4] = ["source_train", "source_eval", "target_train", "target_eval"];

/// Generates and writes all four splits under `out/<split>`.
pub fn generate_all(spec: &SceneSpec, sizes: &DataSizes, out: &Path) -> AppResult<Vec<PathBuf>> {
    let plan = [
        (Domain::Source, 0, sizes.source_train),
        (Domain::Source, sizes.source_train, sizes.source_eval),
        (Domain::Target, 0, sizes.target_train),
        (Domain::Target, sizes.target_train, sizes.target_eval),
    ];
    let mut dirs = Vec::new();
    for (name, (domain, start, n)) in SPLITS.iter().zip(plan) {
        let batch = generate_split(spec, domain, start, n)?;
        let dir = out.join(name);
        write_dataset(&dir, &batch, spec, domain, start)?;
        dirs.push(dir);
    }
    Ok(dirs)
}
