//! Grid patch extraction and training-time augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{load_image, save_image, RasterImage};
use crate::util::patch_seed;

pub const PATCH_SIZE: usize = 224;

/// One tile cut from a slide, labeled with its slide's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub slide_id: String,
    pub grid_x: usize,
    pub grid_y: usize,
    pub pixels: RasterImage,
    pub inherited_label: u8,
    pub cluster_id: Option<usize>,
    /// Dihedral variant index; 0 for the untransformed tile.
    pub variant: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Dihedral transforms to emit, as indices into [`dihedral_variants`] order.
    pub dihedral: Vec<usize>,
    pub blur_sigma: f64,
    pub blur_probability: f64,
    pub multiplier_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            dihedral: (0..8).collect(),
            blur_sigma: 1.0,
            blur_probability: 0.5,
            multiplier_range: (0.9, 1.1),
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.multiplier_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidInput(format!(
                "multiplier range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(Error::InvalidInput("blur sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.blur_probability) {
            return Err(Error::InvalidInput("blur probability must be in [0, 1]".into()));
        }
        if self.dihedral.is_empty() || self.dihedral.iter().any(|&d| d >= 8) {
            return Err(Error::InvalidInput(
                "dihedral subset must be non-empty with indices < 8".into(),
            ));
        }
        Ok(())
    }
}

/// Non-overlapping 224x224 tiling in row-major order. Right and bottom
/// remainders narrower than a tile are dropped.
pub fn extract_patches(slide: &RasterImage, slide_id: &str, label: u8) -> Result<Vec<PatchRecord>> {
    let cols = slide.width() / PATCH_SIZE;
    let rows = slide.height() / PATCH_SIZE;
    if cols == 0 || rows == 0 {
        return Err(Error::InvalidInput(format!(
            "slide {slide_id} is {}x{}, smaller than one {PATCH_SIZE}x{PATCH_SIZE} tile",
            slide.width(),
            slide.height()
        )));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for gy in 0..rows {
        for gx in 0..cols {
            out.push(PatchRecord {
                slide_id: slide_id.to_string(),
                grid_x: gx,
                grid_y: gy,
                pixels: slide.crop(gx * PATCH_SIZE, gy * PATCH_SIZE, PATCH_SIZE, PATCH_SIZE)?,
                inherited_label: label,
                cluster_id: None,
                variant: 0,
            });
        }
    }
    Ok(out)
}

fn rotate90(img: &RasterImage) -> RasterImage {
    // Clockwise: out(x, y) = in(y, n - 1 - x).
    let n = img.width();
    RasterImage::from_fn(n, n, |x, y| img.pixel(y, n - 1 - x)).expect("square")
}

fn flip_horizontal(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width(), img.height());
    RasterImage::from_fn(w, h, |x, y| img.pixel(w - 1 - x, y)).expect("same shape")
}

/// Applies dihedral element `index` (see [`dihedral_variants`] for the order).
pub fn dihedral_transform(img: &RasterImage, index: usize) -> Result<RasterImage> {
    if img.width() != img.height() {
        return Err(Error::InvalidInput(format!(
            "dihedral transforms need a square image, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    if index >= 8 {
        return Err(Error::InvalidInput(format!("dihedral index {index} out of range")));
    }
    let mut out = img.clone();
    for _ in 0..index % 4 {
        out = rotate90(&out);
    }
    if index >= 4 {
        out = flip_horizontal(&out);
    }
    Ok(out)
}

/// The eight elements of D4 in the order identity, r90, r180, r270, flip,
/// flip∘r90, flip∘r180, flip∘r270 (rotations clockwise, flip about the
/// vertical axis).
pub fn dihedral_variants(patch: &RasterImage) -> Result<Vec<RasterImage>> {
    (0..8).map(|i| dihedral_transform(patch, i)).collect()
}

/// Normalized Gaussian taps for `sigma`, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur with mirrored borders; `sigma == 0` is the identity.
pub fn gaussian_blur(patch: &RasterImage, sigma: f64) -> Result<RasterImage> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(patch.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h) = (patch.width(), patch.height());
    let src = patch.data();
    // Source index for each tap position, borders mirrored.
    let xs: Vec<usize> = (0..w as i64 + 2 * r).map(|i| reflect(i - r, w)).collect();
    let ys: Vec<usize> = (0..h as i64 + 2 * r).map(|i| reflect(i - r, h)).collect();
    let row_len = w * 3;
    // Taps are accumulated in kernel order for every sample.
    let mut tmp = vec![0f64; w * h * 3];
    for y in 0..h {
        let row = &src[y * row_len..(y + 1) * row_len];
        let acc = &mut tmp[y * row_len..(y + 1) * row_len];
        for (k, &wt) in kernel.iter().enumerate() {
            for (x, a) in acc.chunks_exact_mut(3).enumerate() {
                let i = xs[x + k] * 3;
                a[0] += wt * row[i] as f64;
                a[1] += wt * row[i + 1] as f64;
                a[2] += wt * row[i + 2] as f64;
            }
        }
    }
    let mut out = vec![0u8; w * h * 3];
    let mut acc = vec![0f64; row_len];
    for y in 0..h {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (k, &wt) in kernel.iter().enumerate() {
            let row = &tmp[ys[y + k] * row_len..(ys[y + k] + 1) * row_len];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += wt * v;
            }
        }
        for (o, &a) in out[y * row_len..(y + 1) * row_len].iter_mut().zip(&acc) {
            *o = round_byte(a);
        }
    }
    RasterImage::new(w, h, out)
}

#[inline]
fn round_byte(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Scales every sample by `factor`, rounding half up and clamping to `[0, 255]`.
pub fn channel_multiply(patch: &RasterImage, factor: f64) -> Result<RasterImage> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidInput(format!("multiplier must be > 0, got {factor}")));
    }
    let lut: Vec<u8> = (0..=255u16).map(|v| round_byte(v as f64 * factor)).collect();
    let data = patch.data().iter().map(|&v| lut[v as usize]).collect();
    RasterImage::new(patch.width(), patch.height(), data)
}

fn augment_one(p: &PatchRecord, spec: &AugmentationSpec) -> Result<Vec<PatchRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(patch_seed(spec.seed, &p.slide_id, p.grid_x, p.grid_y));
    let (lo, hi) = spec.multiplier_range;
    let mut out = Vec::with_capacity(spec.dihedral.len());
    for &d in &spec.dihedral {
        let blur = rng.random::<f64>() < spec.blur_probability;
        let u = rng.random::<f64>();
        let factor = if lo == hi { lo } else { lo + (hi - lo) * u };
        let mut img = dihedral_transform(&p.pixels, d)?;
        if blur {
            img = gaussian_blur(&img, spec.blur_sigma)?;
        }
        if factor != 1.0 {
            img = channel_multiply(&img, factor)?;
        }
        out.push(PatchRecord {
            pixels: img,
            variant: d as u8,
            ..p.clone()
        });
    }
    Ok(out)
}

/// Emits the configured dihedral variants of every patch with stochastic blur
/// and brightness scaling. Randomness is seeded per patch, so the result does
/// not depend on scheduling.
pub fn augment(patches: &[PatchRecord], spec: &AugmentationSpec) -> Result<Vec<PatchRecord>> {
    spec.validate()?;
    let nested: Vec<Vec<PatchRecord>> = patches
        .par_iter()
        .map(|p| augment_one(p, spec))
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// A row of the patch-index CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchIndexEntry {
    pub slide_id: String,
    pub grid_x: usize,
    pub grid_y: usize,
    /// Path relative to the store root.
    pub path: String,
    pub label: u8,
}

impl PatchIndexEntry {
    pub fn key(&self) -> (&str, usize, usize) {
        (&self.slide_id, self.grid_x, self.grid_y)
    }
}

pub const PATCH_INDEX_FILE: &str = "patches.csv";

/// Writes `<root>/<slide_id>/<grid_x>_<grid_y>.png` for each patch and
/// returns the index rows (not yet written).
pub fn write_patches(root: &Path, patches: &[PatchRecord], deflate_level: u32) -> Result<Vec<PatchIndexEntry>> {
    Ok(write_patches_sized(root, patches, deflate_level)?.into_iter().map(|(e, _)| e).collect())
}

/// As [`write_patches`], also returning each PNG's size in bytes.
pub fn write_patches_sized(root: &Path, patches: &[PatchRecord], deflate_level: u32) -> Result<Vec<(PatchIndexEntry, u64)>> {
    patches
        .par_iter()
        .map(|p| {
            let dir = root.join(&p.slide_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let rel = format!("{}/{}_{}.png", p.slide_id, p.grid_x, p.grid_y);
            let size = save_image(&p.pixels, &root.join(&rel), deflate_level)?;
            let entry = PatchIndexEntry {
                slide_id: p.slide_id.clone(),
                grid_x: p.grid_x,
                grid_y: p.grid_y,
                path: rel,
                label: p.inherited_label,
            };
            Ok((entry, size))
        })
        .collect()
}

pub fn write_patch_index(path: &Path, entries: &[PatchIndexEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_patch_index(path: &Path) -> Result<Vec<PatchIndexEntry>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Loads the pixels behind an index entry.
pub fn load_patch(root: &Path, entry: &PatchIndexEntry) -> Result<PatchRecord> {
    let pixels = load_image(&root.join(&entry.path))?;
    if pixels.width() != PATCH_SIZE || pixels.height() != PATCH_SIZE {
        return Err(Error::InvalidInput(format!(
            "{} is {}x{}, expected {PATCH_SIZE}x{PATCH_SIZE}",
            entry.path,
            pixels.width(),
            pixels.height()
        )));
    }
    Ok(PatchRecord {
        slide_id: entry.slide_id.clone(),
        grid_x: entry.grid_x,
        grid_y: entry.grid_y,
        pixels,
        inherited_label: entry.label,
        cluster_id: None,
        variant: 0,
    })
}

pub fn patch_path(root: &Path, entry: &PatchIndexEntry) -> PathBuf {
    root.join(&entry.path)
}
