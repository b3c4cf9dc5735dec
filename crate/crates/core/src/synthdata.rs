//! Deterministic synthetic slides with planted tissue phenotypes and a
//! planted label signal.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chromanorm::{lab_of, rgb_of, ColorCache};
use crate::error::{Error, Result};
use crate::imagecore::{save_image, write_manifest, RasterImage, SlideManifestEntry, Split};
use crate::tiling::PATCH_SIZE;
use crate::util::{child_seed, patch_seed};

/// Texture families, loosely modeled on what clustering finds in H&E slides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phenotype {
    /// Empty glass outside the tissue section.
    Background,
    /// Densely packed red cells.
    Blood,
    /// Pink stroma with purple nuclei.
    Cellular,
    /// Pale lumen with a few thin strands.
    Void,
    /// Large pale cells with thin membranes.
    Fat,
}

impl Phenotype {
    pub const DEFAULT_SET: [Phenotype; 5] = [
        Phenotype::Background,
        Phenotype::Blood,
        Phenotype::Cellular,
        Phenotype::Void,
        Phenotype::Fat,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_slides: usize,
    /// Slides are `tiles_per_side x tiles_per_side` patches.
    pub tiles_per_side: usize,
    /// Each rendered pixel is written as a `scale x scale` block, so the
    /// pipeline must downsample by the same factor.
    pub scale: usize,
    pub phenotypes: Vec<Phenotype>,
    pub signal_phenotype: usize,
    /// 0 disables the signal; 1 halves the nucleus radius on label-1 slides.
    pub signal_strength: f64,
    /// Nucleus radius in pixels without signal.
    pub nucleus_radius: f64,
    /// Per-slide tint offsets are drawn uniformly from `[-tint, tint]` in
    /// each l-alpha-beta channel.
    pub tint: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_slides: 40,
            tiles_per_side: 10,
            scale: 1,
            phenotypes: Phenotype::DEFAULT_SET.to_vec(),
            signal_phenotype: 2,
            signal_strength: 1.0,
            nucleus_radius: 7.0,
            tint: 0.01,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidInput(m));
        if self.n_slides < 4 {
            return fail(format!("need at least 4 slides, got {}", self.n_slides));
        }
        if self.phenotypes.is_empty() {
            return fail("at least one phenotype is required".into());
        }
        if self.signal_phenotype >= self.phenotypes.len() {
            return fail(format!(
                "signal phenotype {} out of range for {} phenotypes",
                self.signal_phenotype,
                self.phenotypes.len()
            ));
        }
        if self.tiles_per_side == 0 || self.tiles_per_side * self.tiles_per_side < self.phenotypes.len() {
            return fail("too few tiles to place every phenotype".into());
        }
        if self.scale == 0 {
            return fail("scale must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return fail(format!("signal strength must be in [0, 1], got {}", self.signal_strength));
        }
        if !(self.nucleus_radius >= 1.0 && self.nucleus_radius <= 40.0) {
            return fail(format!("nucleus radius must be in [1, 40], got {}", self.nucleus_radius));
        }
        if !(0.0..=0.3).contains(&self.tint) {
            return fail(format!("tint must be in [0, 0.3], got {}", self.tint));
        }
        Ok(())
    }

    pub fn slide_id(&self, index: usize) -> String {
        format!("slide_{index:03}")
    }

    /// Balanced labels in a seeded order, with splits stratified by label
    /// (60% train, 20% validation, the rest test).
    pub fn assignments(&self) -> Vec<(u8, Split)> {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(self.seed, 0x1abe1));
        let mut labels: Vec<u8> = (0..self.n_slides).map(|i| u8::from(i >= self.n_slides / 2)).collect();
        labels.shuffle(&mut rng);
        let mut out = vec![(0, Split::Train); self.n_slides];
        for label in [0u8, 1] {
            let idx: Vec<usize> = (0..self.n_slides).filter(|&i| labels[i] == label).collect();
            let n = idx.len();
            let n_train = (n as f64 * 0.6).round() as usize;
            let n_val = (n as f64 * 0.2).round() as usize;
            for (rank, &i) in idx.iter().enumerate() {
                let split = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_val {
                    Split::Validation
                } else {
                    Split::Test
                };
                out[i] = (label, split);
            }
        }
        out
    }
}

/// One row of the ground-truth sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarRow {
    pub slide_id: String,
    pub grid_x: usize,
    pub grid_y: usize,
    /// Index into `SynthSpec::phenotypes`.
    pub true_phenotype: usize,
    pub signal_applied: bool,
}

#[derive(Debug, Clone)]
pub struct SynthSlide {
    pub slide_id: String,
    pub label: u8,
    pub split: Split,
    pub image: RasterImage,
    /// Phenotype index per tile, row-major.
    pub layout: Vec<usize>,
    pub tint: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct CorpusSummary {
    pub manifest_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub spec_path: PathBuf,
    pub entries: Vec<SlideManifestEntry>,
    pub sidecar: Vec<SidecarRow>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SIDECAR_FILE: &str = "sidecar.csv";
pub const SPEC_FILE: &str = "synth.json";

/// Slides are stored losslessly; the fast level only trades file size.
const SLIDE_DEFLATE_LEVEL: u32 = 1;

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amp: i16) -> [u8; 3] {
    let d = rng.random_range(-amp..=amp);
    base.map(|c| (c as i16 + d).clamp(0, 255) as u8)
}

fn noisy_fill(rng: &mut ChaCha8Rng, base: [u8; 3], amp: i16) -> RasterImage {
    RasterImage::from_fn(PATCH_SIZE, PATCH_SIZE, |_, _| jitter(rng, base, amp)).expect("patch size is valid")
}

fn disc_pixels(cx: f64, cy: f64, r: f64) -> Vec<(usize, usize)> {
    let mut pixels = Vec::new();
    let n = PATCH_SIZE as isize;
    let x0 = ((cx - r).floor() as isize).max(0);
    let x1 = ((cx + r).ceil() as isize).min(n - 1);
    let y0 = ((cy - r).floor() as isize).max(0);
    let y1 = ((cy + r).ceil() as isize).min(n - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                pixels.push((x as usize, y as usize));
            }
        }
    }
    pixels
}

fn fill_disc(img: &mut RasterImage, rng: &mut ChaCha8Rng, cx: f64, cy: f64, r: f64, color: [u8; 3], amp: i16) {
    for (x, y) in disc_pixels(cx, cy, r) {
        let c = jitter(rng, color, amp);
        img.set_pixel(x, y, c);
    }
}

fn draw_line(img: &mut RasterImage, rng: &mut ChaCha8Rng, from: (f64, f64), to: (f64, f64), width: f64, color: [u8; 3]) {
    let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
    let steps = (len * 2.0).ceil() as usize;
    for s in 0..=steps {
        let t = s as f64 / steps.max(1) as f64;
        let (x, y) = (from.0 + t * (to.0 - from.0), from.1 + t * (to.1 - from.1));
        fill_disc(img, rng, x, y, width / 2.0, color, 4);
    }
}

fn render_tile(kind: Phenotype, spec: &SynthSpec, signal: bool, rng: &mut ChaCha8Rng) -> RasterImage {
    let side = PATCH_SIZE as f64;
    let uniform = |rng: &mut ChaCha8Rng| (rng.random_range(0.0..side), rng.random_range(0.0..side));
    match kind {
        Phenotype::Background => noisy_fill(rng, [190, 196, 212], 3),
        Phenotype::Blood => {
            let mut img = noisy_fill(rng, [150, 28, 44], 6);
            for _ in 0..110 {
                let (x, y) = uniform(rng);
                let r = rng.random_range(5.0..7.0);
                fill_disc(&mut img, rng, x, y, r, [196, 52, 64], 5);
                fill_disc(&mut img, rng, x, y, r * 0.35, [210, 86, 92], 4);
            }
            img
        }
        Phenotype::Cellular => {
            let mut img = noisy_fill(rng, [196, 137, 170], 8);
            let r0 = spec.nucleus_radius;
            let r = if signal { r0 * (1.0 - 0.5 * spec.signal_strength) } else { r0 };
            // Nuclei are added until a fixed pixel coverage is reached, so the
            // radius signal leaves tile colour statistics untouched.
            let target = (0.22 * side * side) as usize;
            let mut covered = vec![false; PATCH_SIZE * PATCH_SIZE];
            let mut n_covered = 0;
            while n_covered < target {
                let (x, y) = uniform(rng);
                let rr = r * rng.random_range(0.85..1.15);
                let shade = rng.random_range(-12i16..=12);
                let color = [80, 44, 138].map(|c: u8| (c as i16 + shade) as u8);
                for (px, py) in disc_pixels(x, y, rr) {
                    let i = py * PATCH_SIZE + px;
                    if !covered[i] && n_covered < target {
                        covered[i] = true;
                        n_covered += 1;
                        let c = jitter(rng, color, 6);
                        img.set_pixel(px, py, c);
                    }
                }
            }
            img
        }
        Phenotype::Void => {
            let mut img = noisy_fill(rng, [204, 171, 192], 4);
            for _ in 0..5 {
                let a = uniform(rng);
                let angle = rng.random_range(0.0..TAU);
                let len = rng.random_range(40.0..120.0);
                let b = (a.0 + len * angle.cos(), a.1 + len * angle.sin());
                draw_line(&mut img, rng, a, b, 2.5, [184, 129, 163]);
            }
            img
        }
        Phenotype::Fat => {
            let seeds: Vec<(f64, f64)> = (0..14).map(|_| uniform(rng)).collect();
            RasterImage::from_fn(PATCH_SIZE, PATCH_SIZE, |x, y| {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut d1 = f64::INFINITY;
                let mut d2 = f64::INFINITY;
                for &(sx, sy) in &seeds {
                    let d = ((px - sx).powi(2) + (py - sy).powi(2)).sqrt();
                    if d < d1 {
                        d2 = d1;
                        d1 = d;
                    } else if d < d2 {
                        d2 = d;
                    }
                }
                if d2 - d1 < 3.0 {
                    jitter(rng, [176, 101, 142], 6)
                } else {
                    jitter(rng, [208, 206, 203], 3)
                }
            })
            .expect("patch size is valid")
        }
    }
}

/// Ranks tiles by a smooth random field and cuts the ranking into equal
/// bands, one per phenotype, giving contiguous regions of equal total area.
fn layout(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let t = spec.tiles_per_side;
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.random_range(0.0..TAU);
            let freq = rng.random_range(0.5..1.5) / t as f64;
            (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..TAU), rng.random_range(0.5..1.0))
        })
        .collect();
    let mut tiles: Vec<(f64, usize)> = (0..t * t)
        .map(|i| {
            let (x, y) = ((i % t) as f64, (i / t) as f64);
            let v: f64 = waves.iter().map(|&(u, w, phase, amp)| amp * (TAU * (u * x + w * y) + phase).cos()).sum();
            (v, i)
        })
        .collect();
    tiles.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = spec.phenotypes.len();
    let n = t * t;
    let mut out = vec![0; n];
    for (rank, &(_, i)) in tiles.iter().enumerate() {
        out[i] = rank * k / n;
    }
    out
}

/// Shifts every pixel by `tint` in l-alpha-beta. Values are dithered before
/// rounding: flat regions would otherwise carry a slide-specific rounding
/// bias that normalization cannot remove.
fn apply_tint(img: &RasterImage, tint: [f64; 3], rng: &mut ChaCha8Rng) -> Result<RasterImage> {
    let mut shifted = ColorCache::new();
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.pixels() {
        let rgb = shifted.get(px, |px| {
            let lab = lab_of(px.map(|c| c as f64 / 255.0));
            rgb_of([lab[0] + tint[0], lab[1] + tint[1], lab[2] + tint[2]])
        });
        for v in rgb {
            let dithered = v * 255.0 + rng.random_range(-0.5..0.5);
            data.push((dithered + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    RasterImage::new(img.width(), img.height(), data)
}

fn upscale(img: &RasterImage, factor: usize) -> RasterImage {
    if factor == 1 {
        return img.clone();
    }
    RasterImage::from_fn(img.width() * factor, img.height() * factor, |x, y| img.pixel(x / factor, y / factor))
        .expect("scaled dimensions are valid")
}

/// Renders one slide without touching the filesystem.
pub fn render_slide(spec: &SynthSpec, index: usize) -> Result<SynthSlide> {
    spec.validate()?;
    if index >= spec.n_slides {
        return Err(Error::InvalidInput(format!("slide index {index} out of range")));
    }
    let (label, split) = spec.assignments()[index];
    let slide_id = spec.slide_id(index);
    let slide_seed = child_seed(spec.seed, index as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(slide_seed);
    let layout = layout(spec, &mut rng);
    let tint = [0; 3].map(|_| if spec.tint > 0.0 { rng.random_range(-spec.tint..=spec.tint) } else { 0.0 });

    let t = spec.tiles_per_side;
    let mut image = RasterImage::filled(t * PATCH_SIZE, t * PATCH_SIZE, [0, 0, 0])?;
    for (i, &ph) in layout.iter().enumerate() {
        let (gx, gy) = (i % t, i / t);
        let mut tile_rng = ChaCha8Rng::seed_from_u64(patch_seed(slide_seed, &slide_id, gx, gy));
        let signal = label == 1 && ph == spec.signal_phenotype && spec.signal_strength > 0.0;
        let tile = render_tile(spec.phenotypes[ph], spec, signal, &mut tile_rng);
        image.blit(&tile, gx * PATCH_SIZE, gy * PATCH_SIZE);
    }
    if tint != [0.0; 3] {
        image = apply_tint(&image, tint, &mut rng)?;
    }
    Ok(SynthSlide {
        slide_id,
        label,
        split,
        image: upscale(&image, spec.scale),
        layout,
        tint,
    })
}

pub fn sidecar_rows(spec: &SynthSpec, slide: &SynthSlide) -> Vec<SidecarRow> {
    let t = spec.tiles_per_side;
    slide
        .layout
        .iter()
        .enumerate()
        .map(|(i, &ph)| SidecarRow {
            slide_id: slide.slide_id.clone(),
            grid_x: i % t,
            grid_y: i / t,
            true_phenotype: ph,
            signal_applied: slide.label == 1 && ph == spec.signal_phenotype && spec.signal_strength > 0.0,
        })
        .collect()
}

/// Writes `slides/<id>.png`, `manifest.csv`, `sidecar.csv` and `synth.json`
/// under `out_dir`.
pub fn generate_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<CorpusSummary> {
    spec.validate()?;
    let slides_dir = out_dir.join("slides");
    fs::create_dir_all(&slides_dir).map_err(|e| Error::io(&slides_dir, e))?;
    let rendered: Vec<(SlideManifestEntry, Vec<SidecarRow>)> = (0..spec.n_slides)
        .into_par_iter()
        .map(|i| {
            let slide = render_slide(spec, i)?;
            let rel = PathBuf::from("slides").join(format!("{}.png", slide.slide_id));
            save_image(&slide.image, &out_dir.join(&rel), SLIDE_DEFLATE_LEVEL)?;
            let rows = sidecar_rows(spec, &slide);
            Ok((
                SlideManifestEntry {
                    slide_id: slide.slide_id,
                    image_path: rel,
                    label: slide.label,
                    split: slide.split,
                },
                rows,
            ))
        })
        .collect::<Result<_>>()?;
    let (entries, nested): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    let sidecar: Vec<SidecarRow> = nested.into_iter().flatten().collect();

    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest_path, &entries)?;
    let sidecar_path = out_dir.join(SIDECAR_FILE);
    write_sidecar(&sidecar_path, &sidecar)?;
    let spec_path = out_dir.join(SPEC_FILE);
    let json = serde_json::to_string_pretty(spec)?;
    fs::write(&spec_path, json).map_err(|e| Error::io(&spec_path, e))?;
    Ok(CorpusSummary {
        manifest_path,
        sidecar_path,
        spec_path,
        entries,
        sidecar,
    })
}

pub fn write_sidecar(path: &Path, rows: &[SidecarRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Vec<SidecarRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chromanorm::compute_stats;
    use crate::imagecore::{downsample, load_image, read_manifest};

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_slides: 4,
            tiles_per_side: 4,
            ..Default::default()
        }
    }

    #[test]
    fn layout_is_balanced() {
        let spec = SynthSpec::default();
        let slide = render_slide(&spec, 0).unwrap();
        let mut counts = [0usize; 5];
        slide.layout.iter().for_each(|&p| counts[p] += 1);
        assert_eq!(counts, [20; 5]);
        assert_eq!((slide.image.width(), slide.image.height()), (2240, 2240));
    }

    #[test]
    fn labels_and_splits_are_stratified() {
        let spec = SynthSpec::default();
        let a = spec.assignments();
        for label in [0u8, 1] {
            let count = |s: Split| a.iter().filter(|&&(l, sp)| l == label && sp == s).count();
            assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (12, 4, 4));
        }
    }

    #[test]
    fn signal_only_touches_signal_tiles() {
        let spec = small_spec();
        let null = SynthSpec {
            signal_strength: 0.0,
            ..spec.clone()
        };
        let idx = spec.assignments().iter().position(|a| a.0 == 1).unwrap();
        let with = render_slide(&spec, idx).unwrap();
        let without = render_slide(&null, idx).unwrap();
        let t = spec.tiles_per_side;
        for (i, &ph) in with.layout.iter().enumerate() {
            let (gx, gy) = (i % t, i / t);
            let a = with.image.crop(gx * 224, gy * 224, 224, 224).unwrap();
            let b = without.image.crop(gx * 224, gy * 224, 224, 224).unwrap();
            assert_eq!(a == b, ph != spec.signal_phenotype, "tile {i}");
        }
        assert!(sidecar_rows(&spec, &with).iter().any(|r| r.signal_applied));
        assert!(sidecar_rows(&null, &without).iter().all(|r| !r.signal_applied));
    }

    #[test]
    fn tint_varies_between_slides() {
        let spec = SynthSpec {
            tiles_per_side: 3,
            n_slides: 6,
            phenotypes: vec![Phenotype::Cellular],
            signal_phenotype: 0,
            signal_strength: 0.0,
            ..Default::default()
        };
        let means: Vec<[f64; 3]> = (0..6).map(|i| compute_stats(&render_slide(&spec, i).unwrap().image, None).unwrap().mean).collect();
        for c in 0..3 {
            let lo = means.iter().map(|m| m[c]).fold(f64::INFINITY, f64::min);
            let hi = means.iter().map(|m| m[c]).fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo > spec.tint / 2.0, "channel {c} spread {}", hi - lo);
        }
    }

    #[test]
    fn scale_round_trips_through_downsample() {
        let spec = SynthSpec {
            scale: 2,
            ..small_spec()
        };
        let big = render_slide(&spec, 1).unwrap();
        let plain = render_slide(&SynthSpec { scale: 1, ..spec }, 1).unwrap();
        assert_eq!(big.image.width(), 2 * 4 * 224);
        assert_eq!(downsample(&big.image, 2).unwrap(), plain.image);
    }

    #[test]
    fn corpus_on_disk_is_deterministic() {
        let spec = small_spec();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = generate_corpus(&spec, a.path()).unwrap();
        generate_corpus(&spec, b.path()).unwrap();
        for name in [MANIFEST_FILE, SIDECAR_FILE, SPEC_FILE, "slides/slide_002.png"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let manifest = read_manifest(&sa.manifest_path).unwrap();
        assert_eq!(manifest.len(), 4);
        assert_eq!(load_image(&manifest[0].image_path).unwrap().width(), 896);
        let sidecar = read_sidecar(&sa.sidecar_path).unwrap();
        assert_eq!(sidecar.len(), 4 * 16);
        let header = fs::read_to_string(&sa.sidecar_path).unwrap();
        assert!(header.starts_with("slide_id,grid_x,grid_y,true_phenotype,signal_applied\n"));
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            SynthSpec { n_slides: 3, ..Default::default() },
            SynthSpec { signal_phenotype: 5, ..Default::default() },
            SynthSpec { signal_strength: 1.5, ..Default::default() },
            SynthSpec { tiles_per_side: 2, ..Default::default() },
            SynthSpec { scale: 0, ..Default::default() },
        ];
        for spec in bad {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
    }
}
