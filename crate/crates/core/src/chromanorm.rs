//! Reinhard-style chromatic normalization in the decorrelated l-alpha-beta space.
//!
//! Forward chain: linear RGB -> XYZ -> LMS -> white-normalized LMS -> log10 ->
//! l-alpha-beta. The inverse runs the chain backwards with matrix inverses
//! obtained by Gaussian elimination.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::RasterImage;

pub type Mat3 = [[f64; 3]; 3];

pub const RGB_TO_XYZ: Mat3 = [
    [0.5141, 0.3239, 0.1604],
    [0.2651, 0.6702, 0.0641],
    [0.0241, 0.1228, 0.8444],
];

pub const XYZ_TO_LMS: Mat3 = [
    [0.3897, 0.6890, -0.0787],
    [-0.2298, 1.1834, 0.0464],
    [0.0, 0.0, 1.0],
];

/// Values below this are clamped before taking the logarithm.
pub const LOG_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabPixel {
    pub l: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LabPixel {
    pub fn new(l: f64, alpha: f64, beta: f64) -> Self {
        Self { l, alpha, beta }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.l, self.alpha, self.beta]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

struct Tables {
    log_to_lab: Mat3,
    lab_to_log: Mat3,
    lms_to_xyz: Mat3,
    xyz_to_rgb: Mat3,
    lms_white: [f64; 3],
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let s3 = 1.0 / 3f64.sqrt();
        let s6 = 1.0 / 6f64.sqrt();
        let s2 = 1.0 / 2f64.sqrt();
        let scale: Mat3 = [[s3, 0.0, 0.0], [0.0, s6, 0.0], [0.0, 0.0, s2]];
        let rotation: Mat3 = [[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]];
        let log_to_lab = mat_mul(&scale, &rotation);
        let lms_white = mat_vec(&XYZ_TO_LMS, &mat_vec(&RGB_TO_XYZ, &[1.0, 1.0, 1.0]));
        Tables {
            lab_to_log: invert3(&log_to_lab).expect("lab rotation is invertible"),
            lms_to_xyz: invert3(&XYZ_TO_LMS).expect("LMS matrix is invertible"),
            xyz_to_rgb: invert3(&RGB_TO_XYZ).expect("XYZ matrix is invertible"),
            log_to_lab,
            lms_white,
        }
    })
}

#[inline]
pub fn mat_vec(m: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Gauss-Jordan elimination with partial pivoting. `None` for singular input.
pub fn invert3(m: &Mat3) -> Option<Mat3> {
    let mut a = [[0.0f64; 6]; 3];
    for i in 0..3 {
        a[i][..3].copy_from_slice(&m[i]);
        a[i][3 + i] = 1.0;
    }
    for col in 0..3 {
        let pivot = (col..3).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[pivot][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, pivot);
        let p = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..3 {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    let pivot_row = a[col];
                    for (v, pv) in a[r].iter_mut().zip(pivot_row.iter()) {
                        *v -= f * pv;
                    }
                }
            }
        }
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        inv[i].copy_from_slice(&a[i][3..]);
    }
    Some(inv)
}

pub fn rgb_to_xyz(rgb: [f64; 3]) -> [f64; 3] {
    mat_vec(&RGB_TO_XYZ, &rgb)
}

/// The log-space rotation on its own. Affine (in fact linear) in its input.
pub fn log_lms_to_lab(log_lms: [f64; 3]) -> LabPixel {
    LabPixel::from_array(mat_vec(&tables().log_to_lab, &log_lms))
}

#[inline]
pub(crate) fn lab_of(rgb: [f64; 3]) -> [f64; 3] {
    let t = tables();
    let lms = mat_vec(&XYZ_TO_LMS, &mat_vec(&RGB_TO_XYZ, &rgb));
    let log = [
        (lms[0] / t.lms_white[0]).max(LOG_EPSILON).log10(),
        (lms[1] / t.lms_white[1]).max(LOG_EPSILON).log10(),
        (lms[2] / t.lms_white[2]).max(LOG_EPSILON).log10(),
    ];
    mat_vec(&t.log_to_lab, &log)
}

#[inline]
pub(crate) fn rgb_of(lab: [f64; 3]) -> [f64; 3] {
    let t = tables();
    let log = mat_vec(&t.lab_to_log, &lab);
    let lms = [
        10f64.powf(log[0]) * t.lms_white[0],
        10f64.powf(log[1]) * t.lms_white[1],
        10f64.powf(log[2]) * t.lms_white[2],
    ];
    let rgb = mat_vec(&t.xyz_to_rgb, &mat_vec(&t.lms_to_xyz, &lms));
    [
        rgb[0].clamp(0.0, 1.0),
        rgb[1].clamp(0.0, 1.0),
        rgb[2].clamp(0.0, 1.0),
    ]
}

/// Converts a linear RGB triple in `[0, 1]` to l-alpha-beta.
pub fn rgb_to_lab(rgb: [f64; 3]) -> Result<LabPixel> {
    if rgb.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite RGB {rgb:?}")));
    }
    Ok(LabPixel::from_array(lab_of(rgb)))
}

/// Inverse of [`rgb_to_lab`]; out-of-gamut results are clamped to `[0, 1]`.
pub fn lab_to_rgb(lab: LabPixel) -> Result<[f64; 3]> {
    let v = lab.as_array();
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite lab pixel {v:?}")));
    }
    Ok(rgb_of(v))
}

#[inline]
fn byte_lab(px: [u8; 3]) -> [f64; 3] {
    lab_of([
        px[0] as f64 / 255.0,
        px[1] as f64 / 255.0,
        px[2] as f64 / 255.0,
    ])
}

/// Per-channel population mean and standard deviation in l-alpha-beta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub const STANDARD_NORMAL: ChannelStats = ChannelStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Stats over an iterator of lab pixels. Fails on fewer than two pixels
    /// or on any zero-variance channel.
    pub fn from_lab(pixels: impl IntoIterator<Item = LabPixel>) -> Result<Self> {
        let mut acc = StatsAccumulator::default();
        for p in pixels {
            acc.push(p.as_array());
        }
        acc.finish()
    }

    /// Pools several per-image stats, weighting each by its pixel count, into
    /// the stats of the union of the underlying pixels.
    pub fn pooled(parts: &[(ChannelStats, u64)]) -> Result<Self> {
        let total: u64 = parts.iter().map(|(_, n)| n).sum();
        if total < 2 {
            return Err(Error::Degenerate("pooling needs at least two pixels".into()));
        }
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = parts.iter().map(|(s, n)| s.mean[c] * *n as f64).sum::<f64>() / total as f64;
            let second: f64 = parts
                .iter()
                .map(|(s, n)| (s.std[c].powi(2) + (s.mean[c] - mean[c]).powi(2)) * *n as f64)
                .sum();
            std[c] = (second / total as f64).sqrt();
        }
        Self::validated(mean, std)
    }

    fn validated(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        let flat: Vec<&str> = ["l", "alpha", "beta"]
            .iter()
            .zip(std.iter())
            .filter(|(_, s)| !(**s > 0.0))
            .map(|(n, _)| *n)
            .collect();
        if !flat.is_empty() {
            return Err(Error::Degenerate(format!(
                "zero variance in channel(s) {}",
                flat.join(", ")
            )));
        }
        Ok(Self { mean, std })
    }
}

/// Shifted-sum accumulator; the shift (first sample) keeps the variance
/// computation well conditioned.
#[derive(Default)]
struct StatsAccumulator {
    n: u64,
    shift: [f64; 3],
    sum: [f64; 3],
    sum_sq: [f64; 3],
}

impl StatsAccumulator {
    #[inline]
    fn push(&mut self, v: [f64; 3]) {
        if self.n == 0 {
            self.shift = v;
        }
        self.n += 1;
        for c in 0..3 {
            let d = v[c] - self.shift[c];
            self.sum[c] += d;
            self.sum_sq[c] += d * d;
        }
    }

    fn finish(self) -> Result<ChannelStats> {
        if self.n < 2 {
            return Err(Error::Degenerate(format!(
                "need at least 2 pixels for channel statistics, got {}",
                self.n
            )));
        }
        let n = self.n as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let m = self.sum[c] / n;
            mean[c] = self.shift[c] + m;
            let var = (self.sum_sq[c] / n - m * m).max(0.0);
            // Below ~1e-24 the variance is rounding noise from a constant channel.
            std[c] = if var > 1e-24 { var.sqrt() } else { 0.0 };
        }
        ChannelStats::validated(mean, std)
    }
}

/// Channel statistics of `img`, restricted to pixels where `mask` is true.
pub fn compute_stats(img: &RasterImage, mask: Option<&[bool]>) -> Result<ChannelStats> {
    if let Some(m) = mask {
        if m.len() != img.pixel_count() {
            return Err(Error::DimensionMismatch {
                expected: img.pixel_count(),
                got: m.len(),
            });
        }
    }
    let mut acc = StatsAccumulator::default();
    let mut cache = ColorCache::new();
    for (i, px) in img.pixels().enumerate() {
        if mask.is_none_or(|m| m[i]) {
            acc.push(cache.get(px, byte_lab));
        }
    }
    acc.finish()
}

/// Pixels that are not near-white background: mean intensity below `threshold`.
pub fn tissue_mask(img: &RasterImage, threshold: u8) -> Vec<bool> {
    img.pixels()
        .map(|p| (p[0] as u16 + p[1] as u16 + p[2] as u16) < 3 * threshold as u16)
        .collect()
}

/// Normalization target: the standard normal per channel, or explicit stats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormTarget {
    StandardNormal,
    Stats(ChannelStats),
}

impl NormTarget {
    pub fn stats(&self) -> ChannelStats {
        match self {
            NormTarget::StandardNormal => ChannelStats::STANDARD_NORMAL,
            NormTarget::Stats(s) => *s,
        }
    }
}

/// Computes the source statistics of `img` (over `mask` when given) and maps
/// them onto `target`.
pub fn normalize_image(img: &RasterImage, target: NormTarget, mask: Option<&[bool]>) -> Result<RasterImage> {
    let source = compute_stats(img, mask)?;
    apply_normalization(img, &source, &target.stats())
}

/// Per channel `x' = (x - mu_src) * (sigma_tgt / sigma_src) + mu_tgt`, then back to 8-bit RGB.
pub fn apply_normalization(img: &RasterImage, source: &ChannelStats, target: &ChannelStats) -> Result<RasterImage> {
    let source = ChannelStats::validated(source.mean, source.std)?;
    let target = ChannelStats::validated(target.mean, target.std)?;
    let gain = [
        target.std[0] / source.std[0],
        target.std[1] / source.std[1],
        target.std[2] / source.std[2],
    ];
    let map = |px: [u8; 3]| -> [u8; 3] {
        let lab = byte_lab(px);
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (lab[c] - source.mean[c]) * gain[c] + target.mean[c];
        }
        let rgb = rgb_of(out);
        [quantize(rgb[0]), quantize(rgb[1]), quantize(rgb[2])]
    };
    let mut cache = ColorCache::new();
    let mut data = Vec::with_capacity(img.data().len());
    for px in img.pixels() {
        data.extend_from_slice(&cache.get(px, map));
    }
    RasterImage::new(img.width(), img.height(), data)
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Direct-mapped memo keyed on the packed RGB value. Histology rasters repeat
/// colors heavily, so most transcendental evaluations are skipped.
pub(crate) struct ColorCache<T: Copy> {
    keys: Vec<u32>,
    vals: Vec<T>,
}

impl<T: Copy + Default> ColorCache<T> {
    const BITS: u32 = 16;

    pub(crate) fn new() -> Self {
        Self {
            keys: vec![u32::MAX; 1 << Self::BITS],
            vals: vec![T::default(); 1 << Self::BITS],
        }
    }

    #[inline]
    pub(crate) fn get(&mut self, px: [u8; 3], f: impl FnOnce([u8; 3]) -> T) -> T {
        let key = (px[0] as u32) << 16 | (px[1] as u32) << 8 | px[2] as u32;
        let slot = (key.wrapping_mul(0x9E37_79B1) >> (32 - Self::BITS)) as usize;
        if self.keys[slot] == key {
            return self.vals[slot];
        }
        let v = f(px);
        self.keys[slot] = key;
        self.vals[slot] = v;
        v
    }
}
