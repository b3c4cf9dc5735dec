use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FeatureExtractor, FeatureTensor, FEATURE_CHANNELS, GRID};
use crate::error::{Error, Result};
use crate::tiling::{PatchRecord, PATCH_SIZE};

const SHRINK: usize = 4;
const SIDE: usize = PATCH_SIZE / SHRINK;
const CELL: usize = SIDE / GRID;
const CONV_FILTERS: usize = 16;
const BASE: usize = CONV_FILTERS + 6;

/// Seeded, dependency-free descriptor with the 7x7x512 output shape of a
/// late convolutional block.
///
/// The patch is block-averaged to 56x56 and passed through a bank of 3x3
/// RGB filters with ReLU. Each 8x8 cell is summarized by its mean filter
/// responses plus its colour mean and spread, and a seeded bank of 512
/// pointwise filters with ReLU lifts that summary to the output channels.
/// No layer has a bias, so the descriptor scales linearly with image gain.
#[derive(Debug, Clone)]
pub struct ReferenceExtractor {
    seed: u64,
    conv: Vec<[f32; 27]>,
    lift: Vec<[f32; BASE]>,
}

impl ReferenceExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |scale: f32| -> f32 {
            let v: f32 = StandardNormal.sample(&mut rng);
            v * scale
        };
        let conv = (0..CONV_FILTERS)
            .map(|_| {
                let mut w = [0.0f32; 27];
                w.iter_mut().for_each(|v| *v = draw(1.0 / 27f32.sqrt()));
                w
            })
            .collect();
        let lift = (0..FEATURE_CHANNELS)
            .map(|_| {
                let mut w = [0.0f32; BASE];
                w.iter_mut().for_each(|v| *v = draw(1.0 / (BASE as f32).sqrt()));
                w
            })
            .collect();
        Self { seed, conv, lift }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn shrink(patch: &PatchRecord) -> Vec<[f32; 3]> {
        let data = patch.pixels.data();
        let mut out = vec![[0.0f32; 3]; SIDE * SIDE];
        for (y, row) in out.chunks_exact_mut(SIDE).enumerate() {
            for (x, px) in row.iter_mut().enumerate() {
                let mut acc = [0u32; 3];
                for dy in 0..SHRINK {
                    let base = ((y * SHRINK + dy) * PATCH_SIZE + x * SHRINK) * 3;
                    for v in data[base..base + SHRINK * 3].chunks_exact(3) {
                        acc[0] += u32::from(v[0]);
                        acc[1] += u32::from(v[1]);
                        acc[2] += u32::from(v[2]);
                    }
                }
                let scale = 1.0 / (255.0 * (SHRINK * SHRINK) as f32);
                *px = [acc[0] as f32 * scale, acc[1] as f32 * scale, acc[2] as f32 * scale];
            }
        }
        out
    }
}

impl FeatureExtractor for ReferenceExtractor {
    fn fingerprint(&self) -> String {
        format!("reference-v1-seed{}", self.seed)
    }

    fn extract(&self, patch: &PatchRecord) -> Result<FeatureTensor> {
        let (w, h) = (patch.pixels.width(), patch.pixels.height());
        if w != PATCH_SIZE || h != PATCH_SIZE {
            return Err(Error::InvalidInput(format!(
                "feature extraction needs a {PATCH_SIZE}x{PATCH_SIZE} patch, got {w}x{h}"
            )));
        }
        let small = Self::shrink(patch);
        let mut base = vec![[0.0f32; BASE]; GRID * GRID];
        let mut window = [0.0f32; 27];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let mut k = 0;
                for dy in [-1isize, 0, 1] {
                    let yy = (y as isize + dy).clamp(0, SIDE as isize - 1) as usize;
                    for dx in [-1isize, 0, 1] {
                        let xx = (x as isize + dx).clamp(0, SIDE as isize - 1) as usize;
                        window[k..k + 3].copy_from_slice(&small[yy * SIDE + xx]);
                        k += 3;
                    }
                }
                let cell = &mut base[(y / CELL) * GRID + x / CELL];
                for (acc, f) in cell.iter_mut().zip(&self.conv) {
                    let r: f32 = f.iter().zip(&window).map(|(a, b)| a * b).sum();
                    *acc += r.max(0.0);
                }
            }
        }
        let area = (CELL * CELL) as f32;
        for (ci, cell) in base.iter_mut().enumerate() {
            let (gy, gx) = (ci / GRID, ci % GRID);
            cell[..CONV_FILTERS].iter_mut().for_each(|v| *v /= area);
            let mut sum = [0.0f32; 3];
            let mut sq = [0.0f32; 3];
            for y in gy * CELL..(gy + 1) * CELL {
                for x in gx * CELL..(gx + 1) * CELL {
                    for c in 0..3 {
                        let v = small[y * SIDE + x][c];
                        sum[c] += v;
                        sq[c] += v * v;
                    }
                }
            }
            for c in 0..3 {
                let mean = sum[c] / area;
                cell[CONV_FILTERS + c] = mean;
                cell[CONV_FILTERS + 3 + c] = (sq[c] / area - mean * mean).max(0.0).sqrt();
            }
        }
        let mut data = Vec::with_capacity(GRID * GRID * FEATURE_CHANNELS);
        for cell in &base {
            for f in &self.lift {
                let r: f32 = f.iter().zip(cell).map(|(a, b)| a * b).sum();
                data.push(r.max(0.0));
            }
        }
        FeatureTensor::new(GRID, GRID, FEATURE_CHANNELS, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::RasterImage;
    use crate::phenotype::global_average_pool;
    use crate::tiling::channel_multiply;
    use rand::Rng;

    fn record(pixels: RasterImage) -> PatchRecord {
        PatchRecord {
            slide_id: "s".into(),
            grid_x: 0,
            grid_y: 0,
            pixels,
            inherited_label: 0,
            cluster_id: None,
            variant: 0,
        }
    }

    fn textured(seed: u64) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dots: Vec<(f64, f64)> = (0..60).map(|_| (rng.random_range(0.0..224.0), rng.random_range(0.0..224.0))).collect();
        RasterImage::from_fn(PATCH_SIZE, PATCH_SIZE, |x, y| {
            let near = dots.iter().any(|&(cx, cy)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) < 36.0);
            let n = rng.random_range(0..10u8);
            if near {
                [80 + n, 40 + n, 120 + n]
            } else {
                [200 + n, 150 + n, 180 + n]
            }
        })
        .unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn constant_patch_gives_identical_cells() {
        let e = ReferenceExtractor::new(1);
        let t = e.extract(&record(RasterImage::filled(224, 224, [120, 80, 160]).unwrap())).unwrap();
        assert_eq!((t.height, t.width, t.channels), (7, 7, 512));
        for y in 0..7 {
            for x in 0..7 {
                assert_eq!(t.cell(y, x), t.cell(0, 0));
            }
        }
        assert!(t.cell(0, 0).iter().any(|&v| v > 0.0));
    }

    #[test]
    fn deterministic() {
        let p = record(textured(0));
        let a = ReferenceExtractor::new(3).extract(&p).unwrap();
        let b = ReferenceExtractor::new(3).extract(&p).unwrap();
        assert_eq!(a, b);
        let c = ReferenceExtractor::new(4).extract(&p).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn robust_to_gain() {
        let e = ReferenceExtractor::new(0);
        for seed in 0..4 {
            let img = textured(seed);
            let a = global_average_pool(&e.extract(&record(img.clone())).unwrap());
            let b = global_average_pool(&e.extract(&record(channel_multiply(&img, 1.2).unwrap())).unwrap());
            assert!(cosine(&a, &b) > 0.95);
        }
    }

    #[test]
    fn rejects_wrong_shape() {
        let e = ReferenceExtractor::new(0);
        assert!(e.extract(&record(RasterImage::filled(100, 224, [0, 0, 0]).unwrap())).is_err());
    }
}
