//! Information ratio (compressed over raw byte size) of patches and 1-D
//! clustering on it.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{encode_png, RasterImage, DEFAULT_DEFLATE_LEVEL};
use crate::numerics::{kmeans, KMeansFit, KMeansParams};
use crate::tiling::PATCH_SIZE;

/// Raw size of a 224x224 RGB patch in bytes.
pub const PATCH_RAW_BYTES: usize = PATCH_SIZE * PATCH_SIZE * 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoRatio {
    pub s_u: usize,
    /// Size of the whole PNG file, headers included.
    pub s_c: usize,
    pub ir: f64,
}

pub fn information_ratio(patch: &RasterImage) -> Result<InfoRatio> {
    information_ratio_at(patch, DEFAULT_DEFLATE_LEVEL)
}

pub fn information_ratio_at(patch: &RasterImage, deflate_level: u32) -> Result<InfoRatio> {
    if patch.width() != PATCH_SIZE || patch.height() != PATCH_SIZE {
        return Err(Error::InvalidInput(format!(
            "information ratio needs a {PATCH_SIZE}x{PATCH_SIZE} patch, got {}x{}",
            patch.width(),
            patch.height()
        )));
    }
    let s_u = patch.width() * patch.height() * 3;
    let s_c = encode_png(patch, deflate_level)?.len();
    Ok(InfoRatio {
        s_u,
        s_c,
        ir: s_c as f64 / s_u as f64,
    })
}

pub fn information_ratios(patches: &[&RasterImage], deflate_level: u32) -> Result<Vec<InfoRatio>> {
    patches.par_iter().map(|p| information_ratio_at(p, deflate_level)).collect()
}

/// 1-D k-means over information ratios. Centroids come back sorted
/// ascending and assignments use that order, so cluster 0 is always the
/// least informative.
pub fn cluster_by_ir(ratios: &[f64], k: usize, restarts: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if ratios.len() < k {
        return Err(Error::InvalidInput(format!(
            "{} information ratios cannot form {k} clusters",
            ratios.len()
        )));
    }
    let points: Vec<Vec<f64>> = ratios.iter().map(|&r| vec![r]).collect();
    let params = KMeansParams {
        k,
        restarts,
        seed,
        ..Default::default()
    };
    let mut fit = kmeans(&points, &params)?;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| fit.model.centroids[a][0].total_cmp(&fit.model.centroids[b][0]));
    let mut rank = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    fit.model.centroids = order.iter().map(|&i| fit.model.centroids[i].clone()).collect();
    fit.assignments.iter_mut().for_each(|a| *a = rank[*a]);
    Ok(fit)
}

/// A row of the information-ratio table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrRow {
    pub slide_id: String,
    pub grid_x: usize,
    pub grid_y: usize,
    pub s_c: usize,
    pub ir: f64,
    pub cluster_id: usize,
}

pub fn write_ir_table(path: &Path, rows: &[IrRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_ir_table(path: &Path) -> Result<Vec<IrRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::dihedral_variants;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Normal;

    fn noise_patch(seed: u64) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RasterImage::from_fn(PATCH_SIZE, PATCH_SIZE, |_, _| rng.random()).unwrap()
    }

    /// Exact 1-D k-means optimum by dynamic programming over sorted points.
    fn optimal_1d(values: &[f64], k: usize) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mut s = vec![0.0; n + 1];
        let mut s2 = vec![0.0; n + 1];
        for i in 0..n {
            s[i + 1] = s[i] + v[i];
            s2[i + 1] = s2[i] + v[i] * v[i];
        }
        let cost = |a: usize, b: usize| {
            let m = (b - a) as f64;
            let sum = s[b] - s[a];
            (s2[b] - s2[a]) - sum * sum / m
        };
        let mut dp = vec![f64::INFINITY; n + 1];
        dp[0] = 0.0;
        for _ in 0..k {
            let mut next = vec![f64::INFINITY; n + 1];
            for b in 1..=n {
                for a in 0..b {
                    if dp[a].is_finite() {
                        next[b] = next[b].min(dp[a] + cost(a, b));
                    }
                }
            }
            dp = next;
        }
        dp[n]
    }

    #[test]
    fn raw_size_is_fixed() {
        let r = information_ratio(&noise_patch(0)).unwrap();
        assert_eq!(r.s_u, 150_528);
        assert_eq!(PATCH_RAW_BYTES, 150_528);
        assert!((r.ir - r.s_c as f64 / 150_528.0).abs() < 1e-15);
    }

    #[test]
    fn constant_patch_compresses_well() {
        let c = RasterImage::filled(PATCH_SIZE, PATCH_SIZE, [200, 120, 180]).unwrap();
        let rc = information_ratio(&c).unwrap();
        assert!(rc.ir < 0.05, "{}", rc.ir);
        let rn = information_ratio(&noise_patch(1)).unwrap();
        assert!(rn.ir > rc.ir);
        assert!(rn.ir > 0.99, "uniform noise is incompressible: {}", rn.ir);
    }

    #[test]
    fn rejects_wrong_shape() {
        let small = RasterImage::filled(10, 10, [0, 0, 0]).unwrap();
        assert!(information_ratio(&small).is_err());
    }

    #[test]
    fn deterministic() {
        let p = noise_patch(2);
        assert_eq!(information_ratio(&p).unwrap(), information_ratio(&p).unwrap());
    }

    #[test]
    fn dihedral_variants_have_similar_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let blobs: Vec<(f64, f64, f64)> = (0..40)
            .map(|_| (rng.random_range(0.0..224.0), rng.random_range(0.0..224.0), rng.random_range(4.0..14.0)))
            .collect();
        let patch = RasterImage::from_fn(PATCH_SIZE, PATCH_SIZE, |x, y| {
            let inside = blobs.iter().any(|&(cx, cy, r)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) < r * r);
            let jitter = rng.random_range(0..12u8);
            if inside {
                [90 + jitter, 40, 140]
            } else {
                [230 - jitter, 190, 210]
            }
        })
        .unwrap();
        let base = information_ratio(&patch).unwrap().ir;
        for v in dihedral_variants(&patch).unwrap() {
            let ir = information_ratio(&v).unwrap().ir;
            assert!((ir - base).abs() < 0.02, "{base} vs {ir}");
        }
    }

    #[test]
    fn separated_pairs() {
        let fit = cluster_by_ir(&[0.9, 0.1, 0.9, 0.1], 2, 5, 0).unwrap();
        assert_eq!(fit.model.centroids, vec![vec![0.1], vec![0.9]]);
        assert_eq!(fit.assignments, vec![1, 0, 1, 0]);
    }

    #[test]
    fn single_cluster_is_mean() {
        let r = [0.2, 0.4, 0.9];
        let fit = cluster_by_ir(&r, 1, 3, 0).unwrap();
        assert!((fit.model.centroids[0][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn trimodal_modes_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ratios = Vec::new();
        for mode in [0.1, 0.4, 0.7] {
            let d = Normal::new(mode, 0.03).unwrap();
            ratios.extend((0..100).map(|_| rng.sample(d)));
        }
        let fit = cluster_by_ir(&ratios, 3, 10, 1).unwrap();
        for (c, mode) in fit.model.centroids.iter().zip([0.1, 0.4, 0.7]) {
            assert!((c[0] - mode).abs() < 0.05);
        }
        let best = optimal_1d(&ratios, 3);
        assert!((fit.model.inertia - best).abs() <= 1e-9 * best);
    }

    #[test]
    fn canonical_labels_are_stable() {
        let ratios: Vec<f64> = (0..60).map(|i| (i % 3) as f64 * 0.3 + (i as f64) * 1e-3).collect();
        let a = cluster_by_ir(&ratios, 3, 4, 9).unwrap();
        let b = cluster_by_ir(&ratios, 3, 4, 9).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert!(a.model.centroids.windows(2).all(|w| w[0][0] < w[1][0]));
        assert!(cluster_by_ir(&ratios[..2], 3, 1, 0).is_err());
    }

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ir.csv");
        let rows = vec![IrRow {
            slide_id: "s1".into(),
            grid_x: 2,
            grid_y: 3,
            s_c: 1234,
            ir: 1234.0 / 150_528.0,
            cluster_id: 1,
        }];
        write_ir_table(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("slide_id,grid_x,grid_y,s_c,ir,cluster_id\n"));
        assert_eq!(read_ir_table(&path).unwrap(), rows);
    }
}
