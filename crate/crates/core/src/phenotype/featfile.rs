//! Binary feature interchange: `FEAT`, then little-endian u32 version,
//! count, height, width, channels, then f32 values row-major.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FeatureExtractor, FeatureTensor, FEATURE_CHANNELS, GRID};
use crate::error::{Error, Result};
use crate::tiling::PatchRecord;

const MAGIC: &[u8; 4] = b"FEAT";
const VERSION: u32 = 1;
const HEADER: usize = 24;

/// A decoded feature file: `count` tensors of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatFile {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatFile {
    pub fn row_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.row_len().max(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn tensor(&self, i: usize) -> Result<FeatureTensor> {
        FeatureTensor::new(self.height, self.width, self.channels, self.row(i).to_vec())
    }
}

pub fn write_feat(path: &Path, feat: &FeatFile) -> Result<()> {
    let n = feat.row_len();
    if n == 0 || !feat.data.len().is_multiple_of(n) {
        return Err(Error::FeatureFile(format!(
            "{} values do not divide into rows of {n}",
            feat.data.len()
        )));
    }
    let count = u32::try_from(feat.count()).map_err(|_| Error::FeatureFile("too many rows".into()))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER);
    header.extend_from_slice(MAGIC);
    for v in [VERSION, count, feat.height as u32, feat.width as u32, feat.channels as u32] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for v in &feat.data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_feat(bytes: &[u8], path: &Path) -> Result<FeatFile> {
    let bad = |m: String| Error::FeatureFile(format!("{}: {m}", path.display()));
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(bad("missing FEAT header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (version, count, height, width, channels) = (word(0), word(1), word(2), word(3), word(4));
    if version != VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let values = count
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| bad("header dimensions overflow".into()))?;
    let body = &bytes[HEADER..];
    if body.len() != values * 4 {
        return Err(bad(format!("expected {} payload bytes, found {}", values * 4, body.len())));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite feature value".into()));
    }
    Ok(FeatFile {
        height,
        width,
        channels,
        data,
    })
}

pub fn read_feat(path: &Path) -> Result<FeatFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_feat(&bytes, path)
}

/// A row of the CSV that accompanies a feature file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatIndexRow {
    pub row: usize,
    pub slide_id: String,
    pub grid_x: usize,
    pub grid_y: usize,
}

pub fn write_feat_index(path: &Path, rows: &[FeatIndexRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_feat_index(path: &Path) -> Result<Vec<FeatIndexRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Serves features computed elsewhere, looked up by patch grid position.
#[derive(Debug)]
pub struct FileBackedExtractor {
    feat: FeatFile,
    rows: HashMap<(String, usize, usize), usize>,
    digest: String,
}

impl FileBackedExtractor {
    pub fn open(feat_path: &Path, index_path: &Path) -> Result<Self> {
        let bytes = fs::read(feat_path).map_err(|e| Error::io(feat_path, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        let feat = parse_feat(&bytes, feat_path)?;
        if (feat.height, feat.width, feat.channels) != (GRID, GRID, FEATURE_CHANNELS) {
            return Err(Error::FeatureFile(format!(
                "{}: tensors are {}x{}x{}, expected {GRID}x{GRID}x{FEATURE_CHANNELS}",
                feat_path.display(),
                feat.height,
                feat.width,
                feat.channels
            )));
        }
        let mut rows = HashMap::new();
        for r in read_feat_index(index_path)? {
            if r.row >= feat.count() {
                return Err(Error::FeatureFile(format!(
                    "{}: row {} out of range for {} tensors",
                    index_path.display(),
                    r.row,
                    feat.count()
                )));
            }
            if rows.insert((r.slide_id.clone(), r.grid_x, r.grid_y), r.row).is_some() {
                return Err(Error::FeatureFile(format!(
                    "{}: duplicate entry for {} ({}, {})",
                    index_path.display(),
                    r.slide_id,
                    r.grid_x,
                    r.grid_y
                )));
            }
        }
        Ok(Self { feat, rows, digest })
    }

    /// Conventional file names inside a directory.
    pub fn paths_in(dir: &Path) -> (PathBuf, PathBuf) {
        (dir.join("features.feat"), dir.join("features.csv"))
    }
}

impl FeatureExtractor for FileBackedExtractor {
    fn fingerprint(&self) -> String {
        format!("file-sha256-{}", self.digest)
    }

    fn extract(&self, patch: &PatchRecord) -> Result<FeatureTensor> {
        if patch.variant != 0 {
            return Err(Error::FeatureFile(format!(
                "no precomputed features for augmented variant {} of {} ({}, {})",
                patch.variant, patch.slide_id, patch.grid_x, patch.grid_y
            )));
        }
        let key = (patch.slide_id.clone(), patch.grid_x, patch.grid_y);
        let row = self.rows.get(&key).ok_or_else(|| {
            Error::FeatureFile(format!(
                "no features for {} ({}, {})",
                patch.slide_id, patch.grid_x, patch.grid_y
            ))
        })?;
        self.feat.tensor(*row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::RasterImage;

    fn patch(slide: &str, x: usize, y: usize) -> PatchRecord {
        PatchRecord {
            slide_id: slide.into(),
            grid_x: x,
            grid_y: y,
            pixels: RasterImage::filled(224, 224, [0, 0, 0]).unwrap(),
            inherited_label: 0,
            cluster_id: None,
            variant: 0,
        }
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.feat");
        let feat = FeatFile {
            height: 1,
            width: 2,
            channels: 1,
            data: vec![1.5, -2.0, 0.25, 8.0],
        };
        write_feat(&path, &feat).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FEAT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 16);
        assert_eq!(read_feat(&path).unwrap(), feat);
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.feat");
        fs::write(&path, b"FEAX\x01\0\0\0").unwrap();
        assert!(matches!(read_feat(&path), Err(Error::FeatureFile(_))));
        let mut bytes = b"FEAT".to_vec();
        for v in [1u32, 2, 1, 1, 1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&1f32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_feat(&path), Err(Error::FeatureFile(_))));
        assert!(matches!(read_feat(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn file_backed_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let (feat_path, index_path) = FileBackedExtractor::paths_in(dir.path());
        let n = GRID * GRID * FEATURE_CHANNELS;
        let mut data = vec![0.0f32; 2 * n];
        data[n..].iter_mut().for_each(|v| *v = 3.0);
        write_feat(
            &feat_path,
            &FeatFile {
                height: GRID,
                width: GRID,
                channels: FEATURE_CHANNELS,
                data,
            },
        )
        .unwrap();
        let rows = vec![
            FeatIndexRow { row: 1, slide_id: "a".into(), grid_x: 0, grid_y: 0 },
            FeatIndexRow { row: 0, slide_id: "a".into(), grid_x: 1, grid_y: 0 },
        ];
        write_feat_index(&index_path, &rows).unwrap();
        assert!(fs::read_to_string(&index_path).unwrap().starts_with("row,slide_id,grid_x,grid_y\n"));
        let e = FileBackedExtractor::open(&feat_path, &index_path).unwrap();
        assert!(e.extract(&patch("a", 0, 0)).unwrap().data.iter().all(|&v| v == 3.0));
        assert!(e.extract(&patch("a", 1, 0)).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(matches!(e.extract(&patch("b", 0, 0)), Err(Error::FeatureFile(_))));
        let mut aug = patch("a", 0, 0);
        aug.variant = 3;
        assert!(e.extract(&aug).is_err());
        assert!(e.fingerprint().starts_with("file-sha256-"));
    }
}
