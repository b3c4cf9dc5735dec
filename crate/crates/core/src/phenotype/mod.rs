//! Phenotype features: extractor -> 7x7x512 tensor -> global average pool
//! -> PCA -> k-means.

mod featfile;
mod reference;

pub use featfile::{read_feat, read_feat_index, write_feat, write_feat_index, FeatFile, FeatIndexRow, FileBackedExtractor};
pub use reference::ReferenceExtractor;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kmeans, pca_fit, pca_transform, ClusterModel, KMeansParams, PcaModel};
use crate::tiling::PatchRecord;

pub const GRID: usize = 7;
pub const FEATURE_CHANNELS: usize = 512;
pub const DEFAULT_PCA_DIM: usize = 50;

/// Row-major `height x width x channels` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                expected: height * width * channels,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Anything that maps a patch to a spatial feature tensor.
pub trait FeatureExtractor: Send + Sync {
    /// Stable identity used for cache keys.
    fn fingerprint(&self) -> String;
    fn extract(&self, patch: &PatchRecord) -> Result<FeatureTensor>;
}

pub fn extract_features(patch: &PatchRecord, extractor: &dyn FeatureExtractor) -> Result<FeatureTensor> {
    extractor.extract(patch)
}

/// Per-channel mean over all spatial cells, accumulated in f64.
pub fn global_average_pool(t: &FeatureTensor) -> Vec<f64> {
    let mut out = vec![0.0f64; t.channels];
    for cell in t.data.chunks_exact(t.channels.max(1)) {
        for (o, v) in out.iter_mut().zip(cell) {
            *o += f64::from(*v);
        }
    }
    let n = (t.height * t.width).max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Extracts and pools every patch in parallel, preserving input order.
pub fn pooled_features(patches: &[PatchRecord], extractor: &dyn FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    patches
        .par_iter()
        .map(|p| extractor.extract(p).map(|t| global_average_pool(&t)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterScope {
    /// One PCA and one k-means over all slides; cluster ids are shared.
    #[default]
    Corpus,
    /// Separate models per slide; ids are only meaningful within a slide.
    Slide,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeParams {
    pub k: usize,
    pub pca_dim: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub scope: ClusterScope,
}

impl Default for PhenotypeParams {
    fn default() -> Self {
        let km = KMeansParams::default();
        Self {
            k: 5,
            pca_dim: DEFAULT_PCA_DIM,
            restarts: km.restarts,
            max_iters: km.max_iters,
            tol: km.tol,
            seed: km.seed,
            scope: ClusterScope::Corpus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeModel {
    /// `None` for the corpus-wide model, else the slide it was fitted on.
    pub slide_id: Option<String>,
    pub pca: PcaModel,
    pub clusters: ClusterModel,
}

#[derive(Debug, Clone)]
pub struct PhenotypeClustering {
    pub models: Vec<PhenotypeModel>,
    pub assignments: Vec<usize>,
}

fn fit_group(features: &[Vec<f64>], params: &PhenotypeParams) -> Result<(PcaModel, ClusterModel, Vec<usize>)> {
    let need = params.k.max(params.pca_dim + 1);
    if features.len() < need {
        return Err(Error::InvalidInput(format!(
            "phenotype clustering needs at least {need} patches, got {}",
            features.len()
        )));
    }
    if let Some(f) = features.iter().find(|f| f.len() != FEATURE_CHANNELS) {
        return Err(Error::DimensionMismatch {
            expected: FEATURE_CHANNELS,
            got: f.len(),
        });
    }
    let pca = pca_fit(features, params.pca_dim)?;
    assert_eq!(pca.input_dim(), FEATURE_CHANNELS);
    assert_eq!(pca.output_dim(), params.pca_dim);
    let reduced: Vec<Vec<f64>> = features.iter().map(|f| pca_transform(&pca, f)).collect::<Result<_>>()?;
    let fit = kmeans(
        &reduced,
        &KMeansParams {
            k: params.k,
            restarts: params.restarts,
            max_iters: params.max_iters,
            tol: params.tol,
            seed: params.seed,
        },
    )?;
    Ok((pca, fit.model, fit.assignments))
}

/// PCA then k-means on pooled 512-d features. `slide_ids` runs parallel to
/// `features` and is only consulted for [`ClusterScope::Slide`].
pub fn cluster_pooled(features: &[Vec<f64>], slide_ids: &[&str], params: &PhenotypeParams) -> Result<PhenotypeClustering> {
    if slide_ids.len() != features.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: slide_ids.len(),
        });
    }
    match params.scope {
        ClusterScope::Corpus => {
            let (pca, clusters, assignments) = fit_group(features, params)?;
            Ok(PhenotypeClustering {
                models: vec![PhenotypeModel {
                    slide_id: None,
                    pca,
                    clusters,
                }],
                assignments,
            })
        }
        ClusterScope::Slide => {
            let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, s) in slide_ids.iter().enumerate() {
                groups.entry(s).or_default().push(i);
            }
            let mut assignments = vec![0; features.len()];
            let mut models = Vec::with_capacity(groups.len());
            for (slide, idx) in groups {
                let sub: Vec<Vec<f64>> = idx.iter().map(|&i| features[i].clone()).collect();
                let (pca, clusters, a) = fit_group(&sub, params).map_err(|e| match e {
                    Error::InvalidInput(m) => Error::InvalidInput(format!("slide {slide}: {m}")),
                    other => other,
                })?;
                for (&i, c) in idx.iter().zip(a) {
                    assignments[i] = c;
                }
                models.push(PhenotypeModel {
                    slide_id: Some(slide.to_string()),
                    pca,
                    clusters,
                });
            }
            Ok(PhenotypeClustering { models, assignments })
        }
    }
}

/// The full chain: extract -> pool -> PCA fit -> PCA transform -> k-means.
pub fn build_phenotype_clusters(
    patches: &[PatchRecord],
    extractor: &dyn FeatureExtractor,
    params: &PhenotypeParams,
) -> Result<PhenotypeClustering> {
    let need = params.k.max(params.pca_dim + 1);
    if patches.len() < need {
        return Err(Error::InvalidInput(format!(
            "phenotype clustering needs at least {need} patches, got {}",
            patches.len()
        )));
    }
    let features = pooled_features(patches, extractor)?;
    let ids: Vec<&str> = patches.iter().map(|p| p.slide_id.as_str()).collect();
    cluster_pooled(&features, &ids, params)
}
