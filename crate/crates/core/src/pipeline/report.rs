//! Run reports: resolved configuration, per-configuration results and a
//! hash over everything except wall-clock timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chromanorm::ChannelStats;
use crate::classify::{Selection, TrainingReport};
use crate::error::{Error, Result};
use crate::fusion::{BinaryMetrics, FusionMethod};

use super::config::ClusteringMethod;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub key: String,
    pub cache_hit: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub n_slides: usize,
    pub n_patches: usize,
    pub slides_per_split: BTreeMap<String, usize>,
    pub normalization_target: ChannelStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub n_patches: usize,
    /// Centroid information ratio, for information-density clusterings.
    pub centroid_ir: Option<f64>,
}

/// Accuracy/F1 at each aggregation level, on test-split slides. Missing
/// levels are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    /// Patch labels in discriminative clusters against the inherited label.
    pub patch: Option<BinaryMetrics>,
    /// Final slide decisions; the headline cluster-level figure.
    pub cluster: Option<BinaryMetrics>,
    /// One decision per (slide, discriminative cluster) pair.
    pub cluster_pairs: Option<BinaryMetrics>,
    pub n_test_slides: usize,
    pub abstained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    /// E.g. `Ph5-SVM`.
    pub label: String,
    pub clustering: ClusteringMethod,
    pub fusion: FusionMethod,
    pub clusters: Vec<ClusterSummary>,
    pub training: Vec<TrainingReport>,
    pub selection: Selection,
    /// Chosen regularization per fused cluster, for the SVM method.
    pub svm_c: BTreeMap<usize, f64>,
    pub metrics: LevelMetrics,
}

pub fn result_label(clustering: ClusteringMethod, fusion: FusionMethod) -> String {
    let f = match fusion {
        FusionMethod::Vote => "Vote",
        FusionMethod::Svm => "SVM",
    };
    format!("{}-{f}", clustering.label())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub software_version: String,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub corpus: CorpusInfo,
    pub results: Vec<ConfigResult>,
    /// Wall-clock data; excluded from `report_hash`.
    pub timings: Vec<StageTiming>,
    pub report_hash: String,
}

impl RunReport {
    /// The report with timings and hash cleared, as canonical JSON.
    pub fn canonical_json(&self) -> Result<String> {
        let mut stripped = self.clone();
        stripped.timings.clear();
        stripped.report_hash.clear();
        Ok(serde_json::to_string_pretty(&stripped)?)
    }

    pub fn compute_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn seal(mut self) -> Result<Self> {
        self.report_hash = self.compute_hash()?;
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn result(&self, label: &str) -> Option<&ConfigResult> {
        self.results.iter().find(|r| r.label == label)
    }
}
