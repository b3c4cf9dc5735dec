//! Patch predictions to slide outcomes: probability histograms with
//! per-cluster linear SVMs, or plain majority voting, plus accuracy/F1.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{hinge_objective, svm_train, SvmModel};
use crate::util::child_seed;

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_C_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

/// Normalized histogram of patch survival probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<f64>,
    /// Zero marks an empty histogram whose bins are all zero.
    pub n_patches: usize,
}

impl Histogram {
    pub fn is_empty(&self) -> bool {
        self.n_patches == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterHistogram {
    pub slide_id: String,
    pub cluster_id: usize,
    pub histogram: Histogram,
}

/// Uniform bins over [0, 1]; bin `i` covers `[i/B, (i+1)/B)` and the last
/// bin also takes 1.0. Counts are divided by the number of inputs.
pub fn build_histogram(probabilities: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidInput("histogram needs at least one bin".into()));
    }
    if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
    }
    let mut counts = vec![0usize; bins];
    for &p in probabilities {
        let i = ((p * bins as f64).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = probabilities.len();
    let bins = counts
        .into_iter()
        .map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    Ok(Histogram { bins, n_patches: n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub label: u8,
    /// The count was an exact tie, resolved to label 0.
    pub tie: bool,
}

/// Majority label; an exact tie goes to 0 (non-survival).
pub fn vote_fuse(labels: &[u8]) -> Result<Vote> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("cannot vote over no labels".into()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!("labels must be 0 or 1, got {bad}")));
    }
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let zeros = labels.len() - ones;
    Ok(Vote {
        label: u8::from(ones > zeros),
        tie: ones == zeros,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Vote,
    Svm,
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMethod::Vote => "vote",
            FusionMethod::Svm => "svm",
        })
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vote" => Ok(FusionMethod::Vote),
            "svm" => Ok(FusionMethod::Svm),
            other => Err(Error::Config(format!("unknown fusion method '{other}' (expected vote or svm)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvmLayout {
    /// One SVM per discriminative cluster, then a vote across clusters.
    #[default]
    PerCluster,
    /// One SVM over the concatenated histograms of all discriminative clusters.
    Concatenated,
}

impl FromStr for SvmLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "per_cluster" => Ok(SvmLayout::PerCluster),
            "concatenated" => Ok(SvmLayout::Concatenated),
            other => Err(Error::Config(format!(
                "unknown svm layout '{other}' (expected per_cluster or concatenated)"
            ))),
        }
    }
}

/// Histograms of one slide over the clusters it has patches in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideHistograms {
    pub slide_id: String,
    pub label: u8,
    pub per_cluster: BTreeMap<usize, Histogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedSvm {
    pub model: SvmModel,
    pub c: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub discriminative: Vec<usize>,
    pub bins: usize,
    pub layout: SvmLayout,
    /// Keyed by cluster id; the concatenated layout stores its single model
    /// under the first discriminative id.
    pub svms: BTreeMap<usize, FittedSvm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmFusionParams {
    pub epochs: usize,
    pub seed: u64,
    pub layout: SvmLayout,
}

impl Default for SvmFusionParams {
    fn default() -> Self {
        Self {
            epochs: 2000,
            seed: 0,
            layout: SvmLayout::PerCluster,
        }
    }
}

fn signed(label: u8) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

fn features_for(slides: &[SlideHistograms], clusters: &[usize], bins: usize) -> Vec<(Vec<f64>, u8)> {
    slides
        .iter()
        .filter_map(|s| {
            if clusters.len() == 1 {
                let h = s.per_cluster.get(&clusters[0]).filter(|h| !h.is_empty())?;
                return Some((h.bins.clone(), s.label));
            }
            if clusters.iter().all(|c| s.per_cluster.get(c).is_none_or(Histogram::is_empty)) {
                return None;
            }
            let mut x = Vec::with_capacity(bins * clusters.len());
            for c in clusters {
                match s.per_cluster.get(c) {
                    Some(h) => x.extend(&h.bins),
                    None => x.extend(std::iter::repeat_n(0.0, bins)),
                }
            }
            Some((x, s.label))
        })
        .collect()
}

fn fit_with_grid(
    train: &[(Vec<f64>, u8)],
    val: &[(Vec<f64>, u8)],
    c_grid: &[f64],
    params: &SvmFusionParams,
    seed: u64,
) -> Result<FittedSvm> {
    let xs: Vec<Vec<f64>> = train.iter().map(|t| t.0.clone()).collect();
    let ys: Vec<f64> = train.iter().map(|t| signed(t.1)).collect();
    let vx: Vec<Vec<f64>> = val.iter().map(|t| t.0.clone()).collect();
    let vy: Vec<f64> = val.iter().map(|t| signed(t.1)).collect();
    let mut best: Option<(FittedSvm, f64, f64)> = None;
    for &c in c_grid {
        let model = svm_train(&xs, &ys, c, params.epochs, seed)?.model;
        // Score on validation when there is any, else on training data;
        // ties go to lower mean hinge loss, then to the earlier grid entry.
        let (sx, sy) = if vx.is_empty() { (&xs, &ys) } else { (&vx, &vy) };
        let correct = sx.iter().zip(sy).filter(|(x, y)| (model.decision(x) > 0.0) == (**y > 0.0)).count();
        let acc = correct as f64 / sx.len() as f64;
        let hinge = hinge_objective(sx, sy, f64::INFINITY, &model.weights, model.bias);
        let better = match &best {
            None => true,
            Some((_, a, h)) => acc > *a || (acc == *a && hinge < *h),
        };
        if better {
            let validation_accuracy = (!vx.is_empty()).then_some(acc);
            best = Some((
                FittedSvm {
                    model,
                    c,
                    validation_accuracy,
                },
                acc,
                hinge,
            ));
        }
    }
    best.map(|b| b.0).ok_or_else(|| Error::InvalidInput("empty C grid".into()))
}

fn class_counts(rows: &[(Vec<f64>, u8)]) -> (usize, usize) {
    let ones = rows.iter().filter(|r| r.1 == 1).count();
    (rows.len() - ones, ones)
}

/// Trains the SVM fusion stage on training-slide histograms and picks C
/// per model on validation slides. Clusters without at least two training
/// slides of each class are skipped with a warning; it is an error if
/// nothing can be trained.
pub fn svm_fuse_train(
    train: &[SlideHistograms],
    validation: &[SlideHistograms],
    discriminative: &[usize],
    bins: usize,
    c_grid: &[f64],
    params: &SvmFusionParams,
) -> Result<FusionModel> {
    if discriminative.is_empty() {
        return Err(Error::InvalidInput("no discriminative clusters to fuse".into()));
    }
    if c_grid.is_empty() || c_grid.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
        return Err(Error::Config("C grid must be non-empty and positive".into()));
    }
    let groups: Vec<Vec<usize>> = match params.layout {
        SvmLayout::PerCluster => discriminative.iter().map(|&c| vec![c]).collect(),
        SvmLayout::Concatenated => vec![discriminative.to_vec()],
    };
    let fitted: Vec<Option<(usize, FittedSvm)>> = groups
        .par_iter()
        .map(|group| {
            let tr = features_for(train, group, bins);
            let (neg, pos) = class_counts(&tr);
            if neg < 2 || pos < 2 {
                log::warn!("fusion: clusters {group:?} have {neg}/{pos} training slides per class; skipped");
                return Ok(None);
            }
            let va = features_for(validation, group, bins);
            let seed = child_seed(params.seed, group[0] as u64);
            fit_with_grid(&tr, &va, c_grid, params, seed).map(|f| Some((group[0], f)))
        })
        .collect::<Result<_>>()?;
    let svms: BTreeMap<usize, FittedSvm> = fitted.into_iter().flatten().collect();
    if svms.is_empty() {
        return Err(Error::Degenerate(
            "no discriminative cluster has two training slides of each class".into(),
        ));
    }
    Ok(FusionModel {
        discriminative: discriminative.to_vec(),
        bins,
        layout: params.layout,
        svms,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub method: FusionMethod,
    /// Decision per discriminative cluster present in the slide.
    pub per_cluster: BTreeMap<usize, u8>,
    /// 0 when abstaining.
    pub final_label: u8,
    pub abstained: bool,
    pub tie: bool,
}

fn abstain(slide_id: &str, method: FusionMethod) -> SlidePrediction {
    SlidePrediction {
        slide_id: slide_id.to_string(),
        method,
        per_cluster: BTreeMap::new(),
        final_label: 0,
        abstained: true,
        tie: false,
    }
}

/// Per-cluster SVM decisions, then a vote across clusters.
pub fn predict_slide(model: &FusionModel, slide: &SlideHistograms) -> Result<SlidePrediction> {
    match model.layout {
        SvmLayout::PerCluster => {
            let mut per_cluster = BTreeMap::new();
            for (&cluster, svm) in &model.svms {
                if let Some(h) = slide.per_cluster.get(&cluster).filter(|h| !h.is_empty()) {
                    if h.bins.len() != model.bins {
                        return Err(Error::DimensionMismatch {
                            expected: model.bins,
                            got: h.bins.len(),
                        });
                    }
                    per_cluster.insert(cluster, svm.model.predict(&h.bins));
                }
            }
            if per_cluster.is_empty() {
                return Ok(abstain(&slide.slide_id, FusionMethod::Svm));
            }
            let labels: Vec<u8> = per_cluster.values().copied().collect();
            let vote = vote_fuse(&labels)?;
            Ok(SlidePrediction {
                slide_id: slide.slide_id.clone(),
                method: FusionMethod::Svm,
                per_cluster,
                final_label: vote.label,
                abstained: false,
                tie: vote.tie,
            })
        }
        SvmLayout::Concatenated => {
            let svm = model
                .svms
                .values()
                .next()
                .ok_or_else(|| Error::InvalidInput("fusion model has no SVM".into()))?;
            let rows = features_for(std::slice::from_ref(slide), &model.discriminative, model.bins);
            let Some((x, _)) = rows.into_iter().next() else {
                return Ok(abstain(&slide.slide_id, FusionMethod::Svm));
            };
            let label = svm.model.predict(&x);
            let per_cluster = model
                .discriminative
                .iter()
                .filter(|c| slide.per_cluster.get(c).is_some_and(|h| !h.is_empty()))
                .map(|&c| (c, label))
                .collect();
            Ok(SlidePrediction {
                slide_id: slide.slide_id.clone(),
                method: FusionMethod::Svm,
                per_cluster,
                final_label: label,
                abstained: false,
                tie: false,
            })
        }
    }
}

/// Majority vote over the hard patch labels of all discriminative clusters
/// pooled together. `per_cluster` carries each cluster's own majority.
pub fn predict_slide_vote(slide_id: &str, patch_labels: &BTreeMap<usize, Vec<u8>>, discriminative: &[usize]) -> Result<SlidePrediction> {
    let mut pooled = Vec::new();
    let mut per_cluster = BTreeMap::new();
    for c in discriminative {
        if let Some(labels) = patch_labels.get(c).filter(|l| !l.is_empty()) {
            per_cluster.insert(*c, vote_fuse(labels)?.label);
            pooled.extend_from_slice(labels);
        }
    }
    if pooled.is_empty() {
        return Ok(abstain(slide_id, FusionMethod::Vote));
    }
    let vote = vote_fuse(&pooled)?;
    Ok(SlidePrediction {
        slide_id: slide_id.to_string(),
        method: FusionMethod::Vote,
        per_cluster,
        final_label: vote.label,
        abstained: false,
        tie: vote.tie,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub n: usize,
}

/// Accuracy and F1 with label 1 as the positive class; F1 is 0 when
/// precision and recall are both 0.
pub fn metrics(predictions: &[u8], truths: &[u8]) -> Result<BinaryMetrics> {
    if predictions.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            got: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidInput("metrics over no predictions".into()));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in predictions.iter().zip(truths) {
        correct += usize::from(p == t);
        match (p, t) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => {}
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(BinaryMetrics {
        accuracy: correct as f64 / predictions.len() as f64,
        f1,
        n: predictions.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub slide_id: String,
    pub method: FusionMethod,
    pub final_label: u8,
    pub truth: u8,
    pub abstained: bool,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
