//! Stage orchestration: normalize -> tile -> features -> cluster -> train ->
//! select -> fuse -> metrics, each stage cached by a key over its inputs and
//! parameters.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::chromanorm::{apply_normalization, compute_stats, tissue_mask, ChannelStats};
use crate::classify::{train_all, select_discriminative, ClusterClassifier, ClusterSamples, Sample, Selection, TrainingReport};
use crate::error::{Error, Result};
use crate::fusion::{
    build_histogram, metrics, predict_slide, predict_slide_vote, svm_fuse_train, write_predictions, FusionMethod,
    FusionModel, Histogram, PredictionRow, SlideHistograms, SlidePrediction, SvmFusionParams,
};
use crate::imagecore::{downsample, load_image, read_manifest, save_image, RasterImage, SlideManifestEntry, Split};
use crate::infodensity::{cluster_by_ir, write_ir_table, IrRow, PATCH_RAW_BYTES};
use crate::numerics::ClusterModel;
use crate::phenotype::{
    cluster_pooled, pooled_features, read_feat, write_feat, ClusterScope, FeatFile, FeatureExtractor, FileBackedExtractor,
    PhenotypeModel, PhenotypeParams, ReferenceExtractor, FEATURE_CHANNELS,
};
use crate::tiling::{augment, extract_patches, load_patch, read_patch_index, write_patch_index, write_patches_sized, PatchIndexEntry, PATCH_INDEX_FILE};

use super::cache::{file_sha256, KeyBuilder, StageCache, StageKey, WorkLock};
use super::config::{ClusteringMethod, ExtractorChoice, NormTargetMode, PipelineConfig};
use super::report::{result_label, ClusterSummary, ConfigResult, CorpusInfo, LevelMetrics, RunReport, StageTiming};

/// Normalized slides are intermediate storage, so they use a fast level.
const SLIDE_DEFLATE_LEVEL: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageName {
    Normalize,
    Tile,
    Features,
    Cluster,
    Train,
    Select,
    Fuse,
    Metrics,
}

impl StageName {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageName::Normalize => "normalize",
            StageName::Tile => "tile",
            StageName::Features => "features",
            StageName::Cluster => "cluster",
            StageName::Train => "train",
            StageName::Select => "select",
            StageName::Fuse => "fuse",
            StageName::Metrics => "metrics",
        }
    }
}

fn stage_err(stage: StageName) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.as_str().to_string(),
            source: Box::new(e),
        },
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SlideStats {
    slide_id: String,
    stats: ChannelStats,
    pixels: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NormalizeSummary {
    target: ChannelStats,
    slides: Vec<SlideStats>,
}

#[derive(Debug, Clone)]
struct NormalizeOut {
    key: StageKey,
    dir: PathBuf,
    target: ChannelStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SizeRow {
    slide_id: String,
    grid_x: usize,
    grid_y: usize,
    s_c: u64,
}

#[derive(Debug, Clone)]
struct TileOut {
    key: StageKey,
    dir: PathBuf,
    index: Vec<PatchIndexEntry>,
    sizes: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AugmentedRow {
    row: usize,
    slide_id: String,
    grid_x: usize,
    grid_y: usize,
    variant: u8,
}

#[derive(Debug, Clone)]
struct FeaturesOut {
    key: StageKey,
    /// Parallel to the tile index.
    original: Vec<Vec<f64>>,
    /// Tile-index position of the source patch, and the features.
    augmented: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AssignmentRow {
    slide_id: String,
    grid_x: usize,
    grid_y: usize,
    cluster_id: usize,
}

#[derive(Debug, Clone)]
struct ClusterOut {
    key: StageKey,
    k: usize,
    assignments: Vec<usize>,
    centroid_ir: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatchPredictionRow {
    slide_id: String,
    grid_x: usize,
    grid_y: usize,
    cluster_id: usize,
    probability: Option<f64>,
    label: Option<u8>,
}

#[derive(Debug, Clone)]
struct TrainOut {
    key: StageKey,
    classifiers: Vec<ClusterClassifier>,
    /// Parallel to the tile index; `None` in clusters without a model.
    predictions: Vec<Option<(f64, u8)>>,
}

#[derive(Debug, Clone)]
struct SelectOut {
    key: StageKey,
    reports: Vec<TrainingReport>,
    selection: Selection,
}

#[derive(Debug, Clone)]
struct FuseOut {
    predictions: Vec<SlidePrediction>,
    svm_c: BTreeMap<usize, f64>,
}

/// What a run produced. The report exists when the run reached the metrics stage.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: Option<RunReport>,
    pub report_path: Option<PathBuf>,
    pub timings: Vec<StageTiming>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    cache: StageCache,
    entries: Vec<SlideManifestEntry>,
    timings: Vec<StageTiming>,
    normalized: Option<NormalizeOut>,
    tiles: Option<TileOut>,
    features: Option<FeaturesOut>,
    clusters: BTreeMap<ClusteringMethod, ClusterOut>,
    _lock: WorkLock,
}

impl Pipeline {
    /// Validates the configuration, takes the work-directory lock and reads
    /// the manifest.
    pub fn open(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let lock = WorkLock::acquire(&cfg.work_dir)?;
        let entries = read_manifest(&cfg.manifest).map_err(stage_err(StageName::Normalize))?;
        Ok(Self {
            cfg: cfg.clone(),
            cache: StageCache::new(&cfg.work_dir),
            entries,
            timings: Vec::new(),
            normalized: None,
            tiles: None,
            features: None,
            clusters: BTreeMap::new(),
            _lock: lock,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn timings(&self) -> &[StageTiming] {
        &self.timings
    }

    fn stage<T>(
        &mut self,
        name: StageName,
        label: String,
        key: &StageKey,
        produce: impl FnOnce(&Path) -> Result<()>,
        load: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let start = Instant::now();
        let (value, hit) = self.cache.run(key, produce, load).map_err(stage_err(name))?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!("{label}: {} in {seconds:.2}s", if hit { "cached" } else { "done" });
        self.timings.push(StageTiming {
            stage: label,
            key: key.short().to_string(),
            cache_hit: hit,
            seconds,
        });
        Ok(value)
    }

    fn split_of(&self) -> HashMap<String, Split> {
        self.entries.iter().map(|e| (e.slide_id.clone(), e.split)).collect()
    }

    /// Digest of slide ids, labels and splits.
    fn corpus_digest(&self) -> String {
        let rows: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!("{},{},{}", e.slide_id, e.label, e.split))
            .collect();
        KeyBuilder::new("corpus").field("rows", rows.join(";")).finish().hash
    }

    fn normalize(&mut self) -> Result<NormalizeOut> {
        if let Some(n) = &self.normalized {
            return Ok(n.clone());
        }
        let digests: Vec<String> = self
            .entries
            .par_iter()
            .map(|e| file_sha256(&e.image_path).map(|h| format!("{}:{h}", e.slide_id)))
            .collect::<Result<_>>()
            .map_err(stage_err(StageName::Normalize))?;
        let cfg = self.cfg.clone();
        let key = KeyBuilder::new("normalize")
            .field("version", 1)
            .field("slides", digests.join(";"))
            .field("downsample", cfg.downsample)
            .field("target", cfg.norm_target)
            .field("tissue_mask", cfg.tissue_mask)
            .field("mask_threshold", cfg.mask_threshold)
            .finish();
        let entries = self.entries.clone();
        let target = self.stage(
            StageName::Normalize,
            "normalize".into(),
            &key,
            |dir| produce_normalized(&entries, &cfg, dir),
            |dir| read_json::<NormalizeSummary>(&dir.join("stats.json")).map(|s| s.target),
        )?;
        let out = NormalizeOut {
            dir: self.cache.dir(&key),
            key,
            target,
        };
        self.normalized = Some(out.clone());
        Ok(out)
    }

    fn tile(&mut self) -> Result<TileOut> {
        if let Some(t) = &self.tiles {
            return Ok(t.clone());
        }
        let norm = self.normalize()?;
        let key = KeyBuilder::new("tile")
            .field("version", 1)
            .field("normalize", &norm.key.hash)
            .field("corpus", self.corpus_digest())
            .field("deflate_level", self.cfg.deflate_level)
            .finish();
        let entries = self.entries.clone();
        let level = self.cfg.deflate_level;
        let (index, sizes) = self.stage(
            StageName::Tile,
            "tile".into(),
            &key,
            |dir| produce_tiles(&entries, &norm.dir, level, dir),
            load_tiles,
        )?;
        let out = TileOut {
            dir: self.cache.dir(&key),
            key,
            index,
            sizes,
        };
        self.tiles = Some(out.clone());
        Ok(out)
    }

    fn extractor(&self) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match &self.cfg.extractor {
            ExtractorChoice::Reference => Box::new(ReferenceExtractor::new(self.cfg.extractor_seed)),
            ExtractorChoice::File(dir) => {
                let (feat, index) = FileBackedExtractor::paths_in(dir);
                Box::new(FileBackedExtractor::open(&feat, &index)?)
            }
        })
    }

    fn features(&mut self) -> Result<FeaturesOut> {
        if let Some(f) = &self.features {
            return Ok(f.clone());
        }
        let tiles = self.tile()?;
        let extractor = self.extractor().map_err(stage_err(StageName::Features))?;
        let aug = self.cfg.augmentation();
        let mut kb = KeyBuilder::new("features")
            .field("version", 1)
            .field("tile", &tiles.key.hash)
            .field("corpus", self.corpus_digest())
            .field("extractor", extractor.fingerprint())
            .field("augment", self.cfg.augment);
        if self.cfg.augment {
            kb = kb.field("augmentation", serde_json::to_string(&aug)?);
        }
        let key = kb.finish();
        let augment_spec = self.cfg.augment.then_some(aug);
        let split_of = self.split_of();
        let out = self.stage(
            StageName::Features,
            "features".into(),
            &key,
            |dir| produce_features(&tiles, extractor.as_ref(), augment_spec.as_ref(), &split_of, dir),
            |dir| load_features(&tiles.index, dir),
        )?;
        let out = FeaturesOut {
            key,
            original: out.0,
            augmented: out.1,
        };
        self.features = Some(out.clone());
        Ok(out)
    }

    fn cluster(&mut self, method: ClusteringMethod) -> Result<ClusterOut> {
        if let Some(c) = self.clusters.get(&method) {
            return Ok(c.clone());
        }
        let tiles = self.tile()?;
        let seed = self.cfg.seed_for("kmeans");
        let label = format!("cluster:{method}");
        let index = tiles.index.clone();
        let out = match method {
            ClusteringMethod::InfoDensity(k) => {
                let key = KeyBuilder::new("cluster")
                    .field("version", 1)
                    .field("method", method)
                    .field("tile", &tiles.key.hash)
                    .field("restarts", self.cfg.kmeans_restarts)
                    .field("seed", seed)
                    .finish();
                let restarts = self.cfg.kmeans_restarts;
                let sizes = tiles.sizes.clone();
                let (assignments, centroids) = self.stage(
                    StageName::Cluster,
                    label,
                    &key,
                    |dir| {
                        let ratios: Vec<f64> = sizes.iter().map(|&s| s as f64 / PATCH_RAW_BYTES as f64).collect();
                        let fit = cluster_by_ir(&ratios, k, restarts, seed)?;
                        let rows: Vec<IrRow> = index
                            .iter()
                            .zip(&sizes)
                            .zip(&ratios)
                            .zip(&fit.assignments)
                            .map(|(((e, &s_c), &ir), &c)| IrRow {
                                slide_id: e.slide_id.clone(),
                                grid_x: e.grid_x,
                                grid_y: e.grid_y,
                                s_c: s_c as usize,
                                ir,
                                cluster_id: c,
                            })
                            .collect();
                        write_ir_table(&dir.join("ir.csv"), &rows)?;
                        write_json(&dir.join("model.json"), &fit.model)?;
                        write_assignments(dir, &index, &fit.assignments)
                    },
                    |dir| {
                        let model: ClusterModel = read_json(&dir.join("model.json"))?;
                        let centroids = model.centroids.iter().map(|c| c[0]).collect::<Vec<f64>>();
                        Ok((read_assignments(dir, &index)?, centroids))
                    },
                )?;
                ClusterOut {
                    key,
                    k,
                    assignments,
                    centroid_ir: Some(centroids),
                }
            }
            ClusteringMethod::Phenotype(k) => {
                let features = self.features()?;
                let params = PhenotypeParams {
                    k,
                    pca_dim: self.cfg.pca_dim,
                    restarts: self.cfg.kmeans_restarts,
                    max_iters: self.cfg.kmeans_max_iters,
                    tol: self.cfg.kmeans_tol,
                    seed,
                    scope: ClusterScope::Corpus,
                };
                let key = KeyBuilder::new("cluster")
                    .field("version", 1)
                    .field("method", method)
                    .field("features", &features.key.hash)
                    .field("params", serde_json::to_string(&params)?)
                    .finish();
                let assignments = self.stage(
                    StageName::Cluster,
                    label,
                    &key,
                    |dir| {
                        let ids: Vec<&str> = index.iter().map(|e| e.slide_id.as_str()).collect();
                        let fit = cluster_pooled(&features.original, &ids, &params)?;
                        write_json::<[PhenotypeModel]>(&dir.join("model.json"), &fit.models)?;
                        write_assignments(dir, &index, &fit.assignments)
                    },
                    |dir| read_assignments(dir, &index),
                )?;
                ClusterOut {
                    key,
                    k,
                    assignments,
                    centroid_ir: None,
                }
            }
        };
        self.clusters.insert(method, out.clone());
        Ok(out)
    }

    fn train(&mut self, method: ClusteringMethod) -> Result<TrainOut> {
        let clusters = self.cluster(method)?;
        let features = self.features()?;
        let tiles = self.tile()?;
        let train_cfg = self.cfg.train_config();
        let key = KeyBuilder::new("train")
            .field("version", 1)
            .field("cluster", &clusters.key.hash)
            .field("features", &features.key.hash)
            .field("corpus", self.corpus_digest())
            .field("augment", self.cfg.augment)
            // The threshold only matters to selection.
            .field("config", serde_json::to_string(&crate::classify::TrainConfig { threshold: 0.5, ..train_cfg })?)
            .finish();
        let split_of = self.split_of();
        let augment = self.cfg.augment;
        let index = tiles.index.clone();
        let (classifiers, predictions) = self.stage(
            StageName::Train,
            format!("train:{method}"),
            &key,
            |dir| produce_training(&index, &features, &clusters, &split_of, augment, &train_cfg, dir),
            |dir| load_training(&index, dir),
        )?;
        Ok(TrainOut {
            key,
            classifiers,
            predictions,
        })
    }

    fn select(&mut self, trained: &TrainOut, method: ClusteringMethod) -> Result<SelectOut> {
        let threshold = self.cfg.threshold;
        let key = KeyBuilder::new("select")
            .field("version", 1)
            .field("train", &trained.key.hash)
            .field("threshold", threshold)
            .finish();
        let (reports, selection) = self.stage(
            StageName::Select,
            format!("select:{method}"),
            &key,
            |dir| {
                let rethresholded: Vec<ClusterClassifier> = trained.classifiers.iter().map(|c| c.with_threshold(threshold)).collect();
                let selection = select_discriminative(&rethresholded)?;
                let reports: Vec<TrainingReport> = rethresholded.iter().map(ClusterClassifier::report).collect();
                write_json(&dir.join("training_reports.json"), &reports)?;
                write_json(&dir.join("selection.json"), &selection)
            },
            |dir| Ok((read_json(&dir.join("training_reports.json"))?, read_json(&dir.join("selection.json"))?)),
        )?;
        Ok(SelectOut { key, reports, selection })
    }

    #[allow(clippy::too_many_arguments)]
    fn fuse(
        &mut self,
        method: ClusteringMethod,
        fusion: FusionMethod,
        clusters: &ClusterOut,
        trained: &TrainOut,
        selected: &SelectOut,
    ) -> Result<FuseOut> {
        let tiles = self.tile()?;
        let svm_params = SvmFusionParams {
            epochs: self.cfg.svm_epochs,
            seed: self.cfg.seed_for("svm"),
            layout: self.cfg.svm_layout,
        };
        let mut kb = KeyBuilder::new("fuse")
            .field("version", 1)
            .field("select", &selected.key.hash)
            .field("method", fusion);
        if fusion == FusionMethod::Svm {
            kb = kb
                .field("bins", self.cfg.bins)
                .field("c_grid", format!("{:?}", self.cfg.c_grid))
                .field("svm", serde_json::to_string(&svm_params)?);
        }
        let key = kb.finish();
        let entries = self.entries.clone();
        let c_grid = self.cfg.c_grid.clone();
        let ctx = FuseContext {
            entries: &entries,
            index: &tiles.index,
            assignments: &clusters.assignments,
            predictions: &trained.predictions,
            discriminative: &selected.selection.cluster_ids,
            bins: self.cfg.bins,
            c_grid: &c_grid,
            svm_params,
        };
        self.stage(
            StageName::Fuse,
            format!("fuse:{method}:{fusion}"),
            &key,
            |dir| produce_fusion(&ctx, fusion, dir),
            |dir| {
                let predictions: Vec<SlidePrediction> = read_json(&dir.join("slide_predictions.json"))?;
                let model: Option<FusionModel> = read_json(&dir.join("fusion_model.json"))?;
                let svm_c = model.map(|m| m.svms.iter().map(|(&c, s)| (c, s.c)).collect()).unwrap_or_default();
                debug_assert!(predictions.iter().all(|p| entries.iter().any(|e| e.slide_id == p.slide_id)));
                Ok(FuseOut { predictions, svm_c })
            },
        )
    }

    /// Runs every stage up to and including `until`. A report is produced
    /// and written to `<work>/report.json` when `until` is the metrics stage.
    pub fn run(&mut self, until: StageName) -> Result<Option<RunReport>> {
        self.normalize()?;
        if until >= StageName::Tile {
            self.tile()?;
        }
        if until >= StageName::Features && self.cfg.clustering.iter().any(|m| matches!(m, ClusteringMethod::Phenotype(_))) {
            self.features()?;
        }
        if until < StageName::Cluster {
            return Ok(None);
        }
        let mut results = Vec::new();
        for method in self.cfg.clustering.clone() {
            let clusters = self.cluster(method)?;
            if until < StageName::Train {
                continue;
            }
            let trained = self.train(method)?;
            let selected = self.select(&trained, method)?;
            if until < StageName::Fuse {
                continue;
            }
            for fusion in self.cfg.fusion.clone() {
                let fused = self.fuse(method, fusion, &clusters, &trained, &selected)?;
                if until < StageName::Metrics {
                    continue;
                }
                let start = Instant::now();
                let result = self.metrics(method, fusion, &clusters, &trained, &selected, fused).map_err(stage_err(StageName::Metrics))?;
                self.timings.push(StageTiming {
                    stage: format!("metrics:{method}:{fusion}"),
                    key: String::new(),
                    cache_hit: false,
                    seconds: start.elapsed().as_secs_f64(),
                });
                results.push(result);
            }
        }
        if until < StageName::Metrics {
            return Ok(None);
        }
        let report = self.report(results)?;
        report.write(&self.cfg.work_dir.join(REPORT_FILE))?;
        Ok(Some(report))
    }

    #[allow(clippy::too_many_arguments)]
    fn metrics(
        &self,
        method: ClusteringMethod,
        fusion: FusionMethod,
        clusters: &ClusterOut,
        trained: &TrainOut,
        selected: &SelectOut,
        fused: FuseOut,
    ) -> Result<ConfigResult> {
        let tiles = self.tiles.as_ref().expect("tile stage ran");
        let split_of = self.split_of();
        let truth: HashMap<&str, u8> = self.entries.iter().map(|e| (e.slide_id.as_str(), e.label)).collect();
        let disc = &selected.selection.cluster_ids;

        let (mut patch_pred, mut patch_truth) = (Vec::new(), Vec::new());
        for ((e, &c), p) in tiles.index.iter().zip(&clusters.assignments).zip(&trained.predictions) {
            if split_of[&e.slide_id] != Split::Test || !disc.contains(&c) {
                continue;
            }
            if let Some((_, label)) = p {
                patch_pred.push(*label);
                patch_truth.push(e.label);
            }
        }
        let (mut pair_pred, mut pair_truth, mut slide_pred, mut slide_truth) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut abstained = 0;
        for p in &fused.predictions {
            let t = truth[p.slide_id.as_str()];
            slide_pred.push(p.final_label);
            slide_truth.push(t);
            abstained += usize::from(p.abstained);
            for &label in p.per_cluster.values() {
                pair_pred.push(label);
                pair_truth.push(t);
            }
        }
        let level = |p: &[u8], t: &[u8]| if p.is_empty() { Ok(None) } else { metrics(p, t).map(Some) };
        let label = result_label(method, fusion);
        let result_metrics = LevelMetrics {
            patch: level(&patch_pred, &patch_truth)?,
            cluster: level(&slide_pred, &slide_truth)?,
            cluster_pairs: level(&pair_pred, &pair_truth)?,
            n_test_slides: fused.predictions.len(),
            abstained,
        };
        let metrics_dir = self.cfg.work_dir.join("metrics");
        fs::create_dir_all(&metrics_dir).map_err(|e| Error::io(&metrics_dir, e))?;
        write_json(&metrics_dir.join(format!("{label}.json")), &result_metrics)?;

        let mut counts = vec![0usize; clusters.k];
        for &c in &clusters.assignments {
            counts[c] += 1;
        }
        let summaries = counts
            .iter()
            .enumerate()
            .map(|(id, &n)| ClusterSummary {
                cluster_id: id,
                n_patches: n,
                centroid_ir: clusters.centroid_ir.as_ref().map(|c| c[id]),
            })
            .collect();
        Ok(ConfigResult {
            label,
            clustering: method,
            fusion,
            clusters: summaries,
            training: selected.reports.clone(),
            selection: selected.selection.clone(),
            svm_c: fused.svm_c,
            metrics: result_metrics,
        })
    }

    fn report(&self, results: Vec<ConfigResult>) -> Result<RunReport> {
        let mut per_split = BTreeMap::new();
        for e in &self.entries {
            *per_split.entry(e.split.to_string()).or_insert(0) += 1;
        }
        let norm = self.normalized.as_ref().expect("normalize stage ran");
        let n_patches = self.tiles.as_ref().map_or(0, |t| t.index.len());
        RunReport {
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.cfg.to_pairs(),
            seeds: self.cfg.seeds(),
            corpus: CorpusInfo {
                n_slides: self.entries.len(),
                n_patches,
                slides_per_split: per_split,
                normalization_target: norm.target,
            },
            results,
            timings: self.timings.clone(),
            report_hash: String::new(),
        }
        .seal()
    }

    /// Cluster id of every tile in the corpus as `(slide_id, gx, gy, cluster)`,
    /// running (or reusing) the stages up to clustering.
    pub fn cluster_cells(&mut self, method: ClusteringMethod) -> Result<Vec<(String, usize, usize, usize)>> {
        let clusters = self.cluster(method)?;
        let tiles = self.tile()?;
        Ok(tiles
            .index
            .iter()
            .zip(&clusters.assignments)
            .map(|(e, &c)| (e.slide_id.clone(), e.grid_x, e.grid_y, c))
            .collect())
    }

    /// Normalized slide and per-tile cluster ids for one slide.
    pub fn slide_clusters(&mut self, method: ClusteringMethod, slide_id: &str) -> Result<(RasterImage, Vec<(usize, usize, usize)>)> {
        if !self.entries.iter().any(|e| e.slide_id == slide_id) {
            return Err(Error::InvalidInput(format!("unknown slide `{slide_id}`")));
        }
        let cells = self
            .cluster_cells(method)?
            .into_iter()
            .filter(|(id, ..)| id == slide_id)
            .map(|(_, gx, gy, c)| (gx, gy, c))
            .collect();
        let norm = self.normalize()?;
        let slide = load_image(&norm.dir.join("slides").join(format!("{slide_id}.png")))?;
        Ok((slide, cells))
    }
}

/// Opens the work directory, runs up to `until` and returns the outcome.
pub fn run_pipeline(cfg: &PipelineConfig, until: StageName) -> Result<RunOutcome> {
    let mut p = Pipeline::open(cfg)?;
    let report = p.run(until)?;
    let report_path = report.as_ref().map(|_| cfg.work_dir.join(REPORT_FILE));
    Ok(RunOutcome {
        report,
        report_path,
        timings: p.timings,
    })
}

fn produce_normalized(entries: &[SlideManifestEntry], cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let load = |e: &SlideManifestEntry| -> Result<RasterImage> {
        let img = load_image(&e.image_path)?;
        if cfg.downsample > 1 {
            downsample(&img, cfg.downsample)
        } else {
            Ok(img)
        }
    };
    // Two passes so only one slide per worker is held in memory.
    let stats: Vec<SlideStats> = entries
        .par_iter()
        .map(|e| {
            let img = load(e)?;
            let mask = cfg.tissue_mask.then(|| tissue_mask(&img, cfg.mask_threshold));
            let pixels = mask.as_ref().map_or(img.pixel_count(), |m| m.iter().filter(|&&b| b).count());
            Ok(SlideStats {
                slide_id: e.slide_id.clone(),
                stats: compute_stats(&img, mask.as_deref())?,
                pixels: pixels as u64,
            })
        })
        .collect::<Result<_>>()?;
    let target = match cfg.norm_target {
        NormTargetMode::StandardNormal => ChannelStats::STANDARD_NORMAL,
        NormTargetMode::Pooled => {
            let parts: Vec<(ChannelStats, u64)> = stats.iter().map(|s| (s.stats, s.pixels)).collect();
            ChannelStats::pooled(&parts)?
        }
    };
    let slides = dir.join("slides");
    fs::create_dir_all(&slides).map_err(|e| Error::io(&slides, e))?;
    entries.par_iter().zip(&stats).try_for_each(|(e, s)| {
        let img = apply_normalization(&load(e)?, &s.stats, &target)?;
        save_image(&img, &slides.join(format!("{}.png", e.slide_id)), SLIDE_DEFLATE_LEVEL).map(|_| ())
    })?;
    write_json(&dir.join("stats.json"), &NormalizeSummary { target, slides: stats })
}

fn produce_tiles(entries: &[SlideManifestEntry], normalized: &Path, level: u32, dir: &Path) -> Result<()> {
    let per_slide: Vec<Vec<(PatchIndexEntry, u64)>> = entries
        .par_iter()
        .map(|e| {
            let slide = load_image(&normalized.join("slides").join(format!("{}.png", e.slide_id)))?;
            let patches = extract_patches(&slide, &e.slide_id, e.label)?;
            write_patches_sized(dir, &patches, level)
        })
        .collect::<Result<_>>()?;
    let (index, sizes): (Vec<PatchIndexEntry>, Vec<u64>) = per_slide.into_iter().flatten().unzip();
    write_patch_index(&dir.join(PATCH_INDEX_FILE), &index)?;
    let rows: Vec<SizeRow> = index
        .iter()
        .zip(&sizes)
        .map(|(e, &s_c)| SizeRow {
            slide_id: e.slide_id.clone(),
            grid_x: e.grid_x,
            grid_y: e.grid_y,
            s_c,
        })
        .collect();
    write_csv(&dir.join("sizes.csv"), &rows)
}

fn load_tiles(dir: &Path) -> Result<(Vec<PatchIndexEntry>, Vec<u64>)> {
    let index = read_patch_index(&dir.join(PATCH_INDEX_FILE))?;
    let rows: Vec<SizeRow> = read_csv(&dir.join("sizes.csv"))?;
    if rows.len() != index.len() || rows.iter().zip(&index).any(|(r, e)| (r.slide_id.as_str(), r.grid_x, r.grid_y) != e.key()) {
        return Err(Error::InvalidInput(format!("{}: size table does not match the patch index", dir.display())));
    }
    Ok((index, rows.into_iter().map(|r| r.s_c).collect()))
}

fn produce_features(
    tiles: &TileOut,
    extractor: &dyn FeatureExtractor,
    augmentation: Option<&crate::tiling::AugmentationSpec>,
    split_of: &HashMap<String, Split>,
    dir: &Path,
) -> Result<()> {
    let mut by_slide: Vec<(&str, Vec<&PatchIndexEntry>)> = Vec::new();
    for e in &tiles.index {
        match by_slide.last_mut() {
            Some((id, v)) if *id == e.slide_id => v.push(e),
            _ => by_slide.push((&e.slide_id, vec![e])),
        }
    }
    type SlideFeatures = (Vec<Vec<f64>>, Vec<(AugmentedRow, Vec<f64>)>);
    let per_slide: Vec<SlideFeatures> = by_slide
        .par_iter()
        .map(|(slide_id, entries)| {
            let patches = entries.iter().map(|e| load_patch(&tiles.dir, e)).collect::<Result<Vec<_>>>()?;
            let original = pooled_features(&patches, extractor)?;
            let mut augmented = Vec::new();
            if let Some(spec) = augmentation.filter(|_| split_of.get(*slide_id) == Some(&Split::Train)) {
                let variants = augment(&patches, spec)?;
                let feats = pooled_features(&variants, extractor)?;
                for (v, f) in variants.iter().zip(feats) {
                    let row = AugmentedRow {
                        row: 0,
                        slide_id: v.slide_id.clone(),
                        grid_x: v.grid_x,
                        grid_y: v.grid_y,
                        variant: v.variant,
                    };
                    augmented.push((row, f));
                }
            }
            Ok((original, augmented))
        })
        .collect::<Result<_>>()?;
    let mut original = Vec::with_capacity(tiles.index.len() * FEATURE_CHANNELS);
    let mut aug_data = Vec::new();
    let mut aug_rows = Vec::new();
    for (orig, aug) in per_slide {
        original.extend(orig.iter().flatten().map(|&v| v as f32));
        for (mut row, f) in aug {
            row.row = aug_rows.len();
            aug_rows.push(row);
            aug_data.extend(f.iter().map(|&v| v as f32));
        }
    }
    let feat = |data| FeatFile {
        height: 1,
        width: 1,
        channels: FEATURE_CHANNELS,
        data,
    };
    write_feat(&dir.join("original.feat"), &feat(original))?;
    write_feat(&dir.join("augmented.feat"), &feat(aug_data))?;
    write_csv(&dir.join("augmented.csv"), &aug_rows)
}

fn load_features(index: &[PatchIndexEntry], dir: &Path) -> Result<(Vec<Vec<f64>>, Vec<(usize, Vec<f64>)>)> {
    let rows = |f: &FeatFile| -> Vec<Vec<f64>> { (0..f.count()).map(|i| f.row(i).iter().map(|&v| f64::from(v)).collect()).collect() };
    let orig = read_feat(&dir.join("original.feat"))?;
    if orig.row_len() != FEATURE_CHANNELS || orig.count() != index.len() {
        return Err(Error::FeatureFile(format!("{}: unexpected shape", dir.display())));
    }
    let aug = read_feat(&dir.join("augmented.feat"))?;
    let aug_rows: Vec<AugmentedRow> = read_csv(&dir.join("augmented.csv"))?;
    if aug.count() != aug_rows.len() {
        return Err(Error::FeatureFile(format!("{}: augmented index does not match", dir.display())));
    }
    let position: HashMap<(&str, usize, usize), usize> = index.iter().enumerate().map(|(i, e)| (e.key(), i)).collect();
    let augmented = aug_rows
        .iter()
        .zip(rows(&aug))
        .map(|(r, f)| {
            position
                .get(&(r.slide_id.as_str(), r.grid_x, r.grid_y))
                .map(|&i| (i, f))
                .ok_or_else(|| Error::FeatureFile(format!("augmented row {} has no source patch", r.row)))
        })
        .collect::<Result<_>>()?;
    Ok((rows(&orig), augmented))
}

fn write_assignments(dir: &Path, index: &[PatchIndexEntry], assignments: &[usize]) -> Result<()> {
    let rows: Vec<AssignmentRow> = index
        .iter()
        .zip(assignments)
        .map(|(e, &c)| AssignmentRow {
            slide_id: e.slide_id.clone(),
            grid_x: e.grid_x,
            grid_y: e.grid_y,
            cluster_id: c,
        })
        .collect();
    write_csv(&dir.join("assignments.csv"), &rows)
}

fn read_assignments(dir: &Path, index: &[PatchIndexEntry]) -> Result<Vec<usize>> {
    let rows: Vec<AssignmentRow> = read_csv(&dir.join("assignments.csv"))?;
    if rows.len() != index.len() || rows.iter().zip(index).any(|(r, e)| (r.slide_id.as_str(), r.grid_x, r.grid_y) != e.key()) {
        return Err(Error::InvalidInput(format!("{}: assignments do not match the patch index", dir.display())));
    }
    Ok(rows.into_iter().map(|r| r.cluster_id).collect())
}

fn produce_training(
    index: &[PatchIndexEntry],
    features: &FeaturesOut,
    clusters: &ClusterOut,
    split_of: &HashMap<String, Split>,
    augment: bool,
    cfg: &crate::classify::TrainConfig,
    dir: &Path,
) -> Result<()> {
    let mut groups: Vec<ClusterSamples> = (0..clusters.k)
        .map(|cluster_id| ClusterSamples {
            cluster_id,
            ..Default::default()
        })
        .collect();
    let sample = |i: usize, f: &Vec<f64>| Sample {
        slide_id: index[i].slide_id.clone(),
        features: f.clone(),
        label: index[i].label,
    };
    for (i, f) in features.original.iter().enumerate() {
        let g = &mut groups[clusters.assignments[i]];
        match split_of[&index[i].slide_id] {
            Split::Validation => g.validation.push(sample(i, f)),
            Split::Train if !augment => g.train.push(sample(i, f)),
            _ => {}
        }
    }
    if augment {
        // Variants keep the cluster of the patch they came from.
        for (i, f) in &features.augmented {
            groups[clusters.assignments[*i]].train.push(sample(*i, f));
        }
    }
    groups.retain(|g| !g.train.is_empty() || !g.validation.is_empty());
    let classifiers = train_all(&groups, cfg)?;
    let mut by_cluster: BTreeMap<usize, &ClusterClassifier> = BTreeMap::new();
    for c in &classifiers {
        by_cluster.insert(c.cluster_id, c);
    }
    let rows: Vec<PatchPredictionRow> = index
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let c = clusters.assignments[i];
            let model = by_cluster.get(&c).and_then(|m| m.model.as_ref());
            let p = model.map(|m| m.predict_proba(&features.original[i])).transpose()?;
            Ok(PatchPredictionRow {
                slide_id: e.slide_id.clone(),
                grid_x: e.grid_x,
                grid_y: e.grid_y,
                cluster_id: c,
                probability: p,
                label: p.map(|p| u8::from(p >= 0.5)),
            })
        })
        .collect::<Result<_>>()?;
    write_json(&dir.join("classifiers.json"), &classifiers)?;
    write_csv(&dir.join("patch_predictions.csv"), &rows)
}

fn load_training(index: &[PatchIndexEntry], dir: &Path) -> Result<(Vec<ClusterClassifier>, Vec<Option<(f64, u8)>>)> {
    let classifiers: Vec<ClusterClassifier> = read_json(&dir.join("classifiers.json"))?;
    let rows: Vec<PatchPredictionRow> = read_csv(&dir.join("patch_predictions.csv"))?;
    if rows.len() != index.len() {
        return Err(Error::InvalidInput(format!("{}: predictions do not match the patch index", dir.display())));
    }
    let predictions = rows.into_iter().map(|r| r.probability.zip(r.label)).collect();
    Ok((classifiers, predictions))
}

struct FuseContext<'a> {
    entries: &'a [SlideManifestEntry],
    index: &'a [PatchIndexEntry],
    assignments: &'a [usize],
    predictions: &'a [Option<(f64, u8)>],
    discriminative: &'a [usize],
    bins: usize,
    c_grid: &'a [f64],
    svm_params: SvmFusionParams,
}

impl FuseContext<'_> {
    /// Per slide, per discriminative cluster: patch probabilities and labels.
    fn grouped(&self) -> HashMap<&str, BTreeMap<usize, Vec<(f64, u8)>>> {
        let mut out: HashMap<&str, BTreeMap<usize, Vec<(f64, u8)>>> = HashMap::new();
        for ((e, &c), p) in self.index.iter().zip(self.assignments).zip(self.predictions) {
            if let Some(p) = p.filter(|_| self.discriminative.contains(&c)) {
                out.entry(e.slide_id.as_str()).or_default().entry(c).or_default().push(p);
            }
        }
        out
    }

    fn histograms(&self, grouped: &HashMap<&str, BTreeMap<usize, Vec<(f64, u8)>>>, split: Split) -> Result<Vec<SlideHistograms>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let per_cluster = grouped
                    .get(e.slide_id.as_str())
                    .map(|m| {
                        m.iter()
                            .map(|(&c, ps)| {
                                let probs: Vec<f64> = ps.iter().map(|p| p.0).collect();
                                build_histogram(&probs, self.bins).map(|h| (c, h))
                            })
                            .collect::<Result<BTreeMap<usize, Histogram>>>()
                    })
                    .transpose()?
                    .unwrap_or_default();
                Ok(SlideHistograms {
                    slide_id: e.slide_id.clone(),
                    label: e.label,
                    per_cluster,
                })
            })
            .collect()
    }
}

fn produce_fusion(ctx: &FuseContext<'_>, method: FusionMethod, dir: &Path) -> Result<()> {
    let grouped = ctx.grouped();
    let test: Vec<&SlideManifestEntry> = ctx.entries.iter().filter(|e| e.split == Split::Test).collect();
    let (predictions, model) = match method {
        FusionMethod::Vote => {
            let preds = test
                .iter()
                .map(|e| {
                    let labels: BTreeMap<usize, Vec<u8>> = grouped
                        .get(e.slide_id.as_str())
                        .map(|m| m.iter().map(|(&c, ps)| (c, ps.iter().map(|p| p.1).collect())).collect())
                        .unwrap_or_default();
                    predict_slide_vote(&e.slide_id, &labels, ctx.discriminative)
                })
                .collect::<Result<Vec<_>>>()?;
            (preds, None)
        }
        FusionMethod::Svm => {
            let train = ctx.histograms(&grouped, Split::Train)?;
            let validation = ctx.histograms(&grouped, Split::Validation)?;
            let model = svm_fuse_train(&train, &validation, ctx.discriminative, ctx.bins, ctx.c_grid, &ctx.svm_params)?;
            let preds = ctx
                .histograms(&grouped, Split::Test)?
                .iter()
                .map(|s| predict_slide(&model, s))
                .collect::<Result<Vec<_>>>()?;
            (preds, Some(model))
        }
    };
    let truth: HashMap<&str, u8> = ctx.entries.iter().map(|e| (e.slide_id.as_str(), e.label)).collect();
    let rows: Vec<PredictionRow> = predictions
        .iter()
        .map(|p| PredictionRow {
            slide_id: p.slide_id.clone(),
            method,
            final_label: p.final_label,
            truth: truth[p.slide_id.as_str()],
            abstained: p.abstained,
        })
        .collect();
    write_predictions(&dir.join("predictions.csv"), &rows)?;
    write_json(&dir.join("slide_predictions.json"), &predictions)?;
    write_json(&dir.join("fusion_model.json"), &model)
}
