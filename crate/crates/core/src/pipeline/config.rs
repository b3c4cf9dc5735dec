//! `key = value` run configuration. Every key has an explicit default and the
//! fully resolved set is written into each run report, so a report alone is
//! enough to repeat a run.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classify::{ClassifierKind, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionMethod, SvmLayout, DEFAULT_BINS, DEFAULT_C_GRID};
use crate::tiling::AugmentationSpec;
use crate::util::child_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringMethod {
    /// 1-D k-means over patch information ratios.
    InfoDensity(usize),
    /// Deep-feature PCA followed by k-means.
    Phenotype(usize),
}

impl ClusteringMethod {
    pub fn k(&self) -> usize {
        match *self {
            ClusteringMethod::InfoDensity(k) | ClusteringMethod::Phenotype(k) => k,
        }
    }

    /// Display label, e.g. `ID3` or `Ph10`.
    pub fn label(&self) -> String {
        match self {
            ClusteringMethod::InfoDensity(k) => format!("ID{k}"),
            ClusteringMethod::Phenotype(k) => format!("Ph{k}"),
        }
    }
}

impl fmt::Display for ClusteringMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusteringMethod::InfoDensity(k) => write!(f, "id{k}"),
            ClusteringMethod::Phenotype(k) => write!(f, "ph{k}"),
        }
    }
}

impl FromStr for ClusteringMethod {
    type Err = Error;

    /// `id<k>` or `ph<k>`; `id3`, `ph5` and `ph10` are the standard ones.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::Config(format!("unknown clustering method '{s}' (expected id<k> or ph<k>, e.g. id3, ph5, ph10)"));
        let (ctor, rest): (fn(usize) -> ClusteringMethod, &str) = if let Some(r) = s.strip_prefix("id") {
            (ClusteringMethod::InfoDensity, r)
        } else if let Some(r) = s.strip_prefix("ph") {
            (ClusteringMethod::Phenotype, r)
        } else {
            return Err(bad());
        };
        match rest.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(ctor(k)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormTargetMode {
    /// Pixel-weighted pooled statistics of the whole corpus.
    Pooled,
    StandardNormal,
}

impl fmt::Display for NormTargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormTargetMode::Pooled => "pooled",
            NormTargetMode::StandardNormal => "standard_normal",
        })
    }
}

impl FromStr for NormTargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pooled" => Ok(NormTargetMode::Pooled),
            "standard_normal" => Ok(NormTargetMode::StandardNormal),
            other => Err(Error::Config(format!(
                "unknown normalization target '{other}' (expected pooled or standard_normal)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractorChoice {
    Reference,
    /// Precomputed tensors in `features.feat` / `features.csv` under a directory.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub work_dir: PathBuf,
    pub downsample: usize,
    pub norm_target: NormTargetMode,
    pub tissue_mask: bool,
    pub mask_threshold: u8,
    pub deflate_level: u32,
    pub extractor: ExtractorChoice,
    pub extractor_seed: u64,
    pub augment: bool,
    pub aug_dihedral: Vec<usize>,
    pub aug_blur_sigma: f64,
    pub aug_blur_probability: f64,
    pub aug_multiplier: (f64, f64),
    pub clustering: Vec<ClusteringMethod>,
    pub fusion: Vec<FusionMethod>,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub pca_dim: usize,
    pub classifier: ClassifierKind,
    pub threshold: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub bins: usize,
    pub c_grid: Vec<f64>,
    pub svm_epochs: usize,
    pub svm_layout: SvmLayout,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let aug = AugmentationSpec::default();
        let train = TrainConfig::default();
        Self {
            manifest: PathBuf::from("manifest.csv"),
            work_dir: PathBuf::from("work"),
            downsample: 10,
            norm_target: NormTargetMode::Pooled,
            tissue_mask: false,
            mask_threshold: 220,
            deflate_level: crate::imagecore::DEFAULT_DEFLATE_LEVEL,
            extractor: ExtractorChoice::Reference,
            extractor_seed: 0,
            augment: true,
            aug_dihedral: aug.dihedral,
            aug_blur_sigma: aug.blur_sigma,
            aug_blur_probability: aug.blur_probability,
            aug_multiplier: aug.multiplier_range,
            clustering: vec![ClusteringMethod::Phenotype(5)],
            fusion: vec![FusionMethod::Svm],
            kmeans_restarts: 10,
            kmeans_max_iters: 300,
            kmeans_tol: 1e-6,
            pca_dim: crate::phenotype::DEFAULT_PCA_DIM,
            classifier: train.model,
            threshold: train.threshold,
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            l2: train.l2,
            batch_size: train.batch_size,
            patience: train.patience,
            bins: DEFAULT_BINS,
            c_grid: DEFAULT_C_GRID.to_vec(),
            svm_epochs: 2000,
            svm_layout: SvmLayout::PerCluster,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for `{key}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn resolve(base: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value.trim());
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// taken relative to `base_dir`. Unknown keys are errors.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.manifest = base_dir.join(&cfg.manifest);
        cfg.work_dir = base_dir.join(&cfg.work_dir);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got '{line}'", n + 1)))?;
            cfg.set(key.trim(), value.trim(), base_dir)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Rebuilds a configuration from the pairs recorded in a report.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v, Path::new(""))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str, base_dir: &Path) -> Result<()> {
        match key {
            "manifest" => self.manifest = resolve(base_dir, value),
            "work_dir" => self.work_dir = resolve(base_dir, value),
            "downsample" => self.downsample = parse(key, value)?,
            "norm_target" => self.norm_target = value.parse()?,
            "tissue_mask" => self.tissue_mask = parse_bool(key, value)?,
            "mask_threshold" => self.mask_threshold = parse(key, value)?,
            "deflate_level" => self.deflate_level = parse(key, value)?,
            "extractor" => {
                self.extractor = match value.trim() {
                    "reference" => ExtractorChoice::Reference,
                    v => match v.strip_prefix("file:") {
                        Some(dir) => ExtractorChoice::File(resolve(base_dir, dir)),
                        None => return Err(Error::Config(format!("unknown extractor '{v}' (expected reference or file:<dir>)"))),
                    },
                }
            }
            "extractor_seed" => self.extractor_seed = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "aug_dihedral" => self.aug_dihedral = parse_list(key, value)?,
            "aug_blur_sigma" => self.aug_blur_sigma = parse(key, value)?,
            "aug_blur_probability" => self.aug_blur_probability = parse(key, value)?,
            "aug_multiplier_lo" => self.aug_multiplier.0 = parse(key, value)?,
            "aug_multiplier_hi" => self.aug_multiplier.1 = parse(key, value)?,
            "clustering" => self.clustering = parse_list(key, value)?,
            "fusion" => self.fusion = parse_list(key, value)?,
            "kmeans_restarts" => self.kmeans_restarts = parse(key, value)?,
            "kmeans_max_iters" => self.kmeans_max_iters = parse(key, value)?,
            "kmeans_tol" => self.kmeans_tol = parse(key, value)?,
            "pca_dim" => self.pca_dim = parse(key, value)?,
            "classifier" => {
                self.classifier = match value.trim() {
                    "logistic" => ClassifierKind::Logistic,
                    v => match v.strip_prefix("shallow:").map(|h| h.parse::<usize>()) {
                        Some(Ok(hidden)) => ClassifierKind::Shallow { hidden },
                        _ => return Err(Error::Config(format!("unknown classifier '{v}' (expected logistic or shallow:<hidden>)"))),
                    },
                }
            }
            "threshold" => self.threshold = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "bins" => self.bins = parse(key, value)?,
            "c_grid" => self.c_grid = parse_list(key, value)?,
            "svm_epochs" => self.svm_epochs = parse(key, value)?,
            "svm_layout" => self.svm_layout = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("manifest", self.manifest.display().to_string());
        put("work_dir", self.work_dir.display().to_string());
        put("downsample", self.downsample.to_string());
        put("norm_target", self.norm_target.to_string());
        put("tissue_mask", self.tissue_mask.to_string());
        put("mask_threshold", self.mask_threshold.to_string());
        put("deflate_level", self.deflate_level.to_string());
        put(
            "extractor",
            match &self.extractor {
                ExtractorChoice::Reference => "reference".into(),
                ExtractorChoice::File(dir) => format!("file:{}", dir.display()),
            },
        );
        put("extractor_seed", self.extractor_seed.to_string());
        put("augment", self.augment.to_string());
        put("aug_dihedral", join(&self.aug_dihedral));
        put("aug_blur_sigma", self.aug_blur_sigma.to_string());
        put("aug_blur_probability", self.aug_blur_probability.to_string());
        put("aug_multiplier_lo", self.aug_multiplier.0.to_string());
        put("aug_multiplier_hi", self.aug_multiplier.1.to_string());
        put("clustering", join(&self.clustering));
        put("fusion", join(&self.fusion));
        put("kmeans_restarts", self.kmeans_restarts.to_string());
        put("kmeans_max_iters", self.kmeans_max_iters.to_string());
        put("kmeans_tol", self.kmeans_tol.to_string());
        put("pca_dim", self.pca_dim.to_string());
        put(
            "classifier",
            match self.classifier {
                ClassifierKind::Logistic => "logistic".into(),
                ClassifierKind::Shallow { hidden } => format!("shallow:{hidden}"),
            },
        );
        put("threshold", self.threshold.to_string());
        put("epochs", self.epochs.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("l2", self.l2.to_string());
        put("batch_size", self.batch_size.to_string());
        put("patience", self.patience.to_string());
        put("bins", self.bins.to_string());
        put("c_grid", join(&self.c_grid));
        put("svm_epochs", self.svm_epochs.to_string());
        put(
            "svm_layout",
            match self.svm_layout {
                SvmLayout::PerCluster => "per_cluster".into(),
                SvmLayout::Concatenated => "concatenated".into(),
            },
        );
        put("seed", self.seed.to_string());
        m
    }

    /// Renders the resolved configuration in the file format.
    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.downsample == 0 {
            return fail("downsample must be >= 1".into());
        }
        if self.deflate_level > 9 {
            return fail(format!("deflate_level must be 0..=9, got {}", self.deflate_level));
        }
        if self.clustering.is_empty() || self.fusion.is_empty() {
            return fail("clustering and fusion each need at least one method".into());
        }
        if self.kmeans_restarts == 0 || self.kmeans_max_iters == 0 {
            return fail("kmeans_restarts and kmeans_max_iters must be positive".into());
        }
        if !(self.kmeans_tol >= 0.0 && self.kmeans_tol.is_finite()) {
            return fail("kmeans_tol must be non-negative".into());
        }
        if self.pca_dim == 0 {
            return fail("pca_dim must be >= 1".into());
        }
        if self.bins == 0 {
            return fail("bins must be >= 1".into());
        }
        if self.svm_epochs == 0 {
            return fail("svm_epochs must be >= 1".into());
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return fail("c_grid must list positive values".into());
        }
        if self.augment {
            self.augmentation().validate().map_err(|e| Error::Config(e.to_string()))?;
            if matches!(self.extractor, ExtractorChoice::File(_)) {
                return fail("precomputed features cover unaugmented patches only; set augment = false".into());
            }
        }
        self.train_config().validate()
    }

    /// Seeds for each randomized stage, derived from `seed`.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        [("augment", 1), ("kmeans", 2), ("train", 3), ("svm", 4)]
            .into_iter()
            .map(|(name, i)| (name.to_string(), child_seed(self.seed, i)))
            .collect()
    }

    pub fn seed_for(&self, stage: &str) -> u64 {
        self.seeds()[stage]
    }

    pub fn augmentation(&self) -> AugmentationSpec {
        AugmentationSpec {
            dihedral: self.aug_dihedral.clone(),
            blur_sigma: self.aug_blur_sigma,
            blur_probability: self.aug_blur_probability,
            multiplier_range: self.aug_multiplier,
            seed: self.seed_for("augment"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            threshold: self.threshold,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            l2: self.l2,
            batch_size: self.batch_size,
            patience: self.patience,
            seed: self.seed_for("train"),
            model: self.classifier,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn methods_parse() {
        assert_eq!("id3".parse::<ClusteringMethod>().unwrap(), ClusteringMethod::InfoDensity(3));
        assert_eq!("Ph10".parse::<ClusteringMethod>().unwrap(), ClusteringMethod::Phenotype(10));
        assert_eq!(ClusteringMethod::Phenotype(5).label(), "Ph5");
        for bad in ["", "id", "ph0", "km5", "id-2"] {
            assert!(bad.parse::<ClusteringMethod>().unwrap_err().is_config(), "{bad}");
        }
    }

    #[test]
    fn parse_file_text() {
        let text = "# sweep\nmanifest = corpus/manifest.csv\nwork_dir=/tmp/w\nclustering = id3, ph5 ,ph10\nfusion = vote,svm\naugment = no # inline\nthreshold = 0.7\n";
        let cfg = PipelineConfig::parse(text, Path::new("/data")).unwrap();
        assert_eq!(cfg.manifest, PathBuf::from("/data/corpus/manifest.csv"));
        assert_eq!(cfg.work_dir, PathBuf::from("/tmp/w"));
        assert_eq!(cfg.clustering.len(), 3);
        assert_eq!(cfg.fusion, vec![FusionMethod::Vote, FusionMethod::Svm]);
        assert!(!cfg.augment);
        assert_eq!(cfg.threshold, 0.7);
        assert_eq!(cfg.downsample, 10);
    }

    #[test]
    fn errors_are_config_errors() {
        let base = Path::new(".");
        for text in ["bogus = 1", "downsample", "downsample = x", "threshold = 1.5", "c_grid = 0", "bins = 0", "extractor = file:feat"] {
            let e = PipelineConfig::parse(text, base).unwrap_err();
            assert!(e.is_config(), "{text}: {e}");
        }
        assert!(PipelineConfig::parse("extractor = file:feat\naugment = false", base).is_ok());
    }

    #[test]
    fn pairs_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.clustering = vec![ClusteringMethod::InfoDensity(3), ClusteringMethod::Phenotype(10)];
        cfg.classifier = ClassifierKind::Shallow { hidden: 16 };
        cfg.learning_rate = 0.1 + 0.2;
        cfg.manifest = PathBuf::from("/abs/m.csv");
        cfg.work_dir = PathBuf::from("/abs/w");
        let back = PipelineConfig::from_pairs(&cfg.to_pairs()).unwrap();
        assert_eq!(back, cfg);
        let reparsed = PipelineConfig::parse(&cfg.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn seeds_are_distinct_and_follow_master() {
        let a = PipelineConfig::default().seeds();
        let b = PipelineConfig { seed: 1, ..Default::default() }.seeds();
        let distinct: std::collections::BTreeSet<u64> = a.values().copied().collect();
        assert_eq!(distinct.len(), a.len());
        assert!(a.iter().all(|(k, v)| b[k] != *v));
    }
}
