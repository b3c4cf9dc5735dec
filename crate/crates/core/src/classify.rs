//! Per-cluster patch classifiers trained on inherited slide labels, and
//! selection of the clusters whose classifiers carry signal.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sgd_epoch, GradientModel, LogisticRegression, ShallowNet, Standardizer};
use crate::util::child_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassifierKind {
    #[default]
    Logistic,
    Shallow {
        hidden: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Minimum validation accuracy for a cluster to count as discriminative.
    pub threshold: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    /// Epochs without a new best validation loss before training stops.
    pub patience: usize,
    pub seed: u64,
    pub model: ClassifierKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            threshold: 0.65,
            epochs: 100,
            learning_rate: 0.05,
            l2: 1e-2,
            batch_size: 32,
            patience: 10,
            seed: 0,
            model: ClassifierKind::Logistic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold must lie strictly between 0 and 1");
        }
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return fail("epochs, patience and batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning rate must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return fail("l2 must be non-negative");
        }
        if let ClassifierKind::Shallow { hidden: 0 } = self.model {
            return fail("shallow classifier needs at least one hidden unit");
        }
        Ok(())
    }
}

/// A patch feature vector with the label inherited from its slide.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub slide_id: String,
    pub features: Vec<f64>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PatchModel {
    Logistic(LogisticRegression),
    Shallow(ShallowNet),
}

impl PatchModel {
    fn proba(&self, x: &[f64]) -> f64 {
        match self {
            PatchModel::Logistic(m) => m.predict_proba(x),
            PatchModel::Shallow(m) => m.predict_proba(x),
        }
    }
}

/// Feature standardization followed by a patch model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub standardizer: Standardizer,
    pub model: PatchModel,
}

impl TrainedModel {
    /// A logistic model with zero weights; predicts 0.5 everywhere.
    pub fn zero(dim: usize) -> Self {
        Self {
            standardizer: Standardizer {
                mean: vec![0.0; dim],
                std: vec![1.0; dim],
            },
            model: PatchModel::Logistic(LogisticRegression::zeros(dim, 0.0)),
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.standardizer.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.standardizer.mean.len(),
                got: x.len(),
            });
        }
        Ok(self.model.proba(&self.standardizer.apply(x)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterClassifier {
    pub cluster_id: usize,
    /// `None` when the cluster could not be trained; see `note`.
    pub model: Option<TrainedModel>,
    pub validation_accuracy: f64,
    /// Best validation log-loss; `None` when untrained.
    pub validation_loss: Option<f64>,
    pub converged: bool,
    pub discriminative: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs_run: usize,
    pub note: Option<String>,
}

/// The selection rule: converged and at least `threshold` accurate.
pub fn qualifies(converged: bool, validation_accuracy: f64, threshold: f64) -> bool {
    converged && validation_accuracy >= threshold
}

impl ClusterClassifier {
    fn untrainable(cluster_id: usize, n_train: usize, n_val: usize, note: String) -> Self {
        log::warn!("cluster {cluster_id}: {note}");
        Self {
            cluster_id,
            model: None,
            validation_accuracy: 0.0,
            validation_loss: None,
            converged: false,
            discriminative: false,
            n_train,
            n_val,
            epochs_run: 0,
            note: Some(note),
        }
    }

    /// Re-applies the selection rule under a different threshold.
    pub fn with_threshold(&self, threshold: f64) -> Self {
        Self {
            discriminative: self.model.is_some() && qualifies(self.converged, self.validation_accuracy, threshold),
            ..self.clone()
        }
    }

    pub fn report(&self) -> TrainingReport {
        TrainingReport {
            cluster_id: self.cluster_id,
            n_train: self.n_train,
            n_val: self.n_val,
            epochs_run: self.epochs_run,
            converged: self.converged,
            validation_accuracy: self.validation_accuracy,
            discriminative: self.discriminative,
        }
    }
}

/// Summary written per cluster after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub cluster_id: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs_run: usize,
    pub converged: bool,
    pub validation_accuracy: f64,
    pub discriminative: bool,
}

fn slides_with_label(samples: &[Sample], label: u8) -> usize {
    samples
        .iter()
        .filter(|s| s.label == label)
        .map(|s| s.slide_id.as_str())
        .collect::<BTreeSet<_>>()
        .len()
}

fn run_training<M: GradientModel>(
    mut model: M,
    xt: &[Vec<f64>],
    yt: &[f64],
    xv: &[Vec<f64>],
    yv: &[f64],
    cfg: &TrainConfig,
    seed: u64,
) -> (M, f64, bool, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = model.log_loss(xv, yv);
    let mut best = initial;
    let mut best_model = model.clone();
    let mut stale = 0;
    let mut epochs_run = 0;
    for _ in 0..cfg.epochs {
        sgd_epoch(&mut model, xt, yt, cfg.learning_rate, cfg.batch_size, &mut rng);
        epochs_run += 1;
        let loss = model.log_loss(xv, yv);
        if !loss.is_finite() {
            break;
        }
        if loss < best {
            best = loss;
            best_model = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let converged = best.is_finite() && best < initial;
    (best_model, best, converged, epochs_run)
}

/// Trains one cluster's classifier on `train` and scores it on
/// `validation`. The two sets must not share a slide. Clusters that cannot
/// be trained (a single class, or fewer than two slides per class) come
/// back as non-discriminative with a note rather than as an error.
pub fn train_cluster_classifier(cluster_id: usize, train: &[Sample], validation: &[Sample], cfg: &TrainConfig) -> Result<ClusterClassifier> {
    cfg.validate()?;
    if train.is_empty() && validation.is_empty() {
        return Err(Error::InvalidInput(format!("cluster {cluster_id} is empty")));
    }
    let train_slides: BTreeSet<&str> = train.iter().map(|s| s.slide_id.as_str()).collect();
    let leaked: Vec<&str> = validation
        .iter()
        .map(|s| s.slide_id.as_str())
        .filter(|id| train_slides.contains(id))
        .collect();
    assert!(leaked.is_empty(), "slides {leaked:?} appear in both training and validation");

    let (n_train, n_val) = (train.len(), validation.len());
    if slides_with_label(train, 0) == 0 || slides_with_label(train, 1) == 0 {
        return Ok(ClusterClassifier::untrainable(
            cluster_id,
            n_train,
            n_val,
            "training patches come from a single class".into(),
        ));
    }
    if slides_with_label(train, 0) < 2 || slides_with_label(train, 1) < 2 {
        return Ok(ClusterClassifier::untrainable(
            cluster_id,
            n_train,
            n_val,
            "fewer than two training slides per class".into(),
        ));
    }
    if validation.is_empty() {
        return Ok(ClusterClassifier::untrainable(cluster_id, n_train, n_val, "no validation patches".into()));
    }
    let dim = train[0].features.len();
    if let Some(bad) = train.iter().chain(validation).find(|s| s.features.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.features.len(),
        });
    }

    let raw: Vec<Vec<f64>> = train.iter().map(|s| s.features.clone()).collect();
    let standardizer = Standardizer::fit(&raw)?;
    let xt: Vec<Vec<f64>> = raw.iter().map(|x| standardizer.apply(x)).collect();
    let yt: Vec<f64> = train.iter().map(|s| f64::from(s.label)).collect();
    let xv: Vec<Vec<f64>> = validation.iter().map(|s| standardizer.apply(&s.features)).collect();
    let yv: Vec<f64> = validation.iter().map(|s| f64::from(s.label)).collect();

    let seed = child_seed(cfg.seed, cluster_id as u64);
    let (model, loss, converged, epochs_run) = match cfg.model {
        ClassifierKind::Logistic => {
            let (m, l, c, e) = run_training(LogisticRegression::zeros(dim, cfg.l2), &xt, &yt, &xv, &yv, cfg, seed);
            (PatchModel::Logistic(m), l, c, e)
        }
        ClassifierKind::Shallow { hidden } => {
            let net = ShallowNet::new(dim, hidden, cfg.l2, child_seed(seed, 1));
            let (m, l, c, e) = run_training(net, &xt, &yt, &xv, &yv, cfg, seed);
            (PatchModel::Shallow(m), l, c, e)
        }
    };
    let correct = xv
        .iter()
        .zip(validation)
        .filter(|(x, s)| u8::from(model.proba(x) >= 0.5) == s.label)
        .count();
    let validation_accuracy = correct as f64 / n_val as f64;
    Ok(ClusterClassifier {
        cluster_id,
        model: Some(TrainedModel { standardizer, model }),
        validation_accuracy,
        validation_loss: Some(loss),
        converged,
        discriminative: qualifies(converged, validation_accuracy, cfg.threshold),
        n_train,
        n_val,
        epochs_run,
        note: None,
    })
}

/// Training and validation samples of one cluster.
#[derive(Debug, Clone, Default)]
pub struct ClusterSamples {
    pub cluster_id: usize,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
}

/// Trains every cluster independently, in parallel; output follows input order.
pub fn train_all(clusters: &[ClusterSamples], cfg: &TrainConfig) -> Result<Vec<ClusterClassifier>> {
    clusters
        .par_iter()
        .map(|c| train_cluster_classifier(c.cluster_id, &c.train, &c.validation, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub cluster_ids: Vec<usize>,
    /// Set when no cluster qualified and the best trained one was taken.
    pub fallback: bool,
}

/// Ids of discriminative clusters, ascending. If none qualify, the trained
/// cluster with the best validation accuracy is returned (lowest id on
/// ties) and a warning is logged.
pub fn select_discriminative(classifiers: &[ClusterClassifier]) -> Result<Selection> {
    if classifiers.is_empty() {
        return Err(Error::InvalidInput("no classifiers to select from".into()));
    }
    let mut ids: Vec<usize> = classifiers.iter().filter(|c| c.discriminative).map(|c| c.cluster_id).collect();
    if !ids.is_empty() {
        ids.sort_unstable();
        return Ok(Selection {
            cluster_ids: ids,
            fallback: false,
        });
    }
    let best = classifiers
        .iter()
        .filter(|c| c.model.is_some())
        .reduce(|a, b| {
            if b.validation_accuracy > a.validation_accuracy
                || (b.validation_accuracy == a.validation_accuracy && b.cluster_id < a.cluster_id)
            {
                b
            } else {
                a
            }
        })
        .ok_or_else(|| Error::Degenerate("no cluster could be trained".into()))?;
    log::warn!(
        "no cluster reached the selection threshold; falling back to cluster {} (validation accuracy {:.3})",
        best.cluster_id,
        best.validation_accuracy
    );
    Ok(Selection {
        cluster_ids: vec![best.cluster_id],
        fallback: true,
    })
}

/// Survival probability and hard label (`p >= 0.5`) per feature vector.
pub fn predict_patches(classifier: &ClusterClassifier, features: &[Vec<f64>]) -> Result<Vec<(f64, u8)>> {
    let model = classifier.model.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!("cluster {} has no trained classifier", classifier.cluster_id))
    })?;
    features
        .iter()
        .map(|x| model.predict_proba(x).map(|p| (p, u8::from(p >= 0.5))))
        .collect()
}

pub fn write_training_reports(path: &std::path::Path, classifiers: &[ClusterClassifier]) -> Result<()> {
    let reports: Vec<TrainingReport> = classifiers.iter().map(ClusterClassifier::report).collect();
    let json = serde_json::to_string_pretty(&reports)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// `slides` slides per class with `per_slide` patches each; label-1
    /// patches have their first feature shifted by `shift`.
    fn samples(prefix: &str, slides: usize, per_slide: usize, shift: f64, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for label in [0u8, 1] {
            for s in 0..slides {
                for _ in 0..per_slide {
                    let mut f: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
                    f[0] += shift * f64::from(label);
                    out.push(Sample {
                        slide_id: format!("{prefix}{label}_{s}"),
                        features: f,
                        label,
                    });
                }
            }
        }
        out
    }

    fn fake(id: usize, acc: f64, converged: bool, threshold: f64) -> ClusterClassifier {
        ClusterClassifier {
            cluster_id: id,
            model: Some(TrainedModel::zero(2)),
            validation_accuracy: acc,
            validation_loss: Some(0.5),
            converged,
            discriminative: qualifies(converged, acc, threshold),
            n_train: 10,
            n_val: 10,
            epochs_run: 1,
            note: None,
        }
    }

    #[test]
    fn noise_cluster_is_not_discriminative() {
        let train = samples("t", 6, 30, 0.0, 1);
        let val = samples("v", 2, 100, 0.0, 2);
        let c = train_cluster_classifier(0, &train, &val, &TrainConfig::default()).unwrap();
        assert!((c.validation_accuracy - 0.5).abs() <= 0.1, "{}", c.validation_accuracy);
        assert!(!c.discriminative);
    }

    #[test]
    fn signal_cluster_is_discriminative() {
        let train = samples("t", 6, 30, 4.0, 3);
        let val = samples("v", 2, 50, 4.0, 4);
        let c = train_cluster_classifier(1, &train, &val, &TrainConfig::default()).unwrap();
        assert!(c.validation_accuracy > 0.9, "{}", c.validation_accuracy);
        assert!(c.converged && c.discriminative);
        let strong = train.iter().find(|s| s.label == 1 && s.features[0] > 6.0).unwrap();
        let p = predict_patches(&c, std::slice::from_ref(&strong.features)).unwrap();
        assert!(p[0].0 > 0.9);
    }

    #[test]
    fn shallow_variant_trains() {
        let train = samples("t", 4, 30, 4.0, 5);
        let val = samples("v", 2, 30, 4.0, 6);
        let cfg = TrainConfig {
            model: ClassifierKind::Shallow { hidden: 8 },
            ..Default::default()
        };
        let c = train_cluster_classifier(0, &train, &val, &cfg).unwrap();
        assert!(c.validation_accuracy > 0.9 && c.discriminative);
    }

    #[test]
    fn threshold_boundary() {
        assert!(!qualifies(true, 0.64, 0.65));
        assert!(qualifies(true, 0.65, 0.65));
        assert!(!qualifies(false, 0.9, 0.65));
    }

    #[test]
    fn single_class_and_empty_clusters() {
        let train: Vec<Sample> = samples("t", 3, 5, 0.0, 7).into_iter().filter(|s| s.label == 0).collect();
        let val = samples("v", 1, 5, 0.0, 8);
        let c = train_cluster_classifier(0, &train, &val, &TrainConfig::default()).unwrap();
        assert!(!c.discriminative && c.model.is_none() && c.note.is_some());
        assert!(train_cluster_classifier(0, &[], &[], &TrainConfig::default()).is_err());
        assert!(predict_patches(&c, &[vec![0.0; 8]]).is_err());
    }

    #[test]
    #[should_panic(expected = "both training and validation")]
    fn slide_leakage_is_fatal() {
        let train = samples("t", 2, 5, 0.0, 9);
        let val = train[..3].to_vec();
        let _ = train_cluster_classifier(0, &train, &val, &TrainConfig::default());
    }

    #[test]
    fn deterministic() {
        let train = samples("t", 4, 20, 1.0, 10);
        let val = samples("v", 2, 20, 1.0, 11);
        let cfg = TrainConfig::default();
        assert_eq!(
            train_cluster_classifier(2, &train, &val, &cfg).unwrap(),
            train_cluster_classifier(2, &train, &val, &cfg).unwrap()
        );
    }

    #[test]
    fn selection_examples() {
        let cs = vec![fake(0, 0.9, true, 0.65), fake(1, 0.5, true, 0.65), fake(2, 0.7, true, 0.65)];
        assert_eq!(select_discriminative(&cs).unwrap(), Selection { cluster_ids: vec![0, 2], fallback: false });
        let cs = vec![fake(0, 0.55, true, 0.65), fake(1, 0.6, true, 0.65), fake(2, 0.6, true, 0.65)];
        assert_eq!(select_discriminative(&cs).unwrap(), Selection { cluster_ids: vec![1], fallback: true });
        let cs = vec![fake(0, 0.9, false, 0.65), fake(1, 0.7, true, 0.65)];
        assert_eq!(select_discriminative(&cs).unwrap().cluster_ids, vec![1]);
        assert!(select_discriminative(&[]).is_err());
    }

    #[test]
    fn zero_model_predicts_one_half() {
        let c = fake(0, 0.5, true, 0.65);
        let p = predict_patches(&c, &[vec![3.0, -1.0], vec![0.0, 0.0]]).unwrap();
        assert!(p.iter().all(|&(q, l)| q == 0.5 && l == 1));
    }

    #[test]
    fn report_json_fields() {
        let json = serde_json::to_value(fake(3, 0.7, true, 0.65).report()).unwrap();
        for key in ["cluster_id", "n_train", "n_val", "epochs_run", "converged", "validation_accuracy", "discriminative"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn raising_threshold_never_grows_selection(
            accs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..12),
            t1 in 0.01f64..0.99,
            t2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let base: Vec<ClusterClassifier> = accs.iter().enumerate().map(|(i, &(a, c))| fake(i, a, c, lo)).collect();
            let at_lo: BTreeSet<usize> = base.iter().filter(|c| c.discriminative).map(|c| c.cluster_id).collect();
            let at_hi: BTreeSet<usize> = base.iter().map(|c| c.with_threshold(hi)).filter(|c| c.discriminative).map(|c| c.cluster_id).collect();
            prop_assert!(at_hi.is_subset(&at_lo));
        }

        #[test]
        fn probabilities_in_range(xs in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 8), 1..20)) {
            let train = samples("t", 3, 10, 2.0, 12);
            let val = samples("v", 1, 10, 2.0, 13);
            let c = train_cluster_classifier(0, &train, &val, &TrainConfig::default()).unwrap();
            let out = predict_patches(&c, &xs).unwrap();
            let total: f64 = out.iter().map(|p| p.0).sum();
            prop_assert!(out.iter().all(|p| (0.0..=1.0).contains(&p.0)));
            prop_assert!(total >= 0.0 && total <= xs.len() as f64);
        }
    }
}
