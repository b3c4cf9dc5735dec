//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs as a plain binary so the lines always reach stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use slidesurv::chromanorm::{lab_to_rgb, rgb_to_lab, rgb_to_xyz};
use slidesurv::fusion::FusionMethod;
use slidesurv::imagecore::RasterImage;
use slidesurv::infodensity::information_ratio;
use slidesurv::numerics::{
    adjusted_rand_index, finite_difference_error, kmeans, pca_fit, GradientModel, KMeansParams, LogisticRegression,
};
use slidesurv::pipeline::{run_pipeline, ClusteringMethod, Pipeline, PipelineConfig, RunReport, StageName, StageTiming};
use slidesurv::synthdata::{generate_corpus, CorpusSummary, SynthSpec};

type Check = Result<(bool, String), Box<dyn std::error::Error>>;

struct Line {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn run(id: u8, name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Check) -> Line {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    finish(id, name, limit, out, elapsed)
}

fn finish(id: u8, name: &'static str, limit: Option<Duration>, out: Check, elapsed: Duration) -> Line {
    let (mut pass, mut detail) = match out {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    if let Some(limit) = limit {
        if elapsed > limit {
            pass = false;
            detail.push_str(&format!("; over the {:.0} s budget", limit.as_secs_f64()));
        }
    }
    let line = Line { id, name, pass, detail, elapsed };
    println!(
        "criterion {:>2} {} {}: {} [{:.1} s]",
        line.id,
        if line.pass { "PASS" } else { "FAIL" },
        line.name,
        line.detail,
        line.elapsed.as_secs_f64()
    );
    line
}

fn color_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let rgb: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.01..=1.0));
        let back = lab_to_rgb(rgb_to_lab(rgb)?)?;
        for c in 0..3 {
            worst = worst.max((back[c] - rgb[c]).abs());
        }
    }
    let mut gray_worst = 0.0f64;
    for i in 0..=1000 {
        let g = 0.01 + 0.99 * i as f64 / 1000.0;
        let lab = rgb_to_lab([g; 3])?;
        gray_worst = gray_worst.max(lab.alpha.abs()).max(lab.beta.abs());
    }
    Ok((
        worst < 1e-6 && gray_worst < 1e-9,
        format!("max round-trip error {worst:.2e}, max gray |alpha|,|beta| {gray_worst:.2e}"),
    ))
}

fn white_point() -> Check {
    // Row sums of the RGB->XYZ matrix, added by hand.
    let expected = [0.9984, 0.9994, 0.9913];
    let xyz = rgb_to_xyz([1.0, 1.0, 1.0]);
    let err = (0..3).map(|i| (xyz[i] - expected[i]).abs()).fold(0.0, f64::max);
    Ok((err < 1e-12, format!("XYZ of white {xyz:?}, max deviation {err:.1e}")))
}

fn inertia(points: &[[f64; 2]], labels: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&[f64; 2]> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let mx = members.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = members.iter().map(|p| p[1]).sum::<f64>() / n;
        total += members.iter().map(|p| (p[0] - mx).powi(2) + (p[1] - my).powi(2)).sum::<f64>();
    }
    total
}

fn kmeans_oracle() -> Check {
    let offsets = [[0.0, 0.0], [0.3, 0.1], [-0.2, 0.25], [0.1, -0.3]];
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let points: Vec<[f64; 2]> = centers.iter().flat_map(|c| offsets.iter().map(move |o| [c[0] + o[0], c[1] + o[1]])).collect();
    let truth: Vec<usize> = (0..12).map(|i| i / 4).collect();

    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; 12];
    for code in 0..3usize.pow(12) {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % 3;
            c /= 3;
        }
        best = best.min(inertia(&points, &labels, 3));
    }

    let rows: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
    let fit = kmeans(&rows, &KMeansParams { k: 3, restarts: 10, seed: 7, ..Default::default() })?;
    let recovered = adjusted_rand_index(&fit.assignments, &truth)? == 1.0;
    let exact = fit.model.inertia == best;

    let mut monotone = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100u64 {
        let n = rng.random_range(10..200);
        let d = rng.random_range(1..6);
        let data: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let k = rng.random_range(2..8);
        let fit = kmeans(&data, &KMeansParams { k, restarts: 3, seed: i, ..Default::default() })?;
        if fit.trace.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    Ok((
        exact && recovered && monotone == 100,
        format!(
            "inertia {:.6} vs enumerated optimum {best:.6} (exact: {exact}), triads recovered: {recovered}, monotone traces {monotone}/100",
            fit.model.inertia
        ),
    ))
}

fn pca_oracle() -> Check {
    let d = 512;
    let out_dim = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_ortho = 0.0f64;
    let mut worst_rel = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(100..=1000);
        let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
        let mixing: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let data: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let shared: f64 = rng.sample(StandardNormal);
                (0..d).map(|j| scales[j] * rng.sample::<f64, _>(StandardNormal) + mixing[j] * shared).collect()
            })
            .collect();
        let model = pca_fit(&data, out_dim)?;
        for a in 0..out_dim {
            for b in a..out_dim {
                let dot: f64 = model.components[a].iter().zip(&model.components[b]).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst_ortho = worst_ortho.max((dot - want).abs());
            }
        }
        let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (got, want) in model.explained_variance.iter().zip(&eig) {
            worst_rel = worst_rel.max((got - want).abs() / want.abs());
        }
    }
    Ok((
        worst_ortho < 1e-8 && worst_rel < 1e-6,
        format!("orthonormality error {worst_ortho:.1e}, eigenvalue relative error {worst_rel:.1e}"),
    ))
}

fn gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dim = 20;
    let xs: Vec<Vec<f64>> = (0..200).map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let ys: Vec<f64> = (0..200).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut model = LogisticRegression::zeros(dim, 1e-2);
        let p: Vec<f64> = (0..=dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.set_params(&p);
        worst = worst.max(finite_difference_error(&model, &xs, &ys, 1e-5));
    }
    Ok((worst < 1e-4, format!("max relative gradient error {worst:.2e} over 50 points")))
}

fn information_ratio_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut sizes_ok = true;
    let mut ordered = 0;
    for _ in 0..100 {
        let color: [u8; 3] = std::array::from_fn(|_| rng.random());
        let flat = RasterImage::filled(224, 224, color)?;
        let noise = RasterImage::from_fn(224, 224, |_, _| std::array::from_fn(|_| rng.random()))?;
        let (a, b) = (information_ratio(&flat)?, information_ratio(&noise)?);
        sizes_ok &= a.s_u == 150_528 && b.s_u == 150_528;
        if a.ir < b.ir {
            ordered += 1;
        }
    }
    Ok((sizes_ok && ordered == 100, format!("s_u == 150528 on all patches: {sizes_ok}, constant < noise on {ordered}/100 pairs")))
}

struct Corpus {
    root: PathBuf,
    summary: CorpusSummary,
    synth_time: Duration,
}

fn make_corpus(root: &Path, spec: &SynthSpec) -> Result<Corpus, Box<dyn std::error::Error>> {
    let start = Instant::now();
    let summary = generate_corpus(spec, &root.join("corpus"))?;
    Ok(Corpus { root: root.to_path_buf(), summary, synth_time: start.elapsed() })
}

fn config(corpus: &Corpus, work: &str) -> PipelineConfig {
    PipelineConfig {
        manifest: corpus.summary.manifest_path.clone(),
        work_dir: corpus.root.join(work),
        downsample: 1,
        clustering: ["id3", "ph5", "ph10"].iter().map(|s| s.parse().expect("valid method")).collect(),
        fusion: vec![FusionMethod::Vote, FusionMethod::Svm],
        ..Default::default()
    }
}

/// Time spent in the named stages of the shared run.
fn ph5_seconds(timings: &[StageTiming], stages: &[&str]) -> f64 {
    timings.iter().filter(|t| stages.contains(&t.stage.as_str())).map(|t| t.seconds).sum()
}

struct Shared {
    corpus: Corpus,
    report: RunReport,
    timings: Vec<StageTiming>,
    run_time: Duration,
}

fn end_to_end(shared: &Option<Shared>) -> Check {
    let s = shared.as_ref().ok_or("pipeline run failed")?;
    let acc = |label: &str| s.report.result(label).and_then(|r| r.metrics.cluster.as_ref()).map(|m| m.accuracy);
    let labels = ["ID3-Vote", "ID3-SVM", "Ph5-Vote", "Ph5-SVM", "Ph10-Vote", "Ph10-SVM"];
    let complete = labels.iter().all(|l| acc(l).is_some());
    let ph5 = acc("Ph5-SVM").unwrap_or(f64::NAN);
    let id3 = acc("ID3-Vote").unwrap_or(f64::NAN);
    let summary: Vec<String> = labels.iter().map(|l| format!("{l} {:.2}", acc(l).unwrap_or(f64::NAN))).collect();
    Ok((
        complete && ph5 >= 0.9 && ph5 >= id3,
        format!("slide accuracy {}; synthesis {:.0} s, run {:.0} s", summary.join(", "), s.corpus.synth_time.as_secs_f64(), s.run_time.as_secs_f64()),
    ))
}

/// Maps each Ph5 cluster to the planted phenotype most of its tiles carry.
fn ph5_labels(s: &Shared) -> Result<(Vec<usize>, Vec<usize>, BTreeMap<usize, usize>), Box<dyn std::error::Error>> {
    let truth: BTreeMap<(String, usize, usize), usize> =
        s.corpus.summary.sidecar.iter().map(|r| ((r.slide_id.clone(), r.grid_x, r.grid_y), r.true_phenotype)).collect();
    let mut p = Pipeline::open(&config(&s.corpus, "work"))?;
    let (mut found, mut planted) = (Vec::new(), Vec::new());
    for (slide_id, gx, gy, c) in p.cluster_cells(ClusteringMethod::Phenotype(5))? {
        found.push(c);
        planted.push(*truth.get(&(slide_id, gx, gy)).ok_or("tile missing from sidecar")?);
    }
    let mut votes: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&c, &t) in found.iter().zip(&planted) {
        *votes.entry(c).or_default().entry(t).or_default() += 1;
    }
    let majority = votes.into_iter().map(|(c, v)| (c, v.into_iter().max_by_key(|&(_, n)| n).map_or(0, |(t, _)| t))).collect();
    Ok((found, planted, majority))
}

fn phenotype_recovery(shared: &Option<Shared>) -> (Check, Duration) {
    let Some(s) = shared.as_ref() else {
        return (Err("pipeline run failed".into()), Duration::ZERO);
    };
    let start = Instant::now();
    let out = (|| -> Check {
        let (found, planted, _) = ph5_labels(s)?;
        let ari = adjusted_rand_index(&found, &planted)?;
        Ok((ari > 0.9, format!("Ph5 adjusted Rand index {ari:.4} over {} tiles", found.len())))
    })();
    let upstream = ph5_seconds(&s.timings, &["normalize", "tile", "features", "cluster:ph5"]);
    (out, s.corpus.synth_time + Duration::from_secs_f64(upstream) + start.elapsed())
}

fn selection(shared: &Option<Shared>, null_root: &Path) -> (Check, Duration) {
    let Some(s) = shared.as_ref() else {
        return (Err("pipeline run failed".into()), Duration::ZERO);
    };
    let start = Instant::now();
    let out = (|| -> Check {
        let (_, _, majority) = ph5_labels(s)?;
        let planted = SynthSpec::default().signal_phenotype;
        let expected: Vec<usize> = majority.iter().filter(|&(_, &t)| t == planted).map(|(&c, _)| c).collect();
        let ph5 = s.report.result("Ph5-SVM").ok_or("no Ph5 result")?;
        let exact = !ph5.selection.fallback && ph5.selection.cluster_ids == expected;

        let null = make_corpus(null_root, &SynthSpec { signal_strength: 0.0, ..Default::default() })?;
        let mut cfg = config(&null, "work");
        cfg.fusion = vec![FusionMethod::Vote];
        run_pipeline(&cfg, StageName::Metrics)?;
        let report = RunReport::read(&cfg.work_dir.join("report.json"))?;
        let mut breaches = Vec::new();
        let mut checked = 0;
        for r in &report.results {
            for t in &r.training {
                if t.n_val == 0 {
                    continue;
                }
                checked += 1;
                let bound = 0.5 + 3.0 * (0.25 / t.n_val as f64).sqrt();
                if t.validation_accuracy > bound {
                    breaches.push(format!("{} cluster {} {:.3} > {:.3}", r.clustering, t.cluster_id, t.validation_accuracy, bound));
                }
            }
        }
        Ok((
            exact && breaches.is_empty(),
            format!(
                "Ph5 selected {:?}, planted phenotype cluster {:?}; null corpus: {} of {checked} clusters above 0.5 + 3 sigma{}",
                ph5.selection.cluster_ids,
                expected,
                breaches.len(),
                if breaches.is_empty() { String::new() } else { format!(" ({})", breaches.join(", ")) }
            ),
        ))
    })();
    let upstream = ph5_seconds(&s.timings, &["normalize", "tile", "features", "cluster:ph5", "train:ph5", "select:ph5"]);
    (out, s.corpus.synth_time + Duration::from_secs_f64(upstream) + start.elapsed())
}

fn determinism(shared: &Option<Shared>) -> Check {
    let s = shared.as_ref().ok_or("pipeline run failed")?;
    let cfg = config(&s.corpus, "work");
    // Same config means the same work directory, so the first one moves aside.
    std::fs::rename(&cfg.work_dir, s.corpus.root.join("work-first"))?;
    let fresh = run_pipeline(&cfg, StageName::Metrics)?;
    let second = fresh.report.ok_or("no report")?;
    let identical = second.canonical_json()? == s.report.canonical_json()? && second.report_hash == s.report.report_hash;

    let again = run_pipeline(&cfg, StageName::Metrics)?;
    let cached = again.report.ok_or("no report")?;
    let cached_same = cached.report_hash == s.report.report_hash;
    let all_hits = again.timings.iter().filter(|t| !t.stage.starts_with("metrics")).all(|t| t.cache_hit);
    Ok((
        identical && cached_same && all_hits,
        format!(
            "fresh rerun identical: {identical}, cached rerun identical: {cached_same}, cached stages all hit: {all_hits}; report {}",
            &s.report.report_hash[..16]
        ),
    ))
}

fn main() {
    let mut lines = vec![
        run(1, "colour round trip", Some(Duration::from_secs(1)), color_round_trip),
        run(2, "white point", Some(Duration::from_secs(1)), white_point),
        run(3, "k-means oracle", Some(Duration::from_secs(10)), kmeans_oracle),
        run(4, "PCA oracle", Some(Duration::from_secs(60)), pca_oracle),
        run(5, "gradient check", Some(Duration::from_secs(10)), gradient_check),
        run(6, "information ratio", Some(Duration::from_secs(30)), information_ratio_check),
    ];

    let dir = tempfile::tempdir().expect("temporary directory");
    let start = Instant::now();
    let shared = (|| -> Result<Shared, Box<dyn std::error::Error>> {
        let corpus = make_corpus(&dir.path().join("signal"), &SynthSpec::default())?;
        let run_start = Instant::now();
        let out = run_pipeline(&config(&corpus, "work"), StageName::Metrics)?;
        Ok(Shared { report: out.report.ok_or("no report")?, timings: out.timings, run_time: run_start.elapsed(), corpus })
    })();
    let total = start.elapsed();

    let (shared, setup_error) = match shared {
        Ok(s) => (Some(s), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let (c7, t7) = phenotype_recovery(&shared);
    lines.push(finish(7, "phenotype recovery", Some(Duration::from_secs(300)), c7, t7));
    let (c8, t8) = selection(&shared, &dir.path().join("null"));
    lines.push(finish(8, "discriminative selection", Some(Duration::from_secs(300)), c8, t8));
    let c9 = match &setup_error {
        Some(e) => Err(e.clone().into()),
        None => end_to_end(&shared),
    };
    lines.push(finish(9, "end-to-end six configurations", Some(Duration::from_secs(1200)), c9, total));
    lines.push(run(10, "determinism", Some(Duration::from_secs(2 * 1200)), || determinism(&shared)));

    let failed: Vec<u8> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", lines.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
