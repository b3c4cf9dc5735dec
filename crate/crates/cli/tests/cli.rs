use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn slidesurv(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slidesurv")).args(args).current_dir(cwd).output().unwrap()
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn synth(dir: &Path) {
    let out = slidesurv(&["synth", "--out", "corpus", "--slides", "10", "--tiles-per-side", "5"], dir);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(dir.join("corpus/manifest.csv").exists());
    assert!(dir.join("corpus/pipeline.conf").exists());
}

#[test]
fn synth_run_overlay_table() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let conf = "corpus/pipeline.conf";

    let out = slidesurv(&["--config", conf, "--jobs", "1", "run"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let report = dir.path().join("corpus/work/report.json");
    assert!(report.exists());
    assert!(text(&out).contains("Ph5-SVM"));

    let again = slidesurv(&["--config", conf, "run"], dir.path());
    assert_eq!(again.status.code(), Some(0));
    assert!(text(&again).contains("(cached)"));

    let out = slidesurv(&["--config", conf, "overlay", "--slide", "slide_000", "--out", "overlay.png"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(dir.path().join("overlay.png").exists());

    let out = slidesurv(&["--config", conf, "overlay", "--slide", "missing", "--out", "x.png"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));

    let out = slidesurv(&["table", report.to_str().unwrap(), "--csv", "table.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(table.lines().any(|l| l.starts_with("Ph5-SVM")), "{table}");
    let csv = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert!(csv.starts_with("method,patch_accuracy,patch_f1,cluster_accuracy,cluster_f1\n"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = slidesurv(&["run"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));

    fs::write(dir.path().join("bad.conf"), "manifest = m.csv\nwork_dir = w\nno_such_key = 1\n").unwrap();
    let out = slidesurv(&["--config", "bad.conf", "run"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    assert!(text(&out).contains("no_such_key"));
}

#[test]
fn stage_failure_exits_with_one_and_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    fs::write(dir.path().join("corpus/slides/slide_002.png"), b"broken").unwrap();
    let out = slidesurv(&["--config", "corpus/pipeline.conf", "normalize"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    assert!(text(&out).contains("normalize"));
}
