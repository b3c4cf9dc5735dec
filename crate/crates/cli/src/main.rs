use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slidesurv::imagecore::{save_image, DEFAULT_DEFLATE_LEVEL};
use slidesurv::pipeline::{collect_rows, render_csv, render_overlay, render_text, ClusteringMethod, Pipeline, PipelineConfig, RunReport, StageName};
use slidesurv::synthdata::{generate_corpus, SynthSpec};
use slidesurv::{Error, Result};

/// Whole-slide survival prediction pipeline.
#[derive(Debug, Parser)]
#[command(name = "slidesurv", version)]
struct Cli {
    /// Pipeline configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores. Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted phenotypes and signal.
    Synth(SynthArgs),
    /// Chromatic normalization of every slide.
    Normalize,
    /// Normalize, then cut slides into patches.
    Tile,
    /// Run up to patch clustering.
    Cluster,
    /// Run up to classifier training and cluster selection.
    Train,
    /// Run up to slide-level fusion.
    Fuse,
    /// Run every stage and write the report.
    Run,
    /// Render a slide next to its cluster map.
    Overlay(OverlayArgs),
    /// Summarize run reports as a results table.
    Table(TableArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthSpec::default().n_slides)]
    slides: usize,
    #[arg(long, default_value_t = SynthSpec::default().tiles_per_side)]
    tiles_per_side: usize,
    /// Pixel replication factor; the generated config downsamples by it.
    #[arg(long, default_value_t = SynthSpec::default().scale)]
    scale: usize,
    #[arg(long, default_value_t = SynthSpec::default().signal_strength)]
    signal_strength: f64,
    #[arg(long, default_value_t = SynthSpec::default().tint)]
    tint: f64,
}

#[derive(Debug, Args)]
struct OverlayArgs {
    #[arg(long)]
    slide: String,
    /// Clustering to show, e.g. id3, ph5 or ph10.
    #[arg(long, default_value = "ph5")]
    method: String,
    #[arg(long)]
    out: PathBuf,
    /// Shrink factor for the rendered slide; must divide 224.
    #[arg(long, default_value_t = 4)]
    shrink: usize,
}

#[derive(Debug, Args)]
struct TableArgs {
    /// Report files written by `run`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Also write the table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --config <file>".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_slides: args.slides,
        tiles_per_side: args.tiles_per_side,
        scale: args.scale,
        signal_strength: args.signal_strength,
        tint: args.tint,
        seed: cli.seed.unwrap_or(0),
        ..Default::default()
    };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let summary = generate_corpus(&spec, &args.out)?;
    let cfg = PipelineConfig {
        manifest: PathBuf::from("manifest.csv"),
        work_dir: PathBuf::from("work"),
        downsample: spec.scale,
        ..Default::default()
    };
    let conf = args.out.join("pipeline.conf");
    write_file(&conf, &cfg.to_text())?;
    println!(
        "wrote {} slides to {} (manifest {}, config {})",
        summary.entries.len(),
        args.out.display(),
        summary.manifest_path.display(),
        conf.display()
    );
    Ok(())
}

fn stages(cli: &Cli, until: StageName) -> Result<()> {
    let cfg = load_config(cli)?;
    let mut pipeline = Pipeline::open(&cfg)?;
    let report = pipeline.run(until)?;
    for t in pipeline.timings() {
        println!("{:<28} {:>8.2}s{}", t.stage, t.seconds, if t.cache_hit { "  (cached)" } else { "" });
    }
    if let Some(report) = report {
        println!("\n{}", render_text(&collect_rows(std::slice::from_ref(&report))));
        println!("report: {}", cfg.work_dir.join(slidesurv::pipeline::REPORT_FILE).display());
        println!("report hash: {}", report.report_hash);
    }
    Ok(())
}

fn overlay(cli: &Cli, args: &OverlayArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let method: ClusteringMethod = args.method.parse()?;
    let mut pipeline = Pipeline::open(&cfg)?;
    let (slide, cells) = pipeline.slide_clusters(method, &args.slide)?;
    let image = render_overlay(&slide, &cells, args.shrink)?;
    save_image(&image, &args.out, DEFAULT_DEFLATE_LEVEL)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn table(args: &TableArgs) -> Result<()> {
    let reports = args.reports.iter().map(|p| RunReport::read(p)).collect::<Result<Vec<_>>>()?;
    let rows = collect_rows(&reports);
    print!("{}", render_text(&rows));
    if let Some(path) = &args.csv {
        write_file(path, &render_csv(&rows))?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {jobs} worker threads: {e}")))?;
    }
    match &cli.command {
        Command::Synth(args) => synth(cli, args),
        Command::Normalize => stages(cli, StageName::Normalize),
        Command::Tile => stages(cli, StageName::Tile),
        Command::Cluster => stages(cli, StageName::Cluster),
        Command::Train => stages(cli, StageName::Select),
        Command::Fuse => stages(cli, StageName::Fuse),
        Command::Run => stages(cli, StageName::Metrics),
        Command::Overlay(args) => overlay(cli, args),
        Command::Table(args) => table(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
