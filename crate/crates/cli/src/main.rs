use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use nerfslam::config::{apply_overlay, Profile, RunConfig};
use nerfslam::data::{generate_synthetic, read_trajectory, write_tum, SceneSpec, ASSOCIATION_MAX_DT};
use nerfslam::eval::TrajectoryPair;
use nerfslam::slam::{prepare, run};

mod plot;

/// Exit status for a rejected configuration.
const EXIT_CONFIG: u8 = 2;
/// Exit status for unreadable or unusable input data.
const EXIT_DATA: u8 = 3;
/// Exit status for failures while computing or writing results.
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "nerfslam", version, about = "Dense RGB-D SLAM on a hash-grid radiance field")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track and map a sequence, writing trajectory, metrics, diagnostics and a checkpoint.
    Run(RunArgs),
    /// Generate a synthetic RGB-D sequence in TUM layout.
    Synth(SynthArgs),
    /// ATE between two TUM trajectory files.
    Eval(EvalArgs),
    /// SVG trajectory overlays and loss curves.
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON overlay on top of the selected profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset to start from (desk, tum, scannet, replica).
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for ray batches.
    #[arg(long)]
    workers: Option<usize>,
    /// Let the gradient reduction follow the worker count (not reproducible).
    #[arg(long)]
    fast: bool,
    /// Process only the first N frames.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description in JSON, overlaid on the default desk scene.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Noise seed of the scene.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated trajectory (TUM format).
    #[arg(long)]
    est: PathBuf,
    /// Reference trajectory (TUM format).
    #[arg(long)]
    gt: PathBuf,
    /// Largest timestamp difference for a pair, seconds.
    #[arg(long, default_value_t = ASSOCIATION_MAX_DT)]
    max_dt: f64,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    out: PathBuf,
    /// Diagnostics CSV written by `run`.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Estimated trajectory, drawn in red.
    #[arg(long)]
    est: Option<PathBuf>,
    /// Ground-truth trajectory, drawn in green.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Draw the estimate as is instead of rigidly aligned to the ground truth.
    #[arg(long)]
    no_align: bool,
}

/// An error tagged with the exit status it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CliResult<T> = Result<T, Failure>;

trait Classify<T> {
    fn code(self, code: u8) -> CliResult<T>;
    /// Uses the library error kind to choose between config, data and `fallback`.
    fn classify(self, fallback: u8) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn code(self, code: u8) -> CliResult<T> {
        self.map_err(|e| Failure { code, err: e.into() })
    }

    fn classify(self, fallback: u8) -> CliResult<T> {
        self.map_err(|e| {
            let err: anyhow::Error = e.into();
            let code = match err.downcast_ref::<nerfslam::Error>() {
                Some(nerfslam::Error::Config(_)) => EXIT_CONFIG,
                Some(
                    nerfslam::Error::Dataset(_)
                    | nerfslam::Error::Parse { .. }
                    | nerfslam::Error::Image { .. }
                    | nerfslam::Error::Generation(_)
                    | nerfslam::Error::Alignment(_),
                ) => EXIT_DATA,
                _ => fallback,
            };
            Failure { code, err }
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn set_workers(workers: Option<usize>) -> CliResult<()> {
    if let Some(n) = workers.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")
            .code(EXIT_RUNTIME)?;
    }
    Ok(())
}

fn read_json(path: &Path) -> CliResult<serde_json::Value> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .code(EXIT_CONFIG)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .code(EXIT_CONFIG)
}

fn cmd_run(a: RunArgs) -> CliResult<()> {
    let profile = a.profile.as_deref().map(Profile::parse).transpose().code(EXIT_CONFIG)?;
    let overlay = match &a.config {
        Some(p) => read_json(p)?,
        None => serde_json::json!({}),
    };
    let mut cfg = RunConfig::from_overlay(&overlay, profile).code(EXIT_CONFIG)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if a.fast {
        cfg.deterministic = false;
    }
    if let Some(n) = a.frames {
        cfg.max_frames = Some(n);
    }
    if let Some(o) = a.out {
        cfg.output = Some(o);
    }
    let out = cfg
        .output
        .clone()
        .ok_or_else(|| anyhow!("no output directory: pass --out or set \"output\" in the config"))
        .code(EXIT_CONFIG)?;
    cfg.validate().code(EXIT_CONFIG)?;
    set_workers(Some(cfg.workers))?;

    let (cfg, seq) = prepare(&cfg).classify(EXIT_DATA)?;
    log::info!(
        "running {} frames ({}x{}) with the {} profile",
        seq.len(),
        seq.intrinsics.width,
        seq.intrinsics.height,
        cfg.profile.name()
    );
    let result = run(&cfg, &seq, Some(&out)).classify(EXIT_RUNTIME)?;
    result
        .write(&out)
        .with_context(|| format!("writing results to {}", out.display()))
        .code(EXIT_RUNTIME)?;
    println!("{}", serde_json::to_string_pretty(&result.metrics).code(EXIT_RUNTIME)?);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    set_workers(a.workers)?;
    let mut spec = match &a.spec {
        Some(p) => apply_overlay(&SceneSpec::default(), &read_json(p)?).code(EXIT_CONFIG)?,
        None => SceneSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.frames {
        spec.trajectory.frames = n;
    }
    spec.validate().code(EXIT_CONFIG)?;
    let seq = generate_synthetic(&spec).classify(EXIT_DATA)?;
    write_tum(&a.out, &seq)
        .with_context(|| format!("writing {}", a.out.display()))
        .code(EXIT_RUNTIME)?;
    println!("wrote {} frames to {}", seq.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let est = read_trajectory(&a.est).code(EXIT_DATA)?;
    let gt = read_trajectory(&a.gt).code(EXIT_DATA)?;
    let pair = TrajectoryPair::by_timestamp(&est, &gt, a.max_dt).code(EXIT_DATA)?;
    let ate = pair.ate().code(EXIT_DATA)?;
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "ate_rmse_cm": ate.rmse_cm,
        "pairs": ate.pairs,
    }))
    .code(EXIT_RUNTIME)?;
    if let Some(o) = &a.out {
        std::fs::write(o, format!("{text}\n"))
            .with_context(|| format!("writing {}", o.display()))
            .code(EXIT_RUNTIME)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> CliResult<()> {
    if a.diagnostics.is_none() && a.est.is_none() && a.gt.is_none() {
        return Err(anyhow!("nothing to plot: pass --diagnostics, --est or --gt")).code(EXIT_CONFIG);
    }
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .code(EXIT_RUNTIME)?;
    let mut written = Vec::new();
    if a.est.is_some() || a.gt.is_some() {
        let load = |p: &Option<PathBuf>| p.as_deref().map(read_trajectory).transpose();
        let est = load(&a.est).code(EXIT_DATA)?;
        let gt = load(&a.gt).code(EXIT_DATA)?;
        let svg = plot::trajectory_svg(est.as_deref(), gt.as_deref(), !a.no_align).code(EXIT_DATA)?;
        written.push(write_svg(&a.out, "trajectory.svg", &svg)?);
    }
    if let Some(d) = &a.diagnostics {
        let rows = plot::read_diagnostics(d).code(EXIT_DATA)?;
        for (name, svg) in plot::loss_svgs(&rows).code(EXIT_DATA)? {
            written.push(write_svg(&a.out, &name, &svg)?);
        }
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn write_svg(dir: &Path, name: &str, svg: &str) -> CliResult<PathBuf> {
    let p = dir.join(name);
    std::fs::write(&p, svg)
        .with_context(|| format!("writing {}", p.display()))
        .code(EXIT_RUNTIME)?;
    Ok(p)
}
