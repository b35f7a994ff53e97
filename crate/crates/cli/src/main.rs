//! `bubblesplat`: synthetic data, two-stage reconstruction, meshing,
//! velocities, evaluation and plots from the command line.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Default output root when `--out` is omitted.
pub const OUT_ENV: &str = "BUBBLESPLAT_OUT";

#[derive(Parser, Debug)]
#[command(name = "bubblesplat", version, about = "Sparse-view reconstruction of rising bubbles")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the seed of the config or of the synthetic scene.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// -v for progress, -vv for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Print the annotated default configuration and exit.
    #[arg(long)]
    print_default_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with ground truth.
    GenSynthetic(GenArgs),
    /// Stage 1: fit the input views frame by frame.
    Reconstruct(ReconstructArgs),
    /// Render the stage-1 sequence from orbiting novel cameras.
    RenderOrbit(RenderOrbitArgs),
    /// Turn rough novel-view videos into refined ones.
    Refine(RefineArgs),
    /// Stage 2: refit with the refined novel views as extra supervision.
    ReconstructStage2(Stage2Args),
    /// Extract a triangle mesh of one frame.
    ExtractMesh(MeshArgs),
    /// Per-surfel and per-bubble velocities of a checkpoint.
    EstimateVelocity(VelocityArgs),
    /// Score a checkpoint (or rendered images) against ground truth.
    Evaluate(EvaluateArgs),
    /// Velocity curves as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Scene description (TOML); defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Camera file; `<data>/cameras.json` when omitted.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderOrbitArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input cameras; `cameras.json` beside the checkpoint when omitted.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// `config.toml` beside the checkpoint when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    pub rough: PathBuf,
    /// identity, denoise (gaussian_denoise) or external.
    #[arg(long, default_value = "identity")]
    pub hook: String,
    /// Frames produced by an external refiner (`views/<s>/frame_<t>.png`).
    #[arg(long)]
    pub external_dir: Option<PathBuf>,
    /// One strength for every view instead of the per-view defaults.
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Stage2Args {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub refined: PathBuf,
    /// The input dataset the checkpoint was fitted to.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// `config.toml` beside the checkpoint when omitted. Novel-view weights
    /// come from here, not from the refined manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MeshArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    /// Drop surfels below this opacity before building the field.
    #[arg(long, default_value_t = 0.1)]
    pub min_opacity: f64,
    /// Cameras used to orient unbound surfels; `cameras.json` beside the
    /// checkpoint when present.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// `.obj` or `.ply`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VelocityArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// A checkpoint, or a dataset-layout directory of rendered images.
    #[arg(long)]
    pub pred: PathBuf,
    /// Synthetic dataset root (with `gt/`), or a dataset-layout directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// Metrics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub velocity_csv: PathBuf,
    /// Ground-truth series drawn dashed for comparison.
    #[arg(long)]
    pub gt_csv: Option<PathBuf>,
    /// Frame interval; the x axis is in seconds when given.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("ERROR:usage: {first}");
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("ERROR:usage: --threads must be at least 1");
            return ExitCode::from(2);
        }
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if cli.print_default_config {
        print!("{}", bubblesplat::config::DEFAULT_CONFIG_TOML);
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("ERROR:usage: a subcommand is required (see --help)");
        return ExitCode::from(2);
    };
    let seed = cli.seed;
    let result = match command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&a, seed),
        Command::Reconstruct(a) => commands::reconstruct(&a, seed),
        Command::RenderOrbit(a) => commands::render_orbit(&a),
        Command::Refine(a) => commands::refine(&a),
        Command::ReconstructStage2(a) => commands::reconstruct_stage2(&a, seed),
        Command::ExtractMesh(a) => commands::extract_mesh(&a),
        Command::EstimateVelocity(a) => commands::estimate_velocity(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Plot(a) => commands::plot(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("ERROR:{}: {msg}", e.code());
            ExitCode::from(3)
        }
    }
}
