use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use splatinit::cli::{self, CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "splatinit", version, about = "Epipolar point initialization, anchor graphs, feature refinement and image losses")]
struct Args {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    sampson_threshold: Option<f64>,
    #[arg(long, global = true)]
    voxel_size: Option<f64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Report a finite-difference check of the attention gradients.
    #[arg(long, global = true)]
    check_grads: bool,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Triangulate matches into an ASCII PLY and a JSON summary.
    Triangulate { cameras: PathBuf, matches: PathBuf },
    /// Build the anchor graph and report its statistics.
    GraphStats { cameras: PathBuf, matches: PathBuf },
    /// Run the attention refiner and dump per-anchor features.
    RefineFeatures { cameras: PathBuf, matches: PathBuf },
    /// Compute the loss report for two images.
    Loss {
        image1: PathBuf,
        image2: PathBuf,
        #[arg(long)]
        scales: Option<PathBuf>,
    },
    /// Run triangulate, graph-stats and refine-features in sequence.
    Pipeline { cameras: PathBuf, matches: PathBuf },
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summaries serialize"));
}

fn run(args: Args) -> Result<(), CliError> {
    let base = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let config = base.apply(&Overrides {
        seed: args.seed,
        sampson_threshold: args.sampson_threshold,
        voxel_size: args.voxel_size,
        k: args.k,
    })?;
    let started = Instant::now();
    let name = match args.command {
        Command::Triangulate { cameras, matches } => {
            let bundle = cli::parse_scene(&cameras, &matches)?;
            print_json(&cli::cmd_triangulate(&bundle, &config, &args.out)?);
            "triangulate"
        }
        Command::GraphStats { cameras, matches } => {
            let bundle = cli::parse_scene(&cameras, &matches)?;
            print_json(&cli::cmd_graph_stats(&bundle, &config, &args.out)?);
            "graph-stats"
        }
        Command::RefineFeatures { cameras, matches } => {
            let bundle = cli::parse_scene(&cameras, &matches)?;
            print_json(&cli::cmd_refine_features(&bundle, &config, args.check_grads, &args.out)?);
            "refine-features"
        }
        Command::Loss { image1, image2, scales } => {
            print_json(&cli::cmd_loss(&image1, &image2, &config, scales.as_deref(), Some(&args.out))?);
            "loss"
        }
        Command::Pipeline { cameras, matches } => {
            let bundle = cli::parse_scene(&cameras, &matches)?;
            print_json(&cli::cmd_pipeline(&bundle, &config, args.check_grads, &args.out)?);
            "pipeline"
        }
    };
    eprintln!("timing: {name} {:.3} ms", started.elapsed().as_secs_f64() * 1e3);
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {message}", e.category());
            ExitCode::FAILURE
        }
    }
}
