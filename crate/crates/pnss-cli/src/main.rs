//! `pnss` — principal nested shape space analysis of landmark trajectories.
//!
//! Subcommands cover the pipeline stage by stage (`gpa`, `pca`, `pnss`,
//! `cluster`, `transitions`, `arcs`), end to end (`pipeline`), plus data
//! utilities (`ingest-check`, `thin`, `synthesize`) and bulk scoring of full
//! trajectories through a fitted model (`score`).
//!
//! Exit codes: 0 success, 2 validation error, 3 numerical non-convergence,
//! 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pnss_core::error::Error;
use pnss_core::io;
use pnss_core::pipeline::{run_pipeline_through, score_stream, thin, PipelineConfig, Stage};
use pnss_core::synth::synthesize;

#[derive(Parser)]
#[command(name = "pnss", version, about = "Principal nested shape space analysis")]
struct Cli {
    /// TOML config file; CLI flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for the synthetic generator.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataDirArg {
    /// Directory of per-run .traj files.
    data_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a trajectory directory and report its shape.
    IngestCheck(DataDirArg),
    /// Thin every run to --count equally spaced frames and write the result.
    Thin {
        #[command(flatten)]
        data: DataDirArg,
        /// Frames to keep per run.
        #[arg(long)]
        count: usize,
    },
    /// Generate a synthetic state-hopping dataset with ground-truth labels.
    Synthesize {
        #[arg(long)]
        landmarks: Option<usize>,
        #[arg(long)]
        ambient_dim: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        states: Option<usize>,
        #[arg(long)]
        dwell: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Align all thinned frames by generalized Procrustes analysis.
    Gpa(PipelineArgs),
    /// Shape PCA of the aligned frames.
    Pca(PipelineArgs),
    /// Fit the full PNSS model and write scores and the model JSON.
    Pnss(PipelineArgs),
    /// Ward clustering of the embedded frames (sphere and PC space).
    Cluster(PipelineArgs),
    /// Transition matrices, equilibria and temporal clustering.
    Transitions(PipelineArgs),
    /// Principal arc coordinates around the PNSS mean.
    Arcs(PipelineArgs),
    /// The whole analysis end to end, including per-cluster refits.
    Pipeline(PipelineArgs),
    /// Stream-score every frame of a dataset through a fitted model.
    Score {
        #[command(flatten)]
        data: DataDirArg,
        /// model.json produced by `pnss pnss` or `pnss pipeline`.
        #[arg(long)]
        model: PathBuf,
        /// Leading PNSS components to emit.
        #[arg(long, default_value_t = 3)]
        components: usize,
    },
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    data: DataDirArg,
    /// Frames kept per run by thinning.
    #[arg(long)]
    thin: Option<usize>,
    /// Embedding dimension p (default: smallest p reaching the variance
    /// threshold).
    #[arg(long)]
    p: Option<usize>,
    /// Cumulative-variance fraction for the automatic choice of p.
    #[arg(long)]
    variance_threshold: Option<f64>,
    /// Number of shape states.
    #[arg(long)]
    k: Option<usize>,
    /// Number of temporal clusters of runs.
    #[arg(long)]
    k_tc: Option<usize>,
    /// Principal-arc interval multiplier.
    #[arg(long)]
    c: Option<f64>,
    /// Samples per arc (odd, ≥ 3).
    #[arg(long)]
    samples: Option<usize>,
    /// Leading PNSS components to sweep as arcs.
    #[arg(long)]
    components: Option<usize>,
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Stage { source, .. } => exit_code_for(source),
        Error::Convergence { .. } | Error::GpaConvergence { .. } | Error::NoUniqueEquilibrium(_) => 3,
        Error::Io(_) | Error::Serialize(_) => 4,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    Ok(config)
}

fn apply_pipeline_args(config: &mut PipelineConfig, args: &PipelineArgs) {
    if let Some(v) = args.thin {
        config.thin_count = v;
    }
    if args.p.is_some() {
        config.p = args.p;
    }
    if let Some(v) = args.variance_threshold {
        config.variance_threshold = v;
    }
    if let Some(v) = args.k {
        config.k_states = v;
    }
    if let Some(v) = args.k_tc {
        config.k_tc = v;
    }
    if let Some(v) = args.c {
        config.c = v;
    }
    if let Some(v) = args.samples {
        config.arc_samples = v;
    }
    if let Some(v) = args.components {
        config.arc_components = v;
    }
}

fn out_dir(config: &PipelineConfig) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from("pnss-out"))
}

fn run_stage(cli: &Cli, args: &PipelineArgs, through: Stage) -> Result<(), Error> {
    let mut config = load_config(cli)?;
    apply_pipeline_args(&mut config, args);
    config.validate()?;
    init_threads(config.threads);
    let dataset = io::ingest(&args.data.data_dir)?;
    let out = out_dir(&config);
    let summary = run_pipeline_through(&dataset, &config, &out, through)?;
    println!(
        "analyzed {} observations ({} runs × {} thinned frames)",
        summary.observations,
        dataset.runs.len(),
        summary.observations / dataset.runs.len()
    );
    if let Some(p) = summary.chosen_p {
        println!("embedding dimension p = {p}");
    }
    if !summary.cluster_sizes.is_empty() {
        println!("cluster sizes: {:?}", summary.cluster_sizes);
    }
    if let Some(diff) = summary.transition_mode_difference {
        println!("max |pooled − averaged| transition entry: {diff:.3e}");
    }
    if !summary.skipped_refits.is_empty() {
        println!(
            "skipped per-cluster refits (too few members): {:?}",
            summary.skipped_refits
        );
    }
    println!("wrote {} files to {}", summary.files.len(), out.display());
    Ok(())
}

fn init_threads(threads: usize) {
    if threads > 0 {
        // Ignore the error if a global pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn write_ground_truth(path: &Path, data: &pnss_core::synth::SyntheticDataset) -> Result<(), Error> {
    let mut csv = io::CsvWriter::create(path, &["run_id", "frame_index", "state"])?;
    for (run, labels) in data.dataset.runs.iter().zip(data.labels.iter()) {
        for (f, &state) in labels.iter().enumerate() {
            csv.row(&[
                run.run_id.as_str().into(),
                io::CsvField::UInt(f as u64 + 1),
                io::CsvField::UInt(state as u64),
            ])?;
        }
    }
    csv.finish()
}

fn real_main() -> Result<(), Error> {
    let cli = Cli::parse();
    match &cli.command {
        Command::IngestCheck(data) => {
            let dataset = io::ingest(&data.data_dir)?;
            println!(
                "{} runs × {} frames, k = {} landmarks in {} dimensions",
                dataset.runs.len(),
                dataset.frame_count(),
                dataset.landmarks(),
                dataset.ambient_dim()
            );
        }
        Command::Thin { data, count } => {
            let config = load_config(&cli)?;
            let dataset = io::ingest(&data.data_dir)?;
            let thinned = thin(&dataset, *count)?;
            let out = out_dir(&config);
            let paths = io::write_dataset(&out, &thinned)?;
            println!(
                "thinned {} runs to {} frames each; wrote {} files to {}",
                thinned.runs.len(),
                thinned.frame_count(),
                paths.len(),
                out.display()
            );
        }
        Command::Synthesize {
            landmarks,
            ambient_dim,
            runs,
            frames,
            states,
            dwell,
            noise,
        } => {
            let config = load_config(&cli)?;
            let mut spec = config.synthesize.clone().unwrap_or_default();
            // Seed precedence: --seed flag, then an explicit [synthesize]
            // seed, then the top-level config seed.
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            } else if config.synthesize.is_none() {
                spec.seed = config.seed;
            }
            if let Some(v) = landmarks {
                spec.landmarks = *v;
            }
            if let Some(v) = ambient_dim {
                spec.ambient_dim = *v;
            }
            if let Some(v) = runs {
                spec.runs = *v;
            }
            if let Some(v) = frames {
                spec.frames = *v;
            }
            if let Some(v) = states {
                spec.states = *v;
            }
            if let Some(v) = dwell {
                spec.dwell = *v;
            }
            if let Some(v) = noise {
                spec.noise = *v;
            }
            let data = synthesize(&spec)?;
            let out = out_dir(&config);
            io::write_dataset(&out, &data.dataset)?;
            write_ground_truth(&out.join("ground_truth.csv"), &data)?;
            println!(
                "synthesized {} runs × {} frames ({} states, seed {}) into {}",
                spec.runs,
                spec.frames,
                spec.states,
                spec.seed,
                out.display()
            );
        }
        Command::Gpa(args) => run_stage(&cli, args, Stage::Gpa)?,
        Command::Pca(args) => run_stage(&cli, args, Stage::Pca)?,
        Command::Pnss(args) => run_stage(&cli, args, Stage::Pns)?,
        Command::Cluster(args) => run_stage(&cli, args, Stage::Cluster)?,
        Command::Transitions(args) => run_stage(&cli, args, Stage::TemporalCluster)?,
        Command::Arcs(args) => run_stage(&cli, args, Stage::Arcs)?,
        Command::Pipeline(args) => run_stage(&cli, args, Stage::LAST)?,
        Command::Score {
            data,
            model,
            components,
        } => {
            let config = load_config(&cli)?;
            init_threads(config.threads);
            let json = io::read_model_json(model)?;
            let (mean, eigenvectors, pns) = json.to_scoring_parts()?;
            let out = out_dir(&config);
            std::fs::create_dir_all(&out)?;
            let out_path = out.join("all_scores.csv");
            let total = score_stream(
                &mean,
                &eigenvectors,
                &pns,
                &data.data_dir,
                &out_path,
                *components,
            )?;
            println!("scored {total} frames into {}", out_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code_for(&e))
        }
    }
}
