use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use morphospace::synthetic::{FamilyParams, TemplateKind};
use morphospace_cli::config::{Bandwidth, PipelineConfig, Stage};
use morphospace_cli::{fixtures, run_pipeline, CliError, EXIT_CONFIG};

#[derive(Parser)]
#[command(
    name = "morphospace",
    version,
    about = "Shape collection analysis with horizontal diffusion maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, validate and area-normalize the input meshes.
    Ingest(RunArgs),
    /// Farthest-point sample every mesh.
    Sample(RunArgs),
    /// Pairwise continuous Procrustes distances and maps.
    Cpdist(RunArgs),
    /// Align all meshes to a common frame along the minimum spanning tree.
    Align(RunArgs),
    /// Diffusion maps and diffusion distances on the collection.
    Diffuse(RunArgs),
    /// Horizontal diffusion map embedding and base diffusion distances.
    Hdm(RunArgs),
    /// Consistent segmentation across the collection.
    Segment(RunArgs),
    /// Iterative correspondence refinement and joint landmarks.
    Refine(RunArgs),
    /// Gaussian-process landmarks per mesh.
    Landmarks(RunArgs),
    /// Curvature energy per mesh.
    Ariadne(RunArgs),
    /// Every stage.
    Pipeline(RunArgs),
    /// Write a synthetic deformed family.
    Fixtures(FixtureArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    /// Tune both bandwidths and the diffusion time from the data.
    #[arg(long, conflicts_with_all = ["tau1", "tau2"])]
    auto_bandwidth: bool,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    embed_dims: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long, default_value = "sphere")]
    kind: String,
    #[arg(long, default_value_t = 5)]
    members: usize,
    #[arg(long, default_value_t = 0.05)]
    amplitude: f64,
    #[arg(long, default_value_t = 3)]
    degree: usize,
    #[arg(long, default_value_t = 0)]
    clusters: usize,
    #[arg(long, default_value_t = 0.25)]
    spread: f64,
    #[arg(long, default_value_t = 3)]
    resolution: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

impl RunArgs {
    fn config(&self, stages: Vec<Stage>) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = &self.input {
            cfg.input_dir = v.clone();
        }
        if let Some(v) = &self.output {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.n_samples {
            cfg.sampling.n_samples = v;
        }
        if let Some(v) = self.tau1 {
            cfg.hdm.tau1 = Bandwidth::Fixed(v);
        }
        if let Some(v) = self.tau2 {
            cfg.hdm.tau2 = Bandwidth::Fixed(v);
        }
        if self.auto_bandwidth {
            cfg.hdm.tau1 = Bandwidth::Auto;
            cfg.hdm.tau2 = Bandwidth::Auto;
            cfg.diffusion.t = Bandwidth::Auto;
        }
        if let Some(v) = self.gamma {
            cfg.hdm.gamma = v;
            cfg.diffusion.gamma = v;
        }
        if let Some(v) = self.clusters {
            cfg.hdm.clusters = v;
        }
        if let Some(v) = self.embed_dims {
            cfg.hdm.embed_dims = v;
            cfg.diffusion.embed_dims = v;
        }
        if !stages.is_empty() {
            cfg.stages = stages;
        }
        Ok(cfg)
    }
}

fn set_jobs(jobs: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<(), CliError> {
    let (args, stages) = match command {
        Command::Fixtures(f) => {
            let kind: TemplateKind = f
                .kind
                .parse()
                .map_err(|e: morphospace::Error| CliError::Config(e.to_string()))?;
            let params = FamilyParams {
                kind,
                members: f.members,
                amplitude: f.amplitude,
                degree: f.degree,
                clusters: f.clusters,
                cluster_spread: f.spread,
                seed: f.seed,
            };
            let manifest = fixtures::generate(&params, f.resolution, &f.output)?;
            log::info!("wrote {} members to {}", manifest.members.len(), f.output.display());
            return Ok(());
        }
        Command::Pipeline(a) => (a, vec![]),
        Command::Ingest(a) => (a, vec![Stage::Ingest]),
        Command::Sample(a) => (a, vec![Stage::Sample]),
        Command::Cpdist(a) => (a, vec![Stage::Cpdist]),
        Command::Align(a) => (a, vec![Stage::Align]),
        Command::Diffuse(a) => (a, vec![Stage::Diffuse]),
        Command::Hdm(a) => (a, vec![Stage::Hdm]),
        Command::Segment(a) => (a, vec![Stage::Segment]),
        Command::Refine(a) => (a, vec![Stage::Refine]),
        Command::Landmarks(a) => (a, vec![Stage::Landmarks]),
        Command::Ariadne(a) => (a, vec![Stage::Ariadne]),
    };
    let cfg = args.config(stages)?;
    set_jobs(args.jobs)?;
    let manifest = run_pipeline(&cfg)?;
    for r in &manifest.stages {
        log::info!(
            "{}: {}",
            r.stage,
            if r.cached {
                "cached".to_string()
            } else {
                format!("{:.2}s", r.seconds)
            }
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Config(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
