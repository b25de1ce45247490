use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use da_core::analysis::{SweepParam, TransferReport};
use da_core::harness::{
    self, cmd_attack, cmd_report, cmd_sweep, cmd_train, AttackParams, ExperimentConfig, NoiseChoice, SweepConfig,
};
use da_core::net::{BlobsSpec, Dataset, RingsSpec};
use da_core::{Error, Result};

#[derive(Parser)]
#[command(name = "da-attack", version, about = "Direction-aggregated transfer attacks on small classifiers")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or import a dataset file.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Train the zoo described by a config and write the manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Craft adversarial examples on one source and evaluate every target.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Model id, or `ensemble` for all normal models with equal weights.
        #[arg(long)]
        source: String,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Run the configured sweeps, or a single one given by --param.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// N, sigma, epsilon, T or alpha.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated grid; epsilon and alpha follow --unit.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Source model ids (default: the first normal model).
        #[arg(long, value_delimiter = ',')]
        sources: Vec<String>,
        #[command(flatten)]
        params: ParamArgs,
    },
    /// Merge every artifact of a run into report.json and report.csv.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
    /// Dataset, training, attacks, sweeps and report in one go.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Generate a synthetic dataset.
    Gen {
        kind: GenKind,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        hw: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long)]
        seed: u64,
        /// Rings: pixel noise std.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Rings: peak height over a mid-grey background.
        #[arg(long, default_value_t = 1.0)]
        contrast: f64,
        /// Rings: maximum centre offset as a fraction of the side.
        #[arg(long, default_value_t = 0.08)]
        jitter: f64,
        /// Blobs: per-pixel spread around the class centre.
        #[arg(long, default_value_t = 0.1)]
        spread: f64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Validate an existing dataset file, optionally copying it.
    Import {
        path: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Rings,
    Blobs,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Unit {
    /// Pixel values in [0, 1].
    Pixel,
    /// The 0-255 scale; epsilon and alpha are divided by 255.
    #[value(name = "255")]
    Byte,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Gaussian,
    Uniform,
}

#[derive(Args)]
struct ParamArgs {
    /// Attack preset, e.g. da-mi-fgsm.
    #[arg(long, default_value = "da-mi-fgsm")]
    attack: String,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Unit of --epsilon, --alpha and epsilon/alpha sweep grids.
    #[arg(long, value_enum, default_value = "pixel")]
    unit: Unit,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// N; aggregation sums N + 1 draws.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    /// Half-width of uniform noise.
    #[arg(long)]
    noise_bound: Option<f64>,
    #[arg(long)]
    dim_prob: Option<f64>,
    #[arg(long)]
    dim_min_scale: Option<f64>,
    #[arg(long)]
    kernel_radius: Option<usize>,
    /// Use the noise-free point as the first aggregation draw.
    #[arg(long)]
    clean_anchor: bool,
    /// Overrides the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl ParamArgs {
    fn scale(&self) -> f64 {
        if self.unit == Unit::Byte {
            1.0 / 255.0
        } else {
            1.0
        }
    }

    fn params(&self) -> AttackParams {
        AttackParams {
            epsilon: self.epsilon.map(|e| e * self.scale()),
            iterations: self.iters,
            alpha: self.alpha.map(|a| a * self.scale()),
            mu: self.mu,
            samples: self.samples,
            noise: self.noise.map(|n| match n {
                NoiseArg::Gaussian => NoiseChoice::Gaussian,
                NoiseArg::Uniform => NoiseChoice::Uniform,
            }),
            sigma: self.sigma,
            noise_bound: self.noise_bound,
            dim_prob: self.dim_prob,
            dim_min_scale: self.dim_min_scale,
            kernel_radius: self.kernel_radius,
            clean_anchor: self.clean_anchor.then_some(true),
        }
    }
}

fn load(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_report(report: &TransferReport) {
    print!("{}", report.to_csv());
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
    }
    match cli.command {
        Command::Dataset { action } => match action {
            DatasetAction::Gen { kind, n, hw, classes, seed, noise, contrast, jitter, spread, out } => {
                let data = match kind {
                    GenKind::Rings => RingsSpec { n, classes, hw, noise, contrast, jitter }.generate(seed)?,
                    GenKind::Blobs => BlobsSpec { n, classes, hw, spread }.generate(seed)?,
                };
                data.save(&out)?;
                println!("wrote {} images of {:?} to {}", data.len(), data.image_shape(), out.display());
            }
            DatasetAction::Import { path, out } => {
                let data = harness::import_dataset(&path)?;
                println!("{}: {} images of {:?}, {} classes", path.display(), data.len(), data.image_shape(), data.classes());
                if let Some(out) = out {
                    Dataset::save(&data, &out)?;
                }
            }
        },
        Command::Train { config } => {
            let (_, manifest) = cmd_train(&load(&config, None)?)?;
            for m in &manifest.models {
                println!("{}\tclean {:.4}\tpgd {:.4}", m.id, m.clean_accuracy, m.pgd_accuracy);
            }
        }
        Command::Attack { config, source, params } => {
            let cfg = load(&config, params.seed)?;
            print_report(&cmd_attack(&cfg, &params.attack, &source, &params.params())?);
        }
        Command::Sweep { config, param, grid, sources, params } => {
            let cfg = load(&config, params.seed)?;
            let sweeps = match param {
                Some(p) => {
                    let parameter = SweepParam::parse(&p)?;
                    let scale = match parameter {
                        SweepParam::Epsilon | SweepParam::Alpha => params.scale(),
                        _ => 1.0,
                    };
                    vec![SweepConfig {
                        parameter: p,
                        grid: grid.map(|g| g.into_iter().map(|v| v * scale).collect()),
                        attack: params.attack.clone(),
                        sources,
                        params: AttackParams::default(),
                    }]
                }
                None => cfg.sweeps.clone(),
            };
            for curve in cmd_sweep(&cfg, &sweeps, &params.params())? {
                for point in &curve.points {
                    println!(
                        "{}\t{}={}\tmean black-box {:.2}",
                        curve.attack,
                        curve.parameter.name(),
                        point.value,
                        point.mean_black_box().unwrap_or(f64::NAN)
                    );
                }
            }
        }
        Command::Report { config } => print_report(&cmd_report(&load(&config, None)?)?),
        Command::Run { config } => {
            let cfg = load(&config, None)?;
            let dir = harness::run_pipeline(&cfg)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
