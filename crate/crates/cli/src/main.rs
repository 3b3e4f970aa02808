use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kronfisher::OptimizerKind;
use kronfisher_cli::data::{gen_gaussian_blobs, gen_synthetic_curves, write_idx_images};
use kronfisher_cli::experiment::write_probe;
use kronfisher_cli::grid::write_grid;
use kronfisher_cli::{gridsearch, run_experiment, run_probe, Error, ExperimentConfig, Overrides, Preset, Result};

#[derive(Parser)]
#[command(name = "kronfisher", version, about = "Kronecker-factored natural gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an autoencoder and write metrics, timings and plots.
    Train {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        flags: Flags,
    },
    /// Track Fisher approximation errors of every method on one layer.
    ProbeFim {
        #[command(flatten)]
        source: Source,
        /// 1-based layer index.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        synthetic: bool,
    },
    /// Run the learning-rate/damping/clip grid and keep the best setting per method.
    Gridsearch {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        synthetic: bool,
    },
    /// Write a synthetic dataset as an IDX image file.
    GenData {
        #[arg(long, value_enum, default_value_t = Kind::Curves)]
        kind: Kind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 28)]
        side: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Curves,
    Blobs,
}

#[derive(Args)]
struct Source {
    /// JSON config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// desk, curves, mnist or faces.
    #[arg(long)]
    preset: Option<Preset>,
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig> {
        match (&self.config, self.preset) {
            (Some(path), _) => ExperimentConfig::load(path),
            (None, Some(p)) => Ok(p.config()),
            (None, None) => Err(Error::Config("pass --config <file> or --preset <name>".into())),
        }
    }
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    method: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    damping: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use generated data in place of files named by the config.
    #[arg(long)]
    synthetic: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = configure_threads().and_then(|()| execute(Cli::parse().command)) {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("KRONFISHER_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .map_err(|_| Error::Config(format!("KRONFISHER_THREADS must be a thread count, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { source, flags } => {
            let mut config = source.load()?;
            config.apply(&Overrides {
                method: flags.method,
                learning_rate: flags.lr,
                damping: flags.damping,
                clip: flags.clip,
                seed: flags.seed,
                epochs: flags.epochs,
                batch_size: flags.batch_size,
                out_dir: flags.out,
                synthetic: flags.synthetic,
                probe_layer: None,
            })?;
            let out = run_experiment(&config)?;
            let s = &out.summary;
            log::info!(
                "{}: train loss {} -> {} in {} iterations ({:.1}s), outputs in {}",
                s.method.name(),
                s.initial_train_loss,
                s.final_train_loss,
                s.iterations,
                s.wall_clock_seconds,
                config.out_dir.display()
            );
            if s.diverged {
                log::warn!("training diverged");
            }
        }
        Command::ProbeFim {
            source,
            layer,
            iterations,
            seed,
            out,
            synthetic,
        } => {
            let mut config = source.load()?;
            let layer = layer.or_else(|| config.preset.map(Preset::probe_layer));
            config.apply(&Overrides {
                seed,
                out_dir: out,
                synthetic,
                probe_layer: layer,
                ..Overrides::default()
            })?;
            if let (Some(n), Some(p)) = (iterations, config.probe.as_mut()) {
                p.iterations = n;
            }
            let data = config.load_dataset()?;
            let result = run_probe(&config, &data)?;
            for v in &result.violations {
                log::warn!("ordering violated: {v}");
            }
            write_probe(&result, &config.out_dir)?;
        }
        Command::Gridsearch {
            source,
            epochs,
            out,
            synthetic,
        } => {
            let mut config = source.load()?;
            config.apply(&Overrides {
                epochs,
                out_dir: out,
                synthetic,
                ..Overrides::default()
            })?;
            let grid = config.grid.clone().unwrap_or_default();
            let data = config.load_dataset()?;
            let result = gridsearch(&config, &grid, &data)?;
            for b in &result.best {
                let last = b.epochs.last().map_or(f64::NAN, |e| e.train_loss);
                log::info!(
                    "{}: best lr {} damping {} clip {} final train loss {}",
                    b.point.method.name(),
                    b.point.learning_rate,
                    b.point.damping,
                    b.point.clip,
                    last
                );
            }
            write_grid(&result, &config.out_dir)?;
        }
        Command::GenData {
            kind,
            n,
            seed,
            side,
            out,
        } => {
            let images = match kind {
                Kind::Curves => gen_synthetic_curves(n, side, seed),
                Kind::Blobs => gen_gaussian_blobs(n, side, seed),
            };
            write_idx_images(&out, &images, side, side)?;
        }
    }
    Ok(())
}
