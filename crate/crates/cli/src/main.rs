mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Format, Sink};
use config::{parse_grid, RunConfig};
use failure::{Failure, EXIT_OK, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "metalwan", version, about = "Smooth disentangled projectors and Wannier hoppings for band structures with Weyl crossings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Builtin model name (weyl2, insulator2, trs4, weyl4) or model JSON file.
    #[arg(long)]
    model: String,
    /// JSON run configuration; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// `n` or `n1,n2,n3`.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<[usize; 3]>,
    /// Format of tabular outputs.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Band energies along a straight k-path and on the grid.
    Bands {
        #[command(flatten)]
        common: Common,
        /// Path start `k1,k2,k3`.
        #[arg(long, value_parser = parse_kpoint)]
        from: Option<[f64; 3]>,
        /// Path end `k1,k2,k3`.
        #[arg(long, value_parser = parse_kpoint)]
        to: Option<[f64; 3]>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Locate crossings of bands N+1, N+2 and compute their charges.
    Charges {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        band: Option<usize>,
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Build and verify the smooth rank-(N+1) projector field.
    Disentangle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        band: Option<usize>,
        /// Keep the field inside the span of the lowest N+2 bands.
        #[arg(long)]
        assumption2: bool,
    },
    /// Global frames and hopping matrices of a dumped field.
    Wannierize {
        #[command(flatten)]
        common: Common,
        /// Field dump written by `disentangle`.
        #[arg(long)]
        field: PathBuf,
        /// Enforce time-reversal symmetric frames.
        #[arg(long)]
        trs: bool,
    },
    /// Compare interpolated bands with direct Fourier interpolation.
    Interpolate {
        #[command(flatten)]
        common: Common,
        /// Hopping file written by `wannierize`.
        #[arg(long)]
        hoppings: PathBuf,
        /// Number of lowest bands to compare (default: rank − 1).
        #[arg(long)]
        bands: Option<usize>,
        #[arg(long)]
        probes: Option<usize>,
    },
    /// Re-run every check on a dumped field.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: PathBuf,
    },
}

fn parse_kpoint(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| format!("bad k-point `{s}`: {e}"))).collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| format!("k-point needs three components, got `{s}`"))
}

fn setup(common: &Common) -> Result<(metalwan::ModelSpec, RunConfig, Sink), Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(g) = common.grid {
        cfg.grid = g;
    }
    let model = commands::load_model(&common.model)?;
    let sink = Sink::new(common.out.clone(), common.format)?;
    Ok((model, cfg, sink))
}

fn run(cli: Cli) -> Result<commands::Summary, Failure> {
    match cli.command {
        Command::Bands { common, from, to, points } => {
            let (m, mut cfg, sink) = setup(&common)?;
            cfg.path_from = from.unwrap_or(cfg.path_from);
            cfg.path_to = to.unwrap_or(cfg.path_to);
            cfg.path_points = points.unwrap_or(cfg.path_points);
            commands::bands(&m, &cfg, &sink)
        }
        Command::Charges { common, band, radius } => {
            let (m, mut cfg, sink) = setup(&common)?;
            cfg.band = band.unwrap_or(cfg.band);
            cfg.radius = radius.or(cfg.radius);
            cfg.validate()?;
            commands::charges(&m, &cfg, &sink)
        }
        Command::Disentangle { common, band, assumption2 } => {
            let (m, mut cfg, sink) = setup(&common)?;
            cfg.band = band.unwrap_or(cfg.band);
            cfg.assumption2 |= assumption2;
            commands::disentangle(&m, &cfg, &sink)
        }
        Command::Wannierize { common, field, trs } => {
            let (m, mut cfg, sink) = setup(&common)?;
            cfg.trs |= trs;
            commands::wannierize(&m, &field, &cfg, &sink)
        }
        Command::Interpolate { common, hoppings, bands, probes } => {
            let (m, mut cfg, sink) = setup(&common)?;
            cfg.probes = probes.unwrap_or(cfg.probes);
            commands::interpolate(&m, &hoppings, bands, &cfg, &sink)
        }
        Command::Verify { common, field } => {
            let (m, _, sink) = setup(&common)?;
            commands::verify(&m, &field, &sink)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::from(EXIT_OK)
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
