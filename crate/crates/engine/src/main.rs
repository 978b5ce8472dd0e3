//! Command-line interface: `price`, `validate` and `oracle`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use switchcsa_engine::{emit_reports, resolve_seed, run_pricing, EngineError, RunConfig};

#[derive(Parser)]
#[command(
    name = "switchcsa",
    about = "Monte Carlo pricing and hedging of defaultable contracts with a switching CSA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pricing pipeline and write the reports.
    Price {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured seed (the SWITCHCSA_SEED environment
        /// variable overrides the config too; this flag wins over both).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured path count.
        #[arg(long)]
        paths: Option<usize>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the plot-data CSV.
        #[arg(long)]
        emit_plots: bool,
    },
    /// Parse a configuration and dry-run the invariant checks.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print reference values from the independent oracles.
    Oracle {
        #[arg(long, value_enum)]
        case: OracleCase,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum OracleCase {
    AmericanPut,
    LatticeDp,
    BlackScholes,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run() -> Result<(), EngineError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Price {
            config,
            seed,
            paths,
            out,
            emit_plots,
        } => price(config, seed, paths, out, emit_plots),
        Command::Validate { config } => validate(config),
        Command::Oracle { case } => {
            oracle(case);
            Ok(())
        }
    }
}

fn price(
    config_path: PathBuf,
    seed: Option<u64>,
    paths: Option<usize>,
    out: Option<PathBuf>,
    emit_plots: bool,
) -> Result<(), EngineError> {
    let mut config = RunConfig::load(&config_path)?;
    config.run.seed = resolve_seed(config.run.seed, seed)?;
    if let Some(p) = paths {
        config.run.paths = p;
    }
    let out_dir = out.unwrap_or_else(|| PathBuf::from(&config.run.output_dir));

    let (artifacts, outcome) = run_pricing(&config);
    match outcome {
        Ok(()) => {
            let result = artifacts.result.as_ref().expect("completed run");
            let written = emit_reports(&artifacts, &config, &out_dir, emit_plots)?;
            println!("{}", result.to_json().trim_end());
            for path in &written {
                log::info!("wrote {}", path.display());
            }
            Ok(())
        }
        Err(e) => {
            // Flush whatever stages completed before the failure.
            if let Err(flush) = emit_reports(&artifacts, &config, &out_dir, false) {
                log::warn!("partial-result flush failed: {flush}");
            } else {
                log::info!("partial results flushed to {}", out_dir.display());
            }
            Err(e)
        }
    }
}

fn validate(config_path: PathBuf) -> Result<(), EngineError> {
    let config = RunConfig::load(&config_path)?;
    config.validate()?;

    // Dry-run: a miniature panel plus the generator Lipschitz sampling.
    let params = config.market_params();
    let grid = switchcsa_core::market::build_time_grid(
        config.grid.maturity,
        config.grid.steps.min(8),
    )
    .map_err(EngineError::stage("validate"))?;
    let panel = switchcsa_core::market::simulate_panel(&params, &grid, 64, config.run.seed)
        .map_err(EngineError::stage("validate"))?;
    use switchcsa_core::csa::funding_rate;
    use switchcsa_core::rbsde::GeneratorSpec;
    let generators = [
        GeneratorSpec::Discount,
        GeneratorSpec::DiscountWithFunding {
            negative_spread: funding_rate(true, &params),
            positive_spread: funding_rate(false, &params),
        },
    ];
    for gen in &generators {
        let bound = gen.lipschitz_bound(&panel).expect("structured generator");
        gen.check_lipschitz(&panel, bound, 256, config.run.seed)
            .map_err(EngineError::stage("validate"))?;
    }
    println!(
        "OK: configuration valid ({} paths, {} steps, claim {:?})",
        config.run.paths,
        config.grid.steps,
        config.claim.terminal
    );
    Ok(())
}

fn oracle(case: OracleCase) {
    use switchcsa_core::oracle::*;
    use switchcsa_core::rbsde::Regime;
    match case {
        OracleCase::AmericanPut => {
            let tree = binomial_american(OptionKind::Put, 100.0, 100.0, 0.05, 0.2, 1.0, 2000);
            let european = black_scholes_price(OptionKind::Put, 100.0, 100.0, 0.05, 0.2, 1.0);
            println!("american put (S0=K=100, r=5%, vol=20%, T=1):");
            println!("  binomial 2000 steps : {tree:.6}");
            println!("  european closed form: {european:.6}");
            println!("  early exercise value: {:.6}", tree - european);
        }
        OracleCase::BlackScholes => {
            let call = black_scholes_price(OptionKind::Call, 100.0, 100.0, 0.05, 0.2, 1.0);
            let put = black_scholes_price(OptionKind::Put, 100.0, 100.0, 0.05, 0.2, 1.0);
            let delta = black_scholes_delta(OptionKind::Call, 100.0, 100.0, 0.05, 0.2, 1.0);
            println!("black-scholes (S0=K=100, r=5%, vol=20%, T=1):");
            println!("  call : {call:.6}");
            println!("  put  : {put:.6}");
            println!("  call delta: {delta:.6}");
        }
        OracleCase::LatticeDp => {
            let toy = SwitchingLattice {
                s0: 100.0,
                up: 1.3,
                down: 0.8,
                steps: 3,
                flow_z_level: 0.0,
                flow_z_slope: 1.0,
                flow_zeta_level: 0.05,
                cost_into_z: 0.1,
                cost_into_zeta: 0.1,
            };
            println!(
                "switching lattice (up 1.3 / down 0.8, 3 steps, costs 0.1/0.1):"
            );
            for initial in [Regime::Z, Regime::Zeta] {
                let v = toy.enumerate(initial);
                let switches: usize = v.switches.iter().map(Vec::len).sum();
                println!(
                    "  start {:?}: value {:.10}, {} switch events across {} paths, gap {:.2e}",
                    initial,
                    v.value,
                    switches,
                    toy.path_count(),
                    v.optimality_gap
                );
            }
        }
    }
}
