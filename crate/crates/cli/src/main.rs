use clap::{Parser, ValueEnum};
use qkdnfv::scenario::{
    cmd_fig2_sweep, cmd_timeshare_demo, cmd_transfer_demo, cmd_validate, Mode, ScenarioConfig,
    ScenarioError,
};
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 1;
const EXIT_FAILED: u8 = 2;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scenario {
    /// Link model sweep: init time, key rate, QBER and attenuation vs distance.
    Fig2Sweep,
    /// Plan and execute time-shared key generation.
    Timeshare,
    /// Key generation followed by secure image transfers.
    Transfer,
    /// Check the configuration and print it with defaults resolved.
    Validate,
}

/// Emulated secure VNF image delivery with a time-shared QKD sender.
///
/// Log verbosity follows QKDNFV_LOG (error, warn, info, debug, trace).
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    scenario: Scenario,
    /// Scenario file (TOML). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Comma-separated distances in km for fig2-sweep.
    #[arg(long, value_delimiter = ',')]
    distances: Option<Vec<f64>>,
}

/// Ok(false) when the scenario ran but did not succeed.
fn run(args: &Args) -> Result<bool, ScenarioError> {
    let mut config = match &args.config {
        Some(path) => ScenarioConfig::load(path).map_err(|e| match e {
            ScenarioError::Io { .. } => ScenarioError::Config(e.to_string()),
            e => e,
        })?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    let output = match args.scenario {
        Scenario::Fig2Sweep => cmd_fig2_sweep(&config, args.distances.as_deref())?,
        Scenario::Timeshare => cmd_timeshare_demo(&config)?,
        Scenario::Transfer => cmd_transfer_demo(&config)?,
        Scenario::Validate => cmd_validate(&config)?,
    };
    for path in output.write_to(&config.output_dir)? {
        log::info!("wrote {}", path.display());
    }
    println!("{}", output.summary);
    if let Some(why) = &output.failure {
        eprintln!("scenario failed: {why}");
    }
    Ok(output.is_success())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QKDNFV_LOG", "warn")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_FAILED
            })
        }
    }
}
