use anyhow::Result;
use clap::{CommandFactory, FromArgMatches, Parser};
use ldm_cli::{Command, RunConfig};

/// Phantom chest X-ray latent diffusion: data, training, sampling, upscaling
/// and evaluation.
#[derive(Parser, Debug)]
#[command(name = "ldm", version)]
struct Args {
    /// Pipeline stage to run.
    #[arg(value_enum)]
    command: Command,

    /// Settings as `--key value` pairs, plus `--config FILE`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "SETTINGS")]
    settings: Vec<String>,
}

fn main() -> Result<()> {
    let matches = Args::command().after_long_help(RunConfig::key_help()).get_matches();
    let args = Args::from_arg_matches(&matches)?;
    let cfg = RunConfig::resolve(&args.settings)?;
    env_logger::Builder::new()
        .filter_level(cfg.log_level.parse()?)
        .format_timestamp(None)
        .init();
    ldm_cli::run(args.command, &cfg)
}
