use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use channel_moe::experiment::{
    cmd_ablate, cmd_channel_bench, cmd_eval, cmd_train, extract_overrides, mean_gain_by_k,
    render_table, ExperimentConfig,
};
use channel_moe::Result;

/// Channel-aware mixture-of-experts experiments.
///
/// Any configuration key can also be given as a flag, e.g. `--train.lr 0.1`.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage training; writes checkpoints and per-epoch history.
    Train(Common),
    /// Evaluates a checkpoint under ideal, analog, and digital transport.
    Eval(Common),
    /// Sweeps the number of experts.
    Ablate(Common),
    /// Bit error rate and reconstruction error of the digital link.
    ChannelBench(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let (Command::Train(c) | Command::Eval(c) | Command::Ablate(c) | Command::ChannelBench(c)) =
        &cli.command;
    let cfg = ExperimentConfig::load(c.config.as_deref(), overrides, c.seed, &c.out)?;
    match cli.command {
        Command::Train(_) => {
            let r = cmd_train(&cfg)?;
            if let Some(last) = r.history.last() {
                println!("final train loss {:.4}", last.train_loss);
            }
            println!("wrote {}", r.stage1_path.display());
            println!("wrote {}", r.stage2_path.display());
            println!("wrote {} ({} epochs)", r.history_path.display(), r.history.len());
        }
        Command::Eval(_) => print!("{}", render_table(&cmd_eval(&cfg)?)),
        Command::Ablate(_) => {
            let rows = cmd_ablate(&cfg)?;
            print!("{}", render_table(&rows));
            for (k, g) in mean_gain_by_k(&rows) {
                println!("K = {k}: mean gain {:+.1} points", 100.0 * g);
            }
        }
        Command::ChannelBench(_) => {
            println!("{:>8}  {:>10}  {:>12}  {:>10}", "snr_db", "ber", "channel_ber", "mse");
            for r in cmd_channel_bench(&cfg)? {
                println!("{:>8}  {:>10.3e}  {:>12.3e}  {:>10.3e}", r.snr_db, r.ber, r.channel_ber, r.mse);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match extract_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
