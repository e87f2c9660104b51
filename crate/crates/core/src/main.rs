use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcpo::cli::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_train, cmd_verify, exit_code, ExperimentConfig, Overrides, EXIT_CONFIG,
    EXIT_VERIFICATION, OUTPUT_ROOT_VAR,
};
use mcpo::losses::LossName;
use mcpo::samplers::Strategy;

/// Preference optimization experiments on exactly solvable environments.
#[derive(Parser, Debug)]
#[command(name = "mcpo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a ranked-candidate dataset.
    GenData(Common),
    /// Train a policy and write its checkpoint and trace.
    Train(Common),
    /// Check gradients, identities, unbiasedness and kernel frequencies.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Perturb analytic gradients so the gradient checks must fail.
        #[arg(long)]
        corrupt_gradient: bool,
    },
    /// Match two policies head to head.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path, or `reference` / `optimal`.
        checkpoint_a: String,
        /// Checkpoint path, or `reference` / `optimal`.
        checkpoint_b: String,
    },
    /// Run the strategy grid and the noise comparison.
    Ablate(Common),
    /// Print the standard experiment config as TOML.
    DefaultConfig,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (.toml or .json).
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    loss: Option<LossName>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long = "M", alias = "m")]
    m: Option<usize>,
    /// Replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> mcpo::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            lr: self.lr,
            loss: self.loss,
            strategy: self.strategy,
            m: self.m,
            seed: self.seed,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> mcpo::Result<u8> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = c.load()?;
            let m = cmd_gen_data(&cfg)?;
            println!("{} records in {}", m.record_count.unwrap_or(0), cfg.dataset_path().display());
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let out = cmd_train(&cfg)?;
            if let Some(r) = out.last {
                println!(
                    "step {} loss {} kl_to_pistar {} expected_reward {}",
                    r.step, r.loss, r.kl_to_pistar, r.expected_reward
                );
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Verify { common, corrupt_gradient } => {
            let cfg = common.load()?;
            let report = cmd_verify(&cfg, corrupt_gradient)?;
            for c in &report.checks {
                println!("{} {} {:e} (threshold {:e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
            }
            if !report.passed {
                return Ok(EXIT_VERIFICATION);
            }
        }
        Command::Eval {
            common,
            checkpoint_a,
            checkpoint_b,
        } => {
            let cfg = common.load()?;
            let r = cmd_eval(&cfg, &checkpoint_a, &checkpoint_b)?;
            println!(
                "winrate {} [{}, {}] over {} games",
                r.winrate,
                r.winrate_ci95.0,
                r.winrate_ci95.1,
                r.matches.total()
            );
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            let rows = cmd_ablate(&cfg)?;
            println!("{} runs written to {}", rows.len(), cfg.output_dir().join("ablation.csv").display());
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::standard().to_toml()?),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    log::debug!("output root from {OUTPUT_ROOT_VAR}: {:?}", std::env::var_os(OUTPUT_ROOT_VAR));
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
