use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use treegrpo::flow_model::{pretrain, VelocityField};
use treegrpo::harness::{emit_plot_data, evaluate, run_training, RunConfig, RunLog};
use treegrpo::rng::{self, domain};
use treegrpo::verification::run_suite;
use treegrpo::{Error, Result};

/// Tree-structured GRPO for small flow-matching generators.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`, e.g. `--tree.branch 3 --seed 7`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the velocity field to the task data and save a checkpoint.
    Pretrain {
        /// Checkpoint path; defaults to `<output.dir>/pretrained.bin`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Post-train with TreeGRPO or the trajectory baseline.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint with the deterministic sampler.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Merge run logs (runlog.json) into one plotting table.
    PlotData {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
    /// Run the self-check suite.
    Verify,
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    config.apply_seed_env()?;
    let mut it = args.overrides.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected a --key flag, got '{flag}'")))?;
        match key.split_once('=') {
            Some((k, v)) => config.set(k, v)?,
            None => {
                let value = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag --{key} needs a value")))?;
                config.set(key, value)?;
            }
        }
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain { out, config } => {
            let config = load_config(&config)?;
            let task = config.task()?;
            let out = match (out, &config.output_dir) {
                (Some(p), _) => p,
                (None, Some(dir)) => dir.join("pretrained.bin"),
                (None, None) => PathBuf::from("pretrained.bin"),
            };
            let init = VelocityField::new(
                task.data_dim(),
                task.num_conditions(),
                &config.hidden,
                &mut rng::stream(config.pretrain_seed, &[domain::INIT]),
            );
            let report = pretrain(init, &task, &config.pretrain_config())?;
            report.model.save(&out)?;
            let curve = out.with_extension("loss.csv");
            let mut w = csv::Writer::from_path(&curve)?;
            w.write_record(["step", "loss"])?;
            for (step, loss) in &report.loss_curve {
                w.write_record([step.to_string(), loss.to_string()])?;
            }
            w.flush().map_err(|e| Error::Io {
                path: curve.clone(),
                source: e,
            })?;
            println!(
                "held-out loss {:.6}; wrote {}",
                report.held_out_loss,
                out.display()
            );
            Ok(true)
        }
        Command::Train { config } => {
            let config = load_config(&config)?;
            let out = run_training(&config)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
            Ok(true)
        }
        Command::Eval { checkpoint, config } => {
            let config = load_config(&config)?;
            let model = VelocityField::load(&checkpoint)?;
            let report = evaluate(
                &model,
                &config.rewards()?,
                &config.prompt_ids,
                config.eval_samples,
                &config.schedule()?,
                config.eval_seed,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Command::PlotData { out, logs } => {
            let logs = logs
                .iter()
                .map(RunLog::read_json)
                .collect::<Result<Vec<_>>>()?;
            let rows = emit_plot_data(&logs, &out)?;
            println!("wrote {rows} rows to {}", out.display());
            Ok(true)
        }
        Command::Verify => {
            let outcomes = run_suite();
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} passed, {failed} failed", outcomes.len() - failed);
            Ok(failed == 0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
