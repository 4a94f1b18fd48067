//! `mba`: dataset generation, pilot design, training, evaluation, sweeps and
//! theory checks driven by a flat `key = value` config.
//!
//! Exit codes: 0 success, 1 config (or other) error, 2 verification
//! failure, 3 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mba_core::estimator::noise_variance_for_snr;
use mba_core::harness::dataset::{design, write_dataset};
use mba_core::harness::{
    build_dataset, evaluate, export_results, run_sweep, train_model, verify_theory, write_loss_trace, ExperimentConfig,
};
use mba_core::network::MbaModel;
use mba_core::pilot::{ls_mse_objective, reduce_psi};
use mba_core::Error;

#[derive(Parser)]
#[command(name = "mba", version, about = "IRS cascaded channel estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file (must set `seed`).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the train/val/test sets and write them to `output_dir`.
    Generate(Common),
    /// Write the activation pattern and training-phase design, report J_LS.
    DesignPsi(Common),
    /// Train CAN then CMN; save the checkpoint and loss trace.
    Train(Common),
    /// Score a checkpoint on the test split.
    Eval(Common),
    /// Run the configured sweep and write `results.csv`.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Train every model the sweep needs instead of loading checkpoints.
        #[arg(long)]
        train: bool,
    },
    /// Numerical checks of the LS theory and the gain identity.
    Verify(Common),
}

enum Failure {
    Error(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(Error::Io(e))
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| std::io::Error::new(e.kind(), format!("cannot read {}: {e}", common.config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    cfg.apply_overrides(&common.overrides)?;
    Ok(cfg)
}

fn checkpoint_or_default(cfg: &ExperimentConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("model.irsw"))
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<MbaModel, Failure> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())).into());
    }
    let mut model = MbaModel::new(cfg.net_config(), 0)?;
    model.load(path)?;
    Ok(model)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = load_config(&common)?;
            let splits = build_dataset(&cfg)?;
            let (pattern, _) = design(&cfg)?;
            write_dataset(&splits, &pattern, &cfg.output_dir)?;
            println!(
                "wrote {} / {} / {} samples to {}",
                splits.train.len(),
                splits.val.len(),
                splits.test.len(),
                cfg.output_dir.display()
            );
        }
        Command::DesignPsi(common) => {
            let cfg = load_config(&common)?;
            let (pattern, base) = design(&cfg)?;
            let reduced = reduce_psi(&base, &pattern)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(cfg.output_dir.join("pattern.txt"), pattern.to_text())?;
            let mut text = format!("# psi {} b={} (re im per entry)\n", cfg.psi, cfg.b);
            for r in 0..base.matrix().rows() {
                let row: Vec<String> = base
                    .matrix()
                    .row(r)
                    .iter()
                    .map(|z| format!("{:e} {:e}", z.re, z.im))
                    .collect();
                text.push_str(&row.join("\t"));
                text.push('\n');
            }
            std::fs::write(cfg.output_dir.join("psi.txt"), text)?;
            let sigma = noise_variance_for_snr(cfg.snr_db[0], cfg.system.pilot_power);
            let j = ls_mse_objective(base.matrix(), cfg.system.n_t, sigma)?;
            println!("{}", pattern.to_text().trim_end());
            println!(
                "design {} ({}x{} embedded as {}x{}), J_LS at {} dB = {j:.9e}",
                cfg.psi,
                base.m(),
                base.b(),
                reduced.m(),
                reduced.b(),
                cfg.snr_db[0]
            );
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let splits = build_dataset(&cfg)?;
            let (model, trace) = train_model(&cfg, &splits.train, &splits.val, 0)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let ck = checkpoint_or_default(&cfg);
            if let Some(dir) = ck.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            model.save(&ck)?;
            write_loss_trace(&trace, &cfg.output_dir.join("loss.csv"))?;
            let r = evaluate(&cfg, &model, &splits.test)?;
            println!("checkpoint {}", ck.display());
            println!(
                "test NMSE: aug_ls {:.6e}, can {:.6e}, mba {:.6e}; lambda_can {:.4}, lambda_cmn {:.4}",
                r.nmse_ls, r.nmse_can, r.nmse_cmn, r.lambda_can, r.lambda_cmn
            );
        }
        Command::Eval(common) => {
            let cfg = load_config(&common)?;
            let model = load_model(&cfg, &checkpoint_or_default(&cfg))?;
            let splits = build_dataset(&cfg)?;
            let r = evaluate(&cfg, &model, &splits.test)?;
            println!("nmse_ls,nmse_can,nmse_mba,lambda_can,lambda_cmn,first_power,squared_form");
            println!(
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.nmse_ls, r.nmse_can, r.nmse_cmn, r.lambda_can, r.lambda_cmn, r.first_power, r.squared_form
            );
        }
        Command::Sweep { common, train } => {
            let mut cfg = load_config(&common)?;
            cfg.train |= train;
            let rows = run_sweep(&cfg)?;
            let path = cfg.output_dir.join("results.csv");
            export_results(&rows, &path)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::Verify(common) => {
            let cfg = load_config(&common)?;
            let model = match &cfg.checkpoint {
                Some(p) => Some(load_model(&cfg, p)?),
                None => None,
            };
            let report = verify_theory(&cfg, model.as_ref())?;
            print!("{}", report.to_text());
            if !report.passed() {
                return Err(Failure::Verification("one or more checks failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) | Error::Format(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
