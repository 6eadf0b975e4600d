use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use lowfreq::harness::config::CONFIG_KEYS;
use lowfreq::harness::{load_config, run_experiment, Experiment, ExperimentConfig, ExperimentReport, Target};
use lowfreq::oracle::remote::OracleServer;
use lowfreq::oracle::Classifier;
use lowfreq::Error;

#[derive(Parser)]
#[command(name = "lowfreq", version, about = "Low-frequency black-box adversarial attacks on toy models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Success rate of random low-frequency spherical noise per radius and ratio.
    #[command(after_help = CONFIG_KEYS)]
    SphereSweep(Common),
    /// Boundary attack (configured by the [boundary] section).
    #[command(after_help = CONFIG_KEYS)]
    Boundary(Common),
    /// NES attack (configured by the [nes] section).
    #[command(after_help = CONFIG_KEYS)]
    Nes(Common),
    /// Successive halving over low-frequency boundary-attack ratios.
    #[command(after_help = CONFIG_KEYS)]
    Hyperband(Common),
    /// White-box margin-loss attack swept over frequency ratios.
    #[command(after_help = CONFIG_KEYS)]
    Whitebox(Common),
    /// Low-frequency versus full-pixel-space comparison.
    #[command(after_help = CONFIG_KEYS)]
    Bench(Common),
    /// Serve the configured model over HTTP (POST /v1/decide, /v1/loss).
    #[command(after_help = CONFIG_KEYS)]
    ServeOracle {
        #[command(flatten)]
        common: Common,
        /// Address to bind.
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set boundary.max_queries=30000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; beats the file and `--set`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        load_config(self.config.as_deref(), &self.overrides, self.seed)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (common, kind) = match &cli.command {
        Command::SphereSweep(c) => (c, Experiment::SphereSweep),
        Command::Boundary(c) => (c, Experiment::Boundary),
        Command::Nes(c) => (c, Experiment::Nes),
        Command::Hyperband(c) => (c, Experiment::Hyperband),
        Command::Whitebox(c) => (c, Experiment::Whitebox),
        Command::Bench(c) => (c, Experiment::Bench),
        Command::ServeOracle { common, addr } => return serve(common, addr),
    };
    let config = match common.load() {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    match run_experiment(kind, &config) {
        Ok(report) => {
            print_report(&report);
            if report.all_failed() {
                eprintln!("every run failed");
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => fail(&e),
    }
}

fn serve(common: &Common, addr: &str) -> ExitCode {
    let config = match common.load() {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let target = match Target::build(&config.model, config.defense) {
        Ok(t) => t,
        Err(e) => return fail(&e),
    };
    let Some(model) = target.classifier() else {
        return fail(&Error::Config("model.kind: serve-oracle needs a local model".into()));
    };
    let model: Arc<dyn Classifier> = model.clone();
    match OracleServer::start(addr, model, config.defense) {
        Ok(server) => {
            println!("serving on {}", server.url());
            server.join();
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn print_report(report: &ExperimentReport) {
    for s in &report.summaries {
        println!(
            "{:<10} runs {:>4}  success {:>5.1}%  median {:>8.0}  mean {:>8.0}  final mse {:.3e}",
            s.attack,
            s.runs,
            100.0 * s.success_rate,
            s.median_queries,
            s.mean_queries,
            s.mean_final_mse
        );
    }
    for c in &report.comparisons {
        println!("{}: rgb/lf median queries = {:.2}", c.family, c.speedup);
    }
    if let Some(sphere) = &report.sphere {
        for a in &sphere.auc {
            println!("ratio {:.4}  auc {:.4}", a.ratio, a.auc);
        }
    }
    if let Some(rows) = &report.whitebox {
        for r in rows {
            println!(
                "ratio {:.4}  dim {:>5}  success {:>5.1}%  mean mse {:.3e}",
                r.ratio,
                r.effective_dimension,
                100.0 * r.success_rate,
                r.mean_mse
            );
        }
    }
    println!("results in {}", report.output_dir.display());
}
