use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use cgmcl::data::{generate_synthetic, write_cohort, SyntheticSpec};
use cgmcl::trainkit::ablate::write_ablation_csv;
use cgmcl::trainkit::config::apply_override;
use cgmcl::trainkit::export::{evaluate_saved, write_metrics};
use cgmcl::trainkit::{evaluate, export_run, fixture, prepare_cohort, run_ablation, train, AblationAxis, Backbone, TrainConfig};
use cgmcl::Error;

/// Cross-graph modal contrastive learning: train, evaluate and ablate.
#[derive(Parser, Debug)]
#[command(name = "cgmcl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON config file. Omit to use built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set beta=0.5 --set data.synthetic.n=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> cgmcl::Result<TrainConfig> {
        match &self.config {
            Some(path) => TrainConfig::from_path(path, &self.overrides),
            None => TrainConfig::from_json_str("{}", &self.overrides),
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BackboneArg {
    Gat,
    Gcn,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write every run artifact.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Score a saved parameter file on the test split of its config.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        params: PathBuf,
    },
    /// Finite-difference check of the full objective on a small fixture.
    Gradcheck {
        #[arg(long, value_enum, default_value = "gat")]
        backbone: BackboneArg,
        #[arg(long, default_value_t = 8)]
        nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train a grid of variants over `repeats` seeds each.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// beta, module, loss_mode, k or k=<list>.
        #[arg(long)]
        axis: String,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic cohort as three CSV files.
    Synth {
        /// JSON synthetic spec. Omit to use defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_train(config: &TrainConfig, out: &Path) -> cgmcl::Result<()> {
    let cohort = prepare_cohort(config, config.seed)?;
    info!(
        "cohort: {} patients, {} train / {} test",
        cohort.n(),
        cohort.train_indices().len(),
        cohort.test_indices().len()
    );
    let outcome = train(&cohort, config)?;
    let eval = evaluate(&outcome.trained, &cohort)?;
    export_run(out, &outcome, &eval, &cohort)?;
    write_metrics(&eval, std::io::stdout().lock())?;
    info!("artifacts written to {}", out.display());
    Ok(())
}

fn run_gradcheck(backbone: BackboneArg, nodes: usize, seed: u64, h: f64, tol: f64) -> cgmcl::Result<()> {
    let backbone = match backbone {
        BackboneArg::Gat => Backbone::Gat,
        BackboneArg::Gcn => Backbone::Gcn,
    };
    let report = fixture::gradcheck(backbone, nodes, seed, h, tol)?;
    let mut stdout = std::io::stdout().lock();
    for p in &report.params {
        let _ = writeln!(
            stdout,
            "{:<32} max_rel_err={:.3e} checked={} skipped={}",
            p.name, p.max_rel_err, p.checked, p.skipped
        );
    }
    let _ = writeln!(
        stdout,
        "{}: max relative error {:.3e} (tol {:e})",
        if report.passed() { "PASS" } else { "FAIL" },
        report.max_rel_err(),
        tol
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Reproducibility(format!(
            "gradient check failed: max relative error {:e} >= {tol:e}",
            report.max_rel_err()
        )))
    }
}

fn run_synth(spec: Option<&Path>, overrides: &[String], out: &Path) -> cgmcl::Result<()> {
    let mut value = match spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("spec is not valid JSON: {e}")))?
        }
        None => serde_json::json!({}),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let spec: SyntheticSpec = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    let cohort = generate_synthetic(&spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
    write_cohort(&cohort, out)
}

fn dispatch(command: Command) -> cgmcl::Result<()> {
    match command {
        Command::Train { config, out } => run_train(&config.load()?, &out),
        Command::Eval { config, params } => {
            let eval = evaluate_saved(&config.load()?, &params)?;
            write_metrics(&eval, std::io::stdout().lock())
        }
        Command::Gradcheck {
            backbone,
            nodes,
            seed,
            h,
            tol,
        } => run_gradcheck(backbone, nodes, seed, h, tol),
        Command::Ablate { config, axis, out } => {
            let config = config.load()?;
            let axis: AblationAxis = axis.parse()?;
            let cells = run_ablation(&config, &axis)?;
            match out {
                Some(path) => {
                    let file = std::fs::File::create(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                    write_ablation_csv(&axis, &cells, file)
                }
                None => write_ablation_csv(&axis, &cells, std::io::stdout().lock()),
            }
        }
        Command::Synth { spec, overrides, out } => run_synth(spec.as_deref(), &overrides, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
