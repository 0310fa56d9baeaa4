use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pmedit::harness::verify::{verify, VerifyOptions};
use pmedit::harness::{self, ExperimentConfig, LayerSpec};
use pmedit::metrics::{self, EditReport};
use pmedit::solvers::Method;
use pmedit::{weights, Error, Result, ToyModel};

#[derive(Parser)]
#[command(
    name = "pmedit",
    version,
    about = "Closed-form batched model editing on a toy associative memory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit one batch configuration and report its metrics.
    Edit(Overrides),
    /// Sweep every method over the configured batch sizes.
    SweepBatch(Overrides),
    /// Sweep MEMIT over lambda and EMMET over alpha.
    SweepHparam(Overrides),
    /// Run the oracle-agreement and invariant suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb every EMMET solution by this amount before checking it.
        #[arg(long)]
        inject_fault: Option<f64>,
        /// Also write the JSON summary here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the toy model's initial weights to a file.
    ExportWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a weight file against the model config and print its hash.
    ImportWeights {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// A layer (`3`) or an inclusive range (`2-4`).
    #[arg(long)]
    layers: Option<LayerSpec>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the verify suite first and stop if it fails.
    #[arg(long)]
    verify: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.method {
            c.methods = vec![m];
        }
        if let Some(b) = self.batch_size {
            c.batch_sizes = vec![b];
            c.hparam_batch_size = b;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(l) = self.lambda {
            c.lambda = l;
        }
        if let Some(a) = self.alpha {
            c.alpha = a;
        }
        if let Some(l) = self.layers {
            c.layers = l;
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let c = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    c.validate()?;
    Ok(c)
}

fn write_rows(out: Option<&Path>, rows: &[EditReport]) -> Result<()> {
    match out {
        Some(path) => {
            metrics::write_csv(File::create(path)?, rows)?;
            eprintln!("wrote {} rows to {}", rows.len(), path.display());
            Ok(())
        }
        None => metrics::write_csv(io::stdout().lock(), rows),
    }
}

fn report(notes: &[String], warnings: &[String]) {
    for n in notes {
        eprintln!("note: {n}");
    }
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn preflight(enabled: bool, seed: u64) -> Result<()> {
    if !enabled {
        return Ok(());
    }
    let summary = verify(&VerifyOptions {
        seed,
        ..Default::default()
    });
    if !summary.passed {
        eprintln!("{}", summary.to_json());
        return Err(Error::Precondition("verify suite failed".into()));
    }
    eprintln!("verify: {} checks passed", summary.checks.len());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Edit(o) => {
            let config = o.resolve()?;
            preflight(o.verify, config.seed)?;
            let run = harness::run_edit(&config)?;
            report(&[], &run.warnings);
            let mut rows = run.rows;
            rows.push(run.mean);
            write_rows(config.out.as_deref(), &rows)?;
        }
        Command::SweepBatch(o) => {
            let config = o.resolve()?;
            preflight(o.verify, config.seed)?;
            let sweep = harness::sweep_batch(&config)?;
            report(&sweep.notes, &sweep.warnings);
            write_rows(config.out.as_deref(), &sweep.rows)?;
        }
        Command::SweepHparam(o) => {
            let config = o.resolve()?;
            preflight(o.verify, config.seed)?;
            let hp = harness::sweep_hparam(&config)?;
            report(&hp.sweep.notes, &hp.sweep.warnings);
            write_rows(config.out.as_deref(), &hp.sweep.rows)?;
            let observations = serde_json::to_string_pretty(&hp.observations)?;
            match &config.out {
                Some(path) => {
                    let side = path.with_extension("observations.json");
                    std::fs::write(&side, observations)?;
                    eprintln!("wrote observations to {}", side.display());
                }
                None => eprintln!("{observations}"),
            }
        }
        Command::Verify {
            seed,
            inject_fault,
            out,
        } => {
            let summary = verify(&VerifyOptions {
                seed,
                fault: inject_fault,
                ..Default::default()
            });
            let json = summary.to_json();
            if let Some(path) = out {
                std::fs::write(path, &json)?;
            }
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "{json}")?;
            for c in summary.checks.iter().filter(|c| !c.passed) {
                eprintln!(
                    "FAILED {}: value {} threshold {} ({})",
                    c.name, c.value, c.threshold, c.detail
                );
            }
            return Ok(summary.passed);
        }
        Command::ExportWeights { config, out } => {
            let config = load_config(config.as_deref())?;
            let model = ToyModel::new(&config.model)?;
            weights::write_file(&out, model.layers())?;
            println!("{}", model.weights_hash()?);
        }
        Command::ImportWeights { config, input } => {
            let config = load_config(config.as_deref())?;
            let mut model = ToyModel::new(&config.model)?;
            model.set_layers(weights::read_file(&input)?)?;
            println!("{}", model.weights_hash()?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
