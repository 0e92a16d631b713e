use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{load_csv, write_csv, CsvSchema, Domain, Standardizer};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::{evaluate, EvalResult};
use crate::harness::experiment::{
    init_output_dir, load_data, run_adaptation, run_experiment, run_pretraining, sweep,
    ExperimentOutcome, SweepAxis,
};
use crate::harness::gradcheck::{self, Objective};
use crate::model::load_checkpoint;

#[derive(Debug, Parser)]
#[command(
    name = "ecst",
    version,
    about = "Energy-constrained self-training for domain adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write source.csv, target.csv and target_eval.csv (unstandardized).
    GenerateData(RunArgs),
    /// Pre-train on the source domain only.
    TrainSource(RunArgs),
    /// Full run: source pre-training, then self-training rounds.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
        /// Start from this source checkpoint instead of pre-training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mean class accuracy of a checkpoint on a labeled CSV file with
    /// columns x0.., label.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Standardizer written by training; applied before prediction.
        #[arg(long)]
        standardizer: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One run per listed alpha or seed.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(
            long,
            value_delimiter = ',',
            conflicts_with = "seeds",
            required_unless_present = "seeds"
        )]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, Option<PathBuf>)> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = self.alpha {
            cfg.selftrain.alpha = a;
        }
        cfg.validate()?;
        let out = self.out.clone().or_else(|| cfg.out_dir.clone());
        Ok((cfg, out))
    }
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf> {
    out.ok_or_else(|| Error::Config("an output directory is required (--out or out_dir)".into()))
}

fn print_eval(label: &str, e: &EvalResult) {
    println!("{label}_mean_class_accuracy {}", e.mean_class_accuracy);
    for (c, a) in e.per_class_accuracy.iter().enumerate() {
        println!("{label}_class_{c} {a}");
    }
}

fn print_outcome(o: &ExperimentOutcome) {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    for row in &o.rows {
        println!(
            "round {} mean_acc {} selected {:?} mean_energy {:.4}",
            row.round,
            fmt(row.mean_accuracy()),
            row.selected,
            row.mean_energy
        );
    }
    let s = &o.summary;
    println!(
        "baseline {} final {} improvement {}",
        fmt(s.baseline_mean_acc),
        fmt(s.final_mean_acc),
        fmt(s.improvement)
    );
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(args) => {
            let (cfg, out) = args.resolve()?;
            let dir = require_out(out)?;
            init_output_dir(&dir, &cfg)?;
            let data = load_data(&cfg)?;
            write_csv(
                &dir.join("source.csv"),
                data.source.features(),
                Some(data.source.labels()),
            )?;
            write_csv(&dir.join("target.csv"), data.target.features(), None)?;
            if let Some(t) = &data.target_eval {
                write_csv(&dir.join("target_eval.csv"), t.features(), Some(t.labels()))?;
            }
            println!("wrote data to {}", dir.display());
        }
        Command::TrainSource(args) => {
            let (cfg, out) = args.resolve()?;
            let (params, _, data) = run_pretraining(&cfg, out.as_deref())?;
            print_eval("source", &evaluate(&params, &data.source)?);
            if let Some(t) = &data.target_eval {
                print_eval("target", &evaluate(&params, t)?);
            }
        }
        Command::Adapt { run, checkpoint } => {
            let (cfg, out) = run.resolve()?;
            let outcome = match checkpoint {
                Some(p) => run_adaptation(&cfg, &load_checkpoint(&p)?, out.as_deref())?,
                None => run_experiment(&cfg, out.as_deref())?,
            };
            print_outcome(&outcome);
        }
        Command::Evaluate {
            checkpoint,
            data,
            standardizer,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let schema = CsvSchema::numbered(params.input_dim(), Some(params.n_classes()));
            let mut set = load_csv(&data, &schema, Domain::TargetEval)?
                .into_labeled()
                .expect("schema has a label column");
            if let Some(p) = standardizer {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                set = Standardizer::from_text(&text)?.apply_labeled(&set)?;
            }
            let e = evaluate(&params, &set)?;
            print_eval("eval", &e);
            println!("confusion (rows true, columns predicted)");
            for row in &e.confusion {
                println!(
                    "{}",
                    row.iter()
                        .map(|c| c.to_string())
                        .collect::<Vec<_>>()
                        .join(" ")
                );
            }
        }
        Command::Gradcheck { configs, seed } => {
            let report = gradcheck::run_suite(configs, seed)?;
            for obj in Objective::ALL {
                let worst = report
                    .results
                    .iter()
                    .filter(|r| r.objective == obj)
                    .map(|r| r.max_rel_err)
                    .fold(0.0, f64::max);
                println!("{obj:<14} max_rel_err {worst:.3e}");
            }
            println!(
                "{} configurations, overall max_rel_err {:.3e} (tolerance {:e})",
                configs,
                report.max_rel_err(),
                gradcheck::REL_TOL
            );
            if !report.passed() {
                return Err(Error::Validation(format!(
                    "gradient check failed: {:?}",
                    report.worst()
                )));
            }
        }
        Command::Sweep {
            config,
            out,
            alphas,
            seeds,
        } => {
            let cfg = load_config(config.as_deref())?;
            let axis = match (alphas, seeds) {
                (Some(a), _) => SweepAxis::Alpha(a),
                (None, Some(s)) => SweepAxis::Seed(s),
                (None, None) => unreachable!("clap requires one of the two"),
            };
            let out = out.or_else(|| cfg.out_dir.clone());
            for e in sweep(&cfg, &axis, out.as_deref())? {
                let s = &e.summary;
                let fmt =
                    |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
                println!(
                    "{} baseline {} final {} improvement {}",
                    e.name,
                    fmt(s.baseline_mean_acc),
                    fmt(s.final_mean_acc),
                    fmt(s.improvement)
                );
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 2 for usage errors, 1 for everything else.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
