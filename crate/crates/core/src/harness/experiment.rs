use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::data::{
    gen_gaussian_blobs, gen_two_moons, load_csv, CsvSchema, Domain, LabeledSet, Standardizer,
    UnlabeledSet,
};
use crate::energy::SgldConfig;
use crate::error::{Error, Result};
use crate::harness::config::{DataConfig, ExperimentConfig};
use crate::harness::eval::evaluate;
use crate::harness::metrics::{write_metrics, MetricsRow};
use crate::model::{save_checkpoint, MlpParams, OptimizerState};
use crate::numerics::Rng;
use crate::selftrain::{mean_energy, run_self_training, train_source, EnergyContext, RoundReport};

// sub-streams of the experiment seed; the data generators use 0..=2
const INIT_STREAM: u64 = 10;
const PRETRAIN_STREAM: u64 = 11;
const SELFTRAIN_STREAM: u64 = 12;
const SGLD_STREAM: u64 = 13;

/// Source, target and (optional) labeled target evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub source: LabeledSet,
    pub target: UnlabeledSet,
    pub target_eval: Option<LabeledSet>,
}

impl ExperimentData {
    pub fn n_classes(&self) -> usize {
        self.source.n_classes()
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }
}

/// Raw (unstandardized) data described by the config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let split = match &cfg.data {
        DataConfig::TwoMoons {
            n_per_domain,
            rotation_degrees,
            noise_std,
        } => gen_two_moons(*n_per_domain, *rotation_degrees, *noise_std, cfg.seed)?,
        DataConfig::Blobs {
            n_per_domain,
            n_classes,
            dim,
            shift,
        } => gen_gaussian_blobs(*n_per_domain, *n_classes, *dim, shift, cfg.seed)?,
        DataConfig::Csv {
            source,
            target,
            target_eval,
            features,
            label,
            classes,
        } => {
            let labeled = CsvSchema {
                feature_columns: features.clone(),
                label_column: Some(label.clone()),
                classes: classes.clone(),
            };
            let unlabeled = CsvSchema {
                label_column: None,
                ..labeled.clone()
            };
            let source = load_csv(source, &labeled, Domain::Source)?
                .into_labeled()
                .expect("schema has a label column");
            let target = load_csv(target, &unlabeled, Domain::Target)?.into_unlabeled();
            let target_eval = target_eval
                .as_ref()
                .map(|p| load_csv(p, &labeled, Domain::TargetEval))
                .transpose()?
                .and_then(|d| d.into_labeled());
            return Ok(ExperimentData {
                source,
                target,
                target_eval,
            });
        }
    };
    Ok(ExperimentData {
        source: split.source,
        target: split.target,
        target_eval: Some(split.target_eval),
    })
}

/// Data standardized with statistics fitted on the source set.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(ExperimentData, Standardizer)> {
    let raw = load_data(cfg)?;
    let st = Standardizer::fit(raw.source.features())?;
    let data = ExperimentData {
        source: st.apply_labeled(&raw.source)?,
        target: st.apply_unlabeled(&raw.target)?,
        target_eval: raw
            .target_eval
            .as_ref()
            .map(|t| st.apply_labeled(t))
            .transpose()?,
    };
    Ok((data, st))
}

fn layer_dims(cfg: &ExperimentConfig, data: &ExperimentData) -> Vec<usize> {
    let mut dims = vec![data.dim()];
    dims.extend(&cfg.model.hidden);
    dims.push(data.n_classes());
    dims
}

fn optimizer(cfg: &ExperimentConfig, params: &MlpParams) -> Result<OptimizerState> {
    let o = &cfg.optimizer;
    OptimizerState::new(params, o.learning_rate, o.momentum, o.weight_decay)
}

/// Initializes a network and fits it on the (standardized) source set.
pub fn pretrain(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<MlpParams> {
    let mut params = MlpParams::init(
        &layer_dims(cfg, data),
        &mut Rng::with_stream(cfg.seed, INIT_STREAM),
    )?;
    let mut opt = optimizer(cfg, &params)?;
    let mut rng = Rng::with_stream(cfg.seed, PRETRAIN_STREAM);
    train_source(
        &mut params,
        &mut opt,
        &data.source,
        cfg.pretrain.epochs,
        cfg.pretrain.batch_size,
        &mut rng,
    )?;
    Ok(params)
}

/// Self-training rounds starting from `source_params`, with a fresh
/// optimizer state and a fresh replay buffer.
pub fn adapt(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    source_params: &MlpParams,
) -> Result<(MlpParams, Vec<RoundReport>)> {
    if source_params.layer_dims().first() != Some(&data.dim())
        || source_params.n_classes() != data.n_classes()
    {
        return Err(Error::Validation(format!(
            "checkpoint dims {:?} do not fit data with D = {}, K = {}",
            source_params.layer_dims(),
            data.dim(),
            data.n_classes()
        )));
    }
    let round_cfg = cfg.round_config(SgldConfig::bounds_from_features(data.target.features()));
    let mut opt = optimizer(cfg, source_params)?;
    let mut ctx = EnergyContext::new(
        cfg.sgld.buffer_capacity,
        cfg.sgld.reinit_prob,
        Rng::with_stream(cfg.seed, SGLD_STREAM),
    )?;
    let mut rng = Rng::with_stream(cfg.seed, SELFTRAIN_STREAM);
    run_self_training(
        source_params,
        &mut opt,
        &data.source,
        &data.target,
        data.target_eval.as_ref(),
        &round_cfg,
        cfg.n_rounds,
        &mut ctx,
        &mut rng,
    )
}

/// Headline numbers of one run, written as `summary.toml`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub alpha: f64,
    pub n_rounds: usize,
    pub baseline_mean_acc: Option<f64>,
    pub final_mean_acc: Option<f64>,
    pub improvement: Option<f64>,
    /// Rounds in which some class got more pseudo-labels than `⌊p · N_k⌋`.
    pub budget_violations: usize,
    pub divergent_chains: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub source_params: MlpParams,
    pub final_params: MlpParams,
    pub standardizer: Standardizer,
    pub reports: Vec<RoundReport>,
    /// `n_rounds + 1` rows, the first being the source-only model.
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
}

/// Creates `dir` and writes the resolved config into it, so an unwritable
/// location fails before any training.
pub fn init_output_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs data preparation, source pre-training and self-training. With
/// `out_dir`, also writes `config.toml`, `standardizer.txt`, `source.ckpt`,
/// `final.ckpt`, `metrics.csv` and `summary.toml` there.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        init_output_dir(dir, cfg)?;
    }
    let start = Instant::now();
    let (data, standardizer) = prepare_data(cfg)?;
    let source_params = pretrain(cfg, &data)?;
    let seconds = if cfg.output.record_timing {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    };
    complete(cfg, &data, standardizer, source_params, out_dir, seconds)
}

/// Like [`run_experiment`], but starting from an already trained source
/// network instead of pre-training one.
pub fn run_adaptation(
    cfg: &ExperimentConfig,
    source_params: &MlpParams,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        init_output_dir(dir, cfg)?;
    }
    let (data, standardizer) = prepare_data(cfg)?;
    complete(
        cfg,
        &data,
        standardizer,
        source_params.clone(),
        out_dir,
        0.0,
    )
}

/// Source-only half of the pipeline. Writes `config.toml`,
/// `standardizer.txt` and `source.ckpt` when `out_dir` is given.
pub fn run_pretraining(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<(MlpParams, Standardizer, ExperimentData)> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        init_output_dir(dir, cfg)?;
    }
    let (data, standardizer) = prepare_data(cfg)?;
    let params = pretrain(cfg, &data)?;
    if let Some(dir) = out_dir {
        write_text(&dir.join("standardizer.txt"), &standardizer.to_text())?;
        save_checkpoint(&params, &dir.join("source.ckpt"))?;
    }
    Ok((params, standardizer, data))
}

fn complete(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    standardizer: Standardizer,
    source_params: MlpParams,
    out_dir: Option<&Path>,
    pretrain_seconds: f64,
) -> Result<ExperimentOutcome> {
    if let Some(dir) = out_dir {
        write_text(&dir.join("standardizer.txt"), &standardizer.to_text())?;
        save_checkpoint(&source_params, &dir.join("source.ckpt"))?;
    }
    let baseline_eval = data
        .target_eval
        .as_ref()
        .map(|t| evaluate(&source_params, t))
        .transpose()?;
    let baseline = MetricsRow::baseline(
        data.n_classes(),
        baseline_eval,
        mean_energy(&source_params, &data.target)?,
        pretrain_seconds,
    );
    let (final_params, reports) = adapt(cfg, data, &source_params)?;
    let mut rows = vec![baseline];
    rows.extend(
        reports
            .iter()
            .map(|r| MetricsRow::from_report(r, cfg.output.record_timing)),
    );

    let baseline_mean_acc = rows[0].mean_accuracy();
    let final_mean_acc = rows.last().and_then(|r| r.mean_accuracy());
    let summary = Summary {
        seed: cfg.seed,
        alpha: cfg.selftrain.alpha,
        n_rounds: cfg.n_rounds,
        baseline_mean_acc,
        final_mean_acc,
        improvement: baseline_mean_acc.zip(final_mean_acc).map(|(b, f)| f - b),
        budget_violations: reports.iter().filter(|r| !r.within_budget()).count(),
        divergent_chains: reports.iter().map(|r| r.divergent_chains).sum(),
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&final_params, &dir.join("final.ckpt"))?;
        write_metrics(&dir.join("metrics.csv"), &rows, data.n_classes())?;
        let text = toml::to_string(&summary).map_err(|e| Error::Config(e.to_string()))?;
        write_text(&dir.join("summary.toml"), &text)?;
    }
    Ok(ExperimentOutcome {
        source_params,
        final_params,
        standardizer,
        reports,
        rows,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Alpha(Vec<f64>),
    Seed(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub name: String,
    pub summary: Summary,
}

/// Runs one experiment per value of `axis`, in parallel threads. Each member
/// writes into `out_dir/<name>` when `out_dir` is given, and a `sweep.csv`
/// collects the summaries.
pub fn sweep(
    base: &ExperimentConfig,
    axis: &SweepAxis,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepEntry>> {
    let members: Vec<(String, ExperimentConfig)> = match axis {
        SweepAxis::Alpha(alphas) => alphas
            .iter()
            .map(|&a| {
                let mut c = base.clone();
                c.selftrain.alpha = a;
                (format!("alpha_{a}"), c)
            })
            .collect(),
        SweepAxis::Seed(seeds) => seeds
            .iter()
            .map(|&s| {
                let mut c = base.clone();
                c.seed = s;
                (format!("seed_{s}"), c)
            })
            .collect(),
    };
    if members.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let dirs: Vec<Option<PathBuf>> = members
        .iter()
        .map(|(n, _)| out_dir.map(|d| d.join(n)))
        .collect();
    let results: Vec<Result<Summary>> = std::thread::scope(|s| {
        let handles: Vec<_> = members
            .iter()
            .zip(&dirs)
            .map(|((_, c), d)| s.spawn(move || run_experiment(c, d.as_deref()).map(|o| o.summary)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Validation("sweep member panicked".into())))
            })
            .collect()
    });
    let mut entries = Vec::with_capacity(members.len());
    for ((name, _), r) in members.into_iter().zip(results) {
        entries.push(SweepEntry { name, summary: r? });
    }
    if let Some(dir) = out_dir {
        write_sweep_csv(&dir.join("sweep.csv"), &entries)?;
    }
    Ok(entries)
}

fn write_sweep_csv(path: &Path, entries: &[SweepEntry]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Validation(format!("sweep: {e}"));
    w.write_record([
        "name",
        "seed",
        "alpha",
        "baseline_mean_acc",
        "final_mean_acc",
        "improvement",
    ])
    .map_err(err)?;
    for e in entries {
        let s = &e.summary;
        w.write_record([
            e.name.clone(),
            s.seed.to_string(),
            s.alpha.to_string(),
            opt(s.baseline_mean_acc),
            opt(s.final_mean_acc),
            opt(s.improvement),
        ])
        .map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Validation(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
