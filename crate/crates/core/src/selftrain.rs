//! Class-balanced self-training with an energy regularizer.
//!
//! Each round alternates two steps with the other side held fixed:
//! pseudo-labels are chosen in closed form from per-class confidence
//! thresholds, then the network is retrained on source cross-entropy,
//! pseudo-label cross-entropy and `α` times the energy regularizer on every
//! target sample.

use std::time::Instant;

use crate::data::{LabeledSet, UnlabeledSet};
use crate::energy::{self, EnergyStats, RegularizerMode, ReplayBuffer, SgldConfig};
use crate::error::{Error, Result};
use crate::harness::eval::{evaluate, EvalResult};
use crate::model::{self, Gradients, MlpParams, OptimizerState};
use crate::numerics::{argmax, Rng};

/// Per-class confidence cutoffs and the portion that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    pub lambda: Vec<f64>,
    pub portion: f64,
    /// Samples predicted as each class (N_k). `None` when the thresholds were
    /// given directly rather than estimated.
    pub predicted_counts: Option<Vec<usize>>,
}

impl Thresholds {
    pub fn new(lambda: Vec<f64>, portion: f64) -> Result<Self> {
        check_portion(portion)?;
        if lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Validation("thresholds must lie in [0, 1]".into()));
        }
        Ok(Self {
            lambda,
            portion,
            predicted_counts: None,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.lambda.len()
    }

    /// A class nobody predicts has nothing to select from.
    pub fn is_vacuous(&self, k: usize) -> bool {
        self.predicted_counts.as_ref().is_some_and(|c| c[k] == 0)
    }

    /// `⌊p · N_k⌋`, the most samples class `k` may receive.
    pub fn budget(&self, k: usize) -> Option<usize> {
        self.predicted_counts
            .as_ref()
            .map(|c| budget(self.portion, c[k]))
    }
}

fn check_portion(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Validation(format!("portion {p} must lie in (0, 1]")));
    }
    Ok(())
}

fn budget(p: f64, n: usize) -> usize {
    (p * n as f64).floor() as usize
}

/// Thresholds from `(predicted class, confidence)` pairs: within each
/// predicted class, `λ_k` is the `(m+1)`-th largest confidence with
/// `m = ⌊p·N_k⌋`, or 0 when `m ≥ N_k`.
pub fn thresholds_from_predictions(
    predictions: &[(usize, f64)],
    k: usize,
    p: f64,
) -> Result<Thresholds> {
    check_portion(p)?;
    let mut by_class: Vec<Vec<f64>> = vec![Vec::new(); k];
    for &(c, conf) in predictions {
        if c >= k {
            return Err(Error::Validation(format!(
                "class {c} out of range for {k} classes"
            )));
        }
        by_class[c].push(conf);
    }
    let mut lambda = Vec::with_capacity(k);
    let mut counts = Vec::with_capacity(k);
    for mut confs in by_class {
        confs.sort_by(|a, b| b.total_cmp(a));
        let n = confs.len();
        let m = budget(p, n);
        lambda.push(if m >= n { 0.0 } else { confs[m] });
        counts.push(n);
    }
    Ok(Thresholds {
        lambda,
        portion: p,
        predicted_counts: Some(counts),
    })
}

pub fn estimate_thresholds(
    params: &MlpParams,
    target: &UnlabeledSet,
    p: f64,
) -> Result<Thresholds> {
    check_portion(p)?;
    if target.is_empty() {
        return Err(Error::Validation("target set is empty".into()));
    }
    let predictions = target
        .features()
        .iter_rows()
        .map(|x| {
            let probs = params.predict_proba(x)?;
            let c = argmax(&probs);
            Ok((c, probs[c]))
        })
        .collect::<Result<Vec<_>>>()?;
    thresholds_from_predictions(&predictions, params.n_classes(), p)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PseudoLabel {
    Unselected,
    Selected { class: usize, target: Vec<f64> },
}

impl PseudoLabel {
    pub fn one_hot(class: usize, k: usize) -> Self {
        let mut target = vec![0.0; k];
        target[class] = 1.0;
        PseudoLabel::Selected { class, target }
    }

    pub fn class(&self) -> Option<usize> {
        match self {
            PseudoLabel::Unselected => None,
            PseudoLabel::Selected { class, .. } => Some(*class),
        }
    }

    pub fn target(&self) -> Option<&[f64]> {
        match self {
            PseudoLabel::Unselected => None,
            PseudoLabel::Selected { target, .. } => Some(target),
        }
    }
}

/// Closed-form minimizer of `-Σ_k y_k (log p_k - log λ_k)` over
/// `{e_1, …, e_K, 0}` for one sample.
///
/// `k* = argmax_k p_k / λ_k`; selected iff `p_{k*} > λ_{k*}`. A zero
/// threshold makes the ratio unbounded, so when any eligible class has
/// `λ_k = 0` the choice is made among those classes by raw probability.
/// Vacuous classes are never chosen. Ties go to the lowest index.
pub fn select_class(probs: &[f64], thresholds: &Thresholds) -> Option<usize> {
    let lambda = &thresholds.lambda;
    let eligible = |k: &usize| !thresholds.is_vacuous(*k);
    let unbounded = (0..lambda.len())
        .filter(eligible)
        .filter(|&k| lambda[k] == 0.0);
    let best_unbounded = unbounded.fold(None, |best: Option<usize>, k| match best {
        Some(b) if probs[b] >= probs[k] => Some(b),
        _ => Some(k),
    });
    let k_star =
        match best_unbounded {
            Some(k) => k,
            None => (0..lambda.len())
                .filter(eligible)
                .fold(None, |best: Option<usize>, k| match best {
                    Some(b) if probs[b] / lambda[b] >= probs[k] / lambda[k] => Some(b),
                    _ => Some(k),
                })?,
        };
    (probs[k_star] > lambda[k_star]).then_some(k_star)
}

pub fn solve_pseudo_labels(
    params: &MlpParams,
    target: &UnlabeledSet,
    thresholds: &Thresholds,
) -> Result<Vec<PseudoLabel>> {
    let k = params.n_classes();
    if thresholds.n_classes() != k {
        return Err(Error::Shape {
            expected: k,
            got: thresholds.n_classes(),
        });
    }
    target
        .features()
        .iter_rows()
        .map(|x| {
            let probs = params.predict_proba(x)?;
            Ok(match select_class(&probs, thresholds) {
                Some(c) => PseudoLabel::one_hot(c, k),
                None => PseudoLabel::Unselected,
            })
        })
        .collect()
}

/// `1 - ε` on the chosen class, `ε / (K - 1)` elsewhere.
pub fn smooth_labels(assignment: &[PseudoLabel], epsilon: f64) -> Result<Vec<PseudoLabel>> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Validation(format!(
            "smoothing epsilon {epsilon} must lie in [0, 1)"
        )));
    }
    assignment
        .iter()
        .map(|label| match label {
            PseudoLabel::Unselected => Ok(PseudoLabel::Unselected),
            PseudoLabel::Selected { class, target } => {
                let k = target.len();
                let is_one_hot = target
                    .iter()
                    .enumerate()
                    .all(|(i, &t)| t == if i == *class { 1.0 } else { 0.0 });
                if !is_one_hot {
                    return Err(Error::Validation(
                        "smoothing expects one-hot pseudo-labels".into(),
                    ));
                }
                if epsilon == 0.0 {
                    return Ok(label.clone());
                }
                if k < 2 {
                    return Err(Error::Validation(
                        "smoothing needs at least two classes".into(),
                    ));
                }
                let off = epsilon / (k - 1) as f64;
                let mut target = vec![off; k];
                target[*class] = 1.0 - epsilon;
                Ok(PseudoLabel::Selected {
                    class: *class,
                    target,
                })
            }
        })
        .collect()
}

pub fn selected_counts(assignment: &[PseudoLabel], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k];
    for c in assignment.iter().filter_map(PseudoLabel::class) {
        counts[c] += 1;
    }
    counts
}

/// Round-level hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub alpha: f64,
    /// Portion `p` for each round; must be non-decreasing within `(0, 1]`.
    pub portion_schedule: Vec<f64>,
    pub smoothing_epsilon: f64,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub regularizer: RegularizerMode,
    pub sgld: SgldConfig,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            portion_schedule: default_portion_schedule(5, 0.2, 0.05, 0.5),
            smoothing_epsilon: 0.0,
            epochs_per_round: 10,
            batch_size: 64,
            regularizer: RegularizerMode::Literal,
            sgld: SgldConfig::default(),
        }
    }
}

/// `start, start + step, …` capped at `max`.
pub fn default_portion_schedule(n_rounds: usize, start: f64, step: f64, max: f64) -> Vec<f64> {
    (0..n_rounds)
        .map(|r| (start + step * r as f64).min(max))
        .collect()
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Validation(format!(
                "alpha {} must be non-negative",
                self.alpha
            )));
        }
        for &p in &self.portion_schedule {
            check_portion(p)?;
        }
        if self.portion_schedule.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Validation(
                "portion schedule must be non-decreasing".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.smoothing_epsilon) {
            return Err(Error::Validation(format!(
                "smoothing epsilon {} must lie in [0, 1)",
                self.smoothing_epsilon
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Sampler state carried across retraining steps.
#[derive(Debug, Clone)]
pub struct EnergyContext {
    pub buffer: ReplayBuffer,
    pub rng: Rng,
}

impl EnergyContext {
    pub fn new(capacity: usize, reinit_prob: f64, rng: Rng) -> Result<Self> {
        Ok(Self {
            buffer: ReplayBuffer::new(capacity, reinit_prob)?,
            rng,
        })
    }
}

/// Loss terms of one retraining mini-batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepTerms {
    pub source_ce: f64,
    /// Pseudo-label cross-entropy summed over selected targets, divided by the
    /// target batch size.
    pub target_ce: f64,
    pub energy: EnergyStats,
}

impl StepTerms {
    /// Objective value; the regularizer contributes `α · mean E(x_t)`.
    pub fn total(&self, alpha: f64) -> f64 {
        let reg = if alpha == 0.0 {
            0.0
        } else {
            alpha * self.energy.mean_data_energy
        };
        self.source_ce + self.target_ce + reg
    }
}

/// Gradient of one retraining mini-batch objective.
///
/// `source` pairs inputs with their label distributions; `target` and
/// `labels` are parallel. Unselected targets only enter the energy term.
pub fn step_gradient(
    params: &MlpParams,
    source: &[(&[f64], &[f64])],
    target: &[&[f64]],
    labels: &[&PseudoLabel],
    cfg: &RoundConfig,
    ctx: &mut EnergyContext,
) -> Result<(StepTerms, Gradients)> {
    if target.len() != labels.len() {
        return Err(Error::Shape {
            expected: target.len(),
            got: labels.len(),
        });
    }
    let (source_ce, mut grads) = model::backward(params, source.iter().copied())?;
    let mut terms = StepTerms {
        source_ce,
        ..StepTerms::default()
    };
    let selected: Vec<(&[f64], &[f64])> = target
        .iter()
        .zip(labels)
        .filter_map(|(x, l)| l.target().map(|t| (*x, t)))
        .collect();
    if !selected.is_empty() {
        let (ce, g) = model::backward(params, selected.iter().copied())?;
        let w = selected.len() as f64 / target.len() as f64;
        terms.target_ce = w * ce;
        grads.add_scaled(w, &g);
    }
    if !target.is_empty() && cfg.alpha > 0.0 {
        let (stats, g) = energy::regularizer_grad(
            params,
            target,
            cfg.regularizer,
            &cfg.sgld,
            &mut ctx.buffer,
            &mut ctx.rng,
            cfg.alpha,
        )?;
        terms.energy = stats;
        grads.add_scaled(1.0, &g);
    }
    Ok((terms, grads))
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochLosses {
    pub source_ce: f64,
    pub target_ce: f64,
    pub mean_energy: f64,
    pub mean_neg_energy: Option<f64>,
    pub divergent_chains: usize,
    pub total: f64,
}

fn one_hot_targets(set: &LabeledSet) -> Vec<Vec<f64>> {
    set.labels()
        .iter()
        .map(|&c| {
            let mut t = vec![0.0; set.n_classes()];
            t[c] = 1.0;
            t
        })
        .collect()
}

fn check_model_data(params: &MlpParams, source: &LabeledSet) -> Result<()> {
    if source.dim() != params.input_dim() {
        return Err(Error::Shape {
            expected: params.input_dim(),
            got: source.dim(),
        });
    }
    if source.n_classes() != params.n_classes() {
        return Err(Error::Shape {
            expected: params.n_classes(),
            got: source.n_classes(),
        });
    }
    Ok(())
}

/// Mini-batch SGD over the source set, optionally paired with target
/// batches. An epoch is one pass over the shuffled source set; target
/// batches are drawn from a separately shuffled order, cycling as needed.
fn run_epochs(
    params: &mut MlpParams,
    opt: &mut OptimizerState,
    source: &LabeledSet,
    target: Option<(&UnlabeledSet, &[PseudoLabel])>,
    cfg: &RoundConfig,
    ctx: &mut EnergyContext,
    rng: &mut Rng,
) -> Result<Vec<EpochLosses>> {
    check_model_data(params, source)?;
    if cfg.batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".into()));
    }
    let source_targets = one_hot_targets(source);
    let mut source_rng = rng.fork(0);
    let mut target_rng = rng.fork(1);
    let mut source_order: Vec<usize> = (0..source.len()).collect();
    let mut target_order: Vec<usize> = target.map_or(Vec::new(), |(t, _)| (0..t.len()).collect());
    let mut history = Vec::with_capacity(cfg.epochs_per_round);
    for _ in 0..cfg.epochs_per_round {
        source_rng.shuffle(&mut source_order);
        target_rng.shuffle(&mut target_order);
        let mut acc = EpochLosses::default();
        let (mut neg_sum, mut neg_batches) = (0.0, 0usize);
        let mut batches = 0usize;
        let mut target_cursor = 0usize;
        for chunk in source_order.chunks(cfg.batch_size) {
            let src: Vec<(&[f64], &[f64])> = chunk
                .iter()
                .map(|&i| (source.features().row(i), source_targets[i].as_slice()))
                .collect();
            let (tgt, labels): (Vec<&[f64]>, Vec<&PseudoLabel>) = match target {
                Some((set, assignment)) => (0..cfg.batch_size.min(set.len()))
                    .map(|_| {
                        let i = target_order[target_cursor % target_order.len()];
                        target_cursor += 1;
                        (set.sample(i), &assignment[i])
                    })
                    .unzip(),
                None => (Vec::new(), Vec::new()),
            };
            let (terms, grads) = step_gradient(params, &src, &tgt, &labels, cfg, ctx)?;
            model::sgd_step(params, &grads, opt)?;
            acc.source_ce += terms.source_ce;
            acc.target_ce += terms.target_ce;
            acc.mean_energy += terms.energy.mean_data_energy;
            acc.total += terms.total(cfg.alpha);
            acc.divergent_chains += terms.energy.divergent_chains;
            if let Some(e) = terms.energy.mean_neg_energy {
                neg_sum += e;
                neg_batches += 1;
            }
            batches += 1;
        }
        let n = batches.max(1) as f64;
        acc.source_ce /= n;
        acc.target_ce /= n;
        acc.mean_energy /= n;
        acc.total /= n;
        acc.mean_neg_energy = (neg_batches > 0).then(|| neg_sum / neg_batches as f64);
        history.push(acc);
    }
    Ok(history)
}

/// Source-only supervised training, e.g. pre-training before adaptation.
pub fn train_source(
    params: &mut MlpParams,
    opt: &mut OptimizerState,
    source: &LabeledSet,
    epochs: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<EpochLosses>> {
    let cfg = RoundConfig {
        alpha: 0.0,
        epochs_per_round: epochs,
        batch_size,
        ..RoundConfig::default()
    };
    let mut ctx = EnergyContext::new(1, 0.0, Rng::new(0))?;
    run_epochs(params, opt, source, None, &cfg, &mut ctx, rng)
}

/// Network retraining with pseudo-labels held fixed.
#[allow(clippy::too_many_arguments)]
pub fn retrain_step(
    params: &mut MlpParams,
    opt: &mut OptimizerState,
    source: &LabeledSet,
    target: &UnlabeledSet,
    assignment: &[PseudoLabel],
    cfg: &RoundConfig,
    ctx: &mut EnergyContext,
    rng: &mut Rng,
) -> Result<Vec<EpochLosses>> {
    if assignment.len() != target.len() {
        return Err(Error::Shape {
            expected: target.len(),
            got: assignment.len(),
        });
    }
    run_epochs(
        params,
        opt,
        source,
        Some((target, assignment)),
        cfg,
        ctx,
        rng,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based.
    pub round: usize,
    pub thresholds: Thresholds,
    pub selected: Vec<usize>,
    /// `⌊p · N_k⌋` per class.
    pub budget: Vec<usize>,
    /// Mean energy over the whole target set after retraining.
    pub mean_target_energy: f64,
    pub mean_neg_energy: Option<f64>,
    pub divergent_chains: usize,
    pub source_eval: EvalResult,
    pub target_eval: Option<EvalResult>,
    pub epochs: Vec<EpochLosses>,
    pub seconds: f64,
}

impl RoundReport {
    pub fn within_budget(&self) -> bool {
        self.selected.iter().zip(&self.budget).all(|(s, b)| s <= b)
    }
}

pub fn mean_energy(params: &MlpParams, set: &UnlabeledSet) -> Result<f64> {
    let mut total = 0.0;
    for x in set.features().iter_rows() {
        total += energy::energy(params, x)?.value();
    }
    Ok(total / set.len() as f64)
}

/// Alternates pseudo-label generation and retraining for `n_rounds` rounds,
/// warm-starting each round from the previous parameters.
///
/// `target_eval` is only read for the reported target accuracy.
#[allow(clippy::too_many_arguments)]
pub fn run_self_training(
    params: &MlpParams,
    opt: &mut OptimizerState,
    source: &LabeledSet,
    target: &UnlabeledSet,
    target_eval: Option<&LabeledSet>,
    cfg: &RoundConfig,
    n_rounds: usize,
    ctx: &mut EnergyContext,
    rng: &mut Rng,
) -> Result<(MlpParams, Vec<RoundReport>)> {
    let mut params = params.clone();
    if n_rounds == 0 {
        return Ok((params, Vec::new()));
    }
    cfg.validate()?;
    if cfg.portion_schedule.len() < n_rounds {
        return Err(Error::Validation(format!(
            "portion schedule has {} entries for {n_rounds} rounds",
            cfg.portion_schedule.len()
        )));
    }
    let k = params.n_classes();
    let mut reports = Vec::with_capacity(n_rounds);
    for round in 0..n_rounds {
        let start = Instant::now();
        let thresholds = estimate_thresholds(&params, target, cfg.portion_schedule[round])?;
        let mut assignment = solve_pseudo_labels(&params, target, &thresholds)?;
        if cfg.smoothing_epsilon > 0.0 {
            assignment = smooth_labels(&assignment, cfg.smoothing_epsilon)?;
        }
        let selected = selected_counts(&assignment, k);
        let budget: Vec<usize> = (0..k)
            .map(|c| thresholds.budget(c).unwrap_or(usize::MAX))
            .collect();
        for c in 0..k {
            if selected[c] > budget[c] {
                log::warn!(
                    "round {}: class {c} received {} pseudo-labels, over its budget of {}",
                    round + 1,
                    selected[c],
                    budget[c]
                );
            }
        }
        let epochs = retrain_step(&mut params, opt, source, target, &assignment, cfg, ctx, rng)?;
        let (neg_sum, neg_n) = epochs
            .iter()
            .filter_map(|e| e.mean_neg_energy)
            .fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
        reports.push(RoundReport {
            round: round + 1,
            thresholds,
            selected,
            budget,
            mean_target_energy: mean_energy(&params, target)?,
            mean_neg_energy: (neg_n > 0).then(|| neg_sum / neg_n as f64),
            divergent_chains: epochs.iter().map(|e| e.divergent_chains).sum(),
            source_eval: evaluate(&params, source)?,
            target_eval: target_eval.map(|t| evaluate(&params, t)).transpose()?,
            epochs,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((params, reports))
}
