//! Central finite differences against the analytic gradients, over random
//! network shapes, batches and label assignments.

use std::fmt;

use crate::energy::{energy_grad_input, energy_grad_params, RegularizerMode};
use crate::error::Result;
use crate::model::{backward, MlpParams};
use crate::numerics::{log_sum_exp, Rng};
use crate::selftrain::{
    select_class, smooth_labels, step_gradient, EnergyContext, PseudoLabel, RoundConfig, Thresholds,
};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-6;
/// Denominator floor, so near-zero gradient entries are compared on an
/// absolute scale instead of amplifying rounding noise.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    SourceCe,
    PseudoCe,
    SmoothedCe,
    EnergyParams,
    EnergyInput,
    StepLoss,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::SourceCe,
        Objective::PseudoCe,
        Objective::SmoothedCe,
        Objective::EnergyParams,
        Objective::EnergyInput,
        Objective::StepLoss,
    ];
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Objective::SourceCe => "source_ce",
            Objective::PseudoCe => "pseudo_ce",
            Objective::SmoothedCe => "smoothed_ce",
            Objective::EnergyParams => "energy_params",
            Objective::EnergyInput => "energy_input",
            Objective::StepLoss => "step_loss",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub config: usize,
    pub objective: Objective,
    pub layer_dims: Vec<usize>,
    pub n_coords: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.results
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.max_rel_err < REL_TOL)
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.results
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

// Loss values from the forward pass alone.

fn ce(params: &MlpParams, x: &[f64], t: &[f64]) -> Result<f64> {
    let z = params.forward(x)?;
    let lse = log_sum_exp(&z)?;
    Ok(t.iter().zip(&z).map(|(tk, zk)| tk * (lse - zk)).sum())
}

fn mean_ce(params: &MlpParams, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let mut s = 0.0;
    for (x, t) in batch {
        s += ce(params, x, t)?;
    }
    Ok(s / batch.len() as f64)
}

fn energy_value(params: &MlpParams, x: &[f64]) -> Result<f64> {
    Ok(-log_sum_exp(&params.forward(x)?)?)
}

fn mean_energy(params: &MlpParams, xs: &[Vec<f64>]) -> Result<f64> {
    let mut s = 0.0;
    for x in xs {
        s += energy_value(params, x)?;
    }
    Ok(s / xs.len() as f64)
}

/// Largest relative error between `analytic` and central differences of
/// `f` around `point`.
fn compare<F>(point: &[f64], analytic: &[f64], mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(point.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + FD_STEP;
        let up = f(&probe)?;
        probe[i] = point[i] - FD_STEP;
        let down = f(&probe)?;
        probe[i] = point[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

fn compare_params<F>(params: &MlpParams, analytic: &[f64], mut loss: F) -> Result<f64>
where
    F: FnMut(&MlpParams) -> Result<f64>,
{
    let mut probe = params.clone();
    compare(&params.to_flat(), analytic, |w| {
        probe.set_flat(w)?;
        loss(&probe)
    })
}

fn random_point(rng: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| 1.5 * rng.normal()).collect()
}

fn one_hot(k: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; k];
    t[c] = 1.0;
    t
}

/// Random network: Glorot weights plus perturbed, non-zero biases.
fn random_network(rng: &mut Rng) -> Result<MlpParams> {
    let d = 1 + rng.index(8);
    let k = 2 + rng.index(4);
    let mut dims = vec![d];
    for _ in 0..rng.index(3) {
        dims.push(1 + rng.index(16));
    }
    dims.push(k);
    let mut params = MlpParams::init(&dims, rng)?;
    let mut flat = params.to_flat();
    for w in flat.iter_mut() {
        *w += 0.3 * rng.normal();
    }
    params.set_flat(&flat)?;
    Ok(params)
}

/// Pseudo-labels from the closed-form solver under random thresholds, with
/// at least one selected sample.
fn random_pseudo_labels(
    params: &MlpParams,
    xs: &[Vec<f64>],
    rng: &mut Rng,
) -> Result<Vec<PseudoLabel>> {
    let k = params.n_classes();
    let lambda: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.0, 0.8)).collect();
    let th = Thresholds::new(lambda, 0.5)?;
    let mut labels = Vec::with_capacity(xs.len());
    for x in xs {
        let probs = params.predict_proba(x)?;
        labels.push(match select_class(&probs, &th) {
            Some(c) => PseudoLabel::one_hot(c, k),
            None => PseudoLabel::Unselected,
        });
    }
    if labels.iter().all(|l| l.class().is_none()) {
        labels[0] = PseudoLabel::one_hot(rng.index(k), k);
    }
    Ok(labels)
}

fn labeled_batch(labels: &[PseudoLabel], xs: &[Vec<f64>]) -> Vec<(Vec<f64>, Vec<f64>)> {
    xs.iter()
        .zip(labels)
        .filter_map(|(x, l)| l.target().map(|t| (x.clone(), t.to_vec())))
        .collect()
}

fn check_ce(params: &MlpParams, batch: &[(Vec<f64>, Vec<f64>)]) -> Result<(usize, f64)> {
    let (_, g) = backward(
        params,
        batch.iter().map(|(x, t)| (x.as_slice(), t.as_slice())),
    )?;
    let analytic = g.to_flat();
    let err = compare_params(params, &analytic, |p| mean_ce(p, batch))?;
    Ok((analytic.len(), err))
}

fn check_objective(
    objective: Objective,
    params: &MlpParams,
    rng: &mut Rng,
) -> Result<(usize, f64)> {
    let d = params.input_dim();
    let k = params.n_classes();
    let b = 1 + rng.index(8);
    let xs: Vec<Vec<f64>> = (0..b).map(|_| random_point(rng, d)).collect();
    match objective {
        Objective::SourceCe => {
            let batch: Vec<_> = xs
                .iter()
                .map(|x| (x.clone(), one_hot(k, rng.index(k))))
                .collect();
            check_ce(params, &batch)
        }
        Objective::PseudoCe => {
            let labels = random_pseudo_labels(params, &xs, rng)?;
            check_ce(params, &labeled_batch(&labels, &xs))
        }
        Objective::SmoothedCe => {
            let labels = random_pseudo_labels(params, &xs, rng)?;
            let smoothed = smooth_labels(&labels, rng.uniform_in(0.01, 0.3))?;
            check_ce(params, &labeled_batch(&smoothed, &xs))
        }
        Objective::EnergyParams => {
            let g = energy_grad_params(params, xs.iter().map(|x| x.as_slice()))?;
            let analytic = g.to_flat();
            let err = compare_params(params, &analytic, |p| mean_energy(p, &xs))?;
            Ok((analytic.len(), err))
        }
        Objective::EnergyInput => {
            let mut worst = 0.0f64;
            for x in &xs {
                let analytic = energy_grad_input(params, x)?;
                worst = worst.max(compare(x, &analytic, |y| energy_value(params, y))?);
            }
            Ok((d * xs.len(), worst))
        }
        Objective::StepLoss => {
            let source: Vec<_> = (0..1 + rng.index(8))
                .map(|_| (random_point(rng, d), one_hot(k, rng.index(k))))
                .collect();
            let mut labels = random_pseudo_labels(params, &xs, rng)?;
            if rng.uniform() < 0.5 {
                labels = smooth_labels(&labels, 0.1)?;
            }
            let cfg = RoundConfig {
                alpha: rng.uniform_in(0.1, 2.0),
                regularizer: RegularizerMode::Literal,
                ..RoundConfig::default()
            };
            let mut ctx = EnergyContext::new(1, 0.0, Rng::new(0))?;
            let src: Vec<(&[f64], &[f64])> = source
                .iter()
                .map(|(x, t)| (x.as_slice(), t.as_slice()))
                .collect();
            let tgt: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
            let lab: Vec<&PseudoLabel> = labels.iter().collect();
            let (_, g) = step_gradient(params, &src, &tgt, &lab, &cfg, &mut ctx)?;
            let analytic = g.to_flat();
            let selected = labeled_batch(&labels, &xs);
            let w = selected.len() as f64 / xs.len() as f64;
            let err = compare_params(params, &analytic, |p| {
                let mut loss = mean_ce(p, &source)? + cfg.alpha * mean_energy(p, &xs)?;
                if !selected.is_empty() {
                    loss += w * mean_ce(p, &selected)?;
                }
                Ok(loss)
            })?;
            Ok((analytic.len(), err))
        }
    }
}

/// Checks every objective on `n_configs` random networks.
pub fn run_suite(n_configs: usize, seed: u64) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for config in 0..n_configs {
        let mut rng = Rng::with_stream(seed, config as u64);
        let params = random_network(&mut rng)?;
        for objective in Objective::ALL {
            let (n_coords, max_rel_err) = check_objective(objective, &params, &mut rng)?;
            report.results.push(CheckResult {
                config,
                objective,
                layer_dims: params.layer_dims().to_vec(),
                n_coords,
                max_rel_err,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_suite(10, 3).unwrap();
        assert_eq!(report.results.len(), 60);
        assert!(report.passed(), "worst: {:?}", report.worst());
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let p = [1.0, 2.0];
        let err = compare(&p, &[2.0, 4.5], |x| Ok(x[0] * x[0] + x[1] * x[1])).unwrap();
        assert!((err - 0.5 / 4.5).abs() < 1e-6);
    }

    #[test]
    fn floor_applies_only_near_zero() {
        assert_eq!(relative_error(0.0, 1e-9), 1e-6);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
