//! Classifier logits read as an energy-based model.
//!
//! `E(x) = -log Σ_k exp(f(x)[k])`, with `E(x, k) = -f(x)[k]` for the joint
//! form. The regularizer either penalizes `E` on target samples directly or
//! estimates the maximum-likelihood gradient of `log p(x)` by contrastive
//! divergence against Langevin samples kept in a replay buffer.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::model::{Gradients, MlpParams};
use crate::numerics::{self, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyValue {
    value: f64,
    logits: Vec<f64>,
}

impl EnergyValue {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Joint energy `E(x, y = k) = -f(x)[k]`.
    pub fn joint(&self, k: usize) -> f64 {
        -self.logits[k]
    }
}

pub fn energy(params: &MlpParams, x: &[f64]) -> Result<EnergyValue> {
    let logits = params.forward(x)?;
    let value = -numerics::log_sum_exp(&logits)?;
    Ok(EnergyValue { value, logits })
}

/// Gradient of the mean energy of a batch with respect to the parameters.
pub fn energy_grad_params<'a, I>(params: &MlpParams, batch: I) -> Result<Gradients>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let traces = batch
        .into_iter()
        .map(|x| params.trace(x))
        .collect::<Result<Vec<_>>>()?;
    if traces.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let mut grads = Gradients::zeros_like(params);
    let scale = 1.0 / traces.len() as f64;
    for trace in &traces {
        // ∂(-LSE)/∂z = -softmax(z)
        let dlogits: Vec<f64> = numerics::softmax(trace.logits())?
            .iter()
            .map(|p| -p)
            .collect();
        params.backprop(trace, &dlogits, scale, &mut grads);
    }
    Ok(grads)
}

pub fn energy_grad_input(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    let trace = params.trace(x)?;
    let dlogits: Vec<f64> = numerics::softmax(trace.logits())?
        .iter()
        .map(|p| -p)
        .collect();
    let mut scratch = Gradients::zeros_like(params);
    Ok(params.backprop(&trace, &dlogits, 0.0, &mut scratch))
}

/// A differentiable energy over input space, as seen by the sampler.
pub trait InputEnergy {
    fn input_dim(&self) -> usize;
    /// Non-finite values signal a diverged state.
    fn energy(&self, x: &[f64]) -> f64;
    fn grad_input(&self, x: &[f64]) -> Vec<f64>;
}

impl InputEnergy for MlpParams {
    fn input_dim(&self) -> usize {
        MlpParams::input_dim(self)
    }

    fn energy(&self, x: &[f64]) -> f64 {
        energy(self, x).map_or(f64::NAN, |e| e.value)
    }

    fn grad_input(&self, x: &[f64]) -> Vec<f64> {
        energy_grad_input(self, x).unwrap_or_else(|_| vec![f64::NAN; x.len()])
    }
}

/// `E(x) = ‖x‖² / 2`, whose Gibbs law is the standard normal.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticEnergy {
    pub dim: usize,
}

impl InputEnergy for QuadraticEnergy {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: &[f64]) -> f64 {
        0.5 * numerics::dot(x, x)
    }

    fn grad_input(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgldConfig {
    pub n_steps: usize,
    pub step_size: f64,
    pub noise_std: f64,
    /// Use the Langevin noise scale `√(2·step_size)` instead of `noise_std`.
    pub proper_sgld: bool,
    /// Per-dimension `(lo, hi)` box for fresh chain starts.
    pub init_bounds: Vec<(f64, f64)>,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            n_steps: 20,
            step_size: 1.0,
            noise_std: 0.01,
            proper_sgld: false,
            init_bounds: Vec::new(),
        }
    }
}

impl SgldConfig {
    pub fn effective_noise_std(&self) -> f64 {
        if self.proper_sgld {
            (2.0 * self.step_size).sqrt()
        } else {
            self.noise_std
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Validation(format!(
                "SGLD step size {} must be positive",
                self.step_size
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Validation(format!(
                "SGLD noise std {} must be non-negative",
                self.noise_std
            )));
        }
        if self.init_bounds.len() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: self.init_bounds.len(),
            });
        }
        if self
            .init_bounds
            .iter()
            .any(|&(lo, hi)| !lo.is_finite() || !hi.is_finite() || lo > hi)
        {
            return Err(Error::Validation(
                "SGLD init bounds must be finite with lo <= hi".into(),
            ));
        }
        Ok(())
    }

    /// Box spanning each column of `features`, widened by 10% of its range
    /// on both sides.
    pub fn bounds_from_features(features: &numerics::Matrix) -> Vec<(f64, f64)> {
        (0..features.cols())
            .map(|c| {
                let (lo, hi) = features
                    .iter_rows()
                    .map(|r| r[c])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    });
                let pad = 0.1 * (hi - lo);
                (lo - pad, hi + pad)
            })
            .collect()
    }
}

/// Persistent sampler states for contrastive divergence. FIFO at capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    reinit_prob: f64,
    samples: VecDeque<Vec<f64>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, reinit_prob: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Validation("replay capacity must be positive".into()));
        }
        if !(0.0..=1.0).contains(&reinit_prob) {
            return Err(Error::Validation(format!(
                "reinit probability {reinit_prob} must lie in [0, 1]"
            )));
        }
        Ok(Self {
            capacity,
            reinit_prob,
            samples: VecDeque::with_capacity(capacity.min(4096)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn reinit_prob(&self) -> f64 {
        self.reinit_prob
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.iter().map(Vec::as_slice)
    }

    /// Stores a sample, evicting the oldest one when full. Non-finite samples
    /// are dropped.
    pub fn push(&mut self, sample: Vec<f64>) {
        if sample.iter().any(|v| !v.is_finite()) {
            return;
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgldOutput {
    pub samples: Vec<Vec<f64>>,
    /// Chains restarted from a fresh uniform draw after going non-finite.
    pub divergent: usize,
}

fn uniform_start(bounds: &[(f64, f64)], rng: &mut Rng) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| rng.uniform_in(lo, hi))
        .collect()
}

/// Runs `n` Langevin chains `x ← x − ε ∇E(x) + σ η` for `cfg.n_steps` steps.
///
/// Chains start from a random buffer entry, or with probability
/// `reinit_prob` (always, if the buffer is empty) from a uniform draw over
/// `cfg.init_bounds`. Chain `i` uses its own stream derived from a seed drawn
/// once per call, so chains are independent of evaluation order. Final states
/// are pushed back into the buffer.
pub fn sgld_sample<E: InputEnergy + ?Sized>(
    energy: &E,
    cfg: &SgldConfig,
    buffer: &mut ReplayBuffer,
    rng: &mut Rng,
    n: usize,
) -> Result<SgldOutput> {
    if n == 0 {
        return Err(Error::Domain("sgld_sample needs at least one chain".into()));
    }
    let dim = energy.input_dim();
    cfg.validate(dim)?;
    let noise = cfg.effective_noise_std();
    let base_seed = rng.next_u64();

    let starts: Vec<Option<usize>> = (0..n)
        .map(|_| {
            let fresh = rng.uniform() < buffer.reinit_prob;
            if fresh || buffer.is_empty() {
                None
            } else {
                Some(rng.index(buffer.len()))
            }
        })
        .collect();

    let mut divergent = 0;
    let mut samples = Vec::with_capacity(n);
    for (chain, start) in starts.into_iter().enumerate() {
        let mut chain_rng = Rng::with_stream(base_seed, chain as u64);
        let mut x = match start {
            Some(i) => buffer.samples[i].clone(),
            None => uniform_start(&cfg.init_bounds, &mut chain_rng),
        };
        for _ in 0..cfg.n_steps {
            let g = energy.grad_input(&x);
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi += -cfg.step_size * gi + noise * chain_rng.normal();
            }
            if x.iter().any(|v| !v.is_finite()) {
                divergent += 1;
                x = uniform_start(&cfg.init_bounds, &mut chain_rng);
            }
        }
        samples.push(x);
    }
    for s in &samples {
        buffer.push(s.clone());
    }
    if divergent > 0 {
        log::debug!("sgld: {divergent} chain restarts");
    }
    Ok(SgldOutput { samples, divergent })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegularizerMode {
    /// Penalize `α · E(x_t)` on target samples as written in the objective.
    #[default]
    Literal,
    /// Contrastive-divergence estimate of `-α ∇ log p(x_t)`.
    MaximumLikelihood,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnergyStats {
    pub mean_data_energy: f64,
    pub mean_neg_energy: Option<f64>,
    pub divergent_chains: usize,
}

fn mean_energy(params: &MlpParams, batch: &[&[f64]]) -> Result<f64> {
    let mut total = 0.0;
    for x in batch {
        total += energy(params, x)?.value;
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of the energy regularizer on a target batch.
///
/// `Literal`: `α ∇ mean E(x_t)`. `MaximumLikelihood`:
/// `α (∇ mean E(x_t) − ∇ mean E(x⁻))` with `x⁻` drawn by [`sgld_sample`],
/// one negative per data sample.
pub fn regularizer_grad(
    params: &MlpParams,
    batch: &[&[f64]],
    mode: RegularizerMode,
    cfg: &SgldConfig,
    buffer: &mut ReplayBuffer,
    rng: &mut Rng,
    alpha: f64,
) -> Result<(EnergyStats, Gradients)> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Validation(format!(
            "alpha {alpha} must be non-negative"
        )));
    }
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let mut stats = EnergyStats {
        mean_data_energy: mean_energy(params, batch)?,
        ..EnergyStats::default()
    };
    if alpha == 0.0 {
        return Ok((stats, Gradients::zeros_like(params)));
    }
    let mut grads = energy_grad_params(params, batch.iter().copied())?;
    if mode == RegularizerMode::MaximumLikelihood {
        let negatives = sgld_sample(params, cfg, buffer, rng, batch.len())?;
        let neg_refs: Vec<&[f64]> = negatives.samples.iter().map(Vec::as_slice).collect();
        stats.mean_neg_energy = Some(mean_energy(params, &neg_refs)?);
        stats.divergent_chains = negatives.divergent;
        let neg_grads = energy_grad_params(params, neg_refs.iter().copied())?;
        grads.add_scaled(-1.0, &neg_grads);
    }
    grads.scale(alpha);
    Ok((stats, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::numerics::Rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn linear(w: Vec<Vec<f64>>, b: Vec<f64>) -> MlpParams {
        let m = Matrix::from_rows(&w).unwrap();
        MlpParams::from_parts(&[m.cols(), m.rows()], vec![m], vec![b]).unwrap()
    }

    fn random_net(seed: u64, dims: &[usize]) -> (MlpParams, Rng) {
        let mut rng = Rng::new(seed);
        let mut p = MlpParams::init(dims, &mut rng).unwrap();
        let mut flat = p.to_flat();
        // non-zero biases so the output layer is exercised too
        flat.iter_mut().for_each(|v| *v += 0.3 * rng.normal());
        p.set_flat(&flat).unwrap();
        (p, rng)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn energy_examples() {
        let zero = MlpParams::zeros(&[2, 3]).unwrap();
        assert_abs_diff_eq!(
            energy(&zero, &[4.0, -1.0]).unwrap().value(),
            -1.0986122886681098,
            epsilon = 1e-15
        );
        let net = linear(vec![vec![0.0], vec![0.0]], vec![1.0, 0.0]);
        assert_abs_diff_eq!(
            energy(&net, &[0.0]).unwrap().value(),
            -1.3132616875182228,
            epsilon = 1e-15
        );
        assert!(matches!(energy(&zero, &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn logit_shift_moves_energy_by_minus_c() {
        let (mut net, mut rng) = random_net(5, &[3, 6, 4]);
        let x = numerics::gaussian(&mut rng, 3);
        let e0 = energy(&net, &x).unwrap().value();
        let p0 = net.predict_proba(&x).unwrap();
        let c = 2.75;
        net.output_bias_mut().iter_mut().for_each(|b| *b += c);
        let e1 = energy(&net, &x).unwrap().value();
        assert_abs_diff_eq!(e1 - e0, -c, epsilon = 1e-12);
        for (a, b) in p0.iter().zip(net.predict_proba(&x).unwrap()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn linear_bias_gradient_is_minus_softmax() {
        let net = linear(vec![vec![0.4, -1.0], vec![2.0, 0.5]], vec![0.1, -0.3]);
        let x = [0.7, -0.2];
        let g = energy_grad_params(&net, [&x[..]]).unwrap();
        // z = (0.58, 1.0) → p = softmax(z)
        let z0: f64 = 0.4 * 0.7 + 0.2 + 0.1;
        let z1: f64 = 2.0 * 0.7 - 0.5 * 0.2 - 0.3;
        let p0 = 1.0 / (1.0 + (z1 - z0).exp());
        assert_abs_diff_eq!(g.biases[0][0], -p0, epsilon = 1e-15);
        assert_abs_diff_eq!(g.biases[0][1], -(1.0 - p0), epsilon = 1e-15);
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let (net, mut rng) = random_net(8, &[2, 5, 3]);
        let x = numerics::gaussian(&mut rng, 2);
        let one = energy_grad_params(&net, [x.as_slice()]).unwrap();
        let two = energy_grad_params(&net, [x.as_slice(), x.as_slice()]).unwrap();
        for (a, b) in one.to_flat().iter().zip(two.to_flat()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let empty: Vec<&[f64]> = Vec::new();
        assert!(matches!(
            energy_grad_params(&net, empty),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn param_gradient_matches_central_differences() {
        let (net, mut rng) = random_net(21, &[3, 4, 3]);
        let xs: Vec<Vec<f64>> = (0..5).map(|_| numerics::gaussian(&mut rng, 3)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let analytic = energy_grad_params(&net, refs.iter().copied())
            .unwrap()
            .to_flat();
        let base = net.to_flat();
        let mut probe = net.clone();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut w = base.clone();
            w[i] += h;
            probe.set_flat(&w).unwrap();
            let up = mean_energy(&probe, &refs).unwrap();
            w[i] -= 2.0 * h;
            probe.set_flat(&w).unwrap();
            let down = mean_energy(&probe, &refs).unwrap();
            let numeric = (up - down) / (2.0 * h);
            assert!(rel(numeric, analytic[i]) < 1e-6, "param {i}");
        }
    }

    #[test]
    fn input_gradient_linear_and_zero_cases() {
        let zero = MlpParams::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(
            energy_grad_input(&zero, &[1.0, 2.0, 3.0]).unwrap(),
            vec![0.0; 3]
        );

        let w = vec![vec![0.4, -1.0, 0.2], vec![2.0, 0.5, -0.7]];
        let net = linear(w.clone(), vec![0.1, -0.3]);
        let x = [0.7, -0.2, 1.1];
        let g = energy_grad_input(&net, &x).unwrap();
        let p = net.predict_proba(&x).unwrap();
        for d in 0..3 {
            let want = -(w[0][d] * p[0] + w[1][d] * p[1]);
            assert_abs_diff_eq!(g[d], want, epsilon = 1e-15);
            let mut up = x;
            up[d] += 1e-5;
            let mut down = x;
            down[d] -= 1e-5;
            let numeric =
                (energy(&net, &up).unwrap().value() - energy(&net, &down).unwrap().value()) / 2e-5;
            assert!(rel(numeric, g[d]) < 1e-6);
        }
        let far = [100.0, -100.0, 57.0];
        assert!(energy_grad_input(&net, &far)
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
    }

    fn quad_cfg(n_steps: usize, step: f64, proper: bool, noise: f64) -> SgldConfig {
        SgldConfig {
            n_steps,
            step_size: step,
            noise_std: noise,
            proper_sgld: proper,
            init_bounds: vec![(-3.0, 3.0); 2],
        }
    }

    #[test]
    fn zero_steps_return_initialization() {
        let q = QuadraticEnergy { dim: 2 };
        let mut buffer = ReplayBuffer::new(10, 0.0).unwrap();
        buffer.push(vec![0.25, -1.5]);
        let mut rng = Rng::new(1);
        let out = sgld_sample(&q, &quad_cfg(0, 0.1, false, 0.1), &mut buffer, &mut rng, 3).unwrap();
        assert_eq!(out.samples, vec![vec![0.25, -1.5]; 3]);
        assert_eq!(out.divergent, 0);
    }

    #[test]
    fn noiseless_chain_descends_energy() {
        let q = QuadraticEnergy { dim: 2 };
        let mut buffer = ReplayBuffer::new(10, 0.0).unwrap();
        buffer.push(vec![2.0, -1.0]);
        let mut rng = Rng::new(2);
        let mut last = q.energy(&[2.0, -1.0]);
        for _ in 0..50 {
            let out =
                sgld_sample(&q, &quad_cfg(1, 0.05, false, 0.0), &mut buffer, &mut rng, 1).unwrap();
            let e = q.energy(&out.samples[0]);
            assert!(e <= last);
            last = e;
            buffer.clear();
            buffer.push(out.samples[0].clone());
        }
    }

    #[test]
    fn replay_buffer_is_bounded_fifo() {
        let mut buffer = ReplayBuffer::new(3, 0.5).unwrap();
        for i in 0..5 {
            buffer.push(vec![i as f64]);
        }
        buffer.push(vec![f64::NAN]);
        assert_eq!(buffer.len(), 3);
        let kept: Vec<f64> = buffer.samples().map(|s| s[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
        assert!(ReplayBuffer::new(0, 0.1).is_err());
        assert!(ReplayBuffer::new(4, 1.5).is_err());
    }

    #[test]
    fn full_reinit_starts_every_chain_uniform() {
        let q = QuadraticEnergy { dim: 2 };
        let mut buffer = ReplayBuffer::new(100, 1.0).unwrap();
        buffer.push(vec![50.0, 50.0]);
        let mut rng = Rng::new(4);
        let out =
            sgld_sample(&q, &quad_cfg(0, 0.1, false, 0.0), &mut buffer, &mut rng, 40).unwrap();
        assert!(out
            .samples
            .iter()
            .all(|s| s.iter().all(|v| (-3.0..3.0).contains(v))));
        assert_eq!(buffer.len(), 41);
    }

    #[test]
    fn exploding_chain_restarts_and_is_counted() {
        // negative-curvature energy with a huge step blows up immediately
        struct Repulsive;
        impl InputEnergy for Repulsive {
            fn input_dim(&self) -> usize {
                1
            }
            fn energy(&self, x: &[f64]) -> f64 {
                -x[0] * x[0]
            }
            fn grad_input(&self, x: &[f64]) -> Vec<f64> {
                vec![-1e300 * x[0].signum() * x[0].abs().max(1.0)]
            }
        }
        let cfg = SgldConfig {
            n_steps: 5,
            step_size: 1e10,
            noise_std: 0.0,
            proper_sgld: false,
            init_bounds: vec![(1.0, 2.0)],
        };
        let mut buffer = ReplayBuffer::new(10, 1.0).unwrap();
        let mut rng = Rng::new(9);
        let out = sgld_sample(&Repulsive, &cfg, &mut buffer, &mut rng, 2).unwrap();
        assert!(out.divergent > 0);
        assert!(out.samples.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn proper_sgld_forces_langevin_noise() {
        let cfg = quad_cfg(1, 0.02, true, 123.0);
        assert_abs_diff_eq!(cfg.effective_noise_std(), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let (net, _) = random_net(3, &[2, 4, 2]);
        let cfg = quad_cfg(10, 0.5, false, 0.01);
        let run = || {
            let mut buffer = ReplayBuffer::new(50, 0.05).unwrap();
            let mut rng = Rng::new(77);
            let a = sgld_sample(&net, &cfg, &mut buffer, &mut rng, 8).unwrap();
            let b = sgld_sample(&net, &cfg, &mut buffer, &mut rng, 8).unwrap();
            (a, b)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn regularizer_zero_alpha_and_literal_definition() {
        let (net, mut rng) = random_net(13, &[2, 5, 3]);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| numerics::gaussian(&mut rng, 2)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let cfg = SgldConfig {
            init_bounds: vec![(-2.0, 2.0); 2],
            ..SgldConfig::default()
        };
        let mut buffer = ReplayBuffer::new(100, 0.05).unwrap();
        for mode in [RegularizerMode::Literal, RegularizerMode::MaximumLikelihood] {
            let (_, g) =
                regularizer_grad(&net, &refs, mode, &cfg, &mut buffer, &mut rng, 0.0).unwrap();
            assert_eq!(g.max_abs(), 0.0);
        }
        let alpha = 0.7;
        let (stats, g) = regularizer_grad(
            &net,
            &refs,
            RegularizerMode::Literal,
            &cfg,
            &mut buffer,
            &mut rng,
            alpha,
        )
        .unwrap();
        let mut want = energy_grad_params(&net, refs.iter().copied()).unwrap();
        want.scale(alpha);
        assert_eq!(g, want);
        assert!(stats.mean_neg_energy.is_none());
        assert!(regularizer_grad(
            &net,
            &refs,
            RegularizerMode::Literal,
            &cfg,
            &mut buffer,
            &mut rng,
            -1.0
        )
        .is_err());
    }

    #[test]
    fn maximum_likelihood_phases_cancel_on_data_negatives() {
        let (net, mut rng) = random_net(17, &[2, 5, 3]);
        let x = numerics::gaussian(&mut rng, 2);
        let batch = vec![x.as_slice(); 3];
        let cfg = SgldConfig {
            n_steps: 0,
            init_bounds: vec![(-2.0, 2.0); 2],
            ..SgldConfig::default()
        };
        let mut buffer = ReplayBuffer::new(100, 0.0).unwrap();
        buffer.push(x.clone());
        let (stats, g) = regularizer_grad(
            &net,
            &batch,
            RegularizerMode::MaximumLikelihood,
            &cfg,
            &mut buffer,
            &mut rng,
            1.0,
        )
        .unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(stats.mean_neg_energy, Some(stats.mean_data_energy));
    }

    proptest! {
        #[test]
        fn partition_cancellation(seed in 0u64..10_000, k in 2usize..6) {
            let (net, mut rng) = random_net(seed, &[3, 5, k]);
            let x: Vec<f64> = numerics::gaussian(&mut rng, 3).iter().map(|v| 3.0 * v).collect();
            let e = energy(&net, &x).unwrap();
            let p = net.predict_proba(&x).unwrap();
            for (z, pc) in e.logits().iter().zip(&p) {
                prop_assert!(((z + e.value()).exp() - pc).abs() < 1e-10);
            }
            let neg_joint: Vec<f64> = (0..k).map(|c| -e.joint(c)).collect();
            prop_assert!((e.value() + numerics::log_sum_exp(&neg_joint).unwrap()).abs() < 1e-12);
        }
    }
}
