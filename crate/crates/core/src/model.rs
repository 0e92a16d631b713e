//! Feed-forward tanh classifier with analytic gradients and SGD-momentum.
//!
//! Hidden layers apply `tanh`; the output layer is linear and produces the
//! logits. All training losses take target *distributions* over the classes,
//! so one-hot, smoothed and skipped samples share a single code path.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Rng};

/// Weights and biases of the classifier. `weights[l]` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

/// Gradient slots mirroring an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-layer activations of one forward pass; the last entry is the logits.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub(crate) fn logits(&self) -> &[f64] {
        self.activations
            .last()
            .expect("trace holds at least the input")
    }
}

fn check_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::Validation(
            "layer_dims needs at least an input and an output size".into(),
        ));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Validation("layer sizes must be positive".into()));
    }
    Ok(())
}

impl MlpParams {
    /// All-zero network.
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        check_dims(layer_dims)?;
        let weights = layer_dims
            .windows(2)
            .map(|w| Matrix::zeros(w[1], w[0]))
            .collect();
        let biases = layer_dims[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut params = Self::zeros(layer_dims)?;
        for w in &mut params.weights {
            let bound = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.uniform_in(-bound, bound);
            }
        }
        Ok(params)
    }

    pub fn from_parts(
        layer_dims: &[usize],
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dims(layer_dims)?;
        let n_layers = layer_dims.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::Shape {
                expected: n_layers,
                got: weights.len().min(biases.len()),
            });
        }
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            if w.rows() != fan_out || w.cols() != fan_in {
                return Err(Error::Shape {
                    expected: fan_out * fan_in,
                    got: w.rows() * w.cols(),
                });
            }
            if b.len() != fan_out {
                return Err(Error::Shape {
                    expected: fan_out,
                    got: b.len(),
                });
            }
        }
        let params = Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        };
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(params)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Mutable access to the output-layer bias, e.g. to shift every logit.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        self.biases.last_mut().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data().len() + b.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    /// Inverse of [`MlpParams::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let n = w.data().len();
            w.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let m = b.len();
            b.copy_from_slice(&flat[offset..offset + m]);
            offset += m;
        }
        Ok(())
    }

    pub(crate) fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let last = self.n_layers() - 1;
        let mut activations = Vec::with_capacity(self.n_layers() + 1);
        activations.push(x.to_vec());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.matvec(activations.last().unwrap())?;
            for (zi, bi) in z.iter_mut().zip(b) {
                *zi += bi;
            }
            if l < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        Ok(Trace { activations })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.trace(x)?;
        let logits = trace.activations.pop().unwrap();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(logits)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        numerics::softmax(&self.forward(x)?)
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(numerics::argmax(&self.forward(x)?))
    }

    /// Accumulates `scale * ∂(dlogits · logits)/∂w` into `grads` and returns
    /// the matching gradient with respect to the input.
    pub(crate) fn backprop(
        &self,
        trace: &Trace,
        dlogits: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) -> Vec<f64> {
        let mut delta = dlogits.to_vec();
        for l in (0..self.n_layers()).rev() {
            let input = &trace.activations[l];
            grads.weights[l].add_outer(scale, &delta, input);
            numerics::axpy(scale, &delta, &mut grads.biases[l]);
            let mut back = self.weights[l]
                .matvec_t(&delta)
                .expect("trace shapes match parameters");
            if l > 0 {
                // input to this layer is a tanh output h: dh/dz = 1 - h²
                for (bi, hi) in back.iter_mut().zip(input) {
                    *bi *= 1.0 - hi * hi;
                }
            }
            delta = back;
        }
        delta
    }
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            weights: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &Gradients) {
        for (w, ow) in self.weights.iter_mut().zip(&other.weights) {
            numerics::axpy(a, ow.data(), w.data_mut());
        }
        for (b, ob) in self.biases.iter_mut().zip(&other.biases) {
            numerics::axpy(a, ob, b);
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.weights
            .iter_mut()
            .flat_map(|w| w.data_mut().iter_mut())
            .chain(self.biases.iter_mut().flatten())
            .for_each(|v| *v *= a);
    }

    /// Same layout as [`MlpParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn shape_matches(&self, params: &MlpParams) -> bool {
        self.weights.len() == params.weights.len()
            && self
                .weights
                .iter()
                .zip(&params.weights)
                .all(|(a, b)| a.rows() == b.rows() && a.cols() == b.cols())
            && self
                .biases
                .iter()
                .zip(&params.biases)
                .all(|(a, b)| a.len() == b.len())
    }
}

pub fn forward(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    params.forward(x)
}

pub fn predict_proba(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    params.predict_proba(x)
}

const SIMPLEX_TOL: f64 = 1e-9;

pub(crate) fn check_distribution(target: &[f64], k: usize) -> Result<()> {
    if target.len() != k {
        return Err(Error::Shape {
            expected: k,
            got: target.len(),
        });
    }
    let sum: f64 = target.iter().sum();
    if target.iter().any(|&t| !(t >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Validation(format!(
            "target {target:?} is not a probability distribution"
        )));
    }
    Ok(())
}

/// Mean cross-entropy `-Σ_k t_k log p(k|x)` over a batch of
/// `(input, target distribution)` pairs, and its exact gradient.
pub fn backward<'a, I>(params: &MlpParams, batch: I) -> Result<(f64, Gradients)>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let mut grads = Gradients::zeros_like(params);
    let mut total = 0.0;
    let mut n = 0usize;
    let mut pending = Vec::new();
    for (x, target) in batch {
        check_distribution(target, params.n_classes())?;
        let trace = params.trace(x)?;
        let logits = trace.logits();
        let lse = numerics::log_sum_exp(logits)?;
        // -Σ t_k (z_k - lse); exact zero terms skipped so saturated logits stay clean
        total += target
            .iter()
            .zip(logits)
            .filter(|(t, _)| **t != 0.0)
            .map(|(t, z)| -t * (z - lse))
            .sum::<f64>();
        let p = numerics::softmax(logits)?;
        let t_sum: f64 = target.iter().sum();
        let dlogits: Vec<f64> = p
            .iter()
            .zip(target)
            .map(|(pk, tk)| t_sum * pk - tk)
            .collect();
        pending.push((trace, dlogits));
        n += 1;
    }
    if n == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let scale = 1.0 / n as f64;
    for (trace, dlogits) in &pending {
        params.backprop(trace, dlogits, scale, &mut grads);
    }
    Ok((total * scale, grads))
}

/// SGD with momentum and decoupled-in-gradient weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Gradients,
}

impl OptimizerState {
    pub fn new(
        params: &MlpParams,
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::Validation(format!(
                "learning rate {learning_rate} must be non-negative"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Validation(format!(
                "momentum {momentum} must lie in [0, 1)"
            )));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(Error::Validation(format!(
                "weight decay {weight_decay} must be non-negative"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Gradients::zeros_like(params),
        })
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }

    pub fn reset(&mut self) {
        self.velocity.scale(0.0);
    }
}

/// `v ← μ v + g + λ w;  w ← w − η v`. Rejects the update, leaving both
/// parameters and state untouched, if anything would become non-finite.
pub fn sgd_step(
    params: &mut MlpParams,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    if !grads.shape_matches(params) || !state.velocity.shape_matches(params) {
        return Err(Error::Validation(
            "gradient shape does not match parameters".into(),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    let mut new_params = params.clone();
    let mut new_velocity = state.velocity.clone();
    let update = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = mu * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    };
    for l in 0..params.n_layers() {
        update(
            new_params.weights[l].data_mut(),
            new_velocity.weights[l].data_mut(),
            grads.weights[l].data(),
        );
        update(
            &mut new_params.biases[l],
            &mut new_velocity.biases[l],
            &grads.biases[l],
        );
    }
    if !new_params.is_finite() || !new_velocity.is_finite() {
        return Err(Error::NonFinite("updated parameters"));
    }
    *params = new_params;
    state.velocity = new_velocity;
    Ok(())
}

const CHECKPOINT_MAGIC: &str = "ecst-mlp";
const CHECKPOINT_VERSION: u32 = 1;

/// Plain-text checkpoint. See `docs/formats.md`.
pub fn checkpoint_to_string(params: &MlpParams) -> String {
    let mut out = String::new();
    write!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").unwrap();
    for d in &params.layer_dims {
        write!(out, " {d}").unwrap();
    }
    out.push('\n');
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        write!(out, "W{l}").unwrap();
        for v in w.data() {
            write!(out, " {v:e}").unwrap();
        }
        out.push('\n');
        write!(out, "b{l}").unwrap();
        for v in b {
            write!(out, " {v:e}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn checkpoint_from_str(text: &str) -> Result<MlpParams> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut fields = header.split_ascii_whitespace();
    if fields.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad(format!("missing '{CHECKPOINT_MAGIC}' header")));
    }
    let version: u32 = fields
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing format version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let dims = fields
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| bad(format!("bad layer size: {e}")))?;
    check_dims(&dims).map_err(|e| bad(e.to_string()))?;

    let mut tensor = |name: String, len: usize| -> Result<Vec<f64>> {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        let mut fields = line.split_ascii_whitespace();
        if fields.next() != Some(name.as_str()) {
            return Err(bad(format!("expected tensor {name}")));
        }
        let values = fields
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("{name}: {e}")))?;
        if values.len() != len {
            return Err(bad(format!(
                "{name}: expected {len} values, found {}",
                values.len()
            )));
        }
        Ok(values)
    };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let w = tensor(format!("W{l}"), fan_in * fan_out)?;
        weights.push(Matrix::from_vec(fan_out, fan_in, w).map_err(|e| bad(e.to_string()))?);
        biases.push(tensor(format!("b{l}"), fan_out)?);
    }
    MlpParams::from_parts(&dims, weights, biases).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
