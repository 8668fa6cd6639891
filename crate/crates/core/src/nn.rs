//! Minimal dense network substrate.
//!
//! Parameters live in one flat [`ParamVector`] so that transport, averaging
//! and EMA all act on a single buffer. Layer `l` occupies a contiguous block
//! holding its weights row-major as `(out_dim, in_dim)` followed by its
//! `out_dim` biases. Hidden layers use the spec's activation; the output
//! layer is a softmax over `num_classes` logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be >= 2".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidSpec(
                "hidden layer widths must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    fn layers(&self) -> Vec<LayerLayout> {
        let widths = self.widths();
        let mut offset = 0;
        widths
            .windows(2)
            .map(|pair| {
                let layer = LayerLayout {
                    in_dim: pair[0],
                    out_dim: pair[1],
                    offset,
                };
                offset += layer.len();
                layer
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// FNV-1a over the layer widths. Two specs with the same layout share a hash.
    pub fn layout_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for w in self.widths() {
            for b in (w as u64).to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    in_dim: usize,
    out_dim: usize,
    offset: usize,
}

impl LayerLayout {
    fn len(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.in_dim * self.out_dim]
    }

    fn biases<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.in_dim * self.out_dim;
        &params[start..start + self.out_dim]
    }
}

/// Flat parameter vector bound to a model layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    spec_hash: u64,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        ParamVector {
            values: vec![0.0; spec.num_params()],
            spec_hash: spec.layout_hash(),
        }
    }

    pub fn from_values(spec: &ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.num_params() {
            return Err(Error::Shape {
                context: "parameter vector",
                expected: spec.num_params(),
                actual: values.len(),
            });
        }
        Ok(ParamVector {
            values,
            spec_hash: spec.layout_hash(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spec_hash(&self) -> u64 {
        self.spec_hash
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::Shape {
                context: "parameter vectors",
                expected: self.values.len(),
                actual: other.values.len(),
            });
        }
        if self.spec_hash != other.spec_hash {
            return Err(Error::LayoutMismatch);
        }
        Ok(())
    }

    fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.values.len() != spec.num_params() {
            return Err(Error::Shape {
                context: "parameters for model spec",
                expected: spec.num_params(),
                actual: self.values.len(),
            });
        }
        if self.spec_hash != spec.layout_hash() {
            return Err(Error::LayoutMismatch);
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_compatible(other)?;
        Ok(ParamVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
            spec_hash: self.spec_hash,
        })
    }

    /// `self + other`.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_compatible(other)?;
        Ok(ParamVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
            spec_hash: self.spec_hash,
        })
    }

    /// In-place `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                context: "matrix buffer",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    context: "matrix row",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// A mini-batch. Unlabeled batches carry no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn labeled(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::Shape {
                context: "batch labels",
                expected: inputs.rows(),
                actual: labels.len(),
            });
        }
        Ok(Batch {
            inputs,
            labels: Some(labels),
        })
    }

    pub fn unlabeled(inputs: Matrix) -> Self {
        Batch {
            inputs,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Heavy-ball SGD state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl OptimState {
    pub fn new(
        num_params: usize,
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        Ok(OptimState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamVector::zeros(spec);
    for layer in spec.layers() {
        let bound = (6.0 / layer.in_dim as f64).sqrt();
        let w = &mut params.values[layer.offset..layer.offset + layer.in_dim * layer.out_dim];
        for v in w {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

fn check_inputs(spec: &ModelSpec, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != spec.input_dim {
        return Err(Error::Shape {
            context: "input features",
            expected: spec.input_dim,
            actual: inputs.cols(),
        });
    }
    Ok(())
}

/// Per-example activations kept for the backward pass.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn forward_one(spec: &ModelSpec, layers: &[LayerLayout], params: &[f64], x: &[f64]) -> Trace {
    let mut pre = Vec::with_capacity(layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
    post.push(x.to_vec());
    for (li, layer) in layers.iter().enumerate() {
        let w = layer.weights(params);
        let b = layer.biases(params);
        let input = &post[li];
        let z: Vec<f64> = (0..layer.out_dim)
            .map(|o| {
                let row = &w[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + b[o]
            })
            .collect();
        let a = if li + 1 == layers.len() {
            softmax(&z)
        } else {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        };
        pre.push(z);
        post.push(a);
    }
    Trace { pre, post }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Class probabilities for each input row.
pub fn forward_probs(params: &ParamVector, spec: &ModelSpec, inputs: &Matrix) -> Result<Matrix> {
    params.check_spec(spec)?;
    check_inputs(spec, inputs)?;
    let layers = spec.layers();
    let mut out = Matrix::zeros(inputs.rows(), spec.num_classes);
    for i in 0..inputs.rows() {
        let trace = forward_one(spec, &layers, &params.values, inputs.row(i));
        out.row_mut(i)
            .copy_from_slice(trace.post.last().expect("output layer"));
    }
    Ok(out)
}

fn check_targets(
    spec: &ModelSpec,
    inputs: &Matrix,
    targets: &[usize],
    weights: &[f64],
) -> Result<()> {
    if targets.len() != inputs.rows() {
        return Err(Error::Shape {
            context: "targets",
            expected: inputs.rows(),
            actual: targets.len(),
        });
    }
    if weights.len() != inputs.rows() {
        return Err(Error::Shape {
            context: "example weights",
            expected: inputs.rows(),
            actual: weights.len(),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= spec.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "target class {t} out of range for {} classes",
            spec.num_classes
        )));
    }
    if inputs.rows() == 0 {
        return Err(Error::InvalidArgument("batch must not be empty".into()));
    }
    Ok(())
}

/// Weighted cross-entropy averaged over the batch, `(1/B) Σ w_i CE(x_i, t_i)`,
/// and its gradient.
pub fn loss_and_grad(
    params: &ParamVector,
    spec: &ModelSpec,
    inputs: &Matrix,
    targets: &[usize],
    weights: &[f64],
) -> Result<(f64, ParamVector)> {
    params.check_spec(spec)?;
    check_inputs(spec, inputs)?;
    check_targets(spec, inputs, targets, weights)?;

    let layers = spec.layers();
    let inv_batch = 1.0 / inputs.rows() as f64;
    let mut grad = ParamVector::zeros(spec);
    let mut loss = 0.0;

    for i in 0..inputs.rows() {
        let w_i = weights[i];
        if w_i == 0.0 {
            continue;
        }
        let trace = forward_one(spec, &layers, &params.values, inputs.row(i));
        let probs = trace.post.last().expect("output layer");
        let p_target = probs[targets[i]];
        loss += w_i * -p_target.ln();

        let scale = w_i * inv_batch;
        // dL/dz for softmax + CE.
        let mut delta: Vec<f64> = probs.iter().map(|&p| p * scale).collect();
        delta[targets[i]] -= scale;

        for (li, layer) in layers.iter().enumerate().rev() {
            let input = &trace.post[li];
            let g = &mut grad.values[layer.offset..layer.offset + layer.len()];
            let (gw, gb) = g.split_at_mut(layer.in_dim * layer.out_dim);
            for o in 0..layer.out_dim {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (gw, x) in gw[o * layer.in_dim..(o + 1) * layer.in_dim]
                    .iter_mut()
                    .zip(input)
                {
                    *gw += d * x;
                }
            }
            if li > 0 {
                let w = layer.weights(&params.values);
                let z_prev = &trace.pre[li - 1];
                let a_prev = &trace.post[li];
                delta = (0..layer.in_dim)
                    .map(|j| {
                        let back: f64 = (0..layer.out_dim)
                            .map(|o| w[o * layer.in_dim + j] * delta[o])
                            .sum();
                        back * spec.activation.derivative(z_prev[j], a_prev[j])
                    })
                    .collect();
            }
        }
    }
    loss *= inv_batch;

    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite(format!(
            "cross-entropy loss/gradient over a batch of {}",
            inputs.rows()
        )));
    }
    Ok((loss, grad))
}

/// Heavy-ball step: `v <- momentum*v + grad + wd*params; params <- params - lr*v`.
pub fn sgd_step(
    params: &ParamVector,
    grad: &ParamVector,
    opt: &mut OptimState,
) -> Result<ParamVector> {
    params.check_compatible(grad)?;
    if opt.velocity.len() != params.len() {
        return Err(Error::Shape {
            context: "optimizer velocity",
            expected: params.len(),
            actual: opt.velocity.len(),
        });
    }
    let mut next = params.clone();
    for ((p, v), g) in next
        .values
        .iter_mut()
        .zip(opt.velocity.iter_mut())
        .zip(&grad.values)
    {
        *v = opt.momentum * *v + g + opt.weight_decay * *p;
        *p -= opt.learning_rate * *v;
    }
    Ok(next)
}

/// Central finite differences of the weighted cross-entropy loss.
pub fn finite_diff_grad(
    params: &ParamVector,
    spec: &ModelSpec,
    inputs: &Matrix,
    targets: &[usize],
    weights: &[f64],
    step: f64,
) -> Result<ParamVector> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let loss_at = |p: &ParamVector| -> Result<f64> {
        loss_and_grad(p, spec, inputs, targets, weights).map(|(l, _)| l)
    };
    let mut probe = params.clone();
    let mut grad = ParamVector::zeros(spec);
    for i in 0..params.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let up = loss_at(&probe)?;
        probe.values[i] = orig - step;
        let down = loss_at(&probe)?;
        probe.values[i] = orig;
        grad.values[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Max over coordinates of `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &ParamVector, b: &ParamVector, floor: f64) -> Result<f64> {
    a.check_compatible(b)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ModelSpec {
        ModelSpec::new(4, vec![5], 3).unwrap()
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = small_spec();
        assert_eq!(
            init_params(&spec, 7).unwrap(),
            init_params(&spec, 7).unwrap()
        );
        assert_ne!(
            init_params(&spec, 1).unwrap(),
            init_params(&spec, 2).unwrap()
        );
    }

    #[test]
    fn init_has_zero_biases() {
        let spec = small_spec();
        let p = init_params(&spec, 3).unwrap();
        for layer in spec.layers() {
            assert!(layer.biases(p.values()).iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn linear_model_param_count() {
        let spec = ModelSpec::new(6, vec![], 4).unwrap();
        assert_eq!(init_params(&spec, 0).unwrap().len(), 6 * 4 + 4);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec::new(0, vec![], 3).is_err());
        assert!(ModelSpec::new(2, vec![], 1).is_err());
        assert!(ModelSpec::new(2, vec![3, 0], 3).is_err());
    }

    #[test]
    fn zero_params_give_uniform_probs() {
        let spec = ModelSpec::new(3, vec![4], 5).unwrap();
        let p = ParamVector::zeros(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs = forward_probs(&p, &spec, &rand_matrix(&mut rng, 4, 3)).unwrap();
        for row in probs.iter_rows() {
            for &v in row {
                assert!((v - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let a = softmax(&[1.0, 2.0, -3.0]);
        let b = softmax(&[101.0, 102.0, 97.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        let extreme = softmax(&[1000.0, -1000.0]);
        assert!(extreme.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let spec = small_spec();
        let p = init_params(&spec, 0).unwrap();
        let bad = Matrix::zeros(2, 3);
        assert!(matches!(
            forward_probs(&p, &spec, &bad),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn uniform_prediction_loss_is_ln_classes() {
        let spec = ModelSpec::new(2, vec![], 10).unwrap();
        let p = ParamVector::zeros(&spec);
        let x = Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let (loss, _) = loss_and_grad(&p, &spec, &x, &[4], &[1.0]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_batch_has_zero_loss_and_grad() {
        let spec = small_spec();
        let p = init_params(&spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_matrix(&mut rng, 3, 4);
        let (loss, grad) = loss_and_grad(&p, &spec, &x, &[0, 1, 2], &[0.0; 3]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values().iter().all(|&g| g == 0.0));
        let fd = finite_diff_grad(&p, &spec, &x, &[0, 1, 2], &[0.0; 3], 1e-5).unwrap();
        assert!(fd.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences_small_model() {
        let spec = small_spec();
        let p = init_params(&spec, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_matrix(&mut rng, 2, 4);
        let (_, g) = loss_and_grad(&p, &spec, &x, &[2, 0], &[1.0, 1.0]).unwrap();
        let fd = finite_diff_grad(&p, &spec, &x, &[2, 0], &[1.0, 1.0], 1e-5).unwrap();
        assert!(max_relative_error(&g, &fd, 1e-6).unwrap() < 1e-4);
    }

    #[test]
    fn finite_diff_exact_on_bias_only_quadratic_region() {
        // With zero weights the loss depends on the output biases only.
        // Compare against the closed-form derivative p_c - [c == t].
        let spec = ModelSpec::new(1, vec![], 3).unwrap();
        let mut p = ParamVector::zeros(&spec);
        p.values_mut()[3..].copy_from_slice(&[0.1, -0.2, 0.3]);
        let x = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let fd = finite_diff_grad(&p, &spec, &x, &[1], &[1.0], 1e-5).unwrap();
        let probs = softmax(&[0.1, -0.2, 0.3]);
        for (c, &pc) in probs.iter().enumerate() {
            let exact = pc - if c == 1 { 1.0 } else { 0.0 };
            assert!((fd.values()[3 + c] - exact).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_rejects_nonpositive_step() {
        let spec = small_spec();
        let p = ParamVector::zeros(&spec);
        let x = Matrix::zeros(1, 4);
        assert!(finite_diff_grad(&p, &spec, &x, &[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn sgd_identity_on_zero_grad() {
        let spec = small_spec();
        let p = init_params(&spec, 5).unwrap();
        let mut opt = OptimState::new(p.len(), 0.1, 0.9, 0.0).unwrap();
        let next = sgd_step(&p, &ParamVector::zeros(&spec), &mut opt).unwrap();
        assert_eq!(next, p);
    }

    #[test]
    fn sgd_single_step_arithmetic() {
        let spec = ModelSpec::new(1, vec![], 2).unwrap();
        // 4 params: 2 weights + 2 biases; only the first is exercised.
        let p = ParamVector::from_values(&spec, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let g = ParamVector::from_values(&spec, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let mut opt = OptimState::new(4, 0.1, 0.0, 0.0).unwrap();
        let next = sgd_step(&p, &g, &mut opt).unwrap();
        assert!((next.values()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_momentum_steps_match_unrolled_recursion() {
        let spec = ModelSpec::new(1, vec![], 2).unwrap();
        let p0 = ParamVector::from_values(&spec, vec![1.0, -0.5, 0.0, 0.0]).unwrap();
        let g1 = ParamVector::from_values(&spec, vec![2.0, 1.0, 0.0, 0.0]).unwrap();
        let g2 = ParamVector::from_values(&spec, vec![-1.0, 3.0, 0.0, 0.0]).unwrap();
        let (lr, m) = (0.1, 0.9);
        let mut opt = OptimState::new(4, lr, m, 0.0).unwrap();
        let p1 = sgd_step(&p0, &g1, &mut opt).unwrap();
        let p2 = sgd_step(&p1, &g2, &mut opt).unwrap();
        // v1 = g1; p1 = p0 - lr g1; v2 = m g1 + g2; p2 = p1 - lr (m g1 + g2)
        // coordinate 0: p1 = 0.8, v2 = 1.8 - 1 = 0.8, p2 = 0.72
        // coordinate 1: p1 = -0.6, v2 = 0.9 + 3 = 3.9, p2 = -0.99
        assert!((p2.values()[0] - 0.72).abs() < 1e-12);
        assert!((p2.values()[1] + 0.99).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_length_mismatch() {
        let a = ModelSpec::new(1, vec![], 2).unwrap();
        let b = ModelSpec::new(2, vec![], 2).unwrap();
        let mut opt = OptimState::new(a.num_params(), 0.1, 0.0, 0.0).unwrap();
        let r = sgd_step(&ParamVector::zeros(&a), &ParamVector::zeros(&b), &mut opt);
        assert!(r.is_err());
    }

    #[test]
    fn optim_state_validates() {
        assert!(OptimState::new(3, 0.0, 0.0, 0.0).is_err());
        assert!(OptimState::new(3, 0.1, 1.0, 0.0).is_err());
        assert!(OptimState::new(3, 0.1, 0.0, -1.0).is_err());
    }
}
