//! Dense networks with hand-derived gradients.
//!
//! Everything here works on 64-bit row-major matrices where each row is one
//! sample of a batch. Matrix products go through `matrixmultiply`; the rest
//! is straightforward loops.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use crate::{MaqError, Result, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MaqError::Config(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(MaqError::Config(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }
}

/// `out = alpha * op(a) * op(b) + beta * out`, where `op` optionally transposes.
fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, out: &mut Matrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions disagree");
    assert_eq!((m, n), (out.rows, out.cols), "output shape disagrees");
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides and extents are derived from the owning matrices, whose
    // buffers hold exactly rows*cols elements; shapes are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenActivation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

impl HiddenActivation {
    pub fn name(self) -> &'static str {
        match self {
            HiddenActivation::Relu => "relu",
            HiddenActivation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(HiddenActivation::Relu),
            "tanh" => Some(HiddenActivation::Tanh),
            _ => None,
        }
    }
}

impl OutputActivation {
    pub fn name(self) -> &'static str {
        match self {
            OutputActivation::Identity => "identity",
            OutputActivation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(OutputActivation::Identity),
            "tanh" => Some(OutputActivation::Tanh),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

static NEXT_NET_TAG: AtomicU64 = AtomicU64::new(1);

fn next_tag() -> u64 {
    NEXT_NET_TAG.fetch_add(1, Ordering::Relaxed)
}

/// Multilayer perceptron.
///
/// Every parameter mutation bumps an internal version so that a
/// [`ForwardCache`] taken before the mutation is rejected by
/// [`DenseNet::backward`].
#[derive(Debug)]
pub struct DenseNet {
    layers: Vec<Dense>,
    hidden: HiddenActivation,
    output: OutputActivation,
    tag: u64,
    version: u64,
}

impl Clone for DenseNet {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            hidden: self.hidden,
            output: self.output,
            tag: next_tag(),
            version: 0,
        }
    }
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.hidden == other.hidden && self.output == other.output
    }
}

/// Per-layer activations recorded by [`DenseNet::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    tag: u64,
    version: u64,
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.activations.last().expect("cache holds at least the input")
    }
}

/// Gradients shaped exactly like the owning network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weight.rows, l.weight.cols))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn matches(&self, net: &DenseNet) -> bool {
        self.weights.len() == net.layers.len()
            && self
                .weights
                .iter()
                .zip(&self.biases)
                .zip(&net.layers)
                .all(|((w, b), l)| w.shape() == l.weight.shape() && b.len() == l.bias.len())
    }
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new(
        layer_sizes: &[usize],
        hidden: HiddenActivation,
        output: OutputActivation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(MaqError::Config(format!(
                "layer sizes must list at least two positive widths, got {layer_sizes:?}"
            )));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Dense {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit)),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            layers,
            hidden,
            output,
            tag: next_tag(),
            version: 0,
        })
    }

    /// Assembles a network from explicit layers, validating shapes.
    pub fn from_layers(layers: Vec<Dense>, hidden: HiddenActivation, output: OutputActivation) -> Result<Self> {
        if layers.is_empty() {
            return Err(MaqError::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows {
                return Err(MaqError::Config(format!("layer {i}: bias length disagrees with weight rows")));
            }
            if i > 0 && layers[i - 1].weight.rows != l.weight.cols {
                return Err(MaqError::Config(format!("layer {i}: input width disagrees with previous layer")));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|v| !v.is_finite()) {
                return Err(MaqError::Config(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(Self {
            layers,
            hidden,
            output,
            tag: next_tag(),
            version: 0,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.weight.rows));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data.len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(MaqError::Config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let n = l.weight.data.len();
            l.weight.data.copy_from_slice(&params[offset..offset + n]);
            offset += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + n]);
            offset += n;
        }
        self.version += 1;
        Ok(())
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols != self.input_dim() {
            return Err(MaqError::Config(format!(
                "network expects {} inputs per row, got {}",
                self.input_dim(),
                inputs.cols
            )));
        }
        Ok(())
    }

    fn affine(layer: &Dense, input: &Matrix) -> Matrix {
        let mut z = Matrix::from_fn(input.rows, layer.bias.len(), |_, c| layer.bias[c]);
        gemm(1.0, input, false, &layer.weight, true, 1.0, &mut z);
        z
    }

    fn activate(&self, z: &mut Matrix, last: bool) {
        match (last, self.hidden, self.output) {
            (true, _, OutputActivation::Identity) => {}
            (true, _, OutputActivation::Tanh) | (false, HiddenActivation::Tanh, _) => {
                z.data.iter_mut().for_each(|v| *v = v.tanh())
            }
            (false, HiddenActivation::Relu, _) => z.data.iter_mut().for_each(|v| *v = v.max(0.0)),
        }
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_input(inputs)?;
        let mut a = Self::affine(&self.layers[0], inputs);
        self.activate(&mut a, self.layers.len() == 1);
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            a = Self::affine(layer, &a);
            self.activate(&mut a, i + 1 == self.layers.len());
        }
        Ok(a)
    }

    /// Single-row convenience wrapper around [`predict`](Self::predict).
    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.predict(&x)?.into_vec())
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(inputs)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut a = Self::affine(layer, activations.last().unwrap());
            self.activate(&mut a, i + 1 == self.layers.len());
            activations.push(a);
        }
        let cache = ForwardCache {
            tag: self.tag,
            version: self.version,
            activations,
        };
        Ok((cache.output().clone(), cache))
    }

    /// Back-propagates `output_grad` (dLoss/dOutput) through a cached pass.
    ///
    /// Returns parameter gradients and dLoss/dInput.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<(Gradients, Matrix)> {
        if cache.tag != self.tag || cache.version != self.version {
            return Err(MaqError::Usage(
                "forward cache was produced by a different network or before a parameter update".into(),
            ));
        }
        let out = cache.output();
        if output_grad.shape() != out.shape() {
            return Err(MaqError::Usage(format!(
                "output gradient shape {:?} does not match output {:?}",
                output_grad.shape(),
                out.shape()
            )));
        }
        let mut delta = output_grad.clone();
        if self.output == OutputActivation::Tanh {
            for (d, y) in delta.data.iter_mut().zip(&out.data) {
                *d *= 1.0 - y * y;
            }
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let input = &cache.activations[l];
            let mut dw = Matrix::zeros(layer.weight.rows, layer.weight.cols);
            gemm(1.0, &delta, true, input, false, 0.0, &mut dw);
            let mut db = vec![0.0; layer.bias.len()];
            for r in 0..delta.rows {
                for (b, d) in db.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            let mut dx = Matrix::zeros(delta.rows, layer.weight.cols);
            gemm(1.0, &delta, false, &layer.weight, false, 0.0, &mut dx);
            if l > 0 {
                match self.hidden {
                    HiddenActivation::Relu => {
                        for (d, a) in dx.data.iter_mut().zip(&input.data) {
                            if *a <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    HiddenActivation::Tanh => {
                        for (d, a) in dx.data.iter_mut().zip(&input.data) {
                            *d *= 1.0 - a * a;
                        }
                    }
                }
            }
            weights.push(dw);
            biases.push(db);
            delta = dx;
        }
        weights.reverse();
        biases.reverse();
        Ok((Gradients { weights, biases }, delta))
    }

    /// Applies one Adam update with `grads`.
    pub fn adam_step(&mut self, grads: &Gradients, state: &mut AdamState) -> Result<()> {
        if !grads.matches(self) {
            return Err(MaqError::Usage("gradient shapes do not match the network".into()));
        }
        if state.first_moment.len() != self.param_count() {
            return Err(MaqError::Usage("optimizer state does not match the network".into()));
        }
        if !grads.is_finite() {
            return Err(MaqError::Training("non-finite gradient".into()));
        }
        let step = state.begin_step();
        let mut offset = 0;
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
            offset = state.apply(&step, offset, &mut layer.weight.data, &gw.data);
            offset = state.apply(&step, offset, &mut layer.bias, gb);
        }
        self.version += 1;
        Ok(())
    }

    /// Polyak averaging: `self = (1 - tau) * self + tau * source`.
    pub fn soft_update_from(&mut self, source: &DenseNet, tau: f64) -> Result<()> {
        if self.layer_sizes() != source.layer_sizes() {
            return Err(MaqError::Usage("soft update between differently shaped networks".into()));
        }
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            for (a, b) in t.weight.data.iter_mut().zip(&s.weight.data) {
                *a = (1.0 - tau) * *a + tau * b;
            }
            for (a, b) in t.bias.iter_mut().zip(&s.bias) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
        self.version += 1;
        Ok(())
    }
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

struct StepFactors {
    bias1: f64,
    bias2: f64,
}

impl AdamState {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_net(net: &DenseNet, learning_rate: f64) -> Self {
        Self::new(net.param_count(), learning_rate)
    }

    fn begin_step(&mut self) -> StepFactors {
        self.step_count += 1;
        let t = self.step_count as i32;
        StepFactors {
            bias1: 1.0 - self.beta1.powi(t),
            bias2: 1.0 - self.beta2.powi(t),
        }
    }

    fn apply(&mut self, f: &StepFactors, offset: usize, params: &mut [f64], grads: &[f64]) -> usize {
        let m = &mut self.first_moment[offset..offset + params.len()];
        let v = &mut self.second_moment[offset..offset + params.len()];
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m).zip(v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / f.bias1;
            let v_hat = *v / f.bias2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        offset + params.len()
    }

    /// Resets the moments of parameters `range` (used when re-seeding codes).
    pub fn reset_range(&mut self, range: std::ops::Range<usize>) {
        self.first_moment[range.clone()].iter_mut().for_each(|v| *v = 0.0);
        self.second_moment[range].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Adam update on a bare parameter slice.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(MaqError::Usage("parameter, gradient and optimizer sizes disagree".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(MaqError::Training("non-finite gradient".into()));
    }
    let step = state.begin_step();
    state.apply(&step, 0, params, grads);
    Ok(())
}

/// Compares analytic gradients with central differences on a subset of
/// coordinates.
///
/// `loss_fn` returns the loss and its analytic gradient at the given point.
/// The error for one coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`;
/// the maximum over probed coordinates is returned, or infinity when
/// anything is non-finite.
pub fn gradient_check<F>(mut loss_fn: F, params: &[f64], probe_count: usize, epsilon: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    if analytic.len() != params.len() {
        return f64::INFINITY;
    }
    let n = params.len();
    let probes: Vec<usize> = if probe_count >= n {
        (0..n).collect()
    } else {
        let mut rng = crate::seeded_rng(0x6752_6164);
        rand::seq::index::sample(&mut rng, n, probe_count).into_vec()
    };
    let mut point = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in probes {
        let original = point[i];
        point[i] = original + epsilon;
        let (plus, _) = loss_fn(&point);
        point[i] = original - epsilon;
        let (minus, _) = loss_fn(&point);
        point[i] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if !err.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - log_sum).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Index of the largest value; ties resolve to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from `softmax(logits)` and returns it with its log-probability.
pub fn sample_categorical(logits: &[f64], rng: &mut Rng) -> Result<(usize, f64)> {
    if logits.is_empty() {
        return Err(MaqError::Config("cannot sample from empty logits".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(MaqError::Config("logits must be finite".into()));
    }
    let log_probs = log_softmax(logits);
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut chosen = log_probs.len() - 1;
    for (i, lp) in log_probs.iter().enumerate() {
        cumulative += lp.exp();
        if u < cumulative {
            chosen = i;
            break;
        }
    }
    Ok((chosen, log_probs[chosen]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn identity_net(dim: usize) -> DenseNet {
        let layer = Dense {
            weight: Matrix::from_fn(dim, dim, |r, c| if r == c { 1.0 } else { 0.0 }),
            bias: vec![0.0; dim],
        };
        DenseNet::from_layers(vec![layer], HiddenActivation::Relu, OutputActivation::Identity).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = identity_net(2);
        let x = Matrix::from_rows(&[[3.0, -1.0]]).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        assert_eq!(y.row(0), &[3.0, -1.0]);
    }

    #[test]
    fn relu_hidden_clamps_negative_preactivations() {
        let hidden = identity_net(2).layers()[0].clone();
        let out = Dense {
            weight: Matrix::from_fn(2, 2, |r, c| if r == c { 1.0 } else { 0.0 }),
            bias: vec![0.0; 2],
        };
        let net = DenseNet::from_layers(vec![hidden, out], HiddenActivation::Relu, OutputActivation::Identity).unwrap();
        let x = Matrix::from_rows(&[[-5.0, 2.0]]).unwrap();
        let (y, cache) = net.forward(&x).unwrap();
        assert_eq!(cache.activations[1].row(0), &[0.0, 2.0]);
        assert_eq!(y.row(0), &[0.0, 2.0]);
    }

    #[test]
    fn tanh_output_of_zero_is_zero() {
        let layer = Dense {
            weight: Matrix::zeros(1, 1),
            bias: vec![0.0],
        };
        let net = DenseNet::from_layers(vec![layer], HiddenActivation::Relu, OutputActivation::Tanh).unwrap();
        assert_eq!(net.predict_one(&[0.7]).unwrap(), vec![0.0]);
    }

    #[test]
    fn dimension_mismatch_is_a_configuration_error() {
        let net = identity_net(2);
        let x = Matrix::zeros(1, 3);
        assert!(matches!(net.forward(&x), Err(MaqError::Config(_))));
    }

    #[test]
    fn linear_unit_gradient() {
        let net = identity_net(1);
        let x = Matrix::from_rows(&[[2.0]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let (g, dx) = net.backward(&cache, &Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
        assert_eq!(g.weights[0].get(0, 0), 2.0);
        assert_eq!(g.biases[0][0], 1.0);
        assert_eq!(dx.get(0, 0), 1.0);
    }

    #[test]
    fn relu_blocks_gradient_for_inactive_unit() {
        let hidden = Dense {
            weight: Matrix::from_rows(&[[1.0]]).unwrap(),
            bias: vec![0.0],
        };
        let out = hidden.clone();
        let net = DenseNet::from_layers(vec![hidden, out], HiddenActivation::Relu, OutputActivation::Identity).unwrap();
        let (_, cache) = net.forward(&Matrix::from_rows(&[[-3.0]]).unwrap()).unwrap();
        let (g, dx) = net.backward(&cache, &Matrix::from_rows(&[[1.0]]).unwrap()).unwrap();
        assert_eq!(g.weights[0].get(0, 0), 0.0);
        assert_eq!(g.biases[0][0], 0.0);
        assert_eq!(dx.get(0, 0), 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = seeded_rng(3);
        let mut net = DenseNet::new(&[2, 4, 1], HiddenActivation::Tanh, OutputActivation::Identity, &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = Matrix::from_rows(&[[1.0]]).unwrap();
        let (grads, _) = net.backward(&cache, &g).unwrap();
        let mut adam = AdamState::for_net(&net, 1e-3);
        net.adam_step(&grads, &mut adam).unwrap();
        assert!(matches!(net.backward(&cache, &g), Err(MaqError::Usage(_))));
        let other = net.clone();
        let (_, cache) = net.forward(&x).unwrap();
        assert!(matches!(other.backward(&cache, &g), Err(MaqError::Usage(_))));
    }

    /// Loss `0.5 * sum(y^2)` over a batch; gradient via backward.
    fn squared_output_loss(net: &mut DenseNet, x: &Matrix, params: &[f64]) -> (f64, Vec<f64>) {
        net.set_flat_params(params).unwrap();
        let (y, cache) = net.forward(x).unwrap();
        let loss = 0.5 * y.as_slice().iter().map(|v| v * v).sum::<f64>();
        let (g, _) = net.backward(&cache, &y).unwrap();
        (loss, g.flatten())
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (seed, hidden, output) in [
            (1, HiddenActivation::Relu, OutputActivation::Identity),
            (10, HiddenActivation::Tanh, OutputActivation::Tanh),
            (100, HiddenActivation::Relu, OutputActivation::Tanh),
        ] {
            let mut rng = seeded_rng(seed);
            let mut net = DenseNet::new(&[5, 7, 6, 3], hidden, output, &mut rng).unwrap();
            let x = Matrix::from_fn(4, 5, |r, c| ((r * 5 + c) as f64 * 0.37).sin());
            let params = net.flat_params();
            let err = gradient_check(|p| squared_output_loss(&mut net, &x, p), &params, usize::MAX, 1e-5);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn gradient_check_on_quadratic() {
        let err = gradient_check(|p| (0.5 * p[0] * p[0], vec![p[0]]), &[3.0], 1, 1e-5);
        assert!(err < 1e-9);
        let bad = gradient_check(|p| (0.5 * p[0] * p[0], vec![2.0 * p[0]]), &[3.0], 1, 1e-5);
        assert!(bad > 0.4);
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        let mut state = AdamState::new(1, 0.001);
        let mut p = [1.0];
        adam_step(&mut p, &[0.5], &mut state).unwrap();
        assert!((p[0] - (1.0 - 0.001)).abs() < 1e-9);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut state = AdamState::new(1, 0.01);
        let mut p = [2.0];
        adam_step(&mut p, &[1.0], &mut state).unwrap();
        let after_first = p[0];
        let (m, v) = (state.first_moment[0], state.second_moment[0]);
        state.learning_rate = 0.0;
        adam_step(&mut p, &[0.0], &mut state).unwrap();
        assert_eq!(p[0], after_first);
        assert!(state.first_moment[0].abs() < m.abs());
        assert!(state.second_moment[0] < v);
    }

    #[test]
    fn adam_two_steps_match_hand_recurrence() {
        let (lr, b1, b2, eps) = (0.001_f64, 0.9_f64, 0.999_f64, 1e-8_f64);
        let mut p = 0.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let mut state = AdamState::new(1, lr);
        let mut q = [0.0];
        adam_step(&mut q, &[1.0], &mut state).unwrap();
        adam_step(&mut q, &[1.0], &mut state).unwrap();
        assert!((q[0] - p).abs() < 1e-12);
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut state = AdamState::new(2, 0.1);
        let mut p = [0.0, 0.0];
        assert!(matches!(adam_step(&mut p, &[1.0, f64::NAN], &mut state), Err(MaqError::Training(_))));
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn uniform_logits_sample_with_log_quarter() {
        let mut rng = seeded_rng(5);
        let (i, lp) = sample_categorical(&[0.3; 4], &mut rng).unwrap();
        assert!(i < 4);
        assert!((lp + 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_logit_always_wins() {
        let mut rng = seeded_rng(6);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&[1000.0, 0.0], &mut rng).unwrap().0, 0);
        }
    }

    #[test]
    fn empty_logits_are_rejected() {
        let mut rng = seeded_rng(6);
        assert!(matches!(sample_categorical(&[], &mut rng), Err(MaqError::Config(_))));
    }

    #[test]
    fn empirical_frequencies_match_softmax() {
        let logits = [0.5, -1.0, 2.0, 0.0];
        let probs = softmax(&logits);
        let draws = 100_000;
        let mut counts = [0usize; 4];
        let mut rng = seeded_rng(11);
        for _ in 0..draws {
            counts[sample_categorical(&logits, &mut rng).unwrap().0] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let freq = *c as f64 / draws as f64;
            let se = (p * (1.0 - p) / draws as f64).sqrt();
            assert!((freq - p).abs() < 3.0 * se, "freq {freq} vs p {p}");
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let logits = [0.1, 0.2, 0.3];
        let a: Vec<_> = {
            let mut rng = seeded_rng(9);
            (0..50).map(|_| sample_categorical(&logits, &mut rng).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut rng = seeded_rng(9);
            (0..50).map(|_| sample_categorical(&logits, &mut rng).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn softmax_is_a_probability_vector() {
        let p = softmax(&[1e3, -1e3, 0.5, 7.0]);
        assert!(p.iter().all(|v| *v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = seeded_rng(2);
        let net = DenseNet::new(&[3, 16, 2], HiddenActivation::Relu, OutputActivation::Tanh, &mut rng).unwrap();
        let x = Matrix::from_fn(5, 3, |r, c| (r as f64) - (c as f64) * 0.25);
        assert_eq!(net.predict(&x).unwrap(), net.forward(&x).unwrap().0);
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
    }

    #[test]
    fn soft_update_is_exact_convex_combination() {
        let mut rng = seeded_rng(4);
        let online = DenseNet::new(&[2, 3, 1], HiddenActivation::Relu, OutputActivation::Identity, &mut rng).unwrap();
        let mut target = DenseNet::new(&[2, 3, 1], HiddenActivation::Relu, OutputActivation::Identity, &mut rng).unwrap();
        let before = target.flat_params();
        target.soft_update_from(&online, 0.005).unwrap();
        for ((t, b), o) in target.flat_params().iter().zip(&before).zip(online.flat_params()) {
            assert_eq!(*t, (1.0 - 0.005) * b + 0.005 * o);
        }
    }
}
