//! Conditional vector-quantized autoencoder over macro actions.
//!
//! The encoder sees a normalized state and a normalized window of `H`
//! actions and emits a latent `e`; the nearest codebook row `e_k` is fed,
//! with the same state, to the decoder, which reconstructs the window. The
//! training objective per sample is
//!
//! ```text
//! |m - m~|^2 + |sg[e] - e_k|^2 + beta * |e - sg[e_k]|^2
//! ```
//!
//! with the reconstruction term measured in normalized action space and its
//! gradient copied from the decoder input straight through to `e`.
//!
//! The decoder's tanh output is the raw action window (every component of a
//! primitive action lives in `[-1, 1]`); it is normalized before the loss.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;

use crate::dataset::{extract_all, MacroSample, NormStats};
use crate::env::{Trajectory, ACTION_DIM, STATE_DIM};
use crate::nn::{adam_step, AdamState, DenseNet, Gradients, HiddenActivation, Matrix, OutputActivation};
use crate::textio::{self, Lines};
use crate::{seeded_rng, MaqError, Result, Rng};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VqConfig {
    pub horizon: usize,
    pub codes: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            codes: 16,
            latent_dim: 32,
            hidden: 256,
            beta: 0.25,
            learning_rate: 3e-4,
            batch_size: 32,
            epochs: 100,
            seed: 1,
        }
    }
}

impl VqConfig {
    /// Published settings: latent size 256, `H = 9`.
    pub fn paper() -> Self {
        Self {
            horizon: 9,
            latent_dim: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MaqError::Config(m.to_string()));
        if self.horizon == 0 {
            return bad("macro length H must be at least 1");
        }
        if self.codes == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return bad("codebook size, latent size and hidden width must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("commitment coefficient must be a non-negative number");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookModel {
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    /// `K x d` code vectors.
    pub codebook: Matrix,
    pub horizon: usize,
    pub norm: NormStats,
    pub seed: u64,
}

/// Squared-distance nearest row of `codebook`; ties go to the smaller index.
pub fn nearest_code(codebook: &Matrix, e: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..codebook.rows() {
        let d: f64 = codebook.row(k).iter().zip(e).map(|(c, x)| (c - x) * (c - x)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct VqLossParts {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
    pub beta: f64,
}

impl VqLossParts {
    fn from_terms(reconstruction: f64, codebook: f64, commitment: f64, beta: f64) -> Self {
        Self {
            reconstruction,
            codebook,
            commitment,
            total: reconstruction + codebook + beta * commitment,
            beta,
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Loss terms for one sample. `m` and `m_rec` are normalized macros.
///
/// The codebook and commitment terms share a value and differ only in
/// which side receives gradient during training.
pub fn vq_loss(m: &[f64], m_rec: &[f64], e: &[f64], e_k: &[f64], beta: f64) -> VqLossParts {
    let gap = squared_distance(e, e_k);
    VqLossParts::from_terms(squared_distance(m, m_rec), gap, gap, beta)
}

/// Normalized inputs for a batch of samples.
#[derive(Clone, Debug)]
pub struct VqBatch {
    states: Matrix,
    macros: Matrix,
    encoder_input: Matrix,
}

impl VqBatch {
    pub fn new(norm: &NormStats, samples: &[&MacroSample]) -> Result<Self> {
        let states: Vec<Vec<f64>> = samples.iter().map(|s| norm.normalize_state(&s.state)).collect();
        let macros: Vec<Vec<f64>> = samples.iter().map(|s| norm.normalize_actions(&s.macro_actions)).collect();
        let encoder_input: Vec<Vec<f64>> = states
            .iter()
            .zip(&macros)
            .map(|(s, m)| s.iter().chain(m).copied().collect())
            .collect();
        Ok(Self {
            states: Matrix::from_rows(&states)?,
            macros: Matrix::from_rows(&macros)?,
            encoder_input: Matrix::from_rows(&encoder_input)?,
        })
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Code assignment of a batch, held fixed while gradients are taken.
#[derive(Clone, Debug)]
pub struct Assignment {
    pub indices: Vec<usize>,
    /// Encoder outputs at assignment time, standing in for `sg[e]`.
    pub latents: Matrix,
    /// Selected code vectors at assignment time, standing in for `sg[e_k]`.
    pub codes: Matrix,
}

#[derive(Clone, Debug)]
pub struct VqGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
    /// Flattened `K x d`.
    pub codebook: Vec<f64>,
}

impl VqGradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.encoder.flatten();
        v.extend(self.decoder.flatten());
        v.extend_from_slice(&self.codebook);
        v
    }

    fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite() && self.codebook.iter().all(|g| g.is_finite())
    }
}

impl CodebookModel {
    /// Randomly initialized networks and a zero codebook.
    pub fn new(config: &VqConfig, norm: NormStats, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let macro_dim = ACTION_DIM * config.horizon;
        let encoder = DenseNet::new(
            &[STATE_DIM + macro_dim, config.hidden, config.hidden, config.latent_dim],
            HiddenActivation::Relu,
            OutputActivation::Identity,
            rng,
        )?;
        let decoder = DenseNet::new(
            &[STATE_DIM + config.latent_dim, config.hidden, config.hidden, macro_dim],
            HiddenActivation::Relu,
            OutputActivation::Tanh,
            rng,
        )?;
        Ok(Self {
            encoder,
            decoder,
            codebook: Matrix::zeros(config.codes, config.latent_dim),
            horizon: config.horizon,
            norm,
            seed: config.seed,
        })
    }

    pub fn codes(&self) -> usize {
        self.codebook.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.codebook.cols()
    }

    pub fn macro_dim(&self) -> usize {
        ACTION_DIM * self.horizon
    }

    fn check_macro(&self, macro_actions: &[f64]) -> Result<()> {
        if macro_actions.len() != self.macro_dim() {
            return Err(MaqError::Usage(format!(
                "macro has {} values, model expects {} (H = {})",
                macro_actions.len(),
                self.macro_dim(),
                self.horizon
            )));
        }
        Ok(())
    }

    pub fn encode(&self, state: &[f64], macro_actions: &[f64]) -> Result<Vec<f64>> {
        self.check_macro(macro_actions)?;
        if state.len() != STATE_DIM {
            return Err(MaqError::Usage(format!("state has {} values, expected {STATE_DIM}", state.len())));
        }
        let input: Vec<f64> = self
            .norm
            .normalize_state(state)
            .into_iter()
            .chain(self.norm.normalize_actions(macro_actions))
            .collect();
        self.encoder.predict_one(&input)
    }

    pub fn quantize(&self, e: &[f64]) -> Result<(usize, Vec<f64>)> {
        if e.len() != self.latent_dim() {
            return Err(MaqError::Usage(format!(
                "latent has {} values, codebook expects {}",
                e.len(),
                self.latent_dim()
            )));
        }
        let (k, _) = nearest_code(&self.codebook, e);
        Ok((k, self.codebook.row(k).to_vec()))
    }

    /// Raw action window for `state` and code vector `code`, clipped to `[-1, 1]`.
    pub fn decode(&self, state: &[f64], code: &[f64]) -> Result<Vec<f64>> {
        if code.len() != self.latent_dim() {
            return Err(MaqError::Usage("code vector has the wrong dimension".into()));
        }
        let input: Vec<f64> = self.norm.normalize_state(state).into_iter().chain(code.iter().copied()).collect();
        Ok(self
            .decoder
            .predict_one(&input)?
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect())
    }

    pub fn decode_index(&self, state: &[f64], index: usize) -> Result<Vec<f64>> {
        if index >= self.codes() {
            return Err(MaqError::Usage(format!("code index {index} out of range 0..{}", self.codes())));
        }
        self.decode(state, self.codebook.row(index))
    }

    /// `decode(quantize(encode(state, macro)))`.
    pub fn reconstruct(&self, state: &[f64], macro_actions: &[f64]) -> Result<Vec<f64>> {
        let e = self.encode(state, macro_actions)?;
        let (_, code) = self.quantize(&e)?;
        self.decode(state, &code)
    }

    pub fn encode_batch(&self, batch: &VqBatch) -> Result<Matrix> {
        self.encoder.predict(&batch.encoder_input)
    }

    pub fn assign(&self, latents: &Matrix) -> Assignment {
        let indices: Vec<usize> = (0..latents.rows())
            .map(|r| nearest_code(&self.codebook, latents.row(r)).0)
            .collect();
        let codes = Matrix::from_fn(latents.rows(), self.latent_dim(), |r, c| self.codebook.get(indices[r], c));
        Assignment {
            indices,
            latents: latents.clone(),
            codes,
        }
    }

    /// Batch-mean objective and its training gradients for a fixed assignment.
    ///
    /// The decoder input is `codes + (e - latents)`: numerically the assigned
    /// code, while its derivative with respect to the encoder is the identity.
    /// At the assignment point, the returned gradient is therefore both the
    /// straight-through training gradient and the true gradient of the
    /// returned loss as a function of all parameters.
    pub fn objective(&self, batch: &VqBatch, assignment: &Assignment, beta: f64) -> Result<(VqLossParts, VqGradients)> {
        let b = batch.len();
        if b == 0 || assignment.indices.len() != b {
            return Err(MaqError::Usage("assignment does not match batch".into()));
        }
        let inv_b = 1.0 / b as f64;
        let d = self.latent_dim();
        let (e, enc_cache) = self.encoder.forward(&batch.encoder_input)?;
        let z = Matrix::from_fn(b, d, |r, c| assignment.codes.get(r, c) + (e.get(r, c) - assignment.latents.get(r, c)));
        let dec_input = Matrix::from_fn(b, STATE_DIM + d, |r, c| {
            if c < STATE_DIM {
                batch.states.get(r, c)
            } else {
                z.get(r, c - STATE_DIM)
            }
        });
        let (y, dec_cache) = self.decoder.forward(&dec_input)?;

        let macro_dim = self.macro_dim();
        let mut dy = Matrix::zeros(b, macro_dim);
        let (mut recon, mut code_term, mut commit) = (0.0, 0.0, 0.0);
        for r in 0..b {
            for c in 0..macro_dim {
                let sd = self.norm.action_std[c % ACTION_DIM];
                let diff = (y.get(r, c) - self.norm.action_mean[c % ACTION_DIM]) / sd - batch.macros.get(r, c);
                recon += diff * diff;
                dy.set(r, c, 2.0 * inv_b * diff / sd);
            }
            code_term += squared_distance(assignment.latents.row(r), self.codebook.row(assignment.indices[r]));
            commit += squared_distance(e.row(r), assignment.codes.row(r));
        }
        let parts = VqLossParts::from_terms(recon * inv_b, code_term * inv_b, commit * inv_b, beta);

        let (decoder_grads, d_dec_input) = self.decoder.backward(&dec_cache, &dy)?;
        let de = Matrix::from_fn(b, d, |r, c| {
            d_dec_input.get(r, STATE_DIM + c) + 2.0 * beta * inv_b * (e.get(r, c) - assignment.codes.get(r, c))
        });
        let (encoder_grads, _) = self.encoder.backward(&enc_cache, &de)?;
        let mut codebook_grads = vec![0.0; self.codes() * d];
        for (r, &k) in assignment.indices.iter().enumerate() {
            for c in 0..d {
                codebook_grads[k * d + c] += 2.0 * inv_b * (self.codebook.get(k, c) - assignment.latents.get(r, c));
            }
        }
        Ok((
            parts,
            VqGradients {
                encoder: encoder_grads,
                decoder: decoder_grads,
                codebook: codebook_grads,
            },
        ))
    }

    /// All trainable parameters: encoder, decoder, then codebook.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.encoder.flat_params();
        v.extend(self.decoder.flat_params());
        v.extend_from_slice(self.codebook.as_slice());
        v
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        let ne = self.encoder.param_count();
        let nd = self.decoder.param_count();
        if params.len() != ne + nd + self.codebook.as_slice().len() {
            return Err(MaqError::Usage("parameter vector has the wrong length".into()));
        }
        self.encoder.set_flat_params(&params[..ne])?;
        self.decoder.set_flat_params(&params[ne..ne + nd])?;
        self.codebook.as_mut_slice().copy_from_slice(&params[ne + nd..]);
        Ok(())
    }

    /// Fails with a mismatch error unless the model has the expected shape.
    pub fn expect_shape(&self, horizon: Option<usize>, codes: Option<usize>) -> Result<()> {
        if let Some(h) = horizon.filter(|h| *h != self.horizon) {
            return Err(MaqError::Mismatch(format!(
                "codebook checkpoint has H = {}, run expects H = {h}",
                self.horizon
            )));
        }
        if let Some(k) = codes.filter(|k| *k != self.codes()) {
            return Err(MaqError::Mismatch(format!(
                "codebook checkpoint has K = {}, run expects K = {k}",
                self.codes()
            )));
        }
        Ok(())
    }
}

/// Fraction of codes chosen at least once over `samples`.
pub fn codebook_utilization(model: &CodebookModel, samples: &[MacroSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MaqError::Usage("utilization needs at least one sample".into()));
    }
    let mut used = vec![false; model.codes()];
    for chunk in samples.chunks(256) {
        let refs: Vec<&MacroSample> = chunk.iter().collect();
        let latents = model.encode_batch(&VqBatch::new(&model.norm, &refs)?)?;
        for k in model.assign(&latents).indices {
            used[k] = true;
        }
    }
    Ok(used.iter().filter(|u| **u).count() as f64 / model.codes() as f64)
}

/// Per-component mean squared error, in raw action units, of
/// `decode(quantize(encode(s, m)))` against `m`.
pub fn reconstruction_mse(model: &CodebookModel, samples: &[MacroSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MaqError::Usage("reconstruction error needs at least one sample".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let rec = model.reconstruct(&s.state, &s.macro_actions)?;
        total += squared_distance(&rec, &s.macro_actions);
    }
    Ok(total / (samples.len() * model.macro_dim()) as f64)
}

/// Mean distance between training latents and their assigned codes.
pub fn quantization_error(model: &CodebookModel, samples: &[MacroSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MaqError::Usage("quantization error needs at least one sample".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(256) {
        let refs: Vec<&MacroSample> = chunk.iter().collect();
        let latents = model.encode_batch(&VqBatch::new(&model.norm, &refs)?)?;
        for r in 0..latents.rows() {
            total += nearest_code(&model.codebook, latents.row(r)).1.sqrt();
        }
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VqTrainReport {
    pub config: VqConfig,
    pub seed: u64,
    pub sample_count: usize,
    pub epochs: Vec<VqLossParts>,
    pub revived_codes: Vec<usize>,
    pub utilization: f64,
}

impl VqTrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,reconstruction,codebook,commitment,total,revived\n");
        for (i, (p, r)) in self.epochs.iter().zip(&self.revived_codes).enumerate() {
            let _ = writeln!(
                s,
                "{},{:.10},{:.10},{:.10},{:.10},{}",
                i + 1,
                p.reconstruction,
                p.codebook,
                p.commitment,
                p.total,
                r
            );
        }
        s
    }
}

/// Trains the codebook model on stride-1 macro windows of `train`.
pub fn train_vqvae(train: &[Trajectory], config: &VqConfig) -> Result<(CodebookModel, VqTrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(MaqError::Usage("training split is empty".into()));
    }
    let shortest = train.iter().map(Trajectory::len).min().unwrap_or(0);
    if config.horizon > shortest {
        return Err(MaqError::Config(format!(
            "H = {} exceeds the shortest demonstration ({shortest} steps)",
            config.horizon
        )));
    }
    let norm = NormStats::compute(train)?;
    let samples = extract_all(train, config.horizon);
    let mut rng = seeded_rng(config.seed);
    let mut model = CodebookModel::new(config, norm, &mut rng)?;

    // data-dependent codebook initialization
    let init_batch = random_indices(&mut rng, samples.len(), config.batch_size.max(config.codes));
    let init_refs: Vec<&MacroSample> = init_batch.iter().map(|&i| &samples[i]).collect();
    let init_latents = model.encode_batch(&VqBatch::new(&model.norm, &init_refs)?)?;
    for k in 0..model.codes() {
        let src = init_latents.row(k % init_latents.rows()).to_vec();
        model.codebook.row_mut(k).copy_from_slice(&src);
    }

    let mut enc_opt = AdamState::for_net(&model.encoder, config.learning_rate);
    let mut dec_opt = AdamState::for_net(&model.decoder, config.learning_rate);
    let mut code_opt = AdamState::new(model.codebook.as_slice().len(), config.learning_rate);
    let d = model.latent_dim();

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut revived_codes = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut usage = vec![0usize; model.codes()];
        let mut sums = [0.0; 4];
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&MacroSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let batch = VqBatch::new(&model.norm, &refs)?;
            let assignment = model.assign(&model.encode_batch(&batch)?);
            let (parts, grads) = model.objective(&batch, &assignment, config.beta)?;
            if !parts.total.is_finite() || !grads.is_finite() {
                return Err(MaqError::Training(format!(
                    "non-finite VQ loss at epoch {} batch {bi} (reconstruction {}, codebook {}, commitment {})",
                    epoch + 1,
                    parts.reconstruction,
                    parts.codebook,
                    parts.commitment
                )));
            }
            for &k in &assignment.indices {
                usage[k] += 1;
            }
            model.encoder.adam_step(&grads.encoder, &mut enc_opt)?;
            model.decoder.adam_step(&grads.decoder, &mut dec_opt)?;
            adam_step(model.codebook.as_mut_slice(), &grads.codebook, &mut code_opt)?;
            let w = chunk.len() as f64;
            sums[0] += parts.reconstruction * w;
            sums[1] += parts.codebook * w;
            sums[2] += parts.commitment * w;
            sums[3] += parts.total * w;
        }
        let n = samples.len() as f64;
        epochs.push(VqLossParts {
            reconstruction: sums[0] / n,
            codebook: sums[1] / n,
            commitment: sums[2] / n,
            total: sums[3] / n,
            beta: config.beta,
        });

        // re-seed codes that went unused for the whole epoch
        let dead: Vec<usize> = (0..model.codes()).filter(|&k| usage[k] == 0).collect();
        for &k in &dead {
            let pick = rng.random_range(0..samples.len());
            let latent = model.encode(&samples[pick].state, &samples[pick].macro_actions)?;
            model.codebook.row_mut(k).copy_from_slice(&latent);
            code_opt.reset_range(k * d..(k + 1) * d);
        }
        revived_codes.push(dead.len());
    }

    let utilization = codebook_utilization(&model, &samples)?;
    let report = VqTrainReport {
        config: config.clone(),
        seed: config.seed,
        sample_count: samples.len(),
        epochs,
        revived_codes,
        utilization,
    };
    Ok((model, report))
}

fn random_indices(rng: &mut Rng, population: usize, count: usize) -> Vec<usize> {
    if count <= population {
        rand::seq::index::sample(rng, population, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..population)).collect()
    }
}

pub const CHECKPOINT_FORMAT: &str = "MAQVQ";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_model(model: &CodebookModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_FORMAT} {CHECKPOINT_VERSION}");
    let _ = writeln!(
        out,
        "meta horizon={} codes={} latent={} seed={}",
        model.horizon,
        model.codes(),
        model.latent_dim(),
        model.seed
    );
    model.norm.write_records(&mut out);
    textio::write_net(&mut out, "encoder", &model.encoder);
    textio::write_net(&mut out, "decoder", &model.decoder);
    textio::write_matrix(&mut out, "codebook", &model.codebook);
    out
}

pub fn decode_model(text: &str) -> Result<CodebookModel> {
    let mut lines = Lines::new(text);
    textio::read_header(&mut lines, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
    let (line, tokens) = lines.record("meta", "metadata")?;
    let kv = textio::key_values(&tokens, line)?;
    let horizon = textio::parse_usize(textio::require(&kv, "horizon", line)?, line, "horizon")?;
    let codes = textio::parse_usize(textio::require(&kv, "codes", line)?, line, "codes")?;
    let latent = textio::parse_usize(textio::require(&kv, "latent", line)?, line, "latent")?;
    let seed: u64 = textio::require(&kv, "seed", line)?
        .parse()
        .map_err(|_| MaqError::parse(line, "bad seed"))?;
    let norm = NormStats::read_records(&mut lines)?;
    let encoder = textio::read_net(&mut lines, "encoder")?;
    let decoder = textio::read_net(&mut lines, "decoder")?;
    let codebook = textio::read_matrix(&mut lines, "codebook")?;
    lines.finish()?;
    let macro_dim = ACTION_DIM * horizon;
    if codebook.shape() != (codes, latent)
        || encoder.input_dim() != STATE_DIM + macro_dim
        || encoder.output_dim() != latent
        || decoder.input_dim() != STATE_DIM + latent
        || decoder.output_dim() != macro_dim
    {
        return Err(MaqError::Mismatch(
            "codebook checkpoint shapes disagree with its metadata".into(),
        ));
    }
    Ok(CodebookModel {
        encoder,
        decoder,
        codebook,
        horizon,
        norm,
        seed,
    })
}

pub fn save_model(model: &CodebookModel, path: &Path) -> Result<()> {
    textio::write_atomic(path, encode_model(model).as_bytes())
}

pub fn load_model(path: &Path) -> Result<CodebookModel> {
    decode_model(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::scripted_demo;
    use crate::nn::gradient_check;

    fn small_config() -> VqConfig {
        VqConfig {
            horizon: 3,
            codes: 4,
            latent_dim: 5,
            hidden: 12,
            epochs: 3,
            ..VqConfig::default()
        }
    }

    fn demos(n: u64) -> Vec<Trajectory> {
        (1..=n).map(|s| scripted_demo(s).unwrap()).collect()
    }

    fn toy_model(codebook: Matrix) -> CodebookModel {
        let norm = NormStats::compute(&demos(2)).unwrap();
        let cfg = VqConfig {
            codes: codebook.rows(),
            latent_dim: codebook.cols(),
            ..small_config()
        };
        let mut m = CodebookModel::new(&cfg, norm, &mut seeded_rng(0)).unwrap();
        m.codebook = codebook;
        m
    }

    #[test]
    fn quantize_picks_nearest_and_breaks_ties_low() {
        let m = toy_model(Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap());
        assert_eq!(m.quantize(&[0.2, 0.1]).unwrap().0, 0);
        assert_eq!(m.quantize(&[0.5, 0.5]).unwrap().0, 0);
        let cb = Matrix::from_fn(5, 2, |r, c| (r * 2 + c) as f64);
        let m = toy_model(cb.clone());
        let (k, code) = m.quantize(cb.row(3)).unwrap();
        assert_eq!(k, 3);
        assert_eq!(nearest_code(&cb, &code).1, 0.0);
    }

    #[test]
    fn quantize_matches_brute_force() {
        let mut rng = seeded_rng(8);
        let cb = Matrix::from_fn(16, 6, |_, _| rng.random_range(-1.0..1.0));
        for _ in 0..1000 {
            let e: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
            let dists: Vec<f64> = (0..16).map(|k| squared_distance(cb.row(k), &e)).collect();
            let brute = dists
                .iter()
                .enumerate()
                .fold(0, |best, (k, d)| if *d < dists[best] { k } else { best });
            assert_eq!(nearest_code(&cb, &e).0, brute);
        }
    }

    #[test]
    fn loss_parts_by_hand() {
        let p = vq_loss(&[1.0, 2.0], &[1.0, 2.0], &[0.3, 0.3], &[0.3, 0.3], 0.25);
        assert_eq!(p.total, 0.0);
        let p = vq_loss(&[1.0], &[1.0], &[1.0, 0.0], &[0.0, 0.0], 0.25);
        assert_eq!((p.reconstruction, p.codebook, p.commitment, p.total), (0.0, 1.0, 1.0, 1.25));
        let p = vq_loss(&[1.0], &[0.0], &[1.0, 0.0], &[0.0, 0.0], 0.0);
        assert_eq!(p.total, 2.0);
    }

    #[test]
    fn encode_decode_shapes_and_bounds() {
        let cfg = small_config();
        let d = demos(3);
        let (model, _) = train_vqvae(&d, &cfg).unwrap();
        let s = d[0].states[4].features();
        let m = extract_all(&d, 3)[4].macro_actions.clone();
        let e = model.encode(&s, &m).unwrap();
        assert_eq!(e.len(), cfg.latent_dim);
        assert_eq!(e, model.encode(&s, &m).unwrap());
        let out = model.decode_index(&s, 2).unwrap();
        assert_eq!(out.len(), 9);
        assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(model.encode(&s, &m[..6]).is_err());
        assert!(model.decode_index(&s, 4).is_err());
    }

    #[test]
    fn straight_through_gradient_matches_finite_differences() {
        let d = demos(3);
        let cfg = small_config();
        let (model, _) = train_vqvae(&d, &cfg).unwrap();
        let samples = extract_all(&d, cfg.horizon);
        let refs: Vec<&MacroSample> = samples.iter().step_by(7).take(4).collect();
        let batch = VqBatch::new(&model.norm, &refs).unwrap();
        let assignment = model.assign(&model.encode_batch(&batch).unwrap());
        let params = model.flat_params();
        let mut probe = model.clone();
        let err = gradient_check(
            |p| {
                probe.set_flat_params(p).unwrap();
                let (parts, g) = probe.objective(&batch, &assignment, cfg.beta).unwrap();
                (parts.total, g.flatten())
            },
            &params,
            400,
            1e-5,
        );
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn loss_identity_holds_per_batch() {
        let d = demos(2);
        let (model, report) = train_vqvae(&d, &small_config()).unwrap();
        for p in &report.epochs {
            assert!((p.total - (p.reconstruction + p.codebook + p.beta * p.commitment)).abs() < 1e-12);
            assert!(p.reconstruction >= 0.0 && p.codebook >= 0.0 && p.commitment >= 0.0);
        }
        assert_eq!(report.epochs.len(), 3);
        assert_eq!(model.codes(), 4);
    }

    #[test]
    fn training_is_deterministic() {
        let d = demos(2);
        let (a, ra) = train_vqvae(&d, &small_config()).unwrap();
        let (b, rb) = train_vqvae(&d, &small_config()).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_eq!(ra, rb);
    }

    #[test]
    fn horizon_longer_than_demos_is_rejected() {
        let d = demos(2);
        let cfg = VqConfig {
            horizon: 200,
            ..small_config()
        };
        assert!(matches!(train_vqvae(&d, &cfg), Err(MaqError::Config(_))));
    }

    #[test]
    fn utilization_edge_cases() {
        let d = demos(2);
        let samples = extract_all(&d, 3);
        let single = toy_model(Matrix::zeros(1, 5));
        assert_eq!(codebook_utilization(&single, &samples).unwrap(), 1.0);
        let (model, _) = train_vqvae(&d, &small_config()).unwrap();
        let same = vec![samples[0].clone(); 20];
        assert_eq!(codebook_utilization(&model, &same).unwrap(), 0.25);
        assert!(codebook_utilization(&model, &[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_shape_checks() {
        let d = demos(2);
        let (model, _) = train_vqvae(&d, &small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.maqvq");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!((back.horizon, back.codes(), back.seed), (3, 4, 1));
        let mut rng = seeded_rng(12);
        for _ in 0..100 {
            let e: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert_eq!(back.quantize(&e).unwrap(), model.quantize(&e).unwrap());
        }
        assert!(matches!(back.expect_shape(Some(3), Some(8)), Err(MaqError::Mismatch(_))));
        back.expect_shape(Some(3), Some(4)).unwrap();
        let bumped = encode_model(&model).replacen("MAQVQ 1", "MAQVQ 9", 1);
        assert!(matches!(decode_model(&bumped), Err(MaqError::Version { .. })));
    }
}
