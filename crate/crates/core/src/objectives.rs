//! Pre-training loss kernels with analytic gradients.
//!
//! Normalization conventions follow the defining equations exactly:
//! - multi-tag BCE sums over classes and averages over samples;
//! - symmetric InfoNCE carries a `1 / (2M)` prefactor;
//! - sequence NLL sums over positions with no length normalization.
//!
//! Every kernel is a pure function of its inputs. Gradients are keyed by the
//! name of the input they differentiate (`"logits"`, `"audio"`, `"text"`).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, log_sum_exp, softmax_in_place, Matrix};

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.07;

/// AR share of each captioning minibatch in the reference setup.
pub const DEFAULT_AR_FRACTION: f64 = 0.25;

/// Multi-task weights swept in the reference setup.
pub const LAMBDA_PRESETS: [f64; 2] = [0.2, 1.0];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossResult {
    pub loss: f64,
    pub grads: BTreeMap<String, Matrix>,
}

impl LossResult {
    pub fn new(loss: f64) -> Self {
        Self {
            loss,
            grads: BTreeMap::new(),
        }
    }

    pub fn with_grad(mut self, name: impl Into<String>, grad: Matrix) -> Self {
        self.grads.insert(name.into(), grad);
        self
    }

    pub fn grad(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grads.values().all(Matrix::is_finite)
    }
}

/// `M x D` embedding rows. Rows need not be normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch(Matrix);

impl EmbeddingBatch {
    pub fn new(rows: Matrix) -> Result<Self> {
        if rows.rows() == 0 || rows.cols() == 0 {
            return Err(Error::Shape(format!(
                "embedding batch must be at least 1x1, got {:?}",
                rows.shape()
            )));
        }
        Ok(Self(rows))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// `T x V` logits with one target token per position.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLogits {
    pub logits: Matrix,
    pub targets: Vec<usize>,
}

impl SequenceLogits {
    pub fn new(logits: Matrix, targets: Vec<usize>) -> Result<Self> {
        if logits.cols() < 2 {
            return Err(Error::Shape(format!(
                "sequence vocabulary must have at least 2 tokens, got {}",
                logits.cols()
            )));
        }
        if logits.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} logit rows for {} targets",
                logits.rows(),
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= logits.cols()) {
            return Err(Error::InvalidInput(format!(
                "target id {t} outside vocabulary of {}",
                logits.cols()
            )));
        }
        Ok(Self { logits, targets })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Multi-label BCE over `M x K` logits against `{0,1}` targets.
///
/// Each term uses `max(z, 0) - z*y + ln(1 + e^{-|z|})`, which equals
/// `-[y ln σ(z) + (1-y) ln(1-σ(z))]` without forming probabilities.
pub fn bce_multilabel(logits: &Matrix, targets: &Matrix) -> Result<LossResult> {
    if logits.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if let Some(y) = targets.as_slice().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidInput(format!("target {y} is not 0 or 1")));
    }
    let m = logits.rows();
    let mut grad = Matrix::zeros(m, logits.cols());
    if m == 0 {
        return Ok(LossResult::new(0.0).with_grad("logits", grad));
    }
    let inv_m = 1.0 / m as f64;
    let mut total = 0.0;
    for ((g, &z), &y) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(logits.as_slice())
        .zip(targets.as_slice())
    {
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(z) - y) * inv_m;
    }
    Ok(LossResult::new(total * inv_m).with_grad("logits", grad))
}

/// Unit-normalized rows plus the original norms.
fn normalize_rows(m: &Matrix, name: &'static str) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let norm = dot(m.row(r), m.row(r)).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm { matrix: name, row: r });
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Pulls a gradient w.r.t. unit rows back to the raw rows:
/// `dx = (g - n (n·g)) / |x|`.
fn backprop_normalize(unit: &Matrix, norms: &[f64], grad_unit: &Matrix) -> Matrix {
    let mut out = grad_unit.clone();
    for (r, &norm) in norms.iter().enumerate() {
        let n = unit.row(r);
        let proj = dot(n, grad_unit.row(r));
        for (o, nv) in out.row_mut(r).iter_mut().zip(n) {
            *o = (*o - nv * proj) / norm;
        }
    }
    out
}

/// Symmetric InfoNCE over matched `(audio_i, text_i)` pairs with cosine
/// similarity scaled by `1 / tau`. Gradients are returned for both inputs.
pub fn infonce_symmetric(audio: &EmbeddingBatch, text: &EmbeddingBatch, tau: f64) -> Result<LossResult> {
    let (a, t) = (audio.matrix(), text.matrix());
    if a.shape() != t.shape() {
        return Err(Error::Shape(format!(
            "audio {:?} vs text {:?}",
            a.shape(),
            t.shape()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature {tau} must be positive")));
    }
    let m = a.rows();
    let (an, a_norms) = normalize_rows(a, "audio")?;
    let (tn, t_norms) = normalize_rows(t, "text")?;

    // s[i][j] = cos(a_i, t_j) / tau
    let mut s = an.matmul_transpose(&tn)?;
    s.scale(1.0 / tau);

    let mut row_sm = s.clone();
    let mut loss = 0.0;
    for i in 0..m {
        loss += log_sum_exp(s.row(i)) - s.get(i, i);
        softmax_in_place(row_sm.row_mut(i));
    }
    let st = s.transpose();
    let mut col_sm = st.clone();
    for j in 0..m {
        loss += log_sum_exp(st.row(j)) - st.get(j, j);
        softmax_in_place(col_sm.row_mut(j));
    }
    let scale = 1.0 / (2.0 * m as f64);
    loss *= scale;

    // dL/ds = (P_row + P_col - 2I) / (2M)
    let col_sm = col_sm.transpose();
    let mut ds = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let diag = if i == j { 2.0 } else { 0.0 };
            ds.set(i, j, (row_sm.get(i, j) + col_sm.get(i, j) - diag) * scale / tau);
        }
    }
    // d/d(an) = ds * tn, d/d(tn) = ds^T * an
    let g_an = ds.matmul_transpose(&tn.transpose())?;
    let g_tn = ds.transpose().matmul_transpose(&an.transpose())?;

    Ok(LossResult::new(loss)
        .with_grad("audio", backprop_normalize(&an, &a_norms, &g_an))
        .with_grad("text", backprop_normalize(&tn, &t_norms, &g_tn)))
}

/// Summed token NLL. Serves both decoding modes: autoregressive and parallel
/// decoding differ only in how the logits were conditioned.
pub fn nll_sequence(batch: &SequenceLogits) -> Result<LossResult> {
    let logits = &batch.logits;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (t, &target) in batch.targets.iter().enumerate() {
        let row = logits.row(t);
        loss += log_sum_exp(row) - row[target];
        let g = grad.row_mut(t);
        softmax_in_place(g);
        g[target] -= 1.0;
    }
    Ok(LossResult::new(loss).with_grad("logits", grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Autoregressive,
    Parallel,
}

fn ar_count(batch: usize, ar_fraction: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&ar_fraction) {
        return Err(Error::InvalidInput(format!(
            "ar_fraction {ar_fraction} outside [0, 1]"
        )));
    }
    Ok((ar_fraction * batch as f64).round() as usize)
}

/// Seeded per-batch split with exactly `round(ar_fraction * batch)`
/// autoregressive samples.
pub fn split_decode_modes(batch: usize, ar_fraction: f64, seed: u64) -> Result<Vec<DecodeMode>> {
    let n_ar = ar_count(batch, ar_fraction)?;
    let mut modes: Vec<DecodeMode> = (0..batch)
        .map(|i| {
            if i < n_ar {
                DecodeMode::Autoregressive
            } else {
                DecodeMode::Parallel
            }
        })
        .collect();
    modes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(modes)
}

/// Generative captioning loss: per-sample AR losses of the AR-assigned
/// samples plus PAR losses of the rest, summed.
///
/// The split sizes must match `ar_fraction` for the combined batch.
pub fn mixed_caption_loss(ar_losses: &[f64], par_losses: &[f64], ar_fraction: f64) -> Result<f64> {
    let batch = ar_losses.len() + par_losses.len();
    let expected = ar_count(batch, ar_fraction)?;
    if ar_losses.len() != expected {
        return Err(Error::InvalidInput(format!(
            "{} AR samples in a batch of {batch}; ar_fraction {ar_fraction} requires {expected}",
            ar_losses.len()
        )));
    }
    Ok(ar_losses.iter().sum::<f64>() + par_losses.iter().sum::<f64>())
}

/// `l_mtc + lambda * l_gen`, with gradients combined by the same weights.
/// Keys present in only one input are carried over (scaled for the
/// generative side); with `lambda == 0` generative-only keys are dropped.
pub fn mtl_combine(mtc: &LossResult, gen: &LossResult, lambda: f64) -> Result<LossResult> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda {lambda} must be nonnegative")));
    }
    let mut out = LossResult::new(mtc.loss + lambda * gen.loss);
    out.grads = mtc.grads.clone();
    for (key, g) in &gen.grads {
        match out.grads.get_mut(key) {
            Some(existing) => existing
                .add_scaled(g, lambda)
                .map_err(|_| Error::Shape(format!("gradient {key:?}: {:?} vs {:?}", existing.shape(), g.shape())))?,
            None if lambda > 0.0 => {
                out.grads.insert(key.clone(), g.scaled(lambda));
            }
            None => {}
        }
    }
    Ok(out)
}
