use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{eval_map, MapReport};
use super::model::{linear, ModelShape, ToyModelParams};
use super::FeatureClip;
use crate::error::{Error, Result};
use crate::objectives::{
    bce_multilabel, infonce_symmetric, mtl_combine, nll_sequence, EmbeddingBatch, LossResult, SequenceLogits,
    DEFAULT_TAU,
};
use crate::tensor::{matvec_transpose_acc, outer_acc, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    Mtc,
    Par,
    Contrastive,
    /// Multi-tag loss plus `lambda` times the parallel-decoding loss.
    Mtl { lambda: f64 },
}

impl Objective {
    fn needs_labels(self) -> bool {
        matches!(self, Objective::Mtc | Objective::Mtl { .. })
    }

    fn needs_tokens(self) -> bool {
        matches!(self, Objective::Par | Objective::Mtl { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub objective: Objective,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            learning_rate: 0.5,
            seed: 0,
            objective: Objective::Mtc,
            tau: DEFAULT_TAU,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if let Objective::Mtl { lambda } = self.objective {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::Config(format!("lambda {lambda} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    /// Loss on the fixed monitor batch after this step.
    pub loss: f64,
    /// Loss of the minibatch used for this step's update; absent at step 0.
    pub batch_loss: Option<f64>,
}

fn check_clip(params: &ToyModelParams, clip: &FeatureClip, objective: Objective) -> Result<()> {
    let shape = &params.shape;
    if objective.needs_labels() {
        let label = clip
            .label
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("clip has no multi-tag label".into()))?;
        if let Some(&k) = label.iter().find(|&&k| k >= shape.classes) {
            return Err(Error::InvalidInput(format!("label {k} outside {} classes", shape.classes)));
        }
    }
    if objective.needs_tokens() {
        let seq = shape
            .seq
            .ok_or_else(|| Error::Shape("model has no sequence head".into()))?;
        let tokens = clip
            .tokens
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("clip has no token targets".into()))?;
        if tokens.is_empty() || tokens.len() > seq.max_len {
            return Err(Error::InvalidInput(format!(
                "{} tokens for a readout of {} positions",
                tokens.len(),
                seq.max_len
            )));
        }
    }
    if objective == Objective::Contrastive {
        let c = clip
            .caption_id
            .ok_or_else(|| Error::InvalidInput("clip has no caption id".into()))?;
        if c >= shape.text_items {
            return Err(Error::InvalidInput(format!("caption id {c} outside {} text rows", shape.text_items)));
        }
    }
    Ok(())
}

fn head<'a>(m: &'a Option<Matrix>, name: &str) -> Result<&'a Matrix> {
    m.as_ref().ok_or_else(|| Error::Shape(format!("model has no {name} tensor")))
}

fn mtc_part(params: &ToyModelParams, z: &Matrix, clips: &[&FeatureClip]) -> Result<LossResult> {
    let (w, b) = (head(&params.mtc_w, "mtc_w")?, head(&params.mtc_b, "mtc_b")?);
    let mut logits = z.matmul_transpose(w)?;
    let mut targets = Matrix::zeros(z.rows(), w.rows());
    for (i, clip) in clips.iter().enumerate() {
        for (l, bias) in logits.row_mut(i).iter_mut().zip(b.row(0)) {
            *l += bias;
        }
        for &k in clip.label.iter().flatten() {
            targets.set(i, k, 1.0);
        }
    }
    let r = bce_multilabel(&logits, &targets)?;
    let g = &r.grads["logits"];
    let gt = g.transpose();
    let dz = g.matmul_transpose(&w.transpose())?;
    let dw = gt.matmul_transpose(&z.transpose())?;
    let db = Matrix::row_vector(gt.iter_rows().map(|r| r.iter().sum()).collect());
    Ok(LossResult::new(r.loss)
        .with_grad("z", dz)
        .with_grad("mtc_w", dw)
        .with_grad("mtc_b", db))
}

/// Batch mean of per-clip summed token NLL.
fn par_part(params: &ToyModelParams, z: &Matrix, clips: &[&FeatureClip]) -> Result<LossResult> {
    let (w, b) = (head(&params.seq_w, "seq_w")?, head(&params.seq_b, "seq_b")?);
    let seq = params.shape.seq.ok_or_else(|| Error::Shape("model has no sequence head".into()))?;
    let inv = 1.0 / clips.len() as f64;
    let mut dz = Matrix::zeros(z.rows(), z.cols());
    let mut dw = Matrix::zeros(w.rows(), w.cols());
    let mut db = Matrix::zeros(1, w.rows());
    let mut loss = 0.0;
    for (i, clip) in clips.iter().enumerate() {
        let tokens = clip.tokens.clone().unwrap_or_default();
        let used = tokens.len() * seq.vocab;
        let mut flat = linear(w, b, z.row(i));
        flat.truncate(used);
        let r = nll_sequence(&SequenceLogits::new(Matrix::from_vec(tokens.len(), seq.vocab, flat)?, tokens)?)?;
        loss += r.loss * inv;
        let mut dy = vec![0.0; w.rows()];
        for (d, g) in dy.iter_mut().zip(r.grads["logits"].as_slice()) {
            *d = g * inv;
        }
        matvec_transpose_acc(w, &dy, dz.row_mut(i));
        outer_acc(&mut dw, &dy, z.row(i));
        for (gb, d) in db.row_mut(0).iter_mut().zip(&dy) {
            *gb += d;
        }
    }
    Ok(LossResult::new(loss)
        .with_grad("z", dz)
        .with_grad("seq_w", dw)
        .with_grad("seq_b", db))
}

fn contrastive_part(params: &ToyModelParams, z: &Matrix, clips: &[&FeatureClip], tau: f64) -> Result<LossResult> {
    let table = head(&params.text_table, "text_table")?;
    let ids: Vec<usize> = clips.iter().map(|c| c.caption_id.unwrap_or(0)).collect();
    let text = Matrix::from_rows(&ids.iter().map(|&c| table.row(c)).collect::<Vec<_>>())?;
    let r = infonce_symmetric(&EmbeddingBatch::new(z.clone())?, &EmbeddingBatch::new(text)?, tau)?;
    let mut dtable = Matrix::zeros(table.rows(), table.cols());
    for (i, &c) in ids.iter().enumerate() {
        for (d, g) in dtable.row_mut(c).iter_mut().zip(r.grads["text"].row(i)) {
            *d += g;
        }
    }
    Ok(LossResult::new(r.loss)
        .with_grad("z", r.grads["audio"].clone())
        .with_grad("text_table", dtable))
}

/// Loss of one minibatch and the gradient of every parameter.
pub fn batch_objective(
    params: &ToyModelParams,
    clips: &[&FeatureClip],
    objective: Objective,
    tau: f64,
) -> Result<(f64, ToyModelParams)> {
    if clips.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for clip in clips {
        check_clip(params, clip, objective)?;
    }
    let mut caches = Vec::with_capacity(clips.len());
    let mut rows = Vec::with_capacity(clips.len());
    for clip in clips {
        let (z, cache) = params.encode(clip)?;
        rows.push(z);
        caches.push(cache);
    }
    let z = Matrix::from_rows(&rows)?;
    let result = match objective {
        Objective::Mtc => mtc_part(params, &z, clips)?,
        Objective::Par => par_part(params, &z, clips)?,
        Objective::Contrastive => contrastive_part(params, &z, clips, tau)?,
        Objective::Mtl { lambda } => mtl_combine(&mtc_part(params, &z, clips)?, &par_part(params, &z, clips)?, lambda)?,
    };

    let mut grad = params.zeros_like();
    for (name, g) in grad.tensors_mut() {
        if let Some(src) = result.grads.get(name) {
            g.add_scaled(src, 1.0)?;
        }
    }
    if let Some(dz) = result.grads.get("z") {
        for (i, (clip, cache)) in clips.iter().zip(&caches).enumerate() {
            params.encode_backward(clip, cache, dz.row(i), &mut grad);
        }
    }
    Ok((result.loss, grad))
}

/// Mean loss over consecutive `config.batch`-sized chunks of `clips`. A
/// trailing partial chunk is dropped unless it is the only one.
pub fn evaluate_loss(params: &ToyModelParams, clips: &[FeatureClip], config: &TrainConfig) -> Result<f64> {
    if clips.is_empty() || config.batch == 0 {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let full = clips.len() / config.batch;
    let chunks: Vec<&[FeatureClip]> = if full == 0 {
        vec![clips]
    } else {
        clips.chunks_exact(config.batch).collect()
    };
    let mut total = 0.0;
    for chunk in &chunks {
        let refs: Vec<&FeatureClip> = chunk.iter().collect();
        total += batch_objective(params, &refs, config.objective, config.tau)?.0;
    }
    Ok(total / chunks.len() as f64)
}

/// Multi-tag mAP of the classification head over `clips`.
pub fn evaluate_map(params: &ToyModelParams, clips: &[FeatureClip]) -> Result<MapReport> {
    let k = params.shape.classes;
    let mut scores = Matrix::zeros(clips.len(), k);
    let mut labels = Matrix::zeros(clips.len(), k);
    for (i, clip) in clips.iter().enumerate() {
        check_clip(params, clip, Objective::Mtc)?;
        scores.row_mut(i).copy_from_slice(&params.forward_mtc(clip)?);
        for &c in clip.label.iter().flatten() {
            labels.set(i, c, 1.0);
        }
    }
    eval_map(&scores, &labels)
}

/// Plain minibatch SGD from a seeded initialization. Minibatches are drawn
/// with replacement. The trace holds `steps + 1` points, each the loss of a
/// monitor batch drawn once before training.
pub fn train_toy(
    dataset: &[FeatureClip],
    shape: ModelShape,
    config: &TrainConfig,
) -> Result<(ToyModelParams, Vec<TracePoint>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut params = ToyModelParams::init(shape, config.seed)?;
    for clip in dataset {
        check_clip(&params, clip, config.objective)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<&FeatureClip> {
        (0..config.batch).map(|_| &dataset[rng.gen_range(0..dataset.len())]).collect()
    };
    let monitor = draw(&mut rng);
    let monitor_loss = |p: &ToyModelParams, step: usize| -> Result<f64> {
        let loss = batch_objective(p, &monitor, config.objective, config.tau)?.0;
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::NonFinite { step })
        }
    };

    let mut trace = Vec::with_capacity(config.steps + 1);
    trace.push(TracePoint {
        step: 0,
        loss: monitor_loss(&params, 0)?,
        batch_loss: None,
    });
    for step in 1..=config.steps {
        let batch = draw(&mut rng);
        let (loss, grad) = batch_objective(&params, &batch, config.objective, config.tau)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite { step });
        }
        params.sgd_step(&grad, config.learning_rate)?;
        trace.push(TracePoint {
            step,
            loss: monitor_loss(&params, step)?,
            batch_loss: Some(loss),
        });
    }
    Ok((params, trace))
}
