//! Synthetic datasets with planted, known structure.
//!
//! Every generator draws a set of random unit directions in feature space.
//! A clip's frames are a noisy, randomly weighted mixture of the directions
//! that encode its targets.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::{ModelShape, PoolKind, SeqShape};
use super::FeatureClip;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub clips: usize,
    pub features: usize,
    pub frames: usize,
    /// Tags (multi-tag), classes (contrastive) or tokens per position (PAR).
    pub classes: usize,
    /// Multi-tag clips carry between 1 and `max_active` positives.
    pub max_active: usize,
    /// PAR sequence length.
    pub seq_len: usize,
    /// Per-coordinate Gaussian noise on every frame.
    pub noise: f64,
    /// Probability that a PAR target token is replaced by a uniform draw.
    pub label_noise: f64,
    /// Not read from config files; pipelines derive it from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            clips: 2000,
            features: super::DEFAULT_FEATURES,
            frames: 4,
            classes: 20,
            max_active: 3,
            seq_len: 3,
            noise: 0.3,
            label_noise: 0.1,
            seed: 0,
        }
    }
}

impl PlantedConfig {
    fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.features == 0 || self.frames == 0 || self.classes == 0 {
            return Err(Error::Config("planted data needs clips, features, frames and classes".into()));
        }
        if self.max_active == 0 || self.max_active > self.classes {
            return Err(Error::Config(format!(
                "max_active {} must be in 1..={}",
                self.max_active, self.classes
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("noise must be >= 0 and label_noise in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSet {
    pub clips: Vec<FeatureClip>,
    /// One unit row per planted concept.
    pub directions: Matrix,
    pub classes: usize,
    pub seq: Option<SeqShape>,
    pub text_items: usize,
}

impl PlantedSet {
    /// Model shape whose heads match this dataset's targets.
    pub fn model_shape(&self, hidden: usize, pool: PoolKind) -> ModelShape {
        ModelShape {
            features: self.directions.cols(),
            hidden,
            pool,
            classes: self.classes,
            seq: self.seq,
            text_items: self.text_items,
        }
    }

    /// `M x K` dense labels of the multi-tag targets.
    pub fn label_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.clips.len(), self.classes);
        for (i, c) in self.clips.iter().enumerate() {
            for &k in c.label.iter().flatten() {
                m.set(i, k, 1.0);
            }
        }
        m
    }
}

fn unit_directions(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(n, dim);
    for i in 0..n {
        let row = m.row_mut(i);
        loop {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-8 {
                row.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    m
}

/// `T_f x F` frames, each a mixture of `active` rows with weights in
/// `[0.5, 1.5)` plus noise.
fn mix_frames(dirs: &Matrix, active: &[usize], cfg: &PlantedConfig, rng: &mut ChaCha8Rng) -> Matrix {
    let mut frames = Matrix::zeros(cfg.frames, dirs.cols());
    for t in 0..cfg.frames {
        let row = frames.row_mut(t);
        for &a in active {
            let c: f64 = rng.gen_range(0.5..1.5);
            for (v, d) in row.iter_mut().zip(dirs.row(a)) {
                *v += c * d;
            }
        }
        for v in row.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += cfg.noise * n;
        }
    }
    frames
}

fn draw_positives(cfg: &PlantedConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.gen_range(1..=cfg.max_active);
    let mut pos = sample(rng, cfg.classes, n).into_vec();
    pos.sort_unstable();
    pos
}

/// Multi-tag data: `classes` tags, each a fixed random direction.
pub fn planted_mtc(cfg: &PlantedConfig) -> Result<PlantedSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dirs = unit_directions(cfg.classes, cfg.features, &mut rng);
    let clips = (0..cfg.clips)
        .map(|_| {
            let pos = draw_positives(cfg, &mut rng);
            let mut clip = FeatureClip::new(mix_frames(&dirs, &pos, cfg, &mut rng));
            clip.label = Some(pos);
            clip
        })
        .collect();
    Ok(PlantedSet {
        clips,
        directions: dirs,
        classes: cfg.classes,
        seq: None,
        text_items: 0,
    })
}

/// Parallel-decoding data: position `t` holding token `v` contributes
/// direction `t * V + v`. Each target token is independently replaced by a
/// uniform draw with probability `label_noise`.
pub fn planted_par(cfg: &PlantedConfig) -> Result<PlantedSet> {
    cfg.validate()?;
    if cfg.seq_len == 0 || cfg.classes < 2 {
        return Err(Error::Config("PAR data needs seq_len >= 1 and at least 2 tokens".into()));
    }
    let (t_len, v) = (cfg.seq_len, cfg.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dirs = unit_directions(t_len * v, cfg.features, &mut rng);
    let clips = (0..cfg.clips)
        .map(|_| {
            let truth: Vec<usize> = (0..t_len).map(|_| rng.gen_range(0..v)).collect();
            let active: Vec<usize> = truth.iter().enumerate().map(|(t, &y)| t * v + y).collect();
            let mut clip = FeatureClip::new(mix_frames(&dirs, &active, cfg, &mut rng));
            let tokens = truth
                .iter()
                .map(|&y| {
                    if rng.gen_bool(cfg.label_noise) {
                        rng.gen_range(0..v)
                    } else {
                        y
                    }
                })
                .collect();
            clip.tokens = Some(tokens);
            clip
        })
        .collect();
    Ok(PlantedSet {
        clips,
        directions: dirs,
        classes: 0,
        seq: Some(SeqShape { max_len: t_len, vocab: v }),
        text_items: 0,
    })
}

/// Contrastive data: each clip belongs to one of `classes` uniformly drawn
/// classes and is paired with that class's text-table row.
pub fn planted_contrastive(cfg: &PlantedConfig) -> Result<PlantedSet> {
    cfg.validate()?;
    if cfg.classes < 2 {
        return Err(Error::Config("contrastive data needs at least 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dirs = unit_directions(cfg.classes, cfg.features, &mut rng);
    let clips = (0..cfg.clips)
        .map(|_| {
            let c = rng.gen_range(0..cfg.classes);
            let mut clip = FeatureClip::new(mix_frames(&dirs, &[c], cfg, &mut rng));
            clip.caption_id = Some(c);
            clip
        })
        .collect();
    Ok(PlantedSet {
        clips,
        directions: dirs,
        classes: 0,
        seq: None,
        text_items: cfg.classes,
    })
}

/// Multi-tag data whose token targets are the sorted positive tags.
pub fn planted_mtl(cfg: &PlantedConfig) -> Result<PlantedSet> {
    let mut set = planted_mtc(cfg)?;
    if cfg.classes < 2 {
        return Err(Error::Config("multi-task data needs at least 2 tags".into()));
    }
    for clip in &mut set.clips {
        clip.tokens = clip.label.clone();
    }
    set.seq = Some(SeqShape {
        max_len: cfg.max_active,
        vocab: cfg.classes,
    });
    Ok(set)
}

fn xlnx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Bayes-optimal expected summed NLL of a `seq_len`-token target under
/// [`planted_par`]'s label noise.
pub fn par_entropy_floor(seq_len: usize, vocab: usize, label_noise: f64) -> f64 {
    let v = vocab as f64;
    let q = label_noise / v;
    let p = 1.0 - label_noise + q;
    seq_len as f64 * -(xlnx(p) + (v - 1.0) * xlnx(q))
}

/// Expected symmetric InfoNCE of a batch of `batch` clips with uniformly
/// drawn classes, when every audio embedding points exactly at its class's
/// text row and the text rows form a regular simplex (pairwise cosine
/// `-1 / (C - 1)`). Clips sharing a class are indistinguishable, which keeps
/// this above zero.
pub fn contrastive_floor(batch: usize, classes: usize, tau: f64) -> Result<f64> {
    if batch == 0 || classes < 2 || !(tau > 0.0) {
        return Err(Error::InvalidInput("floor needs batch >= 1, classes >= 2, tau > 0".into()));
    }
    let s = -1.0 / (classes as f64 - 1.0);
    let off = ((s - 1.0) / tau).exp();
    let pc = 1.0 / classes as f64;
    let n = batch - 1;
    let mut expected = 0.0;
    let mut log_binom = 0.0f64;
    for j in 0..=n {
        if j > 0 {
            log_binom += ((n - j + 1) as f64).ln() - (j as f64).ln();
        }
        let w = (log_binom + j as f64 * pc.ln() + (n - j) as f64 * (1.0 - pc).ln()).exp();
        let m = (j + 1) as f64;
        expected += w * (m + (batch as f64 - m) * off).ln();
    }
    Ok(expected)
}
