use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pool::{attention_backward, attention_forward, fill_normal, mean_pool, AttentionCache, AttentionParams};
use super::FeatureClip;
use crate::error::{Error, Result};
use crate::tensor::{matvec, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PoolKind {
    Mean,
    Attention { heads: usize },
}

/// Parallel-decoding readout size: `max_len` positions over `vocab` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqShape {
    pub max_len: usize,
    pub vocab: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub features: usize,
    pub hidden: usize,
    pub pool: PoolKind,
    /// Multi-tag classes; 0 means no classification head.
    #[serde(default)]
    pub classes: usize,
    #[serde(default)]
    pub seq: Option<SeqShape>,
    /// Rows of the text table; 0 means none.
    #[serde(default)]
    pub text_items: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.hidden == 0 {
            return Err(Error::Config("features and hidden width must be positive".into()));
        }
        if let PoolKind::Attention { heads } = self.pool {
            if heads == 0 || self.hidden % heads != 0 {
                return Err(Error::Config(format!(
                    "hidden width {} is not divisible by {heads} heads",
                    self.hidden
                )));
            }
        }
        if let Some(s) = self.seq {
            if s.max_len == 0 || s.vocab < 2 {
                return Err(Error::Config("sequence head needs max_len >= 1 and vocab >= 2".into()));
            }
        }
        Ok(())
    }
}

/// All trainable tensors. Heads absent from the shape are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelParams {
    pub shape: ModelShape,
    /// `D x F`
    pub enc_w: Matrix,
    /// `1 x D`
    pub enc_b: Matrix,
    pub attention: Option<AttentionParams>,
    /// `K x D`
    pub mtc_w: Option<Matrix>,
    pub mtc_b: Option<Matrix>,
    /// `(T_max * V) x D`; row `t * V + v` scores token `v` at position `t`.
    pub seq_w: Option<Matrix>,
    pub seq_b: Option<Matrix>,
    /// `C x D`
    pub text_table: Option<Matrix>,
}

pub(crate) struct EncoderCache {
    hidden: Matrix,
    attention: Option<AttentionCache>,
}

impl ToyModelParams {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let d = shape.hidden;
        let attention = match shape.pool {
            PoolKind::Mean => None,
            PoolKind::Attention { heads } => Some(AttentionParams::zeros(d, heads)?),
        };
        let head = |rows: usize| (rows > 0).then(|| Matrix::zeros(rows, d));
        let bias = |rows: usize| (rows > 0).then(|| Matrix::zeros(1, rows));
        let seq_rows = shape.seq.map_or(0, |s| s.max_len * s.vocab);
        Ok(Self {
            shape,
            enc_w: Matrix::zeros(d, shape.features),
            enc_b: Matrix::zeros(1, d),
            attention,
            mtc_w: head(shape.classes),
            mtc_b: bias(shape.classes),
            seq_w: head(seq_rows),
            seq_b: bias(seq_rows),
            text_table: head(shape.text_items),
        })
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = shape.hidden;
        fill_normal(&mut p.enc_w, (1.0 / shape.features as f64).sqrt(), &mut rng);
        if let PoolKind::Attention { heads } = shape.pool {
            p.attention = Some(AttentionParams::random(d, heads, &mut rng)?);
        }
        let s = (1.0 / d as f64).sqrt();
        for m in [&mut p.mtc_w, &mut p.seq_w].into_iter().flatten() {
            fill_normal(m, s, &mut rng);
        }
        if let Some(t) = &mut p.text_table {
            fill_normal(t, 1.0, &mut rng);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.tensors_mut() {
            m.as_mut_slice().fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![("enc_w", &self.enc_w), ("enc_b", &self.enc_b)];
        if let Some(a) = &self.attention {
            out.extend([
                ("attn_query", &a.query),
                ("attn_key", &a.key),
                ("attn_value", &a.value),
                ("attn_out", &a.out),
            ]);
        }
        let opt = [
            ("mtc_w", &self.mtc_w),
            ("mtc_b", &self.mtc_b),
            ("seq_w", &self.seq_w),
            ("seq_b", &self.seq_b),
            ("text_table", &self.text_table),
        ];
        out.extend(opt.into_iter().filter_map(|(n, m)| m.as_ref().map(|m| (n, m))));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = vec![("enc_w", &mut self.enc_w), ("enc_b", &mut self.enc_b)];
        if let Some(a) = &mut self.attention {
            out.extend([
                ("attn_query", &mut a.query),
                ("attn_key", &mut a.key),
                ("attn_value", &mut a.value),
                ("attn_out", &mut a.out),
            ]);
        }
        let opt = [
            ("mtc_w", &mut self.mtc_w),
            ("mtc_b", &mut self.mtc_b),
            ("seq_w", &mut self.seq_w),
            ("seq_b", &mut self.seq_b),
            ("text_table", &mut self.text_table),
        ];
        out.extend(opt.into_iter().filter_map(|(n, m)| m.as_mut().map(|m| (n, m))));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// All parameters concatenated in [`tensors`](Self::tensors) order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, m)| m.as_slice().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut rest = values;
        for (_, m) in self.tensors_mut() {
            let (head, tail) = rest.split_at(m.len());
            m.as_mut_slice().copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// `self -= rate * grad`
    pub(crate) fn sgd_step(&mut self, grad: &ToyModelParams, rate: f64) -> Result<()> {
        let grads = grad.tensors();
        for ((name, p), (gname, g)) in self.tensors_mut().into_iter().zip(grads) {
            if name != gname {
                return Err(Error::Shape(format!("tensor {name} paired with gradient {gname}")));
            }
            p.add_scaled(g, -rate)?;
        }
        Ok(())
    }

    pub(crate) fn encode(&self, clip: &FeatureClip) -> Result<(Vec<f64>, EncoderCache)> {
        let x = &clip.frames;
        if x.rows() == 0 {
            return Err(Error::InvalidInput("clip has no frames".into()));
        }
        if x.cols() != self.shape.features {
            return Err(Error::Shape(format!(
                "clip has {} features, model expects {}",
                x.cols(),
                self.shape.features
            )));
        }
        let mut hidden = x.matmul_transpose(&self.enc_w)?;
        let b = self.enc_b.row(0);
        for t in 0..hidden.rows() {
            for (h, bias) in hidden.row_mut(t).iter_mut().zip(b) {
                *h = (*h + bias).tanh();
            }
        }
        let (z, attention) = match &self.attention {
            None => (mean_pool(&hidden)?, None),
            Some(a) => {
                let (z, c) = attention_forward(&hidden, a)?;
                (z, Some(c))
            }
        };
        Ok((z, EncoderCache { hidden, attention }))
    }

    /// Accumulates encoder and pooling gradients for one clip given `dL/dz`.
    pub(crate) fn encode_backward(
        &self,
        clip: &FeatureClip,
        cache: &EncoderCache,
        dz: &[f64],
        grad: &mut ToyModelParams,
    ) {
        let h = &cache.hidden;
        let t_len = h.rows();
        let mut dh = match (&self.attention, &cache.attention, grad.attention.as_mut()) {
            (Some(a), Some(c), Some(ga)) => attention_backward(h, a, c, dz, ga),
            _ => {
                let inv = 1.0 / t_len as f64;
                let mut m = Matrix::zeros(t_len, dz.len());
                for t in 0..t_len {
                    for (o, g) in m.row_mut(t).iter_mut().zip(dz) {
                        *o = g * inv;
                    }
                }
                m
            }
        };
        for t in 0..t_len {
            let pre = dh.row_mut(t);
            for (g, hv) in pre.iter_mut().zip(h.row(t)) {
                *g *= 1.0 - hv * hv;
            }
            crate::tensor::outer_acc(&mut grad.enc_w, pre, clip.frames.row(t));
            for (gb, g) in grad.enc_b.row_mut(0).iter_mut().zip(pre.iter()) {
                *gb += g;
            }
        }
    }

    /// Pooled clip embedding `z`.
    pub fn embed(&self, clip: &FeatureClip) -> Result<Vec<f64>> {
        self.encode(clip).map(|(z, _)| z)
    }

    /// Multi-tag logits for one clip.
    pub fn forward_mtc(&self, clip: &FeatureClip) -> Result<Vec<f64>> {
        let (w, b) = match (&self.mtc_w, &self.mtc_b) {
            (Some(w), Some(b)) => (w, b),
            _ => return Err(Error::Shape("model has no classification head".into())),
        };
        let z = self.embed(clip)?;
        Ok(linear(w, b, &z))
    }

    /// `T_max x V` token logits for one clip; every position reads only `z`.
    pub fn forward_seq(&self, clip: &FeatureClip) -> Result<Matrix> {
        let (w, b, s) = match (&self.seq_w, &self.seq_b, self.shape.seq) {
            (Some(w), Some(b), Some(s)) => (w, b, s),
            _ => return Err(Error::Shape("model has no sequence head".into())),
        };
        let z = self.embed(clip)?;
        Matrix::from_vec(s.max_len, s.vocab, linear(w, b, &z))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        p.check_shapes().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(p)
    }

    /// Verifies every tensor against `shape` and finiteness.
    pub fn check_shapes(&self) -> Result<()> {
        let expected = Self::zeros(self.shape)?;
        let want = expected.tensors();
        let have = self.tensors();
        if want.len() != have.len() {
            return Err(Error::Shape("tensor set does not match the model shape".into()));
        }
        for ((wn, wm), (hn, hm)) in want.iter().zip(&have) {
            if wn != hn || wm.shape() != hm.shape() {
                return Err(Error::Shape(format!("tensor {hn}: expected {:?}, got {:?}", wm.shape(), hm.shape())));
            }
        }
        if let (Some(a), PoolKind::Attention { heads }) = (&self.attention, self.shape.pool) {
            if a.heads != heads {
                return Err(Error::Shape(format!("attention has {} heads, shape says {heads}", a.heads)));
            }
        }
        if !self.is_finite() {
            return Err(Error::Shape("non-finite parameter".into()));
        }
        Ok(())
    }
}

pub(crate) fn linear(w: &Matrix, b: &Matrix, z: &[f64]) -> Vec<f64> {
    let mut out = b.row(0).to_vec();
    let mut tmp = vec![0.0; w.rows()];
    matvec(w, z, &mut tmp);
    for (o, t) in out.iter_mut().zip(tmp) {
        *o += t;
    }
    out
}
