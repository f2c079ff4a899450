//! Temporal pooling: arithmetic mean and multi-head attention pooling.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, matvec, matvec_transpose_acc, outer_acc, softmax_in_place, Matrix};

/// Learned-query attention pooling. One query per head attends over the
/// frames' key projections; the per-head value averages are concatenated and
/// projected back to the model width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: usize,
    /// `H x (D / H)`
    pub query: Matrix,
    /// `D x D` each.
    pub key: Matrix,
    pub value: Matrix,
    pub out: Matrix,
}

impl AttentionParams {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidInput(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            query: Matrix::zeros(heads, dim / heads),
            key: Matrix::zeros(dim, dim),
            value: Matrix::zeros(dim, dim),
            out: Matrix::zeros(dim, dim),
        })
    }

    pub fn random<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dim, heads)?;
        let head_dim = dim / heads;
        fill_normal(&mut p.query, (1.0 / head_dim as f64).sqrt(), rng);
        let s = (1.0 / dim as f64).sqrt();
        fill_normal(&mut p.key, s, rng);
        fill_normal(&mut p.value, s, rng);
        fill_normal(&mut p.out, s, rng);
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.key.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    fn check(&self, frames: &Matrix) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidInput(format!(
                "model width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        if frames.cols() != d {
            return Err(Error::Shape(format!(
                "frames have width {}, attention expects {d}",
                frames.cols()
            )));
        }
        if frames.rows() == 0 {
            return Err(Error::InvalidInput("cannot pool zero frames".into()));
        }
        Ok(())
    }
}

pub(crate) fn fill_normal<R: Rng>(m: &mut Matrix, std: f64, rng: &mut R) {
    for v in m.as_mut_slice() {
        let n: f64 = rng.sample(StandardNormal);
        *v = n * std;
    }
}

pub fn mean_pool(frames: &Matrix) -> Result<Vec<f64>> {
    if frames.rows() == 0 {
        return Err(Error::InvalidInput("cannot pool zero frames".into()));
    }
    let mut out = vec![0.0; frames.cols()];
    for row in frames.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = 1.0 / frames.rows() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    keys: Matrix,
    values: Matrix,
    /// `H x T`, each row sums to one.
    weights: Matrix,
    context: Vec<f64>,
}

pub(crate) fn attention_forward(frames: &Matrix, p: &AttentionParams) -> Result<(Vec<f64>, AttentionCache)> {
    p.check(frames)?;
    let (t_len, dh) = (frames.rows(), p.head_dim());
    let keys = frames.matmul_transpose(&p.key)?;
    let values = frames.matmul_transpose(&p.value)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = Matrix::zeros(p.heads, t_len);
    let mut context = vec![0.0; p.dim()];
    for h in 0..p.heads {
        let span = h * dh..(h + 1) * dh;
        let q = p.query.row(h);
        let w = weights.row_mut(h);
        for (t, wt) in w.iter_mut().enumerate() {
            *wt = dot(q, &keys.row(t)[span.clone()]) * scale;
        }
        softmax_in_place(w);
        for (t, &a) in w.iter().enumerate() {
            for (c, v) in context[span.clone()].iter_mut().zip(&values.row(t)[span.clone()]) {
                *c += a * v;
            }
        }
    }
    let mut z = vec![0.0; p.dim()];
    matvec(&p.out, &context, &mut z);
    Ok((
        z,
        AttentionCache {
            keys,
            values,
            weights,
            context,
        },
    ))
}

/// Accumulates parameter gradients into `grad` and returns `dL/dframes`.
pub(crate) fn attention_backward(
    frames: &Matrix,
    p: &AttentionParams,
    cache: &AttentionCache,
    dz: &[f64],
    grad: &mut AttentionParams,
) -> Matrix {
    let (t_len, d, dh) = (frames.rows(), p.dim(), p.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    outer_acc(&mut grad.out, dz, &cache.context);
    let mut dctx = vec![0.0; d];
    matvec_transpose_acc(&p.out, dz, &mut dctx);

    let mut dkeys = Matrix::zeros(t_len, d);
    let mut dvalues = Matrix::zeros(t_len, d);
    let mut dweight = vec![0.0; t_len];
    for h in 0..p.heads {
        let span = h * dh..(h + 1) * dh;
        let w = cache.weights.row(h);
        let dc = &dctx[span.clone()];
        for t in 0..t_len {
            dweight[t] = dot(dc, &cache.values.row(t)[span.clone()]);
            for (dv, c) in dvalues.row_mut(t)[span.clone()].iter_mut().zip(dc) {
                *dv += w[t] * c;
            }
        }
        let mean: f64 = w.iter().zip(&dweight).map(|(a, g)| a * g).sum();
        let q = p.query.row(h);
        for t in 0..t_len {
            let dscore = w[t] * (dweight[t] - mean) * scale;
            for (gq, k) in grad.query.row_mut(h).iter_mut().zip(&cache.keys.row(t)[span.clone()]) {
                *gq += dscore * k;
            }
            for (dk, qv) in dkeys.row_mut(t)[span.clone()].iter_mut().zip(q) {
                *dk += dscore * qv;
            }
        }
    }

    let mut dframes = Matrix::zeros(t_len, d);
    for t in 0..t_len {
        let x = frames.row(t);
        outer_acc(&mut grad.key, dkeys.row(t), x);
        outer_acc(&mut grad.value, dvalues.row(t), x);
        let df = dframes.row_mut(t);
        matvec_transpose_acc(&p.key, dkeys.row(t), df);
        matvec_transpose_acc(&p.value, dvalues.row(t), df);
    }
    dframes
}

pub fn attention_pool(frames: &Matrix, params: &AttentionParams) -> Result<Vec<f64>> {
    attention_forward(frames, params).map(|(z, _)| z)
}

/// `H x T` attention weights for inspection.
pub fn attention_weights(frames: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    attention_forward(frames, params).map(|(_, c)| c.weights)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_frames(t: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut m = Matrix::zeros(t, d);
        fill_normal(&mut m, 1.0, rng);
        m
    }

    #[test]
    fn mean_pool_cases() {
        let single = Matrix::from_rows(&[[1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(mean_pool(&single).unwrap(), vec![1.0, -2.0, 3.0]);
        let constant = Matrix::from_rows(&[[0.5, 2.0], [0.5, 2.0], [0.5, 2.0]]).unwrap();
        assert_eq!(mean_pool(&constant).unwrap(), vec![0.5, 2.0]);
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 5.0], [-1.0, 0.5]]).unwrap();
        let b = Matrix::from_rows(&[[-1.0, 0.5], [1.0, 2.0], [3.0, 5.0]]).unwrap();
        assert_eq!(mean_pool(&a).unwrap(), mean_pool(&b).unwrap());
        assert!(mean_pool(&Matrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn identical_frames_pass_through_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::random(6, 2, &mut rng).unwrap();
        let frame = [0.3, -1.2, 0.8, 0.0, 2.0, -0.4];
        let frames = Matrix::from_rows(&[frame; 5]).unwrap();
        let z = attention_pool(&frames, &p).unwrap();
        let mut v = vec![0.0; 6];
        matvec(&p.value, &frame, &mut v);
        let mut expected = vec![0.0; 6];
        matvec(&p.out, &v, &mut expected);
        for (a, b) in z.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_is_mean_then_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = AttentionParams::random(4, 1, &mut rng).unwrap();
        p.query = Matrix::zeros(1, 4);
        let frames = random_frames(7, 4, &mut rng);
        let z = attention_pool(&frames, &p).unwrap();
        let values = frames.matmul_transpose(&p.value).unwrap();
        let mean = mean_pool(&values).unwrap();
        let mut expected = vec![0.0; 4];
        matvec(&p.out, &mean, &mut expected);
        for (a, b) in z.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::random(8, 4, &mut rng).unwrap();
        let frames = random_frames(11, 8, &mut rng);
        let w = attention_weights(&frames, &p).unwrap();
        for h in 0..4 {
            assert!((w.row(h).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn divisibility_is_checked() {
        assert!(AttentionParams::zeros(6, 4).is_err());
        let mut p = AttentionParams::zeros(6, 3).unwrap();
        p.heads = 4;
        assert!(attention_pool(&Matrix::zeros(2, 6), &p).is_err());
    }
}
