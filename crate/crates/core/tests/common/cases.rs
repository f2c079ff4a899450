//! Random small instances for finite-difference checks. Each function draws
//! one instance and returns `Err` with a description when the analytic
//! gradient disagrees with central differences.

use rand::Rng;
use uts_core::objectives::{
    bce_multilabel, infonce_symmetric, mixed_caption_loss, mtl_combine, nll_sequence, split_decode_modes, DecodeMode,
    EmbeddingBatch, SequenceLogits,
};
use uts_core::toy::{batch_objective, FeatureClip, ModelShape, Objective, PoolKind, SeqShape, ToyModelParams};
use uts_core::Matrix;

use super::{binary_matrix, gradcheck, random_matrix};

fn reshape(x: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, x.to_vec()).unwrap()
}

fn nonzero_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    loop {
        let m = random_matrix(rng, rows, cols, 1.5);
        if m.iter_rows().all(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() > 0.2) {
            return m;
        }
    }
}

pub fn bce<R: Rng>(rng: &mut R) -> Result<(), String> {
    let (m, k) = (rng.gen_range(1..=4), rng.gen_range(1..=8));
    let logits = random_matrix(rng, m, k, 4.0);
    let y = binary_matrix(rng, m, k);
    let r = bce_multilabel(&logits, &y).map_err(|e| e.to_string())?;
    let f = |x: &[f64]| bce_multilabel(&reshape(x, m, k), &y).unwrap().loss;
    gradcheck("bce", f, logits.as_slice(), r.grad("logits").unwrap().as_slice()).map(drop)
}

pub fn infonce<R: Rng>(rng: &mut R) -> Result<(), String> {
    let (m, d) = (rng.gen_range(1..=4), rng.gen_range(1..=6));
    let tau = rng.gen_range(0.1..2.0);
    let (a, t) = (nonzero_rows(rng, m, d), nonzero_rows(rng, m, d));
    let eval = |a: Matrix, t: Matrix| {
        infonce_symmetric(&EmbeddingBatch::new(a).unwrap(), &EmbeddingBatch::new(t).unwrap(), tau).unwrap()
    };
    let r = eval(a.clone(), t.clone());
    let mut x = a.as_slice().to_vec();
    x.extend_from_slice(t.as_slice());
    let mut g = r.grad("audio").unwrap().as_slice().to_vec();
    g.extend_from_slice(r.grad("text").unwrap().as_slice());
    let n = m * d;
    let f = |x: &[f64]| eval(reshape(&x[..n], m, d), reshape(&x[n..], m, d)).loss;
    gradcheck("infonce", f, &x, &g).map(drop)
}

pub fn nll<R: Rng>(rng: &mut R) -> Result<(), String> {
    let (t, v) = (rng.gen_range(0..=5), rng.gen_range(2..=7));
    let logits = random_matrix(rng, t, v, 3.0);
    let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
    let eval = |m: Matrix| nll_sequence(&SequenceLogits::new(m, targets.clone()).unwrap()).unwrap();
    let r = eval(logits.clone());
    let f = |x: &[f64]| eval(reshape(x, t, v)).loss;
    gradcheck("nll", f, logits.as_slice(), r.grad("logits").unwrap().as_slice()).map(drop)
}

/// Generative loss of a batch of per-sample sequences split between AR and
/// PAR decoding. Every sample's loss enters with weight 1.
pub fn mixed_caption<R: Rng>(rng: &mut R) -> Result<(), String> {
    let batch = rng.gen_range(1..=4);
    let v = rng.gen_range(2..=5);
    let fraction = [0.0, 0.25, 0.5, 1.0][rng.gen_range(0..4)];
    let modes = split_decode_modes(batch, fraction, rng.gen()).map_err(|e| e.to_string())?;
    let lens: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=3)).collect();
    let targets: Vec<Vec<usize>> = lens.iter().map(|&t| (0..t).map(|_| rng.gen_range(0..v)).collect()).collect();
    let x: Vec<f64> = (0..lens.iter().sum::<usize>() * v).map(|_| rng.gen_range(-3.0..3.0)).collect();

    let eval = |x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let (mut ar, mut par, mut grad, mut off) = (Vec::new(), Vec::new(), Vec::new(), 0);
        for ((&t, tg), mode) in lens.iter().zip(&targets).zip(&modes) {
            let r = nll_sequence(&SequenceLogits::new(reshape(&x[off..off + t * v], t, v), tg.clone()).unwrap()).unwrap();
            off += t * v;
            match mode {
                DecodeMode::Autoregressive => ar.push(r.loss),
                DecodeMode::Parallel => par.push(r.loss),
            }
            if want_grad {
                grad.extend_from_slice(r.grad("logits").unwrap().as_slice());
            }
        }
        (mixed_caption_loss(&ar, &par, fraction).unwrap(), grad)
    };
    let (_, g) = eval(&x, true);
    gradcheck("mixed_caption", |p: &[f64]| eval(p, false).0, &x, &g).map(drop)
}

/// `bce(X) + lambda * nll(X)` on one shared logits matrix, so the combined
/// gradient exercises the overlapping-key path.
pub fn mtl<R: Rng>(rng: &mut R) -> Result<(), String> {
    let (t, v) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
    let lambda = [0.0, 0.2, 1.0, rng.gen_range(0.0..3.0)][rng.gen_range(0..4)];
    let logits = random_matrix(rng, t, v, 3.0);
    let y = binary_matrix(rng, t, v);
    let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
    let eval = |m: Matrix| {
        let mtc = bce_multilabel(&m, &y).unwrap();
        let gen = nll_sequence(&SequenceLogits::new(m, targets.clone()).unwrap()).unwrap();
        mtl_combine(&mtc, &gen, lambda).unwrap()
    };
    let r = eval(logits.clone());
    let f = |x: &[f64]| eval(reshape(x, t, v)).loss;
    gradcheck("mtl", f, logits.as_slice(), r.grad("logits").unwrap().as_slice()).map(drop)
}

/// Whole toy model: encoder, pooling and the head used by a random
/// objective, checked on every parameter.
pub fn toy_model<R: Rng>(rng: &mut R, case: usize) -> Result<(), String> {
    let hidden = [2, 4, 6][rng.gen_range(0..3)];
    let pool = if case % 2 == 0 {
        PoolKind::Mean
    } else {
        PoolKind::Attention {
            heads: if hidden % 2 == 0 && rng.gen_bool(0.5) { 2 } else { 1 },
        }
    };
    let objective = match (case / 2) % 4 {
        0 => Objective::Mtc,
        1 => Objective::Par,
        2 => Objective::Contrastive,
        _ => Objective::Mtl {
            lambda: rng.gen_range(0.1..1.5),
        },
    };
    let shape = ModelShape {
        features: rng.gen_range(2..=5),
        hidden,
        pool,
        classes: rng.gen_range(1..=4),
        seq: Some(SeqShape {
            max_len: rng.gen_range(1..=3),
            vocab: rng.gen_range(2..=4),
        }),
        text_items: rng.gen_range(2..=4),
    };
    let seq = shape.seq.unwrap();
    let clips: Vec<FeatureClip> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let frames = rng.gen_range(1..=3);
            let mut c = FeatureClip::new(random_matrix(rng, frames, shape.features, 1.5));
            let mut label: Vec<usize> = (0..shape.classes).filter(|_| rng.gen_bool(0.5)).collect();
            if label.is_empty() {
                label.push(rng.gen_range(0..shape.classes));
            }
            c.label = Some(label);
            c.tokens = Some((0..rng.gen_range(1..=seq.max_len)).map(|_| rng.gen_range(0..seq.vocab)).collect());
            c.caption_id = Some(rng.gen_range(0..shape.text_items));
            c
        })
        .collect();
    let refs: Vec<&FeatureClip> = clips.iter().collect();
    let tau = rng.gen_range(0.2..1.0);

    let mut params = ToyModelParams::init(shape, rng.gen()).map_err(|e| e.to_string())?;
    let x: Vec<f64> = params.to_flat().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
    params.set_flat(&x).unwrap();
    let (_, grad) = batch_objective(&params, &refs, objective, tau).map_err(|e| e.to_string())?;
    let mut probe = params.clone();
    let f = |p: &[f64]| {
        probe.set_flat(p).unwrap();
        batch_objective(&probe, &refs, objective, tau).unwrap().0
    };
    gradcheck(&format!("toy model {objective:?} {pool:?}"), f, &x, &grad.to_flat()).map(drop)
}
