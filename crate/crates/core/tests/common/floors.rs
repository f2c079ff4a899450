//! Loss floors computed by exhaustive enumeration with the library's own
//! loss kernels.

use uts_core::objectives::{infonce_symmetric, nll_sequence, EmbeddingBatch, SequenceLogits};
use uts_core::Matrix;

/// Expected loss of the Bayes-optimal PAR readout, by enumerating every
/// true sequence and every noisy target.
pub fn par(seq_len: usize, vocab: usize, noise: f64) -> f64 {
    let total = vocab.pow(seq_len as u32);
    let decode = |mut code: usize| -> Vec<usize> {
        (0..seq_len)
            .map(|_| {
                let v = code % vocab;
                code /= vocab;
                v
            })
            .collect()
    };
    let p_of = |truth: usize, token: usize| {
        let q = noise / vocab as f64;
        if truth == token {
            1.0 - noise + q
        } else {
            q
        }
    };
    let mut expected = 0.0;
    for t in 0..total {
        let truth = decode(t);
        let mut logits = Matrix::zeros(seq_len, vocab);
        for (pos, &y) in truth.iter().enumerate() {
            for v in 0..vocab {
                logits.set(pos, v, p_of(y, v).ln());
            }
        }
        for o in 0..total {
            let target = decode(o);
            let prob: f64 = truth.iter().zip(&target).map(|(&y, &z)| p_of(y, z)).product();
            let nll = nll_sequence(&SequenceLogits::new(logits.clone(), target).unwrap()).unwrap().loss;
            expected += prob * nll / total as f64;
        }
    }
    expected
}

/// Loss of every class assignment of a batch, with audio rows equal to
/// their class's text row and text rows forming a regular simplex.
pub fn contrastive(batch: usize, classes: usize, tau: f64) -> f64 {
    let simplex: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let row: Vec<f64> = (0..classes).map(|j| if j == c { 1.0 } else { 0.0 } - 1.0 / classes as f64).collect();
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / n).collect()
        })
        .collect();
    let total = classes.pow(batch as u32);
    let mut expected = 0.0;
    for code in 0..total {
        let mut c = code;
        let rows: Vec<&[f64]> = (0..batch)
            .map(|_| {
                let k = c % classes;
                c /= classes;
                simplex[k].as_slice()
            })
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let loss = infonce_symmetric(&EmbeddingBatch::new(m.clone()).unwrap(), &EmbeddingBatch::new(m).unwrap(), tau)
            .unwrap()
            .loss;
        expected += loss / total as f64;
    }
    expected
}
