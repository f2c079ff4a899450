use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Average precision of one class. Ties in score keep input order, so the
/// result is deterministic. Returns `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// AP per class; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    /// Classes left out of the average.
    pub excluded: Vec<usize>,
}

/// Macro-averaged AP over `M x K` scores and `{0,1}` labels.
pub fn eval_map(scores: &Matrix, labels: &Matrix) -> Result<MapReport> {
    if scores.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "scores {:?} vs labels {:?}",
            scores.shape(),
            labels.shape()
        )));
    }
    let (s, l) = (scores.transpose(), labels.transpose());
    let per_class: Vec<Option<f64>> = (0..s.rows())
        .map(|k| {
            let lab: Vec<bool> = l.row(k).iter().map(|&v| v > 0.5).collect();
            average_precision(s.row(k), &lab)
        })
        .collect();
    let excluded: Vec<usize> = (0..per_class.len()).filter(|&k| per_class[k].is_none()).collect();
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::InvalidInput("no class has a positive example".into()));
    }
    Ok(MapReport {
        map: included.iter().sum::<f64>() / included.len() as f64,
        per_class,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        let ap = average_precision(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn inverted_single_positive() {
        for n in 1..10 {
            let scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let mut labels = vec![false; n];
            labels[0] = true;
            let ap = average_precision(&scores, &labels).unwrap();
            assert!((ap - 1.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_classes_excluded() {
        let scores = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.3]]).unwrap();
        let labels = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let r = eval_map(&scores, &labels).unwrap();
        assert_eq!(r.excluded, vec![1]);
        assert_eq!(r.map, 1.0);
        assert!(eval_map(&scores, &Matrix::zeros(2, 2)).is_err());
    }
}
