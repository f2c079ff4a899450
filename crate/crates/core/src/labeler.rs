//! Multi-hot labels and canonical tag sequences over a frozen vocabulary.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::TagList;
use crate::uts::Vocabulary;

pub const SEQUENCE_SEPARATOR: &str = ", ";

/// Sparse multi-hot vector plus the number of out-of-vocabulary tags seen.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MultiHot {
    pub positives: Vec<usize>,
    pub oov: usize,
}

pub fn to_multihot(tags: &TagList, vocab: &Vocabulary) -> MultiHot {
    let mut out = MultiHot::default();
    for tag in tags.iter() {
        match vocab.index_of(tag) {
            Some(i) => out.positives.push(i),
            None => out.oov += 1,
        }
    }
    out.positives.sort_unstable();
    out.positives.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub id: String,
    /// Strictly increasing vocabulary indices; never empty.
    pub positives: Vec<usize>,
    pub k: usize,
    pub sequence: String,
}

/// Row of the label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub id: String,
    pub positives: Vec<usize>,
    pub sequence: String,
}

impl From<&LabeledExample> for LabelRow {
    fn from(e: &LabeledExample) -> Self {
        Self {
            id: e.id.clone(),
            positives: e.positives.clone(),
            sequence: e.sequence.clone(),
        }
    }
}

impl LabeledExample {
    /// Re-validates a label-file row against the vocabulary it was built with.
    pub fn from_row(row: LabelRow, vocab: &Vocabulary) -> Result<Self> {
        let canonical = to_tag_sequence(&row.positives, vocab, TagOrder::Canonical)?;
        if !row.positives.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidInput(format!(
                "{}: positives are not strictly increasing",
                row.id
            )));
        }
        if canonical != row.sequence {
            return Err(Error::InvalidInput(format!(
                "{}: sequence {:?} does not match positives",
                row.id, row.sequence
            )));
        }
        Ok(Self {
            id: row.id,
            positives: row.positives,
            k: vocab.k(),
            sequence: row.sequence,
        })
    }

    /// Dense `{0,1}` row of length `k`.
    pub fn dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.k];
        for &i in &self.positives {
            v[i] = 1.0;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredRow {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub filtered: Vec<String>,
    /// Out-of-vocabulary tags across all inputs.
    pub oov_tags: usize,
}

impl FilterReport {
    pub fn rows(&self) -> impl Iterator<Item = FilteredRow> + '_ {
        self.filtered.iter().map(|id| FilteredRow {
            id: id.clone(),
            reason: "zero-vector".into(),
        })
    }
}

/// Labels every pair; samples with no in-vocabulary tag are filtered out.
pub fn build_dataset(
    pairs: &[(String, TagList)],
    vocab: &Vocabulary,
) -> Result<(Vec<LabeledExample>, FilterReport)> {
    let mut seen = HashSet::with_capacity(pairs.len());
    let mut examples = Vec::with_capacity(pairs.len());
    let mut report = FilterReport::default();
    for (id, tags) in pairs {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate id {id:?}")));
        }
        let hot = to_multihot(tags, vocab);
        report.oov_tags += hot.oov;
        if hot.positives.is_empty() {
            report.filtered.push(id.clone());
            continue;
        }
        let sequence = to_tag_sequence(&hot.positives, vocab, TagOrder::Canonical)?;
        examples.push(LabeledExample {
            id: id.clone(),
            positives: hot.positives,
            k: vocab.k(),
            sequence,
        });
    }
    Ok((examples, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "order")]
pub enum TagOrder {
    /// Ascending vocabulary index.
    #[default]
    Canonical,
    /// Seeded permutation of the canonical order.
    Shuffled { seed: u64 },
}

pub fn to_tag_sequence(positives: &[usize], vocab: &Vocabulary, order: TagOrder) -> Result<String> {
    if positives.is_empty() {
        return Err(Error::InvalidInput("no positive tags to serialize".into()));
    }
    let mut idx = positives.to_vec();
    idx.sort_unstable();
    if idx.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput("repeated vocabulary index".into()));
    }
    if let TagOrder::Shuffled { seed } = order {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let tags = idx
        .iter()
        .map(|&i| {
            vocab
                .tag(i)
                .ok_or_else(|| Error::InvalidInput(format!("index {i} outside vocabulary of {}", vocab.k())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tags.join(SEQUENCE_SEPARATOR))
}

/// Inverse of [`to_tag_sequence`]: returns the sorted positive indices.
pub fn parse_tag_sequence(sequence: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut idx = sequence
        .split(SEQUENCE_SEPARATOR)
        .map(|tag| {
            vocab
                .index_of(tag)
                .ok_or_else(|| Error::InvalidInput(format!("tag {tag:?} not in vocabulary")))
        })
        .collect::<Result<Vec<_>>>()?;
    idx.sort_unstable();
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::uts::{select_top_k, DfTable};

    fn tl(v: &[&str]) -> TagList {
        TagList::new(v.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    /// Vocabulary whose index order is exactly `tags`.
    fn vocab(tags: &[&str]) -> Vocabulary {
        // distinct dfs below N/e give strictly decreasing scores
        let n = 1000;
        let counts: BTreeMap<String, u64> = tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_string(), (tags.len() - i) as u64 * 10))
            .collect();
        let v = select_top_k(&DfTable::from_counts(counts, n).unwrap(), tags.len()).unwrap();
        assert_eq!(v.tags().collect::<Vec<_>>(), tags);
        v
    }

    #[test]
    fn multihot_examples() {
        let v = vocab(&["a", "b", "c"]);
        assert_eq!(to_multihot(&tl(&["a", "c", "d"]), &v), MultiHot { positives: vec![0, 2], oov: 1 });
        assert_eq!(to_multihot(&tl(&["x", "y"]), &v).positives, Vec::<usize>::new());
        assert_eq!(to_multihot(&tl(&["c", "b", "a"]), &v).positives, vec![0, 1, 2]);
    }

    #[test]
    fn dataset_filters_zero_vectors() {
        let v = vocab(&["a", "b", "c"]);
        let pairs = vec![
            ("r1".to_string(), tl(&["a"])),
            ("r2".to_string(), tl(&["zzz"])),
            ("r3".to_string(), tl(&["c", "b"])),
        ];
        let (ex, report) = build_dataset(&pairs, &v).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(report.filtered, vec!["r2".to_string()]);
        assert_eq!(ex[1].sequence, "b, c");
        assert_eq!(ex[1].dense(), vec![0.0, 1.0, 1.0]);

        let (ex, report) = build_dataset(&[], &v).unwrap();
        assert!(ex.is_empty() && report.filtered.is_empty());
    }

    #[test]
    fn dataset_rejects_duplicate_ids() {
        let v = vocab(&["a"]);
        let pairs = vec![("r".to_string(), tl(&["a"])), ("r".to_string(), tl(&["a"]))];
        assert!(build_dataset(&pairs, &v).is_err());
    }

    #[test]
    fn sequence_examples() {
        let v = vocab(&["dog", "bark", "rain"]);
        assert_eq!(to_tag_sequence(&[0, 2], &v, TagOrder::Canonical).unwrap(), "dog, rain");
        assert_eq!(to_tag_sequence(&[1], &v, TagOrder::Canonical).unwrap(), "bark");
        assert!(to_tag_sequence(&[], &v, TagOrder::Canonical).is_err());
        assert!(to_tag_sequence(&[5], &v, TagOrder::Canonical).is_err());
        assert!(to_tag_sequence(&[1, 1], &v, TagOrder::Canonical).is_err());
    }

    #[test]
    fn shuffled_is_seeded_permutation() {
        let tags: Vec<String> = (0..12).map(|i| format!("t{i:02}")).collect();
        let refs: Vec<&str> = tags.iter().map(String::as_str).collect();
        let v = vocab(&refs);
        let all: Vec<usize> = (0..12).collect();
        let a = to_tag_sequence(&all, &v, TagOrder::Shuffled { seed: 7 }).unwrap();
        let b = to_tag_sequence(&all, &v, TagOrder::Shuffled { seed: 7 }).unwrap();
        assert_eq!(a, b);
        let mut parts: Vec<&str> = a.split(", ").collect();
        assert_ne!(parts, refs);
        parts.sort_unstable();
        assert_eq!(parts, refs);
        assert_eq!(parse_tag_sequence(&a, &v).unwrap(), all);
    }

    #[test]
    fn label_row_validation() {
        let v = vocab(&["dog", "bark", "rain"]);
        let good = LabelRow { id: "x".into(), positives: vec![0, 2], sequence: "dog, rain".into() };
        assert!(LabeledExample::from_row(good.clone(), &v).is_ok());
        let bad = LabelRow { sequence: "rain, dog".into(), ..good.clone() };
        assert!(LabeledExample::from_row(bad, &v).is_err());
        let unsorted = LabelRow { positives: vec![2, 0], ..good };
        assert!(LabeledExample::from_row(unsorted, &v).is_err());
    }
}
