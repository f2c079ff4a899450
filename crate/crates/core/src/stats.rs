//! Tag rank-frequency tables, dataset summaries and vocabulary overlap.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uts::{DfTable, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub rank: usize,
    pub tag: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySummary {
    pub n_records: u64,
    pub pool_size: usize,
    pub total_occurrences: u64,
    pub mean_tags_per_record: f64,
    pub median_tags_per_record: f64,
    pub min_tags_per_record: usize,
    pub max_tags_per_record: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyReport {
    /// Count descending, then tag ascending; ranks start at 1.
    pub rows: Vec<FrequencyRow>,
    pub summary: FrequencySummary,
}

/// Builds the long-tail table from document frequencies and the number of
/// tags each record carried.
///
/// `per_record_counts` must have one entry per record in `table`, and its sum
/// must equal the sum of the table's counts.
pub fn frequency_report(table: &DfTable, per_record_counts: &[usize]) -> Result<FrequencyReport> {
    if table.is_empty() {
        return Err(Error::InvalidInput("tag table is empty".into()));
    }
    if per_record_counts.len() as u64 != table.n_records() {
        return Err(Error::InvalidInput(format!(
            "{} per-record counts for {} records",
            per_record_counts.len(),
            table.n_records()
        )));
    }
    let total: u64 = table.counts().values().sum();
    let per_record_total: u64 = per_record_counts.iter().map(|&c| c as u64).sum();
    if total != per_record_total {
        return Err(Error::InvalidInput(format!(
            "tag counts sum to {total} but records carry {per_record_total} tags"
        )));
    }

    let mut pairs: Vec<(&String, u64)> = table.counts().iter().map(|(t, &c)| (t, c)).collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let rows = pairs
        .into_iter()
        .enumerate()
        .map(|(i, (tag, count))| FrequencyRow {
            rank: i + 1,
            tag: tag.clone(),
            count,
        })
        .collect();

    let mut sorted = per_record_counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    Ok(FrequencyReport {
        rows,
        summary: FrequencySummary {
            n_records: table.n_records(),
            pool_size: table.len(),
            total_occurrences: total,
            mean_tags_per_record: per_record_total as f64 / n as f64,
            median_tags_per_record: median,
            min_tags_per_record: sorted[0],
            max_tags_per_record: sorted[n - 1],
        },
    })
}

impl FrequencyReport {
    /// `rank,tag,count`
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "rank,tag,count")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.rank, r.tag, r.count)?;
        }
        Ok(())
    }

    /// Base-10 logs of rank and count, for plotting the long tail.
    pub fn write_loglog_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "log10_rank,log10_count")?;
        for r in &self.rows {
            writeln!(w, "{:.9},{:.9}", (r.rank as f64).log10(), (r.count as f64).log10())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabOverlap {
    pub intersection: usize,
    pub only_first: usize,
    pub only_second: usize,
    /// `|A ∩ B| / |A ∪ B|`; 1.0 when both are empty.
    pub jaccard: f64,
}

pub fn compare_vocabularies(first: &Vocabulary, second: &Vocabulary) -> VocabOverlap {
    let a: HashSet<&str> = first.tags().collect();
    let b: HashSet<&str> = second.tags().collect();
    let intersection = a.intersection(&b).count();
    let union = a.len() + b.len() - intersection;
    VocabOverlap {
        intersection,
        only_first: a.len() - intersection,
        only_second: b.len() - intersection,
        jaccard: if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::uts::select_top_k;

    fn table(pairs: &[(&str, u64)], n: u64) -> DfTable {
        let counts: BTreeMap<String, u64> = pairs.iter().map(|(t, c)| (t.to_string(), *c)).collect();
        DfTable::from_counts(counts, n).unwrap()
    }

    fn vocab(tags: &[&str]) -> Vocabulary {
        let counts: Vec<(&str, u64)> = tags.iter().map(|t| (*t, 1)).collect();
        select_top_k(&table(&counts, 10), tags.len()).unwrap()
    }

    #[test]
    fn ranks_break_ties_by_tag() {
        let r = frequency_report(&table(&[("c", 1), ("a", 3), ("b", 1)], 3), &[3, 1, 1]).unwrap();
        let got: Vec<(usize, &str)> = r.rows.iter().map(|r| (r.rank, r.tag.as_str())).collect();
        assert_eq!(got, vec![(1, "a"), (2, "b"), (3, "c")]);
        assert_eq!(r.summary.total_occurrences, 5);
        assert_eq!(r.summary.median_tags_per_record, 1.0);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "rank,tag,count\n1,a,3\n2,b,1\n3,c,1\n");
    }

    #[test]
    fn single_tag() {
        let r = frequency_report(&table(&[("rain", 2)], 2), &[1, 1]).unwrap();
        assert_eq!(r.rows, vec![FrequencyRow { rank: 1, tag: "rain".into(), count: 2 }]);
    }

    #[test]
    fn inconsistent_counts_rejected() {
        let t = table(&[("a", 2)], 2);
        assert!(frequency_report(&t, &[1]).is_err());
        assert!(frequency_report(&t, &[1, 2]).is_err());
        assert!(frequency_report(&DfTable::default(), &[]).is_err());
    }

    #[test]
    fn overlap_examples() {
        let ab = vocab(&["a", "b"]);
        let abcd = vocab(&["a", "b", "c", "d"]);
        assert_eq!(compare_vocabularies(&ab, &ab).jaccard, 1.0);
        assert_eq!(compare_vocabularies(&ab, &vocab(&["x", "y"])).jaccard, 0.0);
        let o = compare_vocabularies(&ab, &abcd);
        assert_eq!((o.intersection, o.only_first, o.only_second, o.jaccard), (2, 0, 2, 0.5));
    }
}
