//! Unified Tag System construction.
//!
//! Tags are scored by `s(t) = df(t) * ln((N + 1) / (df(t) + 1))`, where
//! `df(t)` counts the records whose tag list contains `t` and `N` is the
//! number of records. The score rises with frequency up to roughly `N / e`
//! and falls back to zero for a tag present in every record, so both very
//! rare and near-universal tags are pushed down. The top `K` tags under the
//! order (score desc, df desc, tag asc) form the vocabulary; their positions
//! are the label indices used downstream.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parser::{is_valid_tag, TagList};

/// Vocabulary sizes swept in the reference experiments.
pub const K_PRESETS: [usize; 5] = [800, 1000, 1500, 2000, 3000];

/// Tolerance when checking stored (9-decimal) scores against recomputed ones.
const SCORE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DfTable {
    counts: BTreeMap<String, u64>,
    n_records: u64,
}

impl DfTable {
    pub fn from_counts(counts: BTreeMap<String, u64>, n_records: u64) -> Result<Self> {
        if n_records == 0 {
            return Err(Error::InvalidInput("n_records must be at least 1".into()));
        }
        if let Some((tag, df)) = counts.iter().find(|(_, &df)| df == 0 || df > n_records) {
            return Err(Error::InvalidInput(format!(
                "df({tag}) = {df} outside [1, {n_records}]"
            )));
        }
        Ok(Self { counts, n_records })
    }

    /// Adds one record's tags; each distinct tag counts once.
    pub fn add(&mut self, tags: &TagList) {
        let mut seen = HashSet::with_capacity(tags.len());
        for tag in tags.iter() {
            if seen.insert(tag) {
                *self.counts.entry(tag.to_owned()).or_insert(0) += 1;
            }
        }
        self.n_records += 1;
    }

    /// Sums counts and record totals.
    pub fn merge(&mut self, other: &DfTable) {
        for (tag, df) in &other.counts {
            *self.counts.entry(tag.clone()).or_insert(0) += df;
        }
        self.n_records += other.n_records;
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn get(&self, tag: &str) -> Option<u64> {
        self.counts.get(tag).copied()
    }

    pub fn n_records(&self) -> u64 {
        self.n_records
    }

    /// Size of the tag pool.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

pub fn accumulate_df<'a, I>(tag_lists: I) -> Result<DfTable>
where
    I: IntoIterator<Item = &'a TagList>,
{
    let mut table = DfTable::default();
    for tags in tag_lists {
        table.add(tags);
    }
    if table.n_records == 0 {
        return Err(Error::InvalidInput("no tag lists to accumulate".into()));
    }
    Ok(table)
}

/// Accumulates partial tables on up to `jobs` threads and merges them.
pub fn accumulate_df_parallel(tag_lists: &[TagList], jobs: usize) -> Result<DfTable> {
    if tag_lists.is_empty() {
        return Err(Error::InvalidInput("no tag lists to accumulate".into()));
    }
    let chunk = tag_lists.len().div_ceil(jobs.max(1));
    let partials: Vec<DfTable> = std::thread::scope(|scope| {
        let handles: Vec<_> = tag_lists
            .chunks(chunk)
            .map(|part| scope.spawn(move || accumulate_df(part)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("df worker panicked"))
            .collect::<Result<_>>()
    })?;
    let mut table = DfTable::default();
    for p in &partials {
        table.merge(p);
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

impl LogBase {
    fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
        }
    }
}

/// `df * ln((n + 1) / (df + 1))`.
pub fn tfidf_score(df: u64, n: u64) -> Result<f64> {
    tfidf_score_in(df, n, LogBase::Natural)
}

pub fn tfidf_score_in(df: u64, n: u64, base: LogBase) -> Result<f64> {
    if df == 0 || df > n {
        return Err(Error::InvalidInput(format!("df {df} outside [1, {n}]")));
    }
    Ok(df as f64 * base.log((n as f64 + 1.0) / (df as f64 + 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub tag: String,
    pub df: u64,
    pub score: f64,
}

/// Total order used for selection: score desc, df desc, tag asc.
pub fn rank_order(a: &VocabEntry, b: &VocabEntry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.df.cmp(&a.df))
        .then_with(|| a.tag.cmp(&b.tag))
}

pub fn select_top_k(table: &DfTable, k: usize) -> Result<Vocabulary> {
    select_top_k_in(table, k, LogBase::Natural)
}

pub fn select_top_k_in(table: &DfTable, k: usize, base: LogBase) -> Result<Vocabulary> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let n = table.n_records;
    let mut entries = table
        .counts
        .iter()
        .map(|(tag, &df)| {
            Ok(VocabEntry {
                tag: tag.clone(),
                df,
                score: tfidf_score_in(df, n, base)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(rank_order);
    entries.truncate(k);
    Vocabulary::from_sorted(entries, n)
}

/// The selected top-K tags with frozen indices.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
    index: HashMap<String, usize>,
    n_records: u64,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.n_records == other.n_records && self.entries == other.entries
    }
}

impl Vocabulary {
    /// Checks the ordering and uniqueness invariants and builds the index.
    pub fn from_sorted(entries: Vec<VocabEntry>, n_records: u64) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.tag.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate tag {:?} at index {i}", e.tag)));
            }
            if i > 0 && rank_order(&entries[i - 1], e) != Ordering::Less {
                return Err(Error::InvalidInput(format!(
                    "entry {i} ({:?}) is out of order",
                    e.tag
                )));
            }
        }
        Ok(Self {
            entries,
            index,
            n_records,
        })
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_records(&self) -> u64 {
        self.n_records
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn tag(&self, index: usize) -> Option<&str> {
        self.entries.get(index).map(|e| e.tag.as_str())
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.tag.as_str())
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# n_records={} k={}", self.n_records, self.k())?;
        writeln!(w, "index\ttag\tdf\tscore")?;
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(w, "{i}\t{}\t{}\t{:.9}", e.tag, e.df, e.score)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_tsv(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_tsv(BufReader::new(file), path)
    }

    /// Parses the TSV form. Scores are recomputed from `df` and `n_records`
    /// and must agree with the stored 9-decimal values, so a loaded
    /// vocabulary is exactly equal to the one that was saved.
    pub fn read_tsv<R: BufRead>(reader: R, origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(origin, msg);
        let mut lines = reader.lines().enumerate();
        let mut next_line = || -> Result<Option<(usize, String)>> {
            match lines.next() {
                Some((i, Ok(l))) => Ok(Some((i + 1, l))),
                Some((_, Err(e))) => Err(Error::io(origin, e)),
                None => Ok(None),
            }
        };

        let (_, comment) = next_line()?.ok_or_else(|| bad("empty file".into()))?;
        let (n_records, k) = parse_comment(&comment)
            .ok_or_else(|| bad(format!("line 1: expected \"# n_records=<N> k=<K>\", got {comment:?}")))?;
        if n_records == 0 {
            return Err(bad("n_records must be at least 1".into()));
        }
        let (_, header) = next_line()?.ok_or_else(|| bad("missing header".into()))?;
        if header != "index\ttag\tdf\tscore" {
            return Err(bad(format!("line 2: unexpected header {header:?}")));
        }

        let mut entries: Vec<VocabEntry> = Vec::with_capacity(k);
        let mut seen: HashMap<String, usize> = HashMap::new();
        while let Some((line_no, line)) = next_line()? {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [index, tag, df, score] = fields[..] else {
                return Err(bad(format!("line {line_no}: expected 4 tab-separated fields")));
            };
            let index: usize = index
                .parse()
                .map_err(|_| bad(format!("line {line_no}: bad index {index:?}")))?;
            if index != entries.len() {
                return Err(bad(format!(
                    "line {line_no}: index {index} where {} was expected",
                    entries.len()
                )));
            }
            if !is_valid_tag(tag) {
                return Err(bad(format!("line {line_no}: invalid tag {tag:?}")));
            }
            if let Some(first) = seen.insert(tag.to_owned(), line_no) {
                return Err(bad(format!(
                    "line {line_no}: duplicate tag {tag:?} (first on line {first})"
                )));
            }
            let df: u64 = df
                .parse()
                .map_err(|_| bad(format!("line {line_no}: bad df {df:?}")))?;
            let stored: f64 = score
                .parse()
                .map_err(|_| bad(format!("line {line_no}: bad score {score:?}")))?;
            let exact = tfidf_score(df, n_records)
                .map_err(|e| bad(format!("line {line_no}: {e}")))?;
            if (exact - stored).abs() > SCORE_TOLERANCE {
                return Err(bad(format!(
                    "line {line_no}: score {stored} does not match df={df}, n_records={n_records} ({exact:.9})"
                )));
            }
            let entry = VocabEntry {
                tag: tag.to_owned(),
                df,
                score: exact,
            };
            if let Some(prev) = entries.last() {
                if rank_order(prev, &entry) != Ordering::Less {
                    return Err(bad(format!(
                        "line {line_no}: row {index} ({tag:?}) is out of order after {:?}",
                        prev.tag
                    )));
                }
            }
            entries.push(entry);
        }
        if entries.len() != k {
            return Err(bad(format!("header declares k={k} but {} rows follow", entries.len())));
        }
        Vocabulary::from_sorted(entries, n_records)
    }
}

fn parse_comment(line: &str) -> Option<(u64, usize)> {
    let rest = line.strip_prefix("# ")?;
    let mut n = None;
    let mut k = None;
    for part in rest.split_whitespace() {
        let (key, value) = part.split_once('=')?;
        match key {
            "n_records" => n = Some(value.parse().ok()?),
            "k" => k = Some(value.parse().ok()?),
            _ => return None,
        }
    }
    Some((n?, k?))
}
