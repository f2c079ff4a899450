#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use uts_core::gradcheck::{check_gradient, GradCheckConfig, GradCheckReport};
use uts_core::parser::TagList;
use uts_core::pipeline::{Pipeline, PipelineConfig, Stage};
use uts_core::uts::DfTable;
use uts_core::Matrix;

pub mod cases;
pub mod floors;

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Stages covered by the frozen fixture run, in order.
pub const FIXTURE_STAGES: [Stage; 6] = [
    Stage::Ingest,
    Stage::Parse,
    Stage::BuildUts,
    Stage::Label,
    Stage::Stats,
    Stage::Losses,
];

/// Stage outputs compared byte for byte. Manifests are left out because
/// they carry wall-clock times and absolute paths.
pub const GOLDEN_FILES: [&str; 12] = [
    "records.jsonl",
    "load_report.jsonl",
    "tags.jsonl",
    "parse_failures.jsonl",
    "parse_warnings.jsonl",
    "vocabulary.tsv",
    "labels.jsonl",
    "filter_report.jsonl",
    "frequency.csv",
    "frequency_loglog.csv",
    "stats_summary.json",
    "losses.json",
];

pub fn fixture_config(workdir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(data_dir().join("pipeline.toml")).expect("fixture config loads");
    cfg.workdir = workdir.to_path_buf();
    cfg
}

pub fn run_fixture_pipeline(workdir: &Path) {
    let pipeline = Pipeline::new(fixture_config(workdir)).expect("pipeline");
    for stage in FIXTURE_STAGES {
        pipeline
            .run(stage)
            .unwrap_or_else(|e| panic!("stage {} failed: {e}", stage.name()));
    }
}

pub fn random_table<R: Rng>(rng: &mut R, max_pool: usize, max_n: u64) -> DfTable {
    let n = rng.gen_range(1..=max_n);
    let pool = rng.gen_range(1..=max_pool);
    let mut counts = BTreeMap::new();
    while counts.len() < pool {
        let len = rng.gen_range(1..=3);
        let tag: String = (0..len).map(|_| rng.gen_range(b'a'..=b'e') as char).collect();
        // Small df values repeat often, which exercises the tie-breaks.
        let df = if rng.gen_bool(0.5) {
            rng.gen_range(1..=n.min(4))
        } else {
            rng.gen_range(1..=n)
        };
        counts.insert(tag, df);
    }
    DfTable::from_counts(counts, n).expect("valid table")
}

/// Top-k by exhaustive comparison sort of directly evaluated scores.
pub fn oracle_top_k(table: &DfTable, k: usize) -> Vec<(String, u64, f64)> {
    let n = table.n_records() as f64;
    let mut rows: Vec<(String, u64, f64)> = table
        .counts()
        .iter()
        .map(|(t, &df)| (t.clone(), df, df as f64 * ((n + 1.0) / (df as f64 + 1.0)).ln()))
        .collect();
    // Selection sort, so nothing is shared with the library's ordering code.
    for i in 0..rows.len() {
        let mut best = i;
        for j in i + 1..rows.len() {
            let (a, b) = (&rows[j], &rows[best]);
            let better = a.2 > b.2 || (a.2 == b.2 && (a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)));
            if better {
                best = j;
            }
        }
        rows.swap(i, best);
    }
    rows.truncate(k);
    rows
}

pub fn random_tag_lists<R: Rng>(rng: &mut R, records: usize, alphabet: &[&str]) -> Vec<TagList> {
    (0..records)
        .map(|_| {
            let n = rng.gen_range(1..=alphabet.len().min(6));
            let tags: Vec<String> = alphabet.choose_multiple(rng, n).map(|s| s.to_string()).collect();
            TagList::new(tags).expect("valid tags")
        })
        .collect()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

pub fn binary_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Runs a check and turns a failure into a readable message.
pub fn gradcheck<F>(what: &str, f: F, x: &[f64], analytic: &[f64]) -> Result<GradCheckReport, String>
where
    F: FnMut(&[f64]) -> f64,
{
    let cfg = GradCheckConfig::default();
    let report = check_gradient(f, x, analytic, &cfg);
    if report.passed(&cfg) {
        Ok(report)
    } else {
        Err(format!(
            "{what}: rel error {:.3e} at coordinate {:?} (analytic {:.6e}, numeric {:.6e})",
            report.max_rel_error, report.worst, report.analytic_at_worst, report.numeric_at_worst
        ))
    }
}
