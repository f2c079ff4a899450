//! Stage orchestration, configuration and run manifests.
//!
//! Every stage reads its inputs from the work directory (or the configured
//! corpus), writes its outputs there, and records a manifest under
//! `manifests/<stage>.json`. Stages never call each other: a missing upstream
//! file is reported as [`Error::MissingArtifact`].

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{extract_summary, read_corpus, CaptionRecord};
use crate::error::{Error, Result};
use crate::labeler::{build_dataset, LabelRow};
use crate::objectives::{
    bce_multilabel, infonce_symmetric, mixed_caption_loss, mtl_combine, nll_sequence, EmbeddingBatch, LossResult,
    SequenceLogits, DEFAULT_AR_FRACTION, DEFAULT_TAU,
};
use crate::parser::{parse_batch, ParserConfig, TagList};
use crate::stats::frequency_report;
use crate::tensor::Matrix;
use crate::toy::{
    contrastive_floor, evaluate_loss, evaluate_map, par_entropy_floor, planted_contrastive, planted_mtc, planted_mtl,
    planted_par, train_toy, Objective, PlantedConfig, PoolKind, ToyModelParams, TrainConfig,
};
use crate::uts::{accumulate_df_parallel, select_top_k, Vocabulary};
use crate::VERSION;

pub const RECORDS: &str = "records.jsonl";
pub const LOAD_REPORT: &str = "load_report.jsonl";
pub const TAGS: &str = "tags.jsonl";
pub const PARSE_FAILURES: &str = "parse_failures.jsonl";
pub const PARSE_WARNINGS: &str = "parse_warnings.jsonl";
pub const VOCABULARY: &str = "vocabulary.tsv";
pub const LABELS: &str = "labels.jsonl";
pub const FILTER_REPORT: &str = "filter_report.jsonl";
pub const FREQUENCY: &str = "frequency.csv";
pub const FREQUENCY_LOGLOG: &str = "frequency_loglog.csv";
pub const STATS_SUMMARY: &str = "stats_summary.json";
pub const LOSSES: &str = "losses.json";
pub const TRACE: &str = "trace.csv";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const TOY_METRICS: &str = "toy_metrics.json";
pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Parse,
    BuildUts,
    Label,
    Stats,
    Losses,
    TrainToy,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Parse,
        Stage::BuildUts,
        Stage::Label,
        Stage::Stats,
        Stage::Losses,
        Stage::TrainToy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Parse => "parse",
            Stage::BuildUts => "build-uts",
            Stage::Label => "label",
            Stage::Stats => "stats",
            Stage::Losses => "losses",
            Stage::TrainToy => "train-toy",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub objective: Objective,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub hidden: usize,
    pub pool: PoolKind,
    /// Share of generated clips held out for evaluation.
    pub holdout: f64,
    pub data: PlantedConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Mtc,
            steps: 2000,
            batch: 32,
            learning_rate: 0.5,
            tau: 0.1,
            hidden: 32,
            pool: PoolKind::Mean,
            holdout: 0.2,
            data: PlantedConfig {
                clips: 2500,
                ..PlantedConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossesConfig {
    /// JSON bundle of loss cases to evaluate.
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub workdir: PathBuf,
    pub corpus: Option<PathBuf>,
    /// Labels against this vocabulary instead of the one built in `workdir`.
    pub vocabulary: Option<PathBuf>,
    pub k: usize,
    pub seed: u64,
    /// Worker threads for every stage; also bounds in-flight parser requests.
    pub jobs: usize,
    pub parser: ParserConfig,
    pub losses: LossesConfig,
    pub toy: ToyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("uts-work"),
            corpus: None,
            vocabulary: None,
            k: 1000,
            seed: 0,
            jobs: 8,
            parser: ParserConfig::default(),
            losses: LossesConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Reads a TOML file. Relative paths inside it are taken relative to the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        rebase(base, &mut cfg.workdir);
        let optional = [
            &mut cfg.corpus,
            &mut cfg.vocabulary,
            &mut cfg.parser.fixture_path,
            &mut cfg.parser.prompt_path,
            &mut cfg.losses.input,
        ];
        for p in optional.into_iter().flatten() {
            rebase(base, p);
        }
        Ok(cfg)
    }

    /// Applies `UTS_*` overrides. Unrecognized names are ignored.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}={v:?} is not a valid number")))
        }
        for (key, v) in vars {
            match key.as_str() {
                "UTS_WORKDIR" => self.workdir = v.into(),
                "UTS_CORPUS" => self.corpus = Some(v.into()),
                "UTS_VOCABULARY" => self.vocabulary = Some(v.into()),
                "UTS_K" => self.k = num(&key, &v)?,
                "UTS_SEED" => self.seed = num(&key, &v)?,
                "UTS_JOBS" => self.jobs = num(&key, &v)?,
                "UTS_PARSER_ENDPOINT_URL" => self.parser.endpoint_url = v,
                "UTS_PARSER_MODEL_NAME" => self.parser.model_name = v,
                "UTS_PARSER_TEMPERATURE" => self.parser.temperature = num(&key, &v)?,
                "UTS_PARSER_TOP_P" => self.parser.top_p = num(&key, &v)?,
                "UTS_PARSER_MAX_RETRIES" => self.parser.max_retries = num(&key, &v)?,
                "UTS_PARSER_FIXTURE_PATH" => self.parser.fixture_path = Some(v.into()),
                "UTS_PARSER_PROMPT_PATH" => self.parser.prompt_path = Some(v.into()),
                "UTS_PARSER_TIMEOUT_SECS" => self.parser.timeout_secs = num(&key, &v)?,
                "UTS_LOSSES_INPUT" => self.losses.input = Some(v.into()),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        let t = &self.toy;
        if !(t.holdout > 0.0 && t.holdout < 1.0) {
            return Err(Error::Config(format!("toy.holdout {} outside (0, 1)", t.holdout)));
        }
        if t.hidden == 0 {
            return Err(Error::Config("toy.hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Derives a stage-specific seed from the run seed.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{name}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the work directory when the file lives inside it.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub stage_seed: u64,
    /// False only when outputs depend on a live endpoint.
    pub deterministic: bool,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_ms: u64,
    #[serde(default)]
    pub notes: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let hex = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    Ok((bytes.len() as u64, hex))
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), (serde_json::to_string_pretty(self)? + "\n").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if Stage::from_name(&self.stage).is_none() {
            return Err(Error::InvalidInput(format!("unknown stage {:?}", self.stage)));
        }
        if self.version.is_empty() {
            return Err(Error::InvalidInput("empty version".into()));
        }
        if self.outputs.is_empty() {
            return Err(Error::InvalidInput("manifest lists no outputs".into()));
        }
        for d in self.inputs.iter().chain(&self.outputs) {
            let hex_ok = d.sha256.len() == 64 && d.sha256.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
            if d.path.is_empty() || !hex_ok {
                return Err(Error::InvalidInput(format!("bad file digest for {:?}", d.path)));
            }
        }
        Ok(())
    }

    /// Re-hashes every output and reports the first mismatch.
    pub fn verify(&self, workdir: &Path) -> Result<()> {
        for d in &self.outputs {
            let path = workdir.join(&d.path);
            let (bytes, sha) = sha256_file(&path)?;
            if bytes != d.bytes || sha != d.sha256 {
                return Err(Error::InvalidInput(format!("{} changed since the {} run", d.path, self.stage)));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    write_bytes(path, &buf)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, &row)?;
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

// ---------------------------------------------------------------------------
// Stage rows
// ---------------------------------------------------------------------------

/// Row of the ingested record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedRecord {
    pub id: String,
    pub caption: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<TagList>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRow {
    pub id: String,
    pub tags: TagList,
}

// ---------------------------------------------------------------------------
// Loss bundles
// ---------------------------------------------------------------------------

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_ar_fraction() -> f64 {
    DEFAULT_AR_FRACTION
}

/// One loss evaluation request. Matrices are row lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossCase {
    Bce {
        logits: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
    },
    Infonce {
        audio: Vec<Vec<f64>>,
        text: Vec<Vec<f64>>,
        #[serde(default = "default_tau")]
        tau: f64,
    },
    Nll {
        logits: Vec<Vec<f64>>,
        targets: Vec<usize>,
    },
    MixedCaption {
        ar_losses: Vec<f64>,
        par_losses: Vec<f64>,
        #[serde(default = "default_ar_fraction")]
        ar_fraction: f64,
    },
    Mtl {
        mtc: Box<LossCase>,
        gen: Box<LossCase>,
        lambda: f64,
    },
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<Matrix> {
    if rows.is_empty() {
        return Err(Error::Shape("matrix has no rows".into()));
    }
    Matrix::from_rows(rows)
}

impl LossCase {
    pub fn name(&self) -> &'static str {
        match self {
            LossCase::Bce { .. } => "bce",
            LossCase::Infonce { .. } => "infonce",
            LossCase::Nll { .. } => "nll",
            LossCase::MixedCaption { .. } => "mixed_caption",
            LossCase::Mtl { .. } => "mtl",
        }
    }

    pub fn evaluate(&self) -> Result<LossResult> {
        match self {
            LossCase::Bce { logits, targets } => bce_multilabel(&rows_to_matrix(logits)?, &rows_to_matrix(targets)?),
            LossCase::Infonce { audio, text, tau } => infonce_symmetric(
                &EmbeddingBatch::new(rows_to_matrix(audio)?)?,
                &EmbeddingBatch::new(rows_to_matrix(text)?)?,
                *tau,
            ),
            LossCase::Nll { logits, targets } => {
                nll_sequence(&SequenceLogits::new(rows_to_matrix(logits)?, targets.clone())?)
            }
            LossCase::MixedCaption {
                ar_losses,
                par_losses,
                ar_fraction,
            } => Ok(LossResult::new(mixed_caption_loss(ar_losses, par_losses, *ar_fraction)?)),
            LossCase::Mtl { mtc, gen, lambda } => mtl_combine(
                &prefixed(mtc.evaluate()?, "mtc"),
                &prefixed(gen.evaluate()?, "gen"),
                *lambda,
            ),
        }
    }
}

/// The two halves of a bundled multi-task case have separate inputs, so
/// their gradient keys are kept apart.
fn prefixed(r: LossResult, prefix: &str) -> LossResult {
    LossResult {
        loss: r.loss,
        grads: r.grads.into_iter().map(|(k, g)| (format!("{prefix}/{k}"), g)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub objective: String,
    pub loss: f64,
    pub grads: BTreeMap<String, Vec<Vec<f64>>>,
}

pub fn evaluate_bundle(cases: &[LossCase]) -> Result<Vec<LossOutput>> {
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let r = case
                .evaluate()
                .map_err(|e| Error::InvalidInput(format!("case {i} ({}): {e}", case.name())))?;
            Ok(LossOutput {
                objective: case.name().into(),
                loss: r.loss,
                grads: r.grads.iter().map(|(k, m)| (k.clone(), m.to_rows())).collect(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMetrics {
    pub objective: Objective,
    pub steps: usize,
    pub train_clips: usize,
    pub eval_clips: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_floor: Option<f64>,
}

struct StageRun {
    stage: Stage,
    start: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    notes: Vec<String>,
    deterministic: bool,
}

pub struct Pipeline {
    config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn workdir(&self) -> &Path {
        &self.config.workdir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.workdir.join(name)
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.config.workdir.join(MANIFEST_DIR).join(format!("{}.json", stage.name()))
    }

    pub fn run(&self, stage: Stage) -> Result<RunManifest> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Parse => self.parse(),
            Stage::BuildUts => self.build_uts(),
            Stage::Label => self.label(),
            Stage::Stats => self.stats(),
            Stage::Losses => self.losses(),
            Stage::TrainToy => self.train_toy(),
        }
    }

    fn begin(&self, stage: Stage) -> StageRun {
        StageRun {
            stage,
            start: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
            deterministic: true,
        }
    }

    /// Path of an upstream artifact, or the stage-ordering error.
    fn upstream(&self, name: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                stage: producer.name(),
                path: p,
            })
        }
    }

    fn digest(&self, path: &Path) -> Result<FileDigest> {
        let (bytes, sha256) = sha256_file(path)?;
        let shown = path.strip_prefix(&self.config.workdir).unwrap_or(path);
        Ok(FileDigest {
            path: shown.to_string_lossy().replace('\\', "/"),
            bytes,
            sha256,
        })
    }

    fn finish(&self, run: StageRun) -> Result<RunManifest> {
        let manifest = RunManifest {
            stage: run.stage.name().into(),
            version: VERSION.into(),
            seed: self.config.seed,
            stage_seed: sub_seed(self.config.seed, run.stage.name()),
            deterministic: run.deterministic,
            inputs: run.inputs.iter().map(|p| self.digest(p)).collect::<Result<_>>()?,
            outputs: run.outputs.iter().map(|p| self.digest(p)).collect::<Result<_>>()?,
            wall_time_ms: run.start.elapsed().as_millis() as u64,
            notes: run.notes,
        };
        manifest.save(self.manifest_path(run.stage))?;
        Ok(manifest)
    }

    pub fn ingest(&self) -> Result<RunManifest> {
        let mut run = self.begin(Stage::Ingest);
        let corpus = self
            .config
            .corpus
            .clone()
            .ok_or_else(|| Error::Config("no corpus configured".into()))?;
        let (records, report) = read_corpus(&corpus)?;
        let rows = records.into_iter().map(|r| IngestedRecord {
            summary: extract_summary(&r.caption).to_owned(),
            id: r.id,
            caption: r.caption,
            tags: r.tags,
            duration_seconds: r.duration_seconds,
        });
        let (out, rep) = (self.path(RECORDS), self.path(LOAD_REPORT));
        write_jsonl(&out, rows)?;
        write_jsonl(&rep, &report)?;
        if !report.is_empty() {
            run.notes.push(format!("{} malformed lines skipped", report.len()));
        }
        run.inputs.push(corpus);
        run.outputs.extend([out, rep]);
        self.finish(run)
    }

    pub fn parse(&self) -> Result<RunManifest> {
        let mut run = self.begin(Stage::Parse);
        let input = self.upstream(RECORDS, Stage::Ingest)?;
        let rows: Vec<IngestedRecord> = read_jsonl(&input)?;
        let records: Vec<CaptionRecord> = rows
            .into_iter()
            .map(|r| CaptionRecord {
                id: r.id,
                caption: r.caption,
                tags: r.tags,
                duration_seconds: r.duration_seconds,
            })
            .collect();
        let parser = ParserConfig {
            jobs: self.config.jobs,
            ..self.config.parser.clone()
        };
        let outcome = parse_batch(&records, &parser)?;

        let (tags, failures, warnings) = (self.path(TAGS), self.path(PARSE_FAILURES), self.path(PARSE_WARNINGS));
        write_jsonl(&tags, outcome.tagged.iter().map(|(id, tags)| TagRow { id: id.clone(), tags: tags.clone() }))?;
        write_jsonl(&failures, &outcome.failures)?;
        write_jsonl(&warnings, &outcome.warnings)?;
        run.notes.push(format!(
            "{} tagged, {} failed, {} warnings",
            outcome.tagged.len(),
            outcome.failures.len(),
            outcome.warnings.len()
        ));
        run.deterministic = parser.is_fixture();
        run.inputs.push(input);
        if let Some(p) = parser.fixture_path.as_ref().filter(|_| parser.is_fixture()) {
            run.inputs.push(p.clone());
        }
        if let Some(p) = &parser.prompt_path {
            run.inputs.push(p.clone());
        }
        run.outputs.extend([tags, failures, warnings]);
        self.finish(run)
    }

    fn read_tags(&self) -> Result<(PathBuf, Vec<TagRow>)> {
        let input = self.upstream(TAGS, Stage::Parse)?;
        let rows = read_jsonl(&input)?;
        Ok((input, rows))
    }

    pub fn build_uts(&self) -> Result<RunManifest> {
        let mut run = self.begin(Stage::BuildUts);
        let (input, rows) = self.read_tags()?;
        let lists: Vec<TagList> = rows.into_iter().map(|r| r.tags).collect();
        let table = accumulate_df_parallel(&lists, self.config.jobs)?;
        let vocab = select_top_k(&table, self.config.k)?;
        if vocab.k() < self.config.k {
            run.notes.push(format!(
                "tag pool has only {} tags; vocabulary is smaller than k = {}",
                vocab.k(),
                self.config.k
            ));
        }
        let out = self.path(VOCABULARY);
        vocab.save(&out)?;
        run.inputs.push(input);
        run.outputs.push(out);
        self.finish(run)
    }

    pub fn label(&self) -> Result<RunManifest> {
        let mut run = self.begin(Stage::Label);
        let vocab_path = match &self.config.vocabulary {
            Some(p) => p.clone(),
            None => self.upstream(VOCABULARY, Stage::BuildUts)?,
        };
        let (input, rows) = self.read_tags()?;
        let vocab = Vocabulary::load(&vocab_path)?;
        let pairs: Vec<(String, TagList)> = rows.into_iter().map(|r| (r.id, r.tags)).collect();
        let (examples, report) = build_dataset(&pairs, &vocab)?;
        let (labels, filtered) = (self.path(LABELS), self.path(FILTER_REPORT));
        write_jsonl(&labels, examples.iter().map(LabelRow::from))?;
        write_jsonl(&filtered, report.rows())?;
        run.notes.push(format!(
            "{} labeled, {} filtered as zero vectors, {} out-of-vocabulary tags",
            examples.len(),
            report.filtered.len(),
            report.oov_tags
        ));
        run.inputs.extend([input, vocab_path]);
        run.outputs.extend([labels, filtered]);
        self.finish(run)
    }

    pub fn stats(&self) -> Result<RunManifest> {
        let mut run = self.begin(Stage::Stats);
        let (input, rows) = self.read_tags()?;
        let lists: Vec<TagList> = rows.into_iter().map(|r| r.tags).collect();
        let counts: Vec<usize> = lists.iter().map(TagList::len).collect();
        let table = accumulate_df_parallel(&lists, self.config.jobs)?;
        let report = frequency_report(&table, &counts)?;
        let (csv, loglog, summary) = (self.path(FREQUENCY), self.path(FREQUENCY_LOGLOG), self.path(STATS_SUMMARY));
        write_with(&csv, |w| report.write_csv(w))?;
        write_with(&loglog, |w| report.write_loglog_csv(w))?;
        write_json(&summary, &report.summary)?;
        run.inputs.push(input);
        run.outputs.extend([csv, loglog, summary]);
        self.finish(run)
    }

    pub fn losses(&self) -> Result<RunManifest> {
        let mut run = self.begin(Stage::Losses);
        let input = self
            .config
            .losses
            .input
            .clone()
            .ok_or_else(|| Error::Config("no loss bundle configured (losses.input)".into()))?;
        let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
        let cases: Vec<LossCase> = serde_json::from_str(&text).map_err(|e| Error::format(&input, e.to_string()))?;
        let outputs = evaluate_bundle(&cases)?;
        let out = self.path(LOSSES);
        write_json(&out, &outputs)?;
        run.inputs.push(input);
        run.outputs.push(out);
        self.finish(run)
    }

    pub fn train_toy(&self) -> Result<RunManifest> {
        let mut run = self.begin(Stage::TrainToy);
        let t = &self.config.toy;
        let data_cfg = PlantedConfig {
            seed: sub_seed(self.config.seed, "train-toy/data"),
            ..t.data
        };
        let set = match t.objective {
            Objective::Mtc => planted_mtc(&data_cfg)?,
            Objective::Par => planted_par(&data_cfg)?,
            Objective::Contrastive => planted_contrastive(&data_cfg)?,
            Objective::Mtl { .. } => planted_mtl(&data_cfg)?,
        };
        let n_eval = ((set.clips.len() as f64 * t.holdout).round() as usize).clamp(1, set.clips.len() - 1);
        let (train, eval) = set
            .clips
            .split_at_checked(set.clips.len() - n_eval)
            .ok_or_else(|| Error::Config("toy dataset too small to hold out".into()))?;
        if train.is_empty() {
            return Err(Error::Config("toy dataset too small to hold out".into()));
        }
        let shape = set.model_shape(t.hidden, t.pool);
        let train_cfg = TrainConfig {
            steps: t.steps,
            batch: t.batch,
            learning_rate: t.learning_rate,
            seed: sub_seed(self.config.seed, "train-toy/train"),
            objective: t.objective,
            tau: t.tau,
        };
        let initial = ToyModelParams::init(shape, train_cfg.seed)?;
        let initial_loss = evaluate_loss(&initial, eval, &train_cfg)?;
        let (params, trace) = train_toy(train, shape, &train_cfg)?;
        let final_loss = evaluate_loss(&params, eval, &train_cfg)?;
        let map = match t.objective {
            Objective::Mtc | Objective::Mtl { .. } => Some(evaluate_map(&params, eval)?.map),
            _ => None,
        };
        let loss_floor = match t.objective {
            Objective::Par => Some(par_entropy_floor(data_cfg.seq_len, data_cfg.classes, data_cfg.label_noise)),
            Objective::Contrastive => Some(contrastive_floor(t.batch.min(eval.len()), data_cfg.classes, t.tau)?),
            _ => None,
        };
        let metrics = ToyMetrics {
            objective: t.objective,
            steps: t.steps,
            train_clips: train.len(),
            eval_clips: eval.len(),
            initial_loss,
            final_loss,
            map,
            loss_floor,
        };

        let (trace_path, ckpt, metrics_path) = (self.path(TRACE), self.path(CHECKPOINT), self.path(TOY_METRICS));
        write_with(&trace_path, |w| {
            let mut w = BufWriter::new(w);
            writeln!(w, "step,loss,batch_loss")?;
            for p in &trace {
                match p.batch_loss {
                    Some(b) => writeln!(w, "{},{},{}", p.step, p.loss, b)?,
                    None => writeln!(w, "{},{},", p.step, p.loss)?,
                }
            }
            w.flush()
        })?;
        params.save(&ckpt)?;
        write_json(&metrics_path, &metrics)?;
        run.outputs.extend([trace_path, ckpt, metrics_path]);
        self.finish(run)
    }
}
