//! Stage drivers. Every stage reads its inputs from files and writes its
//! outputs to the run directory, each artifact starting with a header line
//! that carries the fingerprint of the configuration that produced it.
//! Fingerprints chain: a stage refuses inputs whose header does not match
//! the fingerprint the current config gives the upstream stage.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{file_digest, fingerprint, PipelineConfig};
use crate::density::embed::embedding_registry;
use crate::density::engine::engine_registry;
use crate::density::{compute_densities, ingest_embeddings, vectors, DensityError, IngestError};
use crate::lexicon::{count_causal_tokens, CausalLexicon};
use crate::model::{
    read_samples, read_trajectories, write_records, write_samples, RecordBatch, RecordHeader,
};
use crate::retention::{
    select, verify_properties, PropertySummary, RetentionConfig, ScoreInput, SelectionReport,
};
use crate::serializer::{pack_corpus, FileSink, PackError, PackStats};
use crate::synthesis::client::expert_registry;
use crate::synthesis::templates::PromptTemplates;
use crate::synthesis::{synthesize_corpus, ExpertClients, StepFailure};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Validation(String),
    #[error("external service: {0}")]
    External(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Validation(_) => 1,
            PipelineError::External(_) => 2,
            PipelineError::Invariant(_) => 3,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Validation(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Validation(format!("{}: {e}", path.display()))
}

pub const LOCK_FILE: &str = ".cider.lock";

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(run_dir).map_err(io_at(run_dir))?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Validation(format!(
                    "run directory {} is in use (remove {} if no other run is active)",
                    run_dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(io_at(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes through a sibling temp file so readers never see a partial file.
fn write_file(
    path: &Path,
    fill: impl FnOnce(&mut Vec<u8>) -> io::Result<()>,
) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    fill(&mut buf).map_err(io_at(path))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(io_at(&tmp))?;
    fs::rename(&tmp, path).map_err(io_at(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertIdentity {
    pub function: String,
    pub model: String,
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub fingerprint: String,
    pub trajectories: usize,
    pub rejected_lines: Vec<String>,
    pub samples: usize,
    pub failures: usize,
    pub hard_failures: usize,
    pub experts: Vec<ExpertIdentity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectSummary {
    pub fingerprint: String,
    #[serde(flatten)]
    pub report: SelectionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackSummary {
    pub fingerprint: String,
    pub delimiter: String,
    pub files: Vec<String>,
    /// Counts are characters and whitespace-separated tokens, not
    /// model-tokenizer tokens.
    #[serde(flatten)]
    pub stats: PackStats,
}

/// The consolidated report; each stage fills its own section and clears
/// the sections downstream of it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub synth: Option<SynthSummary>,
    pub select: Option<SelectSummary>,
    pub pack: Option<PackSummary>,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        match fs::read_to_string(path) {
            Ok(text) => {
                serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(RunReport::default()),
            Err(e) => Err(io_at(path)(e)),
        }
    }

    fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_file(path, |buf| {
            serde_json::to_writer_pretty(&mut *buf, self)?;
            buf.push(b'\n');
            Ok(())
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        match &self.synth {
            Some(s) => {
                out += &format!(
                    "synth   {} trajectories, {} samples, {} failed steps ({} hard), {} rejected lines\n",
                    s.trajectories,
                    s.samples,
                    s.failures,
                    s.hard_failures,
                    s.rejected_lines.len()
                );
            }
            None => out += "synth   not run\n",
        }
        match &self.select {
            Some(s) => {
                let r = &s.report;
                out += &format!(
                    "select  alpha={} lambda={} gamma={} k={} (used {}) seed={}\n",
                    r.config.alpha,
                    r.config.lambda,
                    r.config.gamma,
                    r.config.k,
                    r.k_used,
                    r.config.seed
                );
                out += &format!(
                    "        retained {} of {} (expected {:.2} +/- {:.2}{})\n",
                    r.realized_size,
                    r.corpus_size,
                    r.expected_size,
                    r.size_stddev,
                    if r.size_within_band {
                        ""
                    } else {
                        ", outside band"
                    }
                );
                out += &format!(
                    "        causal preservation {:.4} (expected >= {:.4}){}\n",
                    r.preservation_ratio,
                    r.preservation_lower_bound,
                    if r.preservation_degenerate {
                        ", corpus has no causal mass"
                    } else {
                        ""
                    }
                );
                out += &format!("        encoder {}, engine {}\n", r.encoder, r.engine);
                out += &render_properties(&r.properties);
            }
            None => out += "select  not run\n",
        }
        match &self.pack {
            Some(p) => {
                out += &format!(
                    "pack    {} documents, {} chars, {} whitespace tokens, {} file(s)\n",
                    p.stats.documents,
                    p.stats.total_chars,
                    p.stats.total_tokens,
                    p.files.len()
                );
            }
            None => out += "pack    not run\n",
        }
        out
    }
}

pub fn render_properties(summary: &PropertySummary) -> String {
    let mut out = String::new();
    for c in &summary.checks {
        let status = serde_json::to_value(c.status)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        out += &format!("        {:<20} {:<10} {}", c.name, status, c.detail);
        if let Some(e) = c.max_derivative_error {
            out += &format!(" (max derivative error {e:.2e})");
        }
        out.push('\n');
    }
    out
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}

fn templates(cfg: &PipelineConfig) -> Result<PromptTemplates, PipelineError> {
    match &cfg.templates {
        Some(dir) => PromptTemplates::load_dir(dir).map_err(invalid),
        None => Ok(PromptTemplates::builtin()),
    }
}

fn lexicon(cfg: &PipelineConfig) -> Result<CausalLexicon, PipelineError> {
    match &cfg.lexicon {
        Some(path) => CausalLexicon::load(path).map_err(invalid),
        None => Ok(CausalLexicon::builtin()),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config values serialize")
}

pub fn synth_fingerprint(cfg: &PipelineConfig) -> Result<String, PipelineError> {
    let trajectories =
        file_digest(&cfg.paths.trajectories).map_err(io_at(&cfg.paths.trajectories))?;
    let t = templates(cfg)?;
    let texts = json!([
        t.planning.text(),
        t.grounding.text(),
        t.state_description.text(),
        t.causal_analysis.text()
    ]);
    let mut fixtures = Vec::new();
    for (_, s) in cfg.experts.resolved() {
        if let Some(p) = &s.fixtures {
            fixtures.push(file_digest(p).map_err(io_at(p))?);
        }
    }
    Ok(fingerprint(
        "synth",
        &[
            &json!(trajectories),
            &texts,
            &to_value(&cfg.experts),
            &json!(fixtures),
            &json!(cfg.synthesis.retries),
        ],
    ))
}

pub fn select_fingerprint(cfg: &PipelineConfig, synth: &str) -> Result<String, PipelineError> {
    let phrases: Vec<String> = lexicon(cfg)?
        .phrases()
        .iter()
        .map(|p| p.text.clone())
        .collect();
    let vectors = match (&cfg.embedding.backend[..], &cfg.embedding.path) {
        ("vector-file", Some(p)) => json!(file_digest(p).map_err(io_at(p))?),
        _ => Value::Null,
    };
    Ok(fingerprint(
        "select",
        &[
            &json!(synth),
            &to_value(&cfg.retention),
            &json!(phrases),
            &to_value(&cfg.embedding),
            &vectors,
        ],
    ))
}

pub fn pack_fingerprint(cfg: &PipelineConfig, select: &str) -> String {
    fingerprint("pack", &[&json!(select), &to_value(&cfg.pack)])
}

fn check_header(
    what: &str,
    path: &Path,
    header: Option<&RecordHeader>,
    stage: &str,
    expected: &str,
) -> Result<(), PipelineError> {
    match header {
        Some(h) if h.stage == stage && h.fingerprint == expected => Ok(()),
        Some(h) => Err(PipelineError::Validation(format!(
            "{what} {} carries {} fingerprint {}, but the current inputs give {stage} fingerprint {expected}; rerun {stage}",
            path.display(),
            h.stage,
            h.fingerprint
        ))),
        None => Err(PipelineError::Validation(format!("{what} {} has no fingerprint header", path.display()))),
    }
}

fn read_sample_file(
    path: &Path,
    what: &str,
) -> Result<RecordBatch<crate::model::SynthesizedSample>, PipelineError> {
    let file = File::open(path).map_err(|e| invalid(format!("{what} {}: {e}", path.display())))?;
    let batch = read_samples(BufReader::new(file)).map_err(io_at(path))?;
    if let Some(first) = batch.errors.first() {
        return Err(PipelineError::Validation(format!(
            "{what} {} has {} bad record(s); first at {first}",
            path.display(),
            batch.errors.len()
        )));
    }
    Ok(batch)
}

fn update_report(
    cfg: &PipelineConfig,
    f: impl FnOnce(&mut RunReport),
) -> Result<(), PipelineError> {
    let path = cfg.output(&cfg.paths.report);
    let mut report = RunReport::load(&path)?;
    f(&mut report);
    report.save(&path)
}

fn synth_stage(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    if !cfg.paths.trajectories.is_file() {
        return Err(invalid(format!(
            "trajectories file {} not found",
            cfg.paths.trajectories.display()
        )));
    }
    let templates = templates(cfg)?;
    let registry = expert_registry();
    let mut built = Vec::new();
    let mut experts = Vec::new();
    for (function, settings) in cfg.experts.resolved() {
        let client: Arc<dyn crate::synthesis::client::ExpertClient> = Arc::from(
            registry
                .build(&settings.backend, settings)
                .map_err(|e| invalid(format!("{function}: {e}")))?,
        );
        let id = client.identity();
        experts.push(ExpertIdentity {
            function: function.into(),
            model: id.model,
            endpoint: id.endpoint,
        });
        built.push(client);
    }
    let clients = ExpertClients {
        planner: built[0].clone(),
        grounder: built[1].clone(),
        describer: built[2].clone(),
        analyst: built[3].clone(),
    };
    let file = File::open(&cfg.paths.trajectories).map_err(io_at(&cfg.paths.trajectories))?;
    let batch = read_trajectories(BufReader::new(file)).map_err(io_at(&cfg.paths.trajectories))?;
    for e in &batch.errors {
        warn!("{}: {e}", cfg.paths.trajectories.display());
    }
    let fp = synth_fingerprint(cfg)?;
    let out = synthesize_corpus(&batch.records, &clients, &templates, cfg.synthesis.retries);
    info!(
        "synthesized {} samples, {} failed steps",
        out.samples.len(),
        out.failures.len()
    );

    let header = RecordHeader::new("synth", fp.clone());
    let samples_path = cfg.output(&cfg.paths.samples);
    write_file(&samples_path, |buf| {
        write_samples(&out.samples, Some(&header), buf)
            .map(drop)
            .map_err(|e| e.source)
    })?;
    let failures_path = cfg.output(&cfg.paths.failures);
    write_file(&failures_path, |buf| {
        write_records::<StepFailure, _>(&out.failures, Some(&header), buf)
            .map(drop)
            .map_err(|e| e.source)
    })?;
    let hard = out.hard_failures();
    let summary = SynthSummary {
        fingerprint: fp,
        trajectories: batch.records.len(),
        rejected_lines: batch.errors.iter().map(|e| e.to_string()).collect(),
        samples: out.samples.len(),
        failures: out.failures.len(),
        hard_failures: hard,
        experts,
    };
    update_report(cfg, |r| {
        *r = RunReport {
            synth: Some(summary),
            ..Default::default()
        }
    })?;
    if hard > 0 {
        return Err(PipelineError::External(format!(
            "{hard} step(s) failed against the expert service; see {}",
            failures_path.display()
        )));
    }
    Ok(())
}

fn select_stage(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let samples_path = cfg.output(&cfg.paths.samples);
    let batch = read_sample_file(&samples_path, "samples file")?;
    let synth_fp = synth_fingerprint(cfg)?;
    check_header(
        "samples file",
        &samples_path,
        batch.header.as_ref(),
        "synth",
        &synth_fp,
    )?;
    let samples = batch.records;
    if samples.is_empty() {
        return Err(invalid(format!(
            "samples file {} holds no samples",
            samples_path.display()
        )));
    }
    let lexicon = lexicon(cfg)?;

    let source = embedding_registry()
        .build(&cfg.embedding.backend, &cfg.embedding)
        .map_err(invalid)?;
    let table = ingest_embeddings(source.as_ref(), &samples).map_err(|e| match e {
        IngestError::Missing(ids) => PipelineError::Validation(format!(
            "embeddings are missing for {} sample(s): {}",
            ids.len(),
            ids.join(", ")
        )),
        IngestError::Service(m) => PipelineError::External(m),
        other => invalid(other),
    })?;
    let select_fp = select_fingerprint(cfg, &synth_fp)?;
    let header = RecordHeader::new("select", select_fp.clone());
    if cfg.embedding.backend != "vector-file" {
        let path = cfg.output(&cfg.paths.embeddings);
        write_file(&path, |buf| {
            writeln!(buf, "{}", header.to_line())?;
            vectors::write_text(&table, &mut *buf).map_err(|e| io::Error::other(e.to_string()))
        })?;
    }

    let engine = engine_registry()
        .build(&cfg.engine.backend, &cfg.engine)
        .map_err(invalid)?;
    let densities =
        compute_densities(&table, cfg.retention.k, engine.as_ref()).map_err(|e| match e {
            DensityError::DegenerateGeometry(i) => invalid(format!(
                "all embeddings coincide (first at {}); density is undefined",
                samples[i].id
            )),
            other => invalid(other),
        })?;
    let inputs: Vec<ScoreInput> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| ScoreInput {
            sample_id: s.id.clone(),
            keyword_count: count_causal_tokens(s, &lexicon) as u64,
            raw_ratio: densities.raw_ratios[i],
            density: densities.densities[i],
        })
        .collect();
    let scored = select(&inputs, &cfg.retention);
    check_scores(&scored, &cfg.retention)?;

    let properties = verify_properties(&cfg.retention);
    let report = SelectionReport::build(
        &cfg.retention,
        densities.k,
        &scored,
        properties,
        source.identity(),
        engine.name().to_string(),
        timestamp(),
    );
    write_file(&cfg.output(&cfg.paths.scores), |buf| {
        write_records(&scored, Some(&header), buf)
            .map(drop)
            .map_err(|e| e.source)
    })?;
    let retained: Vec<_> = samples
        .into_iter()
        .zip(&scored)
        .filter(|(_, s)| s.retained)
        .map(|(x, _)| x)
        .collect();
    write_file(&cfg.output(&cfg.paths.retained), |buf| {
        write_samples(&retained, Some(&header), buf)
            .map(drop)
            .map_err(|e| e.source)
    })?;
    info!("retained {} of {}", retained.len(), scored.len());
    let failed: Vec<String> = report
        .properties
        .checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name.clone())
        .collect();
    update_report(cfg, |r| {
        r.select = Some(SelectSummary {
            fingerprint: select_fp,
            report,
        });
        r.pack = None;
    })?;
    if !failed.is_empty() {
        return Err(PipelineError::Invariant(format!(
            "property checks failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

fn check_scores(
    scored: &[crate::retention::ScoredSample],
    cfg: &RetentionConfig,
) -> Result<(), PipelineError> {
    for s in scored {
        let base = 1.0 / (1.0 + cfg.alpha * s.density);
        let ok = (0.0..=1.0).contains(&s.density)
            && base <= s.retention_prob
            && s.retention_prob <= 1.0
            && cfg.lambda * s.saliency <= s.retention_prob
            && s.retained == (s.xi <= s.retention_prob);
        if !ok {
            return Err(PipelineError::Invariant(format!(
                "scores for {} break the retention bounds: {s:?}",
                s.sample_id
            )));
        }
    }
    Ok(())
}

fn pack_stage(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let retained_path = cfg.output(&cfg.paths.retained);
    let batch = read_sample_file(&retained_path, "retained corpus")?;
    let select_fp = select_fingerprint(cfg, &synth_fingerprint(cfg)?)?;
    check_header(
        "retained corpus",
        &retained_path,
        batch.header.as_ref(),
        "select",
        &select_fp,
    )?;
    let fp = pack_fingerprint(cfg, &select_fp);
    let header = RecordHeader::new("pack", fp.clone());
    let corpus = cfg.output(&cfg.paths.corpus);
    let manifest = cfg.output(&cfg.paths.manifest);
    let mut sink = FileSink::create(&corpus, &manifest, cfg.pack.shard_bytes, Some(&header))
        .map_err(io_at(&manifest))?;
    let packed =
        pack_corpus(&batch.records, &cfg.pack.delimiter, &mut sink).map_err(|e| match e {
            PackError::Empty => invalid(format!(
                "nothing to pack: {} is empty",
                retained_path.display()
            )),
            other => invalid(other),
        })?;
    let files = sink
        .paths()
        .iter()
        .map(|p| {
            p.file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
        })
        .collect();
    info!("packed {} documents", packed.stats.documents);
    update_report(cfg, |r| {
        r.pack = Some(PackSummary {
            fingerprint: fp,
            delimiter: cfg.pack.delimiter.clone(),
            files,
            stats: packed.stats,
        })
    })
}

fn in_pool<T>(cfg: &PipelineConfig, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError>
where
    T: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(invalid)?;
    Ok(pool.install(f))
}

type Stage = fn(&PipelineConfig) -> Result<(), PipelineError>;

fn run_stages(cfg: &PipelineConfig, stages: &[Stage]) -> Result<(), PipelineError> {
    cfg.validate().map_err(invalid)?;
    let _lock = RunLock::acquire(&cfg.paths.run_dir)?;
    in_pool(cfg, || stages.iter().try_for_each(|stage| stage(cfg)))?
}

/// Stage one: trajectories to samples plus a failure ledger.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    run_stages(cfg, &[synth_stage])
}

/// Stage two: scores, retained subset and selection report.
pub fn cmd_select(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    run_stages(cfg, &[select_stage])
}

/// Stage three: packed corpus and manifest.
pub fn cmd_pack(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    run_stages(cfg, &[pack_stage])
}

/// All three stages in order; the first failure stops the run.
pub fn cmd_run(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    run_stages(cfg, &[synth_stage, select_stage, pack_stage])
}

pub fn cmd_report(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let path = cfg.output(&cfg.paths.report);
    if !path.is_file() {
        return Err(invalid(format!("no report at {}", path.display())));
    }
    RunReport::load(&path)
}

/// Standalone property checks; an invariant error if any check fails.
pub fn cmd_verify(retention: &RetentionConfig) -> Result<PropertySummary, PipelineError> {
    retention.validate().map_err(invalid)?;
    let summary = verify_properties(retention);
    if summary.all_passed() {
        Ok(summary)
    } else {
        Err(PipelineError::Invariant(render_properties(&summary)))
    }
}
