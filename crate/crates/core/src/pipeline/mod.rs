//! End-to-end story runs, evaluation manifests and their on-disk artifacts.
//!
//! A run directory `out/<subject-slug>/<emotion>/<index>/` holds
//! `script.json`, `prompts.json`, `frames/<i>/{trace.json, step_###.pgm,
//! masks.json}` for the four frames and `metrics.json`, or only
//! `failed.json` when the run did not complete. A batch also writes
//! `out/summary.json`.

pub mod config;
mod metrics;
mod pgm;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::toy::{run_toy_story, DenoiseTrace, FramePrompt, ToyModelSpec};
use crate::attention::{AttentionError, RegionConfig, RegionMask};
use crate::emotion::EmotionCategory;
use crate::knowledge::{KnowledgeError, TreeLibrary};
use crate::llm::{BackendConfig, BackendKind};
use crate::planning::{
    beat_elements, plan_script, validate_prompts, write_prompts, EmotionalPrompts, NarrativeStructure, PlanOptions,
    PlanningError, StoryScript, ValidationReport,
};
use crate::seed::derive_seed;

pub use metrics::{mask_stability, report_proxy_metrics, subject_presence, ProxyMetricsReport};
pub use pgm::{decode_pgm, encode_pgm, export_masks, load_pgm, step_file_name, MaskIndexEntry, INDEX_FILE, MAXVAL};

pub const FRAMES_PER_STORY: usize = 4;
pub const DEFAULT_STORIES_PER_PAIR: usize = 3;
pub const DEFAULT_STEPS: usize = 20;

pub const SCRIPT_FILE: &str = "script.json";
pub const PROMPTS_FILE: &str = "prompts.json";
pub const TRACE_FILE: &str = "trace.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const FAILURE_FILE: &str = "failed.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("subject list is empty")]
    NoSubjects,
    #[error("subject `{0}` appears more than once (or shares its directory name with another)")]
    DuplicateSubject(String),
    #[error("stories_per_pair must be positive")]
    NoStories,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed mask file: {0}")]
    Pgm(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Planning(#[from] PlanningError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| PipelineError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::MissingArtifact(path.display().to_string()),
        _ => PipelineError::Io { path: path.to_path_buf(), source: e },
    })?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json { path: path.to_path_buf(), source })
}

/// Lowercase ASCII alphanumerics joined by single dashes.
pub fn slug(text: &str) -> String {
    let mut out = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.is_empty() && !out.ends_with('-') {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    if out.is_empty() {
        out.push_str("subject");
    }
    out
}

/// One line per subject; blank lines and `#` comments are skipped.
pub fn load_subjects(path: impl AsRef<Path>) -> Result<Vec<String>, PipelineError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub subject: String,
    pub emotion: EmotionCategory,
    pub story_index: usize,
    pub seed: u64,
}

impl ManifestRun {
    pub fn relative_dir(&self) -> PathBuf {
        run_dir_relative(&self.subject, self.emotion, self.story_index)
    }
}

fn run_dir_relative(subject: &str, emotion: EmotionCategory, index: usize) -> PathBuf {
    [slug(subject), emotion.label().to_string(), index.to_string()].iter().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationManifest {
    pub subjects: Vec<String>,
    pub emotions: Vec<EmotionCategory>,
    pub stories_per_pair: usize,
    pub master_seed: u64,
    /// Subject-major, then emotion, then story index.
    pub runs: Vec<ManifestRun>,
}

pub fn run_seed(subject: &str, emotion: EmotionCategory, index: usize, master_seed: u64) -> u64 {
    derive_seed([
        subject.as_bytes(),
        emotion.label().as_bytes(),
        &(index as u64).to_le_bytes(),
        &master_seed.to_le_bytes(),
    ])
}

pub fn generate_manifest(
    subjects: &[String],
    stories_per_pair: usize,
    master_seed: u64,
) -> Result<EvaluationManifest, PipelineError> {
    if subjects.is_empty() {
        return Err(PipelineError::NoSubjects);
    }
    if stories_per_pair == 0 {
        return Err(PipelineError::NoStories);
    }
    let mut seen = std::collections::HashSet::new();
    for s in subjects {
        if s.trim().is_empty() {
            return Err(PipelineError::Config("empty subject in list".into()));
        }
        if !seen.insert(slug(s)) {
            return Err(PipelineError::DuplicateSubject(s.clone()));
        }
    }
    let mut runs = Vec::with_capacity(subjects.len() * EmotionCategory::ALL.len() * stories_per_pair);
    for subject in subjects {
        for emotion in EmotionCategory::ALL {
            for story_index in 0..stories_per_pair {
                runs.push(ManifestRun {
                    subject: subject.clone(),
                    emotion,
                    story_index,
                    seed: run_seed(subject, emotion, story_index, master_seed),
                });
            }
        }
    }
    Ok(EvaluationManifest {
        subjects: subjects.to_vec(),
        emotions: EmotionCategory::ALL.to_vec(),
        stories_per_pair,
        master_seed,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend_kind: BackendKind,
    pub model_id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

impl Provenance {
    pub fn new(backend: &BackendConfig, seed: u64, timestamps: bool) -> Self {
        Self {
            backend_kind: backend.kind,
            model_id: backend.model_label().to_string(),
            seed,
            created_unix: timestamps
                .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptArtifact {
    #[serde(flatten)]
    pub script: StoryScript,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptsArtifact {
    pub subject: String,
    pub emotion: EmotionCategory,
    #[serde(flatten)]
    pub prompts: EmotionalPrompts,
    /// Per-frame prompt plus the elements assigned to its beat.
    pub frames: Vec<FramePrompt>,
    pub validation: ValidationReport,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryRunConfig {
    pub subject: String,
    pub emotion: EmotionCategory,
    pub story_index: usize,
    pub region: RegionConfig,
    pub backend: BackendConfig,
    pub toy: ToyModelSpec,
    pub steps: usize,
    pub plan: PlanOptions,
    /// Root of the output tree; the run writes below it.
    pub output_dir: PathBuf,
    pub seed: u64,
    pub timestamps: bool,
}

impl StoryRunConfig {
    pub fn new(subject: impl Into<String>, emotion: EmotionCategory, output_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            subject: subject.into(),
            emotion,
            story_index: 0,
            region: RegionConfig::default(),
            backend: BackendConfig::template(),
            toy: ToyModelSpec::default(),
            steps: DEFAULT_STEPS,
            plan: PlanOptions::default(),
            output_dir: output_dir.into(),
            seed,
            timestamps: false,
        }
    }

    pub fn frames_per_story(&self) -> usize {
        FRAMES_PER_STORY
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(run_dir_relative(&self.subject, self.emotion, self.story_index))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.subject.trim().is_empty() {
            return Err(PlanningError::EmptySubject.into());
        }
        self.region.validate()?;
        self.toy.validate()?;
        self.backend.validate().map_err(PlanningError::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    /// Every prompt passed validation.
    Ok,
    /// Artifacts written, but the validation report has failures.
    Invalid,
    Failed,
}

#[derive(Debug, Clone)]
pub struct StoryArtifacts {
    pub dir: PathBuf,
    pub script: StoryScript,
    pub prompts: EmotionalPrompts,
    pub frames: Vec<FramePrompt>,
    pub validation: ValidationReport,
    pub traces: Vec<DenoiseTrace>,
    pub metrics: ProxyMetricsReport,
}

impl StoryArtifacts {
    pub fn status(&self) -> RunStatus {
        if self.validation.all_pass() {
            RunStatus::Ok
        } else {
            RunStatus::Invalid
        }
    }
}

/// Planning half of a run: script, prompts and their validation.
pub fn plan_story(
    subject: &str,
    emotion: EmotionCategory,
    library: &TreeLibrary,
    backend: &BackendConfig,
    options: &PlanOptions,
    seed: u64,
) -> Result<(StoryScript, EmotionalPrompts, ValidationReport), PipelineError> {
    let script = plan_script(subject, emotion, library, backend, options, derive_seed([&seed.to_le_bytes()[..], b"plan"]))?;
    let prompts = write_prompts(
        &script,
        backend,
        &NarrativeStructure::default(),
        derive_seed([&seed.to_le_bytes()[..], b"write"]),
    )?;
    let report = validate_prompts(&prompts, &script, library);
    Ok((script, prompts, report))
}

/// One [`FramePrompt`] per prompt, carrying the elements of its beat first
/// and the rest of the script's elements after them.
pub fn frame_prompts(script: &StoryScript, prompts: &EmotionalPrompts) -> Vec<FramePrompt> {
    prompts
        .prompts
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let mut elements = beat_elements(&script.elements, i);
            elements.extend(script.elements.iter().filter(|e| !elements.contains(e)).cloned().collect::<Vec<_>>());
            FramePrompt { text: text.clone(), subject: script.subject.clone(), elements }
        })
        .collect()
}

/// Writes `frames/<i>/` for each trace.
pub fn write_traces(run_dir: &Path, traces: &[DenoiseTrace]) -> Result<(), PipelineError> {
    for (i, trace) in traces.iter().enumerate() {
        let dir = run_dir.join("frames").join(i.to_string());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_json(&dir.join(TRACE_FILE), trace)?;
        export_masks(trace, &dir)?;
    }
    Ok(())
}

pub fn toy_seed(seed: u64) -> u64 {
    derive_seed([&seed.to_le_bytes()[..], b"toy"])
}

#[derive(Debug, Serialize)]
struct FailureMarker<'a> {
    subject: &'a str,
    emotion: EmotionCategory,
    story_index: usize,
    seed: u64,
    error: String,
}

/// Plans, simulates and persists one story. On failure the run directory
/// is emptied and left holding only `failed.json`.
pub fn run_story(config: &StoryRunConfig, library: &TreeLibrary) -> Result<StoryArtifacts, PipelineError> {
    let dir = config.run_dir();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let result = execute_story(config, library, &dir);
    if let Err(e) = &result {
        log::warn!("run {} failed: {e}", dir.display());
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let marker = FailureMarker {
            subject: &config.subject,
            emotion: config.emotion,
            story_index: config.story_index,
            seed: config.seed,
            error: e.to_string(),
        };
        write_json(&dir.join(FAILURE_FILE), &marker)?;
    }
    result
}

fn execute_story(config: &StoryRunConfig, library: &TreeLibrary, dir: &Path) -> Result<StoryArtifacts, PipelineError> {
    config.validate()?;
    let (script, prompts, validation) =
        plan_story(&config.subject, config.emotion, library, &config.backend, &config.plan, config.seed)?;
    let frames = frame_prompts(&script, &prompts);
    let traces = run_toy_story(&frames, &config.region, config.steps, toy_seed(config.seed), &config.toy)?;
    let metrics = report_proxy_metrics(&script.subject, &prompts, &traces)?;

    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let provenance = Provenance::new(&config.backend, config.seed, config.timestamps);
    write_json(&dir.join(SCRIPT_FILE), &ScriptArtifact { script: script.clone(), provenance: provenance.clone() })?;
    write_json(
        &dir.join(PROMPTS_FILE),
        &PromptsArtifact {
            subject: script.subject.clone(),
            emotion: script.emotion,
            prompts: prompts.clone(),
            frames: frames.clone(),
            validation: validation.clone(),
            provenance,
        },
    )?;
    write_traces(dir, &traces)?;
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    Ok(StoryArtifacts { dir: dir.to_path_buf(), script, prompts, frames, validation, traces, metrics })
}

/// Recomputes proxy metrics from a run directory, reading final masks from
/// the exported PGM files.
pub fn recompute_metrics(run_dir: &Path) -> Result<ProxyMetricsReport, PipelineError> {
    let prompts: PromptsArtifact = read_json(&run_dir.join(PROMPTS_FILE))?;
    let mut finals = Vec::with_capacity(FRAMES_PER_STORY);
    let mut masses = Vec::with_capacity(FRAMES_PER_STORY);
    for i in 0..FRAMES_PER_STORY {
        let frame = run_dir.join("frames").join(i.to_string());
        let trace: DenoiseTrace = read_json(&frame.join(TRACE_FILE))?;
        let last = trace
            .masks
            .last()
            .ok_or_else(|| PipelineError::MissingArtifact(format!("{} has no masks", frame.display())))?;
        let pgm = frame.join(step_file_name(last.t));
        if !pgm.exists() {
            return Err(PipelineError::MissingArtifact(pgm.display().to_string()));
        }
        finals.push(load_pgm(&pgm)?);
        masses.push(trace.final_element_mass());
    }
    let refs: Vec<&RegionMask> = finals.iter().collect();
    metrics::report_from_parts(&prompts.subject, &prompts.prompts, &refs, masses.into_iter())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOptions {
    pub output_dir: PathBuf,
    pub region: RegionConfig,
    pub backend: BackendConfig,
    pub toy: ToyModelSpec,
    pub steps: usize,
    pub plan: PlanOptions,
    /// Worker threads; all available cores when unset.
    pub workers: Option<usize>,
    pub timestamps: bool,
}

impl BatchOptions {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            output_dir: output_dir.into(),
            region: RegionConfig::default(),
            backend: BackendConfig::template(),
            toy: ToyModelSpec::default(),
            steps: DEFAULT_STEPS,
            plan: PlanOptions::default(),
            workers: None,
            timestamps: false,
        }
    }

    fn story_config(&self, run: &ManifestRun) -> StoryRunConfig {
        StoryRunConfig {
            subject: run.subject.clone(),
            emotion: run.emotion,
            story_index: run.story_index,
            region: self.region,
            backend: self.backend.clone(),
            toy: self.toy.clone(),
            steps: self.steps,
            plan: self.plan.clone(),
            output_dir: self.output_dir.clone(),
            seed: run.seed,
            timestamps: self.timestamps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub subject: String,
    pub emotion: EmotionCategory,
    pub story_index: usize,
    pub seed: u64,
    /// Relative to the output root, `/`-separated.
    pub dir: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<ProxyMetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub master_seed: u64,
    pub total: usize,
    pub ok: usize,
    pub invalid: usize,
    pub failed: usize,
    pub runs: Vec<RunRecord>,
}

/// Runs every manifest entry, continuing past failures, and writes
/// `summary.json` in manifest order.
pub fn run_manifest(
    manifest: &EvaluationManifest,
    library: &TreeLibrary,
    options: &BatchOptions,
) -> Result<BatchSummary, PipelineError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = options.workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    fs::create_dir_all(&options.output_dir).map_err(io_err(&options.output_dir))?;

    let runs: Vec<RunRecord> = pool.install(|| {
        manifest
            .runs
            .par_iter()
            .map(|run| {
                let config = options.story_config(run);
                let dir = run.relative_dir().iter().map(|c| c.to_string_lossy()).collect::<Vec<_>>().join("/");
                let (status, error, metrics) = match run_story(&config, library) {
                    Ok(a) => (a.status(), None, Some(a.metrics)),
                    Err(e) => (RunStatus::Failed, Some(e.to_string()), None),
                };
                RunRecord {
                    subject: run.subject.clone(),
                    emotion: run.emotion,
                    story_index: run.story_index,
                    seed: run.seed,
                    dir,
                    status,
                    error,
                    metrics,
                }
            })
            .collect()
    });

    let count = |s: RunStatus| runs.iter().filter(|r| r.status == s).count();
    let summary = BatchSummary {
        master_seed: manifest.master_seed,
        total: runs.len(),
        ok: count(RunStatus::Ok),
        invalid: count(RunStatus::Invalid),
        failed: count(RunStatus::Failed),
        runs,
    };
    write_json(&options.output_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
