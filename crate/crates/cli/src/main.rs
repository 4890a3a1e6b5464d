mod settings;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use emostory::attention::toy::run_toy_story;
use emostory::knowledge::{build_trees, load_annotation_records, save_tree_library};
use emostory::pipeline::{
    generate_manifest, load_subjects, plan_story, frame_prompts, read_json, recompute_metrics, report_proxy_metrics,
    run_manifest, run_story, toy_seed, write_json, write_traces, PromptsArtifact, Provenance, RunStatus,
    ScriptArtifact, METRICS_FILE, PROMPTS_FILE, SCRIPT_FILE,
};
use emostory::EmotionCategory;

use settings::{CommonArgs, Settings};

/// Emotion-aware visual story planning and toy region-aware generation.
#[derive(Debug, Parser)]
#[command(name = "emostory", version)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plan a story script and its four prompts
    Plan(StoryArgs),
    /// Run the toy denoising loop for a planned story's prompts
    Simulate {
        /// prompts.json written by `plan`
        #[arg(long)]
        prompts: PathBuf,
    },
    /// Plan, simulate and score one story
    Run(StoryArgs),
    /// Run every (subject, emotion, story) combination of a subject list
    Manifest {
        /// One subject per line
        #[arg(long)]
        subjects: Option<PathBuf>,
        #[arg(long)]
        stories_per_pair: Option<usize>,
        /// Worker threads (default: all cores)
        #[arg(long)]
        workers: Option<usize>,
        /// Print the run list without executing it
        #[arg(long)]
        dry_run: bool,
    },
    /// Recompute proxy metrics for a run directory
    Metrics {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Build a tree library from annotation records (JSON lines)
    BuildTrees {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        min_frequency: Option<u32>,
        /// Element names to drop, one per line
        #[arg(long)]
        stoplist: Option<PathBuf>,
        /// Output library path
        #[arg(long, value_name = "PATH")]
        write: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
struct StoryArgs {
    #[arg(long)]
    subject: String,
    #[arg(long)]
    emotion: EmotionCategory,
    #[arg(long, default_value_t = 0)]
    index: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Exit code 2 marks completed work with validation failures.
fn status_code(ok: bool) -> ExitCode {
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let settings = Settings::resolve(&cli.common)?;
    match cli.command {
        Command::Plan(story) => plan(&settings, &story),
        Command::Simulate { prompts } => simulate(&settings, &prompts),
        Command::Run(story) => run(&settings, &story),
        Command::Manifest { subjects, stories_per_pair, workers, dry_run } => {
            manifest(&settings, subjects, stories_per_pair, workers, dry_run)
        }
        Command::Metrics { run_dir } => metrics(&run_dir),
        Command::BuildTrees { records, min_frequency, stoplist, write } => {
            build(&settings, &records, min_frequency, stoplist.as_deref(), &write)
        }
    }
}

fn plan(settings: &Settings, story: &StoryArgs) -> Result<ExitCode> {
    let library = settings.library()?;
    let config = settings.story(&story.subject, story.emotion, story.index);
    let (script, prompts, report) =
        plan_story(&story.subject, story.emotion, &library, &settings.backend, &settings.plan, settings.seed)?;
    let dir = config.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let provenance = Provenance::new(&settings.backend, settings.seed, settings.timestamps);
    let frames = frame_prompts(&script, &prompts);
    write_json(&dir.join(SCRIPT_FILE), &ScriptArtifact { script: script.clone(), provenance: provenance.clone() })?;
    write_json(
        &dir.join(PROMPTS_FILE),
        &PromptsArtifact {
            subject: script.subject.clone(),
            emotion: script.emotion,
            prompts: prompts.clone(),
            frames,
            validation: report.clone(),
            provenance,
        },
    )?;
    for (i, p) in prompts.prompts.iter().enumerate() {
        println!("p{}: {p}", i + 1);
    }
    for failing in report.failing() {
        eprintln!("prompt {failing} failed validation");
    }
    println!("wrote {}", dir.display());
    Ok(status_code(report.all_pass()))
}

fn simulate(settings: &Settings, prompts_path: &Path) -> Result<ExitCode> {
    let artifact: PromptsArtifact = read_json(prompts_path)?;
    let dir = settings
        .out_override()
        .unwrap_or_else(|| prompts_path.parent().map(Path::to_path_buf).unwrap_or_default());
    let traces = run_toy_story(&artifact.frames, &settings.region, settings.steps, toy_seed(settings.seed), &settings.toy)?;
    write_traces(&dir, &traces)?;
    let metrics = report_proxy_metrics(&artifact.subject, &artifact.prompts, &traces)?;
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    for (i, t) in traces.iter().enumerate() {
        let last = t.masks.last().expect("trace holds a mask");
        println!("frame {i}: final subject area {} ({} steps)", last.area, t.steps.len());
    }
    println!("mask_stability {:.4}", metrics.mask_stability);
    Ok(ExitCode::SUCCESS)
}

fn run(settings: &Settings, story: &StoryArgs) -> Result<ExitCode> {
    let library = settings.library()?;
    let config = settings.story(&story.subject, story.emotion, story.index);
    let artifacts = run_story(&config, &library)?;
    let m = &artifacts.metrics;
    println!("{}", artifacts.dir.display());
    println!(
        "mask_stability {:.4}  element_mass {:.4}  subject_presence {:.4}",
        m.mask_stability, m.element_mass, m.subject_presence
    );
    for failing in artifacts.validation.failing() {
        eprintln!("prompt {failing} failed validation");
    }
    Ok(status_code(artifacts.status() == RunStatus::Ok))
}

fn manifest(
    settings: &Settings,
    subjects: Option<PathBuf>,
    stories_per_pair: Option<usize>,
    workers: Option<usize>,
    dry_run: bool,
) -> Result<ExitCode> {
    let Some(path) = subjects.or_else(|| settings.subjects.clone()) else {
        bail!("no subject list; pass --subjects or set `subjects` in the config file");
    };
    let subjects = load_subjects(&path)?;
    let manifest =
        generate_manifest(&subjects, stories_per_pair.unwrap_or(settings.stories_per_pair), settings.seed)?;
    if dry_run {
        for run in &manifest.runs {
            println!("{}\t{}\t{}\t{}", run.relative_dir().display(), run.subject, run.emotion, run.seed);
        }
        println!("{} runs", manifest.runs.len());
        return Ok(ExitCode::SUCCESS);
    }
    let library = settings.library()?;
    let mut options = settings.batch();
    if workers.is_some() {
        options.workers = workers;
    }
    let summary = run_manifest(&manifest, &library, &options)?;
    println!("{} runs: {} ok, {} invalid, {} failed", summary.total, summary.ok, summary.invalid, summary.failed);
    for r in summary.runs.iter().filter(|r| r.status == RunStatus::Failed) {
        eprintln!("{}: {}", r.dir, r.error.as_deref().unwrap_or("unknown error"));
    }
    Ok(status_code(summary.failed == 0 && summary.invalid == 0))
}

fn metrics(run_dir: &Path) -> Result<ExitCode> {
    let report = recompute_metrics(run_dir)?;
    write_json(&run_dir.join(METRICS_FILE), &report)?;
    println!("mask_stability {:.4}", report.mask_stability);
    println!("element_mass {:.4}", report.element_mass);
    println!("subject_presence {:.4}", report.subject_presence);
    Ok(ExitCode::SUCCESS)
}

fn build(
    settings: &Settings,
    records: &Path,
    min_frequency: Option<u32>,
    stoplist: Option<&Path>,
    out: &Path,
) -> Result<ExitCode> {
    let records = load_annotation_records(records)?;
    let stop: HashSet<String> = match stoplist {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        None => HashSet::new(),
    };
    let library = build_trees(&records, min_frequency.unwrap_or(settings.min_frequency), &stop)?;
    for warning in library.warnings() {
        log::warn!("{warning}");
    }
    save_tree_library(&library, out)?;
    for tree in library.trees() {
        println!("{}: {} elements", tree.root, tree.len());
    }
    Ok(ExitCode::SUCCESS)
}
