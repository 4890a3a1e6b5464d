use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use emostory::attention::toy::ToyModelSpec;
use emostory::attention::{RegionConfig, ThresholdMode};
use emostory::knowledge::DEFAULT_MIN_FREQUENCY;
use emostory::llm::{BackendConfig, BackendKind};
use emostory::pipeline::config::{parse_grid, FileConfig};
use emostory::pipeline::{BatchOptions, StoryRunConfig, DEFAULT_STEPS, DEFAULT_STORIES_PER_PAIR};
use emostory::planning::PlanOptions;
use emostory::EmotionCategory;

/// Flags shared by every subcommand. Each one overrides the matching key of
/// `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML file with defaults for any of these flags
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Emotion factor tree library
    #[arg(long, global = true, value_name = "PATH")]
    pub trees: Option<PathBuf>,
    #[arg(long, global = true, value_name = "http|template")]
    pub backend: Option<BackendKind>,
    /// Chat-completion endpoint for the http backend
    #[arg(long, global = true, value_name = "URL")]
    pub endpoint: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Image grid, e.g. 8x8
    #[arg(long, global = true, value_name = "HxW")]
    pub grid: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Record creation time in script.json and prompts.json
    #[arg(long, global = true)]
    pub timestamps: bool,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub trees: PathBuf,
    pub backend: BackendConfig,
    pub region: RegionConfig,
    pub toy: ToyModelSpec,
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
    explicit_out: Option<PathBuf>,
    pub plan: PlanOptions,
    pub stories_per_pair: usize,
    pub workers: Option<usize>,
    pub min_frequency: u32,
    pub subjects: Option<PathBuf>,
    pub timestamps: bool,
}

impl Settings {
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };

        let kind = args.backend.or(file.backend).unwrap_or(BackendKind::Template);
        let mut backend = match kind {
            BackendKind::Template => BackendConfig::template(),
            BackendKind::Http => {
                let Some(url) = args.endpoint.clone().or(file.endpoint_url.clone()) else {
                    bail!("the http backend needs --endpoint or `endpoint_url` in the config file");
                };
                let Some(model) = args.model.clone().or(file.model_id.clone()) else {
                    bail!("the http backend needs --model or `model_id` in the config file");
                };
                BackendConfig::http(url, model)
            }
        };
        if let Some(ms) = file.timeout_ms {
            backend.timeout_ms = ms;
        }
        if let Some(n) = file.max_retries {
            backend.max_retries = n;
        }

        let mut region = RegionConfig::default();
        region.tau = args.tau.or(file.tau).unwrap_or(region.tau);
        region.lambda_mix = args.lambda.or(file.lambda).unwrap_or(region.lambda_mix);
        region.alpha = args.alpha.or(file.alpha).unwrap_or(region.alpha);
        region.ra_quantile = file.ra_quantile.unwrap_or(region.ra_quantile);
        region.threshold_mode = file.threshold_mode.unwrap_or(ThresholdMode::Relative);
        region.validate()?;

        let mut toy = ToyModelSpec::default();
        if let Some(grid) = args.grid.as_ref().or(file.grid.as_ref()) {
            let (h, w) = parse_grid(grid)?;
            toy = toy.with_grid(h, w);
        }
        toy.validate()?;

        let mut plan = PlanOptions::default();
        plan.k_elements = file.k_elements.unwrap_or(plan.k_elements);
        plan.max_words = file.max_words.unwrap_or(plan.max_words);

        Ok(Self {
            trees: args.trees.clone().or(file.trees).unwrap_or_else(|| PathBuf::from("data/trees.json")),
            backend,
            region,
            toy,
            steps: args.steps.or(file.steps).unwrap_or(DEFAULT_STEPS),
            seed: args.seed.or(file.seed).unwrap_or(0),
            out: args.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
            explicit_out: args.out.clone().or(file.out),
            plan,
            stories_per_pair: file.stories_per_pair.unwrap_or(DEFAULT_STORIES_PER_PAIR),
            workers: file.workers,
            min_frequency: file.min_frequency.unwrap_or(DEFAULT_MIN_FREQUENCY),
            subjects: file.subjects,
            timestamps: args.timestamps || file.timestamps.unwrap_or(false),
        })
    }

    /// `--out` or the config `out` key, when either was given.
    pub fn out_override(&self) -> Option<PathBuf> {
        self.explicit_out.clone()
    }

    pub fn library(&self) -> Result<emostory::knowledge::TreeLibrary> {
        let library = emostory::knowledge::load_tree_library(&self.trees)
            .with_context(|| format!("loading trees from {}", self.trees.display()))?;
        for warning in library.warnings() {
            log::warn!("{warning}");
        }
        Ok(library)
    }

    pub fn story(&self, subject: &str, emotion: EmotionCategory, index: usize) -> StoryRunConfig {
        StoryRunConfig {
            subject: subject.to_string(),
            emotion,
            story_index: index,
            region: self.region,
            backend: self.backend.clone(),
            toy: self.toy.clone(),
            steps: self.steps,
            plan: self.plan.clone(),
            output_dir: self.out.clone(),
            seed: self.seed,
            timestamps: self.timestamps,
        }
    }

    pub fn batch(&self) -> BatchOptions {
        BatchOptions {
            output_dir: self.out.clone(),
            region: self.region,
            backend: self.backend.clone(),
            toy: self.toy.clone(),
            steps: self.steps,
            plan: self.plan.clone(),
            workers: self.workers,
            timestamps: self.timestamps,
        }
    }
}
