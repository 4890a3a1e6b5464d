//! Structural proxy metrics. These are not comparable to image-level
//! emotion, consistency or alignment scores.

use serde::{Deserialize, Serialize};

use super::{PipelineError, FRAMES_PER_STORY};
use crate::attention::toy::DenoiseTrace;
use crate::attention::RegionMask;
use crate::planning::EmotionalPrompts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyMetricsReport {
    /// Mean pairwise IoU of the final subject masks across frames.
    pub mask_stability: f64,
    /// Mean element-query attention mass on the element region, taken at
    /// each frame's last layer step.
    pub element_mass: f64,
    /// Fraction of prompts containing the subject phrase verbatim.
    pub subject_presence: f64,
    pub frames: usize,
}

/// Mean IoU over all unordered pairs; 1 for fewer than two masks.
pub fn mask_stability(masks: &[&RegionMask]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, a) in masks.iter().enumerate() {
        for b in &masks[i + 1..] {
            total += a.iou(b);
            pairs += 1;
        }
    }
    if pairs == 0 {
        1.0
    } else {
        total / pairs as f64
    }
}

pub fn subject_presence(prompts: &EmotionalPrompts, subject: &str) -> f64 {
    if prompts.prompts.is_empty() {
        return 0.0;
    }
    prompts.prompts.iter().filter(|p| p.contains(subject)).count() as f64 / prompts.prompts.len() as f64
}

pub fn report_proxy_metrics(
    subject: &str,
    prompts: &EmotionalPrompts,
    traces: &[DenoiseTrace],
) -> Result<ProxyMetricsReport, PipelineError> {
    let finals: Vec<&RegionMask> = traces.iter().map(DenoiseTrace::final_mask).collect();
    report_from_parts(subject, prompts, &finals, traces.iter().map(DenoiseTrace::final_element_mass))
}

pub(crate) fn report_from_parts(
    subject: &str,
    prompts: &EmotionalPrompts,
    finals: &[&RegionMask],
    masses: impl Iterator<Item = Option<f64>>,
) -> Result<ProxyMetricsReport, PipelineError> {
    if finals.len() != FRAMES_PER_STORY {
        return Err(PipelineError::MissingArtifact(format!(
            "expected {FRAMES_PER_STORY} frame traces, found {}",
            finals.len()
        )));
    }
    let masses: Vec<f64> = masses.flatten().collect();
    let element_mass = if masses.is_empty() { 0.0 } else { masses.iter().sum::<f64>() / masses.len() as f64 };
    Ok(ProxyMetricsReport {
        mask_stability: mask_stability(finals),
        element_mass,
        subject_presence: subject_presence(prompts, subject),
        frames: finals.len(),
    })
}
