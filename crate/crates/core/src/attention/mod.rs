//! Region-aware joint attention over the stream `Z = [P, I_r, I_s]`:
//! prompt tokens, reference-image tokens and story-image tokens attended
//! together by one single-head layer.
//!
//! A forward pass ([`attention_layer_forward`]) runs, in order:
//!
//! 1. `Q = Z Wq`, `K = Z Wk`, `V = Z Wv` ([`project_qkv`]).
//! 2. Subject-prompt to story-image attention, averaged over the subject
//!    tokens ([`subject_attention`]), binarized into complementary subject
//!    and element masks ([`binarize_masks`]).
//! 3. Reference positions that exchange strong attention with the subject
//!    region in both directions ([`mutually_attended`]).
//! 4. Reference values blended into matched subject-region story values
//!    ([`mix_values`]).
//! 5. Joint attention where element-prompt queries get an additive bias
//!    `alpha` on element-region story keys ([`element_attention`] is the
//!    same bias restricted to story keys), then `Z + A V'`.
//!
//! [`toy`] wraps the layer in a seeded denoising loop that records how the
//! subject mask evolves.

mod ops;
mod softmax;
pub mod toy;

use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ops::{
    attention_layer_forward, binarize_masks, element_attention, joint_attention, mix_values, mutually_attended,
    project_qkv, subject_attention, LayerDiagnostics, LayerOutput, MutualAttention, Projected, SubjectAttention,
};
pub use softmax::{row_quantile, softmax_in_place, softmax_rows};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid token stream: {0}")]
    Stream(String),
    #[error("invalid region config: {0}")]
    Config(String),
    #[error("{0} span is empty")]
    EmptySpan(&'static str),
    #[error("toy model: {0}")]
    Toy(String),
}

/// Which part of the stream a matrix axis ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Stream,
    Prompt,
    SubjectTokens,
    ElementTokens,
    Reference,
    Story,
}

/// Token embeddings laid out as `[prompt | reference image | story image]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    embeddings: Array2<f64>,
    prompt_len: usize,
    grid: (usize, usize),
    subject_span: Range<usize>,
    element_span: Range<usize>,
}

fn disjoint(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.end <= b.start || b.end <= a.start
}

impl TokenStream {
    pub fn new(
        embeddings: Array2<f64>,
        prompt_len: usize,
        grid: (usize, usize),
        subject_span: Range<usize>,
        element_span: Range<usize>,
    ) -> Result<Self, AttentionError> {
        let image = grid.0 * grid.1;
        if image == 0 {
            return Err(AttentionError::Stream("image grid is empty".into()));
        }
        if embeddings.nrows() != prompt_len + 2 * image {
            return Err(AttentionError::Stream(format!(
                "{} rows, expected prompt {prompt_len} + 2 x {image} image tokens",
                embeddings.nrows()
            )));
        }
        if embeddings.ncols() == 0 {
            return Err(AttentionError::Stream("embedding width is zero".into()));
        }
        for (name, span) in [("subject", &subject_span), ("element", &element_span)] {
            if span.start > span.end || span.end > prompt_len {
                return Err(AttentionError::Stream(format!("{name} span {span:?} outside prompt 0..{prompt_len}")));
            }
        }
        if !disjoint(&subject_span, &element_span) && !subject_span.is_empty() && !element_span.is_empty() {
            return Err(AttentionError::Stream(format!(
                "subject span {subject_span:?} overlaps element span {element_span:?}"
            )));
        }
        Ok(Self { embeddings, prompt_len, grid, subject_span, element_span })
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn image_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn prompt(&self) -> Range<usize> {
        0..self.prompt_len
    }

    pub fn reference(&self) -> Range<usize> {
        self.prompt_len..self.prompt_len + self.image_len()
    }

    pub fn story(&self) -> Range<usize> {
        self.prompt_len + self.image_len()..self.len()
    }

    pub fn subject_span(&self) -> Range<usize> {
        self.subject_span.clone()
    }

    pub fn element_span(&self) -> Range<usize> {
        self.element_span.clone()
    }

    /// Same layout, new embeddings.
    pub fn with_embeddings(&self, embeddings: Array2<f64>) -> Result<Self, AttentionError> {
        Self::new(embeddings, self.prompt_len, self.grid, self.subject_span.clone(), self.element_span.clone())
    }
}

/// Projection matrices shared by every token of the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl ProjectionWeights {
    pub fn new(w_q: Array2<f64>, w_k: Array2<f64>, w_v: Array2<f64>) -> Result<Self, AttentionError> {
        let d = w_q.nrows();
        for (name, w) in [("W_q", &w_q), ("W_k", &w_k), ("W_v", &w_v)] {
            if w.nrows() != d || w.ncols() != d {
                return Err(AttentionError::Shape(format!("{name} is {}x{}, expected {d}x{d}", w.nrows(), w.ncols())));
            }
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn identity(d: usize) -> Self {
        let eye = Array2::eye(d);
        Self { w_q: eye.clone(), w_k: eye.clone(), w_v: eye }
    }

    pub fn width(&self) -> usize {
        self.w_q.nrows()
    }
}

/// How the aggregated subject attention row is compared against `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// `a[j] >= tau * max(a)`.
    #[default]
    Relative,
    /// `a[j] >= tau`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionConfig {
    /// Binarization threshold, in `(0, 1)`.
    pub tau: f64,
    pub threshold_mode: ThresholdMode,
    /// Weight kept on the story value when mixing, in `[0, 1]`.
    pub lambda_mix: f64,
    /// Pre-softmax bias on element-region keys for element queries.
    pub alpha: f64,
    /// Width used in the `1/sqrt(d)` scale; the stream width when unset.
    pub d: Option<usize>,
    /// Row quantile both cross-attention directions must reach.
    pub ra_quantile: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            tau: 0.35,
            threshold_mode: ThresholdMode::Relative,
            lambda_mix: 0.9,
            alpha: 2.0,
            d: None,
            ra_quantile: 0.75,
        }
    }
}

impl RegionConfig {
    pub fn validate(&self) -> Result<(), AttentionError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(AttentionError::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return Err(AttentionError::Config(format!("lambda {} outside [0, 1]", self.lambda_mix)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(AttentionError::Config(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.ra_quantile) {
            return Err(AttentionError::Config(format!("ra_quantile {} outside [0, 1]", self.ra_quantile)));
        }
        if self.d == Some(0) {
            return Err(AttentionError::Config("d must be positive".into()));
        }
        Ok(())
    }
}

/// Row-stochastic attention weights between two stream segments.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Array2<f64>,
    pub rows: Segment,
    pub cols: Segment,
}

impl AttentionMap {
    /// Largest deviation of any row sum from 1, and whether all entries are
    /// non-negative.
    pub fn normalization_error(&self) -> (f64, bool) {
        let worst = self
            .weights
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max);
        (worst, self.weights.iter().all(|x| *x >= 0.0))
    }

    pub fn is_normalized(&self, tolerance: f64) -> bool {
        let (err, non_negative) = self.normalization_error();
        non_negative && err <= tolerance
    }
}

/// Binary mask over image-token positions, row-major on the grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionMask {
    pub grid: (usize, usize),
    pub values: Vec<bool>,
}

impl RegionMask {
    pub fn new(grid: (usize, usize), values: Vec<bool>) -> Result<Self, AttentionError> {
        if values.len() != grid.0 * grid.1 {
            return Err(AttentionError::Shape(format!(
                "mask has {} entries for a {}x{} grid",
                values.len(),
                grid.0,
                grid.1
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn filled(grid: (usize, usize), value: bool) -> Self {
        Self { grid, values: vec![value; grid.0 * grid.1] }
    }

    /// Rectangle `rows x cols` starting at `(top, left)`, clipped to the grid.
    pub fn rectangle(grid: (usize, usize), top: usize, left: usize, rows: usize, cols: usize) -> Self {
        let mut mask = Self::filled(grid, false);
        for r in top..(top + rows).min(grid.0) {
            for c in left..(left + cols).min(grid.1) {
                mask.values[r * grid.1 + c] = true;
            }
        }
        mask
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.values[i]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn complement(&self) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|v| !v).collect() }
    }

    /// Intersection over union; two empty masks count as identical.
    pub fn iou(&self, other: &RegionMask) -> f64 {
        let inter = self.values.iter().zip(&other.values).filter(|(a, b)| **a && **b).count();
        let union = self.values.iter().zip(&other.values).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect()
    }

    /// One string of `0`/`1` per grid row.
    pub fn to_rows(&self) -> Vec<String> {
        self.values
            .chunks(self.grid.1.max(1))
            .map(|row| row.iter().map(|v| if *v { '1' } else { '0' }).collect())
            .collect()
    }

    pub fn from_rows(rows: &[String]) -> Result<Self, AttentionError> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(h * w);
        for row in rows {
            if row.len() != w {
                return Err(AttentionError::Shape("ragged mask rows".into()));
            }
            for ch in row.chars() {
                values.push(match ch {
                    '1' => true,
                    '0' => false,
                    other => return Err(AttentionError::Shape(format!("mask character `{other}`"))),
                });
            }
        }
        Self::new((h, w), values)
    }
}
