//! Seeded toy denoising loop around [`attention_layer_forward`].
//!
//! Each image token is a one-hot position channel (scaled by
//! `position_scale`) plus a `content_dim`-wide content vector; prompt
//! tokens carry content only, from a seeded hash embedding of each word.
//! The reference image carries the subject direction (the normalized mean
//! of the subject-token embeddings) inside the planted block and seeded
//! background elsewhere. Story tokens start as position plus noise; each
//! step runs the layer with identity weights, keeps `retain` of the new
//! story rows, adds noise whose scale decays linearly to zero, and resets
//! the position channels. Prompt and reference tokens stay fixed.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    attention_layer_forward, binarize_masks, subject_attention, AttentionError, ProjectionWeights, RegionConfig,
    RegionMask, TokenStream,
};
use crate::seed::{derive_seed, rng_from_seed};
use crate::text::{find_phrase, words};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelSpec {
    /// `(h, w)` of both image grids.
    pub grid: (usize, usize),
    /// Planted subject block as `(top, left, rows, cols)`.
    pub block: (usize, usize, usize, usize),
    pub content_dim: usize,
    /// Norm of each word embedding.
    pub token_scale: f64,
    pub position_scale: f64,
    /// Norm of the subject signal planted in the reference block.
    pub subject_strength: f64,
    pub background_scale: f64,
    /// Noise scale of the initial story tokens.
    pub noise_start: f64,
    /// Fraction of the layer output carried into the next step.
    pub retain: f64,
    pub vocab_seed: u64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self {
            grid: (8, 8),
            block: (2, 2, 4, 4),
            content_dim: 32,
            token_scale: 6.0,
            position_scale: 10.0,
            subject_strength: 8.0,
            background_scale: 2.0,
            noise_start: 2.0,
            retain: 0.5,
            vocab_seed: 1234,
        }
    }
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<(), AttentionError> {
        let (h, w) = self.grid;
        let (top, left, rows, cols) = self.block;
        if h == 0 || w == 0 {
            return Err(AttentionError::Toy("grid must be non-empty".into()));
        }
        if rows == 0 || cols == 0 || top + rows > h || left + cols > w {
            return Err(AttentionError::Toy(format!("block {:?} does not fit a {h}x{w} grid", self.block)));
        }
        if self.content_dim == 0 {
            return Err(AttentionError::Toy("content_dim must be positive".into()));
        }
        let scales = [
            self.token_scale,
            self.position_scale,
            self.subject_strength,
            self.background_scale,
            self.noise_start,
        ];
        if scales.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(AttentionError::Toy("scales must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.retain) {
            return Err(AttentionError::Toy(format!("retain {} outside [0, 1]", self.retain)));
        }
        Ok(())
    }

    /// Same scales on an `h x w` grid with a centred half-size block.
    pub fn with_grid(&self, h: usize, w: usize) -> Self {
        let block = if (h, w) == (8, 8) { (2, 2, 4, 4) } else { (h / 4, w / 4, (h / 2).max(1), (w / 2).max(1)) };
        Self { grid: (h, w), block, ..self.clone() }
    }

    pub fn image_len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn width(&self) -> usize {
        self.image_len() + self.content_dim
    }

    pub fn planted_mask(&self) -> RegionMask {
        let (top, left, rows, cols) = self.block;
        RegionMask::rectangle(self.grid, top, left, rows, cols)
    }

    fn content(&self, rng: &mut ChaCha8Rng, scale: f64) -> Array1<f64> {
        let mut v = Array1::zeros(self.width());
        let c: Array1<f64> = (0..self.content_dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = c.dot(&c).sqrt();
        if norm > 0.0 {
            v.slice_mut(s![self.image_len()..]).assign(&(c * (scale / norm)));
        }
        v
    }

    /// Hash embedding of one (lowercased) word.
    pub fn word_embedding(&self, word: &str) -> Array1<f64> {
        let mut rng = rng_from_seed(derive_seed([&self.vocab_seed.to_le_bytes()[..], b"word", word.as_bytes()]));
        self.content(&mut rng, self.token_scale)
    }

    fn positions(&self) -> Array2<f64> {
        let n = self.image_len();
        let mut pos = Array2::zeros((n, self.width()));
        for i in 0..n {
            pos[[i, i]] = self.position_scale;
        }
        pos
    }
}

/// One frame's prompt with the phrases that locate its subject and element
/// tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePrompt {
    pub text: String,
    pub subject: String,
    pub elements: Vec<String>,
}

/// Prompt tokens and the spans inside them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenized {
    pub tokens: Vec<String>,
    pub subject_span: (usize, usize),
    pub element_span: (usize, usize),
}

impl FramePrompt {
    /// Splits the prompt into word tokens. A subject or element phrase
    /// missing from the text is appended so both spans are non-empty.
    pub fn tokenize(&self) -> Result<Tokenized, AttentionError> {
        let mut tokens = words(&self.text);
        let subject = words(&self.subject);
        if subject.is_empty() {
            return Err(AttentionError::EmptySpan("subject"));
        }
        let sub_start = match find_phrase(&tokens, &subject) {
            Some(i) => i,
            None => {
                tokens.splice(0..0, subject.iter().cloned());
                0
            }
        };
        let subject_span = (sub_start, sub_start + subject.len());

        let mut element_span = None;
        for phrase in self.elements.iter().map(|e| words(e)).filter(|p| !p.is_empty()) {
            // the first occurrence clear of the subject span
            let mut from = 0;
            while let Some(off) = find_phrase(&tokens[from..], &phrase) {
                let start = from + off;
                let end = start + phrase.len();
                if end <= subject_span.0 || start >= subject_span.1 {
                    element_span = Some((start, end));
                    break;
                }
                from = start + 1;
            }
            if element_span.is_some() {
                break;
            }
        }
        let element_span = match element_span {
            Some(span) => span,
            None => {
                let phrase = self
                    .elements
                    .iter()
                    .map(|e| words(e))
                    .find(|p| !p.is_empty())
                    .ok_or(AttentionError::EmptySpan("element"))?;
                let start = tokens.len();
                tokens.extend(phrase);
                (start, tokens.len())
            }
        };
        Ok(Tokenized { tokens, subject_span, element_span })
    }
}

/// Per-timestep state: `Z_t` and every mask recorded so far.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseState {
    pub timestep: usize,
    pub stream: TokenStream,
    pub mask_history: Vec<(usize, RegionMask)>,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSnapshot {
    pub t: usize,
    pub area: usize,
    pub planted_iou: f64,
    pub mask: RegionMask,
}

/// Diagnostics of the layer run at timestep `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub t: usize,
    pub subject_area: usize,
    pub element_area: usize,
    pub reference_area: usize,
    pub mixed_tokens: usize,
    pub element_mass: f64,
    pub noise_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub prompt: String,
    pub tokens: Tokenized,
    pub region: RegionConfig,
    pub toy: ToyModelSpec,
    pub steps: usize,
    pub seed: u64,
}

/// Mask evolution of one frame, `t = T` down to `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseTrace {
    pub config: TraceConfig,
    pub masks: Vec<MaskSnapshot>,
    pub steps: Vec<StepSummary>,
}

impl DenoiseTrace {
    pub fn final_mask(&self) -> &RegionMask {
        &self.masks.last().expect("a trace always holds the initial mask").mask
    }

    /// Mask after `k` layer applications (`k = 0` is the initial mask).
    pub fn mask_after(&self, k: usize) -> Option<&RegionMask> {
        self.masks.get(k).map(|m| &m.mask)
    }

    pub fn final_element_mass(&self) -> Option<f64> {
        self.steps.last().map(|s| s.element_mass)
    }
}

/// Stepwise toy run. [`ToySimulation::step`] runs the engine layer;
/// [`ToySimulation::advance`] accepts a layer output computed elsewhere.
#[derive(Debug, Clone)]
pub struct ToySimulation {
    spec: ToyModelSpec,
    region: RegionConfig,
    steps: usize,
    tokens: Tokenized,
    prompt: String,
    planted: RegionMask,
    positions: Array2<f64>,
    weights: ProjectionWeights,
    rng: ChaCha8Rng,
    state: DenoiseState,
    summaries: Vec<StepSummary>,
}

impl ToySimulation {
    pub fn new(
        frame: &FramePrompt,
        region: &RegionConfig,
        steps: usize,
        seed: u64,
        spec: &ToyModelSpec,
    ) -> Result<Self, AttentionError> {
        spec.validate()?;
        region.validate()?;
        let tokens = frame.tokenize()?;
        let n = spec.image_len();
        let d = spec.width();
        let p = tokens.tokens.len();

        let mut z = Array2::zeros((p + 2 * n, d));
        for (i, word) in tokens.tokens.iter().enumerate() {
            z.row_mut(i).assign(&spec.word_embedding(word));
        }

        let mut u = Array1::<f64>::zeros(d);
        for i in tokens.subject_span.0..tokens.subject_span.1 {
            u += &z.row(i);
        }
        let norm = u.dot(&u).sqrt();
        if norm > 0.0 {
            u /= norm;
        }

        let planted = spec.planted_mask();
        let positions = spec.positions();
        let mut background = rng_from_seed(derive_seed([
            &spec.vocab_seed.to_le_bytes()[..],
            b"background",
            frame.subject.to_lowercase().as_bytes(),
        ]));
        for j in 0..n {
            let content = if planted.get(j) { &u * spec.subject_strength } else { spec.content(&mut background, spec.background_scale) };
            z.row_mut(p + j).assign(&(&positions.row(j) + &content));
        }

        let mut rng = rng_from_seed(seed);
        let story = &positions + &noise(&mut rng, spec, spec.noise_start);
        z.slice_mut(s![p + n.., ..]).assign(&story);

        let stream = TokenStream::new(
            z,
            p,
            spec.grid,
            tokens.subject_span.0..tokens.subject_span.1,
            tokens.element_span.0..tokens.element_span.1,
        )?;
        let mut sim = Self {
            spec: spec.clone(),
            region: *region,
            steps,
            tokens,
            prompt: frame.text.clone(),
            planted,
            positions,
            weights: ProjectionWeights::identity(d),
            rng,
            state: DenoiseState { timestep: steps, stream, mask_history: Vec::new(), rng_seed: seed },
            summaries: Vec::new(),
        };
        let mask = sim.current_mask()?;
        sim.state.mask_history.push((steps, mask));
        Ok(sim)
    }

    pub fn state(&self) -> &DenoiseState {
        &self.state
    }

    pub fn planted(&self) -> &RegionMask {
        &self.planted
    }

    pub fn is_done(&self) -> bool {
        self.state.timestep == 0
    }

    /// `M_sub` of the current stream.
    pub fn current_mask(&self) -> Result<RegionMask, AttentionError> {
        let z = self.state.stream.embeddings();
        let sub = z.slice(s![self.state.stream.subject_span(), ..]).dot(&self.weights.w_q);
        let keys = z.slice(s![self.state.stream.story(), ..]).dot(&self.weights.w_k);
        let d = self.region.d.unwrap_or(self.spec.width());
        let a = subject_attention(sub.view(), keys.view(), d)?;
        Ok(binarize_masks(a.aggregated.view(), self.region.tau, self.region.threshold_mode, self.spec.grid)?.0)
    }

    /// Runs the engine layer on `Z_t` and moves to `t - 1`.
    pub fn step(&mut self) -> Result<(), AttentionError> {
        if self.is_done() {
            return Err(AttentionError::Toy("loop already reached t = 0".into()));
        }
        let out = attention_layer_forward(&self.state.stream, &self.weights, &self.region)?;
        let diag = &out.diagnostics;
        let summary = StepSummary {
            t: self.state.timestep,
            subject_area: out.m_sub.count(),
            element_area: out.m_ele.count(),
            reference_area: diag.m_ref.count(),
            mixed_tokens: diag.mixed_tokens,
            element_mass: diag.element_mass,
            noise_scale: 0.0,
        };
        self.advance(&out.embeddings)?;
        let mut summary = summary;
        summary.noise_scale = self.noise_scale(summary.t);
        self.summaries.push(summary);
        Ok(())
    }

    fn noise_scale(&self, t: usize) -> f64 {
        self.spec.noise_start * (t - 1) as f64 / self.steps as f64
    }

    /// Applies one update from a full-stream layer output and records the
    /// mask of the resulting `Z_{t-1}`.
    pub fn advance(&mut self, layer_output: &Array2<f64>) -> Result<(), AttentionError> {
        if self.is_done() {
            return Err(AttentionError::Toy("loop already reached t = 0".into()));
        }
        let stream = &self.state.stream;
        if layer_output.dim() != stream.embeddings().dim() {
            return Err(AttentionError::Shape(format!(
                "layer output {:?} for a stream of {:?}",
                layer_output.dim(),
                stream.embeddings().dim()
            )));
        }
        let t = self.state.timestep;
        let sigma = self.noise_scale(t);
        let story = stream.story();
        let n = self.spec.image_len();
        let mut next = layer_output.slice(s![story.clone(), ..]).to_owned() * self.spec.retain
            + noise(&mut self.rng, &self.spec, sigma);
        next.slice_mut(s![.., ..n]).assign(&self.positions.slice(s![.., ..n]));

        let mut z = stream.embeddings().clone();
        z.slice_mut(s![story, ..]).assign(&next);
        self.state.stream = stream.with_embeddings(z)?;
        self.state.timestep = t - 1;
        let mask = self.current_mask()?;
        self.state.mask_history.push((t - 1, mask));
        Ok(())
    }

    pub fn finish(self) -> DenoiseTrace {
        let planted = self.planted;
        DenoiseTrace {
            config: TraceConfig {
                prompt: self.prompt,
                tokens: self.tokens,
                region: self.region,
                toy: self.spec,
                steps: self.steps,
                seed: self.state.rng_seed,
            },
            masks: self
                .state
                .mask_history
                .into_iter()
                .map(|(t, mask)| MaskSnapshot { t, area: mask.count(), planted_iou: mask.iou(&planted), mask })
                .collect(),
            steps: self.summaries,
        }
    }
}

fn noise(rng: &mut ChaCha8Rng, spec: &ToyModelSpec, sigma: f64) -> Array2<f64> {
    let n = spec.image_len();
    let mut out = Array2::zeros((n, spec.width()));
    let scale = sigma / (spec.content_dim as f64).sqrt();
    for i in 0..n {
        for c in n..spec.width() {
            // always draw so the stream position does not depend on sigma
            let e: f64 = rng.sample(StandardNormal);
            out[[i, c]] = scale * e;
        }
    }
    out
}

/// Runs the full loop for one frame.
pub fn run_toy_denoise(
    frame: &FramePrompt,
    region: &RegionConfig,
    steps: usize,
    seed: u64,
    spec: &ToyModelSpec,
) -> Result<DenoiseTrace, AttentionError> {
    let mut sim = ToySimulation::new(frame, region, steps, seed, spec)?;
    while !sim.is_done() {
        sim.step()?;
    }
    Ok(sim.finish())
}

pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    derive_seed([&seed.to_le_bytes()[..], b"frame", &(frame as u64).to_le_bytes()[..]])
}

/// Runs every frame of a story in parallel, each from [`frame_seed`].
pub fn run_toy_story(
    frames: &[FramePrompt],
    region: &RegionConfig,
    steps: usize,
    seed: u64,
    spec: &ToyModelSpec,
) -> Result<Vec<DenoiseTrace>, AttentionError> {
    frames
        .par_iter()
        .enumerate()
        .map(|(i, frame)| run_toy_denoise(frame, region, steps, frame_seed(seed, i), spec))
        .collect()
}
