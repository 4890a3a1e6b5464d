//! Emotion-aware visual story planning and region-aware joint attention.
//!
//! The crate has two halves. The planning half turns a subject and a target
//! emotion into four narrative prompts, grounded in per-emotion trees of
//! visual elements ([`knowledge`], [`planning`], backed by a text
//! generation [`llm`] backend). The generation half runs a toy-scale joint
//! attention engine over `[prompt, reference image, story image]` tokens
//! that separates the subject region from the element region, mixes
//! reference values into the subject, and biases element tokens away from
//! it ([`attention`]). [`pipeline`] ties both together into batch runs with
//! on-disk artifacts.

pub mod attention;
pub mod emotion;
pub mod knowledge;
pub mod llm;
pub mod pipeline;
pub mod planning;
pub mod seed;
pub mod text;

pub use emotion::{EmotionCategory, Polarity};
