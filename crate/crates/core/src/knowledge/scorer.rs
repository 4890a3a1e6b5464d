use rand::seq::SliceRandom;

use super::{KnowledgeError, VisualElement};
use crate::emotion::EmotionCategory;
use crate::seed::{derive_seed, rng_from_seed};

/// Orders candidate elements by how well they suit a subject.
pub trait ElementScorer: Send + Sync {
    /// Returns the candidates best-first. Extra, missing, or repeated
    /// entries are tolerated; callers filter against the tree.
    fn rank(
        &self,
        emotion: EmotionCategory,
        subject: &str,
        candidates: &[VisualElement],
        seed: u64,
    ) -> Result<Vec<VisualElement>, KnowledgeError>;
}

/// Ranks by frequency; equal-frequency runs are shuffled with a seeded
/// generator keyed on (seed, emotion, subject).
#[derive(Debug, Clone, Copy, Default)]
pub struct FrequencyScorer;

impl ElementScorer for FrequencyScorer {
    fn rank(
        &self,
        emotion: EmotionCategory,
        subject: &str,
        candidates: &[VisualElement],
        seed: u64,
    ) -> Result<Vec<VisualElement>, KnowledgeError> {
        let mut sorted = candidates.to_vec();
        sorted.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.name.cmp(&b.name)));
        let mut rng = rng_from_seed(derive_seed([
            &seed.to_le_bytes()[..],
            emotion.label().as_bytes(),
            subject.as_bytes(),
        ]));
        for run in sorted.chunk_by_mut(|a, b| a.frequency == b.frequency) {
            run.shuffle(&mut rng);
        }
        Ok(sorted)
    }
}
