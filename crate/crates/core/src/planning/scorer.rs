use crate::emotion::EmotionCategory;
use crate::knowledge::{ElementScorer, KnowledgeError, VisualElement};
use crate::llm::block::{split_list, Block};
use crate::llm::{complete, BackendConfig, ChatRequest};

const RANK_SYSTEM: &str = "[task:rank_elements]
Rank the candidate visual elements by how naturally each fits into a story about the subject while evoking the emotion. Answer with a fenced block containing one line `ranking: a; b; c` listing every candidate verbatim, best first.";

/// Asks the text backend to order candidates for a subject.
///
/// Candidates the backend leaves out are appended in their original order.
#[derive(Debug, Clone)]
pub struct BackendScorer {
    backend: BackendConfig,
}

impl BackendScorer {
    pub fn new(backend: BackendConfig) -> Self {
        Self { backend }
    }
}

impl ElementScorer for BackendScorer {
    fn rank(
        &self,
        emotion: EmotionCategory,
        subject: &str,
        candidates: &[VisualElement],
        seed: u64,
    ) -> Result<Vec<VisualElement>, KnowledgeError> {
        let names: Vec<&str> = candidates.iter().map(|c| c.name.as_str()).collect();
        let inputs = Block::new()
            .with("subject", subject)
            .with("emotion", emotion.label())
            .with("candidates", names.join("; "));
        let request = ChatRequest::new(RANK_SYSTEM, inputs.render()).with_seed(seed);
        let response = complete(&request, &self.backend).map_err(|e| KnowledgeError::Scorer(e.to_string()))?;
        let block = Block::parse(&response.text).map_err(|e| KnowledgeError::Scorer(e.to_string()))?;
        let ranking = split_list(block.require("ranking").map_err(|e| KnowledgeError::Scorer(e.to_string()))?);

        let mut out: Vec<VisualElement> = ranking
            .iter()
            .filter_map(|name| candidates.iter().find(|c| c.name.eq_ignore_ascii_case(name)).cloned())
            .collect();
        for c in candidates {
            if !out.iter().any(|o| o.name == c.name) {
                out.push(c.clone());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::ElementGroup;

    #[test]
    fn template_backend_preserves_candidate_order() {
        let candidates = vec![
            VisualElement::new("carousel horse", 9, ElementGroup::Object),
            VisualElement::new("cotton candy", 7, ElementGroup::Object),
        ];
        let ranked = BackendScorer::new(BackendConfig::template())
            .rank(EmotionCategory::Amusement, "A yellow duck", &candidates, 1)
            .unwrap();
        assert_eq!(ranked, candidates);
    }
}
