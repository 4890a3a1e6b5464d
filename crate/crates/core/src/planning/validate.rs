use serde::{Deserialize, Serialize};

use super::{EmotionalPrompts, StoryScript};
use crate::knowledge::TreeLibrary;
use crate::text::{mentions, word_count};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptReport {
    /// 1-based prompt index.
    pub index: usize,
    pub subject_present: bool,
    /// Library elements named in the prompt, in library order.
    pub referenced_elements: Vec<String>,
    /// Referenced elements found only in trees of the opposite polarity.
    pub contaminating_elements: Vec<String>,
    pub word_count: usize,
}

impl PromptReport {
    pub fn polarity_contaminated(&self) -> bool {
        !self.contaminating_elements.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub prompts: Vec<PromptReport>,
    pub prompt_count_ok: bool,
    /// Script elements no prompt mentions.
    pub uncovered_elements: Vec<String>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.prompt_count_ok
            && self.uncovered_elements.is_empty()
            && self.prompts.iter().all(|p| {
                p.subject_present && !p.polarity_contaminated() && !p.referenced_elements.is_empty()
            })
    }

    /// 1-based indices of prompts that fail any check.
    pub fn failing(&self) -> Vec<usize> {
        self.prompts
            .iter()
            .filter(|p| !p.subject_present || p.polarity_contaminated() || p.referenced_elements.is_empty())
            .map(|p| p.index)
            .collect()
    }
}

/// Report-only audit of a prompt set against its script and library.
pub fn validate_prompts(prompts: &EmotionalPrompts, script: &StoryScript, library: &TreeLibrary) -> ValidationReport {
    let own_polarity = script.emotion.polarity();
    let mut all_elements: Vec<&str> = Vec::new();
    for tree in library.trees() {
        for leaf in tree.leaves() {
            if !all_elements.iter().any(|e| e.eq_ignore_ascii_case(&leaf.name)) {
                all_elements.push(&leaf.name);
            }
        }
    }

    let reports = prompts
        .prompts
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let referenced: Vec<String> =
                all_elements.iter().filter(|e| mentions(text, e)).map(|e| e.to_string()).collect();
            let contaminating = referenced
                .iter()
                .filter(|e| {
                    let homes = library.emotions_containing(e);
                    !homes.is_empty() && homes.iter().all(|h| h.polarity() != own_polarity)
                })
                .cloned()
                .collect();
            PromptReport {
                index: i + 1,
                subject_present: text.contains(&script.subject),
                referenced_elements: referenced,
                contaminating_elements: contaminating,
                word_count: word_count(text),
            }
        })
        .collect();

    ValidationReport {
        prompts: reports,
        prompt_count_ok: prompts.prompts.len() == super::PROMPTS_PER_STORY,
        uncovered_elements: script
            .elements
            .iter()
            .filter(|e| !prompts.prompts.iter().any(|p| mentions(p, e)))
            .cloned()
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emotion::EmotionCategory;
    use crate::planning::tests::library;
    use crate::planning::NarrativeStructure;

    fn script() -> StoryScript {
        StoryScript {
            subject: "A yellow duck".into(),
            emotion: EmotionCategory::Amusement,
            elements: vec!["carousel horse".into(), "cotton candy".into()],
            theme: "t".into(),
            event: "e".into(),
        }
    }

    fn prompts(texts: [&str; 4]) -> EmotionalPrompts {
        EmotionalPrompts {
            prompts: texts.iter().map(|s| s.to_string()).collect(),
            beats: NarrativeStructure::default().beats.to_vec(),
            uncovered_elements: vec![],
        }
    }

    #[test]
    fn compliant_prompts_pass() {
        let p = prompts([
            "A yellow duck rides a carousel horse",
            "A yellow duck eats cotton candy",
            "A yellow duck waves from the carousel horse",
            "A yellow duck naps by the cotton candy cart",
        ]);
        let report = validate_prompts(&p, &script(), &library());
        assert!(report.all_pass(), "{report:?}");
        assert_eq!(report.prompts[0].word_count, 7);
    }

    #[test]
    fn missing_subject_flagged_by_index() {
        let p = prompts([
            "A yellow duck rides a carousel horse",
            "A yellow duck eats cotton candy",
            "the carousel horse spins alone",
            "A yellow duck naps by the cotton candy cart",
        ]);
        let report = validate_prompts(&p, &script(), &library());
        assert!(!report.all_pass());
        assert_eq!(report.failing(), [3]);
        assert!(!report.prompts[2].subject_present);
    }

    #[test]
    fn opposite_polarity_element_flagged() {
        let p = prompts([
            "A yellow duck rides a carousel horse",
            "A yellow duck finds a human skeleton under the cotton candy",
            "A yellow duck waves from the carousel horse",
            "A yellow duck naps by the cotton candy cart",
        ]);
        let report = validate_prompts(&p, &script(), &library());
        assert!(report.prompts[1].polarity_contaminated());
        assert_eq!(report.prompts[1].contaminating_elements, ["human skeleton"]);
        assert!(!report.prompts[0].polarity_contaminated());
    }

    #[test]
    fn uncovered_elements_and_count() {
        let mut p = prompts(["A yellow duck rides a carousel horse"; 4]);
        let report = validate_prompts(&p, &script(), &library());
        assert_eq!(report.uncovered_elements, ["cotton candy"]);
        p.prompts.pop();
        assert!(!validate_prompts(&p, &script(), &library()).prompt_count_ok);
    }
}
