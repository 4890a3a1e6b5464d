//! Two-agent story planning.
//!
//! The emotion agent ([`plan_script`]) picks visual elements from the
//! emotion's factor tree and asks the backend for a theme and an event,
//! producing a [`StoryScript`]. The writer agent ([`write_prompts`]) turns
//! the script into four prompts, one per narrative beat, that all share the
//! subject phrase verbatim.
//!
//! Backends answer in fenced `key: value` blocks (see [`crate::llm::block`]).
//! A response that breaks the output contract is re-requested once with the
//! next seed, then rejected.

mod scorer;
mod validate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::EmotionCategory;
use crate::knowledge::{query_elements, ElementScorer, FrequencyScorer, KnowledgeError, TreeLibrary};
use crate::llm::block::{split_list, Block};
use crate::llm::{complete, BackendConfig, BackendError, ChatRequest};
use crate::text::{mentions, word_count};

pub use scorer::BackendScorer;
pub use validate::{validate_prompts, PromptReport, ValidationReport};

pub const PROMPTS_PER_STORY: usize = 4;

#[derive(Debug, Error)]
pub enum PlanningError {
    #[error("subject must be non-empty")]
    EmptySubject,
    #[error("the `{0}` tree has no elements to plan with")]
    EmptyTree(EmotionCategory),
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("backend output failed validation twice ({reason}); raw text:\n{raw}")]
    Validation { reason: String, raw: String },
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NarrativeBeat {
    Setup,
    Development,
    Climax,
    Resolution,
}

impl NarrativeBeat {
    pub fn label(self) -> &'static str {
        match self {
            NarrativeBeat::Setup => "setup",
            NarrativeBeat::Development => "development",
            NarrativeBeat::Climax => "climax",
            NarrativeBeat::Resolution => "resolution",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrativeStructure {
    pub beats: [NarrativeBeat; PROMPTS_PER_STORY],
}

impl Default for NarrativeStructure {
    fn default() -> Self {
        Self {
            beats: [
                NarrativeBeat::Setup,
                NarrativeBeat::Development,
                NarrativeBeat::Climax,
                NarrativeBeat::Resolution,
            ],
        }
    }
}

/// Output of the emotion agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryScript {
    pub subject: String,
    pub emotion: EmotionCategory,
    pub elements: Vec<String>,
    pub theme: String,
    pub event: String,
}

/// Output of the writer agent: one prompt per beat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionalPrompts {
    pub prompts: Vec<String>,
    pub beats: Vec<NarrativeBeat>,
    /// Script elements no prompt mentions.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub uncovered_elements: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Frequency,
    Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanOptions {
    pub k_elements: usize,
    /// Word cap for theme and event.
    pub max_words: usize,
    pub scorer: ScorerKind,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self { k_elements: 4, max_words: 40, scorer: ScorerKind::Frequency }
    }
}

const EMOTION_AGENT_SYSTEM: &str = "[task:plan_script]
You are an emotion agent planning a short visual story. You receive a subject, a target emotion, and candidate visual elements drawn from that emotion's factor tree. Choose the candidates that fit the subject best and summarize an emotional theme and a story event.
Answer with a single fenced block of `key: value` lines and nothing else, using exactly these keys:
subject: the subject, copied verbatim
elements: chosen candidates separated by `;`, copied verbatim
theme: one sentence
event: one sentence";

const WRITER_AGENT_SYSTEM: &str = "[task:write_prompts]
You are a writer agent turning a story script into four image prompts following a setup, development, climax, resolution structure. Every prompt must contain the subject phrase exactly as given and name at least one of its assigned visual elements.
Answer with a single fenced block of `key: value` lines and nothing else, using exactly the keys p1, p2, p3, p4.";

fn join_phrase(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn backend_seed(seed: u64, retry: u64) -> u64 {
    seed.wrapping_add(retry)
}

/// Sends a request and parses it with `accept`, retrying once on rejection.
fn request_validated<T>(
    system: &str,
    inputs: &Block,
    backend: &BackendConfig,
    seed: u64,
    accept: impl Fn(&str) -> Result<T, String>,
) -> Result<T, PlanningError> {
    let mut last = (String::new(), String::new());
    for retry in 0..2 {
        let request = ChatRequest::new(system, inputs.render()).with_seed(backend_seed(seed, retry));
        let response = complete(&request, backend)?;
        match accept(&response.text) {
            Ok(v) => return Ok(v),
            Err(reason) => {
                log::warn!("backend output rejected (attempt {}): {reason}", retry + 1);
                last = (reason, response.text);
            }
        }
    }
    Err(PlanningError::Validation { reason: last.0, raw: last.1 })
}

/// Emotion agent: `(subject, emotion, tree) -> script`.
pub fn plan_script(
    subject: &str,
    emotion: EmotionCategory,
    library: &TreeLibrary,
    backend: &BackendConfig,
    options: &PlanOptions,
    seed: u64,
) -> Result<StoryScript, PlanningError> {
    if subject.trim().is_empty() {
        return Err(PlanningError::EmptySubject);
    }
    let tree = library.tree(emotion).ok_or(KnowledgeError::MissingEmotion(emotion))?;
    if tree.is_empty() {
        return Err(PlanningError::EmptyTree(emotion));
    }
    let backend_scorer;
    let scorer: &dyn ElementScorer = match options.scorer {
        ScorerKind::Frequency => &FrequencyScorer,
        ScorerKind::Backend => {
            backend_scorer = BackendScorer::new(backend.clone());
            &backend_scorer
        }
    };
    let candidates: Vec<String> = query_elements(library, emotion, subject, options.k_elements.max(1), scorer, seed)?
        .into_iter()
        .map(|e| e.name)
        .collect();

    let inputs = Block::new()
        .with("subject", subject)
        .with("emotion", emotion.label())
        .with("elements", candidates.join("; "))
        .with("elements_phrase", join_phrase(&candidates))
        .with("first_element", candidates[0].clone())
        .with("max_words", options.max_words.to_string());

    request_validated(EMOTION_AGENT_SYSTEM, &inputs, backend, seed, |text| {
        let block = Block::parse(text).map_err(|e| e.to_string())?;
        let script = StoryScript {
            subject: block.require("subject").map_err(|e| e.to_string())?.to_string(),
            emotion,
            elements: split_list(block.require("elements").map_err(|e| e.to_string())?),
            theme: block.require("theme").map_err(|e| e.to_string())?.to_string(),
            event: block.require("event").map_err(|e| e.to_string())?.to_string(),
        };
        check_script(script, subject, library, options.max_words)
    })
}

/// Validates a parsed script and canonicalizes element names to the tree's.
fn check_script(
    mut script: StoryScript,
    subject: &str,
    library: &TreeLibrary,
    max_words: usize,
) -> Result<StoryScript, String> {
    if script.subject != subject {
        return Err(format!("subject `{}` differs from input `{subject}`", script.subject));
    }
    let tree = library.tree(script.emotion).ok_or("emotion missing from library")?;
    if script.elements.is_empty() {
        return Err("no elements".into());
    }
    let mut canonical: Vec<String> = Vec::with_capacity(script.elements.len());
    for name in &script.elements {
        let leaf = tree
            .find(name)
            .ok_or_else(|| format!("element `{name}` is not in the `{}` tree", script.emotion))?;
        if canonical.contains(&leaf.name) {
            return Err(format!("element `{name}` listed twice"));
        }
        canonical.push(leaf.name.clone());
    }
    script.elements = canonical;
    for (field, value) in [("theme", &script.theme), ("event", &script.event)] {
        let n = word_count(value);
        if n == 0 {
            return Err(format!("{field} is empty"));
        }
        if n > max_words {
            return Err(format!("{field} has {n} words, limit {max_words}"));
        }
    }
    Ok(script)
}

/// Elements assigned to beat `beat`: every element whose index is
/// congruent to the beat modulo the beat count, or one element cycled when
/// there are fewer elements than beats.
pub fn beat_elements(elements: &[String], beat: usize) -> Vec<String> {
    if elements.len() <= PROMPTS_PER_STORY {
        return vec![elements[beat % elements.len()].clone()];
    }
    elements.iter().skip(beat).step_by(PROMPTS_PER_STORY).cloned().collect()
}

/// Writer agent: `script -> four prompts`.
pub fn write_prompts(
    script: &StoryScript,
    backend: &BackendConfig,
    structure: &NarrativeStructure,
    seed: u64,
) -> Result<EmotionalPrompts, PlanningError> {
    if script.subject.trim().is_empty() {
        return Err(PlanningError::EmptySubject);
    }
    if script.elements.is_empty() {
        return Err(PlanningError::InvalidScript("script has no elements".into()));
    }
    let mut inputs = Block::new()
        .with("subject", script.subject.as_str())
        .with("emotion", script.emotion.label())
        .with("theme", script.theme.as_str())
        .with("event", script.event.as_str())
        .with("elements", script.elements.join("; "));
    for (i, beat) in structure.beats.iter().enumerate() {
        inputs.push(&format!("p{}_beat", i + 1), beat.label());
        inputs.push(&format!("p{}_elements", i + 1), join_phrase(&beat_elements(&script.elements, i)));
    }

    request_validated(WRITER_AGENT_SYSTEM, &inputs, backend, seed, |text| {
        let block = Block::parse(text).map_err(|e| e.to_string())?;
        let prompts = (1..=PROMPTS_PER_STORY)
            .map(|i| block.require(&format!("p{i}")).map(str::to_string).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, p) in prompts.iter().enumerate() {
            if !p.contains(&script.subject) {
                return Err(format!("prompt p{} does not contain the subject `{}`", i + 1, script.subject));
            }
            if !script.elements.iter().any(|e| mentions(p, e)) {
                return Err(format!("prompt p{} names none of the script elements", i + 1));
            }
        }
        let uncovered: Vec<String> = script
            .elements
            .iter()
            .filter(|e| !prompts.iter().any(|p| mentions(p, e)))
            .cloned()
            .collect();
        if !uncovered.is_empty() {
            log::warn!("prompts leave script elements unused: {}", uncovered.join(", "));
        }
        Ok(EmotionalPrompts { prompts, beats: structure.beats.to_vec(), uncovered_elements: uncovered })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{ElementGroup, EmotionFactorTree, VisualElement};
    use crate::llm::template::{FieldTemplate, TaskTemplate, TASK_PLAN_SCRIPT, TASK_WRITE_PROMPTS};
    use crate::llm::TemplateGrammar;

    pub(crate) fn library() -> TreeLibrary {
        let tree = |root, leaves: &[(&str, u32)]| {
            EmotionFactorTree::new(
                root,
                leaves.iter().map(|(n, f)| VisualElement::new(*n, *f, ElementGroup::Object)).collect(),
            )
            .unwrap()
        };
        TreeLibrary::from_trees([
            tree(
                EmotionCategory::Amusement,
                &[("carousel horse", 9), ("cotton candy", 7), ("balloon", 6), ("clown", 5), ("tax form", 1)],
            ),
            tree(EmotionCategory::Excitement, &[("surfboard", 8), ("waves", 8)]),
            tree(EmotionCategory::Fear, &[("human skeleton", 9), ("bat", 4)]),
        ])
    }

    #[test]
    fn fig2_script_uses_leading_elements() {
        let script = plan_script(
            "A yellow duck",
            EmotionCategory::Amusement,
            &library(),
            &BackendConfig::template(),
            &PlanOptions::default(),
            0,
        )
        .unwrap();
        assert_eq!(script.subject, "A yellow duck");
        assert!(script.elements.contains(&"carousel horse".to_string()));
        assert!(script.elements.contains(&"cotton candy".to_string()));
        assert!(!script.elements.contains(&"tax form".to_string()));
    }

    #[test]
    fn planning_is_deterministic() {
        let run = || {
            let s = plan_script(
                "A white rabbit",
                EmotionCategory::Fear,
                &library(),
                &BackendConfig::template(),
                &PlanOptions::default(),
                42,
            )
            .unwrap();
            let p = write_prompts(&s, &BackendConfig::template(), &NarrativeStructure::default(), 42).unwrap();
            (s, p)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_tree_is_a_planning_error() {
        let err = plan_script(
            "A yellow duck",
            EmotionCategory::Disgust,
            &library(),
            &BackendConfig::template(),
            &PlanOptions::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, PlanningError::EmptyTree(EmotionCategory::Disgust)));
        assert!(matches!(
            plan_script(" ", EmotionCategory::Fear, &library(), &BackendConfig::template(), &PlanOptions::default(), 0),
            Err(PlanningError::EmptySubject)
        ));
    }

    #[test]
    fn prompts_share_subject_and_cover_elements() {
        let script = StoryScript {
            subject: "A yellow duck".into(),
            emotion: EmotionCategory::Excitement,
            elements: vec!["surfboard".into(), "waves".into()],
            theme: "thrill at sea".into(),
            event: "the duck rides the surf".into(),
        };
        for seed in 0..8 {
            let p = write_prompts(&script, &BackendConfig::template(), &NarrativeStructure::default(), seed).unwrap();
            assert_eq!(p.prompts.len(), 4);
            assert_eq!(p.beats, NarrativeStructure::default().beats.to_vec());
            for prompt in &p.prompts {
                assert!(prompt.contains("A yellow duck"));
                assert!(mentions(prompt, "surfboard") || mentions(prompt, "waves"));
            }
            assert!(p.prompts.iter().any(|x| mentions(x, "surfboard")));
            assert!(p.prompts.iter().any(|x| mentions(x, "waves")));
            assert!(p.uncovered_elements.is_empty());
        }
    }

    #[test]
    fn beat_assignment_covers_every_element() {
        let elements: Vec<String> = (0..7).map(|i| format!("e{i}")).collect();
        for n in 1..=7 {
            let slice = &elements[..n];
            let assigned: std::collections::HashSet<String> =
                (0..4).flat_map(|b| beat_elements(slice, b)).collect();
            assert_eq!(assigned.len(), n);
            assert!((0..4).all(|b| !beat_elements(slice, b).is_empty()));
        }
    }

    fn broken_grammar(p3: &str) -> BackendConfig {
        let mut grammar = TemplateGrammar::default();
        let writer = grammar.tasks.iter_mut().find(|t| t.task == TASK_WRITE_PROMPTS).unwrap();
        writer.fields[2] = FieldTemplate { key: "p3".into(), alternatives: vec![p3.into()] };
        let mut backend = BackendConfig::template();
        backend.grammar = Some(grammar);
        backend
    }

    #[test]
    fn invalid_writer_output_fails_after_one_retry() {
        let backend = broken_grammar("a scene with {p3_elements} but no subject");
        let script = plan_script(
            "A yellow duck",
            EmotionCategory::Amusement,
            &library(),
            &backend,
            &PlanOptions::default(),
            0,
        )
        .unwrap();
        match write_prompts(&script, &backend, &NarrativeStructure::default(), 0) {
            Err(PlanningError::Validation { reason, raw }) => {
                assert!(reason.contains("p3"), "{reason}");
                assert!(raw.contains("but no subject"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn script_with_foreign_element_rejected() {
        let mut grammar = TemplateGrammar::default();
        grammar.tasks.retain(|t| t.task != TASK_PLAN_SCRIPT);
        grammar.tasks.push(TaskTemplate {
            task: TASK_PLAN_SCRIPT.into(),
            fields: vec![
                FieldTemplate { key: "subject".into(), alternatives: vec!["{subject}".into()] },
                FieldTemplate { key: "elements".into(), alternatives: vec!["unicorn".into()] },
                FieldTemplate { key: "theme".into(), alternatives: vec!["t".into()] },
                FieldTemplate { key: "event".into(), alternatives: vec!["e".into()] },
            ],
        });
        let mut backend = BackendConfig::template();
        backend.grammar = Some(grammar);
        let err = plan_script("A duck", EmotionCategory::Amusement, &library(), &backend, &PlanOptions::default(), 0)
            .unwrap_err();
        assert!(matches!(err, PlanningError::Validation { ref reason, .. } if reason.contains("unicorn")), "{err}");
    }

    #[test]
    fn over_long_theme_rejected() {
        let script = StoryScript {
            subject: "A duck".into(),
            emotion: EmotionCategory::Amusement,
            elements: vec!["Balloon".into()],
            theme: "word ".repeat(41),
            event: "e".into(),
        };
        assert!(check_script(script.clone(), "A duck", &library(), 40).unwrap_err().contains("theme"));
        let ok = check_script(StoryScript { theme: "short".into(), ..script }, "A duck", &library(), 40).unwrap();
        assert_eq!(ok.elements, ["balloon"]);
    }

    #[test]
    fn phrase_joining() {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(join_phrase(&v(&["a"])), "a");
        assert_eq!(join_phrase(&v(&["a", "b"])), "a and b");
        assert_eq!(join_phrase(&v(&["a", "b", "c"])), "a, b and c");
    }
}
