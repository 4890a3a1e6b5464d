//! Deterministic offline backend: fills per-task templates from the
//! structured fields embedded in the user prompt.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::Block;
use super::{BackendError, BackendKind, ChatRequest, ChatResponse};
use crate::seed::{derive_seed, rng_from_seed};

pub const TASK_PLAN_SCRIPT: &str = "plan_script";
pub const TASK_WRITE_PROMPTS: &str = "write_prompts";
pub const TASK_RANK_ELEMENTS: &str = "rank_elements";

/// One output key and its alternative phrasings. `{slot}` placeholders are
/// filled from the request's input block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldTemplate {
    pub key: String,
    pub alternatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub task: String,
    pub fields: Vec<FieldTemplate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateGrammar {
    pub tasks: Vec<TaskTemplate>,
}

fn field(key: &str, alternatives: &[&str]) -> FieldTemplate {
    FieldTemplate { key: key.into(), alternatives: alternatives.iter().map(|s| s.to_string()).collect() }
}

impl Default for TemplateGrammar {
    fn default() -> Self {
        Self {
            tasks: vec![
                TaskTemplate {
                    task: TASK_PLAN_SCRIPT.into(),
                    fields: vec![
                        field("subject", &["{subject}"]),
                        field("elements", &["{elements}"]),
                        field(
                            "theme",
                            &[
                                "a story of {emotion} told through {elements_phrase}",
                                "{emotion} found among {elements_phrase}",
                                "an encounter with {elements_phrase} that stirs {emotion}",
                            ],
                        ),
                        field(
                            "event",
                            &[
                                "the subject comes across {first_element} and follows where it leads",
                                "the subject spends a whole day surrounded by {elements_phrase}",
                                "the subject sets out on a short journey and meets {first_element}",
                            ],
                        ),
                    ],
                },
                TaskTemplate {
                    task: TASK_WRITE_PROMPTS.into(),
                    fields: vec![
                        field(
                            "p1",
                            &[
                                "{subject} stands beside {p1_elements} as the day begins, a hint of {emotion} in the air",
                                "{subject} first notices {p1_elements} nearby",
                            ],
                        ),
                        field(
                            "p2",
                            &[
                                "{subject} moves closer to {p2_elements}, the scene growing more vivid",
                                "{subject} explores around {p2_elements}",
                            ],
                        ),
                        field(
                            "p3",
                            &[
                                "{subject} is surrounded by {p3_elements} at the peak of the moment",
                                "{subject} reaches {p3_elements} as the feeling of {emotion} peaks",
                            ],
                        ),
                        field(
                            "p4",
                            &[
                                "{subject} rests near {p4_elements} as the day ends",
                                "{subject} looks back at {p4_elements} while the scene grows quiet",
                            ],
                        ),
                    ],
                },
                TaskTemplate {
                    task: TASK_RANK_ELEMENTS.into(),
                    fields: vec![field("ranking", &["{candidates}"])],
                },
            ],
        }
    }
}

impl TemplateGrammar {
    pub fn task(&self, tag: &str) -> Option<&TaskTemplate> {
        self.tasks.iter().find(|t| t.task == tag)
    }
}

/// Extracts the tag from a `[task:<tag>]` header in the system prompt.
pub fn task_tag(system_prompt: &str) -> Option<&str> {
    let start = system_prompt.find("[task:")? + "[task:".len();
    let end = system_prompt[start..].find(']')? + start;
    Some(system_prompt[start..end].trim())
}

fn fill(template: &str, inputs: &Block) -> Result<String, BackendError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| BackendError::Template(format!("unclosed slot in `{template}`")))?;
        let slot = &rest[open + 1..close];
        let value = inputs
            .get(slot)
            .ok_or_else(|| BackendError::Template(format!("input field `{slot}` missing for template `{template}`")))?;
        out.push_str(value);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders the task's output block. The result depends only on the
/// request, the grammar and `seed`.
pub fn template_complete(
    request: &ChatRequest,
    grammar: &TemplateGrammar,
    seed: u64,
) -> Result<ChatResponse, BackendError> {
    let started = Instant::now();
    request.validate()?;
    let tag = task_tag(&request.system_prompt)
        .ok_or_else(|| BackendError::UnknownTask("<no task header>".into()))?;
    let task = grammar.task(tag).ok_or_else(|| BackendError::UnknownTask(tag.to_string()))?;
    let inputs = Block::parse(&request.user_prompt)
        .map_err(|e| BackendError::Template(format!("request has no readable input block: {e}")))?;

    let mut output = Block::new();
    for f in &task.fields {
        if f.alternatives.is_empty() {
            return Err(BackendError::Template(format!("field `{}` has no alternatives", f.key)));
        }
        let mut rng = rng_from_seed(derive_seed([
            &seed.to_le_bytes()[..],
            tag.as_bytes(),
            f.key.as_bytes(),
            request.user_prompt.as_bytes(),
        ]));
        let pick = rng.random_range(0..f.alternatives.len());
        output.push(&f.key, fill(&f.alternatives[pick], &inputs)?);
    }
    Ok(ChatResponse {
        text: output.render(),
        backend_kind: BackendKind::Template,
        latency_ms: started.elapsed().as_millis() as u64,
        attempts: 1,
    })
}
