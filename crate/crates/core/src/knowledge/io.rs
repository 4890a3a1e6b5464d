use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotationRecord, EmotionFactorTree, KnowledgeError, TreeLibrary, VisualElement, LIBRARY_VERSION};
use crate::emotion::EmotionCategory;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryFile {
    version: String,
    trees: Vec<TreeEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeEntry {
    emotion: String,
    elements: Vec<VisualElement>,
}

fn parse_error(context: impl Into<String>, err: serde_json::Error) -> KnowledgeError {
    KnowledgeError::Parse {
        context: context.into(),
        message: format!("{} (line {}, column {})", err, err.line(), err.column()),
    }
}

/// Parses a tree library document. `origin` names the source in errors.
pub fn parse_tree_library(text: &str, origin: &str) -> Result<TreeLibrary, KnowledgeError> {
    let file: LibraryFile = serde_json::from_str(text).map_err(|e| parse_error(origin, e))?;
    if file.version != LIBRARY_VERSION {
        return Err(KnowledgeError::Parse {
            context: format!("{origin}: field `version`"),
            message: format!("unsupported version `{}` (expected `{LIBRARY_VERSION}`)", file.version),
        });
    }
    let mut trees = Vec::with_capacity(file.trees.len());
    let mut seen = Vec::new();
    for (i, entry) in file.trees.into_iter().enumerate() {
        let emotion: EmotionCategory = entry.emotion.parse().map_err(|e| KnowledgeError::Parse {
            context: format!("{origin}: trees[{i}].emotion"),
            message: format!("{e}"),
        })?;
        if seen.contains(&emotion) {
            return Err(KnowledgeError::Parse {
                context: format!("{origin}: trees[{i}].emotion"),
                message: format!("emotion `{emotion}` listed twice"),
            });
        }
        seen.push(emotion);
        trees.push(EmotionFactorTree::new(emotion, entry.elements)?);
    }
    let mut library = TreeLibrary::from_trees(trees);
    library.version = LIBRARY_VERSION.to_string();
    Ok(library)
}

pub fn load_tree_library(path: impl AsRef<Path>) -> Result<TreeLibrary, KnowledgeError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_tree_library(&text, &path.display().to_string())
}

/// Writes the library as pretty JSON, trees in canonical emotion order.
pub fn save_tree_library(library: &TreeLibrary, path: impl AsRef<Path>) -> Result<(), KnowledgeError> {
    let file = LibraryFile {
        version: library.version.clone(),
        trees: library
            .trees()
            .map(|t| TreeEntry { emotion: t.root.label().to_string(), elements: t.leaves().to_vec() })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("library serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads newline-delimited annotation records; blank lines are skipped.
pub fn load_annotation_records(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>, KnowledgeError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str(line).map_err(|e| parse_error(format!("{}:{}", path.display(), n + 1), e))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::ElementGroup;

    #[test]
    fn round_trip() {
        let lib = TreeLibrary::from_trees([
            EmotionFactorTree::new(
                EmotionCategory::Fear,
                vec![VisualElement::new("bat", 3, ElementGroup::Object), VisualElement::new("graveyard", 5, ElementGroup::Scene)],
            )
            .unwrap(),
            EmotionFactorTree::new(EmotionCategory::Awe, vec![VisualElement::new("climbing", 2, ElementGroup::Action)])
                .unwrap(),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trees.json");
        save_tree_library(&lib, &path).unwrap();
        assert_eq!(load_tree_library(&path).unwrap(), lib);
    }

    #[test]
    fn duplicate_leaf_rejected() {
        let text = r#"{"version":"1","trees":[{"emotion":"fear","elements":[
            {"name":"bat","frequency":3,"group":"object"},
            {"name":"bat","frequency":1,"group":"object"}]}]}"#;
        let err = parse_tree_library(text, "t.json").unwrap_err();
        assert!(matches!(err, KnowledgeError::DuplicateElement { emotion: EmotionCategory::Fear, .. }), "{err}");
    }

    #[test]
    fn missing_version_reports_field() {
        let err = parse_tree_library(r#"{"trees":[]}"#, "t.json").unwrap_err().to_string();
        assert!(err.contains("version") && err.contains("line"), "{err}");
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = parse_tree_library("{\"version\": \"1\",\n \"trees\": [ }", "t.json").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn missing_emotion_loads_with_warning() {
        let text = r#"{"version":"1","trees":[{"emotion":"fear","elements":[{"name":"bat","frequency":3,"group":"object"}]}]}"#;
        let lib = parse_tree_library(text, "t.json").unwrap();
        assert!(lib.warnings().iter().any(|w| w.contains("disgust")));
        let got = crate::knowledge::query_elements(
            &lib,
            EmotionCategory::Disgust,
            "x",
            3,
            &crate::knowledge::FrequencyScorer,
            0,
        )
        .unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn unknown_emotion_in_file() {
        let text = r#"{"version":"1","trees":[{"emotion":"joy","elements":[]}]}"#;
        let err = parse_tree_library(text, "t.json").unwrap_err().to_string();
        assert!(err.contains("trees[0].emotion"), "{err}");
    }

    #[test]
    fn annotation_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        fs::write(
            &path,
            "{\"emotion\":\"fear\",\"elements\":[{\"name\":\"bat\",\"group\":\"object\"}]}\n\n{\"emotion\":\"awe\",\"elements\":[]}\n",
        )
        .unwrap();
        let records = load_annotation_records(&path).unwrap();
        assert_eq!(records.len(), 2);
        fs::write(&path, "{\"emotion\":\"fear\"}\n").unwrap();
        let err = load_annotation_records(&path).unwrap_err().to_string();
        assert!(err.contains(":1"), "{err}");
    }
}
