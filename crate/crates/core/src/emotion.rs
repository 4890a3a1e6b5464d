//! The closed eight-category emotion label set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn opposite(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

/// One of the eight discrete emotion categories.
///
/// Declaration order is the canonical iteration order used everywhere
/// (manifests, library files, reports).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionCategory {
    Amusement,
    Awe,
    Contentment,
    Excitement,
    Anger,
    Disgust,
    Fear,
    Sadness,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown emotion label `{0}` (expected one of amusement, awe, contentment, excitement, anger, disgust, fear, sadness)")]
pub struct UnknownEmotion(pub String);

impl EmotionCategory {
    pub const ALL: [EmotionCategory; 8] = [
        EmotionCategory::Amusement,
        EmotionCategory::Awe,
        EmotionCategory::Contentment,
        EmotionCategory::Excitement,
        EmotionCategory::Anger,
        EmotionCategory::Disgust,
        EmotionCategory::Fear,
        EmotionCategory::Sadness,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EmotionCategory::Amusement => "amusement",
            EmotionCategory::Awe => "awe",
            EmotionCategory::Contentment => "contentment",
            EmotionCategory::Excitement => "excitement",
            EmotionCategory::Anger => "anger",
            EmotionCategory::Disgust => "disgust",
            EmotionCategory::Fear => "fear",
            EmotionCategory::Sadness => "sadness",
        }
    }

    pub fn polarity(self) -> Polarity {
        match self {
            EmotionCategory::Amusement
            | EmotionCategory::Awe
            | EmotionCategory::Contentment
            | EmotionCategory::Excitement => Polarity::Positive,
            _ => Polarity::Negative,
        }
    }
}

impl fmt::Display for EmotionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EmotionCategory {
    type Err = UnknownEmotion;

    /// Case-insensitive, surrounding whitespace ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim().to_ascii_lowercase();
        EmotionCategory::ALL
            .into_iter()
            .find(|e| e.label() == wanted)
            .ok_or_else(|| UnknownEmotion(s.to_string()))
    }
}
