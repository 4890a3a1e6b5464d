//! Word-level text helpers shared by prompt validation and tokenization.

/// Lowercased alphanumeric words; everything else separates words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Start index of the first occurrence of `needle` as a contiguous word run.
pub fn find_phrase(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Whole-word, case-insensitive phrase containment.
pub fn mentions(text: &str, phrase: &str) -> bool {
    find_phrase(&words(text), &words(phrase)).is_some()
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
