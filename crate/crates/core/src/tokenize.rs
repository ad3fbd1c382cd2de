//! Budgeting tokenizer used for chunk sizing.
//!
//! A token is either a maximal run of word characters (Unicode alphanumerics
//! and `_`) or a single character that is neither a word character nor
//! whitespace. The embedding model's own tokenizer lives behind the wire and is
//! never consulted here, so counts are stable across providers and platforms.

use std::ops::Range;

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Byte spans of every token in `text`, in order.
pub fn token_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_word(c) {
            if word_start.is_none() {
                word_start = Some(i);
            }
            continue;
        }
        if let Some(start) = word_start.take() {
            spans.push(start..i);
        }
        if !c.is_whitespace() {
            spans.push(i..i + c.len_utf8());
        }
    }
    if let Some(start) = word_start {
        spans.push(start..text.len());
    }
    spans
}

pub fn count_tokens(text: &str) -> usize {
    token_spans(text).len()
}
