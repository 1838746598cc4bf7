//! Canonical answer normalization.
//!
//! One equality is used everywhere answers are compared: duplication
//! counting, redaction matching, extraction testing and ANLS gold matching.

/// Trim, casefold and collapse internal whitespace runs to a single space.
pub fn normalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// `normalize(a) == normalize(b)` without allocating twice for the common case.
pub fn same_answer(a: &str, b: &str) -> bool {
    normalize(a) == normalize(b)
}
