//! Partial contexts: answer-removed and text-removed page images.

use std::collections::BTreeMap;

use crate::corpus::DocumentRecord;
use crate::error::{Error, Result};
use crate::raster::{BoundingBox, PageImage};
use crate::text::normalize;

/// Blanks every field whose normalized value equals the normalized answer.
///
/// Pixels outside the matched boxes are left untouched.
pub fn redact_answer(
    doc: &DocumentRecord,
    rendered: &PageImage,
    boxes: &BTreeMap<String, BoundingBox>,
    answer: &str,
) -> Result<PageImage> {
    let matched: Vec<&BoundingBox> = doc.occurrences(answer).map(|f| boxes.get(&f.name).unwrap_or(&f.bbox)).collect();
    if matched.is_empty() {
        return Err(Error::NoOccurrence(answer.to_string()));
    }
    let mut out = rendered.clone();
    for b in matched {
        out.blank_box(b);
    }
    Ok(out)
}

/// Blanks every text box (fields, titles, labels); decorations remain.
pub fn redact_all_text(doc: &DocumentRecord, rendered: &PageImage, boxes: &BTreeMap<String, BoundingBox>) -> PageImage {
    let mut out = rendered.clone();
    for f in &doc.fields {
        out.blank_box(boxes.get(&f.name).unwrap_or(&f.bbox));
    }
    for s in &doc.static_text {
        out.blank_box(&s.bbox);
    }
    out
}

/// Blanks the answers of all of the document's QA pairs.
pub fn redact_all_answers(
    doc: &DocumentRecord,
    rendered: &PageImage,
    boxes: &BTreeMap<String, BoundingBox>,
) -> Result<PageImage> {
    let mut out = rendered.clone();
    for qa in &doc.qa {
        out = redact_answer(doc, &out, boxes, &qa.answer)?;
    }
    Ok(out)
}

/// The document as it would look with every occurrence of `answer` removed.
pub fn without_answer(doc: &DocumentRecord, answer: &str) -> DocumentRecord {
    let key = normalize(answer);
    let mut out = doc.clone();
    out.fields.retain(|f| normalize(&f.value) != key);
    out
}

/// Exact check that `answer` is no longer visible in `redacted`.
///
/// Every field carrying the answer must have its box uniformly white, and no
/// static text may spell it.
pub fn verify_redaction(doc: &DocumentRecord, redacted: &PageImage, answer: &str) -> bool {
    let key = normalize(answer);
    if doc.static_text.iter().any(|s| normalize(&s.text) == key) {
        return false;
    }
    doc.occurrences(answer).all(|f| f.bbox.fits(redacted.width(), redacted.height()) && redacted.box_is_white(&f.bbox))
}
