//! Edit distance and ANLS.

use crate::error::{Error, Result};
use crate::text::normalize;

/// Default ANLS threshold.
pub const ANLS_TAU: f64 = 0.5;

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized Levenshtein similarity of the normalized strings.
pub fn nls(pred: &str, gold: &str) -> f64 {
    let p = normalize(pred);
    let g = normalize(gold);
    let longest = p.chars().count().max(g.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&p, &g) as f64 / longest as f64
}

/// Best similarity over the golds, zeroed below `tau`.
pub fn anls<S: AsRef<str>>(pred: &str, golds: &[S], tau: f64) -> Result<f64> {
    let best = golds
        .iter()
        .map(|g| nls(pred, g.as_ref()))
        .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))))
        .ok_or(Error::EmptyGolds)?;
    Ok(if best >= tau { best } else { 0.0 })
}

/// Mean per-question ANLS. An empty dataset scores 0.
pub fn dataset_anls<P, G, S>(items: &[(P, G)], tau: f64) -> Result<f64>
where
    P: AsRef<str>,
    G: AsRef<[S]>,
    S: AsRef<str>,
{
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p, g) in items {
        sum += anls(p.as_ref(), g.as_ref(), tau)?;
    }
    Ok(sum / items.len() as f64)
}
