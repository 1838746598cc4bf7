//! Versioned report files and their SVG renderings.

use std::collections::BTreeMap;

use docmem::attack::AblationTable;
use docmem::audit::{CanaryScore, Histogram2d};
use docmem::defend::{ContextCell, DefenseEval, DefenseRow};
use docmem::svg::Svg;
use docmem::Error;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Inputs a report was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub manifest_sha256: String,
    pub corpus_seed: u64,
    pub seed: u64,
    /// SHA-256 of each input file, by role.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoresBody {
    pub k: usize,
    pub scores: Vec<CanaryScore>,
    /// Keyed by subset name: `all`, `pii`, `unique_pii`.
    pub histograms: BTreeMap<String, Histogram2d>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseBody {
    pub model: String,
    pub eval: DefenseEval,
    /// Models by defenses, cells ΔANLS points / |M|.
    pub by_model: Vec<DefenseRow>,
    /// Contexts, cells |M| / PII in M.
    pub by_context: Vec<ContextCell>,
    /// For inference-time defenses: the base checkpoint hash after evaluation.
    pub base_checkpoint_after: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "report", rename_all = "snake_case")]
pub enum Body {
    Audit(AblationTable),
    AttackTable(AblationTable),
    Scores(ScoresBody),
    Defense(Box<DefenseBody>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub body: Body,
}

impl Report {
    pub fn new(provenance: Provenance, body: Body) -> Self {
        Self { schema_version: SCHEMA_VERSION, provenance, body }
    }

    pub fn to_json(&self) -> Result<Vec<u8>, Error> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    /// Parses and checks a report file.
    pub fn from_json(bytes: &[u8]) -> Result<Self, Error> {
        let r: Report = serde_json::from_slice(bytes)?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Format { what: "report", msg: m });
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        match &self.body {
            Body::Audit(t) | Body::AttackTable(t) => {
                for row in &t.rows {
                    let s = &row.sets;
                    if !s.m.is_subset(&s.e) || s.m.intersection(&s.g).next().is_some() || s.m_tally.count != s.m.len() {
                        return bad(format!("inconsistent sets in row {}", row.label));
                    }
                }
            }
            Body::Scores(s) => {
                for (name, h) in &s.histograms {
                    let sum: usize = h.counts.iter().flatten().sum();
                    if sum != h.total {
                        return bad(format!("histogram {name} sums to {sum}, total says {}", h.total));
                    }
                }
            }
            Body::Defense(d) => {
                let n = d.eval.per_sample_baseline.len();
                if d.eval.per_sample_defended.len() != n {
                    return bad("per-sample ANLS lists differ in length".into());
                }
            }
        }
        Ok(())
    }

    /// The report's plot; `subset` picks a score histogram.
    pub fn to_svg(&self, subset: &str) -> Result<String, Error> {
        match &self.body {
            Body::Audit(t) | Body::AttackTable(t) => Ok(t.to_svg()),
            Body::Scores(s) => s
                .histograms
                .get(subset)
                .map(Histogram2d::to_svg)
                .ok_or_else(|| Error::Format { what: "report", msg: format!("no histogram `{subset}`") }),
            Body::Defense(d) => Ok(defense_svg(d)),
        }
    }
}

fn defense_svg(d: &DefenseBody) -> String {
    let row_h = 18.0;
    let rows = 2 + d.by_context.len();
    let mut svg = Svg::new(420.0, row_h * (rows as f64 + 2.0));
    let title = format!("{} / {}: dANLS {:+.1} pts", d.model, d.eval.defense.name(), 100.0 * d.eval.delta_anls);
    svg.text(10.0, row_h, &title, 13.0, "start");
    svg.text(10.0, 2.0 * row_h, "context", 12.0, "start");
    svg.text(260.0, 2.0 * row_h, "|M|", 12.0, "start");
    svg.text(330.0, 2.0 * row_h, "PII", 12.0, "start");
    for (i, c) in d.by_context.iter().enumerate() {
        let y = (i as f64 + 3.0) * row_h;
        svg.text(10.0, y, &c.context, 12.0, "start");
        svg.text(260.0, y, &c.m.to_string(), 12.0, "start");
        svg.text(330.0, y, &c.m_pii.to_string(), 12.0, "start");
    }
    svg.finish()
}
