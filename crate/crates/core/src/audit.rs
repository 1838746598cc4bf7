//! Extraction tests, E/G/M attribution, split plans and the extractable
//! memorization / simplicity estimators.

use std::collections::BTreeSet;

use num_rational::Ratio;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CanarySet, CorpusManifest, SampleRef, Split};
use crate::error::{Error, Result};
use crate::model::{Model, TrainingRecord};
use crate::raster::PageImage;
use crate::scalar::Scalar;
use crate::svg;
use crate::text::same_answer;
use crate::util::derive_seed;

pub type CanaryId = usize;

/// Anything that answers a question about a page.
pub trait Answerer: Sync {
    fn answer(&self, image: &PageImage, question: &str) -> String;
}

impl<S: Scalar> Answerer for Model<S> {
    /// Characters outside the vocabulary are dropped from the question.
    fn answer(&self, image: &PageImage, question: &str) -> String {
        let q: String = question.chars().filter(|&c| self.net.vocab.can_encode(&c.to_string())).collect();
        self.predict(image, &q).unwrap_or_default()
    }
}

impl<F: Fn(&PageImage, &str) -> String + Sync> Answerer for F {
    fn answer(&self, image: &PageImage, question: &str) -> String {
        self(image, question)
    }
}

/// A partial context for one canary, at canonical resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct CanaryContext {
    pub canary: CanaryId,
    pub image: PageImage,
    pub question: String,
    /// Strings whose emission counts as extraction (normally the canary
    /// answer alone).
    pub targets: Vec<String>,
}

/// Extraction indicator: the prediction equals a target after normalization.
pub fn is_extractable(model: &dyn Answerer, ctx: &CanaryContext) -> bool {
    let pred = model.answer(&ctx.image, &ctx.question);
    ctx.targets.iter().any(|t| same_answer(&pred, t))
}

/// Extraction indicator for every context, in order.
pub fn extraction_vector(model: &dyn Answerer, contexts: &[CanaryContext]) -> Vec<bool> {
    contexts.par_iter().map(|c| is_extractable(model, c)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub count: usize,
    pub pii: usize,
    /// PII canaries with duplication 1.
    pub unique_pii: usize,
}

impl Tally {
    pub fn of(ids: &BTreeSet<CanaryId>, canaries: &CanarySet) -> Self {
        let mut t = Tally::default();
        for &id in ids {
            let e = &canaries.entries[id];
            t.count += 1;
            if e.pii.is_pii() {
                t.pii += 1;
                if e.duplication == 1 {
                    t.unique_pii += 1;
                }
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetsEgm {
    pub e: BTreeSet<CanaryId>,
    pub g: BTreeSet<CanaryId>,
    pub m: BTreeSet<CanaryId>,
    pub e_tally: Tally,
    pub g_tally: Tally,
    pub m_tally: Tally,
}

impl SetsEgm {
    pub fn from_sets(e: BTreeSet<CanaryId>, g: BTreeSet<CanaryId>, canaries: &CanarySet) -> Self {
        let m: BTreeSet<CanaryId> = e.difference(&g).copied().collect();
        Self {
            e_tally: Tally::of(&e, canaries),
            g_tally: Tally::of(&g, canaries),
            m_tally: Tally::of(&m, canaries),
            e,
            g,
            m,
        }
    }

    /// Sets from per-context extraction indicators of f and f_G.
    pub fn from_extractions(contexts: &[CanaryContext], by_f: &[bool], by_g: &[bool], canaries: &CanarySet) -> Self {
        let pick = |hits: &[bool]| contexts.iter().zip(hits).filter(|(_, &h)| h).map(|(c, _)| c.canary).collect();
        Self::from_sets(pick(by_f), pick(by_g), canaries)
    }
}

/// Rejects a generalization baseline whose training record shows any
/// canary, or a different corpus.
pub fn check_baseline_record(record: &TrainingRecord, manifest_hash: &str, canaries: &CanarySet) -> Result<()> {
    if record.manifest_hash != manifest_hash {
        return Err(Error::ManifestMismatch("baseline was trained on a different corpus".into()));
    }
    if !record.included_canaries.is_empty() {
        return Err(Error::ManifestMismatch(format!(
            "baseline training included {} canaries",
            record.included_canaries.len()
        )));
    }
    let excluded: BTreeSet<_> = record.excluded_canaries.iter().collect();
    if let Some(id) = (0..canaries.len()).find(|i| !excluded.contains(i)) {
        return Err(Error::ManifestMismatch(format!("baseline record does not exclude canary {id}")));
    }
    Ok(())
}

/// E, G and M = E − G for one set of contexts.
pub fn compute_sets(
    f: &dyn Answerer,
    f_g: &dyn Answerer,
    f_g_record: &TrainingRecord,
    manifest_hash: &str,
    canaries: &CanarySet,
    contexts: &[CanaryContext],
) -> Result<SetsEgm> {
    check_baseline_record(f_g_record, manifest_hash, canaries)?;
    let by_f = extraction_vector(f, contexts);
    let by_g = extraction_vector(f_g, contexts);
    Ok(SetsEgm::from_extractions(contexts, &by_f, &by_g, canaries))
}

/// Canary membership over K training splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    /// `membership[canary][split]`.
    pub membership: Vec<Vec<bool>>,
}

impl SplitPlan {
    pub fn in_count(&self, canary: CanaryId) -> usize {
        self.membership[canary].iter().filter(|&&b| b).count()
    }

    /// Canaries trained on in split `k`.
    pub fn included(&self, split: usize) -> Vec<CanaryId> {
        (0..self.membership.len()).filter(|&c| self.membership[c][split]).collect()
    }

    pub fn excluded(&self, split: usize) -> Vec<CanaryId> {
        (0..self.membership.len()).filter(|&c| !self.membership[c][split]).collect()
    }

    /// Training samples of split `k`: the whole non-canary core plus the
    /// canaries assigned to the split.
    pub fn training_samples(&self, split: usize, manifest: &CorpusManifest, canaries: &CanarySet) -> Vec<SampleRef> {
        let out: BTreeSet<SampleRef> = self.excluded(split).iter().map(|&c| canaries.entries[c].sample()).collect();
        manifest.samples(Split::Train).into_iter().filter(|s| !out.contains(s)).collect()
    }

    /// Checks a split model's training record against the plan.
    pub fn check_record(&self, split: usize, record: &TrainingRecord, manifest_hash: &str) -> Result<()> {
        if record.manifest_hash != manifest_hash {
            return Err(Error::ManifestMismatch(format!("split {split} was trained on a different corpus")));
        }
        if record.split != Some(split) {
            return Err(Error::ManifestMismatch(format!(
                "checkpoint is for split {:?}, expected {split}",
                record.split
            )));
        }
        if record.included_canaries != self.included(split) || record.excluded_canaries != self.excluded(split) {
            return Err(Error::ManifestMismatch(format!("split {split} canary membership differs from the plan")));
        }
        Ok(())
    }
}

/// Each canary independently joins a uniformly random K/2-subset of splits.
pub fn sample_splits(canary_count: usize, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(Error::BadK(k));
    }
    let membership = (0..canary_count)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
            let mut row = vec![false; k];
            for i in sample(&mut rng, k, k / 2).iter() {
                row[i] = true;
            }
            row
        })
        .collect();
    Ok(SplitPlan { k, seed, membership })
}

/// Per-canary estimator values, kept as exact fractions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanaryScore {
    pub canary: CanaryId,
    pub in_x: Ratio<i64>,
    pub out_x: Ratio<i64>,
    pub m_e: Ratio<i64>,
    pub s_e: Ratio<i64>,
}

impl CanaryScore {
    pub fn from_counts(canary: CanaryId, in_hits: usize, in_total: usize, out_hits: usize, out_total: usize) -> Self {
        let in_x = Ratio::new(in_hits as i64, in_total.max(1) as i64);
        let out_x = Ratio::new(out_hits as i64, out_total.max(1) as i64);
        Self { canary, in_x, out_x, m_e: in_x - out_x, s_e: in_x + out_x }
    }

    pub fn m_e_f64(&self) -> f64 {
        ratio_f64(self.m_e)
    }

    pub fn s_e_f64(&self) -> f64 {
        ratio_f64(self.s_e)
    }

    pub fn out_x_f64(&self) -> f64 {
        ratio_f64(self.out_x)
    }
}

pub fn ratio_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Scores from `extracted[split][canary]`.
pub fn scores_from_extractions(plan: &SplitPlan, extracted: &[Vec<bool>]) -> Result<Vec<CanaryScore>> {
    if extracted.len() != plan.k {
        return Err(Error::ManifestMismatch(format!("{} split results for K = {}", extracted.len(), plan.k)));
    }
    let n = plan.membership.len();
    if extracted.iter().any(|r| r.len() != n) {
        return Err(Error::ManifestMismatch("split results do not cover every canary".into()));
    }
    Ok((0..n)
        .map(|c| {
            let (mut ih, mut it, mut oh, mut ot) = (0, 0, 0, 0);
            for (k, row) in extracted.iter().enumerate() {
                if plan.membership[c][k] {
                    it += 1;
                    ih += usize::from(row[c]);
                } else {
                    ot += 1;
                    oh += usize::from(row[c]);
                }
            }
            CanaryScore::from_counts(c, ih, it, oh, ot)
        })
        .collect())
}

/// Runs every split model on the baseline contexts and aggregates scores.
/// `contexts` must hold one context per canary, indexed by canary id.
pub fn estimate_scores(
    models: &[(&dyn Answerer, &TrainingRecord)],
    plan: &SplitPlan,
    manifest_hash: &str,
    contexts: &[CanaryContext],
) -> Result<Vec<CanaryScore>> {
    if models.len() != plan.k {
        return Err(Error::ManifestMismatch(format!("{} checkpoints for K = {}", models.len(), plan.k)));
    }
    if contexts.len() != plan.membership.len() || contexts.iter().enumerate().any(|(i, c)| c.canary != i) {
        return Err(Error::ManifestMismatch("contexts must list every planned canary in id order".into()));
    }
    for (k, (_, record)) in models.iter().enumerate() {
        plan.check_record(k, record, manifest_hash)?;
    }
    let extracted: Vec<Vec<bool>> = models.iter().map(|(m, _)| extraction_vector(*m, contexts)).collect();
    scores_from_extractions(plan, &extracted)
}

pub const M_BINS: usize = 11;
pub const S_BINS: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2d {
    pub subset: String,
    /// Bin edges; bins are centred on multiples of the bin width.
    pub m_edges: Vec<f64>,
    pub s_edges: Vec<f64>,
    /// `counts[m_bin][s_bin]`.
    pub counts: Vec<Vec<usize>>,
    pub total: usize,
    /// Canaries with negative m_e, counted in the zero bin.
    pub clamped_negative: usize,
}

fn centred_edges(bins: usize, max: f64) -> Vec<f64> {
    let w = max / (bins - 1) as f64;
    (0..=bins).map(|i| (i as f64 - 0.5) * w).collect()
}

fn centred_bin(v: f64, bins: usize, max: f64) -> usize {
    let w = max / (bins - 1) as f64;
    ((v / w).round().max(0.0) as usize).min(bins - 1)
}

/// Joint histogram of (m_e, s_e) over `subset` (all scores when `None`).
pub fn histogram2d(
    scores: &[CanaryScore],
    subset: Option<&BTreeSet<CanaryId>>,
    label: &str,
    m_bins: usize,
    s_bins: usize,
) -> Histogram2d {
    let (m_bins, s_bins) = (m_bins.max(2), s_bins.max(2));
    let mut counts = vec![vec![0; s_bins]; m_bins];
    let mut total = 0;
    let mut clamped_negative = 0;
    for s in scores.iter().filter(|s| subset.is_none_or(|set| set.contains(&s.canary))) {
        let m = s.m_e_f64();
        if m < 0.0 {
            clamped_negative += 1;
        }
        counts[centred_bin(m, m_bins, 1.0)][centred_bin(s.s_e_f64(), s_bins, 2.0)] += 1;
        total += 1;
    }
    Histogram2d {
        subset: label.to_string(),
        m_edges: centred_edges(m_bins, 1.0),
        s_edges: centred_edges(s_bins, 2.0),
        counts,
        total,
        clamped_negative,
    }
}

impl Histogram2d {
    /// Heatmap with m_e on the vertical axis and s_e on the horizontal one.
    pub fn to_svg(&self) -> String {
        let cell = 18.0;
        let (mx, sx) = (self.counts.len(), self.counts[0].len());
        let (left, top) = (50.0, 30.0);
        let mut doc = svg::Svg::new(left + sx as f64 * cell + 20.0, top + mx as f64 * cell + 40.0);
        doc.text(left, 18.0, &format!("{} (n = {})", self.subset, self.total), 12.0, "start");
        let peak = self.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
        for (mi, row) in self.counts.iter().enumerate() {
            let y = top + (mx - 1 - mi) as f64 * cell;
            for (si, &c) in row.iter().enumerate() {
                let shade = 255 - (c as f64 / peak * 200.0).round() as u8;
                doc.rect(left + si as f64 * cell, y, cell, cell, &format!("rgb({shade},{shade},255)"));
                if c > 0 {
                    doc.text(left + (si as f64 + 0.5) * cell, y + 12.0, &c.to_string(), 9.0, "middle");
                }
            }
        }
        doc.text(left + sx as f64 * cell / 2.0, top + mx as f64 * cell + 25.0, "simplicity s_e", 11.0, "middle");
        doc.text(8.0, top + mx as f64 * cell / 2.0, "m_e", 11.0, "start");
        doc.finish()
    }
}
