//! Countermeasures against extraction: extraction blocking (training-set
//! augmentation with abstention targets), random question affixes, and
//! inference-time paraphrasing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{build_contexts, paraphrase, AblationRow, AttackKind};
use crate::audit::{check_baseline_record, extraction_vector, Answerer, CanaryContext, SetsEgm};
use crate::corpus::{template_of_question, CanarySet, CorpusManifest, SampleRef};
use crate::data::render_pages;
use crate::error::{Error, Result};
use crate::metrics::{anls, ANLS_TAU};
use crate::model::{Encoded, Network, TrainingRecord, ABSTAIN_TEXT};
use crate::raster::{downsample, render, PageImage, CANONICAL_RES};
use crate::redact::{redact_answer, verify_redaction};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    None,
    /// Extraction blocking; needs a model retrained on [`eb_augment`] output.
    Eb,
    /// Random 6-digit prefix on every question.
    Pr,
    /// Random 6-digit suffix on every question.
    Ar,
    /// Inference-time paraphrasing.
    Itp,
}

impl Defense {
    pub const ALL: [Defense; 5] = [Defense::None, Defense::Eb, Defense::Pr, Defense::Ar, Defense::Itp];

    pub fn name(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Eb => "eb",
            Defense::Pr => "pr",
            Defense::Ar => "ar",
            Defense::Itp => "itp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s)
    }

    /// True for defenses that only rewrite queries of an unchanged model.
    pub fn is_inference_time(self) -> bool {
        matches!(self, Defense::Pr | Defense::Ar | Defense::Itp)
    }

    /// The question actually sent to the model for query number `index`.
    pub fn rewrite(self, question: &str, seed: u64, index: usize) -> Result<String> {
        let s = derive_seed(seed, index as u64);
        Ok(match self {
            Defense::None | Defense::Eb => question.to_string(),
            Defense::Pr => pr_ar(question, AffixMode::Prepend, s),
            Defense::Ar => pr_ar(question, AffixMode::Append, s),
            Defense::Itp => itp(question, s)?,
        })
    }
}

/// One training sample of the augmented set; `abstain` marks the added
/// (answer-removed page, question, ABSTAIN) copy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedSample {
    pub sample: SampleRef,
    pub abstain: bool,
}

/// The page of `sample` with its answer blanked, checked by exact
/// verification.
pub fn abstain_image(manifest: &CorpusManifest, sample: &SampleRef) -> Result<PageImage> {
    let doc = manifest
        .doc(&sample.doc_id)
        .ok_or_else(|| Error::ManifestMismatch(format!("unknown document {}", sample.doc_id)))?;
    let qa = manifest.qa(sample).ok_or_else(|| Error::ManifestMismatch(format!("unknown sample {sample:?}")))?;
    let page = render(doc, CANONICAL_RES)?;
    let image = redact_answer(doc, &page.image, &page.boxes, &qa.answer)?;
    if !verify_redaction(doc, &image, &qa.answer) {
        return Err(Error::format("augmentation", format!("answer of {sample:?} still visible")));
    }
    Ok(image)
}

/// Every sample plus its abstention copy, shuffled by `seed`.
pub fn eb_augment(manifest: &CorpusManifest, samples: &[SampleRef], seed: u64) -> Result<Vec<AugmentedSample>> {
    samples.par_iter().try_for_each(|s| abstain_image(manifest, s).map(drop))?;
    let mut out: Vec<AugmentedSample> = samples
        .iter()
        .flat_map(|s| [false, true].map(|abstain| AugmentedSample { sample: s.clone(), abstain }))
        .collect();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// Teacher-forcing inputs for an augmented set, in order.
pub fn encode_augmented(net: &Network, manifest: &CorpusManifest, samples: &[AugmentedSample]) -> Result<Vec<Encoded>> {
    let res = net.config.input_res;
    let refs: Vec<SampleRef> = samples.iter().map(|s| s.sample.clone()).collect();
    let pages = render_pages(manifest, &refs)?;
    samples
        .par_iter()
        .map(|s| {
            let qa = manifest
                .qa(&s.sample)
                .ok_or_else(|| Error::ManifestMismatch(format!("unknown sample {:?}", s.sample)))?;
            if s.abstain {
                let img = downsample(&abstain_image(manifest, &s.sample)?, res)?;
                net.encode_example(&img, &qa.question, Some(ABSTAIN_TEXT))
            } else {
                let img = downsample(&pages[&s.sample.doc_id], res)?;
                net.encode_example(&img, &qa.question, Some(&qa.answer))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffixMode {
    Prepend,
    Append,
}

/// Joins a seeded 6-digit string to the question with one space.
pub fn pr_ar(question: &str, mode: AffixMode, seed: u64) -> String {
    let affix = format!("{:06}", ChaCha8Rng::seed_from_u64(seed).gen_range(0..1_000_000u32));
    match mode {
        AffixMode::Prepend => format!("{affix} {question}"),
        AffixMode::Append => format!("{question} {affix}"),
    }
}

/// Removes an affix added by [`pr_ar`].
pub fn strip_affix(question: &str, mode: AffixMode) -> Option<&str> {
    let digits = |s: &str| s.len() == 6 && s.bytes().all(|b| b.is_ascii_digit());
    match mode {
        AffixMode::Prepend => question.split_once(' ').filter(|(a, _)| digits(a)).map(|(_, q)| q),
        AffixMode::Append => question.rsplit_once(' ').filter(|(_, a)| digits(a)).map(|(q, _)| q),
    }
}

/// A different surface form of the question's template, chosen by `seed`.
pub fn itp(question: &str, seed: u64) -> Result<String> {
    let (template, _) = template_of_question(question).ok_or_else(|| Error::UnknownTemplate(question.to_string()))?;
    let variant = ChaCha8Rng::seed_from_u64(seed).gen_range(0..usize::MAX);
    paraphrase(question, template.key, variant)
}

/// Utility and leakage of a deployed model under one defense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseEval {
    pub defense: Defense,
    pub seed: u64,
    pub anls_baseline: f64,
    pub anls_defended: f64,
    /// `anls_defended - anls_baseline`, on the 0..1 scale.
    pub delta_anls: f64,
    /// Per test question, in test order.
    pub per_sample_baseline: Vec<f64>,
    pub per_sample_defended: Vec<f64>,
    pub contexts: Vec<AblationRow>,
}

impl DefenseEval {
    pub fn context(&self, label: &str) -> Option<&AblationRow> {
        self.contexts.iter().find(|r| r.label == label)
    }
}

/// Per-question ANLS of `model` on `samples`, with questions passed
/// through `defense`.
pub fn test_anls(
    model: &dyn Answerer,
    manifest: &CorpusManifest,
    samples: &[SampleRef],
    defense: Defense,
    seed: u64,
) -> Result<Vec<f64>> {
    let pages = render_pages(manifest, samples)?;
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let qa = manifest.qa(s).ok_or_else(|| Error::ManifestMismatch(format!("unknown sample {s:?}")))?;
            let q = defense.rewrite(&qa.question, seed, i)?;
            anls(&model.answer(&pages[&s.doc_id], &q), &[&qa.answer], ANLS_TAU)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Everything needed to evaluate defenses of one model configuration.
pub struct DefenseSetup<'a> {
    /// The undefended model, for the utility reference.
    pub base: &'a dyn Answerer,
    pub f_g: &'a dyn Answerer,
    pub f_g_record: &'a TrainingRecord,
    pub manifest_hash: &'a str,
    pub manifest: &'a CorpusManifest,
    pub canaries: &'a CanarySet,
    pub test: &'a [SampleRef],
    pub seed: u64,
}

/// ANLS change against the base model and E/G/M per attack context.
///
/// `defended` is the EB-retrained model for [`Defense::Eb`] and the base
/// model otherwise; inference-time defenses rewrite every query to both the
/// defended model and the baseline.
pub fn evaluate_defense(
    setup: &DefenseSetup<'_>,
    defense: Defense,
    defended: &dyn Answerer,
    kinds: &[AttackKind],
) -> Result<DefenseEval> {
    check_baseline_record(setup.f_g_record, setup.manifest_hash, setup.canaries)?;
    let per_sample_baseline = test_anls(setup.base, setup.manifest, setup.test, Defense::None, setup.seed)?;
    let per_sample_defended = test_anls(defended, setup.manifest, setup.test, defense, setup.seed)?;
    let (anls_baseline, anls_defended) = (mean(&per_sample_baseline), mean(&per_sample_defended));
    let mut contexts = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let ctxs: Vec<CanaryContext> = build_contexts(setup.manifest, setup.canaries, kind, setup.seed)?
            .into_iter()
            .enumerate()
            .map(|(i, mut c)| {
                c.question = defense.rewrite(&c.question, derive_seed(setup.seed, 0xdef), i)?;
                Ok(c)
            })
            .collect::<Result<_>>()?;
        let by_f = extraction_vector(defended, &ctxs);
        let by_g = extraction_vector(setup.f_g, &ctxs);
        contexts.push(AblationRow {
            label: kind.label(),
            kind: kind.clone(),
            emitted: by_f.iter().filter(|&&h| h).count(),
            sets: SetsEgm::from_extractions(&ctxs, &by_f, &by_g, setup.canaries),
        });
    }
    Ok(DefenseEval {
        defense,
        seed: setup.seed,
        anls_baseline,
        anls_defended,
        delta_anls: anls_defended - anls_baseline,
        per_sample_baseline,
        per_sample_defended,
        contexts,
    })
}

/// One cell of the defense-by-model table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseCell {
    pub defense: Defense,
    /// ΔANLS in ANLS points (0..100 scale).
    pub delta_anls_points: f64,
    /// |M| under the baseline context.
    pub m: usize,
}

/// One cell of the per-context table of a single defense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextCell {
    pub context: String,
    pub m: usize,
    pub m_pii: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub model: String,
    pub cells: Vec<DefenseCell>,
}

/// Rows of model configurations by columns of defenses.
pub fn defense_table(rows: &[(String, Vec<DefenseEval>)]) -> Vec<DefenseRow> {
    rows.iter()
        .map(|(model, evals)| DefenseRow {
            model: model.clone(),
            cells: evals
                .iter()
                .map(|e| DefenseCell {
                    defense: e.defense,
                    delta_anls_points: 100.0 * e.delta_anls,
                    m: e.context("baseline").map_or(0, |r| r.sets.m_tally.count),
                })
                .collect(),
        })
        .collect()
}

/// |M| and its PII part for every evaluated context.
pub fn context_table(eval: &DefenseEval) -> Vec<ContextCell> {
    eval.contexts
        .iter()
        .map(|r| ContextCell { context: r.label.clone(), m: r.sets.m_tally.count, m_pii: r.sets.m_tally.pii })
        .collect()
}
