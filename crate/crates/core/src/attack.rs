//! Context-ablation attacks: each kind builds a partial context per canary
//! and the E/G/M measurement is rerun on it.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{check_baseline_record, extraction_vector, Answerer, CanaryContext, SetsEgm};
use crate::corpus::catalog::FIELD_TYPES;
use crate::corpus::{field_type, CanarySet, CorpusManifest, DocumentRecord, Split};
use crate::error::{Error, Result};
use crate::model::TrainingRecord;
use crate::raster::{perturb, render, PageImage, Perturbation, CANONICAL_RES};
use crate::redact::{redact_all_answers, redact_all_text, redact_answer, verify_redaction};
use crate::svg;
use crate::text::normalize;
use crate::util::{derive_seed, seed_for};

pub const MAX_PARTNER_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantLevel {
    Black,
    White,
    /// Mean intensity of the canary's redacted page.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    Baseline,
    NoText,
    Paraphrase { variant: usize },
    Perturbed { perturbation: Perturbation },
    ShuffleQuestion,
    ImageOnlyProbe,
    ConstantImage { level: ConstantLevel },
}

impl AttackKind {
    pub fn label(&self) -> String {
        match self {
            AttackKind::Baseline => "baseline".into(),
            AttackKind::NoText => "no-text".into(),
            AttackKind::Paraphrase { variant } => format!("paraphrase-{variant}"),
            AttackKind::Perturbed { perturbation } => perturbation.label(),
            AttackKind::ShuffleQuestion => "shuffle-question".into(),
            AttackKind::ImageOnlyProbe => "image-only".into(),
            AttackKind::ConstantImage { level } => match level {
                ConstantLevel::Black => "constant-black".into(),
                ConstantLevel::White => "constant-white".into(),
                ConstantLevel::Mean => "constant-mean".into(),
            },
        }
    }
}

/// Brightness ×{0.5, 0.8, 1.3, 2}, rotation ±5°/±10°, translation ±1%/±5%
/// of the page side (signs drawn per canary).
pub fn perturbation_grid(side: usize) -> Vec<Perturbation> {
    let mut out: Vec<Perturbation> =
        [0.5, 0.8, 1.3, 2.0].iter().map(|&factor| Perturbation::Brightness { factor }).collect();
    for degrees in [5.0, 10.0] {
        out.push(Perturbation::Rotate { degrees, random_sign: true });
    }
    for frac in [0.01, 0.05] {
        let d = (side as f64 * frac).round() as i64;
        out.push(Perturbation::Translate { dx: d, dy: d, random_sign: true });
    }
    out
}

/// The full ablation menu.
pub fn all_kinds() -> Vec<AttackKind> {
    let mut kinds = vec![AttackKind::Baseline, AttackKind::NoText, AttackKind::Paraphrase { variant: 0 }];
    kinds.extend(
        perturbation_grid(CANONICAL_RES).into_iter().map(|perturbation| AttackKind::Perturbed { perturbation }),
    );
    kinds.push(AttackKind::ShuffleQuestion);
    kinds.push(AttackKind::ImageOnlyProbe);
    for level in [ConstantLevel::Black, ConstantLevel::White, ConstantLevel::Mean] {
        kinds.push(AttackKind::ConstantImage { level });
    }
    kinds
}

/// A held-out surface form of the question's template.
pub fn paraphrase(question: &str, template_id: &str, variant: usize) -> Result<String> {
    let ft = field_type(template_id).ok_or_else(|| Error::UnknownTemplate(template_id.to_string()))?;
    let bank = ft.paraphrases();
    let pick = bank
        .iter()
        .cycle()
        .skip(variant % bank.len())
        .take(bank.len())
        .find(|p| **p != question)
        .ok_or_else(|| Error::UnknownTemplate(template_id.to_string()))?;
    Ok(pick.to_string())
}

fn unsound(what: &str) -> Error {
    Error::format("context", format!("{what}: answer still visible"))
}

/// Builds the partial context of `kind` for one canary.
pub fn build_context(
    manifest: &CorpusManifest,
    canaries: &CanarySet,
    canary: usize,
    kind: &AttackKind,
    seed: u64,
) -> Result<CanaryContext> {
    let entry = canaries.entries.get(canary).ok_or_else(|| Error::ManifestMismatch(format!("no canary {canary}")))?;
    let doc = manifest
        .doc(&entry.doc_id)
        .ok_or_else(|| Error::ManifestMismatch(format!("unknown document {}", entry.doc_id)))?;
    let qa = doc
        .qa
        .get(entry.qa_index)
        .ok_or_else(|| Error::ManifestMismatch(format!("{} has no QA {}", doc.doc_id, entry.qa_index)))?;
    let page = render(doc, CANONICAL_RES)?;
    let redacted = redact_answer(doc, &page.image, &page.boxes, &qa.answer)?;
    if !verify_redaction(doc, &redacted, &qa.answer) {
        return Err(unsound("baseline"));
    }
    let local = derive_seed(seed, canary as u64);
    let ctx = |image: PageImage, question: String| CanaryContext {
        canary,
        image,
        question,
        targets: vec![qa.answer.clone()],
    };
    Ok(match kind {
        AttackKind::Baseline => ctx(redacted, qa.question.clone()),
        AttackKind::NoText => ctx(redact_all_text(doc, &page.image, &page.boxes), qa.question.clone()),
        AttackKind::Paraphrase { variant } => ctx(redacted, paraphrase(&qa.question, &qa.template_id, *variant)?),
        AttackKind::Perturbed { perturbation } => {
            perturbation.validate()?;
            ctx(perturb(&redacted, perturbation, seed_for(local, &doc.doc_id)), qa.question.clone())
        }
        AttackKind::ConstantImage { level } => {
            let v = match level {
                ConstantLevel::Black => 0.0,
                ConstantLevel::White => 1.0,
                ConstantLevel::Mean => redacted.mean(),
            };
            ctx(PageImage::filled(CANONICAL_RES, CANONICAL_RES, v), qa.question.clone())
        }
        AttackKind::ShuffleQuestion => {
            let (partner, image) = shuffle_partner(manifest, doc, &qa.question, &qa.answer, local)?;
            if partner.occurrences(&qa.answer).next().is_some() {
                return Err(unsound("shuffle partner"));
            }
            ctx(image, qa.question.clone())
        }
        AttackKind::ImageOnlyProbe => {
            let image = redact_all_answers(doc, &page.image, &page.boxes)?;
            if doc.qa.iter().any(|q| !verify_redaction(doc, &image, &q.answer)) {
                return Err(unsound("image-only probe"));
            }
            CanaryContext {
                canary,
                image,
                question: unrelated_question(doc, local),
                targets: doc.qa.iter().map(|q| q.answer.clone()).collect(),
            }
        }
    })
}

/// Canonical question of a field type the document does not have.
fn unrelated_question(doc: &DocumentRecord, seed: u64) -> String {
    let present: BTreeSet<&str> = doc.fields.iter().map(|f| f.name.as_str()).collect();
    let options: Vec<&str> =
        FIELD_TYPES.iter().filter(|f| !present.contains(f.key)).map(|f| f.canonical_question()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    options.choose(&mut rng).expect("catalog has more field types than a page").to_string()
}

/// Rejection-samples a training page that neither shows `answer` nor is
/// trained with `question`; returns it with one of its own answers blanked.
fn shuffle_partner<'m>(
    manifest: &'m CorpusManifest,
    doc: &DocumentRecord,
    question: &str,
    answer: &str,
    seed: u64,
) -> Result<(&'m DocumentRecord, PageImage)> {
    let pool: Vec<&DocumentRecord> = manifest.split_docs(Split::Train).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = normalize(answer);
    for _ in 0..MAX_PARTNER_DRAWS {
        let cand = pool[rng.gen_range(0..pool.len())];
        if cand.doc_id == doc.doc_id
            || cand.fields.iter().any(|f| normalize(&f.value) == key)
            || cand.static_text.iter().any(|s| normalize(&s.text) == key)
            || cand.qa.iter().any(|q| q.question == question)
        {
            continue;
        }
        let own = &cand.qa[rng.gen_range(0..cand.qa.len())];
        let page = render(cand, CANONICAL_RES)?;
        let image = redact_answer(cand, &page.image, &page.boxes, &own.answer)?;
        return Ok((cand, image));
    }
    Err(Error::NoValidPartner { doc_id: doc.doc_id.clone(), draws: MAX_PARTNER_DRAWS })
}

/// Contexts of one kind for every canary, indexed by canary id.
pub fn build_contexts(
    manifest: &CorpusManifest,
    canaries: &CanarySet,
    kind: &AttackKind,
    seed: u64,
) -> Result<Vec<CanaryContext>> {
    (0..canaries.len()).into_par_iter().map(|c| build_context(manifest, canaries, c, kind, seed)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub kind: AttackKind,
    pub sets: SetsEgm,
    /// Contexts in which f emitted one of the targets.
    pub emitted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

/// E/G/M under every requested context kind.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_suite(
    f: &dyn Answerer,
    f_g: &dyn Answerer,
    f_g_record: &TrainingRecord,
    manifest_hash: &str,
    manifest: &CorpusManifest,
    canaries: &CanarySet,
    kinds: &[AttackKind],
    seed: u64,
) -> Result<AblationTable> {
    check_baseline_record(f_g_record, manifest_hash, canaries)?;
    let mut rows = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let contexts = build_contexts(manifest, canaries, kind, seed)?;
        let by_f = extraction_vector(f, &contexts);
        let by_g = extraction_vector(f_g, &contexts);
        rows.push(AblationRow {
            label: kind.label(),
            kind: kind.clone(),
            emitted: by_f.iter().filter(|&&h| h).count(),
            sets: SetsEgm::from_extractions(&contexts, &by_f, &by_g, canaries),
        });
    }
    Ok(AblationTable { seed, rows })
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Grouped bars of |E|, |G|, |M| per context on a log scale, with the
    /// PII share of each bar drawn darker.
    pub fn to_svg(&self) -> String {
        let group = 54.0;
        let bar = 14.0;
        let (left, top, plot_h) = (50.0, 30.0, 220.0);
        let width = left + group * self.rows.len() as f64 + 20.0;
        let mut doc = svg::Svg::new(width, top + plot_h + 110.0);
        let max =
            self.rows.iter().map(|r| r.sets.e_tally.count.max(r.sets.g_tally.count)).max().unwrap_or(1).max(1) as f64;
        let scale = |n: usize| if n == 0 { 0.0 } else { (1.0 + n as f64).log10() / (1.0 + max).log10() * plot_h };
        let base = top + plot_h;
        doc.line(left, base, width - 10.0, base);
        doc.text(left, 18.0, "extractable canaries per context (log scale; dark = PII)", 12.0, "start");
        let colors = [("#9ecae1", "#3182bd"), ("#a1d99b", "#31a354"), ("#fdae6b", "#e6550d")];
        for (i, r) in self.rows.iter().enumerate() {
            let x0 = left + i as f64 * group + 4.0;
            for (j, t) in [r.sets.e_tally, r.sets.g_tally, r.sets.m_tally].iter().enumerate() {
                let h = scale(t.count);
                let hp = if t.count == 0 { 0.0 } else { h * t.pii as f64 / t.count as f64 };
                let x = x0 + j as f64 * bar;
                doc.rect(x, base - h, bar - 1.0, h, colors[j].0);
                doc.rect(x, base - hp, bar - 1.0, hp, colors[j].1);
                doc.text(x + bar / 2.0, base - h - 3.0, &t.count.to_string(), 8.0, "middle");
            }
            doc.text(x0 + 1.5 * bar, base + 14.0, &r.label, 8.0, "middle");
        }
        for (j, name) in ["E", "G", "M"].iter().enumerate() {
            let x = left + j as f64 * 50.0;
            doc.rect(x, base + 40.0, 10.0, 10.0, colors[j].1);
            doc.text(x + 14.0, base + 49.0, name, 10.0, "start");
        }
        doc.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, mark_canaries, CorpusConfig};
    use std::collections::BTreeMap;

    fn corpus() -> (CorpusManifest, CanarySet) {
        let cfg = CorpusConfig {
            train_docs: 120,
            validation_docs: 10,
            test_docs: 10,
            pretrain_docs: 0,
            duplication_profile: BTreeMap::from([(1, 12), (2, 3)]),
            canary_count: 15,
            ..CorpusConfig::default()
        };
        let m = gen_corpus(&cfg, 5).unwrap();
        let c = mark_canaries(&m, 15, &cfg.duplication_profile, 6).unwrap();
        (m, c)
    }

    #[test]
    fn baseline_is_the_redaction_output() {
        let (m, c) = corpus();
        for id in 0..c.len() {
            let ctx = build_context(&m, &c, id, &AttackKind::Baseline, 1).unwrap();
            let e = &c.entries[id];
            let doc = m.doc(&e.doc_id).unwrap();
            let qa = &doc.qa[e.qa_index];
            let page = render(doc, CANONICAL_RES).unwrap();
            assert_eq!(ctx.image, redact_answer(doc, &page.image, &page.boxes, &qa.answer).unwrap());
            assert_eq!(ctx.question, qa.question);
        }
    }

    #[test]
    fn every_context_hides_its_targets() {
        let (m, c) = corpus();
        for kind in all_kinds() {
            let ctxs = build_contexts(&m, &c, &kind, 3).unwrap();
            for ctx in &ctxs {
                let e = &c.entries[ctx.canary];
                let doc = m.doc(&e.doc_id).unwrap();
                match &kind {
                    AttackKind::Baseline | AttackKind::Paraphrase { .. } | AttackKind::NoText => {
                        assert!(verify_redaction(doc, &ctx.image, &ctx.targets[0]), "{}", kind.label());
                    }
                    AttackKind::ImageOnlyProbe => {
                        for t in &ctx.targets {
                            assert!(verify_redaction(doc, &ctx.image, t));
                        }
                        assert!(doc.qa.iter().all(|q| q.question != ctx.question));
                    }
                    AttackKind::ConstantImage { .. } => {
                        let v = ctx.image.pixels()[0];
                        assert!(ctx.image.pixels().iter().all(|&p| p == v));
                    }
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn shuffle_partner_never_shows_the_answer() {
        let (m, c) = corpus();
        for id in 0..c.len() {
            let e = &c.entries[id];
            let answer = &m.doc(&e.doc_id).unwrap().qa[e.qa_index].answer;
            let local = derive_seed(9, id as u64);
            let doc = m.doc(&e.doc_id).unwrap();
            let (partner, _) = shuffle_partner(&m, doc, &doc.qa[e.qa_index].question, answer, local).unwrap();
            assert_ne!(partner.doc_id, doc.doc_id);
            assert!(partner.occurrences(answer).next().is_none());
            assert!(partner.qa.iter().all(|q| q.question != doc.qa[e.qa_index].question));
        }
    }

    #[test]
    fn paraphrase_differs_and_comes_from_the_bank() {
        for ft in FIELD_TYPES {
            for v in 0..5 {
                let p = paraphrase(ft.canonical_question(), ft.key, v).unwrap();
                assert_ne!(p, ft.canonical_question());
                assert!(ft.paraphrases().contains(&p.as_str()));
            }
        }
        assert!(matches!(paraphrase("x", "nope", 0), Err(Error::UnknownTemplate(_))));
    }

    #[test]
    fn contexts_are_deterministic() {
        let (m, c) = corpus();
        for kind in [
            AttackKind::ShuffleQuestion,
            AttackKind::Perturbed { perturbation: Perturbation::Rotate { degrees: 5.0, random_sign: true } },
            AttackKind::ImageOnlyProbe,
        ] {
            assert_eq!(build_contexts(&m, &c, &kind, 4).unwrap(), build_contexts(&m, &c, &kind, 4).unwrap());
        }
    }

    #[test]
    fn grid_matches_the_menu() {
        let g = perturbation_grid(256);
        assert_eq!(g.len(), 8);
        assert!(g.contains(&Perturbation::Translate { dx: 3, dy: 3, random_sign: true }));
        assert!(g.contains(&Perturbation::Translate { dx: 13, dy: 13, random_sign: true }));
        assert!(g.contains(&Perturbation::Brightness { factor: 1.3 }));
    }

    #[test]
    fn suite_with_baseline_matches_compute_sets() {
        let (m, c) = corpus();
        let hash = crate::corpus::manifest_digest(&m).unwrap();
        let rec = TrainingRecord {
            manifest_hash: hash.clone(),
            excluded_canaries: (0..c.len()).collect(),
            ..Default::default()
        };
        let f = |_: &PageImage, _: &str| String::new();
        let ctxs = build_contexts(&m, &c, &AttackKind::Baseline, 2).unwrap();
        let direct = crate::audit::compute_sets(&f, &f, &rec, &hash, &c, &ctxs).unwrap();
        let table = run_ablation_suite(&f, &f, &rec, &hash, &m, &c, &[AttackKind::Baseline], 2).unwrap();
        assert_eq!(table.rows[0].sets, direct);
        let again = run_ablation_suite(&f, &f, &rec, &hash, &m, &c, &[AttackKind::Baseline], 2).unwrap();
        assert_eq!(table, again);
        assert!(table.to_svg().contains("baseline"));
    }
}
