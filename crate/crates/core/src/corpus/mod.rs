//! Synthetic document corpus with controlled answer duplication and PII tags.
//!
//! Pages are laid out on a grid of 8-pixel character cells (32×32 cells on a
//! 256-pixel canonical page). Each field occupies one row: a static label
//! followed by the value at [`VALUE_COL`]. A family's fields keep their order
//! and roughly their row from page to page. Titles and labels are static
//! text; only values are fields and can be asked about.

pub mod catalog;
mod persist;

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BoundingBox, GlyphFont, CANONICAL_RES};
use crate::text::normalize;

pub use catalog::{field_type, layout_family, template_of_question, FieldType, LayoutFamily};
pub use persist::{load_canaries, load_corpus, manifest_digest, save_canaries, save_corpus, CorpusHeader, CANARY_FILE};

/// Longest value any grammar can produce.
pub const MAX_VALUE_LEN: usize = 17;
/// Grid column where every field value starts.
pub const VALUE_COL: usize = 13;

const CELL: usize = 8;
const FIELD_ROWS: std::ops::RangeInclusive<usize> = 4..=28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PiiClass {
    Places,
    Person,
    Temporal,
    Contact,
    #[serde(rename = "NRP")]
    Nrp,
    #[serde(rename = "URL")]
    Url,
    Id,
    NonPii,
}

impl PiiClass {
    pub const ALL: [PiiClass; 8] = [
        PiiClass::Places,
        PiiClass::Person,
        PiiClass::Temporal,
        PiiClass::Contact,
        PiiClass::Nrp,
        PiiClass::Url,
        PiiClass::Id,
        PiiClass::NonPii,
    ];

    pub fn is_pii(self) -> bool {
        self != PiiClass::NonPii
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub value: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub pii: PiiClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpan {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecorationKind {
    Rule,
    Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoration {
    pub kind: DecorationKind,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl Decoration {
    /// Boxes actually inked: the whole box for a rule, the four 1px edges
    /// for a frame.
    pub fn strokes(&self) -> Vec<BoundingBox> {
        let b = self.bbox;
        match self.kind {
            DecorationKind::Rule => vec![b],
            DecorationKind::Frame => vec![
                BoundingBox::new(b.x, b.y, b.w, 1),
                BoundingBox::new(b.x, b.bottom() - 1, b.w, 1),
                BoundingBox::new(b.x, b.y, 1, b.h),
                BoundingBox::new(b.right() - 1, b.y, 1, b.h),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    /// Name of the field holding the answer.
    pub answer_field: String,
    pub template_id: String,
    pub pii: PiiClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub doc_id: String,
    /// Layout family.
    pub template_id: String,
    pub fields: Vec<FieldSpec>,
    pub static_text: Vec<TextSpan>,
    pub qa: Vec<QaPair>,
    pub decorations: Vec<Decoration>,
}

impl DocumentRecord {
    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Fields whose normalized value equals the normalized `answer`.
    pub fn occurrences<'a>(&'a self, answer: &str) -> impl Iterator<Item = &'a FieldSpec> + 'a {
        let key = normalize(answer);
        self.fields.iter().filter(move |f| normalize(&f.value) == key)
    }

    /// Checks the structural invariants: in-bounds, non-overlapping boxes and
    /// extractive QA pairs.
    pub fn validate(&self, res: usize) -> Result<()> {
        let mut boxes: Vec<BoundingBox> = self.fields.iter().map(|f| f.bbox).collect();
        boxes.extend(self.static_text.iter().map(|s| s.bbox));
        for (i, a) in boxes.iter().enumerate() {
            if !a.fits(res, res) {
                return Err(Error::LayoutOverflow { field: format!("box {a:?}"), res });
            }
            if boxes[i + 1..].iter().any(|b| a.overlaps(b)) {
                return Err(Error::format("document", format!("{}: overlapping boxes", self.doc_id)));
            }
            if self.decorations.iter().flat_map(|d| d.strokes()).any(|s| s.overlaps(a)) {
                return Err(Error::format("document", format!("{}: decoration over text", self.doc_id)));
            }
        }
        for qa in &self.qa {
            let f = self.field(&qa.answer_field).ok_or_else(|| {
                Error::format("document", format!("{}: missing field {}", self.doc_id, qa.answer_field))
            })?;
            if f.value != qa.answer {
                return Err(Error::format("document", format!("{}: non-extractive QA", self.doc_id)));
            }
        }
        Ok(())
    }
}

/// Reference to one training sample (a QA pair of a document).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub doc_id: String,
    pub qa_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_docs: usize,
    pub validation_docs: usize,
    pub test_docs: usize,
    pub pretrain_docs: usize,
    pub qa_per_doc: usize,
    pub fields_per_doc: usize,
    /// Number of layout families in use (the first `n` of the catalog).
    pub layout_families: usize,
    /// Duplication count → number of canaries with that count.
    pub duplication_profile: BTreeMap<usize, usize>,
    /// Size of the canary set drawn by the `gen` command.
    pub canary_count: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_docs: 2000,
            validation_docs: 200,
            test_docs: 200,
            pretrain_docs: 200,
            qa_per_doc: 3,
            fields_per_doc: 5,
            layout_families: catalog::LAYOUT_FAMILIES.len(),
            duplication_profile: BTreeMap::from([(1, 240), (2, 30), (4, 15), (8, 15)]),
            canary_count: 300,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInfeasible(m.to_string()));
        if self.train_docs == 0 || self.validation_docs == 0 || self.test_docs == 0 {
            return bad("split sizes must be at least 1");
        }
        if self.layout_families == 0 || self.layout_families > catalog::LAYOUT_FAMILIES.len() {
            return bad("layout family count out of range");
        }
        let max_fields = catalog::LAYOUT_FAMILIES.iter().map(|f| f.fields.len()).min().unwrap();
        if self.fields_per_doc == 0 || self.fields_per_doc > max_fields {
            return bad("fields_per_doc out of range");
        }
        if self.qa_per_doc == 0 || self.qa_per_doc > self.fields_per_doc {
            return bad("qa_per_doc must lie in 1..=fields_per_doc");
        }
        if self.duplication_profile.keys().any(|&d| d == 0) {
            return bad("duplication counts must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    PretrainPool,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "tr",
            Split::Validation => "va",
            Split::Test => "te",
            Split::PretrainPool => "pp",
        }
    }
}

/// Split membership by doc id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMembership {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub pretrain_pool: Vec<String>,
}

impl SplitMembership {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::PretrainPool => &self.pretrain_pool,
        }
    }
}

/// A generated corpus. Immutable once built.
#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub seed: u64,
    pub splits: SplitMembership,
    documents: Vec<DocumentRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for CorpusManifest {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.seed == other.seed
            && self.splits == other.splits
            && self.documents == other.documents
    }
}

impl CorpusManifest {
    pub fn from_parts(
        config: CorpusConfig,
        seed: u64,
        splits: SplitMembership,
        documents: Vec<DocumentRecord>,
    ) -> Result<Self> {
        let index: HashMap<String, usize> = documents.iter().enumerate().map(|(i, d)| (d.doc_id.clone(), i)).collect();
        if index.len() != documents.len() {
            return Err(Error::format("manifest", "duplicate doc_id"));
        }
        let mut seen = HashSet::new();
        for id in splits.train.iter().chain(&splits.validation).chain(&splits.test).chain(&splits.pretrain_pool) {
            if !index.contains_key(id) {
                return Err(Error::format("manifest", format!("split lists unknown doc {id}")));
            }
            if !seen.insert(id) {
                return Err(Error::format("manifest", format!("doc {id} is in two splits")));
            }
        }
        Ok(Self { config, seed, splits, documents, index })
    }

    pub fn documents(&self) -> &[DocumentRecord] {
        &self.documents
    }

    pub fn doc(&self, doc_id: &str) -> Option<&DocumentRecord> {
        self.index.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn split_docs(&self, split: Split) -> impl Iterator<Item = &DocumentRecord> + '_ {
        self.splits.get(split).iter().map(move |id| self.doc(id).expect("validated membership"))
    }

    pub fn split_of(&self, doc_id: &str) -> Option<Split> {
        [Split::Train, Split::Validation, Split::Test, Split::PretrainPool]
            .into_iter()
            .find(|s| self.splits.get(*s).iter().any(|d| d == doc_id))
    }

    pub fn qa(&self, r: &SampleRef) -> Option<&QaPair> {
        self.doc(&r.doc_id).and_then(|d| d.qa.get(r.qa_index))
    }

    /// All QA pairs of a split, in manifest order.
    pub fn samples(&self, split: Split) -> Vec<SampleRef> {
        self.split_docs(split)
            .flat_map(|d| (0..d.qa.len()).map(move |i| SampleRef { doc_id: d.doc_id.clone(), qa_index: i }))
            .collect()
    }

    fn training_answer_counts(&self) -> HashMap<String, usize> {
        let mut counts = HashMap::new();
        for d in self.split_docs(Split::Train) {
            for qa in &d.qa {
                *counts.entry(normalize(&qa.answer)).or_insert(0) += 1;
            }
        }
        counts
    }
}

fn doc_layout<R: Rng>(
    rng: &mut R,
    family: &LayoutFamily,
    fields_per_doc: usize,
) -> (usize, Vec<(&'static str, usize)>) {
    let label_col = 1 + rng.gen_range(0..=1);
    let mut chosen: Vec<usize> = (0..family.fields.len()).collect();
    chosen.shuffle(rng);
    chosen.truncate(fields_per_doc);
    chosen.sort_unstable();
    // Field i of the family sits on slot 2i or 2i+1, on every other line.
    let placed = chosen
        .into_iter()
        .map(|i| (family.fields[i], FIELD_ROWS.start() + 2 * (2 * i + rng.gen_range(0..=1))))
        .collect();
    (label_col, placed)
}

fn text_box(font: &GlyphFont, col: usize, row: usize, len: usize) -> BoundingBox {
    BoundingBox::new(col * CELL + 1, row * CELL, font.text_width(len), font.text_height())
}

fn decorations(style: catalog::DecorationStyle) -> Vec<Decoration> {
    use catalog::DecorationStyle::*;
    let rule = |row: usize| Decoration {
        kind: DecorationKind::Rule,
        bbox: BoundingBox::new(CELL, row * CELL + 3, 30 * CELL, 2),
    };
    let frame = Decoration { kind: DecorationKind::Frame, bbox: BoundingBox::new(2, 2, 252, 252) };
    let side = |col: usize| Decoration {
        kind: DecorationKind::Rule,
        bbox: BoundingBox::new(col * CELL + 3, CELL, 2, 30 * CELL),
    };
    match style {
        HeaderRule => vec![rule(2)],
        HeaderAndFooterRules => vec![rule(2), rule(30)],
        PageFrame => vec![frame],
        FrameAndRule => vec![frame, rule(2)],
        SideRules => vec![side(0), side(31)],
        None => vec![],
    }
}

struct ValuePool {
    used: HashSet<String>,
}

impl ValuePool {
    fn new() -> Self {
        // Closed-vocabulary values are reserved so no high-entropy value can
        // collide with them after normalization.
        let mut used = HashSet::new();
        for ft in catalog::FIELD_TYPES {
            if let catalog::Grammar::Choice(opts) = ft.grammar {
                used.extend(opts.iter().map(|o| normalize(o)));
            }
            used.insert(normalize(ft.label));
        }
        for fam in catalog::LAYOUT_FAMILIES {
            used.insert(normalize(fam.title));
        }
        Self { used }
    }

    fn fresh<R: Rng>(&mut self, rng: &mut R, ft: &FieldType) -> String {
        if !ft.grammar.is_high_entropy() {
            return ft.grammar.sample(rng);
        }
        loop {
            let v = ft.grammar.sample(rng);
            if self.used.insert(normalize(&v)) {
                return v;
            }
        }
    }
}

fn gen_document<R: Rng>(rng: &mut R, pool: &mut ValuePool, config: &CorpusConfig, doc_id: String) -> DocumentRecord {
    let font = GlyphFont::default();
    let family = &catalog::LAYOUT_FAMILIES[rng.gen_range(0..config.layout_families)];
    let (label_col, placement) = doc_layout(rng, family, config.fields_per_doc);

    let mut static_text =
        vec![TextSpan { text: family.title.to_string(), bbox: text_box(&font, label_col, 1, family.title.len()) }];
    let mut fields = Vec::with_capacity(placement.len());
    for &(key, row) in &placement {
        let ft = field_type(key).expect("catalog key");
        static_text
            .push(TextSpan { text: ft.label.to_string(), bbox: text_box(&font, label_col, row, ft.label.len()) });
        let value = pool.fresh(rng, ft);
        fields.push(FieldSpec {
            name: key.to_string(),
            bbox: text_box(&font, VALUE_COL, row, value.chars().count()),
            value,
            pii: ft.pii,
        });
    }

    let mut asked: Vec<usize> = (0..fields.len()).collect();
    asked.shuffle(rng);
    asked.truncate(config.qa_per_doc);
    asked.sort_unstable();
    let qa = asked
        .into_iter()
        .map(|i| {
            let f = &fields[i];
            let ft = field_type(&f.name).unwrap();
            QaPair {
                question: ft.canonical_question().to_string(),
                answer: f.value.clone(),
                answer_field: f.name.clone(),
                template_id: ft.key.to_string(),
                pii: f.pii,
            }
        })
        .collect();

    DocumentRecord {
        doc_id,
        template_id: family.name.to_string(),
        fields,
        static_text,
        qa,
        decorations: decorations(family.decorations),
    }
}

fn is_canary_eligible(qa: &QaPair) -> bool {
    field_type(&qa.template_id).is_some_and(|ft| ft.grammar.is_high_entropy())
}

/// Rewrites groups of training answers so that the profile's duplicated
/// answers exist. Copies of one answer always share a field type.
fn plant_duplicates<R: Rng>(
    rng: &mut R,
    pool: &mut ValuePool,
    docs: &mut [DocumentRecord],
    profile: &BTreeMap<usize, usize>,
) -> Result<()> {
    let font = GlyphFont::default();
    // Eligible (doc index, qa index) slots grouped by field type.
    let mut by_type: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (di, d) in docs.iter().enumerate() {
        for (qi, qa) in d.qa.iter().enumerate() {
            if is_canary_eligible(qa) {
                by_type.entry(qa.template_id.clone()).or_default().push((di, qi));
            }
        }
    }
    for slots in by_type.values_mut() {
        slots.shuffle(rng);
    }

    let total: usize = profile.iter().map(|(d, n)| d * n).sum();
    let capacity: usize = by_type.values().map(Vec::len).sum();
    if total > capacity {
        return Err(Error::ConfigInfeasible(format!(
            "duplication profile needs {total} training QA pairs, corpus has {capacity} eligible"
        )));
    }

    // Unique answers need no planting; every high-entropy value already is.
    for (&dup, &n) in profile.iter().rev().filter(|(d, _)| **d >= 2) {
        for _ in 0..n {
            let key = by_type
                .iter()
                .filter(|(_, s)| s.len() >= dup)
                .max_by_key(|(_, s)| s.len())
                .map(|(k, _)| k.clone())
                .ok_or_else(|| Error::ConfigInfeasible(format!("no field type has {dup} free training QA pairs")))?;
            let slots = by_type.get_mut(&key).unwrap();
            let group: Vec<(usize, usize)> = slots.split_off(slots.len() - dup);
            let ft = field_type(&key).unwrap();
            let answer = pool.fresh(rng, ft);
            for (di, qi) in group {
                let doc = &mut docs[di];
                let field_name = doc.qa[qi].answer_field.clone();
                doc.qa[qi].answer = answer.clone();
                let f = doc.fields.iter_mut().find(|f| f.name == field_name).unwrap();
                f.value = answer.clone();
                f.bbox.w = font.text_width(answer.chars().count());
            }
        }
    }
    Ok(())
}

/// Generates a corpus. Deterministic in `(config, seed)`.
pub fn gen_corpus(config: &CorpusConfig, seed: u64) -> Result<CorpusManifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = ValuePool::new();
    let mut splits = SplitMembership::default();
    let mut documents = Vec::new();

    let plan = [
        (Split::Train, config.train_docs),
        (Split::Validation, config.validation_docs),
        (Split::Test, config.test_docs),
        (Split::PretrainPool, config.pretrain_docs),
    ];
    for (split, n) in plan {
        for i in 0..n {
            let id = format!("{}-{i:05}", split.prefix());
            documents.push(gen_document(&mut rng, &mut pool, config, id.clone()));
            match split {
                Split::Train => splits.train.push(id),
                Split::Validation => splits.validation.push(id),
                Split::Test => splits.test.push(id),
                Split::PretrainPool => splits.pretrain_pool.push(id),
            }
        }
    }

    plant_duplicates(&mut rng, &mut pool, &mut documents[..config.train_docs], &config.duplication_profile)?;
    for d in &documents {
        d.validate(CANONICAL_RES)?;
    }
    CorpusManifest::from_parts(config.clone(), seed, splits, documents)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanaryEntry {
    pub doc_id: String,
    pub qa_index: usize,
    pub pii: PiiClass,
    pub duplication: usize,
}

impl CanaryEntry {
    pub fn sample(&self) -> SampleRef {
        SampleRef { doc_id: self.doc_id.clone(), qa_index: self.qa_index }
    }
}

/// Designated canaries. Canary ids are indices into `entries`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanarySet {
    pub entries: Vec<CanaryEntry>,
    pub duplication_profile: BTreeMap<usize, usize>,
}

impl CanarySet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn samples(&self) -> HashSet<SampleRef> {
        self.entries.iter().map(CanaryEntry::sample).collect()
    }
}

/// Draws `count` canaries from the training set so that the requested
/// duplication profile holds exactly.
pub fn mark_canaries(
    manifest: &CorpusManifest,
    count: usize,
    duplication_profile: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<CanarySet> {
    let wanted: usize = duplication_profile.values().sum();
    if wanted != count {
        return Err(Error::ConfigInfeasible(format!("profile describes {wanted} canaries but {count} were requested")));
    }
    let counts = manifest.training_answer_counts();
    // Groups of eligible training samples sharing a normalized answer.
    let mut groups: BTreeMap<String, Vec<(SampleRef, PiiClass)>> = BTreeMap::new();
    for d in manifest.split_docs(Split::Train) {
        for (i, qa) in d.qa.iter().enumerate() {
            if is_canary_eligible(qa) {
                groups
                    .entry(normalize(&qa.answer))
                    .or_default()
                    .push((SampleRef { doc_id: d.doc_id.clone(), qa_index: i }, qa.pii));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(count);
    for (&dup, &n) in duplication_profile {
        let mut candidates: Vec<&Vec<(SampleRef, PiiClass)>> = groups
            .iter()
            .filter(|(answer, members)| counts.get(*answer) == Some(&dup) && members.len() == dup)
            .map(|(_, m)| m)
            .collect();
        if candidates.len() < n {
            return Err(Error::ConfigInfeasible(format!(
                "{n} canaries with duplication {dup} requested, {} available",
                candidates.len()
            )));
        }
        candidates.shuffle(&mut rng);
        for members in candidates.into_iter().take(n) {
            let (sample, pii) = members.choose(&mut rng).unwrap().clone();
            entries.push(CanaryEntry { doc_id: sample.doc_id, qa_index: sample.qa_index, pii, duplication: dup });
        }
    }
    Ok(CanarySet { entries, duplication_profile: duplication_profile.clone() })
}

/// Number of training QA pairs whose normalized answer equals `answer`.
pub fn duplication_count(manifest: &CorpusManifest, answer: &str) -> usize {
    let key = normalize(answer);
    manifest.split_docs(Split::Train).flat_map(|d| d.qa.iter()).filter(|qa| normalize(&qa.answer) == key).count()
}

/// Canary count per PII class; every class is present, zero or not.
pub fn pii_histogram(canaries: &CanarySet, manifest: &CorpusManifest) -> BTreeMap<PiiClass, usize> {
    let mut hist: BTreeMap<PiiClass, usize> = PiiClass::ALL.iter().map(|c| (*c, 0)).collect();
    for e in &canaries.entries {
        let class = manifest.qa(&e.sample()).map(|qa| qa.pii).unwrap_or(e.pii);
        *hist.get_mut(&class).unwrap() += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> CorpusConfig {
        CorpusConfig {
            train_docs: 200,
            validation_docs: 20,
            test_docs: 20,
            pretrain_docs: 10,
            duplication_profile: BTreeMap::from([(1, 30), (2, 10), (4, 3)]),
            canary_count: 43,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn every_family_slot_fits_on_the_page() {
        for fam in catalog::LAYOUT_FAMILIES {
            let last = FIELD_ROWS.start() + 2 * (2 * (fam.fields.len() - 1) + 1);
            assert!(last <= *FIELD_ROWS.end(), "{} needs row {last}", fam.name);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_corpus(&small_config(), 7).unwrap();
        let b = gen_corpus(&small_config(), 7).unwrap();
        assert_eq!(a, b);
        let c = gen_corpus(&small_config(), 8).unwrap();
        assert_ne!(a.documents(), c.documents());
    }

    #[test]
    fn infeasible_profile_is_rejected() {
        let cfg = CorpusConfig { train_docs: 10, duplication_profile: BTreeMap::from([(1, 100)]), ..small_config() };
        assert!(matches!(gen_corpus(&cfg, 1), Err(Error::ConfigInfeasible(_))));
    }

    #[test]
    fn zero_duplication_is_rejected() {
        let cfg = CorpusConfig { duplication_profile: BTreeMap::from([(0, 1)]), ..small_config() };
        assert!(matches!(gen_corpus(&cfg, 1), Err(Error::ConfigInfeasible(_))));
    }

    #[test]
    fn splits_are_disjoint_and_complete() {
        let m = gen_corpus(&small_config(), 3).unwrap();
        let mut all: Vec<&String> = m.splits.train.iter().collect();
        all.extend(&m.splits.validation);
        all.extend(&m.splits.test);
        all.extend(&m.splits.pretrain_pool);
        let set: HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
        assert_eq!(all.len(), m.documents().len());
    }

    #[test]
    fn every_answer_is_a_field_value_on_its_page() {
        let m = gen_corpus(&small_config(), 4).unwrap();
        for d in m.documents() {
            assert_eq!(d.qa.len(), 3);
            for qa in &d.qa {
                assert!(d.occurrences(&qa.answer).count() >= 1);
                assert_eq!(d.field(&qa.answer_field).unwrap().value, qa.answer);
            }
        }
    }

    #[test]
    fn canaries_honour_profile() {
        let m = gen_corpus(&small_config(), 5).unwrap();
        let profile = BTreeMap::from([(1, 30), (2, 10)]);
        let c = mark_canaries(&m, 40, &profile, 11).unwrap();
        assert_eq!(c.len(), 40);
        assert_eq!(c.entries.iter().filter(|e| e.duplication == 1).count(), 30);
        assert_eq!(c.entries.iter().filter(|e| e.duplication == 2).count(), 10);
        for e in &c.entries {
            let qa = m.qa(&e.sample()).unwrap();
            assert_eq!(duplication_count(&m, &qa.answer), e.duplication);
            assert_eq!(m.split_of(&e.doc_id), Some(Split::Train));
        }
        assert_eq!(c, mark_canaries(&m, 40, &profile, 11).unwrap());
    }

    #[test]
    fn empty_canary_set() {
        let m = gen_corpus(&small_config(), 5).unwrap();
        let c = mark_canaries(&m, 0, &BTreeMap::new(), 1).unwrap();
        assert!(c.is_empty());
        let h = pii_histogram(&c, &m);
        assert_eq!(h.len(), 8);
        assert!(h.values().all(|&v| v == 0));
    }

    #[test]
    fn too_many_canaries_is_infeasible() {
        let m = gen_corpus(&small_config(), 5).unwrap();
        let r = mark_canaries(&m, 20, &BTreeMap::from([(2, 20)]), 1);
        assert!(matches!(r, Err(Error::ConfigInfeasible(_))));
        let r = mark_canaries(&m, 3, &BTreeMap::from([(1, 2)]), 1);
        assert!(matches!(r, Err(Error::ConfigInfeasible(_))));
    }

    #[test]
    fn absent_answer_has_zero_duplication() {
        let m = gen_corpus(&small_config(), 5).unwrap();
        assert_eq!(duplication_count(&m, "zzz-never-generated"), 0);
    }

    #[test]
    fn histogram_partitions_canaries() {
        let m = gen_corpus(&small_config(), 6).unwrap();
        let c = mark_canaries(&m, 43, &m.config.duplication_profile, 2).unwrap();
        let h = pii_histogram(&c, &m);
        assert_eq!(h.values().sum::<usize>(), 43);
    }
}
