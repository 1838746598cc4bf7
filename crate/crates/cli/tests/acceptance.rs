//! Acceptance experiments.
//!
//! Every criterion prints one `PASS` or `FAIL` line with its measured values.
//! The lines are the report: a FAIL does not abort the run, so the whole
//! suite always completes and the numbers can be compared. Errors in the
//! machinery itself (a corpus that will not generate, a checkpoint that will
//! not load) still panic.
//!
//! Trained models are cached under the cargo target tmpdir, keyed by corpus,
//! canaries, configuration and training set. Delete `acceptance-cache` there
//! to force a fresh run.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use clap::Parser;
use docmem::attack::{all_kinds, build_contexts, run_ablation_suite, AblationTable, AttackKind};
use docmem::audit::{estimate_scores, sample_splits, Answerer, CanaryScore, SplitPlan};
use docmem::corpus::{gen_corpus, manifest_digest, mark_canaries, CanarySet, CorpusConfig, CorpusManifest, Split};
use docmem::defend::{evaluate_defense, test_anls, Defense, DefenseSetup};
use docmem::metrics::{anls, levenshtein, nls, ANLS_TAU};
use docmem::model::{grad_check, Checkpoint, GradCheckMode, Model, ModelConfig, TrainingRecord};
use docmem::pipeline::{TrainJob, TrainingSet};
use docmem::raster::render;
use docmem::redact::{redact_answer, verify_redaction};
use docmem::util::sha256_hex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CORPUS_SEED: u64 = 1;
const SEEDS: [u64; 3] = [0, 1, 2];
const K: usize = 10;
const UTILITY_BUDGET_S: f64 = 15.0 * 60.0;

/// Written straight to stdout so the line shows up without `--nocapture`.
fn verdict(name: &str, ok: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{} {name}: {detail}", if ok { "PASS" } else { "FAIL" }).unwrap();
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Corpus {
    manifest: CorpusManifest,
    canaries: CanarySet,
    hash: String,
}

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let cfg = CorpusConfig::default();
        let manifest = gen_corpus(&cfg, CORPUS_SEED).expect("corpus");
        let canaries =
            mark_canaries(&manifest, cfg.canary_count, &cfg.duplication_profile, CORPUS_SEED).expect("canaries");
        let hash = manifest_digest(&manifest).expect("digest");
        Corpus { manifest, canaries, hash }
    })
}

fn plan() -> &'static SplitPlan {
    static P: OnceLock<SplitPlan> = OnceLock::new();
    P.get_or_init(|| sample_splits(corpus().canaries.len(), K, CORPUS_SEED).expect("plan"))
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Set {
    All,
    Baseline,
    Split(usize),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
struct Spec {
    res: usize,
    seed: u64,
    set: Set,
    eb: bool,
}

struct Trained {
    model: Model<f32>,
    checkpoint: Checkpoint,
    record: TrainingRecord,
    /// Training wall time of the run that produced the checkpoint.
    seconds: f64,
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache")
}

/// Trains (or loads) one model. Training is serialized across tests.
fn trained(spec: Spec) -> Arc<Trained> {
    static DONE: OnceLock<Mutex<HashMap<Spec, Arc<Trained>>>> = OnceLock::new();
    static TRAIN: Mutex<()> = Mutex::new(());
    let done = DONE.get_or_init(Default::default);
    if let Some(t) = done.lock().unwrap().get(&spec) {
        return t.clone();
    }
    // EB fine-tunes the matching undefended model; resolve it before taking the training lock.
    let init = spec.eb.then(|| trained(Spec { eb: false, ..spec }));
    let _guard = TRAIN.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(t) = done.lock().unwrap().get(&spec) {
        return t.clone();
    }
    let c = corpus();
    let config = ModelConfig { input_res: spec.res, seed: spec.seed, ..ModelConfig::default() };
    let set = match spec.set {
        Set::All => TrainingSet::All,
        Set::Baseline => TrainingSet::ExcludeCanaries,
        Set::Split(k) => TrainingSet::Split { plan: plan(), k },
    };
    let key = sha256_hex(
        format!(
            "{}|{}|{}|{:?}|{}{}",
            c.hash,
            serde_json::to_string(&c.canaries).unwrap(),
            serde_json::to_string(&config).unwrap(),
            spec.set,
            spec.eb,
            if spec.eb { "|warm" } else { "" }
        )
        .as_bytes(),
    );
    let (ck_path, time_path) = (cache_dir().join(format!("{key}.ckpt")), cache_dir().join(format!("{key}.seconds")));
    let (ck, seconds) = match (Checkpoint::load(&ck_path), fs::read_to_string(&time_path)) {
        (Ok(ck), Ok(s)) => (ck, s.trim().parse().expect("cached seconds")),
        _ => {
            let job = TrainJob {
                manifest: &c.manifest,
                canaries: &c.canaries,
                config,
                set,
                extraction_blocking: spec.eb,
                warm_start: init.as_ref().map(|t| &t.checkpoint),
            };
            let start = Instant::now();
            let ck = job
                .run(&mut |e| eprintln!("[{spec:?}] epoch {} train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_loss))
                .expect("training");
            let seconds = start.elapsed().as_secs_f64();
            fs::create_dir_all(cache_dir()).unwrap();
            ck.save(&ck_path).unwrap();
            fs::write(&time_path, seconds.to_string()).unwrap();
            (ck, seconds)
        }
    };
    let t = Arc::new(Trained {
        model: Model::from_checkpoint(&ck).unwrap(),
        record: ck.header.training.clone(),
        checkpoint: ck,
        seconds,
    });
    done.lock().unwrap().insert(spec, t.clone());
    t
}

fn f(res: usize, seed: u64) -> Arc<Trained> {
    trained(Spec { res, seed, set: Set::All, eb: false })
}

fn f_g(res: usize, seed: u64) -> Arc<Trained> {
    trained(Spec { res, seed, set: Set::Baseline, eb: false })
}

/// E/G/M tables of f against f_G for the given contexts.
type AblationKey = (usize, u64, String);

fn ablation(res: usize, seed: u64, kinds: &[AttackKind]) -> AblationTable {
    static DONE: OnceLock<Mutex<HashMap<AblationKey, AblationTable>>> = OnceLock::new();
    let done = DONE.get_or_init(Default::default);
    let key = (res, seed, kinds.iter().map(AttackKind::label).collect::<Vec<_>>().join(","));
    if let Some(t) = done.lock().unwrap().get(&key) {
        return t.clone();
    }
    let c = corpus();
    let (fm, gm) = (f(res, seed), f_g(res, seed));
    let t =
        run_ablation_suite(&fm.model, &gm.model, &gm.record, &c.hash, &c.manifest, &c.canaries, kinds, seed).unwrap();
    done.lock().unwrap().insert(key, t.clone());
    t
}

fn test_refs() -> Vec<docmem::corpus::SampleRef> {
    corpus().manifest.samples(Split::Test)
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let r = grad_check(&ModelConfig::tiny(), 1e-5, 200, GradCheckMode::Full).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "gradient correctness",
        r.max_rel_error < 1e-4 && secs < 60.0,
        &format!("max rel error {:.2e} over {} coords in {secs:.1}s", r.max_rel_error, r.coords),
    );
}

#[test]
fn utility_floor() {
    let c = corpus();
    let mut anls_by_seed = vec![];
    let mut secs = vec![];
    for seed in SEEDS {
        let t = f(256, seed);
        let scores = test_anls(&t.model, &c.manifest, &test_refs(), Defense::None, seed).unwrap();
        anls_by_seed.push(scores.iter().sum::<f64>() / scores.len() as f64);
        secs.push(t.seconds);
    }
    let med = median(anls_by_seed.clone());
    let slowest = secs.iter().copied().fold(0.0, f64::max);
    verdict(
        "utility floor",
        med >= 0.85 && slowest <= UTILITY_BUDGET_S,
        &format!("test ANLS {anls_by_seed:.4?} (median {med:.4}), training {secs:.0?}s per seed"),
    );
}

#[test]
fn resolution_trend() {
    let kinds = [AttackKind::Baseline];
    let m_at =
        |res| -> Vec<f64> { SEEDS.iter().map(|&s| ablation(res, s, &kinds).rows[0].sets.m.len() as f64).collect() };
    let (hi, lo) = (m_at(256), m_at(32));
    let (mh, ml) = (median(hi.clone()), median(lo.clone()));
    verdict("resolution trend", ml > mh, &format!("|M| at 32 px {lo:?} (median {ml}), at 256 px {hi:?} (median {mh})"));
}

fn split_scores() -> &'static Vec<CanaryScore> {
    static S: OnceLock<Vec<CanaryScore>> = OnceLock::new();
    S.get_or_init(|| {
        let c = corpus();
        let models: Vec<Arc<Trained>> =
            (0..K).map(|k| trained(Spec { res: 32, seed: SEEDS[0], set: Set::Split(k), eb: false })).collect();
        let refs: Vec<(&dyn Answerer, &TrainingRecord)> =
            models.iter().map(|t| (&t.model as &dyn Answerer, &t.record)).collect();
        let contexts = build_contexts(&c.manifest, &c.canaries, &AttackKind::Baseline, SEEDS[0]).unwrap();
        estimate_scores(&refs, plan(), &c.hash, &contexts).unwrap()
    })
}

#[test]
fn attribution_validity() {
    let sets = ablation(32, SEEDS[0], &[AttackKind::Baseline]).rows[0].sets.clone();
    let scores = split_scores();
    let mean_over = |ids: &BTreeSet<usize>| {
        (!ids.is_empty()).then(|| ids.iter().map(|&i| scores[i].m_e_f64()).sum::<f64>() / ids.len() as f64)
    };
    let (mg, mm) = (mean_over(&sets.g), mean_over(&sets.m));
    let high = sets.m.iter().filter(|&&i| scores[i].m_e_f64() >= 0.5).count();
    // An empty G has no mean to compare; an empty M cannot show the effect.
    let ok = match (mg, mm) {
        (Some(g), Some(m)) => g < 0.2 && m > g && 2 * high >= sets.m.len(),
        (None, Some(_)) => 2 * high >= sets.m.len(),
        _ => false,
    };
    verdict(
        "attribution validity",
        ok,
        &format!(
            "|E| {} |G| {} |M| {}; mean M_E over G {mg:?}, over M {mm:?}; {high} of {} M-canaries at M_E >= 0.5",
            sets.e.len(),
            sets.g.len(),
            sets.m.len(),
            sets.m.len()
        ),
    );
}

#[test]
fn estimator_identities() {
    let scores = split_scores();
    let p = plan();
    let identity = scores.iter().filter(|s| s.s_e - s.m_e == s.out_x * 2).count();
    let balanced = (0..scores.len()).filter(|&c| p.in_count(c) == K / 2).count();
    verdict(
        "estimator identities",
        identity == scores.len() && balanced == scores.len() && scores.len() == corpus().canaries.len(),
        &format!("S-M = 2 out holds for {identity}/{n}, in-count K/2 for {balanced}/{n}", n = scores.len()),
    );
}

#[test]
fn extraction_blocking() {
    let c = corpus();
    let kinds = all_kinds();
    let tests = test_refs();
    let (mut m_base, mut delta) = (vec![], vec![]);
    let mut per_context: Vec<Vec<f64>> = vec![vec![]; kinds.len()];
    for seed in SEEDS {
        let (base, g) = (f(256, seed), f_g(256, seed));
        let eb = trained(Spec { res: 256, seed, set: Set::All, eb: true });
        let setup = DefenseSetup {
            base: &base.model,
            f_g: &g.model,
            f_g_record: &g.record,
            manifest_hash: &c.hash,
            manifest: &c.manifest,
            canaries: &c.canaries,
            test: &tests,
            seed,
        };
        let e = evaluate_defense(&setup, Defense::Eb, &eb.model, &kinds).unwrap();
        m_base.push(e.context("baseline").unwrap().sets.m.len() as f64);
        delta.push(100.0 * e.delta_anls);
        for (i, row) in e.contexts.iter().enumerate() {
            per_context[i].push(row.sets.m.len() as f64);
        }
    }
    let worst = per_context.iter().map(|v| median(v.clone())).fold(0.0, f64::max);
    let (mb, d) = (median(m_base.clone()), median(delta.clone()));
    verdict(
        "extraction blocking",
        mb <= 2.0 && d >= -1.0 && worst <= 2.0,
        &format!("baseline |M| {m_base:?} (median {mb}), dANLS {delta:.2?} points (median {d:.2}), worst per-context median |M| {worst}"),
    );
}

#[test]
fn modality_probes() {
    let kinds = all_kinds();
    let probes: Vec<AttackKind> = kinds
        .into_iter()
        .filter(|k| matches!(k, AttackKind::ImageOnlyProbe | AttackKind::ConstantImage { .. }))
        .collect();
    let mut image_only = vec![];
    let mut constant: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for seed in SEEDS {
        for row in ablation(256, seed, &probes).rows {
            match row.kind {
                AttackKind::ImageOnlyProbe => image_only.push(row.emitted as f64),
                _ => constant.entry(row.label.clone()).or_default().push(row.sets.e.len() as f64),
            }
        }
    }
    let io = median(image_only.clone());
    let worst = constant.values().map(|v| median(v.clone())).fold(0.0, f64::max);
    verdict(
        "modality probes",
        io == 0.0 && worst <= 1.0,
        &format!("image-only emitted {image_only:?}; constant-image extractions {constant:?}"),
    );
}

#[test]
fn redaction_soundness() {
    let cfg = CorpusConfig::default();
    let (mut checked, mut failed, mut leaked) = (0, 0, 0);
    for seed in 100..110 {
        let m = gen_corpus(&cfg, seed).unwrap();
        let canaries = mark_canaries(&m, cfg.canary_count, &cfg.duplication_profile, seed).unwrap();
        for e in &canaries.entries {
            let doc = m.doc(&e.doc_id).unwrap();
            let answer = &doc.qa[e.qa_index].answer;
            let page = render(doc, docmem::raster::CANONICAL_RES).unwrap();
            let red = redact_answer(doc, &page.image, &page.boxes, answer).unwrap();
            checked += 1;
            failed += usize::from(!verify_redaction(doc, &red, answer));
            let boxes: Vec<_> =
                doc.occurrences(answer).map(|f| page.boxes.get(&f.name).copied().unwrap_or(f.bbox)).collect();
            let w = red.width();
            leaked += page
                .image
                .pixels()
                .iter()
                .zip(red.pixels())
                .enumerate()
                .filter(|(_, (a, b))| a != b)
                .filter(|(i, _)| {
                    let (x, y) = (i % w, i / w);
                    !boxes.iter().any(|b| x >= b.x && x < b.right() && y >= b.y && y < b.bottom())
                })
                .count();
        }
    }
    verdict(
        "redaction soundness",
        failed == 0 && leaked == 0 && checked > 0,
        &format!(
            "{checked} canaries over 10 corpora, {failed} failed verification, {leaked} changed pixels outside boxes"
        ),
    );
}

fn brute_force(a: &[char], b: &[char], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if let Some(&d) = memo.get(&(a.len(), b.len())) {
        return d;
    }
    let d = if a[0] == b[0] {
        brute_force(&a[1..], &b[1..], memo)
    } else {
        1 + brute_force(&a[1..], b, memo).min(brute_force(a, &b[1..], memo)).min(brute_force(&a[1..], &b[1..], memo))
    };
    memo.insert((a.len(), b.len()), d);
    d
}

#[test]
fn metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let alphabet: Vec<char> = "abcdeé ".chars().collect();
    let word = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(0..=12);
        (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
    };
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let (a, b) = (word(&mut rng), word(&mut rng));
        let (ac, bc): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        mismatches += usize::from(levenshtein(&a, &b) != brute_force(&ac, &bc, &mut HashMap::new()));
    }

    let mut axioms = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases: 512,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let axioms_ok = axioms
        .run(&("[a-c]{0,8}", "[a-c]{0,8}", "[a-c]{0,8}"), |(a, b, c)| {
            prop_assert_eq!(levenshtein(&a, &a), 0);
            prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
            Ok(())
        })
        .is_ok();

    // "ab" vs "ac" sits exactly on 0.5; "abc" vs "axy" just below it.
    let tau_ok = nls("ab", "ac") == 0.5
        && anls("ab", &["ac"], ANLS_TAU).unwrap() == 0.5
        && anls("abc", &["axy"], ANLS_TAU).unwrap() == 0.0
        && anls("abcd", &["abcx"], 0.75).unwrap() == 0.75
        && anls("abcd", &["abxx"], 0.75).unwrap() == 0.0
        && anls("Ann  LEE", &["ann lee"], 1.0).unwrap() == 1.0
        && anls("ann le", &["ann lee"], 1.0).unwrap() == 0.0;
    verdict(
        "metric oracles",
        mismatches == 0 && axioms_ok && tau_ok,
        &format!("{mismatches} mismatches in 10000 pairs, axioms {axioms_ok}, tau boundaries {tau_ok}"),
    );
}

fn cli(args: &[&str]) {
    let mut argv = vec!["docmem"];
    argv.extend_from_slice(args);
    docmem_cli::run(docmem_cli::Cli::parse_from(argv)).unwrap_or_else(|e| panic!("{args:?}: {e:#}"));
}

/// gen, train, audit and scores from scratch in `dir`; returns the reports.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    fs::write(
        p("gen.json"),
        r#"{"seed": 5, "corpus": {"train_docs": 40, "validation_docs": 6, "test_docs": 6, "pretrain_docs": 0,
            "canary_count": 12, "duplication_profile": {"1": 8, "2": 4}}}"#,
    )
    .unwrap();
    fs::write(
        p("model.json"),
        r#"{"input_res": 32, "d_model": 16, "n_heads": 2, "ffn_dim": 32, "max_epochs": 2, "seed": 3}"#,
    )
    .unwrap();
    cli(&["gen", "--config", &p("gen.json"), "--out", &p("corpus")]);
    cli(&["plan", "--corpus", &p("corpus"), "--k", "2", "--seed", "4", "--out", &p("plan.json")]);
    cli(&["train", "--corpus", &p("corpus"), "--config", &p("model.json"), "--out", &p("f.ckpt"), "--quiet"]);
    cli(&[
        "train",
        "--corpus",
        &p("corpus"),
        "--config",
        &p("model.json"),
        "--exclude-canaries",
        "--out",
        &p("fg.ckpt"),
        "--quiet",
    ]);
    fs::create_dir_all(p("splits")).unwrap();
    for k in ["0", "1"] {
        let out = format!("{}/split-{k}.ckpt", p("splits"));
        cli(&[
            "train",
            "--corpus",
            &p("corpus"),
            "--config",
            &p("model.json"),
            "--plan",
            &p("plan.json"),
            "--split",
            k,
            "--out",
            &out,
            "--quiet",
        ]);
    }
    cli(&[
        "audit",
        "--corpus",
        &p("corpus"),
        "--f",
        &p("f.ckpt"),
        "--fg",
        &p("fg.ckpt"),
        "--contexts",
        "all",
        "--seed",
        "6",
        "--out",
        &p("audit.json"),
    ]);
    cli(&[
        "scores",
        "--corpus",
        &p("corpus"),
        "--plan",
        &p("plan.json"),
        "--checkpoints",
        &p("splits"),
        "--seed",
        "6",
        "--out",
        &p("scores.json"),
    ]);
    ["corpus/manifest.jsonl", "f.ckpt", "fg.ckpt", "audit.json", "scores.json"]
        .iter()
        .map(|n| (n.to_string(), fs::read(dir.join(n)).unwrap()))
        .collect()
}

#[test]
fn determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline(a.path()), pipeline(b.path()));
    let differing: Vec<&str> = ra.iter().zip(&rb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    verdict("determinism", differing.is_empty(), &format!("{} artifacts compared, differing: {differing:?}", ra.len()));
}
