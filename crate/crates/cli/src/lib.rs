//! The `docmem` command line: corpus generation, training, audits, score
//! estimation, defenses and report rendering.

pub mod config;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use docmem::attack::{all_kinds, build_contexts, run_ablation_suite, AttackKind};
use docmem::audit::{estimate_scores, histogram2d, sample_splits, Answerer, SplitPlan, M_BINS, S_BINS};
use docmem::corpus::{
    gen_corpus, load_canaries, load_corpus, manifest_digest, mark_canaries, pii_histogram, save_canaries, save_corpus,
    CanarySet, CorpusManifest, CANARY_FILE,
};
use docmem::defend::{context_table, defense_table, evaluate_defense, Defense, DefenseSetup};
use docmem::model::{Checkpoint, EpochLog, Model, ModelConfig};
use docmem::pipeline::{TrainJob, TrainingSet, EB_AUGMENTATION};
use docmem::raster::{render, write_pgm, CANONICAL_RES};
use docmem::util::sha256_hex;
use docmem::Error;
use rayon::prelude::*;

use config::{read_json, GenConfig};
use report::{Body, DefenseBody, Provenance, Report, ScoresBody};

pub const PAGES_DIR: &str = "pages";

/// File name of split `k`'s checkpoint inside a checkpoint directory.
pub fn split_checkpoint_name(k: usize) -> String {
    format!("split-{k}.ckpt")
}

#[derive(Debug, Parser)]
#[command(name = "docmem", version, about = "Memorization audits for document VQA models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus directory written by `gen`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Canary file (defaults to the corpus's own).
    #[arg(long)]
    pub canaries: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DefenseArg {
    None,
    Eb,
    Pr,
    Ar,
    Itp,
}

impl From<DefenseArg> for Defense {
    fn from(d: DefenseArg) -> Self {
        match d {
            DefenseArg::None => Defense::None,
            DefenseArg::Eb => Defense::Eb,
            DefenseArg::Pr => Defense::Pr,
            DefenseArg::Ar => Defense::Ar,
            DefenseArg::Itp => Defense::Itp,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a corpus, its canaries and page images.
    Gen {
        /// JSON generation config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Do not write PGM pages.
        #[arg(long)]
        skip_images: bool,
    },
    /// Draw a balanced K-split canary membership plan.
    Plan {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// JSON model config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Input resolution override.
        #[arg(long)]
        resolution: Option<usize>,
        /// Train on the pretraining pool first.
        #[arg(long)]
        pretrain: bool,
        /// Remove every canary sample (generalization baseline).
        #[arg(long, conflicts_with = "split")]
        exclude_canaries: bool,
        /// Train split `k` of `--plan`.
        #[arg(long, requires = "plan")]
        split: Option<usize>,
        #[arg(long, requires = "split")]
        plan: Option<PathBuf>,
        /// Train on the extraction-blocking augmentation.
        #[arg(long)]
        extraction_blocking: bool,
        /// Start from this checkpoint's parameters and architecture.
        #[arg(long, conflicts_with_all = ["config", "resolution", "pretrain"])]
        init: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Measure E, G and M = E - G under chosen attack contexts.
    Audit {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Checkpoint of the audited model.
        #[arg(long)]
        f: PathBuf,
        /// Checkpoint of the generalization baseline.
        #[arg(long)]
        fg: PathBuf,
        /// Comma-separated context labels, or `all`.
        #[arg(long, default_value = "baseline")]
        contexts: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Estimate per-canary memorization and simplicity scores from K split models.
    Scores {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        plan: PathBuf,
        /// Directory holding split-<k>.ckpt for every split.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Evaluation worker threads.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Writes one histogram SVG per subset here.
        #[arg(long)]
        svg_dir: Option<PathBuf>,
    },
    /// Evaluate a defense: utility change and M per attack context.
    Defend {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_enum)]
        defense: DefenseArg,
        /// Undefended model.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        fg: PathBuf,
        /// Existing extraction-blocking checkpoint; otherwise `eb` retrains.
        #[arg(long)]
        defended: Option<PathBuf>,
        /// Where a retrained extraction-blocking checkpoint is written.
        #[arg(long)]
        defended_out: Option<PathBuf>,
        #[arg(long, default_value = "baseline")]
        contexts: String,
        /// Row label in the defense table.
        #[arg(long, default_value = "model")]
        model_label: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Run every attack context and tabulate E, G and M.
    AttackTable {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        f: PathBuf,
        #[arg(long)]
        fg: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Render a report file as SVG.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score histogram subset: all, pii or unique_pii.
        #[arg(long, default_value = "all")]
        subset: String,
    },
}

fn file_hash(path: &Path) -> anyhow::Result<String> {
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

struct Corpus {
    manifest: CorpusManifest,
    canaries: CanarySet,
    hash: String,
    canary_file: PathBuf,
}

fn open_corpus(args: &CorpusArgs) -> anyhow::Result<Corpus> {
    if !args.corpus.is_dir() {
        bail!("corpus directory {} does not exist", args.corpus.display());
    }
    let manifest = load_corpus(&args.corpus).with_context(|| format!("loading corpus {}", args.corpus.display()))?;
    let canary_file = args.canaries.clone().unwrap_or_else(|| args.corpus.join(CANARY_FILE));
    let canaries = load_canaries(&canary_file).with_context(|| format!("loading {}", canary_file.display()))?;
    let hash = manifest_digest(&manifest)?;
    Ok(Corpus { manifest, canaries, hash, canary_file })
}

fn load_model(path: &Path, corpus: &Corpus) -> anyhow::Result<(Model<f32>, Checkpoint)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ck.header.training.manifest_hash != corpus.hash {
        return Err(Error::ManifestMismatch(format!("{} was trained on a different corpus", path.display())).into());
    }
    Ok((Model::from_checkpoint(&ck)?, ck))
}

/// Context kinds by label; `all` selects every kind.
pub fn parse_contexts(list: &str) -> anyhow::Result<Vec<AttackKind>> {
    let menu = all_kinds();
    if list.trim() == "all" {
        return Ok(menu);
    }
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|label| {
            menu.iter().find(|k| k.label() == label).cloned().with_context(|| {
                let known: Vec<String> = menu.iter().map(AttackKind::label).collect();
                format!("unknown context `{label}` (known: {})", known.join(", "))
            })
        })
        .collect()
}

fn provenance(c: &Corpus, seed: u64, inputs: &[(&str, &Path)]) -> anyhow::Result<Provenance> {
    let mut map = BTreeMap::new();
    map.insert("canaries".to_string(), file_hash(&c.canary_file)?);
    for (role, path) in inputs {
        map.insert(role.to_string(), file_hash(path)?);
    }
    Ok(Provenance { manifest_sha256: c.hash.clone(), corpus_seed: c.manifest.seed, seed, inputs: map })
}

fn progress(quiet: bool) -> impl FnMut(&EpochLog) {
    move |l: &EpochLog| {
        if !quiet {
            eprintln!(
                "{:?} epoch {:>3}  train {:.4}  val {:.4}  ({:.1}s)",
                l.stage, l.epoch, l.train_loss, l.val_loss, l.seconds
            );
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { config, out, seed, skip_images } => cmd_gen(config.as_deref(), &out, seed, skip_images),
        Command::Plan { corpus, k, seed, out } => {
            let c = open_corpus(&corpus)?;
            let plan = sample_splits(c.canaries.len(), k, seed)?;
            write(&out, &serde_json::to_vec_pretty(&plan)?)
        }
        Command::Train {
            corpus,
            config,
            out,
            resolution,
            pretrain,
            exclude_canaries,
            split,
            plan,
            extraction_blocking,
            init,
            quiet,
        } => {
            let c = open_corpus(&corpus)?;
            let init = init.as_deref().map(|p| load_model(p, &c).map(|(_, ck)| ck)).transpose()?;
            let mut mc: ModelConfig = match (&config, &init) {
                (Some(p), _) => read_json(p)?,
                (None, Some(ck)) => ck.header.config.clone(),
                (None, None) => ModelConfig::default(),
            };
            if let Some(r) = resolution {
                mc.input_res = r;
            }
            mc.pretrain |= pretrain;
            mc.validate()?;
            let plan: Option<SplitPlan> = plan.as_deref().map(read_json).transpose()?;
            let set = match (&plan, split) {
                (Some(p), Some(k)) => TrainingSet::Split { plan: p, k },
                _ if exclude_canaries => TrainingSet::ExcludeCanaries,
                _ => TrainingSet::All,
            };
            let job = TrainJob {
                manifest: &c.manifest,
                canaries: &c.canaries,
                config: mc,
                set,
                extraction_blocking,
                warm_start: init.as_ref(),
            };
            let ck = job.run(&mut progress(quiet))?;
            write(&out, &ck.to_bytes()?)
        }
        Command::Audit { corpus, f, fg, contexts, seed, out, svg } => {
            let kinds = parse_contexts(&contexts)?;
            let table = ablation_report(&corpus, &f, &fg, &kinds, seed, out.as_path(), svg.as_deref(), false)?;
            if table == 0 {
                bail!("no contexts requested");
            }
            Ok(())
        }
        Command::AttackTable { corpus, f, fg, seed, out, svg } => {
            ablation_report(&corpus, &f, &fg, &all_kinds(), seed, &out, svg.as_deref(), true).map(drop)
        }
        Command::Scores { corpus, plan, checkpoints, jobs, seed, out, svg_dir } => {
            cmd_scores(&corpus, &plan, &checkpoints, jobs, seed, &out, svg_dir.as_deref())
        }
        Command::Defend {
            corpus,
            defense,
            base,
            fg,
            defended,
            defended_out,
            contexts,
            model_label,
            seed,
            out,
            quiet,
        } => cmd_defend(DefendArgs {
            corpus: &corpus,
            defense: defense.into(),
            base: &base,
            fg: &fg,
            defended: defended.as_deref(),
            defended_out: defended_out.as_deref(),
            contexts: &contexts,
            model_label: &model_label,
            seed,
            out: &out,
            quiet,
        }),
        Command::Report { input, out, subset } => {
            let r = Report::from_json(&fs::read(&input).with_context(|| format!("reading {}", input.display()))?)?;
            write(&out, r.to_svg(&subset)?.as_bytes())
        }
    }
}

fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>, skip_images: bool) -> anyhow::Result<()> {
    let mut cfg: GenConfig = match config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = gen_corpus(&cfg.corpus, cfg.seed)?;
    let canaries = mark_canaries(
        &manifest,
        cfg.corpus.canary_count,
        &cfg.corpus.duplication_profile,
        cfg.canary_seed.unwrap_or(cfg.seed),
    )?;
    save_corpus(&manifest, out)?;
    save_canaries(&canaries, &out.join(CANARY_FILE))?;
    write(&out.join("gen_config.json"), &serde_json::to_vec_pretty(&cfg)?)?;
    if !skip_images {
        let pages = out.join(PAGES_DIR);
        fs::create_dir_all(&pages)?;
        manifest.documents().par_iter().try_for_each(|d| -> docmem::Result<()> {
            write_pgm(&render(d, CANONICAL_RES)?.image, &pages.join(format!("{}.pgm", d.doc_id)))
        })?;
    }
    let s = &manifest.splits;
    println!(
        "corpus {}: train {} / validation {} / test {} / pretrain {} documents, {} canaries",
        out.display(),
        s.train.len(),
        s.validation.len(),
        s.test.len(),
        s.pretrain_pool.len(),
        canaries.len()
    );
    for (class, n) in pii_histogram(&canaries, &manifest) {
        println!("  {class:?}: {n}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablation_report(
    corpus: &CorpusArgs,
    f: &Path,
    fg: &Path,
    kinds: &[AttackKind],
    seed: u64,
    out: &Path,
    svg: Option<&Path>,
    full_table: bool,
) -> anyhow::Result<usize> {
    let c = open_corpus(corpus)?;
    let (model_f, _) = load_model(f, &c)?;
    let (model_g, ck_g) = load_model(fg, &c)?;
    let table =
        run_ablation_suite(&model_f, &model_g, &ck_g.header.training, &c.hash, &c.manifest, &c.canaries, kinds, seed)?;
    let n = table.rows.len();
    let body = if full_table { Body::AttackTable(table) } else { Body::Audit(table) };
    let report = Report::new(provenance(&c, seed, &[("f", f), ("f_g", fg)])?, body);
    report.validate()?;
    write(out, &report.to_json()?)?;
    if let Some(p) = svg {
        write(p, report.to_svg("all")?.as_bytes())?;
    }
    Ok(n)
}

fn cmd_scores(
    corpus: &CorpusArgs,
    plan_path: &Path,
    dir: &Path,
    jobs: Option<usize>,
    seed: u64,
    out: &Path,
    svg_dir: Option<&Path>,
) -> anyhow::Result<()> {
    let c = open_corpus(corpus)?;
    let plan: SplitPlan = read_json(plan_path)?;
    if plan.membership.len() != c.canaries.len() {
        bail!("plan covers {} canaries, corpus has {}", plan.membership.len(), c.canaries.len());
    }
    let paths: Vec<PathBuf> = (0..plan.k).map(|k| dir.join(split_checkpoint_name(k))).collect();
    if let Some((split, path)) = paths.iter().enumerate().find(|(_, p)| !p.is_file()) {
        return Err(Error::MissingCheckpoint { split, path: path.clone() }.into());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build()?;
    let scores = pool.install(|| -> anyhow::Result<_> {
        let loaded: Vec<(Model<f32>, Checkpoint)> =
            paths.iter().map(|p| load_model(p, &c)).collect::<anyhow::Result<_>>()?;
        let models: Vec<(&dyn Answerer, &docmem::model::TrainingRecord)> =
            loaded.iter().map(|(m, ck)| (m as &dyn Answerer, &ck.header.training)).collect();
        let contexts = build_contexts(&c.manifest, &c.canaries, &AttackKind::Baseline, seed)?;
        Ok(estimate_scores(&models, &plan, &c.hash, &contexts)?)
    })?;
    let pii: BTreeSet<usize> = (0..c.canaries.len()).filter(|&i| c.canaries.entries[i].pii.is_pii()).collect();
    let unique: BTreeSet<usize> = pii.iter().copied().filter(|&i| c.canaries.entries[i].duplication == 1).collect();
    let mut histograms = BTreeMap::new();
    histograms.insert("all".to_string(), histogram2d(&scores, None, "all", M_BINS, S_BINS));
    histograms.insert("pii".to_string(), histogram2d(&scores, Some(&pii), "pii", M_BINS, S_BINS));
    histograms.insert("unique_pii".to_string(), histogram2d(&scores, Some(&unique), "unique_pii", M_BINS, S_BINS));
    let mut inputs: Vec<(String, &Path)> = vec![("plan".to_string(), plan_path)];
    inputs.extend(paths.iter().enumerate().map(|(k, p)| (format!("split_{k}"), p.as_path())));
    let inputs: Vec<(&str, &Path)> = inputs.iter().map(|(r, p)| (r.as_str(), *p)).collect();
    let report =
        Report::new(provenance(&c, seed, &inputs)?, Body::Scores(ScoresBody { k: plan.k, scores, histograms }));
    report.validate()?;
    write(out, &report.to_json()?)?;
    if let Some(d) = svg_dir {
        for subset in ["all", "pii", "unique_pii"] {
            write(&d.join(format!("scores_{subset}.svg")), report.to_svg(subset)?.as_bytes())?;
        }
    }
    Ok(())
}

struct DefendArgs<'a> {
    corpus: &'a CorpusArgs,
    defense: Defense,
    base: &'a Path,
    fg: &'a Path,
    defended: Option<&'a Path>,
    defended_out: Option<&'a Path>,
    contexts: &'a str,
    model_label: &'a str,
    seed: u64,
    out: &'a Path,
    quiet: bool,
}

fn cmd_defend(a: DefendArgs<'_>) -> anyhow::Result<()> {
    let c = open_corpus(a.corpus)?;
    let kinds = parse_contexts(a.contexts)?;
    let base_hash = file_hash(a.base)?;
    let (base, base_ck) = load_model(a.base, &c)?;
    let (f_g, ck_g) = load_model(a.fg, &c)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("base", a.base), ("f_g", a.fg)];

    let retrained = match (a.defense, a.defended) {
        (Defense::Eb, Some(p)) => {
            let (m, ck) = load_model(p, &c)?;
            if ck.header.training.augmentation.as_deref() != Some(EB_AUGMENTATION) {
                bail!("{} was not trained with extraction blocking", p.display());
            }
            inputs.push(("defended", p));
            Some(m)
        }
        (Defense::Eb, None) => {
            let dest = a.defended_out.context("eb retraining needs --defended-out or --defended")?;
            let rec = &base_ck.header.training;
            let set = if rec.included_canaries.is_empty() && !c.canaries.is_empty() {
                TrainingSet::ExcludeCanaries
            } else if rec.split.is_none() && rec.excluded_canaries.is_empty() {
                TrainingSet::All
            } else {
                bail!("eb retraining supports base models trained on all samples or without canaries");
            };
            let job = TrainJob {
                manifest: &c.manifest,
                canaries: &c.canaries,
                config: base_ck.header.config.clone(),
                set,
                extraction_blocking: true,
                warm_start: Some(&base_ck),
            };
            let ck = job.run(&mut progress(a.quiet))?;
            write(dest, &ck.to_bytes()?)?;
            inputs.push(("defended", dest));
            Some(Model::from_checkpoint(&ck)?)
        }
        (_, Some(_)) => bail!("--defended only applies to eb"),
        _ => None,
    };
    let defended: &dyn Answerer = retrained.as_ref().map_or(&base as &dyn Answerer, |m| m as &dyn Answerer);
    let test = c.manifest.samples(docmem::corpus::Split::Test);
    let setup = DefenseSetup {
        base: &base,
        f_g: &f_g,
        f_g_record: &ck_g.header.training,
        manifest_hash: &c.hash,
        manifest: &c.manifest,
        canaries: &c.canaries,
        test: &test,
        seed: a.seed,
    };
    let eval = evaluate_defense(&setup, a.defense, defended, &kinds)?;
    let after = file_hash(a.base)?;
    if after != base_hash {
        bail!("base checkpoint changed during evaluation");
    }
    let body = DefenseBody {
        model: a.model_label.to_string(),
        by_model: defense_table(&[(a.model_label.to_string(), vec![eval.clone()])]),
        by_context: context_table(&eval),
        base_checkpoint_after: a.defense.is_inference_time().then_some(after),
        eval,
    };
    let report = Report::new(provenance(&c, a.seed, &inputs)?, Body::Defense(Box::new(body)));
    report.validate()?;
    write(a.out, &report.to_json()?)
}
