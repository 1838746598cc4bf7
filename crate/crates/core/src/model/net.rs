//! Encoder-decoder network: configuration, parameter layout, forward pass
//! and batch loss/gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::autodiff::{Activation, NodeId, Tape};
use super::tensor::Mat;
use super::vocab::{Vocab, ABSTAIN, ABSTAIN_TEXT, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::raster::PageImage;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_res: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub max_question_len: usize,
    pub max_answer_len: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub pretrain: bool,
    pub activation: Activation,
    /// Drop all-white patches from the encoder input.
    pub skip_blank_patches: bool,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub warmup_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_res: 256,
            patch_size: 8,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            ffn_dim: 256,
            max_question_len: 40,
            max_answer_len: 24,
            learning_rate: 2e-3,
            batch_size: 16,
            patience: 3,
            max_epochs: 40,
            seed: 0,
            pretrain: false,
            activation: Activation::Gelu,
            skip_blank_patches: true,
            grad_clip: 1.0,
            warmup_steps: 100,
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self {
            input_res: 16,
            patch_size: 8,
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            ffn_dim: 32,
            max_question_len: 8,
            max_answer_len: 6,
            skip_blank_patches: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ShapeMismatch(m));
        if self.patch_size == 0 || !self.input_res.is_multiple_of(self.patch_size) {
            return bad(format!("input_res {} not divisible by patch_size {}", self.input_res, self.patch_size));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.batch_size == 0 || self.max_answer_len == 0 {
            return bad("batch_size and max_answer_len must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_res / self.patch_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// Named tensors in storage order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
}

impl ParamLayout {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> T {
        let offset = self.total;
        self.tensors.push(TensorSpec { name: name.into(), rows, cols, offset });
        self.total += rows * cols;
        T { offset, rows, cols }
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, Copy)]
struct T {
    offset: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: T,
    b: T,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: T,
    b: T,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: Norm,
    attn: Attn,
    ln_cross: Option<Norm>,
    cross: Option<Attn>,
    ln2: Norm,
    ff1: Lin,
    ff2: Lin,
}

/// Architecture bound to a parameter layout.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub layout: ParamLayout,
    patch: Lin,
    pos_row: T,
    pos_col: T,
    segment: T,
    tok: T,
    q_pos: T,
    dec_pos: T,
    enc: Vec<Block>,
    enc_ln: Norm,
    dec: Vec<Block>,
    dec_ln: Norm,
    out: Lin,
}

/// One training or evaluation example in model-input form.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Flattened patches, ink-positive (1 − pixel), one row per kept patch.
    pub patches: Mat<f32>,
    /// Grid cell (row, col) of each kept patch.
    pub cells: Vec<(usize, usize)>,
    pub question: Vec<usize>,
    /// `[BOS, a_1, …, a_n, EOS]`; empty at inference.
    pub answer: Vec<usize>,
}

/// Splits a square image into row-major flattened patches.
pub fn patchify(img: &PageImage, patch_size: usize) -> Result<Vec<Vec<f32>>> {
    let res = img.width();
    if img.height() != res || patch_size == 0 || !res.is_multiple_of(patch_size) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} image cannot be split into {patch_size}px patches",
            img.width(),
            img.height()
        )));
    }
    let g = res / patch_size;
    let px = img.pixels();
    let mut out = Vec::with_capacity(g * g);
    for pr in 0..g {
        for pc in 0..g {
            let mut v = Vec::with_capacity(patch_size * patch_size);
            for y in 0..patch_size {
                let start = (pr * patch_size + y) * res + pc * patch_size;
                v.extend_from_slice(&px[start..start + patch_size]);
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[Vec<f32>], patch_size: usize) -> Result<PageImage> {
    let g = (patches.len() as f64).sqrt() as usize;
    if g * g != patches.len() || patches.iter().any(|p| p.len() != patch_size * patch_size) {
        return Err(Error::ShapeMismatch("patch count is not a square grid".into()));
    }
    let res = g * patch_size;
    let mut px = vec![0.0; res * res];
    for (i, p) in patches.iter().enumerate() {
        let (pr, pc) = (i / g, i % g);
        for y in 0..patch_size {
            let start = (pr * patch_size + y) * res + pc * patch_size;
            px[start..start + patch_size].copy_from_slice(&p[y * patch_size..(y + 1) * patch_size]);
        }
    }
    PageImage::from_pixels(res, res, px)
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::default();
        let (d, f, v) = (config.d_model, config.ffn_dim, vocab.len());
        let g = config.grid();
        let p2 = config.patch_size * config.patch_size;
        let mut l = ParamLayout { tensors: Vec::new(), total: 0 };
        let lin = |l: &mut ParamLayout, name: &str, i: usize, o: usize| Lin {
            w: l.add(format!("{name}.w"), i, o),
            b: l.add(format!("{name}.b"), 1, o),
        };
        let norm = |l: &mut ParamLayout, name: &str| Norm {
            g: l.add(format!("{name}.gain"), 1, d),
            b: l.add(format!("{name}.bias"), 1, d),
        };
        let attn = |l: &mut ParamLayout, name: &str| Attn {
            q: lin(l, &format!("{name}.q"), d, d),
            k: lin(l, &format!("{name}.k"), d, d),
            v: lin(l, &format!("{name}.v"), d, d),
            o: lin(l, &format!("{name}.o"), d, d),
        };
        let patch = lin(&mut l, "patch_proj", p2, d);
        let pos_row = l.add("pos.row", g, d);
        let pos_col = l.add("pos.col", g, d);
        let segment = l.add("segment", 2, d);
        let tok = l.add("tok_emb", v, d);
        let q_pos = l.add("pos.question", config.max_question_len + 1, d);
        let dec_pos = l.add("pos.answer", config.max_answer_len + 2, d);
        let block = |l: &mut ParamLayout, name: String, cross: bool| Block {
            ln1: norm(l, &format!("{name}.ln1")),
            attn: attn(l, &format!("{name}.self_attn")),
            ln_cross: cross.then(|| norm(l, &format!("{name}.ln_cross"))),
            cross: cross.then(|| attn(l, &format!("{name}.cross_attn"))),
            ln2: norm(l, &format!("{name}.ln2")),
            ff1: lin(l, &format!("{name}.ffn1"), d, f),
            ff2: lin(l, &format!("{name}.ffn2"), f, d),
        };
        let enc = (0..config.n_enc_layers).map(|i| block(&mut l, format!("enc.{i}"), false)).collect();
        let enc_ln = norm(&mut l, "enc.ln_f");
        let dec = (0..config.n_dec_layers).map(|i| block(&mut l, format!("dec.{i}"), true)).collect();
        let dec_ln = norm(&mut l, "dec.ln_f");
        let out = lin(&mut l, "out", d, v);
        Ok(Self {
            config,
            vocab,
            layout: l,
            patch,
            pos_row,
            pos_col,
            segment,
            tok,
            q_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Deterministic initialization from `config.seed`.
    pub fn init<S: Scalar>(&self) -> Vec<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::util::derive_seed(self.config.seed, 0x1417));
        let mut p = vec![0.0f64; self.layout.total];
        let d = self.config.d_model;
        let depth = (self.config.n_enc_layers + self.config.n_dec_layers).max(1) as f64;
        for t in &self.layout.tensors {
            let slice = &mut p[t.offset..t.offset + t.rows * t.cols];
            let name = t.name.as_str();
            if name.ends_with(".gain") {
                slice.fill(1.0);
            } else if name.ends_with(".b") || name.ends_with(".bias") {
            } else if name == "pos.row" || name == "pos.col" {
                // rows in the first half of the channels, columns in the second
                let half = t.cols / 2;
                let mut table = vec![0.0; t.rows * half];
                sinusoid(&mut table, t.rows, half, 0.7);
                let skip = if name == "pos.row" { 0 } else { half };
                for r in 0..t.rows {
                    slice[r * t.cols + skip..r * t.cols + skip + half]
                        .copy_from_slice(&table[r * half..(r + 1) * half]);
                }
            } else if name == "pos.question" || name == "pos.answer" {
                sinusoid(slice, t.rows, t.cols, 0.5);
            } else if name == "segment" || name == "tok_emb" {
                fill_normal(&mut rng, slice, 0.5);
            } else {
                let mut std = 1.0 / (t.rows as f64).sqrt();
                if name.ends_with(".o.w") || name.ends_with(".ffn2.w") {
                    std /= (2.0 * depth).sqrt();
                }
                if name == "out.w" {
                    std = 1.0 / d as f64;
                }
                fill_normal(&mut rng, slice, std);
            }
        }
        p.into_iter().map(S::from_f64_lossy).collect()
    }

    /// Converts raw inputs into model form. Answers are tokenized with
    /// BOS/EOS; the abstention string becomes the single ABSTAIN token.
    pub fn encode_example(&self, img: &PageImage, question: &str, answer: Option<&str>) -> Result<Encoded> {
        let c = &self.config;
        if img.width() != c.input_res || img.height() != c.input_res {
            return Err(Error::ShapeMismatch(format!(
                "image is {}x{}, model expects {}",
                img.width(),
                img.height(),
                c.input_res
            )));
        }
        let g = c.grid();
        let p2 = c.patch_size * c.patch_size;
        let mut data = Vec::new();
        let mut cells = Vec::new();
        for (i, p) in patchify(img, c.patch_size)?.into_iter().enumerate() {
            if c.skip_blank_patches && p.iter().all(|&v| v >= 1.0) {
                continue;
            }
            data.extend(p.iter().map(|&v| 1.0 - v));
            cells.push((i / g, i % g));
        }
        let question = self.vocab.encode_chars(question, c.max_question_len)?;
        let answer = match answer {
            Some(ABSTAIN_TEXT) => vec![BOS, ABSTAIN, EOS],
            Some(a) => self.vocab.tokenize(a, c.max_answer_len)?,
            None => Vec::new(),
        };
        Ok(Encoded { patches: Mat::from_vec(cells.len(), p2, data), cells, question, answer })
    }

    fn p(&self, tape: &mut Tape<'_, impl Scalar>, t: T) -> NodeId {
        tape.param(t.offset, t.rows, t.cols)
    }

    fn linear<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: NodeId, l: Lin) -> NodeId {
        let w = self.p(tape, l.w);
        let b = self.p(tape, l.b);
        tape.linear(x, w, Some(b))
    }

    fn norm<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: NodeId, n: Norm) -> NodeId {
        let g = self.p(tape, n.g);
        let b = self.p(tape, n.b);
        tape.layer_norm(x, g, b)
    }

    fn mha<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: NodeId, kv: NodeId, a: Attn, causal: bool) -> NodeId {
        let q = self.linear(tape, x, a.q);
        let k = self.linear(tape, kv, a.k);
        let v = self.linear(tape, kv, a.v);
        let o = tape.attention(q, k, v, self.config.n_heads, causal);
        self.linear(tape, o, a.o)
    }

    fn block<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: NodeId, b: &Block, memory: Option<NodeId>) -> NodeId {
        let h = self.norm(tape, x, b.ln1);
        let a = self.mha(tape, h, h, b.attn, memory.is_some());
        let mut x = tape.add(x, a);
        if let (Some(ln), Some(cross), Some(mem)) = (b.ln_cross, b.cross, memory) {
            let h = self.norm(tape, x, ln);
            let a = self.mha(tape, h, mem, cross, false);
            x = tape.add(x, a);
        }
        let h = self.norm(tape, x, b.ln2);
        let f = self.linear(tape, h, b.ff1);
        let f = tape.act(f, self.config.activation);
        let f = self.linear(tape, f, b.ff2);
        tape.add(x, f)
    }

    /// Encoder over `[question ; SEP ; patches]`.
    pub fn encode<S: Scalar>(&self, tape: &mut Tape<'_, S>, ex: &Encoded) -> NodeId {
        let nq = ex.question.len();
        let mut ids = ex.question.clone();
        ids.push(SEP);
        let tok = self.p(tape, self.tok);
        let q = tape.gather(tok, &ids);
        let qp = self.p(tape, self.q_pos);
        let qpos = tape.gather(qp, &(0..=nq).collect::<Vec<_>>());
        let seg = self.p(tape, self.segment);
        let qseg = tape.gather(seg, &vec![0; nq + 1]);
        let q = tape.add(q, qpos);
        let q = tape.add(q, qseg);
        let mut parts = vec![q];
        if !ex.cells.is_empty() {
            let patches = ex.patches.data.iter().map(|&v| S::from_f32(v).unwrap()).collect();
            let raw = tape.input(Mat::from_vec(ex.patches.rows, ex.patches.cols, patches));
            let x = self.linear(tape, raw, self.patch);
            let pr = self.p(tape, self.pos_row);
            let rows = tape.gather(pr, &ex.cells.iter().map(|c| c.0).collect::<Vec<_>>());
            let pc = self.p(tape, self.pos_col);
            let cols = tape.gather(pc, &ex.cells.iter().map(|c| c.1).collect::<Vec<_>>());
            let pseg = tape.gather(seg, &vec![1; ex.cells.len()]);
            let x = tape.add(x, rows);
            let x = tape.add(x, cols);
            let x = tape.add(x, pseg);
            parts.push(x);
        }
        let mut h = tape.concat(&parts);
        for b in &self.enc {
            h = self.block(tape, h, b, None);
        }
        self.norm(tape, h, self.enc_ln)
    }

    /// Decoder logits for each prefix position.
    pub fn decode<S: Scalar>(&self, tape: &mut Tape<'_, S>, memory: NodeId, prefix: &[usize]) -> NodeId {
        let tok = self.p(tape, self.tok);
        let x = tape.gather(tok, prefix);
        let dp = self.p(tape, self.dec_pos);
        let pos = tape.gather(dp, &(0..prefix.len()).collect::<Vec<_>>());
        let mut h = tape.add(x, pos);
        for b in &self.dec {
            h = self.block(tape, h, b, Some(memory));
        }
        let h = self.norm(tape, h, self.dec_ln);
        self.linear(tape, h, self.out)
    }

    /// Logits `(prefix_len × |vocab|)` for an answer prefix.
    pub fn forward<S: Scalar>(&self, params: &[S], ex: &Encoded, prefix: &[usize]) -> Result<Mat<S>> {
        self.check_params(params)?;
        self.check_prefix(prefix)?;
        let mut tape = Tape::new(params);
        let mem = self.encode(&mut tape, ex);
        let logits = self.decode(&mut tape, mem, prefix);
        let out = tape.value(logits).to_owned();
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(out)
    }

    fn check_params<S>(&self, params: &[S]) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, layout needs {}",
                params.len(),
                self.layout.total
            )));
        }
        Ok(())
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        if prefix.is_empty() || prefix.len() > self.config.max_answer_len + 2 {
            return Err(Error::ShapeMismatch(format!("answer prefix of length {}", prefix.len())));
        }
        if let Some(&t) = prefix.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::ShapeMismatch(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Builds the teacher-forced loss graph `scale · Σ CE` for one example.
    fn example_loss<S: Scalar>(&self, tape: &mut Tape<'_, S>, ex: &Encoded, scale: S) -> NodeId {
        let n = ex.answer.len() - 1;
        let mem = self.encode(tape, ex);
        let logits = self.decode(tape, mem, &ex.answer[..n]);
        tape.cross_entropy(logits, &ex.answer[1..], scale)
    }

    /// Mean token-level cross-entropy over the batch and its gradient.
    pub fn loss_and_grad<S: Scalar>(&self, params: &[S], batch: &[&Encoded]) -> Result<(S, Vec<S>)> {
        self.check_params(params)?;
        let tokens = self.batch_tokens(batch)?;
        let scale = S::one() / S::from_usize(tokens).unwrap();
        let parts: Vec<(S, Vec<S>)> = batch
            .par_iter()
            .map(|ex| {
                let mut tape = Tape::new(params);
                let root = self.example_loss(&mut tape, ex, scale);
                let mut g = vec![S::zero(); params.len()];
                tape.backward(root, &mut g);
                (tape.scalar(root), g)
            })
            .collect();
        let mut loss = S::zero();
        let mut grad = vec![S::zero(); params.len()];
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("loss or gradient".into()));
        }
        Ok((loss, grad))
    }

    /// Mean token-level cross-entropy without gradients.
    pub fn loss<S: Scalar>(&self, params: &[S], batch: &[&Encoded]) -> Result<S> {
        self.check_params(params)?;
        let tokens = self.batch_tokens(batch)?;
        let scale = S::one() / S::from_usize(tokens).unwrap();
        let parts: Vec<S> = batch
            .par_iter()
            .map(|ex| {
                let mut tape = Tape::new(params);
                let root = self.example_loss(&mut tape, ex, scale);
                tape.scalar(root)
            })
            .collect();
        let loss = parts.into_iter().fold(S::zero(), |a, b| a + b);
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(loss)
    }

    fn batch_tokens(&self, batch: &[&Encoded]) -> Result<usize> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("batch".into()));
        }
        let mut n = 0;
        for ex in batch {
            if ex.answer.len() < 2 || ex.answer[0] != BOS {
                return Err(Error::ShapeMismatch("training example without a tokenized answer".into()));
            }
            self.check_prefix(&ex.answer[..ex.answer.len() - 1])?;
            n += ex.answer.len() - 1;
        }
        Ok(n)
    }

    /// Greedy decoding; ties go to the lowest token id.
    pub fn generate<S: Scalar>(&self, params: &[S], ex: &Encoded) -> Vec<usize> {
        let mut tape = Tape::new(params);
        let mem = self.encode(&mut tape, ex);
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        while out.len() < self.config.max_answer_len + 1 {
            let logits = self.decode(&mut tape, mem, &prefix);
            let v = tape.value(logits);
            let next = argmax(v.row(v.rows - 1));
            out.push(next);
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        out
    }

    pub fn predict<S: Scalar>(&self, params: &[S], ex: &Encoded) -> String {
        self.vocab.detokenize(&self.generate(params, ex))
    }
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f64], std: f64) {
    let n = Normal::new(0.0, std).expect("positive std");
    for v in out {
        *v = n.sample(rng);
    }
}

fn sinusoid(out: &mut [f64], rows: usize, cols: usize, amp: f64) {
    for r in 0..rows {
        for c in 0..cols {
            let freq = 1.0 / 100f64.powf((2 * (c / 2)) as f64 / cols as f64);
            let a = r as f64 * freq;
            out[r * cols + c] = amp * if c % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(res: usize) -> PageImage {
        let px = (0..res * res).map(|i| if i % 7 == 0 { 0.0 } else { 1.0 }).collect();
        PageImage::from_pixels(res, res, px).unwrap()
    }

    #[test]
    fn patchify_partition() {
        let img = page(64);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.len(), 64);
        assert!(p.iter().all(|v| v.len() == 64));
        assert_eq!(unpatchify(&p, 8).unwrap(), img);
        let white = patchify(&PageImage::blank(32, 32), 8).unwrap();
        assert!(white.iter().flatten().all(|&v| v == 1.0));
        assert!(matches!(patchify(&PageImage::blank(30, 30), 8), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn config_invariants() {
        assert!(ModelConfig { input_res: 30, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { n_heads: 5, ..ModelConfig::default() }.validate().is_err());
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn default_size_is_a_few_hundred_thousand() {
        let n = Network::new(ModelConfig::default()).unwrap().num_params();
        assert!((200_000..400_000).contains(&n), "{n}");
    }

    #[test]
    fn logits_shape_and_determinism() {
        let net = Network::new(ModelConfig::tiny()).unwrap();
        let params: Vec<f64> = net.init();
        let ex = net.encode_example(&page(16), "Who?", None).unwrap();
        let a = net.forward(&params, &ex, &[BOS, 10, 11]).unwrap();
        assert_eq!((a.rows, a.cols), (3, 80));
        assert_eq!(a, net.forward(&params, &ex, &[BOS, 10, 11]).unwrap());
    }

    #[test]
    fn zero_output_projection_gives_uniform_loss() {
        let net = Network::new(ModelConfig::tiny()).unwrap();
        let mut params: Vec<f64> = net.init();
        for name in ["out.w", "out.b"] {
            let t = net.layout.get(name).unwrap();
            params[t.offset..t.offset + t.rows * t.cols].fill(0.0);
        }
        let ex = net.encode_example(&page(16), "Who?", Some("Ann")).unwrap();
        let loss = net.loss(&params, &[&ex]).unwrap();
        assert!((loss - 80f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn patch_order_irrelevant_without_positions() {
        let net = Network::new(ModelConfig::tiny()).unwrap();
        let mut params: Vec<f64> = net.init();
        for name in ["pos.row", "pos.col"] {
            let t = net.layout.get(name).unwrap();
            params[t.offset..t.offset + t.rows * t.cols].fill(0.0);
        }
        let ex = net.encode_example(&page(16), "Who?", None).unwrap();
        let mut swapped = ex.clone();
        let w = ex.patches.cols;
        swapped.patches.data[..w].copy_from_slice(&ex.patches.data[w..2 * w]);
        swapped.patches.data[w..2 * w].copy_from_slice(&ex.patches.data[..w]);
        swapped.cells.swap(0, 1);
        let a = net.forward(&params, &ex, &[BOS, 7]).unwrap();
        let b = net.forward(&params, &swapped, &[BOS, 7]).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_and_grad_rejects_bad_input() {
        let net = Network::new(ModelConfig::tiny()).unwrap();
        let params: Vec<f64> = net.init();
        assert!(matches!(net.loss_and_grad(&params, &[]), Err(Error::EmptyDataset(_))));
        assert!(matches!(
            net.forward(&params[1..], &net.encode_example(&page(16), "", None).unwrap(), &[BOS]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(net.encode_example(&page(32), "", None), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn unused_positions_get_zero_gradient() {
        let net = Network::new(ModelConfig::tiny()).unwrap();
        let params: Vec<f64> = net.init();
        let ex = net.encode_example(&page(16), "Who?", Some("A")).unwrap();
        let (_, g) = net.loss_and_grad(&params, &[&ex]).unwrap();
        // answer has 3 tokens, decoder sees positions 0..2 only
        let t = net.layout.get("pos.answer").unwrap();
        let unused = &g[t.offset + 2 * t.cols..t.offset + t.rows * t.cols];
        assert!(unused.iter().all(|&v| v == 0.0));
        assert!(g[t.offset..t.offset + 2 * t.cols].iter().any(|&v| v != 0.0));
    }
}
