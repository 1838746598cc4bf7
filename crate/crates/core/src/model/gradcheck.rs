//! Finite-difference verification of the reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::Tape;
use super::net::{Encoded, ModelConfig, Network};
use crate::error::Result;
use crate::raster::PageImage;
use crate::util::derive_seed;

pub const MIN_COORDS: usize = 200;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCheckMode {
    /// The full encoder-decoder loss.
    Full,
    /// A chain of the model's affine maps with no normalization, attention
    /// or activation, scored by a fixed linear read-out.
    LinearOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub coords: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn examples(net: &Network, seed: u64) -> Result<Vec<Encoded>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = net.config.input_res;
    let texts = [("Who is it?", "Ann Lee"), ("When?", "2001"), ("Where", "Oslo")];
    texts
        .iter()
        .map(|(q, a)| {
            let px = (0..res * res).map(|_| if rng.gen_bool(0.3) { rng.gen_range(0.0..1.0) } else { 1.0 }).collect();
            net.encode_example(&PageImage::from_pixels(res, res, px)?, q, Some(a))
        })
        .collect()
}

fn linear_objective(net: &Network, params: &[f64], ex: &Encoded, weights: &[f64]) -> (f64, Vec<f64>) {
    let mut tape = Tape::new(params);
    let spec = |n: &str| net.layout.get(n).expect("tensor");
    let p = |t: &mut Tape<'_, f64>, n: &str| {
        let s = spec(n);
        t.param(s.offset, s.rows, s.cols)
    };
    let x = tape.input(super::tensor::Mat::from_vec(
        ex.patches.rows,
        ex.patches.cols,
        ex.patches.data.iter().map(|&v| v as f64).collect(),
    ));
    let (w, b) = (p(&mut tape, "patch_proj.w"), p(&mut tape, "patch_proj.b"));
    let h = tape.linear(x, w, Some(b));
    let (w, b) = (p(&mut tape, "enc.0.ffn1.w"), p(&mut tape, "enc.0.ffn1.b"));
    let h = tape.linear(h, w, Some(b));
    let (w, b) = (p(&mut tape, "enc.0.ffn2.w"), p(&mut tape, "enc.0.ffn2.b"));
    let h = tape.linear(h, w, Some(b));
    let (w, b) = (p(&mut tape, "out.w"), p(&mut tape, "out.b"));
    let h = tape.linear(h, w, Some(b));
    let root = tape.dot(h, weights[..tape.shape(h).0 * tape.shape(h).1].to_vec());
    let mut g = vec![0.0; params.len()];
    tape.backward(root, &mut g);
    (tape.scalar(root), g)
}

/// Compares reverse-mode gradients with central differences at step `eps`
/// on `coords` random coordinates (at least [`MIN_COORDS`]).
pub fn grad_check(config: &ModelConfig, eps: f64, coords: usize, mode: GradCheckMode) -> Result<GradCheckReport> {
    let net = Network::new(config.clone())?;
    let mut params: Vec<f64> = net.init();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x6c));
    // zero-initialized biases and unit gains would hide their own errors
    for v in params.iter_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    let data = examples(&net, derive_seed(config.seed, 0x6d))?;
    let refs: Vec<&Encoded> = data.iter().collect();
    let weights: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let objective = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        match mode {
            GradCheckMode::Full => net.loss_and_grad(p, &refs),
            GradCheckMode::LinearOnly => Ok(linear_objective(&net, p, &data[0], &weights)),
        }
    };
    let (_, analytic) = objective(&params)?;
    let candidates: Vec<usize> = match mode {
        GradCheckMode::Full => (0..params.len()).collect(),
        GradCheckMode::LinearOnly => ["patch_proj", "enc.0.ffn1", "enc.0.ffn2", "out"]
            .iter()
            .flat_map(|n| [format!("{n}.w"), format!("{n}.b")])
            .flat_map(|n| {
                let s = net.layout.get(&n).expect("tensor").clone();
                s.offset..s.offset + s.rows * s.cols
            })
            .collect(),
    };
    let n = coords.max(MIN_COORDS).min(candidates.len());
    let chosen = sample(&mut rng, candidates.len(), n);
    let mut max_rel: f64 = 0.0;
    let mut sum_rel = 0.0;
    for i in chosen.iter() {
        let c = candidates[i];
        let orig = params[c];
        params[c] = orig + eps;
        let up = objective(&params)?.0;
        params[c] = orig - eps;
        let down = objective(&params)?.0;
        params[c] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let e = rel_error(analytic[c], numeric);
        max_rel = max_rel.max(e);
        sum_rel += e;
    }
    Ok(GradCheckReport { eps, coords: n, max_rel_error: max_rel, mean_rel_error: sum_rel / n as f64 })
}
