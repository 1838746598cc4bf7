//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Tape`] borrows the flat parameter vector. Parameter nodes are views
//! into it (no copy); every other node owns its value. [`Tape::backward`]
//! walks the tape in reverse and accumulates parameter gradients into a
//! caller-provided buffer with the same layout as the parameters.

use serde::{Deserialize, Serialize};

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, softmax_in_place, Mat, MatRef};
use crate::scalar::Scalar;

pub type NodeId = usize;

/// Target index that contributes no loss.
pub const IGNORE: usize = usize::MAX;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation
    Gelu,
    Relu,
    Identity,
}

#[derive(Debug)]
enum Op<S> {
    Input,
    Param { offset: usize },
    Gather { table: NodeId, ids: Vec<usize> },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<S>, rstd: Vec<S> },
    Act { x: NodeId, kind: Activation },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<S> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, scale: S, probs: Vec<S> },
    Dot { x: NodeId, weights: Vec<S> },
}

#[derive(Debug)]
struct Node<S> {
    rows: usize,
    cols: usize,
    /// Empty for parameter views.
    value: Vec<S>,
    op: Op<S>,
}

pub struct Tape<'p, S> {
    params: &'p [S],
    nodes: Vec<Node<S>>,
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p [S]) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn value(&self, id: NodeId) -> MatRef<'_, S> {
        let n = &self.nodes[id];
        let data = match n.op {
            Op::Param { offset } => &self.params[offset..offset + n.rows * n.cols],
            _ => &n.value[..],
        };
        MatRef { rows: n.rows, cols: n.cols, data }
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> S {
        self.value(id).data[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<S>, op: Op<S>) -> NodeId {
        debug_assert!(matches!(op, Op::Param { .. }) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, m: Mat<S>) -> NodeId {
        self.push(m.rows, m.cols, m.data, Op::Input)
    }

    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> NodeId {
        assert!(offset + rows * cols <= self.params.len(), "parameter view out of range");
        self.push(rows, cols, Vec::new(), Op::Param { offset })
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let cols = t.cols;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            assert!(i < t.rows, "gather index {i} out of {} rows", t.rows);
            out.extend_from_slice(t.row(i));
        }
        self.push(ids.len(), cols, out, Op::Gather { table, ids: ids.to_vec() })
    }

    /// `x · w + b`, `w: in×out`, `b: 1×out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols, wv.rows, "linear: inner dimensions");
        let (rows, cols) = (xv.rows, wv.cols);
        let mut out = vec![S::zero(); rows * cols];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.data.len(), cols, "linear: bias width");
            for r in 0..rows {
                out[r * cols..(r + 1) * cols].copy_from_slice(bv.data);
            }
        }
        matmul_into(xv, wv, &mut out, b.is_some());
        self.push(rows, cols, out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add: shapes");
        let out = av.data.iter().zip(bv.data).map(|(&x, &y)| x + y).collect();
        let (r, c) = (av.rows, av.cols);
        self.push(r, c, out, Op::Add(a, b))
    }

    /// Row-wise concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.nodes[parts[0]].cols;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat: widths");
            out.extend_from_slice(v.data);
            rows += v.rows;
        }
        self.push(rows, cols, out, Op::Concat(parts.to_vec()))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data, self.value(bias).data);
        let (rows, cols) = (xv.rows, xv.cols);
        let n = S::from_usize(cols).unwrap();
        let eps = S::from_f64_lossy(LN_EPS);
        let mut xhat = vec![S::zero(); rows * cols];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(rows, cols, out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    pub fn act(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let xv = self.value(x);
        let out = xv.data.iter().map(|&v| act_fwd(kind, v)).collect();
        let (r, c) = (xv.rows, xv.cols);
        self.push(r, c, out, Op::Act { x, kind })
    }

    /// Multi-head scaled dot-product attention. `q: n×d`, `k, v: m×d`.
    /// With `causal`, query `i` only sees keys `j ≤ i`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, m, d) = (qv.rows, kv.rows, qv.cols);
        assert_eq!(kv.cols, d);
        assert_eq!((vv.rows, vv.cols), (m, d));
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![S::zero(); heads * n * m];
        let mut out = vec![S::zero(); n * d];
        for h in 0..heads {
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            // scores = Qh · Khᵀ
            S::gemm(
                n,
                dh,
                m,
                scale,
                &qv.data[h * dh..],
                d as isize,
                1,
                &kv.data[h * dh..],
                1,
                d as isize,
                S::zero(),
                p,
                m as isize,
                1,
            );
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                if causal {
                    for s in row.iter_mut().skip(i + 1) {
                        *s = S::neg_infinity();
                    }
                }
                softmax_in_place(row);
            }
            // out_h = P · Vh
            S::gemm(
                n,
                m,
                dh,
                S::one(),
                p,
                m as isize,
                1,
                &vv.data[h * dh..],
                d as isize,
                1,
                S::zero(),
                &mut out[h * dh..],
                d as isize,
                1,
            );
        }
        self.push(n, d, out, Op::Attention { q, k, v, heads, probs })
    }

    /// `scale · Σ_t −log softmax(logits_t)[target_t]`, skipping [`IGNORE`].
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], scale: S) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per logit row");
        let mut probs = lv.data.to_vec();
        let mut loss = S::zero();
        for (t, &y) in targets.iter().enumerate() {
            let row = &mut probs[t * lv.cols..(t + 1) * lv.cols];
            let logit_row = lv.row(t);
            let max = logit_row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let lse = logit_row.iter().map(|&z| (z - max).exp()).sum::<S>().ln() + max;
            softmax_in_place(row);
            if y != IGNORE {
                assert!(y < lv.cols, "target out of range");
                loss += lse - logit_row[y];
            }
        }
        self.push(1, 1, vec![loss * scale], Op::CrossEntropy { logits, targets: targets.to_vec(), scale, probs })
    }

    /// `Σ x ⊙ weights` as a 1×1 node.
    pub fn dot(&mut self, x: NodeId, weights: Vec<S>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.data.len(), weights.len());
        let s = xv.data.iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        self.push(1, 1, vec![s], Op::Dot { x, weights })
    }

    /// Backpropagates from the scalar node `root`, adding parameter
    /// gradients into `param_grads`.
    pub fn backward(&self, root: NodeId, param_grads: &mut [S]) {
        assert_eq!(param_grads.len(), self.params.len(), "gradient buffer layout");
        assert_eq!(self.shape(root), (1, 1), "backward from a scalar");
        let mut grads: Vec<Option<Vec<S>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(vec![S::one()]);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (dst, &v) in param_grads[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *dst += v;
                    }
                }
                Op::Gather { table, ids } => {
                    let cols = node.cols;
                    let (tr, tc) = self.shape(*table);
                    let dt = grad_slot(&mut grads, *table, tr * tc);
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..cols {
                            dt[i * tc + c] += g[r * cols + c];
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let gm = MatRef { rows: node.rows, cols: node.cols, data: &g[..] };
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    {
                        let dx = grad_slot(&mut grads, *x, xv.rows * xv.cols);
                        matmul_nt_into(gm, wv, dx, true);
                    }
                    {
                        let dw = grad_slot(&mut grads, *w, wv.rows * wv.cols);
                        matmul_tn_into(xv, gm, dw, true);
                    }
                    if let Some(b) = b {
                        let db = grad_slot(&mut grads, *b, node.cols);
                        for r in 0..node.rows {
                            for c in 0..node.cols {
                                db[c] += g[r * node.cols + c];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for t in [*a, *b] {
                        let d = grad_slot(&mut grads, t, g.len());
                        for (dst, &v) in d.iter_mut().zip(&g) {
                            *dst += v;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.nodes[p].rows * self.nodes[p].cols;
                        let d = grad_slot(&mut grads, p, len);
                        for (dst, &v) in d.iter_mut().zip(&g[start..start + len]) {
                            *dst += v;
                        }
                        start += len;
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let (rows, cols) = (node.rows, node.cols);
                    let gv = self.value(*gain).data;
                    let n = S::from_usize(cols).unwrap();
                    {
                        let dg = grad_slot(&mut grads, *gain, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dg[c] += g[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    }
                    {
                        let db = grad_slot(&mut grads, *bias, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += g[r * cols + c];
                            }
                        }
                    }
                    let dx = grad_slot(&mut grads, *x, rows * cols);
                    let mut dxhat = vec![S::zero(); cols];
                    for r in 0..rows {
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for c in 0..cols {
                            let v = g[r * cols + c] * gv[c];
                            dxhat[c] = v;
                            mean_d += v;
                            mean_dx += v * xhat[r * cols + c];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            dx[r * cols + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                }
                Op::Act { x, kind } => {
                    let xv = self.value(*x).data;
                    let dx = grad_slot(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * act_grad(*kind, xv[i]);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, m, d) = (qv.rows, kv.rows, qv.cols);
                    let dh = d / heads;
                    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
                    let mut dq = vec![S::zero(); n * d];
                    let mut dk = vec![S::zero(); m * d];
                    let mut dv = vec![S::zero(); m * d];
                    let mut dp = vec![S::zero(); n * m];
                    for h in 0..*heads {
                        let p = &probs[h * n * m..(h + 1) * n * m];
                        // dP = dOh · Vhᵀ
                        S::gemm(
                            n,
                            dh,
                            m,
                            S::one(),
                            &g[h * dh..],
                            d as isize,
                            1,
                            &vv.data[h * dh..],
                            1,
                            d as isize,
                            S::zero(),
                            &mut dp,
                            m as isize,
                            1,
                        );
                        // dVh = Pᵀ · dOh
                        S::gemm(
                            m,
                            n,
                            dh,
                            S::one(),
                            p,
                            1,
                            m as isize,
                            &g[h * dh..],
                            d as isize,
                            1,
                            S::zero(),
                            &mut dv[h * dh..],
                            d as isize,
                            1,
                        );
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)); masked entries have P = 0.
                        for i in 0..n {
                            let pr = &p[i * m..(i + 1) * m];
                            let dr = &mut dp[i * m..(i + 1) * m];
                            let dotp: S = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for j in 0..m {
                                dr[j] = pr[j] * (dr[j] - dotp);
                            }
                        }
                        // dQh = dS · Kh · scale ; dKh = dSᵀ · Qh · scale
                        S::gemm(
                            n,
                            m,
                            dh,
                            scale,
                            &dp,
                            m as isize,
                            1,
                            &kv.data[h * dh..],
                            d as isize,
                            1,
                            S::zero(),
                            &mut dq[h * dh..],
                            d as isize,
                            1,
                        );
                        S::gemm(
                            m,
                            n,
                            dh,
                            scale,
                            &dp,
                            1,
                            m as isize,
                            &qv.data[h * dh..],
                            d as isize,
                            1,
                            S::zero(),
                            &mut dk[h * dh..],
                            d as isize,
                            1,
                        );
                    }
                    for (t, src) in [(*q, dq), (*k, dk), (*v, dv)] {
                        let dst = grad_slot(&mut grads, t, src.len());
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, scale, probs } => {
                    let cols = self.nodes[*logits].cols;
                    let up = g[0] * *scale;
                    let dl = grad_slot(&mut grads, *logits, probs.len());
                    for (t, &y) in targets.iter().enumerate() {
                        if y == IGNORE {
                            continue;
                        }
                        for c in 0..cols {
                            dl[t * cols + c] += up * probs[t * cols + c];
                        }
                        dl[t * cols + y] -= up;
                    }
                }
                Op::Dot { x, weights } => {
                    let dx = grad_slot(&mut grads, *x, weights.len());
                    for (a, &w) in dx.iter_mut().zip(weights) {
                        *a += g[0] * w;
                    }
                }
            }
        }
    }
}

fn grad_slot<S: Scalar>(grads: &mut [Option<Vec<S>>], id: NodeId, len: usize) -> &mut Vec<S> {
    grads[id].get_or_insert_with(|| vec![S::zero(); len])
}

#[inline]
fn act_fwd<S: Scalar>(kind: Activation, x: S) -> S {
    match kind {
        Activation::Identity => x,
        Activation::Relu => x.max(S::zero()),
        Activation::Gelu => {
            let half = S::from_f64_lossy(0.5);
            let c = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
            let a = S::from_f64_lossy(0.044715);
            half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
        }
    }
}

#[inline]
fn act_grad<S: Scalar>(kind: Activation, x: S) -> S {
    match kind {
        Activation::Identity => S::one(),
        Activation::Relu => {
            if x > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
        Activation::Gelu => {
            let half = S::from_f64_lossy(0.5);
            let c = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
            let a = S::from_f64_lossy(0.044715);
            let three = S::from_f64_lossy(3.0);
            let t = (c * (x + a * x * x * x)).tanh();
            half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of `f` over every parameter.
    fn numeric_grad(params: &[f64], f: &dyn Fn(&[f64]) -> f64, eps: f64) -> Vec<f64> {
        let mut p = params.to_vec();
        (0..p.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + eps;
                let up = f(&p);
                p[i] = orig - eps;
                let down = f(&p);
                p[i] = orig;
                (up - down) / (2.0 * eps)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < tol, "coordinate {i}: analytic {a} vs numeric {n}");
        }
    }

    fn random_params(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Runs `build` on a fresh tape, returning the loss and its gradient.
    fn eval(params: &[f64], build: &dyn Fn(&mut Tape<'_, f64>) -> NodeId) -> (f64, Vec<f64>) {
        let mut tape = Tape::new(params);
        let root = build(&mut tape);
        let mut g = vec![0.0; params.len()];
        tape.backward(root, &mut g);
        (tape.scalar(root), g)
    }

    fn check(n_params: usize, seed: u64, build: &dyn Fn(&mut Tape<'_, f64>) -> NodeId) {
        let params = random_params(n_params, seed);
        let (_, analytic) = eval(&params, build);
        let numeric = numeric_grad(&params, &|p| eval(p, build).0, 1e-5);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn linear_gather_concat_are_exact() {
        // table 4×3 | w 3×2 | b 1×2
        let build = |t: &mut Tape<'_, f64>| {
            let table = t.param(0, 4, 3);
            let w = t.param(12, 3, 2);
            let b = t.param(18, 1, 2);
            let a = t.gather(table, &[2, 0, 2]);
            let c = t.gather(table, &[1]);
            let x = t.concat(&[a, c]);
            let y = t.linear(x, w, Some(b));
            let z = t.add(y, y);
            t.dot(z, vec![0.3, -1.0, 2.0, 0.5, -0.7, 1.1, 0.2, 0.9])
        };
        check(20, 1, &build);
    }

    #[test]
    fn layer_norm_and_activations() {
        for kind in [Activation::Gelu, Activation::Identity] {
            let build = move |t: &mut Tape<'_, f64>| {
                let x = t.param(0, 3, 5);
                let g = t.param(15, 1, 5);
                let b = t.param(20, 1, 5);
                let y = t.layer_norm(x, g, b);
                let z = t.act(y, kind);
                t.dot(z, (0..15).map(|i| (i as f64 * 0.37).sin()).collect())
            };
            check(25, 2, &build);
        }
    }

    #[test]
    fn attention_causal_and_cross() {
        for causal in [false, true] {
            let build = move |t: &mut Tape<'_, f64>| {
                let q = t.param(0, 3, 4);
                let k = t.param(12, 3, 4);
                let v = t.param(24, 3, 4);
                let o = t.attention(q, k, v, 2, causal);
                t.dot(o, (0..12).map(|i| (i as f64 * 0.61).cos()).collect())
            };
            check(36, 3, &build);
        }
        // cross attention with m != n
        let build = |t: &mut Tape<'_, f64>| {
            let q = t.param(0, 2, 4);
            let k = t.param(8, 5, 4);
            let v = t.param(28, 5, 4);
            let o = t.attention(q, k, v, 4, false);
            t.dot(o, (0..8).map(|i| i as f64 - 3.5).collect())
        };
        check(48, 4, &build);
    }

    #[test]
    fn cross_entropy_gradient_and_ignore() {
        let build = |t: &mut Tape<'_, f64>| {
            let z = t.param(0, 3, 4);
            t.cross_entropy(z, &[1, IGNORE, 3], 0.5)
        };
        check(12, 5, &build);
        let params = random_params(12, 5);
        let (_, g) = eval(&params, &build);
        assert!(g[4..8].iter().all(|&v| v == 0.0), "ignored row must get no gradient");
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let params = vec![0.0; 10];
        let mut t = Tape::new(&params);
        let z = t.param(0, 2, 5);
        let l = t.cross_entropy(z, &[0, 4], 0.5);
        assert!((t.scalar(l) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let params = random_params(36, 6);
        let mut t = Tape::new(&params);
        let q = t.param(0, 3, 4);
        let k = t.param(12, 3, 4);
        let v = t.param(24, 3, 4);
        let o = t.attention(q, k, v, 1, true);
        // first query attends only to the first value row
        let first = t.value(o).row(0).to_vec();
        assert_eq!(first, params[24..28].to_vec());
    }
}
