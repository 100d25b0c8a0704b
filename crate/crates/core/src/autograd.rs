//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations eagerly and borrows parameter values from a
//! [`ParamStore`]. Variable-length samples are stacked along rows and attention is
//! restricted to per-sample segments, so no padding is ever materialized.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: Vec<usize>,
        k_segs: Vec<usize>,
        probs: Vec<Array2<f64>>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Mse {
        pred: Var,
        target: Array2<f64>,
        weights: Vec<f64>,
        denom: f64,
    },
    MeanRows(Var, Vec<usize>),
    L2Normalize(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients with respect to every parameter of the store; `None` when the parameter
/// did not influence the differentiated scalar.
pub struct Gradients {
    pub params: Vec<Option<Array2<f64>>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// Parameter leaf; repeated requests for the same id share one node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(self.params.value(id).clone(), Op::Param(id));
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a `1 x d` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let out = self.value(a) + self.value(bias);
        self.push(out, Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 - x);
        self.push(out, Op::OneMinus(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| {
            let u = GELU_C * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise layer normalization with affine `1 x d` parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention over already projected `q`, `k`, `v`.
    ///
    /// Rows are grouped into segments: query segment `i` attends only to key segment
    /// `i`. Every key segment must be nonempty.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: &[usize],
        k_segs: &[usize],
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(q_segs.len(), k_segs.len(), "segment count mismatch");
        assert_eq!(q_segs.iter().sum::<usize>(), qv.nrows(), "query segments");
        assert_eq!(k_segs.iter().sum::<usize>(), kv.nrows(), "key segments");
        assert!(d % heads == 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(q_segs.len() * heads);
        let (mut q0, mut k0) = (0, 0);
        for (&nq, &nk) in q_segs.iter().zip(k_segs) {
            assert!(nk > 0, "attention over an empty key segment");
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![q0..q0 + nq, cols.clone()]);
                let kh = kv.slice(s![k0..k0 + nk, cols.clone()]);
                let vh = vv.slice(s![k0..k0 + nk, cols.clone()]);
                let mut p = qh.dot(&kh.t());
                p.mapv_inplace(|x| x * scale);
                softmax_rows(&mut p);
                out.slice_mut(s![q0..q0 + nq, cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
            q0 += nq;
            k0 += nk;
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_segs: q_segs.to_vec(),
                k_segs: k_segs.to_vec(),
                probs,
            },
        )
    }

    /// Softmax probabilities recorded by an attention node, ordered by segment then
    /// head.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row lookup, e.g. embedding tables.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let out = self.value(table).select(Axis(0), idx);
        self.push(out, Op::GatherRows(table, idx.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    /// Weighted mean squared error over rows, normalized by `sum(weights) * cols`.
    pub fn mse(&mut self, pred: Var, target: Array2<f64>, weights: &[f64]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "mse shape mismatch");
        assert_eq!(weights.len(), pv.nrows(), "one weight per row");
        let denom = weights.iter().sum::<f64>() * pv.ncols() as f64;
        let mut total = 0.0;
        for ((p, t), w) in pv.rows().into_iter().zip(target.rows()).zip(weights) {
            if *w != 0.0 {
                total += w * p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        let out = Array2::from_elem((1, 1), total / denom);
        self.push(
            out,
            Op::Mse {
                pred,
                target,
                weights: weights.to_vec(),
                denom,
            },
        )
    }

    /// Mean of each row segment; output has one row per segment.
    pub fn mean_rows(&mut self, x: Var, segs: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((segs.len(), xv.ncols()));
        let mut r0 = 0;
        for (i, &n) in segs.iter().enumerate() {
            assert!(n > 0, "empty segment");
            let m = xv.slice(s![r0..r0 + n, ..]).mean_axis(Axis(0)).expect("nonempty");
            out.row_mut(i).assign(&m);
            r0 += n;
        }
        self.push(out, Op::MeanRows(x, segs.to_vec()))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        self.push(out, Op::L2Normalize(x, norms))
    }

    /// Mean softmax cross-entropy of `logits` rows against class `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let mut probs = self.value(logits).clone();
        assert_eq!(targets.len(), probs.nrows());
        softmax_rows(&mut probs);
        let n = probs.nrows() as f64;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs[[i, t]].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from the scalar `loss` (a `1 x 1` node).
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = vec![None; self.params.len()];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out[*id] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddBias(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::OneMinus(a) => acc(&mut grads, *a, -g),
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *g *= 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut dxhat = &g * self.value(*gamma);
                    let d = xhat.ncols() as f64;
                    for ((mut row, xr), is) in dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                        let sum: f64 = row.sum();
                        let dot: f64 = row.iter().zip(xr).map(|(a, b)| a * b).sum();
                        Zip::from(&mut row)
                            .and(&xr)
                            .for_each(|r, &xh| *r = is / d * (d * *r - sum - xh * dot));
                    }
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *x, dxhat);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    q_segs,
                    k_segs,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros(qv.dim());
                    let mut gk = Array2::zeros(kv.dim());
                    let mut gv = Array2::zeros(vv.dim());
                    let (mut q0, mut k0) = (0, 0);
                    let mut pi = 0;
                    for (&nq, &nk) in q_segs.iter().zip(k_segs) {
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[pi];
                            pi += 1;
                            let go = g.slice(s![q0..q0 + nq, cols.clone()]);
                            let qh = qv.slice(s![q0..q0 + nq, cols.clone()]);
                            let kh = kv.slice(s![k0..k0 + nk, cols.clone()]);
                            let vh = vv.slice(s![k0..k0 + nk, cols.clone()]);
                            gv.slice_mut(s![k0..k0 + nk, cols.clone()])
                                .assign(&p.t().dot(&go));
                            let mut ds = go.dot(&vh.t());
                            for (mut dr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                                Zip::from(&mut dr).and(&pr).for_each(|x, &pp| *x = pp * (*x - dot));
                            }
                            ds.mapv_inplace(|x| x * scale);
                            gq.slice_mut(s![q0..q0 + nq, cols.clone()]).assign(&ds.dot(&kh));
                            gk.slice_mut(s![k0..k0 + nk, cols]).assign(&ds.t().dot(&qh));
                        }
                        q0 += nq;
                        k0 += nk;
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![r0..r0 + n, ..]).to_owned());
                        r0 += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., c0..c0 + n]).to_owned());
                        c0 += n;
                    }
                }
                Op::GatherRows(table, idx) => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = gt.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Mse {
                    pred,
                    target,
                    weights,
                    denom,
                } => {
                    let go = g[[0, 0]];
                    let mut gp = self.value(*pred) - target;
                    for (mut row, w) in gp.rows_mut().into_iter().zip(weights) {
                        let c = 2.0 * w * go / denom;
                        row.mapv_inplace(|x| x * c);
                    }
                    acc(&mut grads, *pred, gp);
                }
                Op::MeanRows(x, segs) => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    let mut r0 = 0;
                    for (i, &n) in segs.iter().enumerate() {
                        let row = g.row(i).mapv(|v| v / n as f64);
                        for r in r0..r0 + n {
                            gx.row_mut(r).assign(&row);
                        }
                        r0 += n;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::L2Normalize(x, norms) => {
                    let y = &node.value;
                    let mut gx = g;
                    for ((mut gr, yr), n) in gx.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        Zip::from(&mut gr).and(&yr).for_each(|gv, &yv| *gv = (*gv - yv * dot) / n);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = probs.nrows() as f64;
                    let go = g[[0, 0]];
                    let mut gl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[[i, t]] -= 1.0;
                    }
                    gl.mapv_inplace(|x| x * go / n);
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        Gradients { params: out }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` with respect to every entry of parameter `id`.
    fn numeric_grad(
        store: &mut ParamStore,
        id: usize,
        f: &dyn Fn(&ParamStore) -> f64,
    ) -> Array2<f64> {
        let h = 1e-6;
        let shape = store.value(id).dim();
        let mut g = Array2::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = store.value(id)[[r, c]];
                store.value_mut(id)[[r, c]] = orig + h;
                let plus = f(store);
                store.value_mut(id)[[r, c]] = orig - h;
                let minus = f(store);
                store.value_mut(id)[[r, c]] = orig;
                g[[r, c]] = (plus - minus) / (2.0 * h);
            }
        }
        g
    }

    fn check(store: &mut ParamStore, f: &dyn Fn(&ParamStore) -> (f64, Gradients)) {
        let (_, grads) = f(store);
        for id in 0..store.len() {
            let num = numeric_grad(store, id, &|s| f(s).0);
            let ana = grads.params[id].clone().unwrap_or_else(|| Array2::zeros(num.dim()));
            for (a, n) in ana.iter().zip(num.iter()) {
                let err = (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
                assert!(err < 1e-5, "param {id}: analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn elementwise_and_norm_ops() {
        let mut store = ParamStore::new();
        store.insert("x", array![[0.3, -1.2, 0.8], [1.5, 0.1, -0.4]]);
        store.insert("y", array![[0.7, 0.2, -0.5], [-0.3, 0.9, 0.6]]);
        store.insert("g", array![[1.1, 0.9, 1.3]]);
        store.insert("b", array![[0.1, -0.2, 0.05]]);
        let target = array![[0.1, 0.2, 0.3], [0.0, -0.1, 0.5]];
        check(&mut store, &|s| {
            let mut g = Graph::new(s);
            let (x, y, gm, b) = (g.param(0), g.param(1), g.param(2), g.param(3));
            let ln = g.layer_norm(x, gm, b);
            let ge = g.gelu(ln);
            let sg = g.sigmoid(y);
            let om = g.one_minus(sg);
            let m1 = g.mul(sg, ge);
            let m2 = g.mul(om, y);
            let sum = g.add(m1, m2);
            let sub = g.sub(sum, x);
            let sc = g.scale(sub, 0.7);
            let bias = g.add_bias(sc, b);
            let loss = g.mse(bias, target.clone(), &[1.0, 0.5]);
            (g.value(loss)[[0, 0]], g.backward(loss))
        });
    }

    #[test]
    fn attention_and_structural_ops() {
        let mut store = ParamStore::new();
        store.insert(
            "q",
            array![[0.3, -1.2, 0.8, 0.2], [1.5, 0.1, -0.4, 0.9], [0.2, 0.2, 0.7, -0.6]],
        );
        store.insert(
            "kv",
            array![
                [0.7, 0.2, -0.5, 0.1],
                [-0.3, 0.9, 0.6, 0.4],
                [0.5, -0.8, 0.1, 1.0],
                [0.0, 0.3, -0.2, 0.5]
            ],
        );
        store.insert("emb", array![[0.5, -0.5], [0.25, 1.0], [-1.0, 0.3]]);
        check(&mut store, &|s| {
            let mut g = Graph::new(s);
            let (q, kv, emb) = (g.param(0), g.param(1), g.param(2));
            let kt = g.transpose(kv);
            let k = g.transpose(kt);
            let a = g.attention(q, k, kv, 2, &[2, 1], &[3, 1]);
            let e = g.gather_rows(emb, &[2, 0, 2]);
            let cat = g.concat_cols(&[a, e]);
            let rows = g.concat_rows(&[cat, cat]);
            let pooled = g.mean_rows(rows, &[2, 4]);
            let n = g.l2_normalize_rows(pooled);
            let nt = g.transpose(n);
            let logits = g.matmul(n, nt);
            let logits = g.scale(logits, 3.0);
            let loss = g.cross_entropy(logits, &[0, 1]);
            (g.value(loss)[[0, 0]], g.backward(loss))
        });
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut store = ParamStore::new();
        store.insert("q", array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]]);
        let mut g = Graph::new(&store);
        let q = g.param(0);
        let a = g.attention(q, q, q, 1, &[3], &[3]);
        for p in g.attention_probs(a).unwrap() {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segments_do_not_leak() {
        // Changing the second key segment must not affect the first query segment.
        let mut store = ParamStore::new();
        store.insert("q", array![[1.0, 0.0], [0.0, 1.0]]);
        let out = |kv: Array2<f64>| {
            let mut g = Graph::new(&store);
            let q = g.param(0);
            let kv = g.input(kv);
            let a = g.attention(q, kv, kv, 1, &[1, 1], &[1, 1]);
            g.value(a).row(0).to_owned()
        };
        let a = out(array![[0.5, 0.5], [1.0, 2.0]]);
        let b = out(array![[0.5, 0.5], [-9.0, 4.0]]);
        assert_eq!(a, b);
    }
}
