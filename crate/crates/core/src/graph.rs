//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! bound by name, so a tensor used by several views of the same image gets a
//! single leaf and its gradient accumulates. Nodes whose inputs never require a
//! gradient drop their backward bookkeeping, which makes teacher (no-grad)
//! passes as cheap as a plain forward.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, Axis};

use crate::params::{Param, Trainable};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<S>,
        inv_std: Array1<S>,
    },
    Softmax(Var),
    Transpose(Var),
    Gather(Var, Vec<Option<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    L2NormRows {
        x: Var,
        // (norm used as divisor, whether the eps floor was active)
        norms: Vec<(S, bool)>,
    },
    SoftCe {
        logits: Var,
        targets: Array2<S>,
        pairs: Vec<(usize, usize, S)>,
        inv_temp: S,
        probs: Array2<S>,
    },
    WeightedSum(Vec<(Var, S)>),
}

struct Node<S> {
    value: Array2<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients of bound parameters, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    by_name: HashMap<String, Array2<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&Array2<S>> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.by_name.keys()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// `self += scale * other`, inserting missing entries.
    pub fn accumulate(&mut self, other: &Gradients<S>, scale: S) {
        for (k, g) in &other.by_name {
            match self.by_name.get_mut(k) {
                Some(acc) => acc.scaled_add(scale, g),
                None => {
                    self.by_name.insert(k.clone(), g.mapv(|v| v * scale));
                }
            }
        }
    }

    pub fn global_norm(&self) -> S {
        let mut names: Vec<&String> = self.by_name.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| self.by_name[n].iter().map(|v| *v * *v).sum::<S>())
            .sum::<S>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        for g in self.by_name.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn insert(&mut self, name: String, grad: Array2<S>) {
        self.by_name.insert(name, grad);
    }
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    bound: HashMap<String, Var>,
    trainable: Trainable,
}

impl<S: Scalar> Graph<S> {
    pub fn new(trainable: Trainable) -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            trainable,
        }
    }

    /// A graph that never tracks gradients.
    pub fn inference() -> Self {
        Self::new(Trainable::none())
    }

    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn constant(&mut self, value: Array2<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Array2<S>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Binds a parameter; repeated binds of the same name return the same leaf.
    pub fn param(&mut self, p: &Param<S>) -> Var {
        if let Some(v) = self.bound.get(&p.name) {
            return *v;
        }
        let needs = self.trainable.contains(p.group);
        let v = self.push(p.value.clone(), Op::Leaf, needs);
        self.bound.insert(p.name.clone(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `a[n×d] + b[1×d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(b).nrows(), 1, "add_row expects a 1×d row");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| if v > S::zero() { v } else { S::zero() });
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Var {
        let xv = self.value(x);
        let d = S::from_usize(xv.ncols()).unwrap();
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut inv_std = Array1::zeros(xv.nrows());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / d;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (*v - mean) * is;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((idx.len(), src.ncols()));
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = i {
                value.row_mut(r).assign(&src.row(*i));
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::Gather(a, idx), ng)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        self.gather_rows(a, idx.iter().map(|i| Some(*i)).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// `x / max(‖x‖, eps)` row-wise.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: S) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.nrows());
        for mut row in value.rows_mut() {
            let n = row.iter().map(|v| *v * *v).sum::<S>().sqrt();
            let (div, clamped) = if n > eps { (n, false) } else { (eps, true) };
            row.mapv_inplace(|v| v / div);
            norms.push((div, clamped));
        }
        let ng = self.ng(x);
        self.push(value, Op::L2NormRows { x, norms }, ng)
    }

    /// Weighted soft cross-entropy between logit rows and constant target rows.
    ///
    /// Returns `Σ w · H(targets[j], softmax(logits[i] · inv_temp))` over `(i, j, w)`.
    pub fn soft_ce(
        &mut self,
        logits: Var,
        targets: Array2<S>,
        pairs: Vec<(usize, usize, S)>,
        inv_temp: S,
    ) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.ncols(), targets.ncols(), "soft_ce class count mismatch");
        let scaled = lv.mapv(|v| v * inv_temp);
        let logp = log_softmax_rows(&scaled);
        let mut total = S::zero();
        for &(i, j, w) in &pairs {
            let h: S = targets
                .row(j)
                .iter()
                .zip(logp.row(i).iter())
                .map(|(t, lp)| -*t * *lp)
                .sum();
            total += w * h;
        }
        let probs = logp.mapv(|v| v.exp());
        let ng = self.ng(logits);
        let value = Array2::from_elem((1, 1), total);
        self.push(
            value,
            Op::SoftCe {
                logits,
                targets,
                pairs,
                inv_temp,
                probs,
            },
            ng,
        )
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut value = Array2::zeros(self.value(terms[0].0).raw_dim());
        for (v, w) in terms {
            value.scaled_add(*w, self.value(*v));
        }
        let ng = terms.iter().any(|(v, _)| self.ng(*v));
        self.push(value, Op::WeightedSum(terms.to_vec()), ng)
    }

    pub fn zero_scalar(&mut self) -> Var {
        self.constant(Array2::zeros((1, 1)))
    }

    /// Back-propagates from a `1×1` root and returns gradients of bound trainable parameters.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        let grads = self.backward_vars(root);
        let mut out = Gradients::default();
        for (name, v) in &self.bound {
            if !self.ng(*v) {
                continue;
            }
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Array2::zeros(self.value(*v).raw_dim()));
            out.by_name.insert(name.clone(), g);
        }
        out
    }

    /// Gradient of the root with respect to every node (None where unreachable).
    pub fn backward_vars(&self, root: Var) -> Vec<Option<Array2<S>>> {
        let mut grads: Vec<Option<Array2<S>>> = vec![None; self.nodes.len()];
        if !self.ng(root) {
            return grads;
        }
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                }
                Op::AddRow(a, b) => {
                    if self.ng(*b) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *b, gb);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.mapv(|v| v * c));
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ndarray::Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, y| {
                            if *y <= S::zero() {
                                *gv = S::zero()
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g.clone();
                    ndarray::Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, x| *gv *= gelu_grad(*x));
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*beta) {
                        acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *gamma, gg);
                    }
                    if self.ng(*x) {
                        let gamma_v = self.value(*gamma);
                        let dxhat = &g * gamma_v;
                        let d = S::from_usize(xhat.ncols()).unwrap();
                        let mut gx = Array2::zeros(xhat.raw_dim());
                        for r in 0..xhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let sum_dh: S = dh.sum();
                            let sum_dh_xh: S = dh.iter().zip(xh.iter()).map(|(a, b)| *a * *b).sum();
                            let is = inv_std[r];
                            for c in 0..xhat.ncols() {
                                gx[[r, c]] = is / d * (d * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: S = g.row(r).iter().zip(y.row(r).iter()).map(|(a, b)| *a * *b).sum();
                        for c in 0..y.ncols() {
                            ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    acc(&mut grads, *a, g.t().to_owned());
                }
                Op::Gather(a, idx) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = i {
                            let mut dst = ga.row_mut(*i);
                            dst += &g.row(r);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        if self.ng(*p) {
                            acc(&mut grads, *p, g.slice(s![off..off + n, ..]).to_owned());
                        }
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        if self.ng(*p) {
                            acc(&mut grads, *p, g.slice(s![.., off..off + n]).to_owned());
                        }
                        off += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    let n = g.ncols();
                    ga.slice_mut(s![.., *start..*start + n]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::L2NormRows { x, norms } => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let (div, clamped) = norms[r];
                        if clamped {
                            for c in 0..y.ncols() {
                                gx[[r, c]] = g[[r, c]] / div;
                            }
                        } else {
                            let dot: S = g.row(r).iter().zip(y.row(r).iter()).map(|(a, b)| *a * *b).sum();
                            for c in 0..y.ncols() {
                                gx[[r, c]] = (g[[r, c]] - y[[r, c]] * dot) / div;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SoftCe {
                    logits,
                    targets,
                    pairs,
                    inv_temp,
                    probs,
                } => {
                    let up = g[[0, 0]];
                    let mut gl = Array2::zeros(probs.raw_dim());
                    for &(i, j, w) in pairs {
                        let t = targets.row(j);
                        let mass: S = t.sum();
                        let coef = up * w * *inv_temp;
                        for c in 0..probs.ncols() {
                            gl[[i, c]] += coef * (probs[[i, c]] * mass - t[c]);
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        if self.ng(*v) {
                            let w = *w;
                            acc(&mut grads, *v, g.mapv(|x| x * w));
                        }
                    }
                }
            }
        }
        grads
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Array2<S>>], v: Var, g: Array2<S>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// GELU, tanh approximation.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::of(3.0) * k * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

pub fn softmax_rows<S: Scalar>(a: &Array2<S>) -> Array2<S> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().fold(S::neg_infinity(), |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - m).exp());
        let z: S = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

pub fn log_softmax_rows<S: Scalar>(a: &Array2<S>) -> Array2<S> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().fold(S::neg_infinity(), |m, v| m.max(*v));
        let lse = m + row.iter().map(|v| (*v - m).exp()).sum::<S>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Graph<f64>, Var) -> Var, x0: Array2<f64>) {
        let mut g = Graph::new(Trainable::all());
        let p = Param::new("x", ParamGroup::Head, true, x0.clone());
        let x = g.param(&p);
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.get("x").unwrap().clone();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut v = x0.clone();
                v[[r, c]] += delta;
                let mut g = Graph::new(Trainable::all());
                let x = g.param(&Param::new("x", ParamGroup::Head, true, v));
                let y = build(&mut g, x);
                g.scalar(y)
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            assert!(
                (a - num).abs() <= 1e-6 * (1.0 + a.abs().max(num.abs())),
                "coord ({r},{c}): analytic {a} vs numeric {num}"
            );
        }
    }

    fn reduce(g: &mut Graph<f64>, y: Var) -> Var {
        // Non-uniform reduction so every output coordinate matters.
        let (n, m) = g.value(y).dim();
        let w = Array2::from_shape_fn((m, 1), |(i, _)| 0.3 + 0.17 * i as f64);
        let wv = g.constant(w);
        let col = g.matmul(y, wv);
        let ones = g.constant(Array2::from_shape_fn((1, n), |(_, j)| 1.0 - 0.11 * j as f64));
        g.matmul(ones, col)
    }

    fn x0() -> Array2<f64> {
        array![[0.3, -1.2, 0.7, 0.05], [1.1, 0.4, -0.6, 2.0], [-0.8, 0.9, 0.2, -0.3]]
    }

    #[test]
    fn layer_norm_gradient() {
        fd_check(
            |g, x| {
                let gamma = g.constant(array![[1.0, 0.5, -0.7, 2.0]]);
                let beta = g.constant(array![[0.1, 0.0, 0.2, -0.1]]);
                let y = g.layer_norm(x, gamma, beta, 1e-6);
                reduce(g, y)
            },
            x0(),
        );
    }

    #[test]
    fn softmax_gelu_gradient() {
        fd_check(
            |g, x| {
                let y = g.gelu(x);
                let y = g.softmax_rows(y);
                reduce(g, y)
            },
            x0(),
        );
    }

    #[test]
    fn l2norm_transpose_gather_gradient() {
        fd_check(
            |g, x| {
                let y = g.l2_normalize_rows(x, 1e-12);
                let t = g.transpose(y);
                let gth = g.gather_rows(t, vec![Some(3), None, Some(0), Some(3)]);
                let c = g.concat_cols(&[gth, gth]);
                let sl = g.slice_cols(c, 1, 3);
                reduce(g, sl)
            },
            x0(),
        );
    }

    #[test]
    fn soft_ce_gradient() {
        let targets = softmax_rows(&array![[0.2, 1.0, -0.5, 0.0], [2.0, 0.0, 0.0, 1.0]]);
        fd_check(
            move |g, x| {
                g.soft_ce(
                    x,
                    targets.clone(),
                    vec![(0, 0, 0.5), (2, 1, 0.25), (0, 1, 1.0)],
                    1.0 / 0.3,
                )
            },
            x0(),
        );
    }

    #[test]
    fn matmul_chain_gradient() {
        fd_check(
            |g, x| {
                let xt = g.transpose(x);
                let y = g.matmul(x, xt);
                let y = g.relu(y);
                let b = g.constant(array![[0.5, -1.0, 0.25]]);
                let y = g.add_row(y, b);
                let z = g.scale(y, 0.7);
                let y = g.weighted_sum(&[(y, 0.5), (z, 2.0)]);
                let both = g.concat_rows(&[y, y]);
                reduce(g, both)
            },
            x0(),
        );
    }

    #[test]
    fn zero_norm_row_is_clamped_not_nan() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Array2::zeros((2, 3)));
        let y = g.l2_normalize_rows(x, 1e-12);
        assert!(g.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_inputs_produce_no_gradients() {
        let mut g = Graph::<f64>::new(Trainable::of(&[ParamGroup::Head]));
        let frozen = Param::new("w", ParamGroup::Backbone, true, array![[1.0, 2.0]]);
        let w = g.param(&frozen);
        let c = g.constant(array![[1.0], [1.0]]);
        let y = g.matmul(w, c);
        assert!(!g.needs_grad(y));
        assert!(g.backward(y).is_empty());
    }
}
