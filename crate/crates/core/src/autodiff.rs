//! A small reverse-mode tape over [`Matrix`] values.
//!
//! The op set is exactly what the encoder/decoder stack needs. Attention,
//! layer norm and cross-entropy are fused ops with hand-written backward
//! passes; everything else is elementary.

use crate::tensor::{self, Matrix};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamStore {
    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients { tensors: self.tensors.iter().map(|t| Matrix::zeros(t.rows, t.cols)).collect() }
    }
}

/// Gradients with one tensor per parameter, same shapes as the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| &t.data).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::all_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Gather { table: Var, ids: Vec<usize> },
    VStack(Vec<Var>),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f64, f64)> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Vec<f64>> },
    MaskNegInf { x: Var, masked: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Matrix },
    Scale(Var, f64),
    Sum(Vec<Var>),
}

struct Node {
    op: Op,
    value: Option<Matrix>,
}

/// Records a forward computation against a borrowed parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(m)) => m,
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Op::Input, m)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = tensor::matmul_nt(self.value(a), self.value(b));
        self.push(Op::MatMulNT(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let out = tensor::add_row_broadcast(self.value(a), self.value(bias));
        self.push(Op::AddRow(a, bias), out)
    }

    /// `x * w + b` with `w: [in, out]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(Op::Gather { table, ids }, out)
    }

    pub fn vstack(&mut self, parts: Vec<Var>) -> Var {
        let vals: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Matrix::vstack(&vals);
        self.push(Op::VStack(parts), out)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (out, stats) = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta));
        self.push(Op::LayerNorm { x, gamma, beta, stats }, out)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let out = Matrix::from_vec(src.rows, src.cols, src.data.iter().map(|&v| tensor::gelu(v)).collect());
        self.push(Op::Gelu(x), out)
    }

    /// Multi-head attention core (after projections). `causal` restricts row `i` to keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(qm.rows, qm.cols);
        let mut probs = Vec::with_capacity(qm.rows);
        for i in 0..qm.rows {
            let n_keys = if causal { i + 1 } else { km.rows };
            let mut p = vec![0.0; heads * n_keys];
            attend_into(qm.row(i), km, vm, n_keys, heads, out.row_mut(i), &mut p);
            probs.push(p);
        }
        self.push(Op::Attention { q, k, v, heads, probs }, out)
    }

    /// Replaces entries flagged in `masked` (row-major) by `-inf`.
    pub fn mask_neg_inf(&mut self, x: Var, masked: Vec<bool>) -> Var {
        let mut out = self.value(x).clone();
        debug_assert_eq!(masked.len(), out.len());
        for (o, m) in out.data.iter_mut().zip(&masked) {
            if *m {
                *o = f64::NEG_INFINITY;
            }
        }
        self.push(Op::MaskNegInf { x, masked }, out)
    }

    /// Summed softmax cross-entropy over rows with a target; `None` rows contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len());
        let mut probs = Matrix::zeros(l.rows, l.cols);
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let ls = tensor::log_softmax(l.row(r));
            total -= ls[t];
            for (p, v) in probs.row_mut(r).iter_mut().zip(&ls) {
                *p = v.exp();
            }
        }
        self.push(Op::CrossEntropy { logits, targets, probs }, Matrix::filled(1, 1, total))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let src = self.value(x);
        let out = Matrix::from_vec(src.rows, src.cols, src.data.iter().map(|v| v * s).collect());
        self.push(Op::Scale(x, s), out)
    }

    /// Sum of same-shaped values.
    pub fn sum(&mut self, parts: Vec<Var>) -> Var {
        let first = self.value(parts[0]);
        let mut out = Matrix::zeros(first.rows, first.cols);
        for p in &parts {
            out.add_assign(self.value(*p));
        }
        self.push(Op::Sum(parts), out)
    }

    /// Backpropagates from a scalar root and returns parameter gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = self.params.zeros_like();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Param(id) => out.tensors[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // dA = G * B^T ; dB = A^T * G
                    let da = tensor::matmul_nt(&g, bv);
                    let mut db = Matrix::zeros(bv.rows, bv.cols);
                    tensor::matmul_tn_acc(&mut db, av, &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    // out = A * B^T ; dA = G * B ; dB = G^T * A
                    let da = tensor::matmul(&g, bv);
                    let mut db = Matrix::zeros(bv.rows, bv.cols);
                    tensor::matmul_tn_acc(&mut db, &g, av);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let mut db = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::VStack(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let rows = self.value(*p).rows;
                        let slice = Matrix::from_vec(rows, g.cols, g.data[r0 * g.cols..(r0 + rows) * g.cols].to_vec());
                        accumulate(&mut grads, *p, slice);
                        r0 += rows;
                    }
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let n = xv.cols as f64;
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    let mut dgamma = Matrix::zeros(1, xv.cols);
                    let mut dbeta = Matrix::zeros(1, xv.cols);
                    for r in 0..xv.rows {
                        let (mean, rstd) = stats[r];
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..xv.cols {
                            let xhat = (xr[c] - mean) * rstd;
                            let dxhat = gr[c] * gv.data[c];
                            dgamma.data[c] += gr[c] * xhat;
                            dbeta.data[c] += gr[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let dr = dx.row_mut(r);
                        for c in 0..xv.cols {
                            let xhat = (xr[c] - mean) * rstd;
                            let dxhat = gr[c] * gv.data[c];
                            dr[c] = rstd / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, *beta, dbeta);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = Matrix::from_vec(
                        xv.rows,
                        xv.cols,
                        xv.data.iter().zip(&g.data).map(|(&x, &g)| g * tensor::gelu_grad(x)).collect(),
                    );
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (dq, dk, dv) = attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, probs, &g);
                    accumulate(&mut grads, *v, dv);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *q, dq);
                }
                Op::MaskNegInf { x, masked } => {
                    let mut dx = g;
                    for (d, m) in dx.data.iter_mut().zip(masked) {
                        if *m {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let s = g.data[0];
                    let mut dl = Matrix::zeros(probs.rows, probs.cols);
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for (d, p) in dl.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *d = s * p;
                        }
                        dl.data[r * probs.cols + t] -= s;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Scale(x, s) => {
                    let dx = Matrix::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * s).collect());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        accumulate(&mut grads, *p, g.clone());
                    }
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn attend_into(q: &[f64], k: &Matrix, v: &Matrix, n_keys: usize, heads: usize, out: &mut [f64], probs: &mut [f64]) {
    tensor::attend_row(q, k, v, n_keys, heads, out, probs);
}

fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    probs: &[Vec<f64>],
    g: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(q.rows, d);
    let mut dk = Matrix::zeros(k.rows, d);
    let mut dv = Matrix::zeros(v.rows, d);
    for i in 0..q.rows {
        let p_all = &probs[i];
        let n_keys = p_all.len() / heads;
        let gi = g.row(i);
        for h in 0..heads {
            let lo = h * dh;
            let p = &p_all[h * n_keys..(h + 1) * n_keys];
            let go = &gi[lo..lo + dh];
            let mut dp = vec![0.0; n_keys];
            for j in 0..n_keys {
                let vj = &v.row(j)[lo..lo + dh];
                dp[j] = tensor::dot(go, vj);
                let dvj = &mut dv.row_mut(j)[lo..lo + dh];
                for (x, &gg) in dvj.iter_mut().zip(go) {
                    *x += p[j] * gg;
                }
            }
            let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let qi: Vec<f64> = q.row(i)[lo..lo + dh].to_vec();
            for j in 0..n_keys {
                let ds = p[j] * (dp[j] - pdp) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj: Vec<f64> = k.row(j)[lo..lo + dh].to_vec();
                let dqi = &mut dq.row_mut(i)[lo..lo + dh];
                for (x, kk) in dqi.iter_mut().zip(&kj) {
                    *x += ds * kk;
                }
                let dkj = &mut dk.row_mut(j)[lo..lo + dh];
                for (x, qq) in dkj.iter_mut().zip(&qi) {
                    *x += ds * qq;
                }
            }
        }
    }
    (dq, dk, dv)
}
