//! Wengert-list reverse-mode differentiation over matrices.
//!
//! Every node holds a fully evaluated matrix. Operations append nodes; a
//! backward sweep from a scalar node walks the list in reverse and
//! accumulates adjoints.

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_in_place, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, S),
    Relu(Var),
    ScaleRows(Var, Vec<S>),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<Option<usize>>),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    L1 {
        x: Var,
        target: Vec<S>,
    },
    Dot(Var, Vec<S>),
    WeightedSum(Vec<(Var, S)>),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads<S> {
    adjoints: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match &self.adjoints[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("adjoint matches node shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn dims<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. The value is folded to a matrix.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let m = if t.shape().len() == 2 {
            t
        } else {
            let (r, c) = dims(&t);
            t.reshape(vec![r, c]).expect("fold preserves length")
        };
        self.push(m, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value.data()[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let (r, c) = self.shape(a);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::Add(a, b)))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.value(row).len() != c {
            return Err(Error::shape(format!(
                "row broadcast of {} values onto {r}x{c}",
                self.value(row).len()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let b = self.value(row).data();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, &y) in chunk.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddRow(a, row)))
    }

    /// Adds a constant matrix (for example an attention mask). No gradient
    /// flows into the constant.
    pub fn add_const(&mut self, a: Var, constant: &Tensor<S>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if constant.rows() != r || constant.cols() != c {
            return Err(Error::shape(format!(
                "constant {:?} added to {r}x{c}",
                constant.shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(constant.data())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddConst(a)))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(t, Op::Relu(a))
    }

    /// Multiplies row `i` of `a` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<S>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if factors.len() != r {
            return Err(Error::shape(format!("{} row factors for {r} rows", factors.len())));
        }
        let mut data = self.value(a).data().to_vec();
        for (i, &f) in factors.iter().enumerate() {
            for x in &mut data[i * c..(i + 1) * c] {
                *x *= f;
            }
        }
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::ScaleRows(a, factors)))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != r) {
            return Err(Error::shape(format!(
                "concat row counts {r} and {}",
                self.shape(bad).0
            )));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + width > c {
            return Err(Error::shape(format!("columns {start}..{} of {c}", start + width)));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + width]);
        }
        Ok(self.push(Tensor::matrix(r, width, data)?, Op::SliceCols(a, start)))
    }

    /// Builds a matrix whose row `i` is row `index[i]` of `a`, or zeros when
    /// `index[i]` is `None`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut data = Vec::with_capacity(index.len() * c);
        for ix in &index {
            match ix {
                Some(j) if *j < r => data.extend_from_slice(self.value(a).row(*j)),
                Some(j) => return Err(Error::shape(format!("gather row {j} of {r}"))),
                None => data.extend(std::iter::repeat_n(S::zero(), c)),
            }
        }
        let n = index.len();
        Ok(self.push(Tensor::matrix(n, c, data)?, Op::Gather(a, index)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a).data();
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, data).expect("transpose keeps length");
        self.push(t, Op::Transpose(a))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for i in 0..t.rows() {
            softmax_in_place(t.row_mut(i));
        }
        self.push(t, Op::Softmax(a))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(format!("layer norm gain/bias for width {c}")));
        }
        let eps = S::of(LAYER_NORM_EPS);
        let n = S::of(c as f64);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![S::zero(); r * c];
        let mut inv_std = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean softmax cross-entropy over rows. Zero rows give a zero loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::shape(format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::TargetOutOfRange { target: t, classes: c });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &mut probs[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        if r > 0 {
            loss /= S::of(r as f64);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean absolute difference to a constant target.
    pub fn l1(&mut self, x: Var, target: &[S]) -> Result<Var> {
        let n = self.value(x).len();
        if target.len() != n {
            return Err(Error::shape(format!("l1 target of {} for {n} values", target.len())));
        }
        let mut sum = S::zero();
        for (&a, &b) in self.value(x).data().iter().zip(target) {
            sum += (a - b).abs();
        }
        if n > 0 {
            sum /= S::of(n as f64);
        }
        Ok(self.push(
            Tensor::scalar(sum),
            Op::L1 {
                x,
                target: target.to_vec(),
            },
        ))
    }

    /// Scalar `Σ weights ⊙ a`.
    pub fn dot_const(&mut self, a: Var, weights: Vec<S>) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(Error::shape("dot weights length"));
        }
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| x * w)
            .sum();
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, weights)))
    }

    /// Scalar `Σ wᵢ · termᵢ` of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Result<Var> {
        let mut v = S::zero();
        for &(t, w) in terms {
            if self.value(t).len() != 1 {
                return Err(Error::shape("weighted_sum over a non-scalar"));
            }
            v += self.scalar_value(t) * w;
        }
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![S::one(); self.nodes[loss.0].value.len()]);

        for id in (0..n).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            let (r, c) = dims(&node.value);
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let nn = self.shape(*b).1;
                    let ga = acc(&mut adj, *a, m * k);
                    gemm_nt_acc(&g, self.value(*b).data(), ga, m, nn, k);
                    let gb = acc(&mut adj, *b, k * nn);
                    gemm_tn_acc(self.value(*a).data(), &g, gb, m, k, nn);
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = self.shape(*a);
                    let nn = self.shape(*b).0;
                    let ga = acc(&mut adj, *a, m * k);
                    gemm_acc(&g, self.value(*b).data(), ga, m, nn, k);
                    let gb = acc(&mut adj, *b, nn * k);
                    gemm_tn_acc(&g, self.value(*a).data(), gb, m, nn, k);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut adj, *a, g.len()), &g);
                    add_into(acc(&mut adj, *b, g.len()), &g);
                }
                Op::AddRow(a, row) => {
                    add_into(acc(&mut adj, *a, g.len()), &g);
                    let gr = acc(&mut adj, *row, c);
                    for chunk in g.chunks(c.max(1)) {
                        add_into(gr, chunk);
                    }
                }
                Op::AddConst(a) => add_into(acc(&mut adj, *a, g.len()), &g),
                Op::Scale(a, s) => {
                    for (o, &gv) in acc(&mut adj, *a, g.len()).iter_mut().zip(&g) {
                        *o += gv * *s;
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    for ((o, &gv), &xv) in acc(&mut adj, *a, g.len()).iter_mut().zip(&g).zip(x) {
                        if xv > S::zero() {
                            *o += gv;
                        }
                    }
                }
                Op::ScaleRows(a, f) => {
                    let ga = acc(&mut adj, *a, g.len());
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * f[i];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        let gp = acc(&mut adj, p, r * w);
                        for i in 0..r {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * c + off..i * c + off + w]);
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (ar, ac) = self.shape(*a);
                    let ga = acc(&mut adj, *a, ar * ac);
                    for i in 0..r {
                        add_into(&mut ga[i * ac + start..i * ac + start + c], &g[i * c..(i + 1) * c]);
                    }
                }
                Op::Gather(a, index) => {
                    let (ar, ac) = self.shape(*a);
                    let ga = acc(&mut adj, *a, ar * ac);
                    for (i, ix) in index.iter().enumerate() {
                        if let Some(j) = ix {
                            add_into(&mut ga[j * ac..(j + 1) * ac], &g[i * c..(i + 1) * c]);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let ga = acc(&mut adj, *a, r * c);
                    // node is r×c, input is c×r
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let ga = acc(&mut adj, *a, r * c);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).data().to_vec();
                    {
                        let gg = acc(&mut adj, *gamma, c);
                        for i in 0..r {
                            for j in 0..c {
                                gg[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut adj, *beta, c);
                        for i in 0..r {
                            add_into(gb, &g[i * c..(i + 1) * c]);
                        }
                    }
                    let nf = S::of(c as f64);
                    let gx = acc(&mut adj, *x, r * c);
                    for i in 0..r {
                        let mut sum_d = S::zero();
                        let mut sum_dx = S::zero();
                        for j in 0..c {
                            let d = g[i * c + j] * gam[j];
                            sum_d += d;
                            sum_dx += d * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let d = g[i * c + j] * gam[j];
                            gx[i * c + j] +=
                                inv_std[i] / nf * (nf * d - sum_d - xhat[i * c + j] * sum_dx);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (lr, lc) = self.shape(*logits);
                    if lr > 0 {
                        let scale = g[0] / S::of(lr as f64);
                        let gl = acc(&mut adj, *logits, lr * lc);
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..lc {
                                let mut d = probs[i * lc + j];
                                if j == t {
                                    d -= S::one();
                                }
                                gl[i * lc + j] += d * scale;
                            }
                        }
                    }
                }
                Op::L1 { x, target } => {
                    let nvals = target.len();
                    if nvals > 0 {
                        let scale = g[0] / S::of(nvals as f64);
                        let xv = self.value(*x).data().to_vec();
                        let gx = acc(&mut adj, *x, nvals);
                        for k in 0..nvals {
                            let d = xv[k] - target[k];
                            if d > S::zero() {
                                gx[k] += scale;
                            } else if d < S::zero() {
                                gx[k] -= scale;
                            }
                        }
                    }
                }
                Op::Dot(a, w) => {
                    for (o, &wv) in acc(&mut adj, *a, w.len()).iter_mut().zip(w) {
                        *o += wv * g[0];
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(t, w) in terms {
                        acc(&mut adj, t, 1)[0] += w * g[0];
                    }
                }
            }
            adj[id] = Some(g);
        }

        Grads {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }
}

fn acc<S: Scalar>(adj: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut [S] {
    adj[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
