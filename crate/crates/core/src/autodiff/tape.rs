use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Concat(Vec<Var>),
    RowMean(Var),
    Sum(Var),
    LogSoftmax(Var),
    SelectRows(Var, Vec<usize>),
    /// Saved softmax probabilities.
    CrossEntropy(Var, Vec<usize>, Vec<S>),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records one forward pass; nodes are appended in topological order.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
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

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a leaf, zeros when the root did not depend on it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<S> {
        self.grad(v)
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); self.value(v).numel()])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn two_d(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(shape_err(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d(a, "matmul")?;
        let (k2, n) = self.two_d(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a `[1, n]` (or `[n]`) row to every row of a `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.two_d(a, "add_row")?;
        if self.value(row).numel() != n {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn map(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -S::one())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), Scalar::sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), Scalar::softplus)
    }

    /// Concatenates along the last (feature) axis; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return crate::error::invalid("concat of zero tensors");
        };
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err("concat", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.two_d(a, "row_mean")?;
        if m == 0 {
            return crate::error::invalid("row_mean of empty batch");
        }
        let inv = S::one() / S::from_usize(m).unwrap();
        let d = self.value(a).data();
        let mut out = vec![S::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::RowMean(a), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, S::one() / S::from_usize(n).unwrap())
    }

    /// Row-wise log-softmax of a `[m, c]` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, c) = self.two_d(a, "log_softmax")?;
        let out = log_softmax_rows(self.value(a).data(), m, c);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, c], out)?, Op::LogSoftmax(a), rg))
    }

    /// Gathers rows by index (indices may repeat).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.two_d(a, "select_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return crate::error::invalid(format!("row index {bad} out of range for {m} rows"));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&d[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![idx.len(), n], out)?, Op::SelectRows(a, idx.to_vec()), rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.two_d(logits, "cross_entropy")?;
        if m == 0 || labels.len() != m {
            return Err(Error::Length {
                what: "cross_entropy labels",
                expected: m,
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let logp = log_softmax_rows(self.value(logits).data(), m, c);
        let mut nll = S::zero();
        for (i, &y) in labels.iter().enumerate() {
            nll -= logp[i * c + y];
        }
        nll = nll / S::from_usize(m).unwrap();
        let probs = logp.into_iter().map(|v| v.exp()).collect();
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(nll), Op::CrossEntropy(logits, labels.to_vec(), probs), rg))
    }

    /// Reverse pass from a scalar root. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![S::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.nodes[id].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [S])| {
            if !wants(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                acc(*a, &|s| gemm_nt(g, val(*b).data(), s, m, n, k));
                acc(*b, &|s| gemm_tn(val(*a).data(), g, s, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g, S::one()));
                acc(*b, &|s| add_into(s, g, S::one()));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g, S::one()));
                acc(*b, &|s| add_into(s, g, -S::one()));
            }
            Op::AddRow(a, r) => {
                acc(*a, &|s| add_into(s, g, S::one()));
                let n = val(*r).numel();
                acc(*r, &|s| {
                    for chunk in g.chunks(n) {
                        add_into(s, chunk, S::one());
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &|s| {
                    for ((o, &gi), &bi) in s.iter_mut().zip(g).zip(val(*b).data()) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &|s| {
                    for ((o, &gi), &ai) in s.iter_mut().zip(g).zip(val(*a).data()) {
                        *o += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|s| add_into(s, g, *c)),
            Op::Relu(a) => acc(*a, &|s| {
                for ((o, &gi), &x) in s.iter_mut().zip(g).zip(val(*a).data()) {
                    if x > S::zero() {
                        *o += gi;
                    }
                }
            }),
            Op::Sigmoid(a) => acc(*a, &|s| {
                for ((o, &gi), &y) in s.iter_mut().zip(g).zip(node.value.data()) {
                    *o += gi * y * (S::one() - y);
                }
            }),
            Op::Softplus(a) => acc(*a, &|s| {
                for ((o, &gi), &x) in s.iter_mut().zip(g).zip(val(*a).data()) {
                    *o += gi * x.sigmoid();
                }
            }),
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.numel() / total.max(1);
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    acc(*p, &|s| {
                        for r in 0..rows {
                            add_into(&mut s[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w], S::one());
                        }
                    });
                    offset += w;
                }
            }
            Op::RowMean(a) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                let inv = S::one() / S::from_usize(m).unwrap();
                acc(*a, &|s| {
                    for i in 0..m {
                        add_into(&mut s[i * n..(i + 1) * n], g, inv);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                acc(*a, &|s| {
                    for (r, (srow, grow)) in s.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let gsum: S = grow.iter().copied().sum();
                        let out = node.value.row_slice(r);
                        for ((o, &gi), &lp) in srow.iter_mut().zip(grow).zip(out) {
                            *o += gi - lp.exp() * gsum;
                        }
                    }
                });
            }
            Op::SelectRows(a, idx) => {
                let n = val(*a).cols();
                acc(*a, &|s| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * n..(i + 1) * n], &g[r * n..(r + 1) * n], S::one());
                    }
                });
            }
            Op::CrossEntropy(a, labels, probs) => {
                let c = val(*a).cols();
                let scale = g[0] / S::from_usize(labels.len()).unwrap();
                acc(*a, &|s| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let t = if j == y { S::one() } else { S::zero() };
                            s[i * c + j] += scale * (probs[i * c + j] - t);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S], c: S) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn log_softmax_rows<S: Scalar>(x: &[S], m: usize, c: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(m * c);
    for i in 0..m {
        let row = &x[i * c..(i + 1) * c];
        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}
