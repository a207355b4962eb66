//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose inputs are strictly earlier nodes, so the
//! recorded graph is acyclic by construction and the backward sweep is a
//! single reverse pass over the node list. Leaves may borrow their values
//! (model parameters) instead of copying them onto the tape.

use std::borrow::Cow;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index_for_tests(index: usize) -> Self {
        Var(index)
    }
}

/// Batch moments observed by a train-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the convention used for running estimates.
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SoftTargetKl { logits: Var, targets: Vec<f64>, probs: Vec<f64>, temperature: f64 },
    WeightedCrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    WeightedMargin { x: Var, weights: Vec<f64>, first: Vec<usize>, second: Vec<usize> },
    TopTwoMargin { x: Var, first: Vec<usize>, second: Vec<usize> },
    Sum { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, [f64]>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable row softmax of a `rows x cols` block.
pub fn softmax_rows(values: &[f64], cols: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn top_two(row: &[f64]) -> (usize, usize) {
    let first = argmax(row);
    let mut second = usize::MAX;
    for (i, v) in row.iter().enumerate() {
        if i != first && (second == usize::MAX || *v > row[second]) {
            second = i;
        }
    }
    (first, second)
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(contribution).for_each(|(e, c)| *e += c),
        None => *slot = Some(contribution),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, rows: usize, cols: usize, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    /// Leaf holding a `rows x cols` block of borrowed values.
    pub fn leaf_borrowed(&mut self, values: &'a [f64], rows: usize, cols: usize, requires_grad: bool) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("leaf {rows}x{cols} given {} values", values.len())));
        }
        ensure_finite(values, "leaf")?;
        Ok(self.push(Cow::Borrowed(values), rows, cols, requires_grad, Op::Leaf))
    }

    pub fn leaf(&mut self, values: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!("leaf {rows}x{cols} given {} values", values.len())));
        }
        ensure_finite(&values, "leaf")?;
        Ok(self.push(Cow::Owned(values), rows, cols, requires_grad, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// `x (n x in) * w^T + b`, with `w` stored `out x in` and `b` of length `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fan_in) = self.shape(x);
        let (out, w_in) = self.shape(w);
        let (b_rows, b_cols) = self.shape(b);
        if w_in != fan_in || b_rows * b_cols != out {
            return Err(Error::ShapeMismatch(format!(
                "linear: input {n}x{fan_in}, weight {out}x{w_in}, bias {}",
                b_rows * b_cols
            )));
        }
        let bias = self.value(b);
        let mut y = Vec::with_capacity(n * out);
        for _ in 0..n {
            y.extend_from_slice(bias);
        }
        gemm(n, fan_in, out, self.value(x), (fan_in, 1), self.value(w), (1, fan_in), 1.0, &mut y);
        ensure_finite(&y, "linear output")?;
        let rg = self.node(x).requires_grad || self.node(w).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Cow::Owned(y), n, out, rg, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let y: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Cow::Owned(y), r, c, rg, Op::Relu { x }))
    }

    /// Per-channel batch normalization of an `n x channels` input.
    ///
    /// With `running = None` the batch's own moments are used (train mode) and
    /// returned so the caller can update its running estimates; otherwise the
    /// supplied `(mean, var)` pair normalizes the input (eval mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let (n, ch) = self.shape(x);
        if self.value(gamma).len() != ch || self.value(beta).len() != ch {
            return Err(Error::ShapeMismatch(format!("batch norm over {ch} channels")));
        }
        let xv = self.value(x);
        let (mean, var, moments) = match running {
            Some((m, v)) => {
                if m.len() != ch || v.len() != ch {
                    return Err(Error::ShapeMismatch("running stats".into()));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if n < 2 {
                    return Err(Error::ShapeMismatch("train-mode batch norm needs at least 2 rows".into()));
                }
                let mut mean = vec![0.0; ch];
                for row in xv.chunks(ch) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut ss = vec![0.0; ch];
                for row in xv.chunks(ch) {
                    for c in 0..ch {
                        let d = row[c] - mean[c];
                        ss[c] += d * d;
                    }
                }
                let var: Vec<f64> = ss.iter().map(|s| s / n as f64).collect();
                let var_unbiased = ss.iter().map(|s| s / (n - 1) as f64).collect();
                let moments = BatchMoments { mean: mean.clone(), var_unbiased };
                (mean, var, Some(moments))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = Vec::with_capacity(n * ch);
        let mut y = Vec::with_capacity(n * ch);
        for row in xv.chunks(ch) {
            for c in 0..ch {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                y.push(g[c] * h + b[c]);
            }
        }
        ensure_finite(&y, "batch norm output")?;
        let rg = self.node(x).requires_grad || self.node(gamma).requires_grad || self.node(beta).requires_grad;
        let batch_stats = running.is_none();
        let var_out = self.push(
            Cow::Owned(y),
            n,
            ch,
            rg,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
        );
        Ok((var_out, moments))
    }

    /// Mean softmax cross-entropy of `n x classes` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, classes) = self.shape(logits);
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!("{n} logit rows, {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let lv = self.value(logits);
        let mut loss = 0.0;
        for (row, &y) in lv.chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= n as f64;
        ensure_finite(&[loss], "cross entropy")?;
        let probs = softmax_rows(lv, classes);
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Mean over rows of `KL(targets || softmax(logits / temperature))`.
    pub fn soft_target_kl(&mut self, logits: Var, targets: &[f64], temperature: f64) -> Result<Var> {
        let (n, classes) = self.shape(logits);
        if targets.len() != n * classes {
            return Err(Error::ShapeMismatch("distillation targets".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
        }
        let scaled: Vec<f64> = self.value(logits).iter().map(|v| v / temperature).collect();
        let probs = softmax_rows(&scaled, classes);
        let mut loss = 0.0;
        for (row, trow) in scaled.chunks(classes).zip(targets.chunks(classes)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (z, &t) in row.iter().zip(trow) {
                if t > 0.0 {
                    loss += t * (t.ln() - (z - lse));
                }
            }
        }
        loss /= n as f64;
        ensure_finite(&[loss], "distillation loss")?;
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            rg,
            Op::SoftTargetKl { logits, targets: targets.to_vec(), probs, temperature },
        ))
    }

    /// Mean over rows of the gap between the largest and second-largest entry.
    pub fn top_two_margin(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if c < 2 {
            return Err(Error::ShapeMismatch("margin needs at least two classes".into()));
        }
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        let mut total = 0.0;
        for row in self.value(x).chunks(c) {
            let (a, b) = top_two(row);
            total += row[a] - row[b];
            first.push(a);
            second.push(b);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Cow::Owned(vec![total / n as f64]), 1, 1, rg, Op::TopTwoMargin { x, first, second }))
    }

    /// `sum_r weights[r] * CE_r`: per-row cross-entropy with arbitrary signed weights.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let (n, classes) = self.shape(logits);
        if labels.len() != n || weights.len() != n {
            return Err(Error::ShapeMismatch(format!("{n} logit rows, {} labels, {} weights", labels.len(), weights.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let lv = self.value(logits);
        let mut loss = 0.0;
        for ((row, &y), &w) in lv.chunks(classes).zip(labels).zip(weights) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += w * (lse - row[y]);
        }
        ensure_finite(&[loss], "weighted cross entropy")?;
        let probs = softmax_rows(lv, classes);
        let rg = self.node(logits).requires_grad;
        Ok(self.push(
            Cow::Owned(vec![loss]),
            1,
            1,
            rg,
            Op::WeightedCrossEntropy { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs },
        ))
    }

    /// `sum_r weights[r] * (top1_r - top2_r)`.
    pub fn weighted_margin(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let (n, c) = self.shape(x);
        if c < 2 {
            return Err(Error::ShapeMismatch("margin needs at least two classes".into()));
        }
        if weights.len() != n {
            return Err(Error::ShapeMismatch(format!("{n} rows, {} weights", weights.len())));
        }
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        let mut total = 0.0;
        for (row, &w) in self.value(x).chunks(c).zip(weights) {
            let (a, b) = top_two(row);
            total += w * (row[a] - row[b]);
            first.push(a);
            second.push(b);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            Cow::Owned(vec![total]),
            1,
            1,
            rg,
            Op::WeightedMargin { x, weights: weights.to_vec(), first, second },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f64>();
        let rg = self.node(x).requires_grad;
        self.push(Cow::Owned(vec![s]), 1, 1, rg, Op::Sum { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape != self.shape(b) {
            return Err(Error::ShapeMismatch(format!("add {:?} vs {:?}", shape, self.shape(b))));
        }
        let y: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Cow::Owned(y), shape.0, shape.1, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape != self.shape(b) {
            return Err(Error::ShapeMismatch(format!("mul {:?} vs {:?}", shape, self.shape(b))));
        }
        let y: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        ensure_finite(&y, "product")?;
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Cow::Owned(y), shape.0, shape.1, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let (r, c) = self.shape(x);
        let y: Vec<f64> = self.value(x).iter().map(|v| v * factor).collect();
        let rg = self.node(x).requires_grad;
        self.push(Cow::Owned(y), r, c, rg, Op::Scale { x, factor })
    }

    /// Reverse sweep from a scalar root. Only leaves that require gradients
    /// and are reachable from the root receive an entry.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_len = self.node(root).value.len();
        if root_len != 1 {
            return Err(Error::NotScalar(root_len));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(root).requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        for g in grads.iter().flatten() {
            ensure_finite(g, "gradient")?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, fan_in) = self.shape(*x);
                let out = node.cols;
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * fan_in];
                    gemm(n, out, fan_in, g, (out, 1), self.value(*w), (fan_in, 1), 0.0, &mut dx);
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; out * fan_in];
                    gemm(out, n, fan_in, g, (1, out), self.value(*x), (fan_in, 1), 0.0, &mut dw);
                    accumulate(&mut grads[w.0], dw);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; out];
                    for row in g.chunks(out) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let dx = self.value(*x).iter().zip(g).map(|(v, d)| if *v > 0.0 { *d } else { 0.0 }).collect();
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let ch = node.cols;
                let n = node.rows;
                let gv = self.value(*gamma);
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for (grow, hrow) in g.chunks(ch).zip(xhat.chunks(ch)) {
                    for c in 0..ch {
                        dgamma[c] += grow[c] * hrow[c];
                        dbeta[c] += grow[c];
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * ch];
                    if *batch_stats {
                        // dxhat = g * gamma; dx = inv_std / n * (n dxhat - sum dxhat - xhat sum(dxhat xhat))
                        let nf = n as f64;
                        for c in 0..ch {
                            let sum_dxhat = dbeta[c] * gv[c];
                            let sum_dxhat_xhat = dgamma[c] * gv[c];
                            for r in 0..n {
                                let k = r * ch + c;
                                let dxhat = g[k] * gv[c];
                                dx[k] = inv_std[c] / nf * (nf * dxhat - sum_dxhat - xhat[k] * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for (k, d) in dx.iter_mut().enumerate() {
                            let c = k % ch;
                            *d = g[k] * gv[c] * inv_std[c];
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], dgamma);
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], dbeta);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let (n, classes) = self.shape(*logits);
                    let scale = g[0] / n as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        d[r * classes + y] -= scale;
                    }
                    accumulate(&mut grads[logits.0], d);
                }
            }
            Op::SoftTargetKl { logits, targets, probs, temperature } => {
                if self.wants(*logits) {
                    let (n, _) = self.shape(*logits);
                    let scale = g[0] / (n as f64 * temperature);
                    let d = probs.iter().zip(targets).map(|(q, t)| (q - t) * scale).collect();
                    accumulate(&mut grads[logits.0], d);
                }
            }
            Op::WeightedCrossEntropy { logits, labels, weights, probs } => {
                if self.wants(*logits) {
                    let classes = self.shape(*logits).1;
                    let mut d = vec![0.0; probs.len()];
                    for (r, (&y, &w)) in labels.iter().zip(weights).enumerate() {
                        let s = g[0] * w;
                        for k in 0..classes {
                            d[r * classes + k] = probs[r * classes + k] * s;
                        }
                        d[r * classes + y] -= s;
                    }
                    accumulate(&mut grads[logits.0], d);
                }
            }
            Op::WeightedMargin { x, weights, first, second } => {
                if self.wants(*x) {
                    let (n, c) = self.shape(*x);
                    let mut d = vec![0.0; n * c];
                    for r in 0..n {
                        let s = g[0] * weights[r];
                        d[r * c + first[r]] += s;
                        d[r * c + second[r]] -= s;
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::TopTwoMargin { x, first, second } => {
                if self.wants(*x) {
                    let (n, c) = self.shape(*x);
                    let scale = g[0] / n as f64;
                    let mut d = vec![0.0; n * c];
                    for r in 0..n {
                        d[r * c + first[r]] += scale;
                        d[r * c + second[r]] -= scale;
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], vec![g[0]; self.value(*x).len()]);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let d = g.iter().zip(self.value(*b).iter()).map(|(d, v)| d * v).collect();
                    accumulate(&mut grads[a.0], d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(self.value(*a).iter()).map(|(d, v)| d * v).collect();
                    accumulate(&mut grads[b.0], d);
                }
            }
            Op::Scale { x, factor } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.iter().map(|d| d * factor).collect());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, -2.0, 3.0, 0.5, 9.0], 1, 5, true).unwrap();
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0], 1, 1, true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let g = t.backward(sq).unwrap();
        assert_eq!(t.scalar(sq), 9.0);
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], 1, 2, true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::NotScalar(2))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0], 1, 1, true).unwrap();
        let y = t.leaf(vec![2.0], 1, 1, true).unwrap();
        let frozen = t.leaf(vec![2.0], 1, 1, false).unwrap();
        let p = t.mul(x, frozen).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0]);
        assert!(g.get(y).is_none());
        assert!(g.get(frozen).is_none());
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_classes() {
        let mut t = Tape::new();
        let l = t.leaf(vec![0.3; 8], 2, 4, false).unwrap();
        let ce = t.cross_entropy(l, &[0, 3]).unwrap();
        assert!((t.scalar(ce) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_cross_entropy_vanishes() {
        let mut t = Tape::new();
        let l = t.leaf(vec![0.0, 1e6, 0.0, 0.0], 1, 4, false).unwrap();
        let ce = t.cross_entropy(l, &[1]).unwrap();
        assert!(t.scalar(ce).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut t = Tape::new();
        let l = t.leaf(vec![0.0; 4], 1, 4, false).unwrap();
        assert!(matches!(t.cross_entropy(l, &[4]), Err(Error::LabelOutOfRange { label: 4, classes: 4 })));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = vec![0.2, -1.0, 0.7, 2.0, 1.0, 1.0, -0.5, 0.0];
        let labels = [3, 0];
        let mut t = Tape::new();
        let l = t.leaf(logits.clone(), 2, 4, true).unwrap();
        let ce = t.cross_entropy(l, &labels).unwrap();
        let g = t.backward(ce).unwrap();
        let p = softmax_rows(&logits, 4);
        for r in 0..2 {
            let row_sum: f64 = p[r * 4..r * 4 + 4].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            for c in 0..4 {
                let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                let expect = (p[r * 4 + c] - onehot) / 2.0;
                assert!((g.get(l).unwrap()[r * 4 + c] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let logits = vec![0.5, -0.2, 1.5, 0.0];
        let p = softmax_rows(&logits, 4);
        let mut t = Tape::new();
        let l = t.leaf(logits, 1, 4, true).unwrap();
        let kl = t.soft_target_kl(l, &p, 1.0).unwrap();
        assert!(t.scalar(kl).abs() < 1e-14);
        let g = t.backward(kl).unwrap();
        assert!(g.get(l).unwrap().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn margin_of_top_two() {
        let mut t = Tape::new();
        let l = t.leaf(vec![2.0, 0.0, 0.0, 0.0], 1, 4, true).unwrap();
        let m = t.top_two_margin(l).unwrap();
        assert_eq!(t.scalar(m), 2.0);
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(l).unwrap(), &[1.0, -1.0, 0.0, 0.0]);

        let mut t = Tape::new();
        let l = t.leaf(vec![1.0, 3.0, 3.0, 0.0], 1, 4, false).unwrap();
        let m = t.top_two_margin(l).unwrap();
        assert_eq!(t.scalar(m), 0.0);
    }

    #[test]
    fn weighted_losses_reduce_to_means() {
        let logits = vec![1.0, 0.5, -0.2, 0.0, 0.3, 2.0, 0.1, -1.0];
        let mut tape = Tape::new();
        let z = tape.leaf(logits, 2, 4, true).unwrap();
        let mean = tape.cross_entropy(z, &[0, 1]).unwrap();
        let weighted = tape.weighted_cross_entropy(z, &[0, 1], &[0.5, 0.5]).unwrap();
        assert!((tape.scalar(mean) - tape.scalar(weighted)).abs() < 1e-15);
        let m1 = tape.top_two_margin(z).unwrap();
        let m2 = tape.weighted_margin(z, &[0.5, 0.5]).unwrap();
        assert!((tape.scalar(m1) - tape.scalar(m2)).abs() < 1e-15);
        let g1 = tape.backward(mean).unwrap().get(z).unwrap().to_vec();
        let g2 = tape.backward(weighted).unwrap().get(z).unwrap().to_vec();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weight_rows_get_no_gradient() {
        let mut tape = Tape::new();
        let z = tape.leaf(vec![1.0, 0.0, 0.0, 0.0, 3.0, 1.0, 0.0, 0.0], 2, 4, true).unwrap();
        let l = tape.weighted_cross_entropy(z, &[1, 2], &[0.0, -2.0]).unwrap();
        let g = tape.backward(l).unwrap().get(z).unwrap().to_vec();
        assert!(g[..4].iter().all(|v| *v == 0.0));
        assert!(g[4..].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0, 1.0]), 3);
        assert_eq!(argmax(&[1.0, 1.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn linear_identity_passes_input() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], 2, 2, false).unwrap();
        let w = t.leaf(vec![1.0, 0.0, 0.0, 1.0], 2, 2, false).unwrap();
        let b = t.leaf(vec![0.0, 0.0], 1, 2, false).unwrap();
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }
}
