//! Reverse-mode autodiff over a small fixed op set.
//!
//! A [`Tape`] records forward values in creation order; [`Tape::backward`]
//! walks the nodes in reverse and returns per-node gradients. Parameters
//! enter the tape as copies of their current value and their gradients are
//! folded back into the [`ParamStore`] with [`Gradients::accumulate`].

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Silu(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    EmbedMean { table: Var, bags: Vec<Vec<usize>> },
    NormalizeRows { x: Var, norms: Vec<f32> },
    SegmentSum { x: Var, lens: Vec<usize> },
    GroupDot { cands: Var, ctx: Var, group: usize },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Tensor },
    Mse { pred: Var, target: Tensor },
    Sum(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

const NORM_EPS: f32 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(y, Op::MatMulNt(a, b)))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        let (n, m) = xv.as_matrix("add_row")?;
        if bv.len() != m {
            return Err(Error::dim("add_row bias", m, bv.len()));
        }
        let mut y = xv.clone();
        for i in 0..n {
            for (o, &bb) in y.data_mut()[i * m..(i + 1) * m].iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(y, Op::AddRow(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        let y = self.value(x).map(|v| v + s);
        self.push(y, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * sigmoid(v));
        self.push(y, Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f32::tanh);
        self.push(y, Op::Tanh(x))
    }

    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("concat of nothing".into()))?;
        let rows = self.value(*first).as_matrix("concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).as_matrix("concat")?;
            if r != rows {
                return Err(Error::dim("concat rows", rows, r));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let y = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix("slice_cols")?;
        if start + len > cols || len == 0 {
            return Err(Error::dim("slice_cols", cols, start + len));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let y = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(y, Op::Slice { x, start, len }))
    }

    /// Mean of embedding-table rows per bag; an empty bag yields a zero row.
    pub fn embed_mean(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, e) = tv.as_matrix("embed_mean")?;
        if bags.is_empty() {
            return Err(Error::Domain("embed_mean needs at least one bag".into()));
        }
        let mut data = vec![0.0f32; bags.len() * e];
        for (i, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let out = &mut data[i * e..(i + 1) * e];
            for &tok in bag {
                if tok >= vocab {
                    return Err(Error::dim("embed_mean token", format!("< {vocab}"), tok));
                }
                for (o, &w) in out.iter_mut().zip(tv.row(tok)) {
                    *o += w;
                }
            }
            let inv = 1.0 / bag.len() as f32;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let y = Tensor::new(vec![bags.len(), e], data)?;
        Ok(self.push(y, Op::EmbedMean { table, bags }))
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = xv.as_matrix("normalize_rows")?;
        let mut y = xv.clone();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &mut y.data_mut()[i * m..(i + 1) * m];
            let norm = (row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt() as f32)
                .max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(self.push(y, Op::NormalizeRows { x, norms }))
    }

    /// Sums consecutive row segments of the given lengths.
    pub fn segment_sum(&mut self, x: Var, lens: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.as_matrix("segment_sum")?;
        if lens.iter().sum::<usize>() != rows || lens.is_empty() {
            return Err(Error::dim("segment_sum", rows, lens.iter().sum::<usize>()));
        }
        let mut data = vec![0.0f32; lens.len() * d];
        let mut r = 0;
        for (s, &len) in lens.iter().enumerate() {
            let out = &mut data[s * d..(s + 1) * d];
            for _ in 0..len {
                for (o, &v) in out.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
                r += 1;
            }
        }
        let y = Tensor::new(vec![lens.len(), d], data)?;
        Ok(self.push(y, Op::SegmentSum { x, lens }))
    }

    /// `out[s, j] = cands[s*group + j] · ctx[s]`.
    pub fn group_dot(&mut self, cands: Var, ctx: Var, group: usize) -> Result<Var> {
        let cv = self.value(cands);
        let xv = self.value(ctx);
        let (cr, d) = cv.as_matrix("group_dot candidates")?;
        let (s, d2) = xv.as_matrix("group_dot context")?;
        if d != d2 || cr != s * group || group == 0 {
            return Err(Error::dim(
                "group_dot",
                format!("[{}, {d2}]", s * group),
                format!("[{cr}, {d}]"),
            ));
        }
        let mut data = Vec::with_capacity(s * group);
        for i in 0..s {
            let c = xv.row(i);
            for j in 0..group {
                data.push(super::tensor::dot(cv.row(i * group + j), c));
            }
        }
        let y = Tensor::new(vec![s, group], data)?;
        Ok(self.push(y, Op::GroupDot { cands, ctx, group }))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = lv.as_matrix("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::dim("softmax_cross_entropy labels", n, labels.len()));
        }
        let mut probs = Tensor::zeros(&[n, k]);
        let mut loss = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Domain(format!("label {label} out of range {k}")));
            }
            let row = lv.row(i);
            let p = super::ops::softmax(row)?;
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let lse = max
                + row
                    .iter()
                    .map(|&v| (v as f64 - max).exp())
                    .sum::<f64>()
                    .ln();
            loss += lse - row[label] as f64;
            probs.data_mut()[i * k..(i + 1) * k].copy_from_slice(&p);
        }
        let y = Tensor::scalar((loss / n as f64) as f32);
        Ok(self.push(
            y,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::dim(
                "mse",
                format!("{:?}", pv.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        let y = Tensor::scalar((s / pv.len() as f64) as f32);
        Ok(self.push(y, Op::Mse { pred, target }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum() as f32);
        self.push(y, Op::Sum(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).transpose()?;
        Ok(self.push(y, Op::Transpose(x)))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::dim("backward output", 1, self.value(out).len()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&g)?;
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::MatMulNt(a, b) => {
                    let da = g.matmul(self.value(*b))?;
                    let db = g.matmul_tn(self.value(*a))?;
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::AddRow(x, b) => {
                    let (n, m) = g.as_matrix("add_row grad")?;
                    let mut db = vec![0.0f32; m];
                    for i in 0..n {
                        for (o, &v) in db.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    let db = Tensor::new(self.value(*b).shape().to_vec(), db)?;
                    accum(&mut grads, *b, db);
                    accum(&mut grads, *x, g.clone());
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *b, g.scale(-1.0));
                    accum(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |g, y| g * y)?;
                    let db = g.zip_map(self.value(*a), |g, x| g * x)?;
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
                Op::Scale(x, s) => accum(&mut grads, *x, g.scale(*s)),
                Op::AddScalar(x) => accum(&mut grads, *x, g.clone()),
                Op::Relu(x) => {
                    let dx = g.zip_map(self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accum(&mut grads, *x, dx);
                }
                Op::Silu(x) => {
                    let dx = g.zip_map(self.value(*x), |g, x| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })?;
                    accum(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?;
                    accum(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let rows = g.rows();
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut d = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            d.extend_from_slice(&g.row(i)[off..off + w]);
                        }
                        accum(&mut grads, p, Tensor::new(vec![rows, w], d)?);
                        off += w;
                    }
                }
                Op::Slice { x, start, len } => {
                    let xv = self.value(*x);
                    let (rows, cols) = xv.as_matrix("slice grad")?;
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    for i in 0..rows {
                        dx.data_mut()[i * cols + start..i * cols + start + len]
                            .copy_from_slice(g.row(i));
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::EmbedMean { table, bags } => {
                    let tv = self.value(*table);
                    let (_, e) = tv.as_matrix("embed_mean grad")?;
                    let mut dt = Tensor::zeros(tv.shape());
                    for (i, bag) in bags.iter().enumerate() {
                        if bag.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / bag.len() as f32;
                        let gi = g.row(i).to_vec();
                        for &tok in bag {
                            let row = &mut dt.data_mut()[tok * e..(tok + 1) * e];
                            for (o, &v) in row.iter_mut().zip(&gi) {
                                *o += v * inv;
                            }
                        }
                    }
                    accum(&mut grads, *table, dt);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let (n, m) = y.as_matrix("normalize grad")?;
                    let mut dx = Tensor::zeros(&[n, m]);
                    for i in 0..n {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let proj: f32 = super::tensor::dot(yr, gr);
                        let out = &mut dx.data_mut()[i * m..(i + 1) * m];
                        for j in 0..m {
                            out[j] = (gr[j] - yr[j] * proj) / norms[i];
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::SegmentSum { x, lens } => {
                    let (_, d) = g.as_matrix("segment_sum grad")?;
                    let rows: usize = lens.iter().sum();
                    let mut dx = Vec::with_capacity(rows * d);
                    for (s, &len) in lens.iter().enumerate() {
                        for _ in 0..len {
                            dx.extend_from_slice(g.row(s));
                        }
                    }
                    accum(&mut grads, *x, Tensor::new(vec![rows, d], dx)?);
                }
                Op::GroupDot { cands, ctx, group } => {
                    let cv = self.value(*cands);
                    let xv = self.value(*ctx);
                    let (s, d) = xv.as_matrix("group_dot grad")?;
                    let mut dc = Tensor::zeros(cv.shape());
                    let mut dctx = Tensor::zeros(xv.shape());
                    for i in 0..s {
                        for j in 0..*group {
                            let gij = g.data()[i * group + j];
                            let r = i * group + j;
                            let crow = cv.row(r).to_vec();
                            {
                                let out = &mut dc.data_mut()[r * d..(r + 1) * d];
                                for (o, &c) in out.iter_mut().zip(xv.row(i)) {
                                    *o += gij * c;
                                }
                            }
                            let out = &mut dctx.data_mut()[i * d..(i + 1) * d];
                            for (o, &c) in out.iter_mut().zip(&crow) {
                                *o += gij * c;
                            }
                        }
                    }
                    accum(&mut grads, *cands, dc);
                    accum(&mut grads, *ctx, dctx);
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let (n, k) = probs.as_matrix("softmax_ce grad")?;
                    let scale = g.data()[0] / n as f32;
                    let mut d = probs.clone();
                    for (i, &label) in labels.iter().enumerate() {
                        d.data_mut()[i * k + label] -= 1.0;
                    }
                    d.data_mut().iter_mut().for_each(|v| *v *= scale);
                    accum(&mut grads, *logits, d);
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let scale = 2.0 * g.data()[0] / pv.len() as f32;
                    let d = pv.zip_map(target, |a, b| scale * (a - b))?;
                    accum(&mut grads, *pred, d);
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    accum(&mut grads, *x, Tensor::full(self.value(*x).shape(), gv));
                }
                Op::Transpose(x) => accum(&mut grads, *x, g.transpose()?),
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds the gradient of every parameter leaf on `tape` into `store`.
    pub fn accumulate(&self, tape: &Tape, store: &mut ParamStore) {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
    }
}
