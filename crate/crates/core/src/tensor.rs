//! Dense tensors and a reverse-mode differentiation tape.
//!
//! A [`Tape`] records one forward computation. Calling [`Tape::backward`]
//! consumes the tape, so all intermediate storage is released once the
//! gradients have been extracted.

use std::sync::Arc;

use crate::error::{invalid, Result};
use crate::estimators::SampleBackward;
use crate::nn::{ParamId, ParamStore};

/// Row-major dense array of rank 1 or 2. Scalars have shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 || shape.iter().any(|&d| d == 0) {
            return invalid(format!("unsupported shape {shape:?}"));
        }
        if shape.iter().product::<usize>() != data.len() {
            return invalid(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.is_matrix() {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBroadcast(Var, Var),
    BroadcastRows(Var),
    OuterSum(Var, Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Tanh(Var),
    MaskedSoftmaxRows(Var, Vec<bool>),
    Concat(Vec<Var>),
    RowScale(Var, Var),
    GatherMean(Var, Vec<Vec<usize>>),
    Reshape(Var),
    Sum(Var),
    Dot(Var, Var),
    SoftmaxCrossEntropy(Var, usize),
    SubsetSample(Var, SampleBackward),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a parameter; the tape shares the stored tensor.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_arc(store.shared(id), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.is_matrix() || !y.is_matrix() || x.cols() != y.rows() {
            return invalid(format!("matmul shapes {:?} x {:?}", x.shape(), y.shape()));
        }
        let out = matmul_raw(x.data(), y.data(), x.rows(), x.cols(), y.cols());
        let t = Tensor::matrix(x.rows(), y.cols(), out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return invalid(format!(
                "{what} shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        self.push(t, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect())
            .expect("shape preserved");
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |p, q| p + q))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |p, q| p - q))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |p, q| p * q))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |v| v * c)
    }

    /// `a + b` with `b` (length d) added to every row of `a` (n×d).
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.is_matrix() || y.is_matrix() || x.cols() != y.len() {
            return invalid(format!("row broadcast shapes {:?} + {:?}", x.shape(), y.shape()));
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + y.data()[i % c])
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRowBroadcast(a, b)))
    }

    /// Stacks vector `v` into `rows` identical rows.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let x = self.value(v);
        if x.is_matrix() {
            return invalid("broadcast_rows expects a vector");
        }
        let data = (0..rows).flat_map(|_| x.data().iter().copied()).collect();
        let t = Tensor::matrix(rows, x.len(), data)?;
        Ok(self.push(t, Op::BroadcastRows(v)))
    }

    /// `out[i][j] = s[i] + t[j]`.
    pub fn outer_sum(&mut self, s: Var, t: Var) -> Result<Var> {
        let (x, y) = (self.value(s), self.value(t));
        if x.is_matrix() || y.is_matrix() {
            return invalid("outer_sum expects vectors");
        }
        let mut data = Vec::with_capacity(x.len() * y.len());
        for a in x.data() {
            for b in y.data() {
                data.push(a + b);
            }
        }
        let out = Tensor::matrix(x.len(), y.len(), data)?;
        Ok(self.push(out, Op::OuterSum(s, t)))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, Op::Elu(a), |v| if v > 0.0 { v } else { v.exp_m1() })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Row-wise softmax over entries where `mask` is true; masked entries are 0.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let x = self.value(a);
        if !x.is_matrix() || mask.len() != x.len() {
            return invalid(format!(
                "masked softmax on {:?} with mask of {}",
                x.shape(),
                mask.len()
            ));
        }
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let allowed = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(allowed)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..c {
                if allowed[j] {
                    let e = (row[j] - max).exp();
                    out[i * c + j] = e;
                    total += e;
                }
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= total;
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(t, Op::MaskedSoftmaxRows(a, mask)))
    }

    /// Concatenates vectors end to end, or matrices along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat of nothing");
        }
        let first = self.value(parts[0]);
        let t = if first.is_matrix() {
            let rows = first.rows();
            if parts
                .iter()
                .any(|p| !self.value(*p).is_matrix() || self.value(*p).rows() != rows)
            {
                return invalid("concat expects matrices with equal row counts");
            }
            let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(i));
                }
            }
            Tensor::matrix(rows, cols, data)?
        } else {
            if parts.iter().any(|p| self.value(*p).is_matrix()) {
                return invalid("concat cannot mix vectors and matrices");
            }
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|p| self.value(*p).data().iter().copied())
                .collect();
            Tensor::vector(data)?
        };
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    /// `out[i][j] = z[i] * h[i][j]`.
    pub fn row_scale(&mut self, h: Var, z: Var) -> Result<Var> {
        let (x, w) = (self.value(h), self.value(z));
        if !x.is_matrix() || w.is_matrix() || x.rows() != w.len() {
            return invalid(format!("row_scale shapes {:?} by {:?}", x.shape(), w.shape()));
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * w.data()[i / c])
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::RowScale(h, z)))
    }

    /// Each output row is the mean of the selected rows of `table`; an empty
    /// group gives a zero row.
    pub fn gather_mean(&mut self, table: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let x = self.value(table);
        if !x.is_matrix() {
            return invalid("gather_mean expects a matrix table");
        }
        let c = x.cols();
        let mut data = Vec::with_capacity(groups.len() * c);
        for g in &groups {
            if let Some(bad) = g.iter().find(|&&i| i >= x.rows()) {
                return invalid(format!("row {bad} out of range for table of {}", x.rows()));
            }
            let mut acc = vec![0.0; c];
            for &i in g {
                for (a, v) in acc.iter_mut().zip(x.row(i)) {
                    *a += v;
                }
            }
            let inv = 1.0 / g.len().max(1) as f64;
            data.extend(acc.into_iter().map(|a| a * inv));
        }
        let t = Tensor::matrix(groups.len(), c, data)?;
        Ok(self.push(t, Op::GatherMean(table, groups)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p * q)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    /// `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.value(logits);
        if x.is_matrix() {
            return invalid("cross entropy expects a logit vector");
        }
        if label >= x.len() {
            return invalid(format!("label {label} out of range for {} classes", x.len()));
        }
        let loss = log_sum_exp(x.data()) - x.data()[label];
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy(logits, label)))
    }

    /// Straight-through junction: forwards the hard `mask`, and on the way back
    /// hands `∂L/∂z` to `rule` to produce `∂L/∂θ`.
    pub fn subset_sample(&mut self, theta: Var, mask: Vec<f64>, rule: SampleBackward) -> Result<Var> {
        let x = self.value(theta);
        if x.is_matrix() || x.len() != mask.len() {
            return invalid("subset_sample expects a score vector matching the mask");
        }
        let t = Tensor::vector(mask)?;
        Ok(self.push(t, Op::SubsetSample(theta, rule)))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params = Vec::new();
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if let (Op::Param(id), Some(g)) = (&node.op, g.as_ref()) {
                params.push((*id, g.clone()));
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, p, q) = (x.rows(), x.cols(), y.cols());
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let mut da = vec![0.0; m * p];
                for i in 0..m {
                    for k in 0..p {
                        let yk = &y.data()[k * q..(k + 1) * q];
                        let gi = &g[i * q..(i + 1) * q];
                        da[i * p + k] = gi.iter().zip(yk).map(|(a, b)| a * b).sum();
                    }
                }
                let mut db = vec![0.0; p * q];
                for i in 0..m {
                    let gi = &g[i * q..(i + 1) * q];
                    for k in 0..p {
                        let xik = x.data()[i * p + k];
                        if xik == 0.0 {
                            continue;
                        }
                        for (d, gv) in db[k * q..(k + 1) * q].iter_mut().zip(gi) {
                            *d += xik * gv;
                        }
                    }
                }
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let da: Vec<f64> = g.iter().zip(y.data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(x.data()).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, *a, &da);
            }
            Op::AddRowBroadcast(a, b) => {
                accumulate(grads, *a, g);
                let c = val(*b).len();
                accumulate(grads, *b, &column_sums(g, c));
            }
            Op::BroadcastRows(v) => {
                let c = val(*v).len();
                accumulate(grads, *v, &column_sums(g, c));
            }
            Op::OuterSum(s, t) => {
                let (n, m) = (val(*s).len(), val(*t).len());
                let ds: Vec<f64> = (0..n).map(|i| g[i * m..(i + 1) * m].iter().sum()).collect();
                accumulate(grads, *s, &ds);
                accumulate(grads, *t, &column_sums(g, m));
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                let da: Vec<f64> = g
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::Elu(a) => {
                let x = val(*a);
                let da: Vec<f64> = g
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { g * x.exp() })
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, &da);
            }
            Op::MaskedSoftmaxRows(a, mask) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yi = y.row(i);
                    let gi = &g[i * c..(i + 1) * c];
                    let dot: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        if mask[i * c + j] {
                            da[i * c + j] = yi[j] * (gi[j] - dot);
                        }
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::Concat(parts) => {
                let out = &node.value;
                if out.is_matrix() {
                    let total = out.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pc = val(*p).cols();
                        let mut dp = Vec::with_capacity(out.rows() * pc);
                        for i in 0..out.rows() {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + pc]);
                        }
                        accumulate(grads, *p, &dp);
                        offset += pc;
                    }
                } else {
                    let mut offset = 0;
                    for p in parts {
                        let len = val(*p).len();
                        accumulate(grads, *p, &g[offset..offset + len]);
                        offset += len;
                    }
                }
            }
            Op::RowScale(h, z) => {
                let (x, w) = (val(*h), val(*z));
                let c = x.cols();
                let dh: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * w.data()[i / c])
                    .collect();
                let dz: Vec<f64> = (0..w.len())
                    .map(|i| {
                        x.row(i)
                            .iter()
                            .zip(&g[i * c..(i + 1) * c])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                accumulate(grads, *h, &dh);
                accumulate(grads, *z, &dz);
            }
            Op::GatherMean(table, groups) => {
                let t = val(*table);
                let c = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (r, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as f64;
                    let gr = &g[r * c..(r + 1) * c];
                    for &i in grp {
                        for (d, gv) in dt[i * c..(i + 1) * c].iter_mut().zip(gr) {
                            *d += gv * inv;
                        }
                    }
                }
                accumulate(grads, *table, &dt);
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Sum(a) => {
                let da = vec![g[0]; val(*a).len()];
                accumulate(grads, *a, &da);
            }
            Op::Dot(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let da: Vec<f64> = y.data().iter().map(|v| v * g[0]).collect();
                let db: Vec<f64> = x.data().iter().map(|v| v * g[0]).collect();
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::SoftmaxCrossEntropy(logits, label) => {
                let x = val(*logits).data();
                let lse = log_sum_exp(x);
                let da: Vec<f64> = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| g[0] * ((v - lse).exp() - if i == *label { 1.0 } else { 0.0 }))
                    .collect();
                accumulate(grads, *logits, &da);
            }
            Op::SubsetSample(theta, rule) => {
                let dt = rule.apply(g)?;
                accumulate(grads, *theta, &dt);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn column_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, v) in g.iter().enumerate() {
        out[i % cols] += v;
    }
    out
}

pub(crate) fn matmul_raw(x: &[f64], y: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * q];
    for i in 0..m {
        let oi = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let xik = x[i * p + k];
            if xik == 0.0 {
                continue;
            }
            for (o, yv) in oi.iter_mut().zip(&y[k * q..(k + 1) * q]) {
                *o += xik * yv;
            }
        }
    }
    out
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients; a parameter used twice appears twice.
    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }

    /// Adds every parameter gradient into `acc`, indexed by parameter.
    pub fn accumulate_into(&self, acc: &mut [Vec<f64>]) {
        for (id, g) in &self.params {
            let slot = &mut acc[id.index()];
            if slot.is_empty() {
                *slot = g.clone();
            } else {
                for (a, b) in slot.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}
