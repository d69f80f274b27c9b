//! Reverse-mode differentiation over rank-2 tensors.
//!
//! Every operation appends a node to the [`Tape`]; node indices are therefore
//! already a topological order and [`Tape::backward`] walks them in reverse,
//! visiting each node once. Gradients accumulate across repeated `backward`
//! calls until [`Tape::zero_grad`].

use super::tensor::{matmul_into, softmax_unchecked, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Primitive kinds reachable through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    Concat(Axis),
    Mean,
    L1,
    /// Row-wise L2 normalization.
    L2Norm,
    CrossEntropyWithSoftmax {
        target: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (the one used to normalize).
    pub var: Vec<f64>,
    /// Unbiased variance, for running estimates.
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
    L2NormalizeRows(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    RankingHinge {
        sim: Var,
        margin: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const NORM_FLOOR: f64 = 1e-12;

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if any has reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = &self.nodes[a.0].value;
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| f(*x)).collect(),
        )
        .expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `a [m×n] + b [1×n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (br, bc) = self.shape(b);
        if br != 1 || bc != n {
            return Err(Error::Shape(format!("add_row: [{m}x{n}] + [{br}x{bc}]")));
        }
        let ta = &self.nodes[a.0].value;
        let tb = self.nodes[b.0].value.data();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, y) in row.iter_mut().zip(tb) {
                *x += y;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.map(a, |x| x * k);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, k), rg)
    }

    /// Elementwise product with a constant mask.
    pub fn mul_const(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        if self.nodes[a.0].value.shape() != mask.shape() {
            return Err(Error::Shape(format!(
                "mul_const: {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                mask.shape()
            )));
        }
        let ta = &self.nodes[a.0].value;
        let data = ta
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, m)| x * m)
            .collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::MulConst(a, mask.data().to_vec()), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.nodes[a.0].value.assert_rank2("matmul lhs")?;
        let (k2, n) = self.nodes[b.0].value.assert_rank2("matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: [{m}x{k}] . [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.assert_rank2("transpose")?;
        let d = self.nodes[a.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg))
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Softmax of each row independently.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (m, n) = t.assert_rank2("softmax")?;
        if n == 0 {
            return Err(Error::Empty("softmax over zero columns".into()));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            out.extend(softmax_unchecked(t.row_slice(r)));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::SoftmaxRows(a), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat of nothing".into()));
        }
        let m = self.shape(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.nodes[p.0].value.assert_rank2("concat_cols")?;
            if r != m {
                return Err(Error::Shape(format!("concat_cols: row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row_slice(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat of nothing".into()));
        }
        let n = self.shape(parts[0]).1;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.nodes[p.0].value.assert_rank2("concat_rows")?;
            if c != n {
                return Err(Error::Shape(format!("concat_rows: col counts {n} vs {c}")));
            }
            m += r;
            out.extend_from_slice(self.nodes[p.0].value.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        match axis {
            Axis::Rows => self.concat_rows(parts),
            Axis::Cols => self.concat_cols(parts),
        }
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.assert_rank2("slice_cols")?;
        if start + len > n {
            return Err(Error::Shape(format!("slice_cols {start}+{len} > {n}")));
        }
        let t = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.assert_rank2("slice_rows")?;
        if start + len > m {
            return Err(Error::Shape(format!("slice_rows {start}+{len} > {m}")));
        }
        let out = self.nodes[a.0].value.data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(len, n, out)?, Op::SliceRows(a, start), rg))
    }

    /// Row lookup, e.g. an embedding table indexed by token ids.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.nodes[table.0].value.assert_rank2("gather_rows")?;
        let t = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::IndexOutOfRange { index: i, len: m });
            }
            out.extend_from_slice(t.row_slice(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(idx.len(), n, out)?,
            Op::GatherRows(table, idx.to_vec()),
            rg,
        ))
    }

    /// Stacks `m` copies of a `[1×n]` row.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let (r, n) = self.shape(a);
        if r != 1 {
            return Err(Error::Shape(format!("repeat_rows needs one row, got {r}")));
        }
        let row = self.nodes[a.0].value.data().to_vec();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::RepeatRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(Error::Empty("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// `sum |a - b|`
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1")?;
        let s = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::L1(a, b), rg))
    }

    /// Divides each row by its L2 norm (floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.nodes[a.0].value.assert_rank2("l2_normalize_rows")?;
        let t = &self.nodes[a.0].value;
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = t.row_slice(r);
            let norm = row
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR);
            norms.push(norm);
            out.extend(row.iter().map(|x| x / norm));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::L2NormalizeRows(a, norms),
            rg,
        ))
    }

    /// `-log softmax(logits)[target]` for a `[1×n]` row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.rows() != 1 {
            return Err(Error::Shape(format!(
                "cross_entropy needs one row, got {:?}",
                t.shape()
            )));
        }
        let n = t.cols();
        if target >= n {
            return Err(Error::IndexOutOfRange {
                index: target,
                len: n,
            });
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("cross_entropy logits".into()));
        }
        let d = t.data();
        let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + d.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - d[target];
        let probs = softmax_unchecked(d);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Batch normalization of `x [batch×d]` with affine `gamma`, `beta` (`[1×d]`).
    ///
    /// Train mode normalizes with the batch statistics (biased variance) and
    /// returns them; eval mode uses the supplied running mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running: (&[f64], &[f64]),
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (b, d) = self.nodes[x.0].value.assert_rank2("batch_norm")?;
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) {
            return Err(Error::Shape(format!(
                "batch_norm affine params must be [1x{d}]"
            )));
        }
        let xd = self.nodes[x.0].value.data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if b < 2 {
                    return Err(Error::InvalidArgument(
                        "train-mode batch norm needs a batch of at least 2".into(),
                    ));
                }
                let mut mean = vec![0.0; d];
                for r in 0..b {
                    for (m, v) in mean.iter_mut().zip(&xd[r * d..(r + 1) * d]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut ss = vec![0.0; d];
                for r in 0..b {
                    for j in 0..d {
                        let c = xd[r * d + j] - mean[j];
                        ss[j] += c * c;
                    }
                }
                let var: Vec<f64> = ss.iter().map(|s| s / b as f64).collect();
                let var_unbiased: Vec<f64> = ss.iter().map(|s| s / (b - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    var_unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval => {
                if running.0.len() != d || running.1.len() != d {
                    return Err(Error::Shape("batch_norm running stats".into()));
                }
                (running.0.to_vec(), running.1.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            for j in 0..d {
                let h = (xd[r * d + j] - mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::matrix(b, d, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == BatchNormMode::Train,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Bidirectional triplet hinge over a square similarity matrix whose
    /// diagonal holds the positive pairs; averaged over rows.
    pub fn ranking_hinge(&mut self, sim: Var, margin: f64) -> Result<Var> {
        let (m, n) = self.nodes[sim.0].value.assert_rank2("ranking_hinge")?;
        if m != n {
            return Err(Error::Shape(format!(
                "ranking_hinge needs a square matrix, got [{m}x{n}]"
            )));
        }
        if m < 2 {
            return Err(Error::InvalidArgument(
                "ranking loss needs at least 2 pairs".into(),
            ));
        }
        let s = self.nodes[sim.0].value.data();
        let mut loss = 0.0;
        for i in 0..m {
            let pos = s[i * m + i];
            for j in 0..m {
                if j == i {
                    continue;
                }
                loss += (margin - pos + s[i * m + j]).max(0.0);
                loss += (margin - pos + s[j * m + i]).max(0.0);
            }
        }
        let rg = self.rg(&[sim]);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::RankingHinge { sim, margin },
            rg,
        ))
    }

    /// Dispatches one of the listed primitive kinds.
    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[Var]) -> Result<Var> {
        let arity = |k: usize| -> Result<()> {
            if inputs.len() != k {
                return Err(Error::InvalidArgument(format!(
                    "{op:?} takes {k} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match op {
            ElementwiseOp::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            ElementwiseOp::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            ElementwiseOp::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            ElementwiseOp::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            ElementwiseOp::Tanh => {
                arity(1)?;
                Ok(self.tanh(inputs[0]))
            }
            ElementwiseOp::Concat(axis) => self.concat(inputs, axis),
            ElementwiseOp::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            ElementwiseOp::L1 => {
                arity(2)?;
                self.l1(inputs[0], inputs[1])
            }
            ElementwiseOp::L2Norm => {
                arity(1)?;
                self.l2_normalize_rows(inputs[0])
            }
            ElementwiseOp::CrossEntropyWithSoftmax { target } => {
                arity(1)?;
                self.cross_entropy(inputs[0], target)
            }
        }
    }

    /// Reverse-mode sweep from a scalar `loss`, adding into stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut local);
            add_into(&mut self.grads[i], &g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = &node.value;
        // Accumulate `contrib` into the gradient slot of `v` when it needs one.
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut local[v.0], &contrib);
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if rg(*a) {
                    acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if rg(*b) {
                    acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.to_vec());
                if rg(*b) {
                    let n = val.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n.max(1)) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Scale(a, k) => acc(*a, g.iter().map(|x| x * k).collect()),
            Op::MulConst(a, mask) => acc(*a, g.iter().zip(mask).map(|(x, m)| x * m).collect()),
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if rg(*a) {
                    // g [m×n] · bᵀ [n×k]
                    let bd = tb.data();
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, ga);
                }
                if rg(*b) {
                    // aᵀ [k×m] · g [m×n]
                    let ad = ta.data();
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * x;
                            }
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val.rows(), val.cols());
                // out is [m×n], input is [n×m]
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        ga[c * m + r] = g[r * n + c];
                    }
                }
                acc(*a, ga);
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.data();
                acc(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => acc(
                *a,
                g.iter()
                    .zip(val.data())
                    .map(|(x, y)| x * y * (1.0 - y))
                    .collect(),
            ),
            Op::Tanh(a) => acc(
                *a,
                g.iter()
                    .zip(val.data())
                    .map(|(x, y)| x * (1.0 - y * y))
                    .collect(),
            ),
            Op::SoftmaxRows(a) => {
                let n = val.cols();
                let mut ga = vec![0.0; g.len()];
                for r in 0..val.rows() {
                    let y = &val.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[r * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (val.rows(), val.cols());
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if rg(*p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * n + off..r * n + off + w]);
                        }
                        acc(*p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if rg(*p) {
                        acc(*p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, w) = (val.rows(), val.cols());
                let n = self.nodes[a.0].value.cols();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(*a, ga);
            }
            Op::SliceRows(a, start) => {
                let n = val.cols();
                let mut ga = vec![0.0; self.nodes[a.0].value.len()];
                ga[start * n..start * n + g.len()].copy_from_slice(g);
                acc(*a, ga);
            }
            Op::GatherRows(table, idx) => {
                let n = val.cols();
                let mut gt = vec![0.0; self.nodes[table.0].value.len()];
                for (k, &row) in idx.iter().enumerate() {
                    for j in 0..n {
                        gt[row * n + j] += g[k * n + j];
                    }
                }
                acc(*table, gt);
            }
            Op::RepeatRows(a) => {
                let n = val.cols();
                let mut ga = vec![0.0; n];
                for row in g.chunks(n.max(1)) {
                    for (s, x) in ga.iter_mut().zip(row) {
                        *s += x;
                    }
                }
                acc(*a, ga);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.nodes[a.0].value.len()]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::L1(a, b) => {
                let sgn: Vec<f64> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(x, y)| g[0] * sign(x - y))
                    .collect();
                if rg(*b) {
                    acc(*b, sgn.iter().map(|x| -x).collect());
                }
                acc(*a, sgn);
            }
            Op::L2NormalizeRows(a, norms) => {
                let n = val.cols();
                let mut ga = vec![0.0; g.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let y = &val.data()[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[r * n + j] = (gr[j] - y[j] * dot) / norm;
                    }
                }
                acc(*a, ga);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                gl[*target] -= g[0];
                acc(*logits, gl);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, d) = (val.rows(), val.cols());
                let gam = self.nodes[gamma.0].value.data();
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for r in 0..b {
                    for j in 0..d {
                        sum_g[j] += g[r * d + j];
                        sum_gx[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                if rg(*x) {
                    let mut gx = vec![0.0; b * d];
                    for r in 0..b {
                        for j in 0..d {
                            let dy = g[r * d + j];
                            gx[r * d + j] = if *batch_stats {
                                gam[j] * inv_std[j] / b as f64
                                    * (b as f64 * dy - sum_g[j] - xhat[r * d + j] * sum_gx[j])
                            } else {
                                gam[j] * inv_std[j] * dy
                            };
                        }
                    }
                    acc(*x, gx);
                }
                if rg(*gamma) {
                    acc(*gamma, sum_gx);
                }
                if rg(*beta) {
                    acc(*beta, sum_g);
                }
            }
            Op::RankingHinge { sim, margin } => {
                let s = self.nodes[sim.0].value.data();
                let m = self.nodes[sim.0].value.rows();
                let w = g[0] / m as f64;
                let mut gs = vec![0.0; m * m];
                for i in 0..m {
                    let pos = s[i * m + i];
                    for j in 0..m {
                        if j == i {
                            continue;
                        }
                        if margin - pos + s[i * m + j] > 0.0 {
                            gs[i * m + i] -= w;
                            gs[i * m + j] += w;
                        }
                        if margin - pos + s[j * m + i] > 0.0 {
                            gs[i * m + i] -= w;
                            gs[j * m + i] += w;
                        }
                    }
                }
                acc(*sim, gs);
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(s) => {
            for (a, b) in s.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}
