//! Define-by-run tape. Every operation appends a node holding its value and
//! the recipe for its local gradient; `backward` sweeps the nodes in reverse
//! creation order, which is a valid reverse topological order because a node
//! can only reference nodes created before it.

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op maps onto the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is `1 × n`, repeated down the rows.
    Row,
    /// rhs is `m × 1`, repeated across the columns.
    Col,
    /// rhs holds a single value.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Gather(Var, Vec<(usize, usize)>),
    Transpose(Var),
    Reshape(Var),
    NormalizeRows(Var),
    CosineRows(Var, Var),
    StraightThrough(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn broadcast_of(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Broadcast> {
    let (m, n) = (lhs.rows(), lhs.cols());
    let (p, q) = (rhs.rows(), rhs.cols());
    let kind = if (p, q) == (m, n) {
        Broadcast::Same
    } else if rhs.len() == 1 {
        Broadcast::Scalar
    } else if p == 1 && q == n {
        Broadcast::Row
    } else if p == m && q == 1 {
        Broadcast::Col
    } else {
        return Err(AutodiffError::Dimension {
            op,
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        });
    };
    Ok(kind)
}

#[inline]
fn rhs_index(kind: Broadcast, i: usize, j: usize, n: usize) -> usize {
    match kind {
        Broadcast::Same => i * n + j,
        Broadcast::Row => j,
        Broadcast::Col => i,
        Broadcast::Scalar => 0,
    }
}

fn binary(lhs: &Tensor, rhs: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (m, n) = (lhs.rows(), lhs.cols());
    let a = lhs.data();
    let b = rhs.data();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(f(a[i * n + j], b[rhs_index(kind, i, j, n)]));
        }
    }
    Tensor::new(lhs.shape().to_vec(), out).expect("shape preserved")
}

/// Sum a full-size gradient down to the broadcast operand's shape.
fn reduce_to(g: &Tensor, kind: Broadcast, target: &Tensor) -> Tensor {
    if kind == Broadcast::Same {
        return g.reshaped(target.shape()).expect("same element count");
    }
    let (m, n) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(target.shape());
    let o = out.data_mut();
    let gd = g.data();
    for i in 0..m {
        for j in 0..n {
            o[rhs_index(kind, i, j, n)] += gd[i * n + j];
        }
    }
    out
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    debug_assert_eq!(out.len(), x.rows() * n);
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
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

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push("param", value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// Same value as `v`, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last `backward`, if the node took part.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient, or zeros when the node was not reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_of("add", self.value(a), self.value(b))?;
        let value = binary(self.value(a), self.value(b), kind, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push("add", value, Op::Add(a, b, kind), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_of("sub", self.value(a), self.value(b))?;
        let value = binary(self.value(a), self.value(b), kind, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", value, Op::Sub(a, b, kind), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = broadcast_of("mul", self.value(a), self.value(b))?;
        let value = binary(self.value(a), self.value(b), kind, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", value, Op::Mul(a, b, kind), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push("scale", value, Op::Scale(a, c), rg)
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push("offset", value, Op::Offset(a), rg)
    }

    /// `1 - a`, common enough in gated cells to get a name.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.offset(neg, 1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push("tanh", value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let rg = self.rg(a);
        self.push("sigmoid", value, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push("exp", value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("non-positive operand {bad}"),
            });
        }
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push("log", value, Op::Log(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push("relu", value, Op::Relu(a), rg)
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push("softmax", value, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let value = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push("log_softmax", value, Op::LogSoftmax(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push("sum", value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push("mean", value, Op::Mean(a), rg)
    }

    /// Sum across columns: `m × n -> m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let sums: Vec<f64> = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let value = Tensor::new(vec![t.rows(), 1], sums)?;
        let rg = self.rg(a);
        self.push("sum_cols", value, Op::SumCols(a), rg)
    }

    /// Picks `a[r, c]` for each pair, giving a `k × 1` column.
    pub fn gather(&mut self, a: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if let Some(&(r, c)) = pairs.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(AutodiffError::Dimension {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![r, c],
            });
        }
        if pairs.is_empty() {
            return Err(AutodiffError::Contract("gather with no indices".into()));
        }
        let picked: Vec<f64> = pairs.iter().map(|&(r, c)| t.at(r, c)).collect();
        let value = Tensor::new(vec![pairs.len(), 1], picked)?;
        let rg = self.rg(a);
        self.push("gather", value, Op::Gather(a, pairs.to_vec()), rg)
    }

    /// Row-wise gather: one column index per row.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let pairs: Vec<(usize, usize)> = indices.iter().cloned().enumerate().collect();
        self.gather(a, &pairs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push("transpose", value, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let norms = row_norms(t);
        if let Some(r) = norms.iter().position(|&n| n == 0.0) {
            return Err(AutodiffError::Degenerate {
                op: "normalize_rows",
                detail: format!("row {r} has zero norm"),
            });
        }
        let n = t.cols();
        let mut out = t.clone();
        for (r, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            for x in chunk {
                *x /= norms[r];
            }
        }
        let rg = self.rg(a);
        self.push("normalize_rows", out, Op::NormalizeRows(a), rg)
    }

    /// Cosine similarity of matching rows: `m × d, m × d -> m × 1`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(AutodiffError::Dimension {
                op: "cosine",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (na, nb) = (row_norms(ta), row_norms(tb));
        if let Some(r) = (0..ta.rows()).find(|&r| na[r] == 0.0 || nb[r] == 0.0) {
            return Err(AutodiffError::Degenerate {
                op: "cosine",
                detail: format!("zero vector in row {r}"),
            });
        }
        let sims: Vec<f64> = (0..ta.rows())
            .map(|r| {
                let dot: f64 = ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum();
                (dot / (na[r] * nb[r])).clamp(-1.0, 1.0)
            })
            .collect();
        let value = Tensor::new(vec![ta.rows(), 1], sims)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("cosine", value, Op::CosineRows(a, b), rg)
    }

    /// Forward value is `hard`; the backward pass hands the incoming gradient
    /// to `soft` unchanged. Equivalent to `hard + (soft - detach(soft))`
    /// without the rounding that expression introduces.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        let s = self.value(soft);
        if hard.rows() != s.rows() || hard.cols() != s.cols() {
            return Err(AutodiffError::Dimension {
                op: "straight_through",
                lhs: hard.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let hard = hard.reshaped(s.shape())?;
        let rg = self.rg(soft);
        self.push("straight_through", hard, Op::StraightThrough(soft), rg)
    }

    /// Reverse sweep from a scalar root. All gradients from any previous sweep
    /// are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(a) {
                    let bt = self.value(b).transpose();
                    let ga = Tensor::matmul_raw(g, &bt)
                        .reshaped(self.value(a).shape())
                        .unwrap();
                    self.accumulate(a, ga);
                }
                if self.rg(b) {
                    let at = self.value(a).transpose();
                    let gb = Tensor::matmul_raw(&at, g);
                    self.accumulate(b, gb);
                }
            }
            Op::Add(a, b, kind) => {
                if self.rg(a) {
                    self.accumulate(a, g.clone());
                }
                if self.rg(b) {
                    let gb = reduce_to(g, kind, self.value(b));
                    self.accumulate(b, gb);
                }
            }
            Op::Sub(a, b, kind) => {
                if self.rg(a) {
                    self.accumulate(a, g.clone());
                }
                if self.rg(b) {
                    let gb = reduce_to(&g.map(|x| -x), kind, self.value(b));
                    self.accumulate(b, gb);
                }
            }
            Op::Mul(a, b, kind) => {
                if self.rg(a) {
                    let ga = binary(g, self.value(b), kind, |x, y| x * y);
                    self.accumulate(a, ga);
                }
                if self.rg(b) {
                    let full = g.zip_map(self.value(a), |x, y| x * y);
                    let gb = reduce_to(&full, kind, self.value(b));
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(a, g.map(|x| x * c)),
            Op::Offset(a) => self.accumulate(a, g.clone()),
            Op::Tanh(a) => {
                let ga = g.zip_map(&self.nodes[i].value, |gi, y| gi * (1.0 - y * y));
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&self.nodes[i].value, |gi, y| gi * y * (1.0 - y));
                self.accumulate(a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(&self.nodes[i].value, |gi, y| gi * y);
                self.accumulate(a, ga);
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(a), |gi, x| gi / x);
                self.accumulate(a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(a, ga);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let n = y.cols();
                let mut out = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                debug_assert_eq!(out.len(), y.rows() * n);
                let ga = Tensor::new(y.shape().to_vec(), out).unwrap();
                self.accumulate(a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[i].value;
                let mut out = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    out.extend(yr.iter().zip(gr).map(|(yi, gi)| gi - yi.exp() * total));
                }
                let ga = Tensor::new(y.shape().to_vec(), out).unwrap();
                self.accumulate(a, ga);
            }
            Op::Sum(a) => {
                let ga = Tensor::full(self.value(a).shape(), g.item());
                self.accumulate(a, ga);
            }
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                let ga = Tensor::full(self.value(a).shape(), g.item() / n);
                self.accumulate(a, ga);
            }
            Op::SumCols(a) => {
                let t = self.value(a);
                let n = t.cols();
                let data: Vec<f64> = (0..t.rows())
                    .flat_map(|r| std::iter::repeat(g.data()[r]).take(n))
                    .collect();
                let ga = Tensor::new(t.shape().to_vec(), data).unwrap();
                self.accumulate(a, ga);
            }
            Op::Gather(a, pairs) => {
                let t = self.value(a);
                let n = t.cols();
                let mut ga = Tensor::zeros(t.shape());
                for (k, &(r, c)) in pairs.iter().enumerate() {
                    ga.data_mut()[r * n + c] += g.data()[k];
                }
                self.accumulate(a, ga);
            }
            Op::Transpose(a) => {
                let ga = g.transpose().reshaped(self.value(a).shape()).unwrap();
                self.accumulate(a, ga);
            }
            Op::Reshape(a) => {
                let ga = g.reshaped(self.value(a).shape()).unwrap();
                self.accumulate(a, ga);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(a);
                let y = &self.nodes[i].value;
                let norms = row_norms(x);
                let mut out = Vec::with_capacity(x.len());
                for (r, norm) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(yi, gi)| (gi - yi * dot) / norm));
                }
                let ga = Tensor::new(x.shape().to_vec(), out).unwrap();
                self.accumulate(a, ga);
            }
            Op::CosineRows(a, b) => {
                let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                let c = self.nodes[i].value.clone();
                let (na, nb) = (row_norms(&ta), row_norms(&tb));
                let mut ga = Vec::with_capacity(ta.len());
                let mut gb = Vec::with_capacity(tb.len());
                for r in 0..ta.rows() {
                    let (ar, br) = (ta.row(r), tb.row(r));
                    let (cr, gr) = (c.data()[r], g.data()[r]);
                    let inv = 1.0 / (na[r] * nb[r]);
                    for (x, y) in ar.iter().zip(br) {
                        ga.push(gr * (y * inv - cr * x / (na[r] * na[r])));
                        gb.push(gr * (x * inv - cr * y / (nb[r] * nb[r])));
                    }
                }
                if self.rg(a) {
                    self.accumulate(a, Tensor::new(ta.shape().to_vec(), ga).unwrap());
                }
                if self.rg(b) {
                    self.accumulate(b, Tensor::new(tb.shape().to_vec(), gb).unwrap());
                }
            }
            Op::StraightThrough(soft) => {
                let gs = g.reshaped(self.value(soft).shape()).unwrap();
                self.accumulate(soft, gs);
            }
        }
    }
}
