//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The computation graph is a flat tape rebuilt on every forward pass
//! (define-by-run). Each recorded op stores its parents by index, so the tape
//! is topologically ordered by construction and a single reverse sweep
//! populates every reachable gradient. Everything is `f64`; gradient checks
//! need the headroom.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Probability floor applied before `log` inside the cross-entropy op.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Shape {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }

    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Contract {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Plain dense storage: a shape and a row-major value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::contract(
                "tensor",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Xavier-uniform initialization for a 2-D weight of shape `[out, in]`.
    pub fn xavier(rows: usize, cols: usize, rng: &mut Rng) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::contract(
                "xavier_init",
                format!("zero dimension in [{rows}, {cols}]"),
            ));
        }
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }
}

/// Deterministic, platform-independent random stream (ChaCha8 core).
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from this seed and a tag (splitmix mixing).
    pub fn substream(seed: u64, tag: u64) -> Self {
        let mut z = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        Rng::new(z ^ (z >> 31))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn gen_index(&mut self, bound: usize) -> usize {
        self.inner.gen_range(0..bound)
    }

    pub fn gen_f64(&mut self) -> f64 {
        self.inner.gen_range(0.0..1.0)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Neg,
}

#[derive(Debug, Clone, Copy)]
enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Unary { x: Var, kind: UnaryKind },
    Affine { x: Var, scale: f64 },
    Reduce { x: Var, kind: ReduceKind, axis: Option<usize> },
    Softmax { x: Var },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Reshape { x: Var },
    CrossEntropy { probs: Var, targets: Vec<usize>, mask: Vec<f64> },
    Cosine { u: Var, v: Var },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Tape of recorded primitive applications. One `Graph` per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            shape,
            value,
            grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input: its gradient is populated by `backward`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    /// Non-trainable input: gradient is tracked as zero and never flows out.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Constant)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(&Tensor::scalar(v))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].value.clone(),
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            other => Err(TensorError::contract(op, format!("expected matrix, got shape {other:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let row = &bv[p * n..(p + 1) * n];
                for j in 0..n {
                    out[i * n + j] += x * row[j];
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Mul { a, b }))
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let out: Vec<f64> = match kind {
            UnaryKind::Tanh => self.value(x).iter().map(|v| v.tanh()).collect(),
            UnaryKind::Sigmoid => self
                .value(x)
                .iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect(),
            UnaryKind::Exp => self.value(x).iter().map(|v| v.exp()).collect(),
            UnaryKind::Log => {
                if let Some(bad) = self.value(x).iter().find(|v| **v <= 0.0) {
                    return Err(TensorError::Domain {
                        op: "log",
                        msg: format!("log of non-positive value {bad}"),
                    });
                }
                self.value(x).iter().map(|v| v.ln()).collect()
            }
            UnaryKind::Neg => self.value(x).iter().map(|v| -v).collect(),
        };
        Ok(self.push(self.nodes[x.0].shape.clone(), out, Op::Unary { x, kind }))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Log)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Neg).expect("neg is total")
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| scale * v + shift).collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::Affine { x, scale })
    }

    fn reduce(&mut self, x: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        if self.value(x).is_empty() {
            return Err(TensorError::contract("reduce", "empty reduction"));
        }
        let (shape, out) = match axis {
            None => {
                let s: f64 = self.value(x).iter().sum();
                let v = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / self.value(x).len() as f64,
                };
                (vec![], vec![v])
            }
            Some(ax) => {
                let (m, n) = self.dims2(x, "reduce")?;
                if ax > 1 {
                    return Err(TensorError::contract("reduce", format!("axis {ax} out of range")));
                }
                let xv = self.value(x);
                if ax == 0 {
                    let mut out = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            out[j] += xv[i * n + j];
                        }
                    }
                    if let ReduceKind::Mean = kind {
                        out.iter_mut().for_each(|v| *v /= m as f64);
                    }
                    (vec![n], out)
                } else {
                    let mut out = vec![0.0; m];
                    for i in 0..m {
                        out[i] = xv[i * n..(i + 1) * n].iter().sum();
                    }
                    if let ReduceKind::Mean = kind {
                        out.iter_mut().for_each(|v| *v /= n as f64);
                    }
                    (vec![m], out)
                }
            }
        };
        Ok(self.push(shape, out, Op::Reduce { x, kind, axis }))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, axis)
    }

    /// Softmax over the last axis, with max-subtraction for stability.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let cols = *shape.last().unwrap_or(&1).max(&1);
        let cols = if shape.is_empty() { 1 } else { cols };
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for row in 0..xv.len() / cols {
            let s = &xv[row * cols..(row + 1) * cols];
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, v) in s.iter().enumerate() {
                let e = (v - mx).exp();
                out[row * cols + j] = e;
                z += e;
            }
            for j in 0..cols {
                out[row * cols + j] /= z;
            }
        }
        self.push(shape, out, Op::Softmax { x })
    }

    /// Flatten-concatenate inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::contract("concat", "no inputs"));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        let len = out.len();
        Ok(self.push(vec![len], out, Op::Concat { parts: parts.to_vec() }))
    }

    /// Stack equal-length vectors as rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let cols = self.value(rows[0]).len();
        for r in rows {
            if self.value(*r).len() != cols {
                return Err(TensorError::shape("stack_rows", self.shape(rows[0]), self.shape(*r)));
            }
        }
        let flat = self.concat(rows)?;
        self.reshape(flat, vec![rows.len(), cols])
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.value(x).len() {
            return Err(TensorError::contract(
                "slice",
                format!("range {start}..{} out of {} elements", start + len, self.value(x).len()),
            ));
        }
        let out = self.value(x)[start..start + len].to_vec();
        Ok(self.push(vec![len], out, Op::Slice { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(TensorError::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape { x }))
    }

    /// Row of a matrix as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (_, n) = self.dims2(x, "row")?;
        self.slice(x, i * n, n)
    }

    /// Masked mean negative log-likelihood of `targets` under probability
    /// rows `probs` (`[T, V]`). Positions with mask 0 are ignored.
    ///
    /// Returns the loss and an empty-sequence flag: an all-zero mask yields
    /// loss 0 with zero gradient and the flag set.
    pub fn cross_entropy_masked(
        &mut self,
        probs: Var,
        targets: &[usize],
        mask: &[f64],
    ) -> Result<(Var, bool)> {
        let (t, v) = self.dims2(probs, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::contract(
                "cross_entropy",
                format!("{t} probability rows vs {} targets / {} mask entries", targets.len(), mask.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|id| **id >= v) {
            return Err(TensorError::contract(
                "cross_entropy",
                format!("target id {bad} outside vocabulary of size {v}"),
            ));
        }
        let active: f64 = mask.iter().sum();
        let empty = active == 0.0;
        let pv = self.value(probs);
        let mut loss = 0.0;
        if !empty {
            for (i, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
                if m != 0.0 {
                    loss -= m * pv[i * v + tgt].max(PROB_FLOOR).ln();
                }
            }
            loss /= active;
        }
        let var = self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        );
        Ok((var, empty))
    }

    /// Cosine similarity of two equal-length vectors. Near-zero norm on
    /// either side is defined as similarity 0 with zero gradient.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        self.binary(u, v, "cosine_similarity")?;
        let uv = self.value(u);
        let vv = self.value(v);
        let dot: f64 = uv.iter().zip(vv).map(|(a, b)| a * b).sum();
        let nu = uv.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = vv.iter().map(|a| a * a).sum::<f64>().sqrt();
        let c = if nu <= 1e-12 || nv <= 1e-12 {
            0.0
        } else {
            dot / (nu * nv)
        };
        Ok(self.push(vec![], vec![c], Op::Cosine { u, v }))
    }

    /// Reverse sweep from a scalar loss; accumulates grads additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.iter().all(|g| *g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (before[a.0].shape[0], before[a.0].shape[1]);
                    let n = before[b.0].shape[1];
                    let g = &node.grad;
                    // dA = G * B^T ; dB = A^T * G
                    for i2 in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i2 * n + j] * before[b.0].value[p * n + j];
                            }
                            before[a.0].grad[i2 * k + p] += acc;
                        }
                    }
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i2 in 0..m {
                                acc += before[a.0].value[i2 * k + p] * g[i2 * n + j];
                            }
                            before[b.0].grad[p * n + j] += acc;
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (j, g) in node.grad.iter().enumerate() {
                        before[a.0].grad[j] += g;
                        before[b.0].grad[j] += g;
                    }
                }
                Op::Sub { a, b } => {
                    for (j, g) in node.grad.iter().enumerate() {
                        before[a.0].grad[j] += g;
                        before[b.0].grad[j] -= g;
                    }
                }
                Op::Mul { a, b } => {
                    for (j, g) in node.grad.iter().enumerate() {
                        before[a.0].grad[j] += g * before[b.0].value[j];
                        before[b.0].grad[j] += g * before[a.0].value[j];
                    }
                }
                Op::Unary { x, kind } => {
                    for (j, g) in node.grad.iter().enumerate() {
                        let d = match kind {
                            UnaryKind::Tanh => {
                                let y = node.value[j];
                                1.0 - y * y
                            }
                            UnaryKind::Sigmoid => {
                                let y = node.value[j];
                                y * (1.0 - y)
                            }
                            UnaryKind::Exp => node.value[j],
                            UnaryKind::Log => 1.0 / before[x.0].value[j],
                            UnaryKind::Neg => -1.0,
                        };
                        before[x.0].grad[j] += g * d;
                    }
                }
                Op::Affine { x, scale } => {
                    for (j, g) in node.grad.iter().enumerate() {
                        before[x.0].grad[j] += g * scale;
                    }
                }
                Op::Reduce { x, kind, axis } => {
                    let xlen = before[x.0].value.len();
                    match axis {
                        None => {
                            let scale = match kind {
                                ReduceKind::Sum => 1.0,
                                ReduceKind::Mean => 1.0 / xlen as f64,
                            };
                            let g = node.grad[0] * scale;
                            before[x.0].grad.iter_mut().for_each(|d| *d += g);
                        }
                        Some(ax) => {
                            let (m, n) = (before[x.0].shape[0], before[x.0].shape[1]);
                            if *ax == 0 {
                                let scale = match kind {
                                    ReduceKind::Sum => 1.0,
                                    ReduceKind::Mean => 1.0 / m as f64,
                                };
                                for i2 in 0..m {
                                    for j in 0..n {
                                        before[x.0].grad[i2 * n + j] += node.grad[j] * scale;
                                    }
                                }
                            } else {
                                let scale = match kind {
                                    ReduceKind::Sum => 1.0,
                                    ReduceKind::Mean => 1.0 / n as f64,
                                };
                                for i2 in 0..m {
                                    for j in 0..n {
                                        before[x.0].grad[i2 * n + j] += node.grad[i2] * scale;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Softmax { x } => {
                    let cols = if node.shape.is_empty() {
                        1
                    } else {
                        *node.shape.last().unwrap()
                    };
                    for row in 0..node.value.len() / cols {
                        let y = &node.value[row * cols..(row + 1) * cols];
                        let g = &node.grad[row * cols..(row + 1) * cols];
                        let s: f64 = y.iter().zip(g).map(|(yj, gj)| yj * gj).sum();
                        for j in 0..cols {
                            before[x.0].grad[row * cols + j] += y[j] * (g[j] - s);
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let len = before[p.0].value.len();
                        for j in 0..len {
                            before[p.0].grad[j] += node.grad[off + j];
                        }
                        off += len;
                    }
                }
                Op::Slice { x, start } => {
                    for (j, g) in node.grad.iter().enumerate() {
                        before[x.0].grad[start + j] += g;
                    }
                }
                Op::Reshape { x } => {
                    for (j, g) in node.grad.iter().enumerate() {
                        before[x.0].grad[j] += g;
                    }
                }
                Op::CrossEntropy { probs, targets, mask } => {
                    let active: f64 = mask.iter().sum();
                    if active > 0.0 {
                        let v = before[probs.0].shape[1];
                        let g = node.grad[0];
                        for (i2, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
                            if m != 0.0 {
                                let p = before[probs.0].value[i2 * v + tgt];
                                if p > PROB_FLOOR {
                                    before[probs.0].grad[i2 * v + tgt] -= g * m / (active * p);
                                }
                            }
                        }
                    }
                }
                Op::Cosine { u, v } => {
                    let uv = &before[u.0].value;
                    let vv = &before[v.0].value;
                    let nu = uv.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nv = vv.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if nu > 1e-12 && nv > 1e-12 {
                        let dot: f64 = uv.iter().zip(vv.iter()).map(|(a, b)| a * b).sum();
                        let c = dot / (nu * nv);
                        let g = node.grad[0];
                        for j in 0..uv.len() {
                            before[u.0].grad[j] += g * (vv[j] / (nu * nv) - c * uv[j] / (nu * nu));
                            before[v.0].grad[j] += g * (uv[j] / (nu * nv) - c * vv[j] / (nv * nv));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Index of the maximum entry (first on ties).
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Central-difference check of `backward` against the function `f` built on a
/// fresh graph per evaluation. Returns the max relative gradient error.
pub fn finite_diff_check<F>(f: &F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let vx = g.leaf(x);
    let loss = f(&mut g, vx)?;
    g.backward(loss)?;
    let analytic = g.grad(vx).to_vec();

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let vx = g.leaf(t);
        let loss = f(&mut g, vx)?;
        let v = g.scalar_value(loss);
        if !v.is_finite() {
            return Err(TensorError::Domain {
                op: "finite_diff_check",
                msg: format!("non-finite function value {v}"),
            });
        }
        Ok(v)
    };

    let mut numeric = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + epsilon;
        let fp = eval(&probe)?;
        probe.data[i] = orig - epsilon;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * epsilon);
    }
    Ok(max_rel_error(&analytic, &numeric))
}
