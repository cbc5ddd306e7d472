//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value and the recipe
//! for its vector-Jacobian product. Node indices are assigned in execution
//! order, so a single descending sweep is a reverse topological traversal.

use std::sync::Arc;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{CsrMatrix, DiffError, Tensor};

/// Rows whose norm falls below this are treated as zero by [`Tape::row_cosine`].
pub const COSINE_EPS: f64 = 1e-12;
/// Probability clamp used by [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    SpMm(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    RowCosine(Var, Var),
    Mean(Var),
    SumSquare(Var, f64),
    MseTarget(Var, Arc<Vec<f64>>),
    Bce(Var, Arc<Vec<f64>>),
    /// Caches the upper-triangle sigmoids, row-major.
    GramSigmoidMse(Var, Arc<CsrMatrix>, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single-threaded recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Records a leaf; whether it receives a gradient follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.requires_grad(*v));
        self.nodes.push(Node {
            value: value.with_requires_grad(rg),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.values(), tb.values(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(ta.values(), tb.values(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Constant sparse matrix times a dense node.
    pub fn spmm(&mut self, s: &Arc<CsrMatrix>, b: Var) -> Result<Var, DiffError> {
        let t = s.mul_dense(self.value(b))?;
        Ok(self.push(t, Op::SpMm(Arc::clone(s), b), &[b]))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let values = ta.values().iter().zip(tb.values()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), values)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Adds a bias row (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let cols = ta.cols();
        let bv = tb.values();
        let values = ta
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % cols])
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), values)?;
        Ok(self.push(t, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let values = ta.values().iter().map(|&x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), values).expect("shape preserved");
        self.push(t, Op::Scale(a, c), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.values().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid_scalar);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        self.push(t, Op::Abs(a), &[a])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if start > end || end > ta.cols() {
            return Err(DiffError::Slice {
                start,
                end,
                cols: ta.cols(),
            });
        }
        let (rows, cols, w) = (ta.rows(), ta.cols(), end - start);
        let mut values = Vec::with_capacity(rows * w);
        for r in 0..rows {
            values.extend_from_slice(&ta.values()[r * cols + start..r * cols + end]);
        }
        let t = Tensor::matrix(rows, w, values)?;
        Ok(self.push(t, Op::SliceCols(a, start, end), &[a]))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        for p in parts {
            let tp = self.value(*p);
            if tp.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), tp));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut values = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                values.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, values)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Per-row cosine similarity; rows with a near-zero norm yield 0.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(shape_err("row_cosine", ta, tb));
        }
        let values = (0..ta.rows())
            .map(|r| cosine(ta.row(r), tb.row(r)))
            .collect();
        let t = Tensor::vector(values);
        Ok(self.push(t, Op::RowCosine(a, b), &[a, b]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.values().iter().sum::<f64>() / ta.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// `Σ a² / divisor`.
    pub fn sum_square(&mut self, a: Var, divisor: f64) -> Var {
        let s = self.value(a).values().iter().map(|x| x * x).sum::<f64>() / divisor;
        self.push(Tensor::scalar(s), Op::SumSquare(a, divisor), &[a])
    }

    /// Mean squared difference between a node and a constant target.
    pub fn mse_target(&mut self, a: Var, target: &Arc<Vec<f64>>) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if ta.len() != target.len() {
            return Err(DiffError::Shape {
                op: "mse_target",
                left: ta.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let s = ta
            .values()
            .iter()
            .zip(target.iter())
            .map(|(x, t)| (x - t) * (x - t))
            .sum::<f64>()
            / ta.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::MseTarget(a, Arc::clone(target)), &[a]))
    }

    /// Mean binary cross-entropy of probabilities `p` against constant targets.
    pub fn bce(&mut self, p: Var, targets: &Arc<Vec<f64>>) -> Result<Var, DiffError> {
        let tp = self.value(p);
        if tp.len() != targets.len() {
            return Err(DiffError::Shape {
                op: "bce",
                left: tp.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let loss = bce_value(tp.values(), targets);
        Ok(self.push(Tensor::scalar(loss), Op::Bce(p, Arc::clone(targets)), &[p]))
    }

    /// `mean((sigmoid(Z Zᵀ) − T)²)` over all `n²` entries for a sparse
    /// `n×n` target `T`, without materializing the dense product.
    pub fn gram_sigmoid_mse(&mut self, z: Var, target: &Arc<CsrMatrix>) -> Result<Var, DiffError> {
        let tz = self.value(z);
        let n = tz.rows();
        if target.rows() != n || target.cols() != n {
            return Err(DiffError::Shape {
                op: "gram_sigmoid_mse",
                left: tz.shape().to_vec(),
                right: vec![target.rows(), target.cols()],
            });
        }
        let mut cache = Vec::with_capacity(n * (n + 1) / 2);
        let zv = tz.values();
        let k = tz.cols();
        for i in 0..n {
            let zi = &zv[i * k..(i + 1) * k];
            for j in i..n {
                let dot: f64 = zi.iter().zip(&zv[j * k..(j + 1) * k]).map(|(a, b)| a * b).sum();
                cache.push(sigmoid_scalar(dot));
            }
        }
        let loss = gram_pass(zv, n, k, target, &cache, None) / (n * n) as f64;
        Ok(self.push(Tensor::scalar(loss), Op::GramSigmoidMse(z, Arc::clone(target), cache), &[z]))
    }

    /// Clears every stored gradient.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
    }

    /// Propagates d(out)/d(node) to every node reachable backwards from the
    /// scalar `out`. Returns the number of nodes whose rule was applied.
    pub fn backward(&mut self, out: Var) -> Result<usize, DiffError> {
        if self.value(out).len() != 1 {
            return Err(DiffError::NonScalar(self.value(out).shape().to_vec()));
        }
        if !self.requires_grad(out) {
            return Ok(0);
        }
        self.nodes[out.0].value.set_grad(Some(vec![1.0]));
        let mut visited = 0;
        for i in (0..=out.0).rev() {
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            visited += 1;
            let contributions = self.vjp(i, &g);
            self.nodes[i].value.set_grad(Some(g));
            for (v, delta) in contributions {
                if !self.requires_grad(v) {
                    continue;
                }
                let acc = self.nodes[v.0].value.grad_mut_or_init();
                for (a, d) in acc.iter_mut().zip(&delta) {
                    *a += d;
                }
            }
        }
        Ok(visited)
    }

    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let needs = |v: &Var| self.requires_grad(*v);
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut res = Vec::new();
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(g, tb.values(), &mut da, m, n, k);
                    res.push((*a, da));
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(ta.values(), g, &mut db, m, k, n);
                    res.push((*b, db));
                }
                res
            }
            Op::MatMulNt(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let mut res = Vec::new();
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm_acc(g, tb.values(), &mut da, m, n, k);
                    res.push((*a, da));
                }
                if needs(b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn_acc(g, ta.values(), &mut db, m, n, k);
                    res.push((*b, db));
                }
                res
            }
            Op::SpMm(s, b) => {
                let width = out.cols();
                let mut db = vec![0.0; s.cols() * width];
                s.tmul_dense_acc(g, &mut db, width);
                vec![(*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::AddRow(a, bias) => {
                let cols = out.cols();
                let mut db = vec![0.0; cols];
                for (idx, gv) in g.iter().enumerate() {
                    db[idx % cols] += gv;
                }
                vec![(*a, g.to_vec()), (*bias, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Sigmoid(a) => {
                let d = out
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(s, gv)| gv * s * (1.0 - s))
                    .collect();
                vec![(*a, d)]
            }
            Op::Relu(a) => {
                let x = self.value(*a).values();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::Abs(a) => {
                let x = self.value(*a).values();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| {
                        if xv > 0.0 {
                            gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*a, d)]
            }
            Op::SliceCols(a, start, end) => {
                let ta = self.value(*a);
                let (cols, w) = (ta.cols(), end - start);
                let mut da = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    da[r * cols + start..r * cols + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                vec![(*a, da)]
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = self.value(*p).cols();
                    if needs(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        res.push((*p, dp));
                    }
                    offset += w;
                }
                res
            }
            Op::RowCosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = ta.cols();
                let mut da = vec![0.0; ta.len()];
                let mut db = vec![0.0; tb.len()];
                for r in 0..ta.rows() {
                    let (x, y) = (ta.row(r), tb.row(r));
                    let nx = norm(x);
                    let ny = norm(y);
                    if nx < COSINE_EPS || ny < COSINE_EPS {
                        continue;
                    }
                    let c = out.values()[r];
                    let gr = g[r];
                    for j in 0..cols {
                        da[r * cols + j] = gr * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                        db[r * cols + j] = gr * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::SumSquare(a, divisor) => {
                let x = self.value(*a).values();
                let scale = 2.0 * g[0] / divisor;
                vec![(*a, x.iter().map(|v| v * scale).collect())]
            }
            Op::MseTarget(a, target) => {
                let x = self.value(*a).values();
                let scale = 2.0 * g[0] / x.len() as f64;
                vec![(*a, x.iter().zip(target.iter()).map(|(v, t)| (v - t) * scale).collect())]
            }
            Op::Bce(p, targets) => {
                let x = self.value(*p).values();
                let n = x.len() as f64;
                let d = x
                    .iter()
                    .zip(targets.iter())
                    .map(|(&pv, &t)| {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&pv) {
                            0.0
                        } else {
                            g[0] * (-(t / pv) + (1.0 - t) / (1.0 - pv)) / n
                        }
                    })
                    .collect();
                vec![(*p, d)]
            }
            Op::GramSigmoidMse(z, target, cache) => {
                let tz = self.value(*z);
                let n = tz.rows();
                let mut d = vec![0.0; tz.len()];
                let coef = 2.0 * g[0] / (n * n) as f64;
                gram_pass(tz.values(), n, tz.cols(), target, cache, Some((&mut d, coef)));
                vec![(*z, d)]
            }
        }
    }
}

/// Sum of `(σ(zᵢ·zⱼ) − tᵢⱼ)²` over all ordered pairs, visiting each
/// unordered pair once, reading `σ` from `sig`. With `grad = (buf, c)` and `c = 2·upstream/n²`,
/// accumulates the gradient of the mean into `buf`.
fn gram_pass(
    z: &[f64],
    n: usize,
    k: usize,
    target: &CsrMatrix,
    sig: &[f64],
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let mut total = 0.0;
    let mut sig = sig.iter();
    for i in 0..n {
        let zi = &z[i * k..(i + 1) * k];
        let mut t_iter = target.row(i).skip_while(|&(c, _)| c < i).peekable();
        for j in i..n {
            let zj = &z[j * k..(j + 1) * k];
            let s = *sig.next().expect("cache covers the upper triangle");
            let t = match t_iter.peek() {
                Some(&(c, v)) if c == j => {
                    t_iter.next();
                    v
                }
                _ => 0.0,
            };
            let e = s - t;
            if let Some((buf, coef)) = grad.as_mut() {
                // ∂(σ(zᵢ·zⱼ))/∂zᵢ = σ(1−σ) zⱼ; each unordered pair appears twice in the sum
                let w = 2.0 * *coef * e * s * (1.0 - s);
                if j == i {
                    for (p, &a) in buf[i * k..(i + 1) * k].iter_mut().zip(zi) {
                        *p += w * a;
                    }
                } else {
                    for q in 0..k {
                        buf[i * k + q] += w * zj[q];
                        buf[j * k + q] += w * zi[q];
                    }
                }
            }
            total += if j == i { e * e } else { 2.0 * e * e };
        }
    }
    total
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity of two vectors, 0 when either norm is below [`COSINE_EPS`].
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let nx = norm(x);
    let ny = norm(y);
    if nx < COSINE_EPS || ny < COSINE_EPS {
        return 0.0;
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / (nx * ny)).clamp(-1.0, 1.0)
}

/// `−(1/n) Σ [t·ln p + (1−t)·ln(1−p)]` with `p` clamped to `[ε, 1−ε]`.
pub fn bce_value(p: &[f64], t: &[f64]) -> f64 {
    let n = p.len() as f64;
    -p.iter()
        .zip(t)
        .map(|(&pv, &tv)| {
            let q = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            tv * q.ln() + (1.0 - tv) * (1.0 - q).ln()
        })
        .sum::<f64>()
        / n
}

pub fn sigmoid(x: f64) -> f64 {
    sigmoid_scalar(x)
}
