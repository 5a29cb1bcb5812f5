//! Define-by-run gradient tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough context to run the adjoint; the
//! returned [`Var`] is a handle into the node list. [`Graph::backward`] walks
//! the list in reverse and deposits gradients on every tracked leaf.
//!
//! Ops view tensors as matrices (see [`Tensor::dims2`]). Every op output is
//! checked for NaN/Inf; a non-finite value is reported as an error instead of
//! silently propagating.

use std::collections::HashMap;

use super::params::ParameterStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    SoftmaxMasked(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        rows: Vec<usize>,
        probs: Vec<T>,
        scale: T,
    },
    Mse(Var, Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RepeatRows(Var, usize),
    Interleave(Vec<(Var, Vec<usize>)>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
    LogSigmoid(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    perturb: Option<(String, usize, f64)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// dense kernels

/// `out[m,n] += a[m,k] · b[k,n]`. Zero entries of `a` are skipped, so masked
/// attention weights contribute nothing (not even signed zeros).
pub(crate) fn mm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let zero = T::zero();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == zero {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `out[m,n] += aᵀ · b` for `a[k,m]`, `b[k,n]`.
fn mm_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    let zero = T::zero();
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == zero {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn fsq_round<T: Scalar>(x: T, half: T) -> T {
    (half * x.tanh()).round() / half
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            perturb: None,
        }
    }

    /// Shifts one element of one parameter by `delta` when it is loaded.
    /// Used by the finite-difference checker.
    pub(crate) fn with_perturbation(name: &str, index: usize, delta: f64) -> Self {
        let mut g = Self::new();
        g.perturb = Some((name.to_string(), index, delta));
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient deposited on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds a leaf. It participates in backward iff `t.requires_grad()`.
    /// Constants are not finiteness-checked so that additive masks may carry
    /// `-inf`.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter from `store`. Loading the same name twice returns the
    /// same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let src = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let mut value: Tensor<T> = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().map(|&x| T::from_f32(x)).collect(),
        )?;
        if let Some((pname, idx, delta)) = &self.perturb {
            if pname == name {
                let d = &mut value.data_mut()[*idx];
                *d = T::from_f64(d.to_f64() + delta);
            }
        }
        let tracked = src.requires_grad();
        value.set_requires_grad(tracked);
        self.nodes.push(Node {
            value,
            op: Op::Param(name.to_string()),
            tracked,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter leaves and their gradients (only those that received one).
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Param(name) => n.value.grad().map(|g| (name.as_str(), g)),
            _ => None,
        })
    }

    // -----------------------------------------------------------------------
    // forward ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), tracked, "matmul")
    }

    /// `a · bᵀ` for `a[m,k]`, `b[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let bt = transpose(self.value(b).data(), n, k);
        let mut out = vec![T::zero(); m * n];
        mm_acc(self.value(a).data(), &bt, &mut out, m, k, n);
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), tracked, "matmul_nt")
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape().to_vec();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), tracked, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let shape = self.value(a).shape().to_vec();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.push(Tensor::new(shape, out)?, Op::Sub(a, b), tracked, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape().to_vec();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), tracked, "mul")
    }

    /// Broadcast-adds a row vector `b` (`[n]` or `[1,n]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(b).numel() != n {
            return Err(Error::shape(
                "add_row",
                format!("[{m},{n}] + {:?}", self.value(b).shape()),
            ));
        }
        let bv = self.value(b).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.push(Tensor::matrix(m, n, out)?, Op::AddRow(a, b), tracked, "add_row")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| x * s).collect();
        let shape = self.value(a).shape().to_vec();
        let tracked = self.is_tracked(a);
        self.push(Tensor::new(shape, out)?, Op::Scale(a, s), tracked, "scale")
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", format!("width {n}")));
        }
        let eps = T::from_f64(LN_EPS);
        let inv_n = T::from_f64(1.0 / n as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        let tracked = self.is_tracked(x) || self.is_tracked(gamma) || self.is_tracked(beta);
        self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            tracked,
            "layer_norm",
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let tracked = self.is_tracked(x);
        self.push(Tensor::new(shape, out)?, Op::Gelu(x), tracked, "gelu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        let tracked = self.is_tracked(x);
        self.push(Tensor::new(shape, out)?, Op::Tanh(x), tracked, "tanh")
    }

    /// Row softmax of `x + mask`. `mask` is an additive constant of the same
    /// shape; disallowed positions hold `-inf`.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<Var>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(mk) = mask {
            if self.dims(mk) != (m, n) {
                return Err(Error::shape(
                    "softmax_masked",
                    format!("scores [{m},{n}] vs mask {:?}", self.value(mk).shape()),
                ));
            }
        }
        let xv = self.value(x).data();
        let mv = mask.map(|mk| self.value(mk).data());
        let mut out = vec![T::zero(); m * n];
        let mut row = vec![T::zero(); n];
        for r in 0..m {
            for c in 0..n {
                row[c] = match mv {
                    Some(mv) => xv[r * n + c] + mv[r * n + c],
                    None => xv[r * n + c],
                };
            }
            let mut max = T::neg_infinity();
            for &v in &row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for c in 0..n {
                let e = (row[c] - max).exp();
                out[r * n + c] = e;
                sum += e;
            }
            for c in 0..n {
                out[r * n + c] = out[r * n + c] / sum;
            }
        }
        let tracked = self.is_tracked(x);
        self.push(Tensor::matrix(m, n, out)?, Op::SoftmaxMasked(x), tracked, "softmax_masked")
    }

    /// Gathers rows of `table` by index.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding_lookup", format!("id {bad} >= vocab {v}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let tracked = self.is_tracked(table);
        self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            tracked,
            "embedding_lookup",
        )
    }

    /// Softmax cross-entropy of `logits[m,V]` against `targets`, over the rows
    /// where `mask` is true. Returns a scalar.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
        reduction: Reduction,
    ) -> Result<Var> {
        let (m, v) = self.dims(logits);
        if targets.len() != m || mask.is_some_and(|mk| mk.len() != m) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{m} rows, {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::shape("cross_entropy", format!("target {bad} >= vocab {v}")));
        }
        let rows: Vec<usize> = (0..m).filter(|&r| mask.is_none_or(|mk| mk[r])).collect();
        if rows.is_empty() {
            return Err(Error::Invalid("cross_entropy over an all-false mask".into()));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); rows.len() * v];
        let mut total = T::zero();
        for (k, &r) in rows.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let mut max = T::neg_infinity();
            for &x in row {
                if x > max {
                    max = x;
                }
            }
            let mut sum = T::zero();
            for (c, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[k * v + c] = e;
                sum += e;
            }
            for c in 0..v {
                probs[k * v + c] = probs[k * v + c] / sum;
            }
            let lse = max + sum.ln();
            total += lse - row[targets[r]];
        }
        let scale = match reduction {
            Reduction::Mean => T::from_f64(1.0 / rows.len() as f64),
            Reduction::Sum => T::one(),
        };
        let tracked = self.is_tracked(logits);
        self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                rows,
                probs,
                scale,
            },
            tracked,
            "cross_entropy",
        )
    }

    /// Mean squared error over all elements. Returns a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.zip_same(a, b, "mse", |x, y| x - y)?;
        let n = T::from_f64(diff.len() as f64);
        let total = diff.iter().map(|&d| d * d).sum::<T>() / n;
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        self.push(Tensor::scalar(total), Op::Mse(a, b), tracked, "mse")
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", format!("{} parts, axis {axis}", parts.len())));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims(p)).collect();
        let (m, n, data) = if axis == 0 {
            let n = dims[0].1;
            if dims.iter().any(|d| d.1 != n) {
                return Err(Error::shape("concat", format!("column mismatch {dims:?}")));
            }
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            (dims.iter().map(|d| d.0).sum(), n, data)
        } else {
            let m = dims[0].0;
            if dims.iter().any(|d| d.0 != m) {
                return Err(Error::shape("concat", format!("row mismatch {dims:?}")));
            }
            let n: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(m * n);
            for r in 0..m {
                for (&p, d) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(p).data()[r * d.1..(r + 1) * d.1]);
                }
            }
            (m, n, data)
        };
        let tracked = parts.iter().any(|&p| self.is_tracked(p));
        self.push(
            Tensor::matrix(m, n, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
            "concat",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, end)?;
        let tracked = self.is_tracked(x);
        self.push(t, Op::SliceRows(x, start), tracked, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start > end || end > n {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {n}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + end]);
        }
        let tracked = self.is_tracked(x);
        self.push(
            Tensor::matrix(m, end - start, out)?,
            Op::SliceCols(x, start),
            tracked,
            "slice_cols",
        )
    }

    /// Repeats every row `times` times consecutively: `[m,n] -> [m*times,n]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::shape("repeat_rows", "times must be >= 1"));
        }
        let (m, n) = self.dims(x);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * n * times);
        for r in 0..m {
            for _ in 0..times {
                out.extend_from_slice(&xv[r * n..(r + 1) * n]);
            }
        }
        let tracked = self.is_tracked(x);
        self.push(
            Tensor::matrix(m * times, n, out)?,
            Op::RepeatRows(x, times),
            tracked,
            "repeat_rows",
        )
    }

    /// Scatters the rows of each part to the listed output row positions.
    /// Positions across all parts must cover `0..total` exactly once.
    pub fn interleave_rows(&mut self, parts: &[(Var, Vec<usize>)], total: usize) -> Result<Var> {
        let n = parts.first().map(|(p, _)| self.dims(*p).1).unwrap_or(0);
        let mut seen = vec![false; total];
        let mut out = vec![T::zero(); total * n];
        for (p, pos) in parts {
            let (m, pn) = self.dims(*p);
            if pn != n || m != pos.len() {
                return Err(Error::shape(
                    "interleave_rows",
                    format!("part [{m},{pn}] with {} positions", pos.len()),
                ));
            }
            let pv = self.value(*p).data();
            for (r, &dst) in pos.iter().enumerate() {
                if dst >= total || seen[dst] {
                    return Err(Error::shape("interleave_rows", format!("bad position {dst}")));
                }
                seen[dst] = true;
                out[dst * n..(dst + 1) * n].copy_from_slice(&pv[r * n..(r + 1) * n]);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::shape("interleave_rows", "positions do not cover output"));
        }
        let tracked = parts.iter().any(|(p, _)| self.is_tracked(*p));
        self.push(
            Tensor::matrix(total, n, out)?,
            Op::Interleave(parts.to_vec()),
            tracked,
            "interleave_rows",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let tracked = self.is_tracked(x);
        self.push(t, Op::Reshape(x), tracked, "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let tracked = self.is_tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.value(x).data().iter().copied().sum::<T>() / T::from_f64(n as f64);
        let tracked = self.is_tracked(x);
        self.push(Tensor::scalar(s), Op::Mean(x), tracked, "mean")
    }

    /// Finite scalar quantisation with a straight-through gradient.
    ///
    /// Column `i` is bounded with `tanh`, scaled by `h_i = (levels[i]-1)/2`,
    /// rounded, and rescaled: `q = round(h·tanh z) / h`. The backward pass
    /// treats the op as `tanh`.
    pub fn fsq_quantize(&mut self, x: Var, levels: &[u32]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if levels.len() != n {
            return Err(Error::shape(
                "fsq_quantize",
                format!("{n} latent dims, {} levels", levels.len()),
            ));
        }
        let halves: Vec<T> = levels
            .iter()
            .map(|&l| T::from_f64((l as f64 - 1.0) / 2.0))
            .collect();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                out.push(fsq_round(xv[r * n + c], halves[c]));
            }
        }
        let shape = self.value(x).shape().to_vec();
        let tracked = self.is_tracked(x);
        self.push(Tensor::new(shape, out)?, Op::StraightThrough(x), tracked, "fsq_quantize")
    }

    /// Elementwise `log σ(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                let m = if v < T::zero() { v } else { T::zero() };
                m - (T::one() + (-v.abs()).exp()).ln()
            })
            .collect();
        let shape = self.value(x).shape().to_vec();
        let tracked = self.is_tracked(x);
        self.push(Tensor::new(shape, out)?, Op::LogSigmoid(x), tracked, "log_sigmoid")
    }

    /// Value-identical copy that is cut from the tape.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.set_requires_grad(false);
        t.zero_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    // -----------------------------------------------------------------------
    // backward

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate on the
    /// tracked leaves; calling twice doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, T::one())
    }

    /// Like [`Graph::backward`] with the seed gradient set to `seed`.
    pub fn backward_scaled(&mut self, loss: Var, seed: T) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.node(loss).tracked {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![seed]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param(_)) {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let tracked = |v: Var| self.nodes[v.0].tracked;
        macro_rules! acc {
            ($v:expr) => {{
                let len = self.nodes[$v.0].value.numel();
                grads[$v.0].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if tracked(*a) {
                    let bt = transpose(self.value(*b).data(), k, n);
                    mm_acc(g, &bt, acc!(*a), m, n, k);
                }
                if tracked(*b) {
                    mm_tn_acc(self.value(*a).data(), g, acc!(*b), m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if tracked(*a) {
                    mm_acc(g, self.value(*b).data(), acc!(*a), m, n, k);
                }
                if tracked(*b) {
                    mm_tn_acc(g, self.value(*a).data(), acc!(*b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if tracked(v) {
                        for (o, &x) in acc!(v).iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    for (o, &x) in acc!(*a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if tracked(*b) {
                    for (o, &x) in acc!(*b).iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let bv = self.value(*b).data();
                    for ((o, &x), &y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if tracked(*b) {
                    let av = self.value(*a).data();
                    for ((o, &x), &y) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(a, b) => {
                let n = self.dims(*a).1;
                if tracked(*a) {
                    for (o, &x) in acc!(*a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if tracked(*b) {
                    let gb = acc!(*b);
                    for row in g.chunks(n) {
                        for (o, &x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if tracked(*a) {
                    for (o, &x) in acc!(*a).iter_mut().zip(g) {
                        *o += x * *s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gamma).data();
                if tracked(*gamma) {
                    let gg = acc!(*gamma);
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if tracked(*beta) {
                    let gb = acc!(*beta);
                    for r in 0..m {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                }
                if tracked(*x) {
                    let gx = acc!(*x);
                    let inv_n = T::from_f64(1.0 / n as f64);
                    for r in 0..m {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            let d = g[r * n + c] * gv[c];
                            s1 += d;
                            s2 += d * xhat[r * n + c];
                        }
                        s1 *= inv_n;
                        s2 *= inv_n;
                        for c in 0..n {
                            let d = g[r * n + c] * gv[c];
                            gx[r * n + c] += rstd[r] * (d - s1 - xhat[r * n + c] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if tracked(*x) {
                    let c = T::from_f64(GELU_C);
                    let a = T::from_f64(GELU_A);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let xv = self.value(*x).data();
                    for ((o, &gi), &v) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let d = half * (T::one() + th)
                            + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v);
                        *o += gi * d;
                    }
                }
            }
            Op::Tanh(x) => {
                if tracked(*x) {
                    let yv = node.value.data();
                    for ((o, &gi), &y) in acc!(*x).iter_mut().zip(g).zip(yv) {
                        *o += gi * (T::one() - y * y);
                    }
                }
            }
            Op::StraightThrough(x) => {
                if tracked(*x) {
                    let xv = self.value(*x).data();
                    for ((o, &gi), &v) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        let t = v.tanh();
                        *o += gi * (T::one() - t * t);
                    }
                }
            }
            Op::SoftmaxMasked(x) => {
                if tracked(*x) {
                    let (m, n) = self.dims(*x);
                    let yv = node.value.data();
                    let gx = acc!(*x);
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dot: T = g[row.clone()]
                            .iter()
                            .zip(&yv[row.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        for c in row {
                            gx[c] += yv[c] * (g[c] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if tracked(*table) {
                    let d = self.dims(*table).1;
                    let gt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                rows,
                probs,
                scale,
            } => {
                if tracked(*logits) {
                    let v = self.dims(*logits).1;
                    let gl = acc!(*logits);
                    let s = g[0] * *scale;
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..v {
                            gl[r * v + c] += s * probs[k * v + c];
                        }
                        gl[r * v + targets[r]] -= s;
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = g[0] * T::from_f64(2.0 / av.len() as f64);
                if tracked(*a) {
                    for ((o, &x), &y) in acc!(*a).iter_mut().zip(av).zip(bv) {
                        *o += k * (x - y);
                    }
                }
                if tracked(*b) {
                    for ((o, &x), &y) in acc!(*b).iter_mut().zip(av).zip(bv) {
                        *o -= k * (x - y);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        if tracked(p) {
                            for (o, &x) in acc!(p).iter_mut().zip(&g[off..off + len]) {
                                *o += x;
                            }
                        }
                        off += len;
                    }
                } else {
                    let (m, n) = node.value.dims2();
                    let mut col = 0;
                    for &p in parts {
                        let pn = self.dims(p).1;
                        if tracked(p) {
                            let gp = acc!(p);
                            for r in 0..m {
                                for c in 0..pn {
                                    gp[r * pn + c] += g[r * n + col + c];
                                }
                            }
                        }
                        col += pn;
                    }
                }
            }
            Op::SliceRows(x, start) => {
                if tracked(*x) {
                    let n = self.dims(*x).1;
                    let gx = acc!(*x);
                    for (o, &v) in gx[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if tracked(*x) {
                    let (m, n) = self.dims(*x);
                    let w = node.value.cols();
                    let gx = acc!(*x);
                    for r in 0..m {
                        for c in 0..w {
                            gx[r * n + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::RepeatRows(x, times) => {
                if tracked(*x) {
                    let (m, n) = self.dims(*x);
                    let gx = acc!(*x);
                    for r in 0..m {
                        for t in 0..*times {
                            let src = (r * times + t) * n;
                            for c in 0..n {
                                gx[r * n + c] += g[src + c];
                            }
                        }
                    }
                }
            }
            Op::Interleave(parts) => {
                let n = node.value.cols();
                for (p, pos) in parts {
                    if tracked(*p) {
                        let gp = acc!(*p);
                        for (r, &dst) in pos.iter().enumerate() {
                            for c in 0..n {
                                gp[r * n + c] += g[dst * n + c];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if tracked(*x) {
                    for (o, &v) in acc!(*x).iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Sum(x) => {
                if tracked(*x) {
                    for o in acc!(*x).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if tracked(*x) {
                    let k = g[0] / T::from_f64(self.value(*x).numel() as f64);
                    for o in acc!(*x).iter_mut() {
                        *o += k;
                    }
                }
            }
            Op::LogSigmoid(x) => {
                if tracked(*x) {
                    let xv = self.value(*x).data();
                    for ((o, &gi), &v) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        // d/dx log σ(x) = σ(-x)
                        let s = if v >= T::zero() {
                            let e = (-v).exp();
                            e / (T::one() + e)
                        } else {
                            T::one() / (T::one() + v.exp())
                        };
                        *o += gi * s;
                    }
                }
            }
        }
    }
}
