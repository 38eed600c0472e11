//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! Every primitive computes its value eagerly when recorded and keeps what
//! its backward rule needs. [`Tape::backward`] walks the nodes in exact
//! reverse recording order, so a node's gradient is complete before it is
//! propagated to its inputs.

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::linalg::{solve_left, Matrix};

use super::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Tanh,
    Sigmoid,
    Silu,
    Softplus,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid(x),
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Gather { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Unary { x: Var, kind: Unary },
    Sum(Var),
    Mean(Var),
    RmsNorm { x: Var, w: Var, inv_rms: Vec<f64> },
    MaskedSoftmax { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    TriSolve { l: Var, b: Var, transpose: bool },
    ScaleChannels { x: Var, w: Var },
    CholeskyFactor { log_diag: Var, strict_lower: Var, clamp: (f64, f64) },
    Rope { x: Var, n_heads: usize, head_dim: usize, base: f64 },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Records a computation for one forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `v` (if any) into `t`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn last2(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [r, c] => Ok((1, *r, *c)),
        [b, r, c] => Ok((*b, *r, *c)),
        _ => Err(Error::ShapeMismatch(format!("expected a 2-D or 3-D tensor, got {shape:?}"))),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self { nodes: Vec::new(), consumed: false, exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("recorded shape")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a copy of `t`; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false))
    }

    pub fn constant_matrix(&mut self, m: &Matrix) -> Var {
        self.push(vec![m.rows(), m.cols()], m.data().to_vec(), Op::Leaf, false)
    }

    /// `a·b` over the last two dims. `b` is either 2-D (shared across every
    /// leading row of `a`) or has the same leading batch dim as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (ba, m, k) = last2(&sa)?;
        let (bb, kb, n) = last2(&sb)?;
        if k != kb {
            return Err(Error::ShapeMismatch(format!("matmul {sa:?} × {sb:?}")));
        }
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && (sa.len() != 3 || ba != bb) {
            return Err(Error::ShapeMismatch(format!("batched matmul {sa:?} × {sb:?}")));
        }
        let mut out = vec![0.0; ba * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            if shared_rhs {
                exec::gemm_acc(self.exec, av, bv, ba * m, k, n, &mut out);
            } else {
                for i in 0..ba {
                    exec::gemm_acc(
                        self.exec,
                        &av[i * m * k..(i + 1) * m * k],
                        &bv[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a, b, shared_rhs }, tracked))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).iter().map(|t| t * s).collect();
        let tracked = self.tracked(&[x]);
        self.push(self.shape(x).to_vec(), v, Op::Scale(x, s), tracked)
    }

    /// Swaps the last two dims.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, r, c) = last2(&s)?;
        let src = self.value(x);
        let mut out = Vec::with_capacity(src.len());
        for i in 0..b {
            out.extend(exec::transpose(&src[i * r * c..(i + 1) * r * c], r, c));
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::Transpose(x), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.len() > 3 {
            return Err(Error::ShapeMismatch(format!("reshape {:?} to {shape:?}", self.shape(x))));
        }
        let v = self.value(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), tracked))
    }

    /// Rows of a 2-D `table` selected by `ids`, as an `ids.len()×d` tensor.
    pub fn row_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        let [rows, d] = s[..] else {
            return Err(Error::ShapeMismatch(format!("row_gather needs a 2-D table, got {s:?}")));
        };
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange { id, vocab: rows });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let tracked = self.tracked(&[table]);
        Ok(self.push(vec![ids.len(), d], out, Op::Gather { table, ids: ids.to_vec() }, tracked))
    }

    /// Concatenation along the last dim.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let lead: Vec<usize> = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut width = 0;
        for p in parts {
            let s = self.shape(*p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch(format!("concat of {:?} with {s:?}", self.shape(*first))));
            }
            width += last_dim(s);
        }
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let w = last_dim(self.shape(*p));
                out.extend_from_slice(&self.value(*p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let tracked = self.tracked(parts);
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec() }, tracked))
    }

    /// `x[..., start..start+len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = last_dim(&s);
        if start + len > w {
            return Err(Error::ShapeMismatch(format!("slice {start}..{} of width {w}", start + len)));
        }
        let rows = self.value(x).len() / w.max(1);
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * w + start..r * w + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::Slice { x, start }, tracked))
    }

    /// Splits the last dim into `sizes`-wide pieces.
    pub fn split(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, start, len)?);
            start += len;
        }
        if start != last_dim(self.shape(x)) {
            return Err(Error::ShapeMismatch(format!("split sizes sum to {start}, width is {}", last_dim(self.shape(x)))));
        }
        Ok(out)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let v = self.value(x).iter().map(|&t| kind.apply(t)).collect();
        let tracked = self.tracked(&[x]);
        self.push(self.shape(x).to_vec(), v, Op::Unary { x, kind }, tracked)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.value(x).iter().sum::<f64>() / n;
        let tracked = self.tracked(&[x]);
        self.push(vec![], vec![s], Op::Mean(x), tracked)
    }

    /// RMS normalization over the last dim with a learned per-channel gain.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(w) != [d] {
            return Err(Error::ShapeMismatch(format!("rms_norm gain {:?} for width {d}", self.shape(w))));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let rows = xv.len() / d;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(wv).map(|(v, g)| v * inv * g));
        }
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::RmsNorm { x, w, inv_rms }, tracked))
    }

    /// Softmax over the last dim with a causal mask on the last two dims
    /// (entry `(i, j)` is dropped when `j > i`).
    pub fn masked_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (b, r, c) = last2(&s)?;
        if r != c {
            return Err(Error::ShapeMismatch(format!("causal softmax needs square score blocks, got {s:?}")));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for blk in 0..b {
            for i in 0..r {
                let base = blk * r * c + i * c;
                let row = &xv[base..base + i + 1];
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut z = 0.0;
                for j in 0..=i {
                    let e = (row[j] - mx).exp();
                    out[base + j] = e;
                    z += e;
                }
                for o in &mut out[base..=base + i] {
                    *o /= z;
                }
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(s, out, Op::MaskedSoftmax { x }, tracked))
    }

    /// Mean next-token cross-entropy of `logits` (`[.., V]`) against `targets`.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = last_dim(self.shape(logits));
        let lv = self.value(logits);
        let rows = lv.len() / v;
        if rows != targets.len() {
            return Err(Error::ShapeMismatch(format!("{rows} logit rows for {} targets", targets.len())));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
            let row = &lv[r * v..(r + 1) * v];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[r * v + j] = e;
                z += e;
            }
            probs[r * v..(r + 1) * v].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() + mx - row[t];
        }
        loss /= rows.max(1) as f64;
        let tracked = self.tracked(&[logits]);
        Ok(self.push(vec![], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, tracked))
    }

    /// Solves `l·x = b` (or `lᵀ·x = b` when `transpose`) with `l` lower
    /// triangular `d×d` and `b` `d×m`. Only the lower triangle of `l` is read.
    pub fn tri_solve(&mut self, l: Var, b: Var, transpose: bool) -> Result<Var> {
        let sl = self.shape(l).to_vec();
        let sb = self.shape(b).to_vec();
        let (&[d, d2], &[db, m]) = (sl.as_slice(), sb.as_slice()) else {
            return Err(Error::ShapeMismatch(format!("tri_solve {sl:?} \\ {sb:?}")));
        };
        if d != d2 || d != db {
            return Err(Error::ShapeMismatch(format!("tri_solve {sl:?} \\ {sb:?}")));
        }
        let lm = Matrix::from_parts(d, d, self.value(l).to_vec(), crate::linalg::Precision::F64);
        for i in 0..d {
            if lm.get(i, i) == 0.0 {
                return Err(Error::SingularTriangular(i));
            }
        }
        let x = solve_left(&lm, self.value(b), m, true, transpose);
        let tracked = self.tracked(&[l, b]);
        Ok(self.push(vec![d, m], x, Op::TriSolve { l, b, transpose }, tracked))
    }

    /// Assembles a lower-triangular factor with diagonal `exp(clamp(log_diag))`
    /// and the given strictly-lower entries (row-major order: `(1,0), (2,0), (2,1), ...`).
    pub fn cholesky_factor(&mut self, log_diag: Var, strict_lower: Var, clamp: (f64, f64)) -> Result<Var> {
        let d = self.value(log_diag).len();
        if self.value(strict_lower).len() != d * d.saturating_sub(1) / 2 {
            return Err(Error::ShapeMismatch(format!(
                "{} strictly-lower entries for dimension {d}",
                self.value(strict_lower).len()
            )));
        }
        let mut out = vec![0.0; d * d];
        let ld = self.value(log_diag);
        let sl = self.value(strict_lower);
        let mut idx = 0;
        for i in 0..d {
            for j in 0..i {
                out[i * d + j] = sl[idx];
                idx += 1;
            }
            out[i * d + i] = ld[i].clamp(clamp.0, clamp.1).exp();
        }
        let tracked = self.tracked(&[log_diag, strict_lower]);
        Ok(self.push(vec![d, d], out, Op::CholeskyFactor { log_diag, strict_lower, clamp }, tracked))
    }

    /// Multiplies each channel (last dim) of `x` by the matching entry of `w`.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(w) != [d] {
            return Err(Error::ShapeMismatch(format!("channel scale {:?} for width {d}", self.shape(w))));
        }
        let wv = self.value(w);
        let v = self.value(x).chunks(d).flat_map(|row| row.iter().zip(wv).map(|(a, b)| a * b)).collect();
        let tracked = self.tracked(&[x, w]);
        Ok(self.push(self.shape(x).to_vec(), v, Op::ScaleChannels { x, w }, tracked))
    }

    /// Rotary position embedding on a `[B, T, n_heads·head_dim]` tensor.
    /// Position `t` rotates channel pair `(i, i + head_dim/2)` of every head
    /// by `t·base^(−2i/head_dim)`.
    pub fn rope(&mut self, x: Var, n_heads: usize, head_dim: usize, base: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (_, t, c) = last2(&s)?;
        if c != n_heads * head_dim || head_dim % 2 != 0 {
            return Err(Error::ShapeMismatch(format!("rope on {s:?} with {n_heads} heads of {head_dim}")));
        }
        let out = rope_apply(self.value(x), t, n_heads, head_dim, base, false);
        let tracked = self.tracked(&[x]);
        Ok(self.push(s, out, Op::Rope { x, n_heads, head_dim, base }, tracked))
    }

    /// Back-propagates from the scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::BackwardWithoutForward);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeMismatch(format!("backward needs a scalar, got {:?}", self.nodes[loss.0].shape)));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared_rhs } => {
                let (ba, m, k) = last2(self.shape(*a))?;
                let n = last_dim(&node.shape);
                let av = self.value(*a);
                let bv = self.value(*b);
                if *shared_rhs {
                    let rows = ba * m;
                    if needs(*a) {
                        let bt = exec::transpose(bv, k, n);
                        let ga = slot(grads, *a, av.len());
                        exec::gemm_acc(self.exec, g, &bt, rows, n, k, ga);
                    }
                    if needs(*b) {
                        let at = exec::transpose(av, rows, k);
                        let gb = slot(grads, *b, bv.len());
                        exec::gemm_acc(self.exec, &at, g, k, rows, n, gb);
                    }
                } else {
                    for bi in 0..ba {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let asl = &av[bi * m * k..(bi + 1) * m * k];
                        let bsl = &bv[bi * k * n..(bi + 1) * k * n];
                        if needs(*a) {
                            let bt = exec::transpose(bsl, k, n);
                            let ga = slot(grads, *a, av.len());
                            exec::gemm_acc(self.exec, gs, &bt, m, n, k, &mut ga[bi * m * k..(bi + 1) * m * k]);
                        }
                        if needs(*b) {
                            let at = exec::transpose(asl, m, k);
                            let gb = slot(grads, *b, bv.len());
                            exec::gemm_acc(self.exec, &at, gs, k, m, n, &mut gb[bi * k * n..(bi + 1) * k * n]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b);
                    let ga = slot(grads, *a, g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if needs(*b) {
                    let av = self.value(*a);
                    let gb = slot(grads, *b, g.len());
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, s) => {
                if needs(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi * s;
                    }
                }
            }
            Op::Transpose(x) => {
                if needs(*x) {
                    let (b, r, c) = last2(&node.shape)?;
                    let gx = slot(grads, *x, g.len());
                    for bi in 0..b {
                        let t = exec::transpose(&g[bi * r * c..(bi + 1) * r * c], r, c);
                        add_into(&mut gx[bi * r * c..(bi + 1) * r * c], &t);
                    }
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
            Op::Gather { table, ids } => {
                if needs(*table) {
                    let d = node.shape[1];
                    let len = self.value(*table).len();
                    let gt = slot(grads, *table, len);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Concat { parts } => {
                let width = last_dim(&node.shape);
                let rows = g.len() / width.max(1);
                let mut offset = 0;
                for p in parts {
                    let w = last_dim(self.shape(*p));
                    if needs(*p) {
                        let len = self.value(*p).len();
                        let gp = slot(grads, *p, len);
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * width + offset..r * width + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                if needs(*x) {
                    let len = last_dim(&node.shape);
                    let w = last_dim(self.shape(*x));
                    let rows = g.len() / len.max(1);
                    let total = self.value(*x).len();
                    let gx = slot(grads, *x, total);
                    for r in 0..rows {
                        add_into(&mut gx[r * w + start..r * w + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::Unary { x, kind } => {
                if needs(*x) {
                    let xv = self.value(*x);
                    let gx = slot(grads, *x, g.len());
                    for (((o, gi), &xi), &yi) in gx.iter_mut().zip(g).zip(xv).zip(&node.value) {
                        *o += gi * kind.derivative(xi, yi);
                    }
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let n = self.value(*x).len();
                    slot(grads, *x, n).iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let n = self.value(*x).len();
                    let s = g[0] / n.max(1) as f64;
                    slot(grads, *x, n).iter_mut().for_each(|o| *o += s);
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let d = last_dim(&node.shape);
                let xv = self.value(*x);
                let wv = self.value(*w);
                if needs(*w) {
                    let gw = slot(grads, *w, d);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            gw[j] += g[r * d + j] * xv[r * d + j] * inv;
                        }
                    }
                }
                if needs(*x) {
                    let gx = slot(grads, *x, xv.len());
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = (0..d).map(|j| gr[j] * wv[j] * row[j]).sum();
                        let k = inv * inv * inv * dot / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv * gr[j] * wv[j] - k * row[j];
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                if needs(*x) {
                    let (b, r, c) = last2(&node.shape)?;
                    let p = &node.value;
                    let gx = slot(grads, *x, p.len());
                    for blk in 0..b {
                        for i in 0..r {
                            let base = blk * r * c + i * c;
                            let dot: f64 = (0..=i).map(|j| g[base + j] * p[base + j]).sum();
                            for j in 0..=i {
                                gx[base + j] += p[base + j] * (g[base + j] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if needs(*logits) {
                    let v = last_dim(self.shape(*logits));
                    let scale = g[0] / targets.len().max(1) as f64;
                    let gl = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            gl[r * v + j] += scale * probs[r * v + j];
                        }
                        gl[r * v + t] -= scale;
                    }
                }
            }
            Op::TriSolve { l, b, transpose } => {
                let d = self.shape(*l)[0];
                let m = self.shape(*b)[1];
                let lm = Matrix::from_parts(d, d, self.value(*l).to_vec(), crate::linalg::Precision::F64);
                // grad_b = op(l)^{-T}·g
                let gb = solve_left(&lm, g, m, true, !transpose);
                if needs(*b) {
                    add_into(slot(grads, *b, d * m), &gb);
                }
                if needs(*l) {
                    let x = &node.value;
                    let gl = slot(grads, *l, d * d);
                    // l·x = b:   grad_l = −tril(gb·xᵀ)
                    // lᵀ·x = b:  grad_l = −tril(x·gbᵀ)
                    let (p, q) = if *transpose { (x.as_slice(), gb.as_slice()) } else { (gb.as_slice(), x.as_slice()) };
                    for i in 0..d {
                        for j in 0..=i {
                            let s: f64 = (0..m).map(|t| p[i * m + t] * q[j * m + t]).sum();
                            gl[i * d + j] -= s;
                        }
                    }
                }
            }
            Op::CholeskyFactor { log_diag, strict_lower, clamp } => {
                let d = node.shape[0];
                if needs(*log_diag) {
                    let ld = self.value(*log_diag);
                    let gd = slot(grads, *log_diag, d);
                    for i in 0..d {
                        let inside = ld[i] > clamp.0 && ld[i] < clamp.1;
                        if inside {
                            gd[i] += g[i * d + i] * node.value[i * d + i];
                        }
                    }
                }
                if needs(*strict_lower) {
                    let gs = slot(grads, *strict_lower, d * d.saturating_sub(1) / 2);
                    let mut idx = 0;
                    for i in 0..d {
                        for j in 0..i {
                            gs[idx] += g[i * d + j];
                            idx += 1;
                        }
                    }
                }
            }
            Op::ScaleChannels { x, w } => {
                let d = last_dim(&node.shape);
                if needs(*x) {
                    let wv = self.value(*w);
                    let gx = slot(grads, *x, g.len());
                    for (r, row) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gx[r * d + j] += row[j] * wv[j];
                        }
                    }
                }
                if needs(*w) {
                    let xv = self.value(*x);
                    let gw = slot(grads, *w, d);
                    for (r, row) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gw[j] += row[j] * xv[r * d + j];
                        }
                    }
                }
            }
            Op::Rope { x, n_heads, head_dim, base } => {
                if needs(*x) {
                    let (_, t, _) = last2(&node.shape)?;
                    let back = rope_apply(g, t, *n_heads, *head_dim, *base, true);
                    add_into(slot(grads, *x, g.len()), &back);
                }
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn rope_apply(x: &[f64], seq: usize, n_heads: usize, head_dim: usize, base: f64, inverse: bool) -> Vec<f64> {
    let c = n_heads * head_dim;
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / head_dim as f64)).collect();
    let mut out = x.to_vec();
    for (r, row) in out.chunks_mut(c).enumerate() {
        let pos = (r % seq) as f64;
        for h in 0..n_heads {
            let off = h * head_dim;
            for (i, f) in freqs.iter().enumerate() {
                let (s, co) = (pos * f).sin_cos();
                let s = if inverse { -s } else { s };
                let a = row[off + i];
                let b = row[off + i + half];
                row[off + i] = a * co - b * s;
                row[off + i + half] = a * s + b * co;
            }
        }
    }
    out
}
