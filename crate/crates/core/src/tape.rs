//! Reverse-mode differentiation over a recorded tape of primitive operations.
//!
//! A [`Tape`] owns every intermediate value produced during a forward pass.
//! Operations return [`Var`] handles into the tape; [`Tape::backward`] walks
//! the records in reverse order and accumulates adjoints into every node that
//! requires a gradient. Leaves are copies of [`Tensor`]s, so after a backward
//! pass gradients are copied back with [`Tape::accumulate_into`].
//!
//! Nodes are appended in creation order, which is already a topological
//! order, so no graph sort is needed. A tape is meant to be cleared (or
//! dropped) after every optimization step.

use crate::scalar::Scalar;
use crate::tensor::{check_shape, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        amap: Bcast,
        bmap: Bcast,
    },
    Exp(Var),
    Log(Var),
    Neg(Var),
    Abs(Var),
    Affine(Var, S),
    Clamp {
        x: Var,
        lo: Option<S>,
        hi: Option<S>,
    },
    Gelu {
        x: Var,
        deriv: Vec<S>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Select {
        x: Var,
        idx: Vec<usize>,
    },
    LogSoftmaxSelect {
        x: Var,
        idx: Vec<usize>,
        probs: Vec<S>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MaxLast {
        x: Var,
        argmax: Vec<usize>,
    },
    Attention(Box<AttentionSaved<S>>),
}

#[derive(Debug)]
struct AttentionSaved<S> {
    qkv: Var,
    lengths: Vec<usize>,
    heads: usize,
    rope: bool,
    q_rot: Vec<S>,
    k_rot: Vec<S>,
    probs: Vec<S>,
}

/// The computation tape: values, gradients and the op that produced each node.
#[derive(Debug, Default)]
pub struct Tape<S> {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<S>>,
    grads: Vec<Option<Vec<S>>>,
    req: Vec<bool>,
    ops: Vec<Op<S>>,
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&c) => Ok((shape.iter().product::<usize>() / c, c)),
        None => Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "needs at least one dimension".into(),
        }),
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// How an operand of a broadcasting op is indexed by output position.
#[derive(Debug, Clone)]
enum Bcast {
    Same,
    /// The operand repeats every `n` output elements (a trailing-dims suffix).
    Cycle(usize),
    /// Flat source index per output element.
    Map(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], src: &[usize]) -> Self {
        if out == src {
            return Bcast::Same;
        }
        let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
        if out.ends_with(&trimmed) {
            return Bcast::Cycle(trimmed.iter().product());
        }
        Bcast::Map(broadcast_map(out, src))
    }

    fn cursor(&self) -> Cursor<'_> {
        Cursor { b: self, j: 0 }
    }
}

/// Sequential source-index generator for a [`Bcast`].
struct Cursor<'a> {
    b: &'a Bcast,
    j: usize,
}

impl Cursor<'_> {
    /// Source index of output element `i`; must be called for i = 0, 1, 2, ...
    #[inline(always)]
    fn at(&mut self, i: usize) -> usize {
        match self.b {
            Bcast::Same => i,
            Bcast::Cycle(n) => {
                let r = self.j;
                self.j += 1;
                if self.j == *n {
                    self.j = 0;
                }
                r
            }
            Bcast::Map(m) => m[i],
        }
    }
}

/// For each element of `out`, the flat index of the broadcast source element.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..n).rev() {
        let sd = if i + src.len() >= n {
            src[i + src.len() - n]
        } else {
            1
        };
        strides[i] = if sd == 1 { 0 } else { acc };
        acc *= sd;
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..n).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

#[inline]
fn gelu<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation; returns (value, derivative)
    let k = S::c(0.797_884_560_802_865_4);
    let c = S::c(0.044_715);
    let half = S::c(0.5);
    let u = k * (x + c * x * x * x);
    // tanh via exp: an order of magnitude cheaper than libm tanh here
    let t = S::one() - S::c(2.0) / ((u + u).exp() + S::one());
    let du = k * (S::one() + S::c(3.0) * c * x * x);
    let v = half * x * (S::one() + t);
    let dv = half * (S::one() + t) + half * x * (S::one() - t * t) * du;
    (v, dv)
}

const ROPE_BASE: f64 = 10_000.0;

/// Rotates the first/second half pairs of each head slice in place.
/// `inverse` applies the transpose rotation (used for adjoints).
fn rope_rows<S: Scalar>(
    buf: &mut [S],
    width: usize,
    lengths: &[usize],
    heads: usize,
    inverse: bool,
) {
    let dh = width / heads;
    let half = dh / 2;
    let mut row = 0;
    for &len in lengths {
        for pos in 0..len {
            let r = &mut buf[(row + pos) * width..(row + pos + 1) * width];
            for j in 0..half {
                let freq = ROPE_BASE.powf(-(2.0 * j as f64) / dh as f64);
                let (s, c) = (pos as f64 * freq).sin_cos();
                let (s, c) = (S::c(if inverse { -s } else { s }), S::c(c));
                for h in 0..heads {
                    let i0 = h * dh + j;
                    let i1 = i0 + half;
                    let (a, b) = (r[i0], r[i1]);
                    r[i0] = a * c - b * s;
                    r[i1] = a * s + b * c;
                }
            }
        }
        row += len;
    }
}

fn grad_slot<'a, S: Scalar>(
    grads: &'a mut [Option<Vec<S>>],
    req: &[bool],
    values: &[Vec<S>],
    v: Var,
) -> Option<&'a mut Vec<S>> {
    if !req[v.0] {
        return None;
    }
    let n = values[v.0].len();
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            req: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.shapes.clear();
        self.values.clear();
        self.grads.clear();
        self.req.clear();
        self.ops.clear();
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<S>, req: bool, op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.shapes.push(shape);
        self.values.push(values);
        self.grads.push(None);
        self.req.push(req);
        self.ops.push(op);
        Var(self.ops.len() - 1)
    }

    /// Records a copy of `t` as a leaf. It takes part in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// A non-differentiable constant input.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<S>) -> Result<Var> {
        check_shape("constant", &shape, values.len())?;
        Ok(self.push(shape, values, false, Op::Leaf))
    }

    /// A differentiable leaf built from raw values.
    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<S>) -> Result<Var> {
        check_shape("variable", &shape, values.len())?;
        Ok(self.push(shape, values, true, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    /// First element of a node, for scalar results.
    pub fn item(&self, v: Var) -> S {
        self.values[v.0][0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.req[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(self.shapes[v.0].clone(), self.values[v.0].clone()).expect("recorded shape")
    }

    /// Adds the gradient of `v` (if any) into `t`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<S>) -> Result<()> {
        if let Some(g) = &self.grads[v.0] {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.shapes[a.0], &self.shapes[b.0]);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            S::one(),
            &self.values[a.0],
            k,
            1,
            &self.values[b.0],
            n,
            1,
            S::zero(),
            &mut out,
            n,
            1,
        );
        let req = self.req[a.0] || self.req[b.0];
        Ok(self.push(vec![m, n], out, req, Op::MatMul(a, b)))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (sa, sb) = (self.shapes[a.0].clone(), self.shapes[b.0].clone());
        let (out_shape, amap, bmap) = if sa == sb {
            (sa, Bcast::Same, Bcast::Same)
        } else {
            let out = broadcast_shape(name, &sa, &sb)?;
            let am = Bcast::new(&out, &sa);
            let bm = Bcast::new(&out, &sb);
            (out, am, bm)
        };
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let n: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(n);
        if let (BinKind::Add, Bcast::Same, Bcast::Cycle(m)) = (kind, &amap, &bmap) {
            for chunk in va.chunks_exact(*m) {
                out.extend(chunk.iter().zip(vb.iter()).map(|(&x, &y)| x + y));
            }
            let req = self.req[a.0] || self.req[b.0];
            let op = Op::Binary {
                kind,
                a,
                b,
                amap,
                bmap,
            };
            return Ok(self.push(out_shape, out, req, op));
        }
        let (mut ca, mut cb) = (amap.cursor(), bmap.cursor());
        for i in 0..n {
            let x = va[ca.at(i)];
            let y = vb[cb.at(i)];
            out.push(match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => {
                    if y == S::zero() {
                        return Err(TensorError::Domain {
                            op: "div",
                            index: i,
                            value: 0.0,
                        });
                    }
                    x / y
                }
            });
        }
        let req = self.req[a.0] || self.req[b.0];
        Ok(self.push(
            out_shape,
            out,
            req,
            Op::Binary {
                kind,
                a,
                b,
                amap,
                bmap,
            },
        ))
    }

    /// Elementwise addition with trailing-dimension broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    /// Elementwise division; a zero divisor is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out: Vec<S> = self.values[x.0].iter().map(|&v| f(v)).collect();
        let shape = self.shapes[x.0].clone();
        let req = self.req[x.0];
        self.push(shape, out, req, op)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((i, &v)) = self.values[x.0]
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > S::zero()))
        {
            return Err(TensorError::Domain {
                op: "log",
                index: i,
                value: v.to_f64_lossy(),
            });
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// `x * factor`.
    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        self.unary(x, |v| v * factor, Op::Affine(x, factor))
    }

    /// `x + offset` (gradient passes through unchanged).
    pub fn add_scalar(&mut self, x: Var, offset: S) -> Var {
        self.unary(x, |v| v + offset, Op::Affine(x, S::one()))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: Option<S>, hi: Option<S>) -> Var {
        self.unary(
            x,
            |v| {
                let v = match lo {
                    Some(l) if v < l => l,
                    _ => v,
                };
                match hi {
                    Some(h) if v > h => h,
                    _ => v,
                }
            },
            Op::Clamp { x, lo, hi },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (out, deriv): (Vec<S>, Vec<S>) = self.values[x.0].iter().map(|&v| gelu(v)).unzip();
        let shape = self.shapes[x.0].clone();
        let req = self.req[x.0];
        self.push(shape, out, req, Op::Gelu { x, deriv })
    }

    /// Softmax over the last dimension (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = last_dim("softmax", &self.shapes[x.0])?;
        let src = &self.values[x.0];
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut z = S::zero();
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = (v - m).exp();
                z += *oi;
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let shape = self.shapes[x.0].clone();
        let req = self.req[x.0];
        Ok(self.push(shape, out, req, Op::Softmax(x)))
    }

    /// Log-softmax over the last dimension in one fused step.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = last_dim("log_softmax", &self.shapes[x.0])?;
        let src = &self.values[x.0];
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = self.shapes[x.0].clone();
        let req = self.req[x.0];
        Ok(self.push(shape, out, req, Op::LogSoftmax(x)))
    }

    /// `log Σ exp(x)` over the last dimension, optionally restricted to the
    /// entries where `mask` is true. Each row needs at least one kept entry.
    pub fn logsumexp(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.shapes[x.0].clone();
        let (rows, cols) = last_dim("logsumexp", &shape)?;
        if let Some(m) = &mask {
            if m.len() != rows * cols {
                return Err(TensorError::ShapeMismatch {
                    op: "logsumexp",
                    lhs: shape,
                    rhs: vec![m.len()],
                });
            }
        }
        let src = &self.values[x.0];
        let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let range = r * cols..(r + 1) * cols;
            let mx = range
                .clone()
                .filter(|&i| keep(i))
                .map(|i| src[i])
                .fold(S::neg_infinity(), S::max);
            if mx == S::neg_infinity() {
                return Err(TensorError::InvalidShape {
                    op: "logsumexp",
                    shape,
                    reason: format!("row {r} has no unmasked entries"),
                });
            }
            let s: S = range
                .filter(|&i| keep(i))
                .map(|i| (src[i] - mx).exp())
                .sum();
            out.push(mx + s.ln());
        }
        let mut oshape = shape[..shape.len() - 1].to_vec();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let req = self.req[x.0];
        Ok(self.push(oshape, out, req, Op::LogSumExp { x, mask }))
    }

    /// Layer normalization over the last dimension with affine `gamma`/`beta`
    /// (both shaped like the last dimension).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let shape = self.shapes[x.0].clone();
        let (rows, cols) = last_dim("layer_norm", &shape)?;
        for p in [gamma, beta] {
            if self.shapes[p.0] != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shapes[p.0].clone(),
                });
            }
        }
        let src = &self.values[x.0];
        let (g, b) = (&self.values[gamma.0], &self.values[beta.0]);
        let nc = S::from_usize_lossy(cols);
        let mut xhat = vec![S::zero(); rows * cols];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<S>() / nc;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nc;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = g[c] * xh + b[c];
            }
        }
        let req = self.req[x.0] || self.req[gamma.0] || self.req[beta.0];
        Ok(self.push(
            shape,
            out,
            req,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row lookup: `table` is `[n, d]`, result is `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = &self.shapes[table.0];
        if shape.len() != 2 || ids.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape: shape.clone(),
                reason: "needs a 2-d table and at least one id".into(),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: bad,
                bound: n,
            });
        }
        let src = &self.values[table.0];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let req = self.req[table.0];
        Ok(self.push(
            vec![ids.len(), d],
            out,
            req,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Picks one entry per last-dim row: `out[r] = x[r, idx[r]]`.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shapes[x.0].clone();
        let (rows, cols) = last_dim("select", &shape)?;
        if idx.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "select",
                lhs: shape,
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(TensorError::IndexOutOfRange {
                op: "select",
                index: bad,
                bound: cols,
            });
        }
        let src = &self.values[x.0];
        let out: Vec<S> = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| src[r * cols + c])
            .collect();
        let mut oshape = shape[..shape.len() - 1].to_vec();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let req = self.req[x.0];
        Ok(self.push(
            oshape,
            out,
            req,
            Op::Select {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Fused `select(log_softmax(x), idx)`: the log-probability of one class
    /// per last-dim row.
    pub fn log_softmax_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shapes[x.0].clone();
        let (rows, cols) = last_dim("log_softmax_select", &shape)?;
        if idx.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "log_softmax_select",
                lhs: shape,
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(TensorError::IndexOutOfRange {
                op: "log_softmax_select",
                index: bad,
                bound: cols,
            });
        }
        let src = &self.values[x.0];
        let mut probs = vec![S::zero(); rows * cols];
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let p = &mut probs[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - m).exp();
                z += *pi;
            }
            let inv = S::one() / z;
            p.iter_mut().for_each(|v| *v *= inv);
            out.push(row[idx[r]] - m - z.ln());
        }
        let mut oshape = shape[..shape.len() - 1].to_vec();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let req = self.req[x.0];
        Ok(self.push(
            oshape,
            out,
            req,
            Op::LogSoftmaxSelect {
                x,
                idx: idx.to_vec(),
                probs,
            },
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shapes[v.0].clone(),
            None => {
                return Err(TensorError::InvalidShape {
                    op: "concat",
                    shape: vec![],
                    reason: "no inputs".into(),
                })
            }
        };
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = &self.shapes[v.0];
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let span = self.shapes[v.0][axis] * inner;
                out.extend_from_slice(&self.values[v.0][o * span..(o + 1) * span]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let req = inputs.iter().any(|v| self.req[v.0]);
        Ok(self.push(
            shape,
            out,
            req,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shapes[x.0].clone();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                reason: format!("axis {axis}, range {start}..{}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.values[x.0];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let req = self.req[x.0];
        Ok(self.push(oshape, out, req, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape("reshape", &shape, self.values[x.0].len())?;
        let vals = self.values[x.0].clone();
        let req = self.req[x.0];
        Ok(self.push(shape, vals, req, Op::Reshape(x)))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].iter().copied().sum();
        let req = self.req[x.0];
        self.push(vec![1], vec![s], req, Op::Sum(x))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.values[x.0];
        let s = v.iter().copied().sum::<S>() / S::from_usize_lossy(v.len());
        let req = self.req[x.0];
        self.push(vec![1], vec![s], req, Op::Mean(x))
    }

    /// Maximum over the last dimension (the gradient goes to the first argmax).
    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shapes[x.0].clone();
        let (rows, cols) = last_dim("max_last", &shape)?;
        let src = &self.values[x.0];
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mut best = 0;
            for c in 1..cols {
                if row[c] > row[best] {
                    best = c;
                }
            }
            out.push(row[best]);
            argmax.push(best);
        }
        let mut oshape = shape[..shape.len() - 1].to_vec();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let req = self.req[x.0];
        Ok(self.push(oshape, out, req, Op::MaxLast { x, argmax }))
    }

    /// Causal multi-head self-attention over packed sequences.
    ///
    /// `qkv` is `[rows, 3*d]` holding queries, keys and values side by side;
    /// `lengths` splits the rows into independent sequences. With `rope`,
    /// rotary position encodings (positions restarting at 0 per sequence) are
    /// applied to queries and keys. Output is `[rows, d]`.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        lengths: &[usize],
        heads: usize,
        rope: bool,
    ) -> Result<Var> {
        let shape = self.shapes[qkv.0].clone();
        let bad = |reason: String| TensorError::InvalidShape {
            op: "causal_attention",
            shape: shape.clone(),
            reason,
        };
        if shape.len() != 2 || shape[1] % 3 != 0 {
            return Err(bad("expects [rows, 3*d]".into()));
        }
        let (rows, w3) = (shape[0], shape[1]);
        let d = w3 / 3;
        if heads == 0 || d % heads != 0 || (rope && (d / heads) % 2 != 0) {
            return Err(bad(format!("width {d} does not split into {heads} heads")));
        }
        if lengths.iter().sum::<usize>() != rows || lengths.contains(&0) {
            return Err(bad(format!(
                "sequence lengths {lengths:?} do not cover the rows"
            )));
        }
        let dh = d / heads;
        let scale = S::one() / S::from_usize_lossy(dh).sqrt();
        let src = &self.values[qkv.0];
        let mut q_rot = vec![S::zero(); rows * d];
        let mut k_rot = vec![S::zero(); rows * d];
        for r in 0..rows {
            q_rot[r * d..(r + 1) * d].copy_from_slice(&src[r * w3..r * w3 + d]);
            k_rot[r * d..(r + 1) * d].copy_from_slice(&src[r * w3 + d..r * w3 + 2 * d]);
        }
        if rope {
            rope_rows(&mut q_rot, d, lengths, heads, false);
            rope_rows(&mut k_rot, d, lengths, heads, false);
        }
        let total_probs: usize = lengths.iter().map(|l| l * l * heads).sum();
        let mut probs = vec![S::zero(); total_probs];
        let mut out = vec![S::zero(); rows * d];
        let mut row0 = 0;
        let mut poff = 0;
        for &len in lengths {
            for h in 0..heads {
                let p = &mut probs[poff..poff + len * len];
                S::gemm(
                    len,
                    dh,
                    len,
                    scale,
                    &q_rot[row0 * d + h * dh..],
                    d,
                    1,
                    &k_rot[row0 * d + h * dh..],
                    1,
                    d,
                    S::zero(),
                    p,
                    len,
                    1,
                );
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    let m = row[..=i].iter().copied().fold(S::neg_infinity(), S::max);
                    let mut z = S::zero();
                    for v in row[..=i].iter_mut() {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    row[..=i].iter_mut().for_each(|v| *v /= z);
                    row[i + 1..].iter_mut().for_each(|v| *v = S::zero());
                }
                S::gemm(
                    len,
                    len,
                    dh,
                    S::one(),
                    p,
                    len,
                    1,
                    &src[row0 * w3 + 2 * d + h * dh..],
                    w3,
                    1,
                    S::zero(),
                    &mut out[row0 * d + h * dh..],
                    d,
                    1,
                );
                poff += len * len;
            }
            row0 += len;
        }
        let req = self.req[qkv.0];
        Ok(self.push(
            vec![rows, d],
            out,
            req,
            Op::Attention(Box::new(AttentionSaved {
                qkv,
                lengths: lengths.to_vec(),
                heads,
                rope,
                q_rot,
                k_rot,
                probs,
            })),
        ))
    }

    // ------------------------------------------------------------ backward

    /// Backpropagates from a scalar node with seed gradient 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shapes[loss.0].clone()));
        }
        self.backward_with_seed(loss, &[S::one()])
    }

    /// Backpropagates a vector-Jacobian product seeded at `root`.
    pub fn backward_with_seed(&mut self, root: Var, seed: &[S]) -> Result<()> {
        let n = self.values[root.0].len();
        if seed.len() != n {
            return Err(TensorError::SeedLength {
                expected: n,
                got: seed.len(),
            });
        }
        if !self.req[root.0] {
            return Ok(());
        }
        match &mut self.grads[root.0] {
            Some(g) => g.iter_mut().zip(seed).for_each(|(a, &b)| *a += b),
            None => self.grads[root.0] = Some(seed.to_vec()),
        }
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, node: usize, g: &[S]) {
        let Self {
            shapes,
            values,
            grads,
            req,
            ops,
        } = self;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, req, values, $v)
            };
        }
        let y = &values[node];
        match &ops[node] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shapes[a.0][0], shapes[a.0][1]);
                let n = shapes[b.0][1];
                if req[a.0] {
                    let bv = &values[b.0];
                    let ga = slot!(*a).expect("req");
                    // dA = G B^T
                    S::gemm(m, n, k, S::one(), g, n, 1, bv, 1, n, S::one(), ga, k, 1);
                }
                if req[b.0] {
                    let av = &values[a.0];
                    let gb = slot!(*b).expect("req");
                    // dB = A^T G
                    S::gemm(k, m, n, S::one(), av, 1, k, g, n, 1, S::one(), gb, n, 1);
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                amap,
                bmap,
            } => {
                if let (BinKind::Add, Bcast::Same, Bcast::Cycle(n)) = (kind, amap, bmap) {
                    // bias-style add: row-chunked loops
                    if let Some(ga) = slot!(*a) {
                        ga.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi);
                    }
                    if let Some(gb) = slot!(*b) {
                        for chunk in g.chunks_exact(*n) {
                            gb.iter_mut().zip(chunk).for_each(|(o, &gi)| *o += gi);
                        }
                    }
                    return;
                }
                let (va, vb) = (&values[a.0], &values[b.0]);
                if let Some(ga) = slot!(*a) {
                    let (mut ca, mut cb) = (amap.cursor(), bmap.cursor());
                    for (i, &gi) in g.iter().enumerate() {
                        let (ai, bi) = (ca.at(i), cb.at(i));
                        ga[ai] += match kind {
                            BinKind::Add | BinKind::Sub => gi,
                            BinKind::Mul => gi * vb[bi],
                            BinKind::Div => gi / vb[bi],
                        };
                    }
                }
                if let Some(gb) = slot!(*b) {
                    let (mut ca, mut cb) = (amap.cursor(), bmap.cursor());
                    for (i, &gi) in g.iter().enumerate() {
                        let (ai, bi) = (ca.at(i), cb.at(i));
                        let (x, yv) = (va[ai], vb[bi]);
                        gb[bi] += match kind {
                            BinKind::Add => gi,
                            BinKind::Sub => -gi,
                            BinKind::Mul => gi * x,
                            BinKind::Div => -gi * x / (yv * yv),
                        };
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(o, (&gi, &yi))| *o += gi * yi);
                }
            }
            Op::Log(x) => {
                let xv = &values[x.0];
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut()
                        .zip(g.iter().zip(xv))
                        .for_each(|(o, (&gi, &xi))| *o += gi / xi);
                }
            }
            Op::Neg(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(o, &gi)| *o -= gi);
                }
            }
            Op::Abs(x) => {
                let xv = &values[x.0];
                if let Some(gx) = slot!(*x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > S::zero() {
                            *o += gi;
                        } else if xi < S::zero() {
                            *o -= gi;
                        }
                    }
                }
            }
            Op::Affine(x, f) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi * *f);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &values[x.0];
                if let Some(gx) = slot!(*x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        let below = lo.is_some_and(|l| xi < l);
                        let above = hi.is_some_and(|h| xi > h);
                        if !below && !above {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Gelu { x, deriv } => {
                if let Some(gx) = slot!(*x) {
                    for ((o, &gi), &di) in gx.iter_mut().zip(g).zip(deriv) {
                        *o += gi * di;
                    }
                }
            }
            Op::LogSoftmaxSelect { x, idx, probs } => {
                let cols = *shapes[x.0].last().expect("dims");
                if let Some(gx) = slot!(*x) {
                    for (r, &gr) in g.iter().enumerate() {
                        let go = &mut gx[r * cols..(r + 1) * cols];
                        for (o, &p) in go.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                            *o -= gr * p;
                        }
                        go[idx[r]] += gr;
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = *shapes[node].last().expect("dims");
                if let Some(gx) = slot!(*x) {
                    for ((go, gi), yi) in
                        gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let dot: S = gi.iter().zip(yi).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            go[c] += yi[c] * (gi[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = *shapes[node].last().expect("dims");
                if let Some(gx) = slot!(*x) {
                    for ((go, gi), yi) in
                        gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let total: S = gi.iter().copied().sum();
                        for c in 0..cols {
                            go[c] += gi[c] - yi[c].exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExp { x, mask } => {
                let cols = *shapes[x.0].last().expect("dims");
                let xv = &values[x.0];
                if let Some(gx) = slot!(*x) {
                    for (r, (&gr, &lse)) in g.iter().zip(y).enumerate() {
                        for c in 0..cols {
                            let i = r * cols + c;
                            if mask.as_ref().is_none_or(|m| m[i]) {
                                gx[i] += gr * (xv[i] - lse).exp();
                            }
                        }
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
                let cols = shapes[gamma.0][0];
                let gv = &values[gamma.0];
                if let Some(gg) = slot!(*gamma) {
                    for (gi, xh) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gi[c] * xh[c];
                        }
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for gi in g.chunks(cols) {
                        for c in 0..cols {
                            gb[c] += gi[c];
                        }
                    }
                }
                if let Some(gx) = slot!(*x) {
                    let nc = S::from_usize_lossy(cols);
                    for (r, ((go, gi), xh)) in gx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for c in 0..cols {
                            let d = gi[c] * gv[c];
                            m1 += d;
                            m2 += d * xh[c];
                        }
                        m1 /= nc;
                        m2 /= nc;
                        for c in 0..cols {
                            go[c] += rstd[r] * (gi[c] * gv[c] - m1 - xh[c] * m2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = shapes[table.0][1];
                if let Some(gt) = slot!(*table) {
                    for (k, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[k * d + c];
                        }
                    }
                }
            }
            Op::Select { x, idx } => {
                let cols = *shapes[x.0].last().expect("dims");
                if let Some(gx) = slot!(*x) {
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * cols + c] += g[r];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = &shapes[node];
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let span = shapes[v.0][*axis] * inner;
                    if req[v.0] {
                        let n = values[v.0].len();
                        let gv = grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + span];
                            gv[o * span..(o + 1) * span]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &b)| *a += b);
                        }
                    }
                    offset += span;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = &shapes[x.0];
                let len = shapes[node][*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                if let Some(gx) = slot!(*x) {
                    for o in 0..outer {
                        let base = (o * in_shape[*axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        gx[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot!(*x) {
                    let share = g[0] / S::from_usize_lossy(gx.len());
                    gx.iter_mut().for_each(|a| *a += share);
                }
            }
            Op::MaxLast { x, argmax } => {
                let cols = *shapes[x.0].last().expect("dims");
                if let Some(gx) = slot!(*x) {
                    for (r, &c) in argmax.iter().enumerate() {
                        gx[r * cols + c] += g[r];
                    }
                }
            }
            Op::Attention(saved) => {
                let AttentionSaved {
                    qkv,
                    lengths,
                    heads,
                    rope,
                    q_rot,
                    k_rot,
                    probs,
                } = saved.as_ref();
                if !req[qkv.0] {
                    return;
                }
                let (rows, w3) = (shapes[qkv.0][0], shapes[qkv.0][1]);
                let d = w3 / 3;
                let dh = d / heads;
                let scale = S::one() / S::from_usize_lossy(dh).sqrt();
                let src = &values[qkv.0];
                let gq = grads[qkv.0].get_or_insert_with(|| vec![S::zero(); rows * w3]);
                let mut dq = vec![S::zero(); rows * d];
                let mut dk = vec![S::zero(); rows * d];
                let max_len = lengths.iter().copied().max().unwrap_or(0);
                let mut dp = vec![S::zero(); max_len * max_len];
                let mut row0 = 0;
                let mut poff = 0;
                for &len in lengths {
                    for h in 0..*heads {
                        let p = &probs[poff..poff + len * len];
                        let go = &g[row0 * d + h * dh..];
                        // dV = P^T dO
                        S::gemm(
                            len,
                            len,
                            dh,
                            S::one(),
                            p,
                            1,
                            len,
                            go,
                            d,
                            1,
                            S::one(),
                            &mut gq[row0 * w3 + 2 * d + h * dh..],
                            w3,
                            1,
                        );
                        // dP = dO V^T
                        let dpl = &mut dp[..len * len];
                        S::gemm(
                            len,
                            dh,
                            len,
                            S::one(),
                            go,
                            d,
                            1,
                            &src[row0 * w3 + 2 * d + h * dh..],
                            1,
                            w3,
                            S::zero(),
                            dpl,
                            len,
                            1,
                        );
                        // dS = P * (dP - rowdot(dP, P)) * scale
                        for i in 0..len {
                            let pr = &p[i * len..(i + 1) * len];
                            let dr = &mut dpl[i * len..(i + 1) * len];
                            let dot: S = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                            for j in 0..=i {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                            dr[i + 1..].iter_mut().for_each(|v| *v = S::zero());
                        }
                        // dQ = dS K ; dK = dS^T Q
                        S::gemm(
                            len,
                            len,
                            dh,
                            S::one(),
                            dpl,
                            len,
                            1,
                            &k_rot[row0 * d + h * dh..],
                            d,
                            1,
                            S::one(),
                            &mut dq[row0 * d + h * dh..],
                            d,
                            1,
                        );
                        S::gemm(
                            len,
                            len,
                            dh,
                            S::one(),
                            dpl,
                            1,
                            len,
                            &q_rot[row0 * d + h * dh..],
                            d,
                            1,
                            S::one(),
                            &mut dk[row0 * d + h * dh..],
                            d,
                            1,
                        );
                        poff += len * len;
                    }
                    row0 += len;
                }
                if *rope {
                    rope_rows(&mut dq, d, lengths, *heads, true);
                    rope_rows(&mut dk, d, lengths, *heads, true);
                }
                for r in 0..rows {
                    for c in 0..d {
                        gq[r * w3 + c] += dq[r * d + c];
                        gq[r * w3 + d + c] += dk[r * d + c];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::parameter(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn log_inverts_exp() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1], vec![1.5]).unwrap();
        let e = tape.exp(x);
        let l = tape.log(e).unwrap();
        assert!((tape.item(l) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn matmul_of_ones_counts_inner_dimension() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let b = tape.constant(vec![3, 2], vec![1.0; 6]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        assert_eq!(tape.value(c), &[3.0; 4]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![1.0; 4]).unwrap();
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_and_div_report_domain_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![3], vec![1.0, 0.0, 2.0]).unwrap();
        assert!(matches!(
            tape.log(x),
            Err(TensorError::Domain {
                op: "log",
                index: 1,
                ..
            })
        ));
        let one = tape.constant(vec![1], vec![1.0]).unwrap();
        assert!(matches!(
            tape.div(one, x),
            Err(TensorError::Domain { op: "div", .. })
        ));
    }

    #[test]
    fn square_has_gradient_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), Some(&[6.0][..]));
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[0.3, -1.2, 2.0, 0.7]));
        let s = tape.softmax(x).unwrap();
        let total = tape.sum(s);
        tape.backward(total).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let y = tape.exp(x);
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn broadcasting_bias_add() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let b = tape.leaf(&t(&[3], &[10.0, 20.0, 30.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b), Some(&[2.0, 2.0, 2.0][..]));
        let col = tape.leaf(&t(&[2, 1], &[1.0, 2.0]));
        let row = tape.leaf(&t(&[1, 3], &[1.0, 2.0, 3.0]));
        let outer = tape.sub(col, row).unwrap();
        assert_eq!(tape.shape(outer), &[2, 3]);
        assert_eq!(tape.value(outer), &[0.0, -1.0, -2.0, 1.0, 0.0, -1.0]);
        let bad = tape.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn masked_logsumexp_ignores_masked_entries() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 3], vec![0.0, 100.0, 0.0]).unwrap();
        let l = tape.logsumexp(x, Some(vec![true, false, true])).unwrap();
        assert!((tape.item(l) - 2f64.ln()).abs() < 1e-15);
        assert!(tape.logsumexp(x, Some(vec![false; 3])).is_err());
    }

    #[test]
    fn clear_empties_the_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[3.0]));
        let _ = tape.exp(x);
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }
}
