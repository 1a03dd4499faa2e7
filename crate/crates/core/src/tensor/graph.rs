use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a binary-op operand maps onto the output layout.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Scalar,
    /// Operand shape is a suffix of the output shape.
    Row(usize),
    /// Operand shape is the output shape with the last extent set to 1.
    Col(usize),
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Row(n) => i % n,
            Bcast::Col(last) => i / last,
        }
    }

    fn resolve(op: &'static str, small: &[usize], out: &[usize]) -> Result<Self> {
        if small == out {
            return Ok(Bcast::Same);
        }
        let numel: usize = small.iter().product();
        if numel == 1 {
            return Ok(Bcast::Scalar);
        }
        let trimmed: &[usize] = {
            let lead = small.iter().take_while(|&&d| d == 1).count();
            &small[lead..]
        };
        if trimmed.len() <= out.len() && out.ends_with(trimmed) {
            return Ok(Bcast::Row(numel));
        }
        if let (Some((&1, head)), Some((&last, out_head))) = (small.split_last(), out.split_last())
        {
            if head == out_head {
                return Ok(Bcast::Col(last));
            }
        }
        Err(Error::shape(op, small, out))
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }
}

/// `[outer, dim, inner]` view of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisView {
    outer: usize,
    dim: usize,
    inner: usize,
}

impl AxisView {
    fn of(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            dim: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }
}

/// Spatial layout of an NHWC activation stored as `[B*H*W, C]`.
#[derive(Clone, Copy, Debug)]
struct Spatial {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
}

enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        ba: Bcast,
        bb: Bcast,
    },
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Silu(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        view: AxisView,
    },
    LayerNorm {
        x: Var,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        dims: Vec<usize>,
        inner: usize,
    },
    Slice {
        x: Var,
        view: AxisView,
        start: usize,
        len: usize,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        view: AxisView,
        scale: f64,
    },
    Im2Col {
        x: Var,
        sp: Spatial,
    },
    AvgPool {
        x: Var,
        sp: Spatial,
    },
    Upsample {
        x: Var,
        sp: Spatial,
    },
    RepeatRows {
        x: Var,
        n: usize,
        cols: usize,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
        cols: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    rule_calls: usize,
}

#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers pass slices whose extents cover the strided
    // m×k, k×n and m×n views, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of backward rules executed so far.
    pub fn backward_rule_calls(&self) -> usize {
        self.rule_calls
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf; `None` for nodes that do not require
    /// gradients or have not been reached by a backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        let out_shape = if na > nb || (na == nb && sa.len() >= sb.len()) {
            sa.clone()
        } else {
            sb.clone()
        };
        let ba = Bcast::resolve(kind.name(), &sa, &out_shape)
            .map_err(|_| Error::shape(kind.name(), &sa, &sb))?;
        let bb = Bcast::resolve(kind.name(), &sb, &out_shape)
            .map_err(|_| Error::shape(kind.name(), &sa, &sb))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let f: fn(f64, f64) -> f64 = match kind {
            BinKind::Add => |x, y| x + y,
            BinKind::Sub => |x, y| x - y,
            BinKind::Mul => |x, y| x * y,
            BinKind::Div => |x, y| x / y,
        };
        let data = (0..n)
            .map(|i| f(da[ba.index(i)], db[bb.index(i)]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b, ba, bb }, rg))
    }

    /// Elementwise sum. Either operand may be a scalar, a trailing-suffix
    /// row vector, or a `[.., 1]` column of the other's shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v < 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x)))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v / (1.0 + (-v).exp()), Op::Silu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        // Same-shape mul cannot fail.
        self.mul(x, x).expect("same-shape mul")
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (self.value(a).data(), k, 1),
            (self.value(b).data(), n, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product `[B,m,k] @ [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                (&da[i * m * k..], k, 1),
                (&db[i * k * n..], n, 1),
                &mut out[i * m * n..],
                0.0,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose", self.shape(x), &[0, 0]));
        }
        self.permute(x, &[1, 0])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", &shape, perm));
        }
        let data = permute_data(self.value(x).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ---- normalization / reductions --------------------------------------

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let view = AxisView::of(self.shape(x), axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..view.outer {
            for i in 0..view.inner {
                let at = |d: usize| (o * view.dim + d) * view.inner + i;
                let max = (0..view.dim)
                    .map(|d| src[at(d)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for d in 0..view.dim {
                    let e = (src[at(d)] - max).exp();
                    out[at(d)] = e;
                    total += e;
                }
                for d in 0..view.dim {
                    out[at(d)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, view }, rg))
    }

    /// Normalizes each row over the last axis to zero mean and unit
    /// variance, with `eps` added to the variance. No affine transform.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let src = self.value(x).data();
        let rows = src.len() / cols;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let rg = self.rg(x);
        let value = Tensor {
            shape,
            data: xhat.clone(),
        };
        self.push(
            value,
            Op::LayerNorm {
                x,
                cols,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, scale: f64) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let view = AxisView::of(&shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; view.outer * view.inner];
        for o in 0..view.outer {
            for d in 0..view.dim {
                let base = (o * view.dim + d) * view.inner;
                for i in 0..view.inner {
                    out[o * view.inner + i] += src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        shape[axis] = 1;
        let rg = self.rg(x);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SumAxis { x, view, scale }, rg))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, 1.0)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dim = AxisView::of(self.shape(x), axis)?.dim;
        self.reduce_axis(x, axis, 1.0 / dim as f64)
    }

    // ---- structural -------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        let view = AxisView::of(&base, axis)?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            dims.push(s[axis]);
        }
        let total: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(view.outer * total * view.inner);
        for o in 0..view.outer {
            for (&p, &d) in parts.iter().zip(&dims) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * d * view.inner..(o + 1) * d * view.inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer: view.outer,
                dims,
                inner: view.inner,
            },
            rg,
        ))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let view = AxisView::of(&shape, axis)?;
        if len == 0 || start + len > view.dim {
            return Err(Error::shape("slice", &shape, &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(view.outer * len * view.inner);
        for o in 0..view.outer {
            let from = (o * view.dim + start) * view.inner;
            out.extend_from_slice(&src[from..from + len * view.inner]);
        }
        shape[axis] = len;
        let rg = self.rg(x);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Slice {
                x,
                view,
                start,
                len,
            },
            rg,
        ))
    }

    /// `[R, C] -> [R*n, C]`, each row repeated `n` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || n == 0 {
            return Err(Error::shape("repeat_rows", shape, &[n]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * n * cols);
        for r in 0..rows {
            for _ in 0..n {
                out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![rows * n, cols], out)?;
        Ok(self.push(value, Op::RepeatRows { x, n, cols }, rg))
    }

    /// Row lookup `table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= shape[0]) {
            return Err(Error::shape("gather_rows", shape, &[idx.len()]));
        }
        let cols = shape[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        let value = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                idx: idx.to_vec(),
                cols,
            },
            rg,
        ))
    }

    // ---- spatial (NHWC rows) ---------------------------------------------

    fn spatial(&self, op: &'static str, x: Var, b: usize, h: usize, w: usize) -> Result<Spatial> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != b * h * w {
            return Err(Error::shape(op, s, &[b, h, w]));
        }
        Ok(Spatial { b, h, w, c: s[1] })
    }

    /// 3×3 zero-padded patch extraction: `[B*H*W, C] -> [B*H*W, 9*C]`,
    /// patch column `(ky*3 + kx)*C + c`.
    pub fn im2col3x3(&mut self, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let sp = self.spatial("im2col3x3", x, b, h, w)?;
        let src = self.value(x).data();
        let c = sp.c;
        let mut out = vec![0.0; b * h * w * 9 * c];
        for n in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let row = ((n * h + y) * w + xx) * 9 * c;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let from = ((n * h + sy as usize) * w + sx as usize) * c;
                            let to = row + (ky * 3 + kx) * c;
                            out[to..to + c].copy_from_slice(&src[from..from + c]);
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![b * h * w, 9 * c], out)?;
        Ok(self.push(value, Op::Im2Col { x, sp }, rg))
    }

    /// 2×2 average pooling; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let sp = self.spatial("avg_pool2", x, b, h, w)?;
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(Error::shape("avg_pool2", &[h, w], &[2, 2]));
        }
        let (oh, ow, c) = (h / 2, w / 2, sp.c);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * oh * ow * c];
        for n in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let from = ((n * h + y) * w + xx) * c;
                    let to = ((n * oh + y / 2) * ow + xx / 2) * c;
                    for k in 0..c {
                        out[to + k] += 0.25 * src[from + k];
                    }
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![b * oh * ow, c], out)?;
        Ok(self.push(value, Op::AvgPool { x, sp }, rg))
    }

    /// Nearest-neighbour 2× upsampling of a `[B*H*W, C]` map.
    pub fn upsample2(&mut self, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let sp = self.spatial("upsample2", x, b, h, w)?;
        let (oh, ow, c) = (2 * h, 2 * w, sp.c);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * oh * ow * c];
        for n in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let from = ((n * h + y / 2) * w + xx / 2) * c;
                    let to = ((n * oh + y) * ow + xx) * c;
                    out[to..to + c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![b * oh * ow, c], out)?;
        Ok(self.push(value, Op::Upsample { x, sp }, rg))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every reachable leaf that requires
    /// gradients. Calling it twice without [`Graph::zero_grads`] adds the
    /// gradients again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 || shape.iter().any(|&d| d != 1) {
            return Err(Error::NonScalar(shape.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        node.grad = Some(Tensor {
                            shape: node.value.shape.clone(),
                            data: g,
                        })
                    }
                }
                continue;
            }
            self.rule_calls += 1;
            self.apply_rule(i, &g, &mut grads);
        }
        Ok(())
    }

    fn apply_rule(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let mut send = |v: Var, d: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], d);
            }
        };
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            &Op::Binary { kind, a, b, ba, bb } => {
                let (va, vb) = (val(a), val(b));
                let mut ga = vec![0.0; numel(a)];
                let mut gb = vec![0.0; numel(b)];
                for (k, &gk) in g.iter().enumerate() {
                    let (ia, ib) = (ba.index(k), bb.index(k));
                    match kind {
                        BinKind::Add => {
                            ga[ia] += gk;
                            gb[ib] += gk;
                        }
                        BinKind::Sub => {
                            ga[ia] += gk;
                            gb[ib] -= gk;
                        }
                        BinKind::Mul => {
                            ga[ia] += gk * vb[ib];
                            gb[ib] += gk * va[ia];
                        }
                        BinKind::Div => {
                            ga[ia] += gk / vb[ib];
                            gb[ib] -= gk * va[ia] / (vb[ib] * vb[ib]);
                        }
                    }
                }
                send(a, ga);
                send(b, gb);
            }
            &Op::Neg(x) => send(x, g.iter().map(|v| -v).collect()),
            &Op::Scale(x, c) => send(x, g.iter().map(|v| v * c).collect()),
            &Op::Exp(x) => send(x, g.iter().zip(out).map(|(a, b)| a * b).collect()),
            &Op::Log(x) => send(x, g.iter().zip(val(x)).map(|(a, b)| a / b).collect()),
            &Op::Sqrt(x) => send(x, g.iter().zip(out).map(|(a, b)| a * 0.5 / b).collect()),
            &Op::Silu(x) => send(
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(gk, &v)| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        gk * (s + v * s * (1.0 - s))
                    })
                    .collect(),
            ),
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, (g, n, 1), (val(b), 1, n), &mut ga, 0.0);
                    send(a, ga);
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, (val(a), 1, k), (g, n, 1), &mut gb, 0.0);
                    send(b, gb);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                if self.rg(a) {
                    let mut ga = vec![0.0; batch * m * k];
                    let vb = val(b);
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            (&g[t * m * n..], n, 1),
                            (&vb[t * k * n..], 1, n),
                            &mut ga[t * m * k..],
                            0.0,
                        );
                    }
                    send(a, ga);
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; batch * k * n];
                    let va = val(a);
                    for t in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            (&va[t * m * k..], 1, k),
                            (&g[t * m * n..], n, 1),
                            &mut gb[t * k * n..],
                            0.0,
                        );
                    }
                    send(b, gb);
                }
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                send(*x, permute_data(g, node.value.shape(), &inverse));
            }
            &Op::Reshape(x) => send(x, g.to_vec()),
            &Op::Softmax { x, view } => {
                let mut gx = vec![0.0; g.len()];
                for o in 0..view.outer {
                    for i in 0..view.inner {
                        let at = |d: usize| (o * view.dim + d) * view.inner + i;
                        let dot: f64 = (0..view.dim).map(|d| g[at(d)] * out[at(d)]).sum();
                        for d in 0..view.dim {
                            gx[at(d)] = out[at(d)] * (g[at(d)] - dot);
                        }
                    }
                }
                send(x, gx);
            }
            Op::LayerNorm {
                x,
                cols,
                xhat,
                inv_std,
            } => {
                let cols = *cols;
                let mut gx = vec![0.0; g.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                    let mean_g = gr.iter().sum::<f64>() / cols as f64;
                    let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for ((o, &gk), &xk) in gx[span].iter_mut().zip(gr).zip(xr) {
                        *o = is * (gk - mean_g - xk * mean_gx);
                    }
                }
                send(*x, gx);
            }
            Op::Concat {
                parts,
                outer,
                dims,
                inner,
            } => {
                let total: usize = dims.iter().sum();
                let mut offset = 0;
                for (&p, &d) in parts.iter().zip(dims) {
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * d * inner);
                        for o in 0..*outer {
                            let from = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[from..from + d * inner]);
                        }
                        send(p, gp);
                    }
                    offset += d;
                }
            }
            &Op::Slice {
                x,
                view,
                start,
                len,
            } => {
                let mut gx = vec![0.0; view.outer * view.dim * view.inner];
                for o in 0..view.outer {
                    let to = (o * view.dim + start) * view.inner;
                    let from = o * len * view.inner;
                    gx[to..to + len * view.inner]
                        .copy_from_slice(&g[from..from + len * view.inner]);
                }
                send(x, gx);
            }
            &Op::Sum(x) => send(x, vec![g[0]; numel(x)]),
            &Op::SumAxis { x, view, scale } => {
                let mut gx = vec![0.0; view.outer * view.dim * view.inner];
                for o in 0..view.outer {
                    for d in 0..view.dim {
                        let base = (o * view.dim + d) * view.inner;
                        for i in 0..view.inner {
                            gx[base + i] = scale * g[o * view.inner + i];
                        }
                    }
                }
                send(x, gx);
            }
            &Op::Im2Col { x, sp } => {
                let Spatial { b, h, w, c } = sp;
                let mut gx = vec![0.0; b * h * w * c];
                for n in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let row = ((n * h + y) * w + xx) * 9 * c;
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let to = ((n * h + sy as usize) * w + sx as usize) * c;
                                    let from = row + (ky * 3 + kx) * c;
                                    for k in 0..c {
                                        gx[to + k] += g[from + k];
                                    }
                                }
                            }
                        }
                    }
                }
                send(x, gx);
            }
            &Op::AvgPool { x, sp } => {
                let Spatial { b, h, w, c } = sp;
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; b * h * w * c];
                for n in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let to = ((n * h + y) * w + xx) * c;
                            let from = ((n * oh + y / 2) * ow + xx / 2) * c;
                            for k in 0..c {
                                gx[to + k] = 0.25 * g[from + k];
                            }
                        }
                    }
                }
                send(x, gx);
            }
            &Op::Upsample { x, sp } => {
                let Spatial { b, h, w, c } = sp;
                let (oh, ow) = (2 * h, 2 * w);
                let mut gx = vec![0.0; b * h * w * c];
                for n in 0..b {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let to = ((n * h + y / 2) * w + xx / 2) * c;
                            let from = ((n * oh + y) * ow + xx) * c;
                            for k in 0..c {
                                gx[to + k] += g[from + k];
                            }
                        }
                    }
                }
                send(x, gx);
            }
            &Op::RepeatRows { x, n, cols } => {
                let rows = numel(x) / cols;
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..n {
                        let from = (r * n + j) * cols;
                        for k in 0..cols {
                            gx[r * cols + k] += g[from + k];
                        }
                    }
                }
                send(x, gx);
            }
            Op::Gather { table, idx, cols } => {
                let cols = *cols;
                let mut gt = vec![0.0; numel(*table)];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..cols {
                        gt[i * cols + k] += g[r * cols + k];
                    }
                }
                send(*table, gt);
            }
        }
    }
}
