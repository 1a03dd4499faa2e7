//! Layer building blocks shared by the encoders and the denoiser.
//!
//! Spatial activations are stored as `[B*H*W, C]` rows in NHWC order.

use crate::error::Result;
use crate::params::Session;
use crate::tensor::{Graph, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Additive mask value for disabled attention keys.
pub const MASKED: f64 = -1e9;

/// `x @ W + b` with parameters `prefix.w`, `prefix.b`.
pub fn linear(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let w = s.p(&format!("{prefix}.w"))?;
    let b = s.p(&format!("{prefix}.b"))?;
    let y = s.g.matmul(x, w)?;
    s.g.add(y, b)
}

/// Layer norm over the last axis with affine `prefix.g`, `prefix.b`.
pub fn norm(s: &mut Session, x: Var, prefix: &str) -> Result<Var> {
    let gamma = s.p(&format!("{prefix}.g"))?;
    let beta = s.p(&format!("{prefix}.b"))?;
    let n = s.g.layer_norm(x, NORM_EPS);
    let y = s.g.mul(n, gamma)?;
    s.g.add(y, beta)
}

/// Same-padded 3×3 convolution; weight `prefix.w` is `[9*C_in, C_out]`.
pub fn conv3x3(s: &mut Session, x: Var, prefix: &str, b: usize, h: usize, w: usize) -> Result<Var> {
    let cols = s.g.im2col3x3(x, b, h, w)?;
    linear(s, cols, prefix)
}

/// Row-wise L2 normalization of a `[N, d]` tensor.
pub fn l2_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.square(x);
    let ss = g.sum_axis(sq, 1)?;
    let eps = g.constant(Tensor::scalar(1e-12));
    let ss = g.add(ss, eps)?;
    let n = g.sqrt(ss)?;
    g.div(x, n)
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `[B*Nq, D]`, `k` and `v` are `[B*Nk, D]`. `mask`, when given, is
/// an additive `[B*heads, Nq, Nk]` tensor.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    heads: usize,
    mask: Option<Tensor>,
) -> Result<Var> {
    let d = g.shape(q)[1];
    let nq = g.shape(q)[0] / batch;
    let nk = g.shape(k)[0] / batch;
    let dh = d / heads;
    let split = |g: &mut Graph, x: Var, n: usize| -> Result<Var> {
        let x = g.reshape(x, &[batch, n, heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[batch * heads, n, dh])
    };
    let qh = split(g, q, nq)?;
    let kh = split(g, k, nk)?;
    let vh = split(g, v, nk)?;
    let kt = g.permute(kh, &[0, 2, 1])?;
    let scores = g.bmm(qh, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        let m = g.constant(m);
        scores = g.add(scores, m)?;
    }
    let attn = g.softmax(scores, 2)?;
    let out = g.bmm(attn, vh)?;
    let out = g.reshape(out, &[batch, heads, nq, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    g.reshape(out, &[batch * nq, d])
}
