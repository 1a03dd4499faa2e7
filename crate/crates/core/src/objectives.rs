//! Training objectives: ε-prediction loss, symmetric InfoNCE for central
//! alignment, the Barlow-style visual-invariant loss, and the cross-guided
//! loss.

use crate::denoiser::{Conditioning, Denoiser};
use crate::encoders::ContextEncoder;
use crate::error::{Error, Result};
use crate::params::Session;
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_TAU: f64 = 0.07;
pub const TAU_RANGE: (f64, f64) = (0.01, 0.5);
pub const DEFAULT_LAMBDA1: f64 = 5e-3;
pub const VI_VARIANCE_FLOOR: f64 = 1e-8;

/// Mean squared error between a prediction and a fixed target.
pub fn eps_mse(g: &mut Graph, eps_hat: Var, eps: &Tensor) -> Result<Var> {
    if g.shape(eps_hat) != eps.shape() {
        return Err(Error::shape("eps_mse", g.shape(eps_hat), eps.shape()));
    }
    let target = g.constant(eps.clone());
    let d = g.sub(eps_hat, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Noises each sample's rows of `z0` (`[B*n, C]`) to its own timestep.
pub fn noise_rows(z0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape("noise_rows", z0.shape(), eps.shape()));
    }
    let per = z0.numel() / t.len().max(1);
    let mut out = Vec::with_capacity(z0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let span = i * per..(i + 1) * per;
        let a = Tensor::new(vec![per], z0.data()[span.clone()].to_vec())?;
        let e = Tensor::new(vec![per], eps.data()[span].to_vec())?;
        out.extend(forward_diffuse(&a, ti, &e, schedule)?.into_data());
    }
    Tensor::new(z0.shape().to_vec(), out)
}

/// Per-sample choice between two stacked row tensors: rows of sample `i`
/// come from `b` where `take_b[i]`, else from `a`.
pub fn select_rows(a: &Tensor, b: &Tensor, take_b: &[bool]) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("select_rows", a.shape(), b.shape()));
    }
    let per = a.numel() / take_b.len().max(1);
    let data = (0..a.numel())
        .map(|i| if take_b[i / per] { b.data()[i] } else { a.data()[i] })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `mean (ε − ε̂(z_t, t, context))²` with `z_t` diffused from `z0`.
pub fn diffusion_loss(
    s: &mut Session,
    model: &Denoiser,
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    cond: &Conditioning,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let zt = noise_rows(z0, t, eps, schedule)?;
    let zt = s.constant(zt);
    let eps_hat = model.predict_eps(s, zt, t, cond)?;
    eps_mse(s.g, eps_hat, eps)
}

/// Inputs of the cross-guided loss for one direction `B → A`.
pub struct CrossGuide<'a> {
    pub context: &'a ContextEncoder,
    /// Partner's noisy latent rows `z_t^B`, `[B*n_B, C_B]`.
    pub partner_zt: &'a Tensor,
    /// Parameter name of `f_B`.
    pub adaptation: &'a str,
    /// Per-sample classifier-free dropout.
    pub use_null: Vec<bool>,
}

/// Context tokens `V_B([z_t^B, f_B])` as a [`Conditioning`].
pub fn encode_context(s: &mut Session, guide: &CrossGuide, batch: usize) -> Result<Conditioning> {
    let z = s.constant(guide.partner_zt.clone());
    let f = s.p(guide.adaptation)?;
    let len = guide.context.latent_tokens + s.g.shape(f)[0];
    let tokens = guide.context.forward(s, z, f, batch)?;
    Ok(Conditioning::tokens(tokens, len, guide.use_null.clone()))
}

/// `‖ε − ε_θc(z_t^A, t, V_B([z_t^B, f_B]))‖²`, averaged over elements.
pub fn cross_guided_loss(
    s: &mut Session,
    model: &Denoiser,
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    guide: &CrossGuide,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let cond = encode_context(s, guide, t.len())?;
    diffusion_loss(s, model, z0, t, eps, &cond, schedule)
}

fn row_logsumexp(g: &mut Graph, logits: Var) -> Result<Var> {
    // The row max is a constant shift: it cancels in the gradient.
    let shape = g.shape(logits).to_vec();
    let (n, m) = (shape[0], shape[1]);
    let vals = g.value(logits).data();
    let maxes: Vec<f64> = (0..n)
        .map(|r| vals[r * m..(r + 1) * m].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mx = g.constant(Tensor::new(vec![n, 1], maxes)?);
    let shifted = g.sub(logits, mx)?;
    let e = g.exp(shifted);
    let se = g.sum_axis(e, 1)?;
    let lse = g.log(se)?;
    g.add(lse, mx)
}

/// One direction of InfoNCE: mean over anchors of
/// `−log softmax_j(logits_ij)` at `j = i`.
fn infonce_direction(g: &mut Graph, logits: Var) -> Result<Var> {
    let n = g.shape(logits)[0];
    let eye = g.constant(Tensor::eye(n));
    let diag = g.mul(logits, eye)?;
    let pos = g.sum_axis(diag, 1)?;
    let lse = row_logsumexp(g, logits)?;
    let per = g.sub(lse, pos)?;
    Ok(g.mean(per))
}

/// Symmetric InfoNCE `L_{A,B} + L_{B,A}` over matched unit rows; `tau` is
/// a scalar node so it can be learned.
pub fn infonce_central(g: &mut Graph, za: Var, zb: Var, tau: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(za).to_vec(), g.shape(zb).to_vec());
    if sa.len() != 2 || sa != sb || sa[0] == 0 {
        return Err(Error::shape("infonce_central", &sa, &sb));
    }
    let t = g.value(tau).item();
    if !(t > 0.0) {
        return Err(Error::Param(format!("temperature must be positive, got {t}")));
    }
    let zbt = g.transpose(zb)?;
    let sim = g.matmul(za, zbt)?;
    let logits = g.div(sim, tau)?;
    let ab = infonce_direction(g, logits)?;
    let logits_t = g.transpose(logits)?;
    let ba = infonce_direction(g, logits_t)?;
    g.add(ab, ba)
}

/// Convenience wrapper for fixed embeddings and temperature.
pub fn infonce_value(za: &Tensor, zb: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(za.clone());
    let b = g.constant(zb.clone());
    let t = g.constant(Tensor::scalar(tau));
    let l = infonce_central(&mut g, a, b, t)?;
    Ok(g.value(l).item())
}

pub struct ViNormalized {
    pub z: Var,
    /// Columns whose batch variance fell under the floor.
    pub floored_columns: usize,
}

/// Centers each feature column over the batch and scales it to unit L2
/// norm (std `1/√K`). Columns with variance under `1e-8` use the floor.
pub fn vi_normalize(g: &mut Graph, z: Var) -> Result<ViNormalized> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::shape("vi_normalize", &shape, &[2, 0]));
    }
    let k = shape[0] as f64;
    let mean = g.mean_axis(z, 0)?;
    let c = g.sub(z, mean)?;
    let sq = g.square(c);
    let ss = g.sum_axis(sq, 0)?;
    let floor = VI_VARIANCE_FLOOR * k;
    let lift: Vec<f64> = g.value(ss).data().iter().map(|&v| (floor - v).max(0.0)).collect();
    let floored_columns = lift.iter().filter(|&&v| v > 0.0).count();
    let lift = g.constant(Tensor::new(vec![1, shape[1]], lift)?);
    let ss = g.add(ss, lift)?;
    let n = g.sqrt(ss)?;
    let z = g.div(c, n)?;
    Ok(ViNormalized { z, floored_columns })
}

/// `mean_i (1 − C_ii)² + λ₁ · mean_{i≠j} C_ij²` for a `d×d` correlation.
pub fn barlow_from_correlation(g: &mut Graph, c: Var, lambda1: f64) -> Result<Var> {
    let shape = g.shape(c).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape("barlow", &shape, &[shape[0], shape[0]]));
    }
    let d = shape[0];
    let eye = g.constant(Tensor::eye(d));
    let diag = g.mul(c, eye)?;
    let on = g.sub(diag, eye)?;
    let on = g.square(on);
    let on = g.sum(on);
    let on = g.scale(on, 1.0 / d as f64);
    if d < 2 {
        return Ok(on);
    }
    let off_mask = g.constant(Tensor::from_fn(&[d, d], |i| if i / d == i % d { 0.0 } else { 1.0 }));
    let off = g.mul(c, off_mask)?;
    let off = g.square(off);
    let off = g.sum(off);
    let off = g.scale(off, lambda1 / (d * (d - 1)) as f64);
    g.add(on, off)
}

/// Visual-invariant loss on two views `[K, d]` of the same batch.
pub fn vi_barlow(g: &mut Graph, z1: Var, z2: Var, lambda1: f64) -> Result<Var> {
    if g.shape(z1) != g.shape(z2) {
        return Err(Error::shape("vi_barlow", g.shape(z1), g.shape(z2)));
    }
    let a = vi_normalize(g, z1)?.z;
    let b = vi_normalize(g, z2)?.z;
    let at = g.transpose(a)?;
    let c = g.matmul(at, b)?;
    barlow_from_correlation(g, c, lambda1)
}
