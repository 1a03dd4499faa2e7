//! UNet-lite ε-predictor with cross-attention sublayers.
//!
//! Layout: conv_in → [res + cross-attn] at full resolution → 2× pool →
//! [res + cross-attn] → mid res → 2× upsample, skip concat → [res +
//! cross-attn] → norm/silu/conv_out. Latents with a 1×1 spatial extent skip
//! the pooling and upsampling.

use crate::error::{Error, Result};
use crate::modality::ModalitySpec;
use crate::nn;
use crate::params::{ParamGroup, ParamStore, Session};
use crate::tensor::{Tensor, Var};

/// Interleaved sinusoidal embedding: `[sin(tω₀), cos(tω₀), sin(tω₁), …]`
/// with `ω_i = 10000^(−i/(dim/2))`.
pub fn time_embed(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        out[2 * i] = (t as f64 * w).sin();
        out[2 * i + 1] = (t as f64 * w).cos();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub heads: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 4,
            time_dim: 32,
        }
    }
}

/// Context tokens for a batch, `[B*len, E]`, plus the per-sample
/// classifier-free switch.
pub struct Conditioning {
    pub tokens: Option<Var>,
    pub len: usize,
    /// `true` where a sample attends to the null token instead.
    pub use_null: Vec<bool>,
}

impl Conditioning {
    pub fn none(batch: usize) -> Self {
        Self {
            tokens: None,
            len: 0,
            use_null: vec![true; batch],
        }
    }

    pub fn tokens(tokens: Var, len: usize, use_null: Vec<bool>) -> Self {
        Self {
            tokens: Some(tokens),
            len,
            use_null,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub spec: ModalitySpec,
    pub cfg: DenoiserConfig,
}

/// Names of the cross-attention sublayers.
pub const CA_LAYERS: [&str; 3] = ["down0.ca", "down1.ca", "up0.ca"];

impl Denoiser {
    pub fn new(spec: &ModalitySpec, cfg: DenoiserConfig) -> Self {
        Self {
            spec: spec.clone(),
            cfg,
        }
    }

    pub fn prefix(&self) -> String {
        format!("unet.{}", self.spec.name)
    }

    /// Name prefixes of every cross-attention sublayer (`θ_c`).
    pub fn cross_attention_prefixes(&self) -> Vec<String> {
        CA_LAYERS
            .iter()
            .map(|l| format!("{}.{l}.", self.prefix()))
            .collect()
    }

    fn pools(&self) -> bool {
        let [_, h, w] = self.spec.latent_shape;
        h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let p = self.prefix();
        let ch = self.cfg.channels;
        let td = self.cfg.time_dim;
        let temb = 2 * ch;
        let c_in = self.spec.latent_channels();
        let e = self.spec.embed_dim;
        let bb = ParamGroup::Backbone;
        store.init_linear(seed, &format!("{p}.temb0"), td, temb, false, bb)?;
        store.init_linear(seed, &format!("{p}.temb1"), temb, temb, false, bb)?;
        store.init_linear(seed, &format!("{p}.conv_in"), 9 * c_in, ch, false, bb)?;
        for (name, cin) in [("down0.res", ch), ("down1.res", ch), ("mid.res", ch), ("up0.res", 2 * ch)] {
            let r = format!("{p}.{name}");
            store.init_norm(&format!("{r}.norm1"), cin, bb)?;
            store.init_linear(seed, &format!("{r}.conv1"), 9 * cin, ch, false, bb)?;
            store.init_linear(seed, &format!("{r}.temb"), temb, ch, false, bb)?;
            store.init_norm(&format!("{r}.norm2"), ch, bb)?;
            store.init_linear(seed, &format!("{r}.conv2"), 9 * ch, ch, false, bb)?;
            if cin != ch {
                store.init_linear(seed, &format!("{r}.skip"), cin, ch, false, bb)?;
            }
        }
        let ca = ParamGroup::CrossAttention;
        for layer in CA_LAYERS {
            let c = format!("{p}.{layer}");
            store.init_norm(&format!("{c}.norm"), ch, ca)?;
            store.init_linear(seed, &format!("{c}.q"), ch, ch, false, ca)?;
            store.init_linear(seed, &format!("{c}.k"), e, ch, false, ca)?;
            store.init_linear(seed, &format!("{c}.v"), e, ch, false, ca)?;
            store.init_linear(seed, &format!("{c}.out"), ch, ch, true, ca)?;
            store.init_normal(seed, &format!("{c}.null"), &[1, e], 1.0, ca)?;
        }
        store.init_norm(&format!("{p}.out.norm"), ch, bb)?;
        store.init_linear(seed, &format!("{p}.out.conv"), 9 * ch, c_in, true, bb)
    }

    fn res_block(
        &self,
        s: &mut Session,
        x: Var,
        temb: Var,
        name: &str,
        (b, h, w): (usize, usize, usize),
    ) -> Result<Var> {
        let r = format!("{}.{name}", self.prefix());
        let hn = nn::norm(s, x, &format!("{r}.norm1"))?;
        let hn = s.g.silu(hn);
        let y = nn::conv3x3(s, hn, &format!("{r}.conv1"), b, h, w)?;
        let te = s.g.silu(temb);
        let te = nn::linear(s, te, &format!("{r}.temb"))?;
        let te = s.g.repeat_rows(te, h * w)?;
        let y = s.g.add(y, te)?;
        let y = nn::norm(s, y, &format!("{r}.norm2"))?;
        let y = s.g.silu(y);
        let y = nn::conv3x3(s, y, &format!("{r}.conv2"), b, h, w)?;
        let skip_name = format!("{r}.skip.w");
        let skip = if s.store().contains(&skip_name) {
            nn::linear(s, x, &format!("{r}.skip"))?
        } else {
            x
        };
        s.g.add(skip, y)
    }

    fn cross_attention(
        &self,
        s: &mut Session,
        x: Var,
        cond: &Conditioning,
        layer: &str,
        (b, h, w): (usize, usize, usize),
    ) -> Result<Var> {
        let c = format!("{}.{layer}", self.prefix());
        let e = self.spec.embed_dim;
        let heads = self.cfg.heads;
        let xn = nn::norm(s, x, &format!("{c}.norm"))?;
        let q = nn::linear(s, xn, &format!("{c}.q"))?;
        let null = s.p(&format!("{c}.null"))?;
        let null = s.g.repeat_rows(null, b)?;
        let (keys, mask) = match cond.tokens {
            None => (null, None),
            Some(tokens) => {
                let l = cond.len;
                let t = s.g.reshape(tokens, &[b, l, e])?;
                let n = s.g.reshape(null, &[b, 1, e])?;
                let kv = s.g.concat(&[t, n], 1)?;
                let kv = s.g.reshape(kv, &[b * (l + 1), e])?;
                let nq = h * w;
                let mut m = vec![0.0; b * heads * nq * (l + 1)];
                for (bi, &use_null) in cond.use_null.iter().enumerate() {
                    for hd in 0..heads {
                        for qi in 0..nq {
                            let row = ((bi * heads + hd) * nq + qi) * (l + 1);
                            if use_null {
                                m[row..row + l].fill(nn::MASKED);
                            } else {
                                m[row + l] = nn::MASKED;
                            }
                        }
                    }
                }
                (kv, Some(Tensor::new(vec![b * heads, nq, l + 1], m)?))
            }
        };
        let k = nn::linear(s, keys, &format!("{c}.k"))?;
        let v = nn::linear(s, keys, &format!("{c}.v"))?;
        let a = nn::attention(s.g, q, k, v, b, heads, mask)?;
        let o = nn::linear(s, a, &format!("{c}.out"))?;
        s.g.add(x, o)
    }

    /// ε̂ for `z_t` given as token rows `[B*H*W, C]`; one timestep per
    /// sample.
    pub fn predict_eps(&self, s: &mut Session, z_t: Var, t: &[usize], cond: &Conditioning) -> Result<Var> {
        let b = t.len();
        let [c_in, h, w] = self.spec.latent_shape;
        let zs = s.g.shape(z_t).to_vec();
        if b == 0 || zs != [b * h * w, c_in] {
            return Err(Error::shape("predict_eps", &zs, &[b * h * w, c_in]));
        }
        if cond.use_null.len() != b {
            return Err(Error::shape("predict_eps", &[cond.use_null.len()], &[b]));
        }
        if let Some(tok) = cond.tokens {
            let ts = s.g.shape(tok).to_vec();
            if ts != [b * cond.len, self.spec.embed_dim] {
                return Err(Error::shape("predict_eps context", &ts, &[b * cond.len, self.spec.embed_dim]));
            }
        }
        let p = self.prefix();
        let td = self.cfg.time_dim;
        let te: Vec<f64> = t.iter().flat_map(|&ti| time_embed(ti, td)).collect();
        let te = s.constant(Tensor::new(vec![b, td], te)?);
        let te = nn::linear(s, te, &format!("{p}.temb0"))?;
        let te = s.g.silu(te);
        let temb = nn::linear(s, te, &format!("{p}.temb1"))?;

        let full = (b, h, w);
        let x = nn::conv3x3(s, z_t, &format!("{p}.conv_in"), b, h, w)?;
        let h0 = self.res_block(s, x, temb, "down0.res", full)?;
        let h0 = self.cross_attention(s, h0, cond, "down0.ca", full)?;
        let (low, pooled) = if self.pools() {
            ((b, h / 2, w / 2), s.g.avg_pool2(h0, b, h, w)?)
        } else {
            (full, h0)
        };
        let h1 = self.res_block(s, pooled, temb, "down1.res", low)?;
        let h1 = self.cross_attention(s, h1, cond, "down1.ca", low)?;
        let m = self.res_block(s, h1, temb, "mid.res", low)?;
        let u = if self.pools() {
            s.g.upsample2(m, b, low.1, low.2)?
        } else {
            m
        };
        let u = s.g.concat(&[u, h0], 1)?;
        let u = self.res_block(s, u, temb, "up0.res", full)?;
        let u = self.cross_attention(s, u, cond, "up0.ca", full)?;
        let o = nn::norm(s, u, &format!("{p}.out.norm"))?;
        let o = s.g.silu(o);
        nn::conv3x3(s, o, &format!("{p}.out.conv"), b, h, w)
    }
}
