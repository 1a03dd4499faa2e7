//! Prompt encoders `C_M`, context encoders `V_M`, and guided adaptation
//! tokens `f_B = F_emb(φ_s(z_B))`.

use crate::data::{token_id, vocabulary, Sample, IMAGE_SIZE, MAX_TEXT_TOKENS};
use crate::error::{Error, Result};
use crate::modality::{ModalityKind, ModalitySpec};
use crate::nn;
use crate::params::{ParamGroup, ParamStore, Session, Trainable};
use crate::tensor::{Graph, Tensor, Var};

const CONV1: usize = 8;
const CONV2: usize = 16;
const HIDDEN: usize = 64;

/// Encoder output for a batch: pre-normalization features and their
/// unit-norm version.
pub struct Embedded {
    pub raw: Var,
    pub unit: Var,
}

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub modality: String,
    pub kind: ModalityKind,
    pub embed_dim: usize,
}

impl PromptEncoder {
    pub fn new(spec: &ModalitySpec) -> Self {
        Self {
            modality: spec.name.clone(),
            kind: spec.kind,
            embed_dim: spec.embed_dim,
        }
    }

    pub fn prefix(&self) -> String {
        format!("enc.{}", self.modality)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let p = self.prefix();
        let g = ParamGroup::Encoder;
        let d = self.embed_dim;
        match self.kind {
            ModalityKind::Image => {
                let flat = (IMAGE_SIZE / 4) * (IMAGE_SIZE / 4) * CONV2;
                store.init_linear(seed, &format!("{p}.conv1"), 9, CONV1, false, g)?;
                store.init_linear(seed, &format!("{p}.conv2"), 9 * CONV1, CONV2, false, g)?;
                store.init_linear(seed, &format!("{p}.fc1"), flat, HIDDEN, false, g)?;
                store.init_linear(seed, &format!("{p}.fc2"), HIDDEN, d, false, g)?;
            }
            ModalityKind::Text => {
                let v = vocabulary().len();
                store.init_normal(seed, &format!("{p}.tok"), &[v, d], 1.0, g)?;
                store.init_normal(seed, &format!("{p}.pos"), &[MAX_TEXT_TOKENS, d], 0.1, g)?;
                store.init_linear(seed, &format!("{p}.fc1"), d, HIDDEN, false, g)?;
                store.init_linear(seed, &format!("{p}.fc2"), HIDDEN, d, false, g)?;
            }
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session, batch: &[&Sample]) -> Result<Embedded> {
        if batch.is_empty() {
            return Err(Error::Param("empty encoder batch".into()));
        }
        let p = self.prefix();
        let pooled = match self.kind {
            ModalityKind::Image => self.image_trunk(s, batch, &p)?,
            ModalityKind::Text => self.text_trunk(s, batch, &p)?,
        };
        let h = nn::linear(s, pooled, &format!("{p}.fc1"))?;
        let h = s.g.silu(h);
        let raw = nn::linear(s, h, &format!("{p}.fc2"))?;
        let unit = nn::l2_normalize(s.g, raw)?;
        Ok(Embedded { raw, unit })
    }

    fn image_trunk(&self, s: &mut Session, batch: &[&Sample], p: &str) -> Result<Var> {
        let n = IMAGE_SIZE;
        let mut pixels = Vec::with_capacity(batch.len() * n * n);
        for x in batch {
            let img = x
                .image()
                .ok_or_else(|| Error::Param(format!("{} encoder given text", self.modality)))?;
            if img.shape() != [1, n, n] {
                return Err(Error::shape("encode_prompt", img.shape(), &[1, n, n]));
            }
            pixels.extend_from_slice(img.data());
        }
        let b = batch.len();
        let x = s.constant(Tensor::new(vec![b * n * n, 1], pixels)?);
        let h = nn::conv3x3(s, x, &format!("{p}.conv1"), b, n, n)?;
        let h = s.g.silu(h);
        let h = s.g.avg_pool2(h, b, n, n)?;
        let h = nn::conv3x3(s, h, &format!("{p}.conv2"), b, n / 2, n / 2)?;
        let h = s.g.silu(h);
        let h = s.g.avg_pool2(h, b, n / 2, n / 2)?;
        s.g.reshape(h, &[b, (n / 4) * (n / 4) * CONV2])
    }

    fn text_trunk(&self, s: &mut Session, batch: &[&Sample], p: &str) -> Result<Var> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lens = Vec::with_capacity(batch.len());
        for x in batch {
            let tokens = x
                .tokens()
                .ok_or_else(|| Error::Param(format!("{} encoder given an image", self.modality)))?;
            if tokens.is_empty() || tokens.len() > MAX_TEXT_TOKENS {
                return Err(Error::shape("encode_prompt", &[tokens.len()], &[MAX_TEXT_TOKENS]));
            }
            for (i, t) in tokens.iter().enumerate() {
                ids.push(token_id(t).ok_or_else(|| Error::Format(format!("unknown token `{t}`")))?);
                positions.push(i);
            }
            lens.push(tokens.len());
        }
        let tok = s.p(&format!("{p}.tok"))?;
        let pos = s.p(&format!("{p}.pos"))?;
        let te = s.g.gather_rows(tok, &ids)?;
        let pe = s.g.gather_rows(pos, &positions)?;
        let e = s.g.add(te, pe)?;
        // Mean over each sample's tokens as a constant pooling matrix.
        let total = ids.len();
        let mut pool = vec![0.0; batch.len() * total];
        let mut offset = 0;
        for (r, &len) in lens.iter().enumerate() {
            for k in offset..offset + len {
                pool[r * total + k] = 1.0 / len as f64;
            }
            offset += len;
        }
        let pool = s.constant(Tensor::new(vec![batch.len(), total], pool)?);
        s.g.matmul(pool, e)
    }
}

/// Unit-norm embedding of one sample.
pub fn encode_prompt(store: &ParamStore, enc: &PromptEncoder, x: &Sample) -> Result<Tensor> {
    let mut out = encode_batch(store, enc, &[x])?;
    let d = out.numel();
    out = out.reshape(&[d])?;
    Ok(out)
}

/// Unit-norm embeddings `[N, d]` of a batch, without gradients.
pub fn encode_batch(store: &ParamStore, enc: &PromptEncoder, xs: &[&Sample]) -> Result<Tensor> {
    let mut g = Graph::new();
    let frozen = Trainable::Nothing;
    let mut s = Session::new(&mut g, store, &frozen);
    let e = enc.forward(&mut s, xs)?;
    Ok(g.value(e.unit).clone())
}

/// `V_M`: projects a partner's noisy latent tokens into the shared width,
/// appends the adaptation tokens, and mixes them with one pre-norm
/// self-attention block whose output projection starts at zero.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub modality: String,
    pub latent_channels: usize,
    pub latent_tokens: usize,
    pub embed_dim: usize,
    pub heads: usize,
}

impl ContextEncoder {
    pub fn new(spec: &ModalitySpec, heads: usize) -> Self {
        Self {
            modality: spec.name.clone(),
            latent_channels: spec.latent_channels(),
            latent_tokens: spec.latent_tokens(),
            embed_dim: spec.embed_dim,
            heads,
        }
    }

    pub fn prefix(&self) -> String {
        format!("ctx.{}", self.modality)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let p = self.prefix();
        let g = ParamGroup::ContextEncoder;
        let e = self.embed_dim;
        store.init_linear(seed, &format!("{p}.in"), self.latent_channels, e, false, g)?;
        store.init_normal(seed, &format!("{p}.pos"), &[self.latent_tokens, e], 0.1, g)?;
        store.init_norm(&format!("{p}.norm"), e, g)?;
        for m in ["q", "k", "v"] {
            store.init_linear(seed, &format!("{p}.{m}"), e, e, false, g)?;
        }
        store.init_linear(seed, &format!("{p}.out"), e, e, true, g)
    }

    /// Projected concatenation `[proj(z_t) + pos, f]` before the attention
    /// block, `[B*(n+L), E]`.
    pub fn concat_input(
        &self,
        s: &mut Session,
        z_rows: Var,
        adaptation: Var,
        batch: usize,
    ) -> Result<Var> {
        let p = self.prefix();
        let zs = s.g.shape(z_rows).to_vec();
        if zs != [batch * self.latent_tokens, self.latent_channels] {
            return Err(Error::shape(
                "encode_context",
                &zs,
                &[batch * self.latent_tokens, self.latent_channels],
            ));
        }
        let fs = s.g.shape(adaptation).to_vec();
        if fs.len() != 2 || fs[1] != self.embed_dim {
            return Err(Error::shape("encode_context", &fs, &[0, self.embed_dim]));
        }
        let (n, l, e) = (self.latent_tokens, fs[0], self.embed_dim);
        let h = nn::linear(s, z_rows, &format!("{p}.in"))?;
        let h = s.g.reshape(h, &[batch, n * e])?;
        let pos = s.p(&format!("{p}.pos"))?;
        let pos = s.g.reshape(pos, &[n * e])?;
        let h = s.g.add(h, pos)?;
        let h = s.g.reshape(h, &[batch, n, e])?;
        let f = s.g.reshape(adaptation, &[1, l * e])?;
        let f = s.g.repeat_rows(f, batch)?;
        let f = s.g.reshape(f, &[batch, l, e])?;
        let cat = s.g.concat(&[h, f], 1)?;
        s.g.reshape(cat, &[batch * (n + l), e])
    }

    /// `V([z_t, f])` as `[B*(n+L), E]` token rows.
    pub fn forward(&self, s: &mut Session, z_rows: Var, adaptation: Var, batch: usize) -> Result<Var> {
        let p = self.prefix();
        let x = self.concat_input(s, z_rows, adaptation, batch)?;
        let h = nn::norm(s, x, &format!("{p}.norm"))?;
        let q = nn::linear(s, h, &format!("{p}.q"))?;
        let k = nn::linear(s, h, &format!("{p}.k"))?;
        let v = nn::linear(s, h, &format!("{p}.v"))?;
        let a = nn::attention(s.g, q, k, v, batch, self.heads, None)?;
        let o = nn::linear(s, a, &format!("{p}.out"))?;
        s.g.add(x, o)
    }
}

/// `φ_s`: deterministic strided mean pooling of `[n, w]` tokens to
/// `[out_len, w]`. Windows never come out empty; when `n < out_len`
/// tokens are repeated.
pub fn strided_mean_pool(tokens: &Tensor, out_len: usize) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 2 || out_len == 0 {
        return Err(Error::shape("strided_mean_pool", s, &[out_len]));
    }
    let (n, w) = (s[0], s[1]);
    let mut out = vec![0.0; out_len * w];
    for j in 0..out_len {
        let start = j * n / out_len;
        let end = ((j + 1) * n / out_len).max(start + 1);
        for r in start..end {
            for (o, v) in out[j * w..(j + 1) * w].iter_mut().zip(tokens.row(r)) {
                *o += v;
            }
        }
        let k = (end - start) as f64;
        out[j * w..(j + 1) * w].iter_mut().for_each(|o| *o /= k);
    }
    Tensor::new(vec![out_len, w], out)
}

pub fn femb_prefix(modality: &str) -> String {
    format!("femb.{modality}")
}

pub fn register_femb(store: &mut ParamStore, spec: &ModalitySpec, seed: u64) -> Result<()> {
    store.init_linear(
        seed,
        &femb_prefix(&spec.name),
        spec.latent_channels(),
        spec.embed_dim,
        false,
        ParamGroup::Embedding,
    )
}

/// Parameter name of the adaptation that lets `partner` guide `target`.
pub fn adaptation_name(partner: &str, target: &str) -> String {
    format!("adapt.{partner}.{target}")
}

/// `f_B = F_emb(φ_s(z_B))` sized to the receiving modality's context.
///
/// `z_b` is modality B's latent as `[tokens, channels]`. The result is a
/// fresh tensor that shares no storage with `z_b`.
pub fn build_adaptation(
    store: &ParamStore,
    z_b: &Tensor,
    partner: &ModalitySpec,
    target: &ModalitySpec,
) -> Result<Tensor> {
    if target.context_len == 0 {
        return Err(Error::Param(format!("`{}` has no context tokens", target.name)));
    }
    let pooled = strided_mean_pool(z_b, target.context_len)?;
    let prefix = femb_prefix(&partner.name);
    let mut g = Graph::new();
    let frozen = Trainable::Nothing;
    let mut s = Session::new(&mut g, store, &frozen);
    let x = s.constant(pooled);
    let y = nn::linear(&mut s, x, &prefix)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_modality, Scene};
    use crate::modality::Registry;

    fn setup() -> (Registry, ParamStore) {
        let reg = Registry::standard(64, 4);
        let mut store = ParamStore::new();
        for spec in reg.specs() {
            PromptEncoder::new(spec).register(&mut store, 5).unwrap();
            ContextEncoder::new(spec, 4).register(&mut store, 5).unwrap();
            register_femb(&mut store, spec, 5).unwrap();
        }
        (reg, store)
    }

    #[test]
    fn prompt_embeddings_are_unit_and_deterministic() {
        let (reg, store) = setup();
        let scene = Scene::from_seed(9);
        for spec in reg.specs() {
            let enc = PromptEncoder::new(spec);
            let x = render_modality(&scene, &spec.name).unwrap();
            let a = encode_prompt(&store, &enc, &x).unwrap();
            let b = encode_prompt(&store, &enc, &x).unwrap();
            assert_eq!(a.shape(), &[64]);
            assert!((a.norm() - 1.0).abs() < 1e-6);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn wrong_sample_kind_is_rejected() {
        let (reg, store) = setup();
        let scene = Scene::from_seed(1);
        let text = render_modality(&scene, "text").unwrap();
        let enc = PromptEncoder::new(reg.get("xray").unwrap());
        assert!(encode_prompt(&store, &enc, &text).is_err());
        let small = Sample::Image(Tensor::zeros(&[1, 8, 8]));
        assert!(encode_prompt(&store, &enc, &small).is_err());
    }

    #[test]
    fn adaptation_shapes_and_pooling() {
        let (reg, store) = setup();
        let xray = reg.get("xray").unwrap();
        let text = reg.get("text").unwrap();
        let z = Tensor::full(&[64, 4], 0.3);
        let f = build_adaptation(&store, &z, xray, text).unwrap();
        assert_eq!(f.shape(), &[4, 64]);
        for r in 1..4 {
            assert_eq!(f.row(r), f.row(0));
        }
        let mut bad = text.clone();
        bad.context_len = 0;
        assert!(build_adaptation(&store, &z, xray, &bad).is_err());
    }

    #[test]
    fn strided_pool_windows() {
        let t = Tensor::from_fn(&[8, 1], |i| i as f64);
        let p = strided_mean_pool(&t, 4).unwrap();
        assert_eq!(p.data(), &[0.5, 2.5, 4.5, 6.5]);
        let one = Tensor::from_fn(&[1, 2], |i| i as f64 + 1.0);
        let p = strided_mean_pool(&one, 3).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn context_length_and_identity_at_init() {
        let (reg, store) = setup();
        let spec = reg.get("text").unwrap();
        let v = ContextEncoder::new(spec, 4);
        let mut g = Graph::new();
        let t = Trainable::Nothing;
        let mut s = Session::new(&mut g, &store, &t);
        let z = s.constant(Tensor::from_fn(&[2, 64], |i| (i as f64 * 0.1).sin()));
        let f = s.constant(Tensor::from_fn(&[4, 64], |i| (i as f64 * 0.2).cos()));
        let cat = v.concat_input(&mut s, z, f, 2).unwrap();
        let out = v.forward(&mut s, z, f, 2).unwrap();
        assert_eq!(s.g.shape(out), &[2 * (1 + 4), 64]);
        assert_eq!(s.g.value(out), s.g.value(cat));
    }
}
