//! DDPM and DDIM stepping, classifier-free guidance, and single and joint
//! multi-modal sampling.

use std::collections::BTreeMap;

use crate::data::Sample;
use crate::denoiser::{Conditioning, Denoiser};
use crate::encoders::adaptation_name;
use crate::error::{Error, Result};
use crate::modality::{codec_for, rows_to_latent, ModalitySpec};
use crate::params::{Session, Trainable};
use crate::rng::{self, name_id};
use crate::schedule::{forward_diffuse, posterior_mean, NoiseSchedule};
use crate::system::System;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            eta: 1.0,
            guidance_scale: 2.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::Config(format!("guidance scale {} is negative", self.guidance_scale)));
        }
        Ok(())
    }
}

/// `eps_uncond + s·(eps_cond − eps_uncond)`; `s = 1` and `s = 0` return
/// their branch exactly.
pub fn cfg_eps(eps_cond: &Tensor, eps_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::shape("cfg_eps", eps_cond.shape(), eps_uncond.shape()));
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    if s == 0.0 {
        return Ok(eps_uncond.clone());
    }
    eps_cond.zip_map(eps_uncond, |c, u| u + s * (c - u))
}

/// Generalized DDIM update from `t` to `t_prev` (`t_prev = 0` means the
/// clean sample). Noise is required whenever `σ > 0`.
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    eta: f64,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::Step(format!("ddim step must go backwards, got {t} -> {t_prev}")));
    }
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::shape("ddim_step", z_t.shape(), eps_hat.shape()));
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar_or_one(t_prev)?;
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let (sa, s1a, sp) = (ab.sqrt(), (1.0 - ab).sqrt(), ab_prev.sqrt());
    let mut out = z_t.zip_map(eps_hat, |z, e| {
        let z0 = (z - s1a * e) / sa;
        sp * z0 + dir * e
    })?;
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| Error::Step(format!("eta > 0 needs noise at t = {t}")))?;
        if n.shape() != z_t.shape() {
            return Err(Error::shape("ddim_step noise", n.shape(), z_t.shape()));
        }
        out = out.zip_map(n, |x, e| x + sigma * e)?;
    }
    Ok(out)
}

/// Ancestral step `t → t−1` with variance `β_t`; the last step is the
/// mean only.
pub fn ddpm_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let mean = posterior_mean(z_t, eps_hat, t, schedule)?;
    if t == 1 {
        return Ok(mean);
    }
    let n = noise.ok_or_else(|| Error::Step(format!("ddpm step at t = {t} needs noise")))?;
    if n.shape() != z_t.shape() {
        return Err(Error::shape("ddpm_step noise", n.shape(), z_t.shape()));
    }
    let sd = schedule.beta(t)?.sqrt();
    mean.zip_map(n, |m, e| m + sd * e)
}

/// Descending timesteps: a uniform stride over `[1, T]` that always
/// includes `T` and `1`.
pub fn timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, t_max);
    if steps == 1 {
        return vec![t_max];
    }
    let mut out: Vec<usize> = (0..steps)
        .map(|i| {
            let f = (t_max - 1) as f64 * i as f64 / (steps - 1) as f64;
            t_max - f.round() as usize
        })
        .collect();
    out.dedup();
    out
}

/// A clean partner latent that conditions another modality.
#[derive(Clone, Debug)]
pub struct PartnerLatent {
    pub modality: String,
    /// Stacked token rows `[B*n, C]`.
    pub rows: Tensor,
}

struct Edge<'a> {
    partner: &'a str,
    adaptation: String,
}

/// Context tokens for `target` from each partner's current rows.
fn context_tokens(
    sys: &System,
    s: &mut Session,
    edges: &[Edge],
    partners: &BTreeMap<&str, Tensor>,
    batch: usize,
) -> Result<Option<(Var, usize)>> {
    let mut parts = Vec::new();
    let mut len = 0;
    for e in edges {
        let v = sys.context(e.partner)?;
        let z = s.constant(partners[e.partner].clone());
        let f = s.p(&e.adaptation)?;
        let l = v.latent_tokens + s.g.shape(f)[0];
        let tok = v.forward(s, z, f, batch)?;
        parts.push(s.g.reshape(tok, &[batch, l, v.embed_dim])?);
        len += l;
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let e = sys.registry.embed_dim();
    let cat = if parts.len() == 1 { parts[0] } else { s.g.concat(&parts, 1)? };
    Ok(Some((s.g.reshape(cat, &[batch * len, e])?, len)))
}

/// Guided ε̂ at one step.
fn guided_eps(
    sys: &System,
    model: &Denoiser,
    z: &Tensor,
    t: usize,
    edges: &[Edge],
    partners: &BTreeMap<&str, Tensor>,
    batch: usize,
    scale: f64,
) -> Result<Tensor> {
    let frozen = Trainable::Nothing;
    let eval = |cond: bool| -> Result<Tensor> {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &sys.store, &frozen);
        let zt = s.constant(z.clone());
        let c = match context_tokens(sys, &mut s, edges, partners, batch)? {
            Some((tok, len)) if cond => Conditioning::tokens(tok, len, vec![false; batch]),
            _ => Conditioning::none(batch),
        };
        let out = model.predict_eps(&mut s, zt, &vec![t; batch], &c)?;
        Ok(g.value(out).clone())
    };
    if edges.is_empty() || scale == 0.0 {
        return eval(false);
    }
    let cond = eval(true)?;
    if scale == 1.0 {
        return Ok(cond);
    }
    cfg_eps(&cond, &eval(false)?, scale)
}

fn flow_noise(cfg: &SamplerConfig, modality: &str, step: u64, shape: &[usize]) -> Tensor {
    rng::normal(&mut rng::keyed(cfg.seed, name_id(modality), step), shape)
}

/// Runs all flows over one shared timestep grid. `edges` lists
/// `(partner, target)` conditioning links between flows; `fixed` holds
/// clean partners that are not sampled but diffused alongside.
fn run_flows(
    sys: &System,
    flows: &[&str],
    edges: &[(String, String)],
    fixed: &[PartnerLatent],
    batch: usize,
    cfg: &SamplerConfig,
) -> Result<BTreeMap<String, Tensor>> {
    cfg.validate()?;
    if batch == 0 {
        return Err(Error::Config("batch must be at least 1".into()));
    }
    let specs: Vec<&ModalitySpec> = flows.iter().map(|m| sys.registry.get(m)).collect::<Result<_>>()?;
    let models: Vec<Denoiser> = flows.iter().map(|m| sys.denoiser(m)).collect::<Result<_>>()?;
    let mut z: BTreeMap<&str, Tensor> = BTreeMap::new();
    for (m, spec) in flows.iter().zip(&specs) {
        let shape = [batch * spec.latent_tokens(), spec.latent_channels()];
        z.insert(m, flow_noise(cfg, m, 0, &shape));
    }
    let mut fixed_noise = BTreeMap::new();
    for p in fixed {
        let spec = sys.registry.get(&p.modality)?;
        if p.rows.shape() != [batch * spec.latent_tokens(), spec.latent_channels()] {
            return Err(Error::shape(
                "partner latent",
                p.rows.shape(),
                &[batch * spec.latent_tokens(), spec.latent_channels()],
            ));
        }
        let key = format!("{}.context", p.modality);
        fixed_noise.insert(p.modality.as_str(), flow_noise(cfg, &key, 0, p.rows.shape()));
    }
    let grid = timesteps(sys.schedule.steps(), cfg.steps);
    for (i, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(i + 1).copied().unwrap_or(0);
        let mut partners: BTreeMap<&str, Tensor> = z.clone();
        for p in fixed {
            let zt = forward_diffuse(&p.rows, t, &fixed_noise[p.modality.as_str()], &sys.schedule)?;
            partners.insert(p.modality.as_str(), zt);
        }
        let mut next = BTreeMap::new();
        for (m, model) in flows.iter().zip(&models) {
            let my_edges: Vec<Edge> = edges
                .iter()
                .filter(|(_, target)| target == m)
                .map(|(partner, target)| Edge {
                    partner: partner.as_str(),
                    adaptation: adaptation_name(partner, target),
                })
                .collect();
            let eps = guided_eps(sys, model, &z[m], t, &my_edges, &partners, batch, cfg.guidance_scale)?;
            let noise = (cfg.eta > 0.0 && t_prev > 0)
                .then(|| flow_noise(cfg, m, i as u64 + 1, z[m].shape()));
            next.insert(*m, ddim_step(&z[m], &eps, t, t_prev, cfg.eta, &sys.schedule, noise.as_ref())?);
        }
        z = next;
    }
    Ok(z.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

fn check_edge(sys: &System, partner: &str, target: &str) -> Result<()> {
    sys.registry.get(partner)?;
    if !sys.has_adaptation(partner, target) {
        return Err(Error::Plan(format!("no context path from {partner} to {target}")));
    }
    Ok(())
}

/// Samples `batch` latents of `target`, optionally conditioned on a clean
/// partner latent that is diffused to each step's `t` with fixed noise.
pub fn sample(
    sys: &System,
    target: &str,
    context: Option<&PartnerLatent>,
    batch: usize,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let (edges, fixed) = match context {
        Some(p) => {
            check_edge(sys, &p.modality, target)?;
            (vec![(p.modality.clone(), target.to_string())], vec![p.clone()])
        }
        None => (Vec::new(), Vec::new()),
    };
    let mut out = run_flows(sys, &[target], &edges, &fixed, batch, cfg)?;
    Ok(out.remove(target).expect("flow present"))
}

/// Co-generates every listed modality. Each flow is conditioned on the
/// other flows' current latents through the trained adaptations; pass
/// `links` to restrict or name the `(partner, target)` edges explicitly.
pub fn joint_sample(
    sys: &System,
    modalities: &[&str],
    links: Option<&[(&str, &str)]>,
    batch: usize,
    cfg: &SamplerConfig,
) -> Result<BTreeMap<String, Tensor>> {
    if modalities.is_empty() {
        return Err(Error::Config("joint sampling needs at least one modality".into()));
    }
    let edges: Vec<(String, String)> = match links {
        Some(list) => {
            for (p, t) in list {
                if !modalities.contains(p) || !modalities.contains(t) {
                    return Err(Error::Config(format!("link {p}->{t} names a modality not being sampled")));
                }
                check_edge(sys, p, t)?;
            }
            list.iter().map(|(p, t)| (p.to_string(), t.to_string())).collect()
        }
        None => {
            let mut e = Vec::new();
            for t in modalities {
                for p in modalities {
                    if p != t && sys.has_adaptation(p, t) {
                        e.push((p.to_string(), t.to_string()));
                    }
                }
            }
            e
        }
    };
    run_flows(sys, modalities, &edges, &[], batch, cfg)
}

/// Splits stacked rows back into per-sample decoded outputs.
pub fn decode_rows(spec: &ModalitySpec, rows: &Tensor) -> Result<Vec<Sample>> {
    let per = spec.latent_numel();
    if !rows.numel().is_multiple_of(per) || rows.shape().last() != Some(&spec.latent_channels()) {
        return Err(Error::shape("decode_rows", rows.shape(), &[0, spec.latent_channels()]));
    }
    let codec = codec_for(spec);
    rows.data()
        .chunks(per)
        .map(|c| codec.decode(&rows_to_latent(c, spec.latent_shape)))
        .collect()
}
