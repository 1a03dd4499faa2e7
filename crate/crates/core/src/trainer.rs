//! Encoder central alignment, single-modality pretraining and the
//! sequential cross-guided flow rounds with progressive freezing.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::augment::{augment, TOKEN_DROP};
use crate::data::{Datasets, PairedDataset, Sample};
use crate::denoiser::Conditioning;
use crate::encoders::{adaptation_name, build_adaptation};
use crate::error::{Error, Result};
use crate::modality::{encode_rows, ModalityKind, ModalitySpec};
use crate::objectives::{self, CrossGuide};
use crate::optim::{AdamState, GroupHyper, Hyper};
use crate::params::{ParamGroup, Session, Trainable};
use crate::rng::{self, name_id};
use crate::system::{System, HUB, LOG_TAU};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub align_steps: usize,
    pub pretrain_steps: usize,
    pub flow_steps: usize,
    pub lr_encoder: f64,
    pub lr_backbone: f64,
    /// Cross-attention, context encoders and adaptations.
    pub lr_cross: f64,
    pub weight_decay_cross: f64,
    pub cfg_dropout: f64,
    pub lambda1: f64,
    pub vi_weight_align: f64,
    pub vi_in_flows: bool,
    pub vi_weight_flow: f64,
    pub learn_tau: bool,
    /// Per-sample probability that a partner enters the context clean.
    pub clean_partner_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            align_steps: 300,
            pretrain_steps: 400,
            flow_steps: 300,
            lr_encoder: 1e-3,
            lr_backbone: 1e-3,
            lr_cross: 1e-3,
            weight_decay_cross: 1e-4,
            cfg_dropout: 0.1,
            lambda1: objectives::DEFAULT_LAMBDA1,
            vi_weight_align: 0.1,
            vi_in_flows: true,
            vi_weight_flow: 0.01,
            learn_tau: true,
            clean_partner_prob: 0.0,
        }
    }
}

impl TrainConfig {
    fn hyper(&self) -> Hyper {
        let cross = GroupHyper {
            lr: self.lr_cross,
            weight_decay: self.weight_decay_cross,
        };
        Hyper::uniform(self.lr_cross)
            .with(
                ParamGroup::Encoder,
                GroupHyper {
                    lr: self.lr_encoder,
                    weight_decay: 0.0,
                },
            )
            .with(
                ParamGroup::Backbone,
                GroupHyper {
                    lr: self.lr_backbone,
                    weight_decay: 0.0,
                },
            )
            .with(ParamGroup::CrossAttention, cross)
            .with(ParamGroup::ContextEncoder, cross)
            .with(ParamGroup::Adaptation, cross)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub name: String,
    pub value: f64,
}

/// Loss curves as `(step, loss_name, value)` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub fn push(&mut self, step: usize, name: impl Into<String>, value: f64) {
        self.rows.push(LossRow {
            step,
            name: name.into(),
            value,
        });
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "step,loss,value")?;
        for r in &self.rows {
            writeln!(w, "{},{},{}", r.step, r.name, r.value)?;
        }
        Ok(())
    }

    /// Mean of the first and last `k` values logged under `name`.
    pub fn ends(&self, name: &str, k: usize) -> Option<(f64, f64)> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.name == name).map(|r| r.value).collect();
        if v.is_empty() {
            return None;
        }
        let k = k.clamp(1, v.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&v[..k]), mean(&v[v.len() - k..])))
    }
}

fn pick<'a>(items: &'a [&'a Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| items[i]).collect()
}

fn batch_indices(rng: &mut impl Rng, len: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..len)).collect()
}

fn check_finite(value: f64, context: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(context()))
    }
}

/// Summary of trainable parameter magnitudes for abort diagnostics.
fn snapshot(sys: &System, trainable: &Trainable, parts: &[(&str, f64)]) -> String {
    let mut s = String::new();
    for (name, v) in parts {
        let _ = write!(s, "{name}={v} ");
    }
    let mut worst = ("", 0.0f64);
    for name in trainable.names(&sys.store) {
        let t = sys.store.value(name).expect("listed");
        let m = t.data().iter().fold(0.0f64, |a, v| if v.is_finite() { a.max(v.abs()) } else { f64::INFINITY });
        if m >= worst.1 {
            worst = (name, m);
        }
    }
    let _ = write!(s, "| largest |param| {}={}", worst.0, worst.1);
    s
}

/// One pairwise encoder alignment round; `trained` modalities update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignRound {
    pub pair: (String, String),
    pub trained: Vec<String>,
}

/// Hub-first spanning rounds over the available pairs: the first round
/// touching the hub trains both encoders, every later round trains only
/// the newly reached modality against an already aligned anchor.
pub fn alignment_rounds(sys: &System, pairs: &[(String, String)]) -> Result<Vec<AlignRound>> {
    let names: Vec<String> = sys.registry.names().map(String::from).collect();
    if !names.iter().any(|n| n == HUB) {
        return Err(Error::Coverage(format!("hub modality `{HUB}` is not registered")));
    }
    let mut aligned: BTreeSet<String> = BTreeSet::new();
    let mut rounds = Vec::new();
    loop {
        let next = pairs.iter().find(|(a, b)| {
            let (ia, ib) = (aligned.contains(a), aligned.contains(b));
            if aligned.is_empty() {
                a == HUB || b == HUB
            } else {
                ia != ib
            }
        });
        let Some((a, b)) = next else { break };
        let trained: Vec<String> = if aligned.is_empty() {
            vec![a.clone(), b.clone()]
        } else {
            [a, b].into_iter().filter(|m| !aligned.contains(*m)).cloned().collect()
        };
        aligned.extend([a.clone(), b.clone()]);
        rounds.push(AlignRound {
            pair: (a.clone(), b.clone()),
            trained,
        });
    }
    let missing: Vec<&String> = names.iter().filter(|n| !aligned.contains(*n)).collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(format!(
            "no paired path to `{HUB}` for {}",
            missing.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(rounds)
}

fn vi_term(
    s: &mut Session,
    raw: impl Fn(&mut Session, &[&Sample]) -> Result<Var>,
    samples: &[&Sample],
    rng: &mut impl Rng,
    lambda1: f64,
) -> Result<Var> {
    let v1: Vec<Sample> = samples.iter().map(|x| augment(x, rng)).collect();
    let v2: Vec<Sample> = samples.iter().map(|x| augment(x, rng)).collect();
    let z1 = raw(s, &v1.iter().collect::<Vec<_>>())?;
    let z2 = raw(s, &v2.iter().collect::<Vec<_>>())?;
    objectives::vi_barlow(s.g, z1, z2, lambda1)
}

/// Aligns every prompt encoder to the text hub through the available
/// pairs. Returns the rounds that were run.
pub fn align_encoders(
    sys: &mut System,
    datasets: &Datasets,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut LossLog,
) -> Result<Vec<AlignRound>> {
    let pairs: Vec<(String, String)> = datasets.pairs().cloned().collect();
    let rounds = alignment_rounds(sys, &pairs)?;
    for (r, round) in rounds.iter().enumerate() {
        let (a, b) = (&round.pair.0, &round.pair.1);
        let ds = datasets.require(a, b)?;
        let mut prefixes: Vec<String> = round.trained.iter().map(|m| format!("enc.{m}.")).collect();
        if r == 0 && cfg.learn_tau {
            prefixes.push(LOG_TAU.to_string());
        }
        let trainable = Trainable::prefixes(&sys.store, &prefixes);
        align_round(sys, ds, round, &trainable, cfg, seed, log)?;
    }
    Ok(rounds)
}

fn align_round(
    sys: &mut System,
    ds: &PairedDataset,
    round: &AlignRound,
    trainable: &Trainable,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut LossLog,
) -> Result<()> {
    let (a, b) = (&round.pair.0, &round.pair.1);
    let (ea, eb) = (sys.encoder(a)?, sys.encoder(b)?);
    let (sa, sb) = (ds.side(a)?, ds.side(b)?);
    let mut opt = AdamState::new(&sys.store, trainable, cfg.hyper());
    let tag = format!("align.{a}-{b}");
    let key = name_id(&tag);
    for step in 0..cfg.align_steps {
        let mut r = rng::keyed(seed, key, step as u64);
        let idx = batch_indices(&mut r, ds.len(), cfg.batch);
        let (xa, xb) = (pick(&sa, &idx), pick(&sb, &idx));
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &sys.store, trainable);
        let za = ea.forward(&mut s, &xa)?;
        let zb = eb.forward(&mut s, &xb)?;
        let log_tau = s.p(LOG_TAU)?;
        let tau = s.g.exp(log_tau);
        let tau = s.g.reshape(tau, &[])?;
        let nce = objectives::infonce_central(s.g, za.unit, zb.unit, tau)?;
        let mut total = nce;
        let mut parts = vec![("infonce", s.g.value(nce).item())];
        if cfg.vi_weight_align > 0.0 {
            for (m, enc, xs) in [(a, &ea, &xa), (b, &eb, &xb)] {
                if !round.trained.contains(m) {
                    continue;
                }
                let vi = vi_term(&mut s, |s, v| Ok(enc.forward(s, v)?.raw), xs, &mut r, cfg.lambda1)?;
                parts.push(("vi", s.g.value(vi).item()));
                let w = s.g.scale(vi, cfg.vi_weight_align);
                total = s.g.add(total, w)?;
            }
        }
        let value = s.g.value(total).item();
        check_finite(value, || format!("{tag} step {step}: {}", snapshot(sys, trainable, &parts)))?;
        s.g.backward(total)?;
        let grads = s.grads();
        opt.step(&mut sys.store, &grads)?;
        sys.clamp_tau()?;
        for (name, v) in parts {
            log.push(step, format!("{tag}.{name}"), v);
        }
        log.push(step, format!("{tag}.total"), value);
    }
    Ok(())
}

/// Backbone parameter names of one diffuser.
pub fn backbone_names(sys: &System, m: &str) -> Result<BTreeSet<String>> {
    let d = sys.denoiser(m)?;
    let prefix = format!("{}.", d.prefix());
    Ok(sys
        .store
        .iter()
        .filter(|(n, p)| n.starts_with(&prefix) && p.group == ParamGroup::Backbone)
        .map(|(n, _)| n.clone())
        .collect())
}

/// Unconditional single-modality training of one diffuser's backbone.
pub fn pretrain(
    sys: &mut System,
    modality: &str,
    samples: &[&Sample],
    cfg: &TrainConfig,
    seed: u64,
    log: &mut LossLog,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Coverage(format!("no samples to pretrain `{modality}`")));
    }
    let model = sys.denoiser(modality)?;
    let spec = sys.registry.get(modality)?.clone();
    let trainable = Trainable::Only(backbone_names(sys, modality)?);
    let mut opt = AdamState::new(&sys.store, &trainable, cfg.hyper());
    let tag = format!("pretrain.{modality}");
    let key = name_id(&tag);
    let t_max = sys.schedule.steps();
    for step in 0..cfg.pretrain_steps {
        let mut r = rng::keyed(seed, key, step as u64);
        let idx = batch_indices(&mut r, samples.len(), cfg.batch);
        let t: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(1..=t_max)).collect();
        let z0 = encode_rows(&spec, &pick(samples, &idx))?;
        let eps = rng::normal(&mut r, z0.shape());
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &sys.store, &trainable);
        let cond = Conditioning::none(cfg.batch);
        let loss = objectives::diffusion_loss(&mut s, &model, &z0, &t, &eps, &cond, &sys.schedule)?;
        let value = s.g.value(loss).item();
        check_finite(value, || format!("{tag} step {step}: {}", snapshot(sys, &trainable, &[("eps", value)])))?;
        s.g.backward(loss)?;
        let grads = s.grads();
        opt.step(&mut sys.store, &grads)?;
        log.push(step, format!("{tag}.eps"), value);
    }
    Ok(())
}

/// One paired cross-guided training round.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowRound {
    pub pair: (String, String),
    /// Modalities whose cross-attention and context encoder train.
    pub trained: Vec<String>,
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
    pub steps: usize,
}

impl FlowRound {
    pub fn trainable_set(&self) -> Trainable {
        Trainable::Only(self.trainable.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowPlan {
    pub rounds: Vec<FlowRound>,
}

/// Parameters that learn when modality `m`'s diffuser is in training:
/// its cross-attention sublayers and its context encoder.
fn cross_names(sys: &System, m: &str) -> Result<BTreeSet<String>> {
    let d = sys.denoiser(m)?;
    let mut prefixes = d.cross_attention_prefixes();
    prefixes.push(format!("{}.", sys.context(m)?.prefix()));
    Ok(sys
        .store
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_str())))
        .cloned()
        .collect())
}

/// Rounds over `pairs` in order. A modality trains in the first round it
/// appears in and is frozen from then on.
pub fn plan_for_pairs(sys: &System, pairs: &[(&str, &str)], steps: usize) -> Result<FlowPlan> {
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut rounds = Vec::new();
    for &(a, b) in pairs {
        for m in [a, b] {
            if sys.registry.get(m).is_err() {
                return Err(Error::Plan(format!("modality `{m}` is not registered")));
            }
        }
        if !sys.has_adaptation(a, b) || !sys.has_adaptation(b, a) {
            return Err(Error::Plan(format!("no guided adaptations for {a}-{b}")));
        }
        let trained: Vec<String> = [a, b]
            .into_iter()
            .filter(|m| !seen.contains(*m))
            .map(String::from)
            .collect();
        let mut trainable = BTreeSet::new();
        for m in &trained {
            trainable.extend(cross_names(sys, m)?);
        }
        trainable.insert(adaptation_name(a, b));
        trainable.insert(adaptation_name(b, a));
        let frozen = sys
            .store
            .names()
            .filter(|n| !trainable.contains(*n))
            .cloned()
            .collect();
        seen.extend([a.to_string(), b.to_string()]);
        rounds.push(FlowRound {
            pair: (a.to_string(), b.to_string()),
            trained,
            trainable,
            frozen,
            steps,
        });
    }
    Ok(FlowPlan { rounds })
}

/// Text–xray, then text–ct with the text diffuser frozen, then ct–mri with
/// the ct diffuser frozen.
pub fn default_plan(sys: &System, steps: usize) -> Result<FlowPlan> {
    plan_for_pairs(sys, &crate::system::DEFAULT_PAIRS, steps)
}

/// Checks the partition and freeze-order invariants against `sys`.
pub fn validate(plan: &FlowPlan, sys: &System) -> Result<()> {
    let all: BTreeSet<&String> = sys.store.names().collect();
    let mut trained_before: BTreeSet<String> = BTreeSet::new();
    for (i, r) in plan.rounds.iter().enumerate() {
        let ctx = |msg: String| Error::Plan(format!("round {} ({}-{}): {msg}", i + 1, r.pair.0, r.pair.1));
        if let Some(n) = r.trainable.intersection(&r.frozen).next() {
            return Err(ctx(format!("`{n}` is both trainable and frozen")));
        }
        for n in r.trainable.iter().chain(&r.frozen) {
            if !all.contains(n) {
                return Err(ctx(format!("unknown parameter `{n}`")));
            }
        }
        if r.trainable.len() + r.frozen.len() != all.len() {
            return Err(ctx("trainable and frozen sets do not cover every parameter".into()));
        }
        for m in [&r.pair.0, &r.pair.1] {
            let ca = cross_names(sys, m).map_err(|e| ctx(e.to_string()))?;
            let training = ca.iter().any(|n| r.trainable.contains(n));
            if training {
                trained_before.insert(m.clone());
            } else if !trained_before.contains(m) {
                return Err(ctx(format!("`{m}` diffuser is frozen before it was ever trained")));
            }
        }
    }
    Ok(())
}

/// Sets both adaptations of a pair from one seeded training sample each.
pub fn init_adaptations(sys: &mut System, ds: &PairedDataset, seed: u64) -> Result<()> {
    let (a, b) = (ds.pair.0.clone(), ds.pair.1.clone());
    if ds.is_empty() {
        return Err(Error::Coverage(format!("empty dataset for {a}-{b}")));
    }
    for (partner, target) in [(&a, &b), (&b, &a)] {
        let name = adaptation_name(partner, target);
        let mut r = rng::stream(seed, &name);
        let x = *ds.side(partner)?.choose(&mut r).expect("non-empty");
        let ps = sys.registry.get(partner)?;
        let z = encode_rows(ps, &[x])?;
        let f = build_adaptation(&sys.store, &z, ps, sys.registry.get(target)?)?;
        sys.store.set(&name, f, ParamGroup::Adaptation);
    }
    Ok(())
}

/// Latent rows of an augmented view. Images are augmented in pixel space;
/// the structured text code cannot represent a partial description, so
/// text views drop latent entries at the token-dropout rate instead.
fn augmented_latents(spec: &ModalitySpec, xs: &[&Sample], rng: &mut impl Rng) -> Result<Tensor> {
    match spec.kind {
        ModalityKind::Image => {
            let views: Vec<Sample> = xs.iter().map(|x| augment(x, rng)).collect();
            encode_rows(spec, &views.iter().collect::<Vec<_>>())
        }
        ModalityKind::Text => {
            let mut z = encode_rows(spec, xs)?;
            for v in z.data_mut() {
                if rng.random_bool(TOKEN_DROP) {
                    *v = 0.0;
                }
            }
            Ok(z)
        }
    }
}

/// Mean-pooled latent-token features of `V_m`, `[B, E]`.
fn context_features(sys: &System, s: &mut Session, m: &str, adaptation: &str, z: Tensor) -> Result<Var> {
    let v = sys.context(m)?;
    let b = z.shape()[0] / v.latent_tokens;
    let z = s.constant(z);
    let f = s.p(adaptation)?;
    let l = s.g.shape(f)[0];
    let out = v.forward(s, z, f, b)?;
    let out = s.g.reshape(out, &[b, v.latent_tokens + l, v.embed_dim])?;
    let lat = s.g.slice(out, 1, 0, v.latent_tokens)?;
    let pooled = s.g.mean_axis(lat, 1)?;
    s.g.reshape(pooled, &[b, v.embed_dim])
}

/// Runs `round.steps` optimizer steps on `L_Cross^A + L_Cross^B` (plus the
/// optional VI term on the context features being trained).
pub fn run_round(
    sys: &mut System,
    round: &FlowRound,
    ds: &PairedDataset,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut LossLog,
) -> Result<()> {
    if round.steps == 0 {
        return Ok(());
    }
    let (a, b) = (round.pair.0.as_str(), round.pair.1.as_str());
    let (sa, sb) = (ds.side(a)?, ds.side(b)?);
    let (spec_a, spec_b) = (sys.registry.get(a)?.clone(), sys.registry.get(b)?.clone());
    let (da, db) = (sys.denoiser(a)?, sys.denoiser(b)?);
    let (va, vb) = (sys.context(a)?, sys.context(b)?);
    let (fa, fb) = (adaptation_name(a, b), adaptation_name(b, a));
    let trainable = round.trainable_set();
    let mut opt = AdamState::new(&sys.store, &trainable, cfg.hyper());
    let tag = format!("flow.{a}-{b}");
    let key = name_id(&tag);
    let t_max = sys.schedule.steps();
    let n = cfg.batch;
    for step in 0..round.steps {
        let mut r = rng::keyed(seed, key, step as u64);
        let idx = batch_indices(&mut r, ds.len(), n);
        let (xa, xb) = (pick(&sa, &idx), pick(&sb, &idx));
        let t: Vec<usize> = (0..n).map(|_| r.random_range(1..=t_max)).collect();
        let z0a = encode_rows(&spec_a, &xa)?;
        let z0b = encode_rows(&spec_b, &xb)?;
        let eps_a = rng::normal(&mut r, z0a.shape());
        let eps_b = rng::normal(&mut r, z0b.shape());
        let zta = objectives::noise_rows(&z0a, &t, &eps_a, &sys.schedule)?;
        let ztb = objectives::noise_rows(&z0b, &t, &eps_b, &sys.schedule)?;
        let clean_a: Vec<bool> = (0..n).map(|_| r.random_bool(cfg.clean_partner_prob)).collect();
        let clean_b: Vec<bool> = (0..n).map(|_| r.random_bool(cfg.clean_partner_prob)).collect();
        let ctx_b = objectives::select_rows(&ztb, &z0b, &clean_a)?;
        let ctx_a = objectives::select_rows(&zta, &z0a, &clean_b)?;
        let drop_a: Vec<bool> = (0..n).map(|_| r.random_bool(cfg.cfg_dropout)).collect();
        let drop_b: Vec<bool> = (0..n).map(|_| r.random_bool(cfg.cfg_dropout)).collect();

        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &sys.store, &trainable);
        let guide_a = CrossGuide {
            context: &vb,
            partner_zt: &ctx_b,
            adaptation: &fb,
            use_null: drop_a,
        };
        let la = objectives::cross_guided_loss(&mut s, &da, &z0a, &t, &eps_a, &guide_a, &sys.schedule)?;
        let guide_b = CrossGuide {
            context: &va,
            partner_zt: &ctx_a,
            adaptation: &fa,
            use_null: drop_b,
        };
        let lb = objectives::cross_guided_loss(&mut s, &db, &z0b, &t, &eps_b, &guide_b, &sys.schedule)?;
        let mut total = s.g.add(la, lb)?;
        let mut parts = vec![
            (format!("cross.{a}"), s.g.value(la).item()),
            (format!("cross.{b}"), s.g.value(lb).item()),
        ];
        if cfg.vi_in_flows && cfg.vi_weight_flow > 0.0 {
            for (m, spec, xs, f) in [(a, &spec_a, &xa, &fa), (b, &spec_b, &xb, &fb)] {
                if !round.trained.iter().any(|x| x == m) {
                    continue;
                }
                let z1 = augmented_latents(spec, xs, &mut r)?;
                let z2 = augmented_latents(spec, xs, &mut r)?;
                let h1 = context_features(sys, &mut s, m, f, z1)?;
                let h2 = context_features(sys, &mut s, m, f, z2)?;
                let vi = objectives::vi_barlow(s.g, h1, h2, cfg.lambda1)?;
                parts.push((format!("vi.{m}"), s.g.value(vi).item()));
                let w = s.g.scale(vi, cfg.vi_weight_flow);
                total = s.g.add(total, w)?;
            }
        }
        let value = s.g.value(total).item();
        check_finite(value, || {
            let p: Vec<(&str, f64)> = parts.iter().map(|(k, v)| (k.as_str(), *v)).collect();
            format!("{tag} step {step}: {}", snapshot(sys, &trainable, &p))
        })?;
        s.g.backward(total)?;
        let grads = s.grads();
        opt.step(&mut sys.store, &grads)?;
        for (name, v) in parts {
            log.push(step, format!("{tag}.{name}"), v);
        }
        log.push(step, format!("{tag}.total"), value);
    }
    Ok(())
}

/// Runs every round of `plan` in order, initializing each pair's
/// adaptations from its training data first.
pub fn train_flows(
    sys: &mut System,
    plan: &FlowPlan,
    datasets: &Datasets,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut LossLog,
) -> Result<()> {
    validate(plan, sys)?;
    for round in &plan.rounds {
        datasets.require(&round.pair.0, &round.pair.1)?;
    }
    for round in &plan.rounds {
        let ds = datasets.require(&round.pair.0, &round.pair.1)?;
        if round.steps > 0 {
            init_adaptations(sys, ds, seed)?;
        }
        run_round(sys, round, ds, cfg, seed, log)?;
    }
    Ok(())
}

/// Alignment, per-modality pretraining and the flow rounds, in order.
pub fn run_pipeline(
    sys: &mut System,
    datasets: &Datasets,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut LossLog,
) -> Result<()> {
    let plan = default_plan(sys, cfg.flow_steps)?;
    validate(&plan, sys)?;
    align_encoders(sys, datasets, cfg, seed, log)?;
    let names: Vec<String> = sys.registry.names().map(String::from).collect();
    for m in &names {
        let samples = datasets.samples_of(m);
        pretrain(sys, m, &samples, cfg, seed, log)?;
    }
    train_flows(sys, &plan, datasets, cfg, seed, log)
}

/// Tensor equality on raw bits, so `-0.0` and `NaN` payloads count.
pub fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{seed_range, Split};
    use crate::denoiser::DenoiserConfig;
    use crate::system::{ModelConfig, DEFAULT_PAIRS};

    fn small() -> System {
        let model = ModelConfig {
            embed_dim: 16,
            context_len: 2,
            denoiser: DenoiserConfig {
                channels: 8,
                heads: 2,
                time_dim: 8,
            },
            context_heads: 2,
        };
        System::standard(model, 1).unwrap()
    }

    fn datasets(count: usize) -> Datasets {
        let mut d = Datasets::new();
        for (i, (a, b)) in DEFAULT_PAIRS.iter().enumerate() {
            d.insert(PairedDataset::generate(a, b, Split::Train, seed_range(1, i, Split::Train, count)).unwrap());
        }
        d
    }

    #[test]
    fn default_plan_matches_schedule() {
        let sys = small();
        let plan = default_plan(&sys, 5).unwrap();
        let pairs: Vec<_> = plan.rounds.iter().map(|r| (r.pair.0.as_str(), r.pair.1.as_str())).collect();
        assert_eq!(pairs, DEFAULT_PAIRS.to_vec());
        assert_eq!(plan.rounds[0].trained, vec!["text", "xray"]);
        assert_eq!(plan.rounds[1].trained, vec!["ct"]);
        assert_eq!(plan.rounds[2].trained, vec!["mri"]);
        let text_unet: Vec<_> = sys.store.names_with_prefix("unet.text.").collect();
        assert!(text_unet.iter().all(|n| plan.rounds[1].frozen.contains(*n)));
        assert!(plan.rounds.iter().all(|r| r.trainable.iter().all(|n| !n.starts_with("enc."))));
        validate(&plan, &sys).unwrap();
    }

    #[test]
    fn validation_rejects_bad_plans() {
        let sys = small();
        let mut plan = default_plan(&sys, 1).unwrap();
        let name = plan.rounds[0].frozen.iter().next().unwrap().clone();
        plan.rounds[0].trainable.insert(name);
        assert!(matches!(validate(&plan, &sys), Err(Error::Plan(_))));

        let mut plan = default_plan(&sys, 1).unwrap();
        let name = plan.rounds[1].frozen.iter().next().unwrap().clone();
        plan.rounds[1].frozen.remove(&name);
        assert!(validate(&plan, &sys).is_err());

        // ct frozen in its first appearance.
        let plan = plan_for_pairs(&sys, &[("ct", "mri")], 1).unwrap();
        let mut r = plan.rounds[0].clone();
        for n in cross_names(&sys, "ct").unwrap() {
            r.trainable.remove(&n);
            r.frozen.insert(n);
        }
        assert!(validate(&FlowPlan { rounds: vec![r] }, &sys).is_err());
        assert!(matches!(plan_for_pairs(&sys, &[("text", "pet")], 1), Err(Error::Plan(_))));
    }

    #[test]
    fn hub_alignment_rounds_and_coverage() {
        let sys = small();
        let pairs: Vec<(String, String)> =
            DEFAULT_PAIRS.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let rounds = alignment_rounds(&sys, &pairs).unwrap();
        assert_eq!(rounds.len(), 3);
        assert_eq!(rounds[0].trained, vec!["text", "xray"]);
        assert_eq!(rounds[2].trained, vec!["mri"]);
        let err = alignment_rounds(&sys, &pairs[..2]).unwrap_err();
        assert!(matches!(err, Error::Coverage(ref m) if m.contains("mri")));
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let mut sys = small();
        let d = datasets(4);
        let before = sys.store.clone();
        let plan = default_plan(&sys, 0).unwrap();
        let mut log = LossLog::default();
        train_flows(&mut sys, &plan, &d, &TrainConfig::default(), 3, &mut log).unwrap();
        assert_eq!(sys.store, before);
        assert!(log.rows.is_empty());
    }

    #[test]
    fn round_touches_only_trainable() {
        let mut sys = small();
        let d = datasets(8);
        let plan = default_plan(&sys, 2).unwrap();
        let cfg = TrainConfig {
            batch: 4,
            ..TrainConfig::default()
        };
        let mut log = LossLog::default();
        for round in &plan.rounds {
            let ds = d.require(&round.pair.0, &round.pair.1).unwrap();
            init_adaptations(&mut sys, ds, 1).unwrap();
            let before = sys.store.clone();
            run_round(&mut sys, round, ds, &cfg, 1, &mut log).unwrap();
            for n in &round.frozen {
                assert!(bit_equal(before.value(n).unwrap(), sys.store.value(n).unwrap()), "{n}");
            }
            let changed = round
                .trainable
                .iter()
                .filter(|n| !bit_equal(before.value(n).unwrap(), sys.store.value(n).unwrap()))
                .count();
            assert!(changed > 0);
        }
        assert!(log.rows.iter().all(|r| r.value.is_finite()));
    }

    #[test]
    fn alignment_freezes_other_encoders() {
        let mut sys = small();
        let d = datasets(8);
        let cfg = TrainConfig {
            batch: 4,
            align_steps: 2,
            ..TrainConfig::default()
        };
        let rounds = alignment_rounds(&sys, &d.pairs().cloned().collect::<Vec<_>>()).unwrap();
        let mut log = LossLog::default();
        let round = rounds.iter().find(|r| r.pair == ("text".into(), "xray".into())).unwrap();
        let trainable = Trainable::prefixes(&sys.store, &["enc.text.", "enc.xray."]);
        let before = sys.store.clone();
        align_round(&mut sys, d.require("text", "xray").unwrap(), round, &trainable, &cfg, 2, &mut log).unwrap();
        for n in before.names() {
            let same = bit_equal(before.value(n).unwrap(), sys.store.value(n).unwrap());
            if n.starts_with("enc.ct.") || n.starts_with("enc.mri.") || n.starts_with("unet.") {
                assert!(same, "{n}");
            }
        }
    }
}
