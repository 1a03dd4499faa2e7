//! Held-out evaluation of a trained system.

use std::io::Write;

use rand::Rng;

use crate::data::{PairedDataset, Sample};
use crate::denoiser::Conditioning;
use crate::encoders::{adaptation_name, encode_batch};
use crate::error::{Error, Result};
use crate::metrics::{psnr, retrieval_topk, ssim};
use crate::modality::{encode_rows, ModalityKind};
use crate::objectives::{self, CrossGuide};
use crate::params::{Session, Trainable};
use crate::rng::{self, name_id};
use crate::sampler::{decode_rows, sample, PartnerLatent, SamplerConfig};
use crate::system::System;
use crate::tensor::Graph;

/// Which context a conditional evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    /// The partner sample of the same scene.
    Matched,
    /// The partner of the next item (a cyclic derangement).
    Mismatched,
    /// The learned null token.
    Null,
    /// The matching partner, clean rather than noised to `t`.
    MatchedClean,
}

/// Partner samples in `mode` order: matched or cyclically shifted by one.
fn partners<'a>(side: &[&'a Sample], mode: ContextMode) -> Vec<&'a Sample> {
    let n = side.len();
    match mode {
        ContextMode::Mismatched => (0..n).map(|i| side[(i + 1) % n]).collect(),
        _ => side.to_vec(),
    }
}

/// Top-k retrieval of `b` from `a` over the first `count` items.
pub fn retrieval(sys: &System, a: &str, b: &str, ds: &PairedDataset, count: usize, k: usize) -> Result<f64> {
    if count > ds.len() {
        return Err(Error::Param(format!("{count} candidates requested, dataset has {}", ds.len())));
    }
    let xa = &ds.side(a)?[..count];
    let xb = &ds.side(b)?[..count];
    let za = encode_batch(&sys.store, &sys.encoder(a)?, xa)?;
    let zb = encode_batch(&sys.store, &sys.encoder(b)?, xb)?;
    retrieval_topk(&za, &zb, k)
}

/// Mean ε-MSE of `target` over the first `count` items, each with a
/// seeded timestep and noise shared across modes.
pub fn conditional_loss(
    sys: &System,
    target: &str,
    partner: &str,
    ds: &PairedDataset,
    count: usize,
    mode: ContextMode,
    seed: u64,
) -> Result<f64> {
    if count == 0 || count > ds.len() {
        return Err(Error::Param(format!("bad evaluation count {count}")));
    }
    let xt = &ds.side(target)?[..count];
    let xp = partners(&ds.side(partner)?[..count], mode);
    let (st, sp) = (sys.registry.get(target)?, sys.registry.get(partner)?);
    let mut r = rng::stream(seed, &format!("eval.{partner}.{target}"));
    let t: Vec<usize> = (0..count).map(|_| r.random_range(1..=sys.schedule.steps())).collect();
    let z0 = encode_rows(st, xt)?;
    let eps = rng::normal(&mut r, z0.shape());
    let zp = encode_rows(sp, &xp)?;
    let eps_p = rng::normal(&mut r, zp.shape());
    let ztp = if mode == ContextMode::MatchedClean {
        zp
    } else {
        objectives::noise_rows(&zp, &t, &eps_p, &sys.schedule)?
    };
    let model = sys.denoiser(target)?;
    let v = sys.context(partner)?;
    let frozen = Trainable::Nothing;
    let mut g = Graph::new();
    let mut s = Session::new(&mut g, &sys.store, &frozen);
    let loss = if mode == ContextMode::Null {
        let cond = Conditioning::none(count);
        objectives::diffusion_loss(&mut s, &model, &z0, &t, &eps, &cond, &sys.schedule)?
    } else {
        let f = adaptation_name(partner, target);
        let guide = CrossGuide {
            context: &v,
            partner_zt: &ztp,
            adaptation: &f,
            use_null: vec![false; count],
        };
        objectives::cross_guided_loss(&mut s, &model, &z0, &t, &eps, &guide, &sys.schedule)?
    };
    Ok(s.g.value(loss).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fidelity {
    pub psnr: f64,
    pub ssim: f64,
    pub samples: Vec<Sample>,
}

/// Samples `target` for the first `count` items conditioned on the
/// partner side and scores the results against the true renders.
pub fn conditional_fidelity(
    sys: &System,
    target: &str,
    partner: &str,
    ds: &PairedDataset,
    count: usize,
    mode: ContextMode,
    cfg: &SamplerConfig,
) -> Result<Fidelity> {
    let st = sys.registry.get(target)?;
    if st.kind != ModalityKind::Image {
        return Err(Error::Param(format!("`{target}` is not an image modality")));
    }
    let truth = &ds.side(target)?[..count];
    let xp = partners(&ds.side(partner)?[..count], mode);
    let context = (mode != ContextMode::Null).then(|| -> Result<PartnerLatent> {
        Ok(PartnerLatent {
            modality: partner.to_string(),
            rows: encode_rows(sys.registry.get(partner)?, &xp)?,
        })
    });
    let context = context.transpose()?;
    let rows = sample(sys, target, context.as_ref(), count, cfg)?;
    let samples = decode_rows(st, &rows)?;
    let (mut p, mut q) = (0.0, 0.0);
    for (x, y) in samples.iter().zip(truth) {
        let (a, b) = (x.image().expect("image"), y.image().expect("image"));
        let clipped = a.map(|v| v.clamp(0.0, 1.0));
        p += psnr(&clipped, b, 1.0)?;
        q += ssim(&clipped, b, 1.0)?;
    }
    Ok(Fidelity {
        psnr: p / count as f64,
        ssim: q / count as f64,
        samples,
    })
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub subject: String,
    pub value: f64,
}

pub fn write_metrics_csv(rows: &[MetricRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "metric,subject,value")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.metric, r.subject, r.value)?;
    }
    Ok(())
}

/// Stable per-name offset so evaluations of different pairs draw
/// different noise from one seed.
pub fn eval_seed(seed: u64, name: &str) -> u64 {
    seed ^ name_id(name)
}
