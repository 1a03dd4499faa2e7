//! Gradient checks shared by the gradient and acceptance suites.

#![allow(dead_code)]

use mflow::data::{render_modality, Scene};
use mflow::denoiser::{Conditioning, Denoiser, DenoiserConfig};
use mflow::encoders::{ContextEncoder, PromptEncoder};
use mflow::modality::{encode_rows, Registry};
use mflow::objectives::{self, CrossGuide};
use mflow::params::{ParamGroup, ParamStore, Session, Trainable};
use mflow::rng;
use mflow::schedule::NoiseSchedule;
use mflow::tensor::{grad_check, grad_check_sampled};
use mflow::{Graph, Result, Tensor, Var};

pub const H: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub type Op = fn(&mut Graph, Var, &Tensor) -> Result<Var>;

/// A differentiable primitive probed at an input of `shape`; `aux` is a
/// constant second operand of `aux_shape` where the op needs one.
pub struct Primitive {
    pub name: &'static str,
    pub shape: &'static [usize],
    pub aux_shape: &'static [usize],
    pub op: Op,
}

fn positive(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.square(x);
    let half = g.constant(Tensor::full(g.shape(x), 0.5));
    g.add(sq, half)
}

pub const PRIMITIVES: &[Primitive] = &[
    Primitive { name: "add", shape: &[2, 3], aux_shape: &[2, 3], op: |g, x, a| { let a = g.constant(a.clone()); g.add(x, a) } },
    Primitive { name: "sub", shape: &[2, 3], aux_shape: &[2, 3], op: |g, x, a| { let a = g.constant(a.clone()); g.sub(a, x) } },
    Primitive { name: "mul", shape: &[2, 3], aux_shape: &[2, 3], op: |g, x, a| { let a = g.constant(a.clone()); g.mul(x, a) } },
    Primitive { name: "div", shape: &[2, 3], aux_shape: &[2, 3], op: |g, x, a| {
        let num = g.constant(a.clone());
        let den = positive(g, x)?;
        let q = g.div(num, den)?;
        let shifted = g.constant(a.map(|v| v.abs() + 0.5));
        let r = g.div(x, shifted)?;
        g.add(q, r)
    } },
    Primitive { name: "neg", shape: &[2, 3], aux_shape: &[], op: |g, x, _| Ok(g.neg(x)) },
    Primitive { name: "scale", shape: &[2, 3], aux_shape: &[], op: |g, x, _| Ok(g.scale(x, -1.7)) },
    Primitive { name: "exp", shape: &[2, 3], aux_shape: &[], op: |g, x, _| Ok(g.exp(x)) },
    Primitive { name: "log", shape: &[2, 3], aux_shape: &[], op: |g, x, _| { let p = positive(g, x)?; g.log(p) } },
    Primitive { name: "sqrt", shape: &[2, 3], aux_shape: &[], op: |g, x, _| { let p = positive(g, x)?; g.sqrt(p) } },
    Primitive { name: "silu", shape: &[2, 3], aux_shape: &[], op: |g, x, _| Ok(g.silu(x)) },
    Primitive { name: "square", shape: &[2, 3], aux_shape: &[], op: |g, x, _| Ok(g.square(x)) },
    Primitive { name: "matmul lhs", shape: &[3, 4], aux_shape: &[4, 5], op: |g, x, a| { let a = g.constant(a.clone()); g.matmul(x, a) } },
    Primitive { name: "matmul rhs", shape: &[4, 5], aux_shape: &[3, 4], op: |g, x, a| { let a = g.constant(a.clone()); g.matmul(a, x) } },
    Primitive { name: "bmm lhs", shape: &[2, 3, 2], aux_shape: &[2, 2, 4], op: |g, x, a| { let a = g.constant(a.clone()); g.bmm(x, a) } },
    Primitive { name: "bmm rhs", shape: &[2, 2, 4], aux_shape: &[2, 3, 2], op: |g, x, a| { let a = g.constant(a.clone()); g.bmm(a, x) } },
    Primitive { name: "transpose", shape: &[3, 4], aux_shape: &[], op: |g, x, _| g.transpose(x) },
    Primitive { name: "permute", shape: &[2, 3, 4], aux_shape: &[], op: |g, x, _| g.permute(x, &[2, 0, 1]) },
    Primitive { name: "reshape", shape: &[2, 3, 4], aux_shape: &[], op: |g, x, _| g.reshape(x, &[4, 6]) },
    Primitive { name: "softmax rows", shape: &[4, 5], aux_shape: &[], op: |g, x, _| g.softmax(x, 1) },
    Primitive { name: "softmax cols", shape: &[4, 5], aux_shape: &[], op: |g, x, _| g.softmax(x, 0) },
    Primitive { name: "layer_norm", shape: &[4, 5], aux_shape: &[], op: |g, x, _| Ok(g.layer_norm(x, 1e-5)) },
    Primitive { name: "sum", shape: &[4, 5], aux_shape: &[], op: |g, x, _| Ok(g.sum(x)) },
    Primitive { name: "mean", shape: &[4, 5], aux_shape: &[], op: |g, x, _| Ok(g.mean(x)) },
    Primitive { name: "sum_axis", shape: &[4, 5], aux_shape: &[], op: |g, x, _| g.sum_axis(x, 0) },
    Primitive { name: "mean_axis", shape: &[4, 5], aux_shape: &[], op: |g, x, _| g.mean_axis(x, 1) },
    Primitive { name: "concat", shape: &[2, 3, 4], aux_shape: &[], op: |g, x, _| {
        let a = g.slice(x, 1, 0, 1)?;
        let b = g.slice(x, 1, 1, 2)?;
        g.concat(&[b, a, b], 1)
    } },
    Primitive { name: "slice", shape: &[2, 3, 4], aux_shape: &[], op: |g, x, _| g.slice(x, 2, 1, 2) },
    Primitive { name: "repeat_rows", shape: &[2, 4], aux_shape: &[], op: |g, x, _| g.repeat_rows(x, 3) },
    Primitive { name: "gather_rows", shape: &[6, 4], aux_shape: &[], op: |g, x, _| g.gather_rows(x, &[5, 0, 0, 3]) },
    Primitive { name: "im2col3x3", shape: &[32, 3], aux_shape: &[], op: |g, x, _| g.im2col3x3(x, 2, 4, 4) },
    Primitive { name: "avg_pool2", shape: &[32, 3], aux_shape: &[], op: |g, x, _| g.avg_pool2(x, 2, 4, 4) },
    Primitive { name: "upsample2", shape: &[8, 3], aux_shape: &[], op: |g, x, _| g.upsample2(x, 2, 2, 2) },
    Primitive { name: "masked attention", shape: &[4, 4], aux_shape: &[6, 4], op: |g, q, kv| {
        let mask = Tensor::from_fn(&[4, 2, 3], |i| if i % 3 == 2 && i % 2 == 0 { -1e9 } else { 0.0 });
        let k = g.constant(kv.clone());
        mflow::nn::attention(g, q, k, k, 2, 2, Some(mask))
    } },
    Primitive { name: "attention keys", shape: &[6, 4], aux_shape: &[4, 4], op: |g, kv, q| {
        let q = g.constant(q.clone());
        mflow::nn::attention(g, q, kv, kv, 2, 2, None)
    } },
];

/// Reduces `y` to a scalar with fixed, uneven weights so every output
/// coordinate reaches the gradient with a distinct factor.
pub fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Worst relative error of `p` at input `x` with operand `aux`.
pub fn primitive_error(p: &Primitive, x: &Tensor, aux: &Tensor) -> f64 {
    grad_check(
        |g, v| {
            let y = (p.op)(g, v, aux)?;
            project(g, y)
        },
        x,
        H,
    )
    .unwrap()
}

/// Seeded inputs in `[-2, 2]` for `p`.
pub fn primitive_inputs(p: &Primitive, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng::stream(seed, p.name);
    let x = rng::uniform(&mut r, p.shape, -2.0, 2.0);
    let aux = rng::uniform(&mut r, p.aux_shape, -2.0, 2.0);
    (x, aux)
}

pub fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        channels: 8,
        heads: 2,
        time_dim: 8,
    }
}

/// Worst error over sampled coordinates of `names`, with the loss built
/// by `loss` from a session in which only the probed parameter is live.
pub fn check_params(
    store: &ParamStore,
    names: &[String],
    seed: u64,
    loss: impl Fn(&mut Session) -> Result<Var>,
) -> f64 {
    let frozen = Trainable::Nothing;
    let mut worst = 0.0f64;
    for name in names {
        let x = store.value(name).unwrap().clone();
        let err = grad_check_sampled(
            |g, v| {
                let mut s = Session::new(g, store, &frozen);
                s.bind(name, v);
                loss(&mut s)
            },
            &x,
            H,
            6,
            seed,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

fn probe_names(store: &ParamStore, prefix: &str, every: usize) -> Vec<String> {
    store.names_with_prefix(prefix).step_by(every).cloned().collect()
}

fn scenes(seed: u64, n: usize) -> Vec<Scene> {
    (0..n as u64).map(|i| Scene::from_seed(seed * 100 + i)).collect()
}

/// Full ε-prediction loss of a conditioned UNet-lite, probed over a third
/// of its parameters.
pub fn denoiser_loss_error(seed: u64) -> f64 {
    let reg = Registry::standard(16, 2);
    let spec = reg.get("xray").unwrap();
    let model = Denoiser::new(spec, tiny_config());
    let sched = NoiseSchedule::paper_default();
    let mut store = ParamStore::new();
    model.register(&mut store, seed).unwrap();
    // Start away from the zero-initialized output projections.
    for (name, p) in store.iter().map(|(n, p)| (n.clone(), p.clone())).collect::<Vec<_>>() {
        let mut r = rng::stream(seed, &name);
        let noise = rng::normal(&mut r, p.value.shape()).map(|v| 0.1 * v);
        store.set(name, p.value.zip_map(&noise, |a, b| a + b).unwrap(), p.group);
    }
    let batch: Vec<_> = scenes(seed, 2).iter().map(|s| render_modality(s, "xray").unwrap()).collect();
    let refs: Vec<_> = batch.iter().collect();
    let z0 = encode_rows(spec, &refs).unwrap();
    let mut r = rng::stream(seed, "eps");
    let eps = rng::normal(&mut r, z0.shape());
    let ctx = rng::normal(&mut r, &[2 * 3, 16]);
    let t = [37 + seed as usize * 100, 900];
    let names = probe_names(&store, "", 3);
    check_params(&store, &names, seed, |s| {
        let tok = s.constant(ctx.clone());
        let cond = Conditioning::tokens(tok, 3, vec![false, true]);
        objectives::diffusion_loss(s, &model, &z0, &t, &eps, &cond, &sched)
    })
}

/// InfoNCE (with learnable temperature) and the Barlow VI loss, through
/// the prompt encoders. Returns `(infonce, barlow)`.
pub fn encoder_loss_errors(seed: u64) -> (f64, f64) {
    let reg = Registry::standard(16, 2);
    let mut store = ParamStore::new();
    let enc = [PromptEncoder::new(reg.get("text").unwrap()), PromptEncoder::new(reg.get("ct").unwrap())];
    for e in &enc {
        e.register(&mut store, seed).unwrap();
    }
    store.insert("tau", Tensor::new(vec![1], vec![0.07f64.ln()]).unwrap(), ParamGroup::Encoder).unwrap();
    let sc = scenes(seed, 4);
    let xa: Vec<_> = sc.iter().map(|s| render_modality(s, "text").unwrap()).collect();
    let xb: Vec<_> = sc.iter().map(|s| render_modality(s, "ct").unwrap()).collect();
    let (ra, rb): (Vec<_>, Vec<_>) = (xa.iter().collect(), xb.iter().collect());
    let mut names = probe_names(&store, "enc.", 2);
    names.push("tau".into());
    let contrastive = check_params(&store, &names, seed, |s| {
        let za = enc[0].forward(s, &ra)?;
        let zb = enc[1].forward(s, &rb)?;
        let lt = s.p("tau")?;
        let tau = s.g.exp(lt);
        objectives::infonce_central(s.g, za.unit, zb.unit, tau)
    });
    let barlow = check_params(&store, &probe_names(&store, "enc.ct", 1), seed, |s| {
        let z1 = enc[1].forward(s, &rb)?;
        let z2 = enc[0].forward(s, &ra)?;
        objectives::vi_barlow(s.g, z1.raw, z2.raw, 5e-3)
    });
    (contrastive, barlow)
}

/// The same two losses directly on embeddings. Returns `(infonce, barlow)`.
pub fn embedding_loss_errors(seed: u64) -> (f64, f64) {
    let mut r = rng::stream(seed, "z");
    let za = rng::normal(&mut r, &[5, 6]);
    let zb = rng::normal(&mut r, &[5, 6]);
    let nce = grad_check(
        |g, a| {
            let ua = mflow::nn::l2_normalize(g, a)?;
            let b = g.constant(zb.clone());
            let ub = mflow::nn::l2_normalize(g, b)?;
            let tau = g.constant(Tensor::new(vec![1], vec![0.2]).unwrap());
            objectives::infonce_central(g, ua, ub, tau)
        },
        &za,
        H,
    )
    .unwrap();
    let barlow = grad_check(
        |g, a| {
            let b = g.constant(zb.clone());
            objectives::vi_barlow(g, a, b, 5e-3)
        },
        &za,
        H,
    )
    .unwrap();
    (nce, barlow)
}

/// The cross-guided loss text → xray, probed over the context encoder,
/// the cross-attention sublayers and the adaptation tokens.
pub fn cross_guided_error(seed: u64) -> f64 {
    let reg = Registry::standard(16, 2);
    let (ta, tb) = (reg.get("xray").unwrap(), reg.get("text").unwrap());
    let model = Denoiser::new(ta, tiny_config());
    let v = ContextEncoder::new(tb, 2);
    let sched = NoiseSchedule::paper_default();
    let mut store = ParamStore::new();
    model.register(&mut store, seed).unwrap();
    v.register(&mut store, seed).unwrap();
    store.init_normal(seed, "adapt.text.xray", &[2, 16], 0.5, ParamGroup::Adaptation).unwrap();
    for name in store.names().cloned().collect::<Vec<_>>() {
        if name.ends_with(".out.w") || name.ends_with(".out.conv.w") {
            let p = store.get(&name).unwrap().clone();
            let mut r = rng::stream(seed, &name);
            store.set(name, rng::normal(&mut r, p.value.shape()).map(|x| 0.2 * x), p.group);
        }
    }
    let sc = scenes(seed, 2);
    let xa: Vec<_> = sc.iter().map(|s| render_modality(s, "xray").unwrap()).collect();
    let xb: Vec<_> = sc.iter().map(|s| render_modality(s, "text").unwrap()).collect();
    let z0 = encode_rows(ta, &xa.iter().collect::<Vec<_>>()).unwrap();
    let zb = encode_rows(tb, &xb.iter().collect::<Vec<_>>()).unwrap();
    let mut r = rng::stream(seed, "eps");
    let eps = rng::normal(&mut r, z0.shape());
    let eps_b = rng::normal(&mut r, zb.shape());
    let t = [200 + seed as usize * 50, 700];
    let zbt = objectives::noise_rows(&zb, &t, &eps_b, &sched).unwrap();
    let mut names = probe_names(&store, "ctx.", 1);
    names.extend(model.cross_attention_prefixes().iter().flat_map(|p| probe_names(&store, p, 2)));
    names.push("adapt.text.xray".into());
    check_params(&store, &names, seed, |s| {
        let guide = CrossGuide {
            context: &v,
            partner_zt: &zbt,
            adaptation: "adapt.text.xray",
            use_null: vec![false, false],
        };
        objectives::cross_guided_loss(s, &model, &z0, &t, &eps, &guide, &sched)
    })
}
