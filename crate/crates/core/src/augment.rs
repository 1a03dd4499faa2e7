//! Label-preserving view augmentations for the visual-invariant loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Sample;
use crate::tensor::Tensor;

pub const FLIP_PROB: f64 = 0.5;
pub const MAX_SHIFT: i64 = 1;
pub const PIXEL_NOISE: f64 = 0.05;
pub const TOKEN_DROP: f64 = 0.1;

/// Random horizontal flip, integer translation within ±1 pixel (edge
/// replicated) and additive Gaussian noise.
pub fn augment_image(img: &Tensor, rng: &mut impl Rng) -> Tensor {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let flip = rng.random_bool(FLIP_PROB);
    let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
    let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
    let d = img.data();
    Tensor::from_fn(s, |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let x = if flip { w - 1 - x } else { x };
        let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
        let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
        d[ch * h * w + sy * w + sx] + PIXEL_NOISE * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Drops each token independently; never returns an empty sequence.
pub fn augment_tokens(tokens: &[String], rng: &mut impl Rng) -> Vec<String> {
    let kept: Vec<String> = tokens
        .iter()
        .filter(|_| !rng.random_bool(TOKEN_DROP))
        .cloned()
        .collect();
    if kept.is_empty() {
        tokens[..1.min(tokens.len())].to_vec()
    } else {
        kept
    }
}

pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    match sample {
        Sample::Image(t) => Sample::Image(augment_image(t, rng)),
        Sample::Text(toks) => Sample::Text(augment_tokens(toks, rng)),
    }
}
