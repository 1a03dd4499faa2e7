//! Modality descriptions and the latent autoencoders.

use crate::data::{self, Sample, IMAGE_SIZE, INTENSITY_BINS, POS_BINS, RADIUS_BINS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModalityKind {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    /// `[channels, height, width]`.
    pub latent_shape: [usize; 3],
    /// Tokens this modality presents to a partner's cross-attention.
    pub context_len: usize,
    /// Shared alignment width.
    pub embed_dim: usize,
}

impl ModalitySpec {
    pub fn latent_channels(&self) -> usize {
        self.latent_shape[0]
    }

    /// Spatial positions of the latent, i.e. its token count.
    pub fn latent_tokens(&self) -> usize {
        self.latent_shape[1] * self.latent_shape[2]
    }

    pub fn latent_numel(&self) -> usize {
        self.latent_shape.iter().product()
    }
}

/// Registered modalities; all share one `embed_dim`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Registry {
    specs: Vec<ModalitySpec>,
}

impl Registry {
    pub fn new(specs: Vec<ModalitySpec>) -> Result<Self> {
        if let Some(first) = specs.first() {
            for s in &specs {
                if s.embed_dim != first.embed_dim {
                    return Err(Error::Param(format!(
                        "modality `{}` has embed_dim {} but `{}` has {}",
                        s.name, s.embed_dim, first.name, first.embed_dim
                    )));
                }
                if s.latent_shape.contains(&0) || s.context_len == 0 {
                    return Err(Error::Param(format!("modality `{}` has empty extents", s.name)));
                }
            }
        }
        for (i, s) in specs.iter().enumerate() {
            if specs[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Param(format!("modality `{}` registered twice", s.name)));
            }
        }
        Ok(Self { specs })
    }

    /// text (d×1×1) plus xray, ct and mri (4×8×8).
    pub fn standard(embed_dim: usize, context_len: usize) -> Self {
        let image = |name: &str| ModalitySpec {
            name: name.into(),
            kind: ModalityKind::Image,
            latent_shape: [4, IMAGE_SIZE / 2, IMAGE_SIZE / 2],
            context_len,
            embed_dim,
        };
        Self::new(vec![
            ModalitySpec {
                name: "text".into(),
                kind: ModalityKind::Text,
                latent_shape: [embed_dim, 1, 1],
                context_len,
                embed_dim,
            },
            image("xray"),
            image("ct"),
            image("mri"),
        ])
        .expect("standard registry is valid")
    }

    pub fn get(&self, name: &str) -> Result<&ModalitySpec> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    pub fn specs(&self) -> &[ModalitySpec] {
        &self.specs
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    pub fn embed_dim(&self) -> usize {
        self.specs.first().map_or(0, |s| s.embed_dim)
    }
}

/// Maps raw samples to diffusion latents (`C×H×W`) and back.
pub trait Autoencoder {
    fn encode(&self, x: &Sample) -> Result<Tensor>;
    fn decode(&self, z: &Tensor) -> Result<Sample>;
}

/// Lossless space-to-depth rearrangement `1×2H×2W ↔ 4×H×W`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityImageCodec;

impl Autoencoder for IdentityImageCodec {
    fn encode(&self, x: &Sample) -> Result<Tensor> {
        let img = x
            .image()
            .ok_or_else(|| Error::Param("image codec given text".into()))?;
        let s = img.shape();
        if s.len() != 3 || s[0] != 1 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::shape("image encode", s, &[1, IMAGE_SIZE, IMAGE_SIZE]));
        }
        let (h, w) = (s[1] / 2, s[2] / 2);
        let d = img.data();
        Ok(Tensor::from_fn(&[4, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            d[(2 * y + c / 2) * s[2] + 2 * x + c % 2]
        }))
    }

    fn decode(&self, z: &Tensor) -> Result<Sample> {
        let s = z.shape();
        if s.len() != 3 || s[0] != 4 {
            return Err(Error::shape("image decode", s, &[4, IMAGE_SIZE / 2, IMAGE_SIZE / 2]));
        }
        let (h, w) = (s[1], s[2]);
        let d = z.data();
        Ok(Sample::Image(Tensor::from_fn(&[1, 2 * h, 2 * w], |i| {
            let (py, px) = (i / (2 * w), i % (2 * w));
            let c = (py % 2) * 2 + px % 2;
            d[(c * h + py / 2) * w + px / 2]
        })))
    }
}

/// Fixed structured code for the token description.
///
/// A 16-slot block holds the blob count and, per blob slot, a presence flag
/// and the four quantized fields scaled to `[-1, 1]`. The block is repeated
/// to fill the latent width; decoding averages the copies and rounds.
#[derive(Clone, Copy, Debug)]
pub struct TextCodec {
    pub width: usize,
}

const TEXT_BLOCK: usize = 16;

fn to_unit(q: usize, bins: usize) -> f64 {
    let half = (bins - 1) as f64 / 2.0;
    (q as f64 - half) / half
}

fn from_unit(v: f64, bins: usize) -> usize {
    let half = (bins - 1) as f64 / 2.0;
    (v * half + half).round().clamp(0.0, (bins - 1) as f64) as usize
}

fn parse_fields(tokens: &[String]) -> Result<Vec<[usize; 4]>> {
    let bad = |t: &str| Error::Format(format!("unexpected token `{t}`"));
    let mut blobs = Vec::new();
    let mut it = tokens.iter().skip(1);
    while let Some(tok) = it.next() {
        if tok != "at" {
            return Err(bad(tok));
        }
        let pos = it.next().ok_or_else(|| bad("<eof>"))?;
        let (x, y) = pos
            .trim_start_matches('(')
            .trim_end_matches(')')
            .split_once(',')
            .ok_or_else(|| bad(pos))?;
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(s));
        let r = it.next().ok_or_else(|| bad("<eof>"))?;
        let i = it.next().ok_or_else(|| bad("<eof>"))?;
        blobs.push([
            num(x)?,
            num(y)?,
            num(r.strip_prefix("r=").ok_or_else(|| bad(r))?)?,
            num(i.strip_prefix("i=").ok_or_else(|| bad(i))?)?,
        ]);
    }
    Ok(blobs)
}

impl TextCodec {
    pub fn new(width: usize) -> Self {
        Self { width }
    }
}

impl Autoencoder for TextCodec {
    fn encode(&self, x: &Sample) -> Result<Tensor> {
        let tokens = x
            .tokens()
            .ok_or_else(|| Error::Param("text codec given an image".into()))?;
        let count: usize = tokens
            .first()
            .and_then(|t| t.strip_prefix("blobs="))
            .and_then(|n| n.parse().ok())
            .filter(|n| (1..=3).contains(n))
            .ok_or_else(|| Error::Format(format!("bad text header {:?}", tokens.first())))?;
        let blobs = parse_fields(tokens)?;
        if blobs.len() != count {
            return Err(Error::Format(format!("header says {count} blobs, found {}", blobs.len())));
        }
        let mut block = [0.0; TEXT_BLOCK];
        block[0] = count as f64 - 2.0;
        for slot in 0..3 {
            let base = 1 + slot * 5;
            match blobs.get(slot) {
                Some(&[x, y, r, i]) => {
                    block[base] = 1.0;
                    block[base + 1] = to_unit(x, POS_BINS);
                    block[base + 2] = to_unit(y, POS_BINS);
                    block[base + 3] = to_unit(r, RADIUS_BINS);
                    block[base + 4] = to_unit(i, INTENSITY_BINS);
                }
                None => block[base] = -1.0,
            }
        }
        Ok(Tensor::from_fn(&[self.width, 1, 1], |k| block[k % TEXT_BLOCK]))
    }

    fn decode(&self, z: &Tensor) -> Result<Sample> {
        if z.numel() != self.width || self.width < TEXT_BLOCK {
            return Err(Error::shape("text decode", z.shape(), &[self.width, 1, 1]));
        }
        let mut block = [0.0; TEXT_BLOCK];
        let mut counts = [0usize; TEXT_BLOCK];
        for (k, v) in z.data().iter().enumerate() {
            block[k % TEXT_BLOCK] += v;
            counts[k % TEXT_BLOCK] += 1;
        }
        for (b, c) in block.iter_mut().zip(counts) {
            *b /= c as f64;
        }
        let count = (block[0] + 2.0).round().clamp(1.0, 3.0) as usize;
        let mut tokens = vec![format!("blobs={count}")];
        for slot in 0..count {
            let base = 1 + slot * 5;
            tokens.push("at".into());
            tokens.push(format!(
                "({},{})",
                from_unit(block[base + 1], POS_BINS),
                from_unit(block[base + 2], POS_BINS)
            ));
            tokens.push(format!("r={}", from_unit(block[base + 3], RADIUS_BINS)));
            tokens.push(format!("i={}", from_unit(block[base + 4], INTENSITY_BINS)));
        }
        Ok(Sample::Text(tokens))
    }
}

/// Autoencoder matching a modality kind.
pub fn codec_for(spec: &ModalitySpec) -> Box<dyn Autoencoder + Send + Sync> {
    match spec.kind {
        ModalityKind::Image => Box::new(IdentityImageCodec),
        ModalityKind::Text => Box::new(TextCodec::new(spec.latent_channels())),
    }
}

/// Latent `C×H×W` → token rows `[H*W, C]`.
pub fn latent_to_rows(z: &Tensor) -> Vec<f64> {
    let s = z.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let d = z.data();
    (0..hw * c).map(|i| d[(i % c) * hw + i / c]).collect()
}

/// Token rows `[H*W, C]` → latent `C×H×W`.
pub fn rows_to_latent(rows: &[f64], shape: [usize; 3]) -> Tensor {
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    Tensor::from_fn(&shape, |i| rows[(i % hw) * c + i / hw])
}

/// Encodes a batch of samples into stacked token rows `[B*H*W, C]`.
pub fn encode_rows(spec: &ModalitySpec, samples: &[&Sample]) -> Result<Tensor> {
    let codec = codec_for(spec);
    let mut out = Vec::with_capacity(samples.len() * spec.latent_numel());
    for s in samples {
        let z = codec.encode(s)?;
        if z.shape() != spec.latent_shape {
            return Err(Error::shape("encode_rows", z.shape(), &spec.latent_shape));
        }
        out.extend(latent_to_rows(&z));
    }
    Tensor::new(
        vec![samples.len() * spec.latent_tokens(), spec.latent_channels()],
        out,
    )
}

/// Renders and encodes a scene directly to latent rows.
pub fn scene_latent_rows(spec: &ModalitySpec, scene: &data::Scene) -> Result<Vec<f64>> {
    let sample = data::render_modality(scene, &spec.name)?;
    Ok(latent_to_rows(&codec_for(spec).encode(&sample)?))
}
