//! Synthetic paired pseudo-modalities.
//!
//! A [`Scene`] is a handful of blobs on the unit square. Each modality is a
//! different deterministic rendering of the same scene, so samples rendered
//! from one scene form a natural pair.

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 16;
pub const MAX_TEXT_TOKENS: usize = 16;
pub const POS_BINS: usize = 8;
pub const RADIUS_BINS: usize = 4;
pub const INTENSITY_BINS: usize = 4;

const RADIUS_RANGE: (f64, f64) = (0.05, 0.2);
const INTENSITY_RANGE: (f64, f64) = (0.3, 1.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub blobs: Vec<Blob>,
}

impl Scene {
    pub fn from_seed(seed: u64) -> Self {
        let mut r = rng::stream(seed, "scene");
        let n = r.random_range(1..=3);
        let blobs = (0..n)
            .map(|_| Blob {
                cx: r.random_range(0.0..1.0),
                cy: r.random_range(0.0..1.0),
                radius: r.random_range(RADIUS_RANGE.0..RADIUS_RANGE.1),
                intensity: r.random_range(INTENSITY_RANGE.0..INTENSITY_RANGE.1),
            })
            .collect();
        Self { seed, blobs }
    }
}

/// Raw (pre-autoencoder) sample of one modality.
#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    /// `1×16×16` image in `[0, 1]`.
    Image(Tensor),
    Text(Vec<String>),
}

impl Sample {
    pub fn image(&self) -> Option<&Tensor> {
        match self {
            Sample::Image(t) => Some(t),
            Sample::Text(_) => None,
        }
    }

    pub fn tokens(&self) -> Option<&[String]> {
        match self {
            Sample::Text(t) => Some(t),
            Sample::Image(_) => None,
        }
    }
}

fn quantize(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    (((v - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize
}

/// Quantized blob description `(qx, qy, qr, qi)`.
pub fn quantized(blob: &Blob) -> (usize, usize, usize, usize) {
    (
        quantize(blob.cx, 0.0, 1.0, POS_BINS),
        quantize(blob.cy, 0.0, 1.0, POS_BINS),
        quantize(blob.radius, RADIUS_RANGE.0, RADIUS_RANGE.1, RADIUS_BINS),
        quantize(blob.intensity, INTENSITY_RANGE.0, INTENSITY_RANGE.1, INTENSITY_BINS),
    )
}

/// Soft Gaussian render shared by all image modalities.
pub fn render_xray(scene: &Scene) -> Tensor {
    let n = IMAGE_SIZE;
    Tensor::from_fn(&[1, n, n], |i| {
        let (py, px) = (i / n, i % n);
        let (x, y) = ((px as f64 + 0.5) / n as f64, (py as f64 + 0.5) / n as f64);
        let v: f64 = scene
            .blobs
            .iter()
            .map(|b| {
                let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                b.intensity * (-d2 / (2.0 * b.radius * b.radius)).exp()
            })
            .sum();
        v.clamp(0.0, 1.0)
    })
}

/// CT before edge sharpening: the inverted xray render.
pub fn render_ct_inverted(scene: &Scene) -> Tensor {
    render_xray(scene).map(|v| 1.0 - v)
}

/// CT: inversion followed by an unsharp mask (3×3 box blur, gain 1).
pub fn render_ct(scene: &Scene) -> Tensor {
    let inv = render_ct_inverted(scene);
    let n = IMAGE_SIZE as isize;
    let d = inv.data();
    let at = |y: isize, x: isize| d[(y.clamp(0, n - 1) * n + x.clamp(0, n - 1)) as usize];
    Tensor::from_fn(&[1, IMAGE_SIZE, IMAGE_SIZE], |i| {
        let (y, x) = ((i as isize) / n, (i as isize) % n);
        let mut blur = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                blur += at(y + dy, x + dx);
            }
        }
        let v = d[i];
        (v + (v - blur / 9.0)).clamp(0.0, 1.0)
    })
}

/// MRI: gamma 0.5 with a fixed multiplicative texture.
pub fn render_mri(scene: &Scene) -> Tensor {
    let n = IMAGE_SIZE;
    let xr = render_xray(scene);
    Tensor::from_fn(&[1, n, n], |i| {
        let (py, px) = ((i / n) as f64, (i % n) as f64);
        let texture = 0.5 + 0.5 * (1.3 * px).sin() * (0.9 * py + 0.4).cos();
        (xr.data()[i].sqrt() * (0.85 + 0.15 * texture)).clamp(0.0, 1.0)
    })
}

/// Token description: `blobs=N` then `at (qx,qy) r=qr i=qi` per blob in
/// reading order.
pub fn render_text(scene: &Scene) -> Vec<String> {
    let mut q: Vec<_> = scene.blobs.iter().map(quantized).collect();
    q.sort_by_key(|&(x, y, r, i)| (y, x, r, i));
    let mut tokens = vec![format!("blobs={}", q.len())];
    for (x, y, r, i) in q {
        tokens.push("at".into());
        tokens.push(format!("({x},{y})"));
        tokens.push(format!("r={r}"));
        tokens.push(format!("i={i}"));
    }
    tokens
}

pub fn render_modality(scene: &Scene, modality: &str) -> Result<Sample> {
    Ok(match modality {
        "xray" => Sample::Image(render_xray(scene)),
        "ct" => Sample::Image(render_ct(scene)),
        "mri" => Sample::Image(render_mri(scene)),
        "text" => Sample::Text(render_text(scene)),
        other => return Err(Error::UnknownModality(other.to_string())),
    })
}

/// Closed token vocabulary of the text pseudo-modality.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = (1..=3).map(|n| format!("blobs={n}")).collect();
    v.push("at".into());
    for y in 0..POS_BINS {
        for x in 0..POS_BINS {
            v.push(format!("({x},{y})"));
        }
    }
    v.extend((0..RADIUS_BINS).map(|r| format!("r={r}")));
    v.extend((0..INTENSITY_BINS).map(|i| format!("i={i}")));
    v
}

pub fn token_id(token: &str) -> Option<usize> {
    // The vocabulary is tiny; a linear scan keeps this allocation-free.
    thread_local! {
        static VOCAB: Vec<String> = vocabulary();
    }
    VOCAB.with(|v| v.iter().position(|t| t == token))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Scene seed ranges. Validation scenes come from one shared range far
/// from every training range, so a validation seed never trains anything.
pub fn seed_range(data_seed: u64, pair_index: usize, split: Split, count: usize) -> Range<u64> {
    let base = data_seed * 10_000_000;
    let start = match split {
        Split::Train => base + pair_index as u64 * 1_000_000,
        Split::Val => base + 9_000_000,
    };
    start..start + count as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedItem {
    pub seed: u64,
    pub a: Sample,
    pub b: Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub pair: (String, String),
    pub split: Split,
    pub items: Vec<PairedItem>,
}

const DATA_MAGIC: &[u8; 4] = b"MM2D";
const DATA_VERSION: u32 = 1;

impl PairedDataset {
    pub fn generate(a: &str, b: &str, split: Split, seeds: Range<u64>) -> Result<Self> {
        let items = seeds
            .map(|seed| {
                let scene = Scene::from_seed(seed);
                Ok(PairedItem {
                    seed,
                    a: render_modality(&scene, a)?,
                    b: render_modality(&scene, b)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            pair: (a.to_string(), b.to_string()),
            split,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Samples of one side of the pair, by modality name.
    pub fn side(&self, modality: &str) -> Result<Vec<&Sample>> {
        if modality == self.pair.0 {
            Ok(self.items.iter().map(|it| &it.a).collect())
        } else if modality == self.pair.1 {
            Ok(self.items.iter().map(|it| &it.b).collect())
        } else {
            Err(Error::UnknownModality(modality.to_string()))
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATA_MAGIC)?;
        w.write_all(&DATA_VERSION.to_le_bytes())?;
        write_str(w, &self.pair.0)?;
        write_str(w, &self.pair.1)?;
        w.write_all(&[matches!(self.split, Split::Val) as u8])?;
        w.write_all(&(self.items.len() as u32).to_le_bytes())?;
        for it in &self.items {
            w.write_all(&it.seed.to_le_bytes())?;
            write_sample(w, &it.a)?;
            write_sample(w, &it.b)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATA_MAGIC {
            return Err(Error::Format("not a paired dataset file".into()));
        }
        let version = read_u32(r)?;
        if version != DATA_VERSION {
            return Err(Error::Format(format!("dataset version {version}")));
        }
        let a = read_str(r)?;
        let b = read_str(r)?;
        let mut split = [0u8];
        r.read_exact(&mut split)?;
        let n = read_u32(r)? as usize;
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            let mut seed = [0u8; 8];
            r.read_exact(&mut seed)?;
            items.push(PairedItem {
                seed: u64::from_le_bytes(seed),
                a: read_sample(r)?,
                b: read_sample(r)?,
            });
        }
        Ok(Self {
            pair: (a, b),
            split: if split[0] == 1 { Split::Val } else { Split::Train },
            items,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Paired datasets in insertion order, looked up by unordered pair.
#[derive(Clone, Debug, Default)]
pub struct Datasets {
    sets: Vec<PairedDataset>,
}

impl Datasets {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `ds`, replacing any dataset for the same pair.
    pub fn insert(&mut self, ds: PairedDataset) {
        let (a, b) = (ds.pair.0.clone(), ds.pair.1.clone());
        match self.sets.iter().position(|d| same_pair(d, &a, &b)) {
            Some(i) => self.sets[i] = ds,
            None => self.sets.push(ds),
        }
    }

    pub fn get(&self, a: &str, b: &str) -> Option<&PairedDataset> {
        self.sets.iter().find(|d| same_pair(d, a, b))
    }

    pub fn require(&self, a: &str, b: &str) -> Result<&PairedDataset> {
        self.get(a, b)
            .ok_or_else(|| Error::Coverage(format!("no paired dataset for {a}-{b}")))
    }

    pub fn pairs(&self) -> impl Iterator<Item = &(String, String)> {
        self.sets.iter().map(|d| &d.pair)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PairedDataset> {
        self.sets.iter()
    }

    /// Every sample of `modality` across all datasets, in key order.
    pub fn samples_of(&self, modality: &str) -> Vec<&Sample> {
        self.sets
            .iter()
            .filter_map(|d| d.side(modality).ok())
            .flatten()
            .collect()
    }
}

fn same_pair(d: &PairedDataset, a: &str, b: &str) -> bool {
    (d.pair.0 == a && d.pair.1 == b) || (d.pair.0 == b && d.pair.1 == a)
}

pub(crate) fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::Format(format!("string length {n} too large")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn write_sample(w: &mut impl Write, s: &Sample) -> Result<()> {
    match s {
        Sample::Image(t) => {
            w.write_all(&[0])?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Sample::Text(tokens) => {
            w.write_all(&[1])?;
            w.write_all(&(tokens.len() as u32).to_le_bytes())?;
            for t in tokens {
                write_str(w, t)?;
            }
        }
    }
    Ok(())
}

fn read_sample(r: &mut impl Read) -> Result<Sample> {
    let mut tag = [0u8];
    r.read_exact(&mut tag)?;
    match tag[0] {
        0 => {
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("image rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel > 1 << 24 {
                return Err(Error::Format("image too large".into()));
            }
            let mut data = Vec::with_capacity(numel);
            let mut b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            Ok(Sample::Image(Tensor::new(shape, data)?))
        }
        1 => {
            let n = read_u32(r)? as usize;
            if n > MAX_TEXT_TOKENS * 4 {
                return Err(Error::Format(format!("{n} tokens")));
            }
            Ok(Sample::Text((0..n).map(|_| read_str(r)).collect::<Result<_>>()?))
        }
        t => Err(Error::Format(format!("unknown sample tag {t}"))),
    }
}
