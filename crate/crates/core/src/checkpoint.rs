//! "MM2G" checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MM2G" | version u32
//! registry: count u32, then per modality
//!     name str | kind u8 | latent C,H,W u32×3 | context_len u32 | embed_dim u32
//! model: embed_dim, context_len, channels, heads, time_dim, context_heads u32×6
//! schedule: T u32 | β f64×T
//! pairs: count u32, then (str, str)
//! params: count u32, then per parameter
//!     name str | group u8 | dtype u8 (0 = f32) | rank u32 | dims u32×rank | offset u64
//! payload: byte length u64 | f32 values
//! crc32 of every preceding byte
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8.

use std::io::Read;
use std::path::Path;

use crate::data::{read_str, read_u32, write_str};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::modality::{ModalityKind, ModalitySpec, Registry};
use crate::params::{ParamGroup, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::system::{ModelConfig, System};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MM2G";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes `sys` to checkpoint bytes. Values are stored as f32.
pub fn to_bytes(sys: &System) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, sys.registry.specs().len());
    for spec in sys.registry.specs() {
        write_str(&mut out, &spec.name)?;
        out.push(match spec.kind {
            ModalityKind::Image => 0,
            ModalityKind::Text => 1,
        });
        for d in spec.latent_shape {
            put_u32(&mut out, d);
        }
        put_u32(&mut out, spec.context_len);
        put_u32(&mut out, spec.embed_dim);
    }
    let m = &sys.model;
    for v in [
        m.embed_dim,
        m.context_len,
        m.denoiser.channels,
        m.denoiser.heads,
        m.denoiser.time_dim,
        m.context_heads,
    ] {
        put_u32(&mut out, v);
    }
    put_u32(&mut out, sys.schedule.steps());
    for b in sys.schedule.betas() {
        out.extend_from_slice(&b.to_le_bytes());
    }
    put_u32(&mut out, sys.pairs.len());
    for (a, b) in &sys.pairs {
        write_str(&mut out, a)?;
        write_str(&mut out, b)?;
    }
    put_u32(&mut out, sys.store.len());
    let mut offset = 0u64;
    for (name, p) in sys.store.iter() {
        write_str(&mut out, name)?;
        out.push(p.group.tag());
        out.push(DTYPE_F32);
        put_u32(&mut out, p.value.rank());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * p.value.numel() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, p) in sys.store.iter() {
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn truncated(e: Error) -> Error {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Format("checkpoint is truncated".into())
        }
        other => other,
    }
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_usize(r: &mut impl Read) -> Result<usize> {
    Ok(read_u32(r)? as usize)
}

/// Parses checkpoint bytes back into a system.
pub fn from_bytes(bytes: &[u8]) -> Result<System> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an MM2G checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if bytes.len() < 12 {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    parse_body(&body[8..], stored, crc32fast::hash(body)).map_err(truncated)
}

fn parse_body(mut r: &[u8], stored_crc: u32, actual_crc: u32) -> Result<System> {
    let r = &mut r;
    let n_specs = read_usize(r)?;
    let mut specs = Vec::with_capacity(n_specs.min(64));
    for _ in 0..n_specs {
        let name = read_str(r)?;
        let kind = match read_u8(r)? {
            0 => ModalityKind::Image,
            1 => ModalityKind::Text,
            k => return Err(Error::Format(format!("unknown modality kind {k}"))),
        };
        let latent_shape = [read_usize(r)?, read_usize(r)?, read_usize(r)?];
        let context_len = read_usize(r)?;
        let embed_dim = read_usize(r)?;
        specs.push(ModalitySpec {
            name,
            kind,
            latent_shape,
            context_len,
            embed_dim,
        });
    }
    let mut m = [0usize; 6];
    for v in m.iter_mut() {
        *v = read_usize(r)?;
    }
    let model = ModelConfig {
        embed_dim: m[0],
        context_len: m[1],
        denoiser: DenoiserConfig {
            channels: m[2],
            heads: m[3],
            time_dim: m[4],
        },
        context_heads: m[5],
    };
    let t = read_usize(r)?;
    let mut betas = Vec::with_capacity(t.min(1 << 20));
    for _ in 0..t {
        betas.push(f64::from_bits(read_u64(r)?));
    }
    let n_pairs = read_usize(r)?;
    let mut pairs = Vec::new();
    for _ in 0..n_pairs {
        pairs.push((read_str(r)?, read_str(r)?));
    }
    let n_params = read_usize(r)?;
    let mut table = Vec::new();
    for _ in 0..n_params {
        let name = read_str(r)?;
        let group = ParamGroup::from_tag(read_u8(r)?)
            .ok_or_else(|| Error::Format(format!("bad group tag for `{name}`")))?;
        let dtype = read_u8(r)?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype {dtype} for `{name}`")));
        }
        let rank = read_usize(r)?;
        let shape = (0..rank).map(|_| read_usize(r)).collect::<Result<Vec<_>>>()?;
        let offset = read_u64(r)?;
        table.push((name, group, shape, offset));
    }
    let payload_len = read_u64(r)? as usize;
    if r.len() < payload_len {
        return Err(Error::Format("checkpoint is truncated".into()));
    }
    if r.len() > payload_len {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    if stored_crc != actual_crc {
        return Err(Error::Integrity(format!(
            "CRC mismatch: stored {stored_crc:08x}, computed {actual_crc:08x}"
        )));
    }
    let payload = *r;
    let mut store = ParamStore::new();
    for (name, group, shape, offset) in table {
        let numel: usize = shape.iter().product();
        let start = offset as usize;
        let end = start + 4 * numel;
        if end > payload.len() {
            return Err(Error::Format(format!("`{name}` runs past the payload")));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        store.insert(name, Tensor::new(shape, data)?, group)?;
    }
    let registry = Registry::new(specs)?;
    let schedule = NoiseSchedule::from_betas(betas)?;
    let pair_refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let mut sys = System::new(registry, model, schedule, &pair_refs, 0)?;
    sys.load_params(store)?;
    Ok(sys)
}

pub fn save_checkpoint(sys: &System, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, to_bytes(sys)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<System> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> System {
        let model = ModelConfig {
            embed_dim: 8,
            context_len: 2,
            denoiser: DenoiserConfig {
                channels: 4,
                heads: 2,
                time_dim: 4,
            },
            context_heads: 2,
        };
        System::standard(model, 5).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let sys = tiny();
        let bytes = to_bytes(&sys).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        for (name, p) in sys.store.iter() {
            let q = back.store.get(name).unwrap();
            assert_eq!(q.group, p.group);
            for (a, b) in p.value.data().iter().zip(q.value.data()) {
                assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
            }
        }
        assert_eq!(back.schedule, sys.schedule);
        assert_eq!(back.pairs, sys.pairs);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = to_bytes(&tiny()).unwrap();
        let mut flipped = bytes.clone();
        let i = bytes.len() - 10;
        flipped[i] ^= 0x01;
        assert!(matches!(from_bytes(&flipped), Err(Error::Integrity(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(from_bytes(&magic), Err(Error::Format(_))));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(from_bytes(&version), Err(Error::Format(_))));
        for cut in [6, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }
}
