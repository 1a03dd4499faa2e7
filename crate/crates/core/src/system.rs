//! The full multi-modal model: prompt encoders, diffusers, context
//! encoders and guided adaptations over one parameter store.

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::encoders::{self, adaptation_name, ContextEncoder, PromptEncoder};
use crate::error::{Error, Result};
use crate::modality::Registry;
use crate::objectives::{DEFAULT_TAU, TAU_RANGE};
use crate::params::{ParamGroup, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub const HUB: &str = "text";
pub const DEFAULT_PAIRS: [(&str, &str); 3] = [("text", "xray"), ("text", "ct"), ("ct", "mri")];
pub const LOG_TAU: &str = "align.log_tau";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub context_len: usize,
    pub denoiser: DenoiserConfig,
    pub context_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            context_len: 4,
            denoiser: DenoiserConfig::default(),
            context_heads: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct System {
    pub registry: Registry,
    pub model: ModelConfig,
    pub schedule: NoiseSchedule,
    /// Modality pairs that get guided adaptations in both directions.
    pub pairs: Vec<(String, String)>,
    pub store: ParamStore,
}

impl System {
    pub fn new(
        registry: Registry,
        model: ModelConfig,
        schedule: NoiseSchedule,
        pairs: &[(&str, &str)],
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        for spec in registry.specs() {
            PromptEncoder::new(spec).register(&mut store, seed)?;
            ContextEncoder::new(spec, model.context_heads).register(&mut store, seed)?;
            Denoiser::new(spec, model.denoiser).register(&mut store, seed)?;
            encoders::register_femb(&mut store, spec, seed)?;
        }
        let mut owned = Vec::new();
        for &(a, b) in pairs {
            let (sa, sb) = (registry.get(a)?, registry.get(b)?);
            for (partner, target) in [(sa, sb), (sb, sa)] {
                let name = adaptation_name(&partner.name, &target.name);
                let shape = [target.context_len, target.embed_dim];
                store.init_const(&name, &shape, 0.0, ParamGroup::Adaptation)?;
            }
            owned.push((a.to_string(), b.to_string()));
        }
        store.init_const(LOG_TAU, &[1], DEFAULT_TAU.ln(), ParamGroup::Encoder)?;
        Ok(Self {
            registry,
            model,
            schedule,
            pairs: owned,
            store,
        })
    }

    /// Four standard modalities, the paper schedule and the default pairs.
    pub fn standard(model: ModelConfig, seed: u64) -> Result<Self> {
        let registry = Registry::standard(model.embed_dim, model.context_len);
        Self::new(registry, model, NoiseSchedule::paper_default(), &DEFAULT_PAIRS, seed)
    }

    pub fn encoder(&self, m: &str) -> Result<PromptEncoder> {
        Ok(PromptEncoder::new(self.registry.get(m)?))
    }

    pub fn context(&self, m: &str) -> Result<ContextEncoder> {
        Ok(ContextEncoder::new(self.registry.get(m)?, self.model.context_heads))
    }

    pub fn denoiser(&self, m: &str) -> Result<Denoiser> {
        Ok(Denoiser::new(self.registry.get(m)?, self.model.denoiser))
    }

    pub fn has_adaptation(&self, partner: &str, target: &str) -> bool {
        self.store.contains(&adaptation_name(partner, target))
    }

    pub fn tau(&self) -> f64 {
        self.store.value(LOG_TAU).map_or(DEFAULT_TAU, |t| t.item().exp())
    }

    /// Keeps the learned temperature inside its allowed range.
    pub fn clamp_tau(&mut self) -> Result<()> {
        let (lo, hi) = (TAU_RANGE.0.ln(), TAU_RANGE.1.ln());
        let v = self.store.value_mut(LOG_TAU)?;
        let c = v.item().clamp(lo, hi);
        *v = Tensor::new(vec![1], vec![c])?;
        Ok(())
    }

    /// Replaces every parameter with the same-named one from `other`.
    pub fn load_params(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in self.store.iter() {
            let q = other.get(name)?;
            if q.value.shape() != p.value.shape() || q.group != p.group {
                return Err(Error::Param(format!("checkpoint parameter `{name}` does not match")));
            }
        }
        if other.len() != self.store.len() {
            return Err(Error::Param("checkpoint has extra parameters".into()));
        }
        self.store = other;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_system_registers_everything() {
        let s = System::standard(ModelConfig::default(), 3).unwrap();
        for (a, b) in DEFAULT_PAIRS {
            assert!(s.has_adaptation(a, b) && s.has_adaptation(b, a));
        }
        assert!(!s.has_adaptation("xray", "mri"));
        assert!((s.tau() - 0.07).abs() < 1e-12);
        let again = System::standard(ModelConfig::default(), 3).unwrap();
        assert_eq!(s.store, again.store);
    }

    #[test]
    fn tau_clamp() {
        let mut s = System::standard(ModelConfig::default(), 3).unwrap();
        *s.store.value_mut(LOG_TAU).unwrap() = Tensor::new(vec![1], vec![5.0]).unwrap();
        s.clamp_tau().unwrap();
        assert!((s.tau() - 0.5).abs() < 1e-12);
    }
}
