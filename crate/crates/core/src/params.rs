//! Named parameter storage and per-step graph binding.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

/// Coarse role of a parameter; drives optimizer groups and freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Prompt encoders `C_M`.
    Encoder,
    /// Denoiser weights outside the cross-attention sublayers.
    Backbone,
    /// Cross-attention sublayers `θ_c`, including their null token.
    CrossAttention,
    /// Context encoders `V_M`.
    ContextEncoder,
    /// Guided-adaptation tokens `f_B`.
    Adaptation,
    /// The embedding layer used to initialize adaptations.
    Embedding,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Encoder => 0,
            ParamGroup::Backbone => 1,
            ParamGroup::CrossAttention => 2,
            ParamGroup::ContextEncoder => 3,
            ParamGroup::Adaptation => 4,
            ParamGroup::Embedding => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamGroup::Encoder,
            1 => ParamGroup::Backbone,
            2 => ParamGroup::CrossAttention,
            3 => ParamGroup::ContextEncoder,
            4 => ParamGroup::Adaptation,
            5 => ParamGroup::Embedding,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
}

/// All learnable state of the system, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Param(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, group });
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) {
        self.params.insert(name.into(), Param { value, group });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Param(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Param(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.params
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k)
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    // ---- initializers ---------------------------------------------------

    /// Uniform in `±1/√fan_in`, drawn from a stream keyed by the name.
    pub fn init_uniform(
        &mut self,
        seed: u64,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        group: ParamGroup,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = rng::uniform(&mut rng::stream(seed, name), shape, -bound, bound);
        self.insert(name, value, group)
    }

    pub fn init_normal(
        &mut self,
        seed: u64,
        name: &str,
        shape: &[usize],
        std: f64,
        group: ParamGroup,
    ) -> Result<()> {
        let value = rng::normal(&mut rng::stream(seed, name), shape).map(|v| v * std);
        self.insert(name, value, group)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f64, group: ParamGroup) -> Result<()> {
        self.insert(name, Tensor::full(shape, v), group)
    }

    /// Weight `[fan_in, fan_out]` and bias `[fan_out]` under `prefix.w` /
    /// `prefix.b`. With `zero` both start at zero.
    pub fn init_linear(
        &mut self,
        seed: u64,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
        group: ParamGroup,
    ) -> Result<()> {
        let w = format!("{prefix}.w");
        if zero {
            self.init_const(&w, &[fan_in, fan_out], 0.0, group)?;
        } else {
            self.init_uniform(seed, &w, &[fan_in, fan_out], fan_in, group)?;
        }
        self.init_const(&format!("{prefix}.b"), &[fan_out], 0.0, group)
    }

    /// Affine layer-norm parameters `prefix.g` (ones) and `prefix.b` (zeros).
    pub fn init_norm(&mut self, prefix: &str, width: usize, group: ParamGroup) -> Result<()> {
        self.init_const(&format!("{prefix}.g"), &[width], 1.0, group)?;
        self.init_const(&format!("{prefix}.b"), &[width], 0.0, group)
    }
}

/// Which parameters receive gradients in a step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Trainable {
    #[default]
    Nothing,
    Everything,
    Only(BTreeSet<String>),
}

impl Trainable {
    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Everything => true,
            Trainable::Only(set) => set.contains(name),
        }
    }

    /// Every stored parameter whose name starts with one of `prefixes`.
    pub fn prefixes<S: AsRef<str>>(store: &ParamStore, prefixes: &[S]) -> Self {
        let set = store
            .names()
            .filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_ref())))
            .cloned()
            .collect();
        Trainable::Only(set)
    }

    pub fn names<'a>(&'a self, store: &'a ParamStore) -> Vec<&'a String> {
        store.names().filter(|n| self.contains(n)).collect()
    }
}

/// Binds stored parameters into one graph for one step.
///
/// Trainable parameters become gradient-tracking leaves; all others enter
/// as constants, so frozen weights never produce gradients.
pub struct Session<'a> {
    pub g: &'a mut Graph,
    store: &'a ParamStore,
    trainable: &'a Trainable,
    bound: HashMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, trainable: &'a Trainable) -> Self {
        Self {
            g,
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph node for parameter `name`, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.value(name)?.clone();
        let v = self.g.leaf(value, self.trainable.contains(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Substitutes an existing node for parameter `name`.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// Gradients of all bound trainable parameters after `backward`.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(name, _)| self.trainable.contains(name))
            .filter_map(|(name, &v)| self.g.grad(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.init_const("a", &[1], 0.0, ParamGroup::Backbone).unwrap();
        assert!(s.init_const("a", &[1], 0.0, ParamGroup::Backbone).is_err());
    }

    #[test]
    fn init_is_keyed_by_name() {
        let mut s = ParamStore::new();
        s.init_uniform(1, "x", &[8], 4, ParamGroup::Backbone).unwrap();
        s.init_uniform(1, "y", &[8], 4, ParamGroup::Backbone).unwrap();
        let mut t = ParamStore::new();
        t.init_uniform(1, "x", &[8], 4, ParamGroup::Backbone).unwrap();
        assert_eq!(s.value("x").unwrap(), t.value("x").unwrap());
        assert_ne!(s.value("x").unwrap(), s.value("y").unwrap());
        assert!(s.value("x").unwrap().data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn prefix_queries() {
        let mut s = ParamStore::new();
        for n in ["a.x", "a.y", "ab.z", "b.q"] {
            s.init_const(n, &[1], 0.0, ParamGroup::Backbone).unwrap();
        }
        let a: Vec<_> = s.names_with_prefix("a.").cloned().collect();
        assert_eq!(a, vec!["a.x", "a.y"]);
        let t = Trainable::prefixes(&s, &["a.", "b."]);
        assert!(t.contains("a.x") && t.contains("b.q") && !t.contains("ab.z"));
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut s = ParamStore::new();
        s.init_const("w", &[1], 2.0, ParamGroup::Backbone).unwrap();
        s.init_const("v", &[1], 3.0, ParamGroup::Backbone).unwrap();
        let t = Trainable::Only(["w".to_string()].into());
        let mut g = Graph::new();
        let mut sess = Session::new(&mut g, &s, &t);
        let w = sess.p("w").unwrap();
        let v = sess.p("v").unwrap();
        let y = sess.g.mul(w, v).unwrap();
        let l = sess.g.sum(y);
        sess.g.backward(l).unwrap();
        let grads = sess.grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["w"].item(), 3.0);
    }
}
