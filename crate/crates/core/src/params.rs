//! Named parameter storage and the per-step binding of parameters to a tape.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` using the first two dims.
    Xavier,
    Normal(f64),
    Const(f64),
    /// Same values as an already-declared parameter.
    CopyOf(String),
}

#[derive(Clone, Debug)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations in a fixed order.
#[derive(Default, Debug)]
pub struct Decls(pub Vec<ParamDecl>);

impl Decls {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.0.push(ParamDecl { name: name.into(), shape: shape.to_vec(), init });
    }

    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.add(format!("{prefix}.w"), &[d_in, d_out], Init::Xavier);
        self.add(format!("{prefix}.b"), &[d_out], Init::Zeros);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.add(format!("{prefix}.g"), &[d], Init::Ones);
        self.add(format!("{prefix}.b"), &[d], Init::Zeros);
    }
}

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initialises every declaration in order from one seeded stream.
    pub fn init(decls: &Decls, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for d in &decls.0 {
            if store.params.contains_key(&d.name) {
                return Err(Error::invalid(format!("parameter {} declared twice", d.name)));
            }
            let n: usize = d.shape.iter().product();
            let data = match &d.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(c) => vec![*c; n],
                Init::Xavier => {
                    let fan_in = d.shape[0];
                    let fan_out = *d.shape.get(1).unwrap_or(&1);
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, *std).map_err(|e| Error::invalid(e.to_string()))?;
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::CopyOf(src) => store
                    .params
                    .get(src)
                    .ok_or_else(|| Error::invalid(format!("{} copies undeclared {src}", d.name)))?
                    .data()
                    .to_vec(),
            };
            store.params.insert(d.name.clone(), Tensor::new(d.shape.clone(), data)?);
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            h.update([0]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Binds parameters from a store onto a tape lazily, one leaf per name.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
    frozen_prefixes: Vec<String>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    pub fn train(store: &'a ParamStore) -> Self {
        Ctx { tape: Tape::new(), store, bound: HashMap::new(), frozen_prefixes: Vec::new(), trainable: true }
    }

    /// No parameter requires grad.
    pub fn inference(store: &'a ParamStore) -> Self {
        Ctx { trainable: false, ..Self::train(store) }
    }

    pub fn with_tape_checked(mut self, checked: bool) -> Self {
        self.tape.set_checked(checked);
        self
    }

    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.store.require(name)?.clone();
        let train = self.trainable && !self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let v = if train { self.tape.param(t)? } else { self.tape.constant(t)? };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound parameter that received one, by name.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.bound {
            if let Some(g) = self.tape.grad(*v) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }

    pub fn bound_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.bound.keys().cloned().collect();
        v.sort();
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }
}

/// Central-difference check of `f` w.r.t. the named parameters of `store`.
/// Returns `max |analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check_params<F>(store: &ParamStore, names: &[String], f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let analytic = {
        let mut ctx = Ctx::train(store);
        let loss = f(&mut ctx)?;
        if ctx.value(loss).len() != 1 {
            return Err(Error::invalid("grad_check_params needs a scalar loss"));
        }
        ctx.backward(loss)?;
        ctx.grads()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut ctx = Ctx::inference(s);
        let loss = f(&mut ctx)?;
        Ok(ctx.value(loss).item())
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for name in names {
        let n = store.require(name)?.len();
        let zeros = vec![0.0; n];
        let g = analytic.get(name).unwrap_or(&zeros);
        for c in 0..n {
            let orig = store.require(name)?.data()[c];
            probe.get_mut(name).expect("present").data_mut()[c] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[c] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((g[c] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
