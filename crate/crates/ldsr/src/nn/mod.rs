//! Parameter storage, initialization, layers and the optimizer.

mod adam;
mod blocks;
mod layers;

pub use adam::{clip_global_norm, Adam};
pub use blocks::{Downsample, Mlp, ResBlock, ResGroup, Upsample};
pub use layers::{auto_groups, Conv2d, GroupNorm, Linear};

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Elem, Graph, Tx, Value};

static STORE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a parameter inside one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PId(pub usize);

pub struct Param<E: Elem> {
    pub name: String,
    value: Value<E>,
}

impl<E: Elem> Param<E> {
    pub fn dims(&self) -> &[usize] {
        self.value.dims()
    }

    pub fn data(&self) -> &[E] {
        self.value.data()
    }

    /// Copy-on-write mutable access; cheap once no graph shares the value.
    pub fn data_mut(&mut self) -> &mut [E] {
        self.value.make_mut().as_mut_slice()
    }

    pub fn set_data(&mut self, data: Vec<E>) {
        assert_eq!(data.len(), self.value.numel(), "set_data: length mismatch");
        *self.value.make_mut() = data;
    }

    pub fn value(&self) -> &Value<E> {
        &self.value
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian with std sqrt(2 / fan_in): dims[0] for rank-2 [in, out]
    /// weights, product of dims[1..] for conv weights. Keeps signal scale
    /// through ReLU stacks.
    HeNormal,
    Zeros,
    Ones,
    Const(f64),
}

/// Named parameters of one network bundle. A store is either trainable
/// (its graph leaves require gradients) or frozen.
pub struct ParamStore<E: Elem> {
    id: u64,
    params: Vec<Param<E>>,
    index: HashMap<String, usize>,
    pub trainable: bool,
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            id: STORE_IDS.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
            trainable: true,
        }
    }

    pub fn add(&mut self, name: &str, dims: Vec<usize>, init: Init, rng: &mut ChaCha8Rng) -> PId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let numel: usize = dims.iter().product();
        let sampled = |std: f64, rng: &mut ChaCha8Rng| -> Vec<E> {
            let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
            (0..numel)
                .map(|_| E::from_f64(rng.sample::<f64, _>(dist)))
                .collect()
        };
        let data: Vec<E> = match init {
            Init::Normal(std) => sampled(std, rng),
            Init::HeNormal => {
                let fan_in = if dims.len() == 2 {
                    dims[0]
                } else {
                    dims[1..].iter().product()
                };
                sampled((2.0 / fan_in.max(1) as f64).sqrt(), rng)
            }
            Init::Zeros => vec![E::ZERO; numel],
            Init::Ones => vec![E::ONE; numel],
            Init::Const(v) => vec![E::from_f64(v); numel],
        };
        self.params.push(Param {
            name: name.to_string(),
            value: Value::new(dims, data),
        });
        let idx = self.params.len() - 1;
        self.index.insert(name.to_string(), idx);
        PId(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: PId) -> &Param<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: PId) -> &mut Param<E> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn lookup(&self, name: &str) -> Option<PId> {
        self.index.get(name).copied().map(PId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.data().len()).sum()
    }

    /// Graph leaf for a parameter, memoized so every use in one graph maps
    /// to the same node (gradients then accumulate across uses).
    pub fn node(&self, g: &mut Graph<E>, id: PId) -> Tx {
        let key = (self.id, id.0);
        if let Some(&t) = g.param_memo.get(&key) {
            return t;
        }
        let p = &self.params[id.0];
        let t = g.leaf(p.value.clone(), self.trainable);
        g.param_memo.insert(key, t);
        t
    }

    /// Collect (param, gradient) pairs present in a finished backward pass.
    pub fn grads(&self, g: &Graph<E>, grads: &mut crate::tensor::Grads<E>) -> Vec<(PId, Vec<E>)> {
        let mut out = Vec::new();
        for idx in 0..self.params.len() {
            if let Some(&t) = g.param_memo.get(&(self.id, idx)) {
                if let Some(gr) = grads.take(t) {
                    out.push((PId(idx), gr));
                }
            }
        }
        out
    }

    /// FNV-1a over names, shapes and exact value bits; used by the
    /// determinism and freeze-contract tests.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.params {
            for b in p.name.as_bytes() {
                eat(*b);
            }
            for d in p.dims() {
                for b in (*d as u64).to_le_bytes() {
                    eat(b);
                }
            }
            for v in p.data() {
                for b in v.to_f64().to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Join name path segments.
pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
