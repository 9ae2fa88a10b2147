//! Named parameter storage and per-tape binding.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(index: usize) -> Self {
        ParamId(index)
    }
}

/// Standard deviation of [`WeightInit::Fixed`].
pub const FIXED_INIT_STD: f64 = 0.02;

/// Scale rule for projection weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightInit {
    /// `1/sqrt(fan_in)`.
    #[default]
    FanIn,
    /// [`FIXED_INIT_STD`] regardless of width.
    Fixed,
}

impl fmt::Display for WeightInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightInit::FanIn => "fan_in",
            WeightInit::Fixed => "fixed",
        })
    }
}

impl FromStr for WeightInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fan_in" => Ok(WeightInit::FanIn),
            "fixed" => Ok(WeightInit::Fixed),
            other => Err(format!("unknown weight init {other:?} (expected fan_in or fixed)")),
        }
    }
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal(f64),
    /// Truncated normal scaled by the store's [`WeightInit`] rule.
    Projection { fan_in: usize },
    Zeros,
    Ones,
}

/// Parameter tensors in registration order, addressable by name.
///
/// Each parameter draws its initial values from a generator seeded by the
/// store seed and the parameter name, so two models sharing a parameter name
/// start from identical values for it.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    weight_init: WeightInit,
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// 64-bit FNV-1a.
pub(crate) fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn name_hash(name: &str) -> u64 {
    fnv1a(name.bytes())
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            weight_init: WeightInit::default(),
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Rule for projections registered from now on.
    pub fn set_weight_init(&mut self, rule: WeightInit) {
        self.weight_init = rule;
    }

    pub fn weight_init(&self) -> WeightInit {
        self.weight_init
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let init = match init {
            Init::Projection { fan_in } => Init::TruncNormal(match self.weight_init {
                WeightInit::FanIn => 1.0 / (fan_in.max(1) as f64).sqrt(),
                WeightInit::Fixed => FIXED_INIT_STD,
            }),
            other => other,
        };
        let value = match init {
            Init::Projection { .. } => unreachable!("resolved above"),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::TruncNormal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
                Tensor::from_fn(shape, |_| loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
            }
        };
        let id = ParamId(self.values.len());
        self.index.insert(name.to_string(), id.0);
        self.names.push(name.to_string());
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        if value.shape() != self.values[id.0].shape() {
            return Err(TensorError::shape(
                "set_param",
                format!("{} expects {:?}, got {:?}", self.names[id.0], self.values[id.0].shape(), value.shape()),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Fills every parameter with small random values; used by tests that need
    /// generic (non-degenerate) weights everywhere.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = rng.random_range(-scale..scale);
            }
        }
    }
}

/// Gradient buffer aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer {
            grads: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    /// Element-wise sum, in argument order.
    pub fn accumulate(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale_in_place(s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Lazily registers store parameters on a tape.
pub struct Binder<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    trainable: bool,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t> Binder<'t> {
    /// Parameters become differentiable leaves.
    pub fn trainable(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::with_mode(tape, store, true)
    }

    /// Parameters become constants (inference).
    pub fn frozen(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::with_mode(tape, store, false)
    }

    fn with_mode(tape: &'t Tape, store: &'t ParamStore, trainable: bool) -> Self {
        Binder {
            tape,
            store,
            trainable,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let value = self.store.get(id).clone();
            if self.trainable {
                self.tape.leaf(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    /// Gradients for every store parameter; unused ones are zero.
    pub fn collect(&self, grads: &mut Gradients) -> GradBuffer {
        let bound = self.bound.borrow();
        let grads = bound
            .iter()
            .zip(&self.store.values)
            .map(|(var, value)| match var {
                Some(v) => grads.take(*v),
                None => Tensor::zeros(value.shape()),
            })
            .collect();
        GradBuffer { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::new(7);
        a.register("x", &[3], Init::Zeros);
        let wa = a.register("w", &[4, 4], Init::TruncNormal(0.02));
        let mut b = ParamStore::new(7);
        let wb = b.register("w", &[4, 4], Init::TruncNormal(0.02));
        assert_eq!(a.get(wa), b.get(wb));
        assert!(a.get(wa).data().iter().all(|v| v.abs() <= 0.04));
        let mut c = ParamStore::new(8);
        let wc = c.register("w", &[4, 4], Init::TruncNormal(0.02));
        assert_ne!(a.get(wa), c.get(wc));
    }

    #[test]
    fn binder_collects_zero_for_unused() {
        let mut store = ParamStore::new(0);
        let used = store.register("used", &[2], Init::Ones);
        store.register("unused", &[3], Init::Ones);
        let tape = Tape::new();
        let binder = Binder::trainable(&tape, &store);
        let y = binder.param(used).mul(binder.param(used)).unwrap().sum().unwrap();
        let mut g = tape.backward(y).unwrap();
        let buf = binder.collect(&mut g);
        assert_eq!(buf.grads[0].data(), &[2.0, 2.0]);
        assert_eq!(buf.grads[1].data(), &[0.0; 3]);
    }
}
