//! Named parameter storage split into network weights and architecture logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stnas_autodiff::{Gradients, Tape, Tensor, Var};

use crate::error::{Result, StnasError};

/// Optimization group of a parameter: ω (weights) or Θ (architecture logits).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Weights,
    Arch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    group: Group,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> impl Iterator<Item = ParamId> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.group == group)
            .map(|(i, _)| ParamId(i))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count in `group`.
    pub fn count(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let records: Vec<ParamRecord> = self
            .params
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect();
        serde_json::to_string(&records).map_err(|e| StnasError::Parse(e.to_string()))
    }

    /// Overwrites values from a [`ParamStore::to_json`] document; names, groups and shapes must match.
    pub fn load_json(&mut self, text: &str) -> Result<()> {
        let records: Vec<ParamRecord> = serde_json::from_str(text).map_err(|e| StnasError::Parse(e.to_string()))?;
        if records.len() != self.params.len() {
            return Err(StnasError::Model(format!(
                "saved state has {} parameters, model has {}",
                records.len(),
                self.params.len()
            )));
        }
        for (p, r) in self.params.iter_mut().zip(records) {
            if p.name != r.name || p.group != r.group || p.value.shape() != r.shape.as_slice() {
                return Err(StnasError::Model(format!(
                    "saved parameter `{}` {:?} does not match `{}` {:?}",
                    r.name,
                    r.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(r.shape, r.data)?;
        }
        Ok(())
    }
}

/// Independent seed for a named stage, derived from the run seed.
pub fn sub_seed(seed: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }

    /// Uniform in ±1/√fan_in.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.uniform(shape, 1.0 / (fan_in as f64).sqrt())
    }
}

/// Places parameters on a tape, as leaves for the trainable group and as constants otherwise.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    trainable: Option<Group>,
    bound: Vec<Option<Var>>,
}

impl<'s> Session<'s> {
    /// `trainable = None` records an inference-only forward.
    pub fn new(store: &'s ParamStore, trainable: Option<Group>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            trainable,
            bound: vec![None; store.len()],
        }
    }

    /// Every parameter differentiable; used by gradient checks.
    pub fn all_trainable(store: &'s ParamStore) -> Self {
        let mut s = Self::new(store, None);
        for id in store.ids() {
            let v = s.tape.leaf(store.value(id).clone());
            s.bound[id.0] = Some(v);
        }
        s
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = if Some(p.group) == self.trainable {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients for every bound differentiable parameter, in parameter order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.raw(v)?;
                Some((ParamId(i), grads.get(v)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_differ_by_stage_and_seed() {
        assert_eq!(sub_seed(7, "search"), sub_seed(7, "search"));
        assert_ne!(sub_seed(7, "search"), sub_seed(7, "train"));
        assert_ne!(sub_seed(7, "search"), sub_seed(8, "search"));
    }

    #[test]
    fn frozen_group_is_constant_on_tape() {
        let mut store = ParamStore::new();
        let w = store.add("w", Group::Weights, Tensor::scalar(2.0));
        let a = store.add("a", Group::Arch, Tensor::scalar(3.0));
        let mut s = Session::new(&store, Some(Group::Weights));
        let wv = s.param(w);
        let av = s.param(a);
        assert!(s.tape.needs_grad(wv));
        assert!(!s.tape.needs_grad(av));
        let y = s.tape.mul(wv, av).unwrap();
        let g = s.tape.backward(y).unwrap();
        let grads = s.param_grads(&g);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, w);
        assert_eq!(grads[0].1.data(), &[3.0]);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        store.add("w", Group::Weights, init.fan_in(&[3, 4], 3));
        store.add("a", Group::Arch, Tensor::from_vec(vec![0.1, -0.2]));
        let text = store.to_json().unwrap();
        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            other.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        other.load_json(&text).unwrap();
        assert_eq!(other, store);
    }
}
