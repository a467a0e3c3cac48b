//! Named parameter tensors plus their optimizer state.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// First and second Adam moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Parameters keyed by dotted name (`encoder.0.attn.wq`, ...), iterated in
/// name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub(crate) params: BTreeMap<String, Tensor>,
    pub(crate) moments: BTreeMap<String, Moments>,
    /// Optimizer steps taken so far.
    pub(crate) step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let zeros = Tensor::zeros(value.shape());
        self.moments.insert(
            name.clone(),
            Moments {
                m: zeros.clone(),
                v: zeros,
            },
        );
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
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

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Record every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), tape.param(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Round every parameter and moment to `f32` precision, the precision
    /// checkpoints store.
    pub fn round_to_f32(&mut self) {
        let round = |t: &mut Tensor| {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        };
        self.params.values_mut().for_each(round);
        for m in self.moments.values_mut() {
            round(&mut m.m);
            round(&mut m.v);
        }
    }
}

/// `fan_in × fan_out` matrix drawn from `U(-a, a)` with
/// `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Per-name gradients; parameters the loss never touched get zeros.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_matches_f32_cast() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2], vec![0.1, 1.0 / 3.0]).unwrap());
        s.round_to_f32();
        assert_eq!(s.get("w").unwrap().data()[0], 0.1f32 as f64);
        assert_eq!(s.get("w").unwrap().data()[1], (1.0f32 / 3.0) as f64);
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        s.insert("b", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let loss = tape.sum(bound.get("a").unwrap());
        let grads = tape.backward(loss).unwrap();
        let g = bound.gradients(&tape, &grads);
        assert_eq!(g["a"].data(), &[1.0, 1.0]);
        assert_eq!(g["b"].data(), &[0.0, 0.0, 0.0]);
    }
}
