//! Parameter and gradient storage.
//!
//! Tensors are owned by a [`ParamStore`] and addressed by [`ParamId`]
//! handles; layers hold ids, never the data. Initialization is a pure
//! function of the store seed and the parameter name, so two models built
//! with the same seed start from identical weights for every parameter they
//! share by name, regardless of what else they contain. That property is
//! what makes ablation comparisons meaningful.

use std::collections::HashMap;

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Fill rule for a freshly registered tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform in ±1/sqrt(fan_in); the usual default for conv and linear
    /// weights.
    FanIn(usize),
    /// Center-tap pass-through: entry (o, o, center, center) is 1 for a conv
    /// weight, (o, o) for a matrix. A layer so initialized starts as the
    /// identity on the leading min(out, in) channels and ignores the rest —
    /// used where a fusion branch should begin as a no-op.
    Identity,
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<ArrayD<f64>>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { seed, names: Vec::new(), tensors: Vec::new(), lookup: HashMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a named tensor, filled deterministically from the store
    /// seed and the name. Panics on a duplicate name: that is a model
    /// construction bug, not a runtime condition.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(
            !self.lookup.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let mut tensor = ArrayD::<f64>::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::FanIn(fan_in) => {
                assert!(fan_in > 0, "parameter `{name}`: fan_in must be positive");
                let bound = (1.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                for v in tensor.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
            Init::Identity => {
                let diag = shape[0].min(shape[1]);
                match *shape {
                    [_, _] => {
                        for o in 0..diag {
                            tensor[[o, o]] = 1.0;
                        }
                    }
                    [_, _, kh, kw] => {
                        for o in 0..diag {
                            tensor[[o, o, kh / 2, kw / 2]] = 1.0;
                        }
                    }
                    _ => panic!("parameter `{name}`: identity init needs rank 2 or 4"),
                }
            }
        }
        let idx = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.lookup.insert(name.to_string(), idx);
        ParamId(idx)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.tensors[id.0]
    }

    /// Replaces a tensor by name, e.g. when restoring a checkpoint. The
    /// shape must match what the model registered.
    pub fn set(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let idx = *self
            .lookup
            .get(name)
            .ok_or_else(|| Error::data(format!("no parameter named `{name}`")))?;
        if self.tensors[idx].shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}`: stored shape {:?} != expected {:?}",
                value.shape(),
                self.tensors[idx].shape()
            )));
        }
        self.tensors[idx] = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Name/tensor pairs in registration order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(ArrayD::len).sum()
    }
}

/// Gradient buffers matching a [`ParamStore`] one to one.
pub struct GradStore {
    grads: Vec<ArrayD<f64>>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        GradStore {
            grads: params.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.grads[id.0]
    }

    /// Accumulates `delta` into the gradient of `id`. The element count must
    /// match; the logical shape may differ (convolutions produce their
    /// weight gradient as a matrix).
    pub fn add(&mut self, id: ParamId, delta: &ArrayD<f64>) {
        let g = &mut self.grads[id.0];
        assert_eq!(g.len(), delta.len(), "gradient size mismatch for param {id:?}");
        let flat = delta
            .view()
            .into_shape_with_order(g.raw_dim())
            .expect("contiguous gradient delta");
        g.zip_mut_with(&flat, |a, b| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_and_seed_only() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        // Different registration order and extra entries must not disturb a
        // shared parameter.
        let ia = a.register("enc.w", &[3, 3], Init::FanIn(9));
        a.register("head.w", &[2, 2], Init::FanIn(4));
        b.register("other.w", &[5], Init::FanIn(5));
        let ib = b.register("enc.w", &[3, 3], Init::FanIn(9));
        assert_eq!(a.get(ia), b.get(ib));

        let mut c = ParamStore::new(8);
        let ic = c.register("enc.w", &[3, 3], Init::FanIn(9));
        assert_ne!(a.get(ia), c.get(ic));
    }

    #[test]
    fn init_bound_respected_and_zeros_zero() {
        let mut ps = ParamStore::new(1);
        let w = ps.register("w", &[64, 64], Init::FanIn(64));
        let bound = (1.0f64 / 64.0).sqrt();
        assert!(ps.get(w).iter().all(|v| v.abs() < bound));
        assert!(ps.get(w).iter().any(|v| v.abs() > bound * 0.5));
        let b = ps.register("b", &[16], Init::Zeros);
        assert!(ps.get(b).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_accumulation_reshapes_flat_deltas() {
        let mut ps = ParamStore::new(0);
        let id = ps.register("w", &[2, 3], Init::Zeros);
        let mut gs = GradStore::zeros_like(&ps);
        let delta = ArrayD::from_shape_vec(vec![6], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        gs.add(id, &delta);
        gs.add(id, &delta);
        assert_eq!(gs.get(id)[[1, 2]], 12.0);
        gs.scale(0.5);
        assert_eq!(gs.get(id)[[0, 0]], 1.0);
        gs.zero();
        assert_eq!(gs.get(id)[[1, 1]], 0.0);
    }

    #[test]
    fn set_checks_shapes() {
        let mut ps = ParamStore::new(0);
        ps.register("w", &[2, 2], Init::Zeros);
        assert!(ps.set("w", ArrayD::zeros(vec![2, 2])).is_ok());
        assert!(ps.set("w", ArrayD::zeros(vec![4])).is_err());
        assert!(ps.set("missing", ArrayD::zeros(vec![2, 2])).is_err());
    }
}
