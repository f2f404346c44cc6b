//! Named parameters grouped for freezing, with Adam state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    pub frozen: bool,
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let n = value.data.len();
        self.params.push(Param {
            name,
            group: group.into(),
            value,
            frozen: false,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform `±1/√fan_in` initialisation.
    pub fn add_uniform(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        group: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, group, Tensor::new(rows, cols, data))
    }

    pub fn add_identity(&mut self, name: impl Into<String>, group: impl Into<String>, dim: usize) -> ParamId {
        let data = (0..dim * dim)
            .map(|i| if i % (dim + 1) == 0 { 1.0 } else { 0.0 })
            .collect();
        self.add(name, group, Tensor::new(dim, dim, data))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.params.iter().map(|p| p.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    fn set_frozen<S: AsRef<str>>(&mut self, groups: &[S], frozen: bool) -> Result<()> {
        let known = self.groups();
        for g in groups {
            if !known.iter().any(|k| k == g.as_ref()) {
                return Err(Error::UnknownGroup(g.as_ref().to_string()));
            }
        }
        for p in &mut self.params {
            if groups.iter().any(|g| g.as_ref() == p.group) {
                p.frozen = frozen;
            }
        }
        Ok(())
    }

    /// Stops gradient updates for every parameter in `groups`.
    pub fn freeze<S: AsRef<str>>(&mut self, groups: &[S]) -> Result<()> {
        self.set_frozen(groups, true)
    }

    pub fn unfreeze<S: AsRef<str>>(&mut self, groups: &[S]) -> Result<()> {
        self.set_frozen(groups, false)
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = false;
        }
    }

    /// SHA-256 over the names and raw values of one group's parameters.
    pub fn group_hash(&self, group: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for v in &p.value.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies values of parameters whose names start with `src_prefix` in
    /// `other` into the parameters named with `dst_prefix` here.
    pub fn copy_from(&mut self, other: &ParamStore, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for src in other.params.iter().filter(|p| p.name.starts_with(src_prefix)) {
            let name = format!("{dst_prefix}{}", &src.name[src_prefix.len()..]);
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Shape(format!("no parameter {name} to copy {} into", src.name)))?;
            let dst = &mut self.params[id.0].value;
            if dst.shape() != src.value.shape() {
                return Err(Error::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    dst.shape(),
                    src.value.shape()
                )));
            }
            dst.data.copy_from_slice(&src.value.data);
            copied += 1;
        }
        Ok(copied)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }
}

/// Gradients for the parameters of one store, indexed like the store.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f32>>>,
}

impl ParamGrads {
    pub fn new(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[f32]) {
        match &mut self.grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn global_norm(&self) -> f32 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters and parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f32) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(ParamId(i)) else {
                continue;
            };
            for k in 0..g.len() {
                p.m[k] = self.beta1 * p.m[k] + (1.0 - self.beta1) * g[k];
                p.v[k] = self.beta2 * p.v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = p.m[k] / c1;
                let vhat = p.v[k] / c2;
                p.value.data[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn freeze_unknown_group_is_an_error() {
        let mut s = ParamStore::new();
        s.add("enc.w", "encoder", Tensor::zeros(2, 2));
        assert!(matches!(s.freeze(&["decoder"]), Err(Error::UnknownGroup(_))));
        s.freeze(&["encoder"]).unwrap();
        assert!(s.get(ParamId(0)).frozen);
    }

    #[test]
    fn adam_skips_frozen_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let a = s.add_uniform(&mut rng, "enc.w", "encoder", 2, 3, 2);
        let b = s.add_uniform(&mut rng, "dec.w", "decoder", 2, 3, 2);
        s.freeze(&["encoder"]).unwrap();
        let before = s.group_hash("encoder");
        let dec_before = s.value(b).clone();
        let mut g = ParamGrads::new(2);
        g.accumulate(a, &[1.0; 6]);
        g.accumulate(b, &[1.0; 6]);
        Adam::default().step(&mut s, &g, 1e-3);
        assert_eq!(before, s.group_hash("encoder"));
        assert_ne!(&dec_before, s.value(b));
    }
}
