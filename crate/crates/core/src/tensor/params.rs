use std::collections::BTreeMap;

use super::graph::Gradients;
use super::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F: Real> {
    pub name: String,
    pub value: Tensor<F>,
    pub frozen: bool,
    m: Vec<F>,
    v: Vec<F>,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Named parameters in insertion order, with freeze flags and Adam moments.
#[derive(Clone, Debug)]
pub struct ParamRegistry<F: Real = f32> {
    params: Vec<Param<F>>,
    index: BTreeMap<String, ParamId>,
}

impl<F: Real> Default for ParamRegistry<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamRegistry<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        let n = value.numel();
        self.params.push(Param {
            name: name.clone(),
            value,
            frozen,
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(&self.params[self.id(name)?.0].value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self.id(name)?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        p.m.iter_mut().for_each(|x| *x = F::zero());
        p.v.iter_mut().for_each(|x| *x = F::zero());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Sets the frozen flag on every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamRegistry<F>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for p in other.iter().filter(|p| p.name.starts_with(prefix)) {
            self.set_value(&p.name, p.value.clone())?;
            n += 1;
        }
        Ok(n)
    }

    /// One bias-corrected Adam update at `step` (1-based). Frozen parameters
    /// and parameters without a gradient are left untouched.
    pub fn adam_step(&mut self, grads: &Gradients<F>, cfg: &AdamConfig, step: u64) -> Result<()> {
        if step == 0 {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: "step index is 1-based".into(),
            });
        }
        for (id, g) in grads.params() {
            let p = &self.params[id.0];
            if p.value.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
        let bc1 = F::of(1.0 - cfg.beta1.powi(step as i32));
        let bc2 = F::of(1.0 - cfg.beta2.powi(step as i32));
        let lr = F::of(cfg.lr);
        let eps = F::of(cfg.eps);
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            let Param { value, m, v, .. } = p;
            for (((w, mi), vi), &gi) in value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamRegistry<G> {
        let mut out = ParamRegistry::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast(), p.frozen).expect("unique names");
        }
        out
    }

    /// Bit-exact snapshot of all parameters whose name starts with `prefix`.
    pub fn snapshot(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Returns the names whose values differ (bitwise) from `snap`.
    pub fn drifted(&self, snap: &[(String, Tensor<F>)]) -> Vec<String> {
        snap.iter()
            .filter(|(name, t)| match self.get(name) {
                Ok(cur) => !cur.bit_eq(t),
                Err(_) => true,
            })
            .map(|(n, _)| n.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn registry_with_grad(g0: f64) -> (ParamRegistry<f64>, Gradients<f64>) {
        let mut reg = ParamRegistry::<f64>::new();
        let id = reg.add("w", Tensor::scalar(0.5), false).unwrap();
        let mut g = Graph::<f64>::new();
        let w = g.param(&reg, id);
        let s = g.scale(w, g0).unwrap();
        let grads = g.backward(s).unwrap();
        (reg, grads)
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut reg, grads) = registry_with_grad(3.0);
        reg.adam_step(&grads, &AdamConfig::with_lr(0.01), 1).unwrap();
        let w = reg.get("w").unwrap().item();
        // bias-corrected first step: mhat/sqrt(vhat) = g/|g|
        assert!((0.5 - w - 0.01).abs() < 1e-8, "{w}");
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let (mut reg, grads) = registry_with_grad(0.0);
        reg.adam_step(&grads, &AdamConfig::default(), 1).unwrap();
        assert_eq!(reg.get("w").unwrap().item(), 0.5);
    }

    #[test]
    fn frozen_param_unchanged() {
        let mut reg = ParamRegistry::<f32>::new();
        let id = reg.add("w", Tensor::new(vec![2], vec![0.25, -1.5]).unwrap(), true).unwrap();
        let before = reg.snapshot("");
        let mut g = Graph::<f32>::new();
        let w = g.param(&reg, id);
        assert!(!g.requires_grad(w));
        // hand-build gradients through a trainable clone
        let mut other = ParamRegistry::<f32>::new();
        let oid = other.add("w", Tensor::new(vec![2], vec![0.25, -1.5]).unwrap(), false).unwrap();
        assert_eq!(oid, id);
        let mut g = Graph::<f32>::new();
        let w = g.param(&other, oid);
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        for step in 1..=5 {
            reg.adam_step(&grads, &AdamConfig::default(), step).unwrap();
        }
        assert!(reg.drifted(&before).is_empty());
    }

    #[test]
    fn adam_rejects_step_zero_and_shape_mismatch() {
        let (mut reg, grads) = registry_with_grad(1.0);
        assert!(reg.adam_step(&grads, &AdamConfig::default(), 0).is_err());
        let mut other = ParamRegistry::<f64>::new();
        other.add("w", Tensor::zeros(&[3]), false).unwrap();
        assert!(matches!(
            other.adam_step(&grads, &AdamConfig::default(), 1),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }
}
