use super::params::{GradStore, ParamStore};
use super::real::Real;
use super::tensor::Tensor;
use super::TensorError;

/// Parameters whose names start with any of `prefixes` share one learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub prefixes: Vec<String>,
    pub lr: f64,
}

impl ParamGroup {
    pub fn new(name: &str, prefixes: &[&str], lr: f64) -> Self {
        Self { name: name.into(), prefixes: prefixes.iter().map(|p| p.to_string()).collect(), lr }
    }

    fn matches(&self, param: &str) -> bool {
        self.prefixes.iter().any(|p| param.starts_with(p.as_str()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with per-group learning rates. Parameters outside every group are never touched.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    groups: Vec<ParamGroup>,
    group_of: Vec<Option<usize>>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, groups: Vec<ParamGroup>, cfg: AdamConfig) -> Result<Self, TensorError> {
        if let Some(g) = groups.iter().find(|g| !(g.lr >= 0.0 && g.lr.is_finite())) {
            return Err(TensorError::Config(format!("group {} has invalid lr {}", g.name, g.lr)));
        }
        let group_of = store.iter().map(|(_, name, _)| groups.iter().position(|g| g.matches(name))).collect();
        let m = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Ok(Self { cfg, groups, group_of, v: m.clone(), m, t: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// Group a parameter belongs to, if any.
    pub fn group_of(&self, id: usize) -> Option<&ParamGroup> {
        self.group_of[id].map(|g| &self.groups[g])
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradStore<T>) -> Result<(), TensorError> {
        self.step_scaled(store, grads, 1.0)
    }

    /// One update with every group learning rate multiplied by `lr_scale`.
    pub fn step_scaled(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &GradStore<T>,
        lr_scale: f64,
    ) -> Result<(), TensorError> {
        if grads.len() != store.len() {
            return Err(TensorError::shape("adam", format!("{} grads for {} params", grads.len(), store.len())));
        }
        if !grads.is_finite() {
            return Err(TensorError::NonFinite { op: "adam" });
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (tb1, tb2, eps) = (T::of(b1), T::of(b2), T::of(self.cfg.eps));
        let (tc1, tc2) = (T::of(c1), T::of(c2));
        for id in 0..store.len() {
            let Some(gi) = self.group_of[id] else { continue };
            let lr = self.groups[gi].lr * lr_scale;
            if lr == 0.0 {
                continue;
            }
            let tlr = T::of(lr);
            let g = grads.get(id).data();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = store.tensor_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = tb1 * m[j] + (T::one() - tb1) * g[j];
                v[j] = tb2 * v[j] + (T::one() - tb2) * g[j] * g[j];
                let mh = m[j] / tc1;
                let vh = v[j] / tc2;
                p[j] = p[j] - tlr * mh / (vh.sqrt() + eps);
            }
        }
        if store.iter().any(|(_, _, t)| !t.is_finite()) {
            return Err(TensorError::NonFinite { op: "adam" });
        }
        Ok(())
    }
}
