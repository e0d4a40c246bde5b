//! Adam optimizer.

use std::collections::BTreeMap;

use crate::numerics::params::{GradMap, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per
/// parameter; only parameters present in the gradient map are updated.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step_count: u64,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step_count: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step_count
    }

    /// Moment buffers and step count as a parameter store, for resumable
    /// training checkpoints. Restores bit-exactly.
    pub fn to_store(&self) -> crate::numerics::params::ParamStore {
        use crate::numerics::tensor::Tensor;
        let mut store = crate::numerics::params::ParamStore::new();
        store
            .add("opt.step", Tensor::scalar(self.step_count as f64))
            .expect("fresh store");
        for (pid, buf) in &self.m {
            store
                .add(format!("opt.m.{}", pid.0), Tensor::new(vec![buf.len()], buf.clone()).unwrap())
                .expect("unique names");
        }
        for (pid, buf) in &self.v {
            store
                .add(format!("opt.v.{}", pid.0), Tensor::new(vec![buf.len()], buf.clone()).unwrap())
                .expect("unique names");
        }
        store
    }

    pub fn from_store(
        cfg: AdamConfig,
        store: &crate::numerics::params::ParamStore,
    ) -> crate::error::Result<Self> {
        use crate::error::Error;
        let mut out = Adam::new(cfg);
        for (_, p) in store.iter() {
            if p.name == "opt.step" {
                out.step_count = p.value.data[0] as u64;
            } else if let Some(idx) = p.name.strip_prefix("opt.m.") {
                let pid = ParamId(idx.parse().map_err(|_| Error::format("bad moment name"))?);
                out.m.insert(pid, p.value.data.clone());
            } else if let Some(idx) = p.name.strip_prefix("opt.v.") {
                let pid = ParamId(idx.parse().map_err(|_| Error::format("bad moment name"))?);
                out.v.insert(pid, p.value.data.clone());
            } else {
                return Err(Error::format(format!("unexpected optimizer entry {}", p.name)));
            }
        }
        Ok(out)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let corr1 = 1.0 - b1.powf(t);
        let corr2 = 1.0 - b2.powf(t);
        for (&pid, g) in grads {
            let n = g.len();
            let m = self.m.entry(pid).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(pid).or_insert_with(|| vec![0.0; n]);
            let data = &mut store.get_mut(pid).data;
            debug_assert_eq!(data.len(), n);
            for j in 0..n {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / corr1;
                let vhat = v[j] / corr2;
                data[j] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 3)^2
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let val = store.get(x).data[0];
            let mut g = GradMap::new();
            g.insert(x, vec![2.0 * (val - 3.0)]);
            opt.step(&mut store, &g);
        }
        assert!((store.get(x).data[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn untouched_params_stay_bit_identical() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let y = store.add("y", Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        let before = store.get(y).data.clone();
        let mut opt = Adam::new(AdamConfig::default());
        let mut g = GradMap::new();
        g.insert(x, vec![0.5]);
        opt.step(&mut store, &g);
        assert_eq!(store.get(y).data, before);
        assert_ne!(store.get(x).data[0], 1.0);
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamConfig::default().lr, 5e-4);
    }
}
