use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug)]
struct Param {
    value: Rc<Tensor>,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Hyperparameters of the bias-corrected Adam update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lr > 0.0,
            Invalid,
            "learning rate must be positive, got {}",
            self.lr
        );
        ensure!(
            self.eps > 0.0,
            Invalid,
            "adam epsilon must be positive, got {}",
            self.eps
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Invalid,
            "adam betas must lie in [0, 1)"
        );
        Ok(())
    }
}

/// Named learnable tensors with gradient buffers and Adam moments.
///
/// Iteration order is the lexicographic order of names, which keeps every
/// reduction over parameters deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let shape = value.shape().to_vec();
        self.params.insert(
            name.to_string(),
            Param {
                value: Rc::new(value),
                grad: Tensor::zeros(&shape),
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            },
        );
    }

    /// Registers a weight drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, bound, rng));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &*p.value)
    }

    pub(crate) fn value_rc(&self, name: &str) -> Option<Rc<Tensor>> {
        self.params.get(name).map(|p| p.value.clone())
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| Rc::make_mut(&mut p.value))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Backpropagates `loss` and adds the result into the gradient buffers.
    /// Parameters the loss does not reach receive nothing (their buffers stay as they were).
    pub fn accumulate(&mut self, graph: &Graph, loss: Var) -> Result<()> {
        let grads = graph.backward(loss)?;
        for (name, var) in graph.params() {
            let Some(p) = self.params.get_mut(&name) else {
                continue;
            };
            if let Some(g) = grads.get(var) {
                if !g.all_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                p.grad.add_assign(g);
            }
        }
        Ok(())
    }

    /// Replaces all gradients with d`loss`/d`param`; unreachable parameters get zero.
    pub fn backward(&mut self, graph: &Graph, loss: Var) -> Result<()> {
        self.zero_grad();
        self.accumulate(graph, loss)
    }

    /// Multiplies every gradient buffer by `factor` (used to average accumulated gradients).
    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// One bias-corrected Adam update over every parameter, then zeroes the gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.values_mut() {
            let value = Rc::make_mut(&mut p.value);
            let g = p.grad.data();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for (i, x) in value.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            p.grad.data_mut().fill(0.0);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ParamFile {
            step: self.step,
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        StoredTensor {
                            shape: p.value.shape().to_vec(),
                            data: p.value.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        let json = serde_json::to_string(&file).map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ParamFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let mut store = ParamStore::new();
        for (name, t) in file.params {
            store.insert(
                &name,
                Tensor::new(&t.shape, t.data).map_err(|e| Error::parse(path, e))?,
            );
        }
        store.step = file.step;
        Ok(store)
    }

    /// Checks that `other` has exactly the same parameter names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        for (name, p) in &self.params {
            let Some(q) = other.params.get(name) else {
                return Err(Error::Invalid(format!("parameter `{name}` missing")));
            };
            ensure!(
                p.value.shape() == q.value.shape(),
                Shape,
                "parameter `{name}`: {:?} vs {:?}",
                p.value.shape(),
                q.value.shape()
            );
        }
        ensure!(
            self.len() == other.len(),
            Invalid,
            "parameter sets differ in size"
        );
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    step: u64,
    params: BTreeMap<String, StoredTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[values.len()], values.to_vec()).unwrap());
        s
    }

    fn set_grad(s: &mut ParamStore, g: &[f64]) {
        s.params
            .get_mut("w")
            .unwrap()
            .grad
            .data_mut()
            .copy_from_slice(g);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut s = store_with(&[1.0, -2.0, 0.5]);
        let g = [0.3, -4.0, 1e-3];
        set_grad(&mut s, &g);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        s.adam_step(&cfg).unwrap();
        let w = s.value("w").unwrap().data();
        for (i, (&w0, &gi)) in [1.0, -2.0, 0.5].iter().zip(&g).enumerate() {
            let expected = w0 - cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!(
                (w[i] - expected).abs() < 1e-15,
                "{i}: {} vs {}",
                w[i],
                expected
            );
        }
        assert!(s.grad("w").unwrap().data().iter().all(|&g| g == 0.0));
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with(&[1.0, 2.0]);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn constant_gradient_updates_do_not_grow() {
        let mut s = store_with(&[0.0]);
        let cfg = AdamConfig::default();
        set_grad(&mut s, &[0.7]);
        s.adam_step(&cfg).unwrap();
        let first = -s.value("w").unwrap().data()[0];
        set_grad(&mut s, &[0.7]);
        s.adam_step(&cfg).unwrap();
        let second = -s.value("w").unwrap().data()[0] - first;
        assert!(second <= first + 1e-9, "{second} > {first}");
    }

    #[test]
    fn invalid_hyperparameters() {
        let mut s = store_with(&[0.0]);
        assert!(s
            .adam_step(&AdamConfig {
                eps: 0.0,
                ..Default::default()
            })
            .is_err());
        assert!(s
            .adam_step(&AdamConfig {
                lr: -1.0,
                ..Default::default()
            })
            .is_err());
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut s = store_with(&[1.0]);
        s.insert("unused", Tensor::full(&[2], 3.0));
        set_grad(&mut s, &[9.0]);
        let g = Graph::new();
        let w = g.param(&s, "w");
        let loss = g.sum(g.square(w));
        s.backward(&g, loss).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[2.0]);
        assert_eq!(s.grad("unused").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut s = store_with(&[0.1, 0.2]);
        s.insert("b", Tensor::full(&[1, 2], -0.5));
        s.save(&path).unwrap();
        let t = ParamStore::load(&path).unwrap();
        assert_eq!(t.value("w"), s.value("w"));
        assert_eq!(t.value("b").unwrap().shape(), &[1, 2]);
        s.check_layout(&t).unwrap();
    }
}
