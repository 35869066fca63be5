use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
struct Moments<S> {
    first: Vec<S>,
    second: Vec<S>,
}

/// Named learnable tensors plus AdamW state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Tensor<S>>,
    moments: BTreeMap<String, Moments<S>>,
    step: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    /// Weight matrix and bias, both drawn from U(−1/√fan_in, 1/√fan_in).
    pub fn init_linear<R: Rng>(
        &mut self,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let w = (0..d_in * d_out)
            .map(|_| S::of(rng.random_range(-bound..=bound)))
            .collect();
        let b = (0..d_out)
            .map(|_| S::of(rng.random_range(-bound..=bound)))
            .collect();
        self.insert(format!("{prefix}.w"), Tensor::new(vec![d_in, d_out], w)?)?;
        self.insert(format!("{prefix}.b"), Tensor::new(vec![d_out], b)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// AdamW with decoupled weight decay and bias correction.
    ///
    /// Every parameter needs an entry in `grads`; the decay is applied as
    /// `p ← p·(1 − lr·wd)` before the Adam update.
    pub fn adamw_step(
        &mut self,
        grads: &BTreeMap<String, Tensor<S>>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (name, p) in &self.params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGrad(name.clone()))?;
            if g.len() != p.len() {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has {} values, parameter has {}",
                    g.len(),
                    p.len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::of(ADAM_BETA1), S::of(ADAM_BETA2));
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        let lr = S::of(lr);
        let decay = S::one() - lr * S::of(weight_decay);
        let eps = S::of(ADAM_EPS);
        for (name, p) in self.params.iter_mut() {
            let g = grads[name].data();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![S::zero(); p.len()],
                second: vec![S::zero(); p.len()],
            });
            for (k, v) in p.data_mut().iter_mut().enumerate() {
                mom.first[k] = b1 * mom.first[k] + (S::one() - b1) * g[k];
                mom.second[k] = b2 * mom.second[k] + (S::one() - b2) * g[k] * g[k];
                let m_hat = mom.first[k] / bc1;
                let v_hat = mom.second[k] / bc2;
                *v = *v * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config,
            step: self.step,
            params: self
                .params
                .iter()
                .map(|(k, t)| {
                    (
                        k.clone(),
                        SerializedTensor {
                            shape: t.shape().to_vec(),
                            values: t.to_f64_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Rebuilds parameters from a checkpoint. Optimizer moments start fresh.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                found: ck.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let mut store = Self::new();
        for (name, st) in &ck.params {
            store.insert(name.clone(), Tensor::from_f64(st.shape.clone(), &st.values)?)?;
        }
        store.step = ck.step;
        Ok(store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SerializedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Checkpoint document: `{format_version, config, step, params}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub step: u64,
    pub params: BTreeMap<String, SerializedTensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("serializing checkpoint", e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self =
            serde_json::from_str(s).map_err(|e| Error::json("parsing checkpoint", e))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                found: ck.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("p".to_string(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = one_param(1.7);
        s.adamw_step(&grad(0.0), 1e-3, 0.0).unwrap();
        assert_eq!(s.get("p").unwrap().data()[0], 1.7);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut s = one_param(2.0);
        s.adamw_step(&grad(0.0), 1e-4, 0.01).unwrap();
        assert_eq!(s.get("p").unwrap().data()[0], 2.0 * (1.0 - 1e-4 * 0.01));
    }

    #[test]
    fn quadratic_converges_to_minimizer() {
        // f(p) = (p − 3)², minimizer 3.
        let mut s = one_param(-1.0);
        for _ in 0..500 {
            let p = s.get("p").unwrap().data()[0];
            s.adamw_step(&grad(2.0 * (p - 3.0)), 0.05, 0.0).unwrap();
        }
        let p = s.get("p").unwrap().data()[0];
        assert!((p - 3.0).abs() < 1e-3, "p = {p}");
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = one_param(1.0);
        s.insert("q", Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(
            s.adamw_step(&grad(1.0), 1e-3, 0.0),
            Err(Error::MissingGrad(n)) if n == "q"
        ));
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn checkpoint_json_round_trip_is_bit_exact() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        s.init_linear("l", 5, 4, &mut rng).unwrap();
        let ck = s.to_checkpoint(serde_json::json!({"c": 4}));
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
        let s2 = ParamStore::<f64>::from_checkpoint(&back).unwrap();
        assert_eq!(s2.get("l.w").unwrap(), s.get("l.w").unwrap());
    }

    #[test]
    fn checkpoint_version_mismatch() {
        let s = ParamStore::<f64>::new();
        let mut ck = s.to_checkpoint(serde_json::Value::Null);
        ck.format_version = 99;
        let text = serde_json::to_string(&ck).unwrap();
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::Version { found: 99, .. })));
    }
}
