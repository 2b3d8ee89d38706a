use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Dense row-major tensor of 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {:?} needs {} values, got {}", shape, n, data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count and column count of a 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        debug_assert_eq!(self.shape.len(), 2);
        (self.shape[0], self.shape[1])
    }
}

/// Named tensors for one model instance plus its config.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Gradients keyed and shaped exactly like the `ParamSet` they belong to.
pub type GradSet = BTreeMap<String, Tensor>;

impl ParamSet {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .collect();
        Ok(ParamSet { config: config.clone(), tensors })
    }

    /// Deterministic initialization: N(0, 0.02) for matrices, output projections
    /// (`attn.o`, `mlp.down`) additionally scaled by 1/sqrt(2 depth), norm gains 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0f32, 0.02).expect("valid normal");
        let proj_scale = 1.0 / (2.0 * config.depth as f32).sqrt();
        for (name, t) in p.tensors.iter_mut() {
            if t.shape.len() == 1 {
                t.data.iter_mut().for_each(|x| *x = 1.0);
                continue;
            }
            let scale = if name.ends_with("attn.o") || name.ends_with("mlp.down") { proj_scale } else { 1.0 };
            for x in t.data.iter_mut() {
                *x = base.sample(&mut rng) * scale;
            }
        }
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::ArchMismatch(vec![format!("missing tensor {name}")]))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::ArchMismatch(vec![format!("missing tensor {name}")]))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Full shape audit against the naming scheme of `cfg`, plus finiteness.
    pub fn arch_violations(&self, cfg: &ModelConfig) -> Vec<String> {
        let mut v = cfg.violations();
        if !v.is_empty() {
            return v;
        }
        if &self.config != cfg {
            v.push("embedded config differs from the audited config".to_string());
        }
        let expected = cfg.tensor_shapes();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => v.push(format!("missing tensor {name}")),
                Some(t) => {
                    if &t.shape != shape {
                        v.push(format!("{name}: shape {:?}, expected {:?}", t.shape, shape));
                    } else if t.data.len() != shape.iter().product::<usize>() {
                        v.push(format!("{name}: payload length {} inconsistent with shape", t.data.len()));
                    }
                    if t.data.iter().any(|x| !x.is_finite()) {
                        v.push(format!("{name}: non-finite values"));
                    }
                }
            }
        }
        for name in self.tensors.keys() {
            if !expected.iter().any(|(n, _)| n == name) {
                v.push(format!("unexpected tensor {name}"));
            }
        }
        v
    }

    pub fn check_arch(&self, cfg: &ModelConfig) -> Result<()> {
        let v = self.arch_violations(cfg);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::ArchMismatch(v))
        }
    }

    /// Tensor-wise exact equality of the payload bits.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(other.tensors.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape == b.shape
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig {
            depth: 2,
            hidden: 8,
            mlp_hidden: 16,
            query_heads: 4,
            attention_groups: 2,
            head_dim: 2,
            vocab: 10,
            context: 16,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = ParamSet::init(&toy(), 7).unwrap();
        let b = ParamSet::init(&toy(), 7).unwrap();
        let c = ParamSet::init(&toy(), 8).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn norm_gains_start_at_one() {
        let p = ParamSet::init(&toy(), 1).unwrap();
        for (name, t) in &p.tensors {
            if name.contains("norm") {
                assert!(t.data.iter().all(|&x| x == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn audit_names_missing_and_misshapen_tensors() {
        let mut p = ParamSet::init(&toy(), 1).unwrap();
        assert!(p.check_arch(&toy()).is_ok());
        p.tensors.remove("layer.1.mlp.up");
        let v = p.arch_violations(&toy());
        assert!(v.iter().any(|s| s.contains("layer.1.mlp.up")), "{v:?}");

        let p = ParamSet::init(&toy(), 1).unwrap();
        let mut wrong = toy();
        wrong.mlp_hidden = 12;
        let v = p.arch_violations(&wrong);
        assert!(v.iter().any(|s| s.contains("mlp.gate")), "{v:?}");
    }

    #[test]
    fn audit_rejects_extra_tensors() {
        let mut p = ParamSet::init(&toy(), 1).unwrap();
        p.tensors.insert("layer.9.attn.q".into(), Tensor::zeros(vec![1]));
        assert!(p.arch_violations(&toy()).iter().any(|s| s.contains("unexpected")));
    }
}
