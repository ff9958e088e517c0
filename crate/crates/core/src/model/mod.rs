//! Dense decoder-only transformer.
//!
//! Pre-norm residual blocks with RMSNorm, grouped-query attention with
//! per-head QK normalization and rotary position embedding, a SwiGLU
//! feed-forward network, and one embedding matrix shared between input and
//! output. Weights are stored `[in, out]` so a projection is `x * W`.

mod config;
mod forward;
pub mod gradcheck;
mod infer;
pub mod loss;

pub use config::{parse_proj_name, proj_name, ModelConfig, ParamCounts, Proj, EMBED, FINAL_NORM};
pub use forward::{Adapters, Dropout, ForwardCtx};
pub use infer::{generate, sample_token, KvDecoder};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};

/// Init standard deviation of the shared embedding.
pub const EMBED_INIT_STD: f64 = 0.02;

/// Named parameter tensors in a stable order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Registers every tensor on `tape`, tracked or constant.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }
}

/// Gradients keyed by parameter name.
pub type Grads<T> = IndexMap<String, Tensor<T>>;

/// Parameters registered on a tape.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects gradients of every tracked variable after backward.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> Grads<T> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Decoder configuration plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Random init: gains at one, embedding N(0, 0.02²), projections
    /// N(0, 1/fan_in).
    pub fn init(config: ModelConfig, seeds: &SeedTree) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (i, (name, shape)) in config.param_shapes().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let std = if name == EMBED {
                Some(EMBED_INIT_STD)
            } else if parse_proj_name(&name).is_some() {
                Some(1.0 / (shape[0] as f64).sqrt())
            } else {
                None
            };
            let data = match std {
                Some(std) => {
                    let mut rng = seeds.stream("init", i as u64);
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
                    (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
                }
                None => vec![T::one(); n],
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            let t = params.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        self.params.bind(tape, trainable)
    }

    /// Final-norm hidden states `[sum(len), model_dim]` for a batch of sequences.
    pub fn hidden(&self, tape: &mut Tape<T>, vars: &ParamVars, seqs: &[&[u32]], ctx: &ForwardCtx) -> Result<Var> {
        forward::hidden(tape, &self.config, vars, seqs, ctx)
    }

    /// Next-token logits `[sum(len), vocab_size]`.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &ParamVars, seqs: &[&[u32]], ctx: &ForwardCtx) -> Result<Var> {
        let h = self.hidden(tape, vars, seqs, ctx)?;
        forward::unembed(tape, vars, h)
    }

    /// Logits of a single sequence without gradient tracking.
    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, &[tokens], &ForwardCtx::default())?;
        Ok(tape.value(out).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// `gain_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() {
        return Err(Error::Invalid(format!(
            "rms_norm length mismatch: x has {}, gain has {}",
            x.len(),
            gain.len()
        )));
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = (ms + eps).sqrt();
    if !(denom > 0.0) {
        return Err(Error::Numerical("rms_norm of a zero vector with eps = 0".into()));
    }
    Ok(x.iter().zip(gain).map(|(v, g)| g * v / denom).collect())
}

/// Rotary embedding of one head vector at `position`.
pub fn rope(x: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    if !x.len().is_multiple_of(2) || x.is_empty() {
        return Err(Error::Invalid(format!("rope needs an even head_dim, got {}", x.len())));
    }
    let mut out = x.to_vec();
    crate::tensor::rope_row(&mut out, position, x.len(), base, false);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn rms_norm_examples() {
        let x0 = rand_vec(16, 1);
        let g = vec![1.0; 16];
        let scaled: Vec<f64> = x0.iter().map(|v| v * 3.7).collect();
        let a = rms_norm(&x0, &g, 0.0).unwrap();
        let b = rms_norm(&scaled, &g, 0.0).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        assert_eq!(rms_norm(&[1.0; 4], &[1.0; 4], 0.0).unwrap(), vec![1.0; 4]);

        let gain = rand_vec(16, 2).iter().map(|v| v.abs() + 0.5).collect::<Vec<_>>();
        let y = rms_norm(&x0, &gain, 1e-12).unwrap();
        let m = y.iter().zip(&gain).map(|(y, g)| (y / g).powi(2)).sum::<f64>() / 16.0;
        assert!((m - 1.0).abs() < 1e-6);
        assert!(rms_norm(&x0, &g[..3], 1e-5).is_err());
    }

    #[test]
    fn rope_examples() {
        let x = rand_vec(16, 3);
        assert_eq!(rope(&x, 0, 500_000.0).unwrap(), x);
        let r = rope(&x, 7, 10_000.0).unwrap();
        let n0: f64 = x.iter().map(|v| v * v).sum();
        let n1: f64 = r.iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-9);
        assert!(rope(&x[..15], 1, 10_000.0).is_err());

        let (q, k) = (rand_vec(16, 4), rand_vec(16, 5));
        let dot = |m: usize, n: usize| -> f64 {
            let a = rope(&q, m, 10_000.0).unwrap();
            let b = rope(&k, n, 10_000.0).unwrap();
            a.iter().zip(&b).map(|(x, y)| x * y).sum()
        };
        assert!((dot(5, 2) - dot(8, 5)).abs() < 1e-6);
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let seeds = SeedTree::new(11);
        let a = Model::<f32>::init(ModelConfig::toy(), &seeds).unwrap();
        let b = Model::<f32>::init(ModelConfig::toy(), &seeds).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params.num_values(), ModelConfig::toy().param_counts().total());
        assert!(Model::from_params(ModelConfig::toy(), a.params.clone()).is_ok());
    }
}
