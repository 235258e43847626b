//! Architecture hyperparameters and the trainable tensors of the fusion network.
//!
//! All tensors are row-major `Array2<f64>` used in the `x · W` convention;
//! biases are `1 × n` rows so they broadcast over sequence rows.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Width of the demographic input: one-hot sex (3) and age / 100.
pub const DEMO_INPUT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub n_analytes: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub ff_hidden: usize,
    pub lab_hidden: usize,
}

impl ModelConfig {
    /// Production architecture for a given vocabulary size.
    pub fn standard(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            n_analytes: crate::catalog::N_ANALYTES,
            max_len: crate::vocab::DEFAULT_MAX_LEN,
            vocab_size,
            ff_hidden: 128,
            lab_hidden: 64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn lab_input(&self) -> usize {
        2 * self.n_analytes
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.vocab_size < 2 || self.max_len == 0 || self.n_analytes == 0 {
            return Err(Error::Config(
                "vocab_size >= 2, max_len >= 1 and n_analytes >= 1 are required".into(),
            ));
        }
        if self.ff_hidden == 0 || self.lab_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

macro_rules! model_tensors {
    ($($name:ident),* $(,)?) => {
        /// Every trainable tensor of the network. The same struct doubles as
        /// the gradient accumulator and the Adam moment buffers.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ModelParams {
            pub config: ModelConfig,
            $(pub $name: Array2<f64>,)*
        }

        impl ModelParams {
            pub const TENSOR_NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
                vec![$((stringify!($name), &self.$name)),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
                vec![$((stringify!($name), &mut self.$name)),*]
            }

            fn from_shapes(config: ModelConfig, mut make: impl FnMut(&'static str, (usize, usize)) -> Array2<f64>) -> Self {
                let shapes = tensor_shapes(&config);
                let mut it = shapes.into_iter();
                $(
                    let (name, shape) = it.next().expect("shape table covers every tensor");
                    debug_assert_eq!(name, stringify!($name));
                    let $name = make(name, shape);
                )*
                ModelParams { config, $($name,)* }
            }
        }
    };
}

model_tensors!(
    token_embedding,
    text_wq,
    text_wk,
    text_wv,
    text_wo,
    text_ff_w1,
    text_ff_b1,
    text_ff_w2,
    text_ff_b2,
    lab_w1,
    lab_b1,
    lab_w2,
    lab_b2,
    lab_w3,
    lab_b3,
    demo_w,
    demo_b,
    fuse_wq,
    fuse_wk,
    fuse_wv,
    fuse_wo,
    disease_w,
    disease_b,
    horizon_w,
    horizon_b,
);

/// Expected shape of every tensor, in declaration order.
pub fn tensor_shapes(c: &ModelConfig) -> Vec<(&'static str, (usize, usize))> {
    let d = c.d_model;
    vec![
        ("token_embedding", (c.vocab_size, d)),
        ("text_wq", (d, d)),
        ("text_wk", (d, d)),
        ("text_wv", (d, d)),
        ("text_wo", (d, d)),
        ("text_ff_w1", (d, c.ff_hidden)),
        ("text_ff_b1", (1, c.ff_hidden)),
        ("text_ff_w2", (c.ff_hidden, d)),
        ("text_ff_b2", (1, d)),
        ("lab_w1", (c.lab_input(), c.lab_hidden)),
        ("lab_b1", (1, c.lab_hidden)),
        ("lab_w2", (c.lab_hidden, c.lab_hidden)),
        ("lab_b2", (1, c.lab_hidden)),
        ("lab_w3", (c.lab_hidden, d)),
        ("lab_b3", (1, d)),
        ("demo_w", (DEMO_INPUT, d)),
        ("demo_b", (1, d)),
        ("fuse_wq", (d, d)),
        ("fuse_wk", (d, d)),
        ("fuse_wv", (d, d)),
        ("fuse_wo", (d, d)),
        ("disease_w", (d, 3)),
        ("disease_b", (1, 3)),
        ("horizon_w", (d, 4)),
        ("horizon_b", (1, 4)),
    ]
}

fn is_bias(name: &str) -> bool {
    // Biases are named `*_b` or `*_b<digit>`.
    let last = name.rsplit('_').next().unwrap_or(name);
    last.starts_with('b') && last.len() <= 2
}

impl ModelParams {
    /// Scaled-uniform initialization: weights ~ U(-b, b) with
    /// `b = sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self::from_shapes(config, |name, (r, c)| {
            if is_bias(name) {
                Array2::zeros((r, c))
            } else {
                let bound = (6.0 / (r + c) as f64).sqrt();
                Array2::from_shape_simple_fn((r, c), || rng.random_range(-bound..bound))
            }
        }))
    }

    pub fn zeros(config: ModelConfig) -> Self {
        Self::from_shapes(config, |_, shape| Array2::zeros(shape))
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Checks every tensor against the shape implied by `config`.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for ((name, t), (_, shape)) in self.tensors().into_iter().zip(tensor_shapes(&self.config)) {
            if t.dim() != shape {
                return Err(Error::invalid(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.dim()
                )));
            }
        }
        Ok(())
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(scale, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// Builds a parameter set from named tensors, e.g. when loading a checkpoint.
    pub fn from_named(config: ModelConfig, mut tensors: Vec<(String, Array2<f64>)>) -> Result<Self> {
        config.validate()?;
        let mut missing = Vec::new();
        let params = Self::from_shapes(config, |name, shape| {
            match tensors.iter().position(|(n, _)| n == name) {
                Some(i) => tensors.swap_remove(i).1,
                None => {
                    missing.push(name);
                    Array2::zeros(shape)
                }
            }
        });
        if !missing.is_empty() {
            return Err(Error::invalid(format!("missing tensors: {}", missing.join(", "))));
        }
        if let Some((extra, _)) = tensors.first() {
            return Err(Error::invalid(format!("unexpected tensor {extra}")));
        }
        params.validate()?;
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_follow_config() {
        let cfg = ModelConfig::standard(50);
        let p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.validate().unwrap();
        assert_eq!(p.tensors().len(), ModelParams::TENSOR_NAMES.len());
        assert_eq!(p.token_embedding.dim(), (50, 64));
        assert_eq!(p.lab_w1.dim(), (40, 64));
        assert_eq!(p.disease_w.dim(), (64, 3));
        assert_eq!(p.horizon_b.dim(), (1, 4));
    }

    #[test]
    fn init_respects_bound_and_zero_biases() {
        let cfg = ModelConfig::standard(30);
        let p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bound = (6.0f64 / (64 + 128) as f64).sqrt();
        assert!(p.text_ff_w1.iter().all(|v| v.abs() <= bound));
        for name in ["text_ff_b1", "text_ff_b2", "lab_b1", "lab_b2", "lab_b3", "demo_b", "disease_b", "horizon_b"] {
            assert!(is_bias(name), "{name}");
            assert!(p.tensor(name).unwrap().iter().all(|v| *v == 0.0), "{name}");
        }
        for name in ["token_embedding", "text_wo", "lab_w3", "demo_w", "disease_w"] {
            assert!(!is_bias(name), "{name}");
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = ModelConfig::standard(10);
        cfg.heads = 5;
        assert!(ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = ModelConfig::standard(20);
        let a = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
