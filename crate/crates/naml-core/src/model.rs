//! Model parameters: dimensions, initialization, tape binding.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::tensor::{Tape, TensorId};

/// News views fused by the view-level attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Title,
    Body,
    Category,
    Subcategory,
}

pub const ALL_VIEWS: [View; 4] = [View::Title, View::Body, View::Category, View::Subcategory];

impl View {
    pub fn name(&self) -> &'static str {
        match self {
            View::Title => "title",
            View::Body => "body",
            View::Category => "category",
            View::Subcategory => "subcategory",
        }
    }

    pub fn parse(s: &str) -> Result<View, ConfigError> {
        match s {
            "title" => Ok(View::Title),
            "body" => Ok(View::Body),
            "category" => Ok(View::Category),
            "subcategory" => Ok(View::Subcategory),
            other => Err(ConfigError::Invalid(format!("unknown view {other:?}"))),
        }
    }
}

/// Architecture dimensions. Stored in checkpoints; must match between
/// training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub word_dim: usize,
    pub n_categories: usize,
    pub n_subcategories: usize,
    pub cat_dim: usize,
    pub n_filters: usize,
    pub cnn_half_window: usize,
    pub query_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("word_dim", self.word_dim),
            ("n_categories", self.n_categories),
            ("n_subcategories", self.n_subcategories),
            ("cat_dim", self.cat_dim),
            ("n_filters", self.n_filters),
            ("query_dim", self.query_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        2 * self.cnn_half_window + 1
    }
}

/// All learnable weights, addressable by name. BTreeMap keeps parameter
/// order deterministic for Adam, checkpoints and gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, ParamTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

fn uniform<R: Rng>(rng: &mut R, limit: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Additive-attention parameter names for a pooling site.
/// `proj` is stored pre-transposed as `[input_dim, query_dim]` so scores
/// come from a single `ctx . proj` matmul.
fn attention_params<R: Rng>(
    rng: &mut R,
    tensors: &mut BTreeMap<String, ParamTensor>,
    prefix: &str,
    input_dim: usize,
    query_dim: usize,
) {
    tensors.insert(
        format!("{prefix}.proj"),
        ParamTensor {
            shape: vec![input_dim, query_dim],
            data: glorot(rng, input_dim, query_dim, input_dim * query_dim),
        },
    );
    tensors.insert(
        format!("{prefix}.bias"),
        ParamTensor { shape: vec![query_dim], data: vec![0.0; query_dim] },
    );
    tensors.insert(
        format!("{prefix}.query"),
        ParamTensor { shape: vec![query_dim], data: glorot(rng, query_dim, 1, query_dim) },
    );
}

impl ParamStore {
    /// Initialize all NAML parameters: embeddings uniform(-0.1, 0.1)
    /// (PAD row zero), projections and CNN kernels Glorot-uniform,
    /// biases zero. `pretrained_words`, when given, replaces the word
    /// embedding table.
    pub fn init(dims: &ModelDims, seed: u64, pretrained_words: Option<Vec<f64>>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();

        let d = dims.word_dim;
        let nf = dims.n_filters;
        let q = dims.query_dim;
        let window_in = dims.window() * d;

        let mut word = match pretrained_words {
            Some(m) => {
                assert_eq!(m.len(), dims.vocab_size * d, "pretrained matrix shape");
                m
            }
            None => uniform(&mut rng, 0.1, dims.vocab_size * d),
        };
        for x in word[..d].iter_mut() {
            *x = 0.0; // PAD row stays zero and is never updated
        }
        tensors.insert(
            "word_embedding".to_string(),
            ParamTensor { shape: vec![dims.vocab_size, d], data: word },
        );

        for view in ["title", "body"] {
            tensors.insert(
                format!("{view}_cnn.kernel"),
                ParamTensor {
                    shape: vec![nf, window_in],
                    data: glorot(&mut rng, window_in, nf, nf * window_in),
                },
            );
            tensors.insert(
                format!("{view}_cnn.bias"),
                ParamTensor { shape: vec![nf], data: vec![0.0; nf] },
            );
            attention_params(&mut rng, &mut tensors, &format!("{view}_attn"), nf, q);
        }

        tensors.insert(
            "cat_embedding".to_string(),
            ParamTensor {
                shape: vec![dims.n_categories, dims.cat_dim],
                data: uniform(&mut rng, 0.1, dims.n_categories * dims.cat_dim),
            },
        );
        tensors.insert(
            "subcat_embedding".to_string(),
            ParamTensor {
                shape: vec![dims.n_subcategories, dims.cat_dim],
                data: uniform(&mut rng, 0.1, dims.n_subcategories * dims.cat_dim),
            },
        );
        for name in ["cat_dense", "subcat_dense"] {
            tensors.insert(
                format!("{name}.weight"),
                ParamTensor {
                    shape: vec![dims.cat_dim, nf],
                    data: glorot(&mut rng, dims.cat_dim, nf, dims.cat_dim * nf),
                },
            );
            tensors.insert(
                format!("{name}.bias"),
                ParamTensor { shape: vec![nf], data: vec![0.0; nf] },
            );
        }

        attention_params(&mut rng, &mut tensors, "view_attn", nf, q);
        attention_params(&mut rng, &mut tensors, "user_attn", nf, q);

        ParamStore { tensors }
    }

    pub fn get(&self, name: &str) -> &ParamTensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// Copy every parameter onto a fresh tape as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.tensors {
            let id = tape.leaf(t.data.clone(), t.shape.clone(), true);
            ids.insert(name.clone(), id);
        }
        BoundParams { ids }
    }
}

/// Name-to-tape-id map for one forward pass.
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    /// Read accumulated gradients back out of the tape after `backward`.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.ids
            .iter()
            .map(|(name, &id)| (name.clone(), tape.grad(id).to_vec()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            vocab_size: 10,
            word_dim: 4,
            n_categories: 3,
            n_subcategories: 3,
            cat_dim: 2,
            n_filters: 5,
            cnn_half_window: 1,
            query_dim: 3,
        }
    }

    #[test]
    fn init_is_deterministic_and_pad_zero() {
        let a = ParamStore::init(&dims(), 9, None);
        let b = ParamStore::init(&dims(), 9, None);
        assert_eq!(a, b);
        let we = a.get("word_embedding");
        assert!(we.data[..4].iter().all(|v| *v == 0.0));
        assert_eq!(we.shape, vec![10, 4]);
    }

    #[test]
    fn names_unique_and_shapes() {
        let p = ParamStore::init(&dims(), 1, None);
        assert_eq!(p.get("title_cnn.kernel").shape, vec![5, 3 * 4]);
        assert_eq!(p.get("view_attn.proj").shape, vec![5, 3]);
        assert_eq!(p.get("user_attn.query").shape, vec![3]);
        assert_eq!(p.get("cat_dense.weight").shape, vec![2, 5]);
    }

    #[test]
    fn dims_validation() {
        let mut d = dims();
        assert!(d.validate().is_ok());
        d.n_filters = 0;
        assert!(d.validate().is_err());
    }
}
