//! Learnable parameters and the two embedding functions: an affine map for
//! image features and attribute-operator composition for pairs.
//!
//! Composition is a matrix-vector product: each attribute owns a D×D
//! operator that acts on object prototype vectors, so any (attribute,
//! object) pair in the vocabulary cross-product embeds to a point in the
//! common semantic space, whether or not it was seen in training.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{matvec, Matrix, Vector};

/// Ordered attribute and object name lists; indices are stable identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
}

impl Vocab {
    pub fn new(attributes: Vec<String>, objects: Vec<String>) -> Result<Self> {
        if attributes.is_empty() || objects.is_empty() {
            return Err(Error::validation("vocab must be non-empty"));
        }
        for (kind, names) in [("attribute", &attributes), ("object", &objects)] {
            let mut seen = std::collections::HashSet::new();
            for n in names {
                if !seen.insert(n.as_str()) {
                    return Err(Error::validation(format!("duplicate {kind} name '{n}'")));
                }
            }
        }
        Ok(Vocab {
            attributes,
            objects,
        })
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }

    pub fn obj_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    pub fn num_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn num_objs(&self) -> usize {
        self.objects.len()
    }

    /// All |A|·|O| pairs in row-major (attribute-major) order.
    pub fn all_pairs(&self) -> Vec<PairId> {
        let mut pairs = Vec::with_capacity(self.num_attrs() * self.num_objs());
        for a in 0..self.num_attrs() {
            for o in 0..self.num_objs() {
                pairs.push(PairId { attr: a, obj: o });
            }
        }
        pairs
    }
}

/// An (attribute, object) pair by index into the owning [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairId {
    pub attr: usize,
    pub obj: usize,
}

/// One D-vector prototype per object category.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTable {
    pub vectors: Vec<Vector>,
}

/// One D×D operator per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeBank {
    pub operators: Vec<Matrix>,
}

/// Affine map from raw feature dimension F to embedding dimension D.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedder {
    pub weight: Matrix, // D x F
    pub bias: Vector,   // D
}

/// Softmax linear classifiers over the composed representation.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxHeads {
    pub attr_weight: Matrix, // |A| x D
    pub attr_bias: Vector,   // |A|
    pub obj_weight: Matrix,  // |O| x D
    pub obj_bias: Vector,    // |O|
}

/// All learnable parameters: embedder, attribute operators, object vectors,
/// and the two auxiliary classifier heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub vocab: Vocab,
    pub objects: ObjectTable,
    pub attrs: AttributeBank,
    pub embedder: ImageEmbedder,
    pub aux: AuxHeads,
    pub dim: usize,
    pub feat_dim: usize,
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller; two uniforms per draw, second discarded for simplicity.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vector {
    Vector::new((0..n).map(|_| gaussian(rng, std)).collect())
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| gaussian(rng, std)).collect(),
    )
}

/// Initialize parameters: identity operators, object vectors from `object_init`
/// when given (else N(0, 1/√D)), embedder and aux heads N(0, 1/√fan_in).
/// Deterministic for a fixed seed.
pub fn init_params(
    vocab: Vocab,
    dim: usize,
    feat_dim: usize,
    object_init: Option<&HashMap<String, Vector>>,
    seed: u64,
) -> Result<ModelParams> {
    assert!(dim >= 1 && feat_dim >= 1, "dim and feat_dim must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::SeedableRng;

    let obj_std = 1.0 / (dim as f64).sqrt();
    let mut vectors = Vec::with_capacity(vocab.num_objs());
    for name in &vocab.objects {
        match object_init {
            Some(table) => {
                let v = table.get(name).ok_or_else(|| {
                    Error::validation(format!("no initialization vector for object '{name}'"))
                })?;
                if v.len() != dim {
                    return Err(Error::validation(format!(
                        "object vector for '{}' has dimension {}, expected {}",
                        name,
                        v.len(),
                        dim
                    )));
                }
                vectors.push(v.clone());
            }
            None => vectors.push(gaussian_vector(&mut rng, dim, obj_std)),
        }
    }
    if let Some(table) = object_init {
        for name in table.keys() {
            if vocab.obj_index(name).is_none() {
                return Err(Error::validation(format!(
                    "object vector file names unknown object '{name}'"
                )));
            }
        }
    }

    let operators = (0..vocab.num_attrs())
        .map(|_| Matrix::identity(dim))
        .collect();

    let emb_std = 1.0 / (feat_dim as f64).sqrt();
    let head_std = 1.0 / (dim as f64).sqrt();
    // square embedders start at the identity: when features already live in
    // a space of the model dimension, the aligned start point is far better
    // than a random projection and is still fully trainable
    let embedder = ImageEmbedder {
        weight: if feat_dim == dim {
            Matrix::identity(dim)
        } else {
            gaussian_matrix(&mut rng, dim, feat_dim, emb_std)
        },
        bias: Vector::new(vec![0.0; dim]),
    };
    let aux = AuxHeads {
        attr_weight: gaussian_matrix(&mut rng, vocab.num_attrs(), dim, head_std),
        attr_bias: gaussian_vector(&mut rng, vocab.num_attrs(), head_std),
        obj_weight: gaussian_matrix(&mut rng, vocab.num_objs(), dim, head_std),
        obj_bias: gaussian_vector(&mut rng, vocab.num_objs(), head_std),
    };

    Ok(ModelParams {
        vocab,
        objects: ObjectTable { vectors },
        attrs: AttributeBank { operators },
        embedder,
        aux,
        dim,
        feat_dim,
    })
}

impl ModelParams {
    /// f(x): project a raw F-dimensional feature into the semantic space.
    pub fn embed_image(&self, feat: &Vector) -> Vector {
        assert_eq!(
            feat.len(),
            self.feat_dim,
            "embed_image: feature length {} but embedder expects {}",
            feat.len(),
            self.feat_dim
        );
        let mut out = matvec(&self.embedder.weight, feat);
        out.axpy(1.0, &self.embedder.bias);
        out
    }

    /// g(p) = M_a o. Works for any pair in the vocab cross-product, seen or
    /// unseen.
    pub fn compose(&self, p: PairId) -> Vector {
        assert!(
            p.attr < self.vocab.num_attrs() && p.obj < self.vocab.num_objs(),
            "compose: pair ({}, {}) out of range ({} attrs, {} objects)",
            p.attr,
            p.obj,
            self.vocab.num_attrs(),
            self.vocab.num_objs()
        );
        matvec(&self.attrs.operators[p.attr], &self.objects.vectors[p.obj])
    }

    /// Apply an attribute operator to an externally supplied object vector,
    /// for objects absent from the vocabulary.
    pub fn compose_with_vector(&self, attr: usize, o_vec: &Vector) -> Vector {
        assert!(
            attr < self.vocab.num_attrs(),
            "compose_with_vector: attribute {} out of range ({} attrs)",
            attr,
            self.vocab.num_attrs()
        );
        matvec(&self.attrs.operators[attr], o_vec)
    }

    /// Element-wise compose over a pair list, order preserved.
    pub fn compose_all(&self, pairs: &[PairId]) -> Vec<Vector> {
        pairs.iter().map(|&p| self.compose(p)).collect()
    }

    /// Flatten every parameter tensor into one vector, in checkpoint order:
    /// objects, operators, embedder weight, embedder bias, attr head
    /// (weight then bias), obj head (weight then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for v in &self.objects.vectors {
            out.extend_from_slice(&v.data);
        }
        for m in &self.attrs.operators {
            out.extend_from_slice(&m.data);
        }
        out.extend_from_slice(&self.embedder.weight.data);
        out.extend_from_slice(&self.embedder.bias.data);
        out.extend_from_slice(&self.aux.attr_weight.data);
        out.extend_from_slice(&self.aux.attr_bias.data);
        out.extend_from_slice(&self.aux.obj_weight.data);
        out.extend_from_slice(&self.aux.obj_bias.data);
        out
    }

    /// Inverse of [`flatten`]: overwrite every tensor from a flat slice.
    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut i = 0;
        let mut take = |n: usize| {
            let s = &flat[i..i + n];
            i += n;
            s.to_vec()
        };
        for v in &mut self.objects.vectors {
            v.data = take(v.data.len());
        }
        for m in &mut self.attrs.operators {
            m.data = take(m.data.len());
        }
        self.embedder.weight.data = take(self.embedder.weight.data.len());
        self.embedder.bias.data = take(self.embedder.bias.data.len());
        self.aux.attr_weight.data = take(self.aux.attr_weight.data.len());
        self.aux.attr_bias.data = take(self.aux.attr_bias.data.len());
        self.aux.obj_weight.data = take(self.aux.obj_weight.data.len());
        self.aux.obj_bias.data = take(self.aux.obj_bias.data.len());
        assert_eq!(i, flat.len(), "unflatten: length mismatch");
    }
}
