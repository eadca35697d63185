//! Per-feature tokenization: entity embeddings for categorical features and
//! two-layer tanh networks for continuous ones.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{PinError, Result};
use crate::numeric::{DenseMatrix, ParameterSet};

/// Entity embedding: one `d`-vector per level (rows of an `n_j × d` matrix).
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalEmbedding {
    pub weights: DenseMatrix,
}

/// `x ↦ W2 · tanh(W1 x + b1) + b2` with a hidden width `d'`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousEmbedding {
    /// `d' × 1`, stored as a vector.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `d × d'`
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Continuous,
    Categorical,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureEmbedding {
    Continuous(ContinuousEmbedding),
    Categorical(CategoricalEmbedding),
    /// Parameter-free linear token `φ(x) = (x, …, x)`; used for hand-built
    /// one-dimensional models.
    Identity { dim: usize },
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    (0..len).map(|_| dist.sample(rng)).collect()
}

impl CategoricalEmbedding {
    pub fn init(levels: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let data = glorot(rng, levels, dim, levels * dim);
        Self {
            weights: DenseMatrix::new(levels, dim, data).expect("shape"),
        }
    }

    pub fn levels(&self) -> usize {
        self.weights.rows()
    }
}

impl ContinuousEmbedding {
    pub fn init(hidden: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let w1 = glorot(rng, 1, hidden, hidden);
        let w2 = DenseMatrix::new(dim, hidden, glorot(rng, hidden, dim, dim * hidden)).expect("shape");
        Self {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; dim],
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    #[inline]
    fn hidden_into(&self, x: f64, t: &mut [f64]) {
        for ((t, w), b) in t.iter_mut().zip(&self.w1).zip(&self.b1) {
            *t = (w * x + b).tanh();
        }
    }
}

impl FeatureEmbedding {
    pub fn kind(&self) -> EmbeddingKind {
        match self {
            Self::Continuous(_) => EmbeddingKind::Continuous,
            Self::Categorical(_) => EmbeddingKind::Categorical,
            Self::Identity { .. } => EmbeddingKind::Identity,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Continuous(e) => e.b2.len(),
            Self::Categorical(e) => e.weights.cols(),
            Self::Identity { dim } => *dim,
        }
    }

    /// Writes `φ_j(x)` into `out`. Categorical levels are 1-based.
    #[inline]
    pub fn embed_into(&self, x: f64, out: &mut [f64]) {
        match self {
            Self::Continuous(e) => {
                out.copy_from_slice(&e.b2);
                let mut t = [0.0f64; 64];
                if e.hidden() <= t.len() {
                    let t = &mut t[..e.hidden()];
                    e.hidden_into(x, t);
                    e.w2.add_matvec(t, out);
                } else {
                    let mut t = vec![0.0; e.hidden()];
                    e.hidden_into(x, &mut t);
                    e.w2.add_matvec(&t, out);
                }
            }
            Self::Categorical(e) => out.copy_from_slice(e.weights.row(x as usize - 1)),
            Self::Identity { .. } => out.fill(x),
        }
    }

    /// Checked embedding of a single value.
    pub fn embed(&self, x: f64) -> Result<Vec<f64>> {
        match self {
            Self::Categorical(e) => embed_categorical(x, e),
            _ => {
                if !x.is_finite() {
                    return Err(PinError::Domain(format!("cannot embed {x}")));
                }
                let mut out = vec![0.0; self.dim()];
                self.embed_into(x, &mut out);
                Ok(out)
            }
        }
    }

    /// Accumulates parameter gradients into `grad` given `dphi = ∂L/∂φ_j(x)`.
    pub fn backward(&self, x: f64, dphi: &[f64], grad: &mut FeatureEmbedding) {
        match (self, grad) {
            (Self::Continuous(e), Self::Continuous(g)) => {
                let h = e.hidden();
                let mut t = vec![0.0; h];
                e.hidden_into(x, &mut t);
                g.w2.add_outer(dphi, &t);
                for (gb, d) in g.b2.iter_mut().zip(dphi) {
                    *gb += d;
                }
                let mut dt = vec![0.0; h];
                e.w2.add_matvec_t(dphi, &mut dt);
                for k in 0..h {
                    let du = dt[k] * (1.0 - t[k] * t[k]);
                    g.w1[k] += du * x;
                    g.b1[k] += du;
                }
            }
            (Self::Categorical(_), Self::Categorical(g)) => {
                for (w, d) in g.weights.row_mut(x as usize - 1).iter_mut().zip(dphi) {
                    *w += d;
                }
            }
            (Self::Identity { .. }, Self::Identity { .. }) => {}
            _ => panic!("gradient embedding kind differs from parameter embedding"),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    /// Number of learnable values.
    pub fn parameter_count(&self) -> usize {
        self.num_parameters()
    }
}

impl ParameterSet for FeatureEmbedding {
    fn blocks(&self) -> Vec<&[f64]> {
        match self {
            Self::Continuous(e) => vec![&e.w1, &e.b1, e.w2.as_slice(), &e.b2],
            Self::Categorical(e) => vec![e.weights.as_slice()],
            Self::Identity { .. } => vec![],
        }
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Self::Continuous(e) => vec![&mut e.w1, &mut e.b1, e.w2.as_mut_slice(), &mut e.b2],
            Self::Categorical(e) => vec![e.weights.as_mut_slice()],
            Self::Identity { .. } => vec![],
        }
    }
}

/// Row `level` (1-based) of the embedding matrix.
pub fn embed_categorical(level: f64, embedding: &CategoricalEmbedding) -> Result<Vec<f64>> {
    let n = embedding.levels();
    if level.fract() != 0.0 || level < 1.0 || level > n as f64 {
        return Err(PinError::Contract(format!("level {level} outside 1..={n}")));
    }
    Ok(embedding.weights.row(level as usize - 1).to_vec())
}

pub fn embed_continuous(x: f64, embedding: &ContinuousEmbedding) -> Result<Vec<f64>> {
    FeatureEmbedding::Continuous(embedding.clone()).embed(x)
}

/// The `d × q` token tensor `φ(x)`; column `j` is `φ_j(x_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor {
    /// Stored transposed (`q × d`) so each token is contiguous.
    columns: DenseMatrix,
}

impl TokenTensor {
    pub fn dim(&self) -> usize {
        self.columns.cols()
    }

    pub fn num_tokens(&self) -> usize {
        self.columns.rows()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        self.columns.row(j)
    }
}

pub fn tokenize(x: &[f64], embeddings: &[FeatureEmbedding]) -> Result<TokenTensor> {
    if x.len() != embeddings.len() {
        return Err(PinError::Contract(format!(
            "feature vector has {} components, model expects {}",
            x.len(),
            embeddings.len()
        )));
    }
    let d = embeddings.first().map_or(0, FeatureEmbedding::dim);
    if embeddings.iter().any(|e| e.dim() != d) {
        return Err(PinError::Contract("embeddings disagree on dimension".into()));
    }
    let mut columns = DenseMatrix::zeros(x.len(), d);
    for (j, (xj, e)) in x.iter().zip(embeddings).enumerate() {
        columns.row_mut(j).copy_from_slice(&e.embed(*xj)?);
    }
    Ok(TokenTensor { columns })
}
