//! Fixtures shared by unit tests, integration tests and benchmarks: small
//! randomized models and datasets, and the hand-built additive example.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, FeatureSchema, FeatureSpec, ScalerSet};
use crate::embedding::FeatureEmbedding;
use crate::model::{PinConfig, PinModel};
use crate::numeric::{DenseMatrix, ParameterSet};
use crate::seeded_rng;

/// `q - 1` continuous features followed by one categorical with 3 levels.
pub fn small_schema(q: usize) -> FeatureSchema {
    let mut features: Vec<FeatureSpec> = (1..q).map(|j| FeatureSpec::continuous(format!("x{j}"))).collect();
    features.push(FeatureSpec::categorical(format!("x{q}"), ["a", "b", "c"]));
    FeatureSchema::new(features, "exposure", "claims").expect("valid schema")
}

pub fn small_config() -> PinConfig {
    PinConfig {
        embedding_dim: 3,
        embedding_hidden: 4,
        token_dim: 2,
        hidden1: 5,
        hidden2: 4,
    }
}

/// Model with every parameter drawn at random: biases, output weights and
/// the intercept are non-zero so all gradient paths are exercised.
pub fn randomize(model: &mut PinModel, seed: u64) {
    let mut rng = seeded_rng(seed, 99);
    let normal = Normal::new(0.0, 0.3).unwrap();
    let w = model.params.output_weights.len();
    for v in model.params.net.b1.iter_mut().chain(model.params.net.b2.iter_mut()) {
        *v = normal.sample(&mut rng);
    }
    model.params.net.b3 = normal.sample(&mut rng);
    for e in model.params.embeddings.iter_mut() {
        for b in e.blocks_mut() {
            for v in b.iter_mut() {
                *v += normal.sample(&mut rng) * 0.5;
            }
        }
    }
    for i in 0..w {
        if model.active[i] {
            model.params.output_weights[i] = rng.gen_range(-1.0..1.0);
        }
    }
    model.params.bias = rng.gen_range(-2.5..-1.0);
}

pub fn random_model_with(schema: FeatureSchema, config: PinConfig, seed: u64) -> PinModel {
    let scalers = ScalerSet::identity(&schema);
    let mut model = PinModel::new(schema, scalers, config, seed).expect("valid model");
    randomize(&mut model, seed);
    model
}

pub fn random_model(q: usize, seed: u64) -> PinModel {
    random_model_with(small_schema(q), small_config(), seed)
}

/// Rows drawn uniformly from the model's input space, with random exposure
/// and small claim counts.
pub fn random_dataset(model: &PinModel, n: usize, seed: u64) -> Dataset {
    let mut rng = seeded_rng(seed, 98);
    let q = model.num_features();
    let mut data = Dataset::empty(q);
    let mut row = vec![0.0; q];
    for _ in 0..n {
        for (x, f) in row.iter_mut().zip(&model.schema.features) {
            *x = if f.is_categorical() {
                rng.gen_range(1..=f.levels.len()) as f64
            } else {
                rng.gen_range(-1.0..1.0)
            };
        }
        let v = rng.gen_range(0.2..1.0);
        let count = rng.gen_range(0..3) as f64;
        data.push(&row, count, v).expect("valid row");
    }
    data
}

/// Continuous features with one-dimensional identity tokens and a shared
/// network computing `f(φ_j, φ_k, e) = x_j + x_k` exactly for
/// `x_j + x_k ≥ -2`. All output weights start at zero.
pub fn additive_example_model(q: usize) -> PinModel {
    let features = (1..=q).map(|j| FeatureSpec::continuous(format!("x{j}"))).collect();
    let schema = FeatureSchema::new(features, "exposure", "claims").expect("valid schema");
    let config = PinConfig {
        embedding_dim: 1,
        embedding_hidden: 1,
        token_dim: 1,
        hidden1: 1,
        hidden2: 1,
    };
    let scalers = ScalerSet::identity(&schema);
    let mut model = PinModel::new(schema, scalers, config, 0).expect("valid model");
    model.params.embeddings = vec![FeatureEmbedding::Identity { dim: 1 }; q];
    model.params.tokens = DenseMatrix::zeros(model.num_pairs(), 1);
    let net = &mut model.params.net;
    net.w1 = DenseMatrix::new(1, 3, vec![1.0, 1.0, 0.0]).unwrap();
    net.b1 = vec![2.0];
    net.w2 = DenseMatrix::new(1, 1, vec![1.0]).unwrap();
    net.b2 = vec![0.0];
    net.w3 = vec![1.0];
    net.b3 = -2.0;
    model
}
