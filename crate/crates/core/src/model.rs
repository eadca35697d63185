//! The pairwise interaction network.
//!
//! Every ordered pair `j ≤ k` of features owns an interaction token `e_{j,k}`
//! and an output weight `w_{j,k}`. A single shared three-layer ReLU network
//! `f_θ` maps `(φ_j, φ_k, e_{j,k})` to a logit, the centered hard sigmoid turns
//! it into a unit `h_{j,k} ∈ [0, 1]`, and the prediction is
//! `exp(b + Σ w_{j,k} h_{j,k})`.
//!
//! The first dense layer is split by input block, `W1 = [W1a | W1b | W1c]`,
//! so that `W1a φ_j` and `W1b φ_k` are computed once per feature and row and
//! `W1c e_{j,k} + b1` once per pair, instead of once per pair and row.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureKind, FeatureSchema, ScalerSet};
use crate::embedding::{CategoricalEmbedding, ContinuousEmbedding, FeatureEmbedding};
use crate::error::{PinError, Result};
use crate::loss::unit_deviance;
use crate::numeric::{dot, hard_sigmoid_derivative, hard_sigmoid_raw, relu, DenseMatrix, ParameterSet};
use crate::{seeded_rng, STREAM_INIT};

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PinConfig {
    /// Token dimension `d` of every feature embedding.
    pub embedding_dim: usize,
    /// Hidden width `d'` of continuous-feature embedding networks.
    pub embedding_hidden: usize,
    /// Interaction token dimension `d0`.
    pub token_dim: usize,
    /// Width `d1` of the first shared layer.
    pub hidden1: usize,
    /// Width `d2` of the second shared layer.
    pub hidden2: usize,
}

impl Default for PinConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 10,
            embedding_hidden: 20,
            token_dim: 10,
            hidden1: 30,
            hidden2: 20,
        }
    }
}

impl PinConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embedding_dim,
            self.embedding_hidden,
            self.token_dim,
            self.hidden1,
            self.hidden2,
        ];
        if dims.contains(&0) {
            return Err(PinError::Contract(format!("all dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        2 * self.embedding_dim + self.token_dim
    }
}

/// Number of ordered pairs `j ≤ k` among `q` features.
pub fn pair_count(q: usize) -> usize {
    q * (q + 1) / 2
}

/// Position of pair `(j, k)`, `j ≤ k`, in row-major upper-triangular order
/// `(0,0), (0,1), …, (0,q-1), (1,1), …`. Indices are 0-based.
#[inline]
pub fn pair_index(q: usize, j: usize, k: usize) -> usize {
    debug_assert!(j <= k && k < q);
    j * q - j * j.saturating_sub(1) / 2 + (k - j)
}

/// All pairs `(j, k)`, `j ≤ k`, in [`pair_index`] order.
pub fn pair_list(q: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(pair_count(q));
    for j in 0..q {
        for k in j..q {
            out.push((j, k));
        }
    }
    out
}

/// Slot assignment of a pair: `first` feeds the `φ_j` block of `f_θ`,
/// `second` the `φ_k` block. Fresh models use `first ≤ second`; reindexed
/// models may carry the reverse orientation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub first: usize,
    pub second: usize,
}

impl Pair {
    pub fn is_diagonal(&self) -> bool {
        self.first == self.second
    }

    /// The pair as `(min, max)`.
    pub fn canonical(&self) -> (usize, usize) {
        (self.first.min(self.second), self.first.max(self.second))
    }
}

/// `f_θ(φ_j, φ_k, e) = W3 ReLU(W2 ReLU(W1 (φ_j, φ_k, e) + b1) + b2) + b3`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedInteractionNet {
    /// `d1 × (2d + d0)`
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    /// `d2 × d1`
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
    /// `1 × d2`
    pub w3: Vec<f64>,
    pub b3: f64,
}

impl SharedInteractionNet {
    pub fn init(config: &PinConfig, rng: &mut impl Rng) -> Self {
        let glorot = |rng: &mut dyn rand::RngCore, rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            DenseMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
        };
        let w1 = glorot(rng, config.hidden1, config.input_width());
        let w2 = glorot(rng, config.hidden2, config.hidden1);
        let w3 = glorot(rng, 1, config.hidden2).into_vec();
        Self {
            w1,
            b1: vec![0.0; config.hidden1],
            w2,
            b2: vec![0.0; config.hidden2],
            w3,
            b3: 0.0,
        }
    }

    pub fn hidden1(&self) -> usize {
        self.b1.len()
    }

    pub fn hidden2(&self) -> usize {
        self.b2.len()
    }

    pub fn input_width(&self) -> usize {
        self.w1.cols()
    }

    /// Layers two and three applied to a first-layer pre-activation `z1`.
    #[inline]
    pub fn tail(&self, z1: &[f64], r1: &mut [f64], r2: &mut [f64]) -> f64 {
        for (r, z) in r1.iter_mut().zip(z1) {
            *r = relu(*z);
        }
        r2.copy_from_slice(&self.b2);
        self.w2.add_matvec(r1, r2);
        for r in r2.iter_mut() {
            *r = relu(*r);
        }
        dot(&self.w3, r2) + self.b3
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }
}

impl ParameterSet for SharedInteractionNet {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            &self.w3,
            std::slice::from_ref(&self.b3),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            &mut self.w3,
            std::slice::from_mut(&mut self.b3),
        ]
    }
}

/// Logit `f_θ(φ_j, φ_k, e_{j,k})` of one pair.
pub fn interaction_logit(
    phi_j: &[f64],
    phi_k: &[f64],
    token: &[f64],
    net: &SharedInteractionNet,
) -> Result<f64> {
    let d = phi_j.len();
    if phi_k.len() != d || 2 * d + token.len() != net.input_width() {
        return Err(PinError::Contract(format!(
            "inputs of widths {}, {}, {} do not match a network of input width {}",
            d,
            phi_k.len(),
            token.len(),
            net.input_width()
        )));
    }
    let mut z1 = net.b1.clone();
    net.w1.add_matvec_cols(0, phi_j, &mut z1);
    net.w1.add_matvec_cols(d, phi_k, &mut z1);
    net.w1.add_matvec_cols(2 * d, token, &mut z1);
    let mut r1 = vec![0.0; net.hidden1()];
    let mut r2 = vec![0.0; net.hidden2()];
    Ok(net.tail(&z1, &mut r1, &mut r2))
}

/// Every learnable value of a PIN.
#[derive(Clone, Debug, PartialEq)]
pub struct PinParams {
    pub embeddings: Vec<FeatureEmbedding>,
    /// One row `e_{j,k}` per pair, in [`pair_index`] order.
    pub tokens: DenseMatrix,
    pub net: SharedInteractionNet,
    pub output_weights: Vec<f64>,
    pub bias: f64,
}

impl PinParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            embeddings: self.embeddings.iter().map(FeatureEmbedding::zeros_like).collect(),
            tokens: DenseMatrix::zeros(self.tokens.rows(), self.tokens.cols()),
            net: self.net.zeros_like(),
            output_weights: vec![0.0; self.output_weights.len()],
            bias: 0.0,
        }
    }
}

impl ParameterSet for PinParams {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.embeddings.iter().flat_map(|e| e.blocks()).collect();
        out.push(self.tokens.as_slice());
        out.extend(self.net.blocks());
        out.push(&self.output_weights);
        out.push(std::slice::from_ref(&self.bias));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.embeddings.iter_mut().flat_map(|e| e.blocks_mut()).collect();
        out.push(self.tokens.as_mut_slice());
        out.extend(self.net.blocks_mut());
        out.push(&mut self.output_weights);
        out.push(std::slice::from_mut(&mut self.bias));
        out
    }
}

/// A fitted or freshly initialized PIN with its data contract.
#[derive(Clone, Debug, PartialEq)]
pub struct PinModel {
    pub params: PinParams,
    pub pairs: Vec<Pair>,
    /// Pairs whose output weight is trainable; inactive weights stay at 0.
    pub active: Vec<bool>,
    pub schema: FeatureSchema,
    pub scalers: ScalerSet,
    pub config: PinConfig,
    /// Seeds that produced this model (initialization first).
    pub seeds: Vec<u64>,
}

impl PinModel {
    /// Seeded initialization: Glorot-uniform dense weights and embeddings,
    /// zero biases, tokens `N(0, 1/d0)`, zero output weights and bias.
    pub fn new(schema: FeatureSchema, scalers: ScalerSet, config: PinConfig, seed: u64) -> Result<Self> {
        schema.validate()?;
        config.validate()?;
        if scalers.scalers.len() != schema.num_features() {
            return Err(PinError::Contract("one scaler slot per feature required".into()));
        }
        let mut rng = seeded_rng(seed, STREAM_INIT);
        let d = config.embedding_dim;
        let embeddings = schema
            .features
            .iter()
            .map(|f| match f.kind {
                FeatureKind::Continuous => {
                    FeatureEmbedding::Continuous(ContinuousEmbedding::init(config.embedding_hidden, d, &mut rng))
                }
                FeatureKind::Categorical => {
                    FeatureEmbedding::Categorical(CategoricalEmbedding::init(f.levels.len(), d, &mut rng))
                }
            })
            .collect();
        let q = schema.num_features();
        let p = pair_count(q);
        let normal = Normal::new(0.0, 1.0 / (config.token_dim as f64).sqrt()).expect("valid std");
        let tokens = DenseMatrix::from_fn(p, config.token_dim, |_, _| normal.sample(&mut rng));
        let net = SharedInteractionNet::init(&config, &mut rng);
        Ok(Self {
            params: PinParams {
                embeddings,
                tokens,
                net,
                output_weights: vec![0.0; p],
                bias: 0.0,
            },
            pairs: pair_list(q).into_iter().map(|(first, second)| Pair { first, second }).collect(),
            active: vec![true; p],
            schema,
            scalers,
            config,
            seeds: vec![seed],
        })
    }

    pub fn num_features(&self) -> usize {
        self.schema.num_features()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Index of the pair `{j, k}` (either order).
    pub fn pair_position(&self, j: usize, k: usize) -> usize {
        pair_index(self.num_features(), j.min(k), j.max(k))
    }

    /// Sets the trainable-pair mask; inactive output weights are zeroed.
    pub fn set_active(&mut self, active: Vec<bool>) -> Result<()> {
        if active.len() != self.num_pairs() {
            return Err(PinError::Contract("mask length differs from pair count".into()));
        }
        for (w, &a) in self.params.output_weights.iter_mut().zip(&active) {
            if !a {
                *w = 0.0;
            }
        }
        self.active = active;
        Ok(())
    }

    /// Restricts the model to the diagonal units `h_{l,l}`.
    pub fn diagonal_only(mut self) -> Self {
        let mask = self.pairs.iter().map(Pair::is_diagonal).collect();
        self.set_active(mask).expect("mask length");
        self
    }

    pub fn active_pairs(&self) -> Vec<usize> {
        (0..self.num_pairs()).filter(|&p| self.active[p]).collect()
    }

    /// Confirms the model was built for `schema`.
    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        if self.schema.features != schema.features {
            return Err(PinError::Schema("data schema differs from the model's schema".into()));
        }
        Ok(())
    }

    /// Validates a scaled feature vector against the schema.
    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.num_features() {
            return Err(PinError::Contract(format!(
                "feature vector has {} components, model expects {}",
                x.len(),
                self.num_features()
            )));
        }
        for (v, f) in x.iter().zip(&self.schema.features) {
            if !v.is_finite() {
                return Err(PinError::Domain(format!("non-finite value for {}", f.name)));
            }
            if f.is_categorical() && (v.fract() != 0.0 || *v < 1.0 || *v > f.levels.len() as f64) {
                return Err(PinError::Contract(format!("level {v} outside 1..={} for {}", f.levels.len(), f.name)));
            }
        }
        Ok(())
    }

    /// Link-scale prediction `b + Σ w_{j,k} h_{j,k}(x)` (no input checks).
    pub fn predict_link(&self, x: &[f64]) -> f64 {
        let engine = Engine::new(self);
        let mut state = engine.row_state();
        engine.forward_row(x, &mut state);
        self.params.bias + engine.weighted_sum(&state)
    }

    /// Frequency prediction `exp(b + Σ w_{j,k} h_{j,k}(x))`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.predict_link(x).exp()
    }

    /// Frequency predictions for every row.
    pub fn predict_dataset(&self, data: &Dataset) -> Vec<f64> {
        self.predict_link_dataset(data).into_iter().map(f64::exp).collect()
    }

    pub fn predict_link_dataset(&self, data: &Dataset) -> Vec<f64> {
        let engine = Engine::new(self);
        let mut state = engine.row_state();
        data.rows()
            .map(|x| {
                engine.forward_row(x, &mut state);
                self.params.bias + engine.weighted_sum(&state)
            })
            .collect()
    }

    /// `Σ |w_{j,k}|` over active pairs.
    pub fn output_weight_l1(&self) -> f64 {
        self.active_pairs().iter().map(|&p| self.params.output_weights[p].abs()).sum()
    }
}

/// Unit `h_{j,k}(x)` for `j ≤ k` (0-based).
pub fn interaction_unit(x: &[f64], j: usize, k: usize, model: &PinModel) -> Result<f64> {
    if j > k {
        return Err(PinError::Contract(format!("pair ({j}, {k}) lies below the diagonal")));
    }
    if k >= model.num_features() {
        return Err(PinError::Contract(format!("feature index {k} out of range")));
    }
    model.check_input(x)?;
    let p = model.pair_position(j, k);
    let pair = model.pairs[p];
    let phi_a = model.params.embeddings[pair.first].embed(x[pair.first])?;
    let phi_b = model.params.embeddings[pair.second].embed(x[pair.second])?;
    let logit = interaction_logit(&phi_a, &phi_b, model.params.tokens.row(p), &model.params.net)?;
    Ok(hard_sigmoid_raw(logit))
}

/// Checked frequency prediction.
pub fn pin_forward(x: &[f64], model: &PinModel) -> Result<f64> {
    model.check_input(x)?;
    Ok(model.predict(x))
}

/// Per-row intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct RowState {
    phi: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    r1: Vec<f64>,
    r2: Vec<f64>,
    pub(crate) logit: Vec<f64>,
    pub(crate) h: Vec<f64>,
}

/// Scratch buffers for [`Engine::backward_row`].
#[derive(Clone, Debug)]
pub(crate) struct BackScratch {
    da: Vec<f64>,
    db: Vec<f64>,
    dz1: Vec<f64>,
    dz2: Vec<f64>,
    dphi: Vec<f64>,
    /// Accumulated `∂L/∂(W1c e_p + b1)` per pair, `P × d1`.
    dc: Vec<f64>,
}

/// Forward/backward evaluator over the active pairs of a parameter set.
pub(crate) struct Engine<'m> {
    pub(crate) params: &'m PinParams,
    pub(crate) pairs: &'m [Pair],
    pub(crate) active: Vec<usize>,
    q: usize,
    d: usize,
    d1: usize,
    d2: usize,
    /// `W1c e_p + b1` for every pair (rows of inactive pairs unused).
    c: Vec<f64>,
}

impl<'m> Engine<'m> {
    pub(crate) fn new(model: &'m PinModel) -> Self {
        Self::with_active(&model.params, &model.pairs, model.active_pairs())
    }

    pub(crate) fn with_active(params: &'m PinParams, pairs: &'m [Pair], active: Vec<usize>) -> Self {
        let q = params.embeddings.len();
        let d = params.embeddings.first().map_or(0, FeatureEmbedding::dim);
        let d1 = params.net.hidden1();
        let d2 = params.net.hidden2();
        let mut c = vec![0.0; pairs.len() * d1];
        for &p in &active {
            let cp = &mut c[p * d1..(p + 1) * d1];
            cp.copy_from_slice(&params.net.b1);
            params.net.w1.add_matvec_cols(2 * d, params.tokens.row(p), cp);
        }
        Self {
            params,
            pairs,
            active,
            q,
            d,
            d1,
            d2,
            c,
        }
    }

    pub(crate) fn row_state(&self) -> RowState {
        let n = self.active.len();
        RowState {
            phi: vec![0.0; self.q * self.d],
            a: vec![0.0; self.q * self.d1],
            b: vec![0.0; self.q * self.d1],
            r1: vec![0.0; n * self.d1],
            r2: vec![0.0; n * self.d2],
            logit: vec![0.0; n],
            h: vec![0.0; n],
        }
    }

    pub(crate) fn scratch(&self) -> BackScratch {
        BackScratch {
            da: vec![0.0; self.q * self.d1],
            db: vec![0.0; self.q * self.d1],
            dz1: vec![0.0; self.d1],
            dz2: vec![0.0; self.d2],
            dphi: vec![0.0; self.d],
            dc: vec![0.0; self.pairs.len() * self.d1],
        }
    }

    /// `(W1a φ_j(x_j), W1b φ_j(x_j))` for one feature value.
    #[inline]
    pub(crate) fn feature_parts(&self, j: usize, xj: f64, phi: &mut [f64], a: &mut [f64], b: &mut [f64]) {
        self.params.embeddings[j].embed_into(xj, phi);
        a.fill(0.0);
        b.fill(0.0);
        self.params.net.w1.add_matvec_cols(0, phi, a);
        self.params.net.w1.add_matvec_cols(self.d, phi, b);
    }

    /// Unit of pair `p` from precomputed first/second slot parts.
    #[inline]
    pub(crate) fn unit_from_parts(&self, p: usize, a_first: &[f64], b_second: &[f64], z1: &mut [f64], r1: &mut [f64], r2: &mut [f64]) -> f64 {
        let cp = &self.c[p * self.d1..(p + 1) * self.d1];
        for i in 0..self.d1 {
            z1[i] = a_first[i] + b_second[i] + cp[i];
        }
        hard_sigmoid_raw(self.params.net.tail(z1, r1, r2))
    }

    pub(crate) fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.d1, self.d2)
    }

    pub(crate) fn forward_row(&self, x: &[f64], st: &mut RowState) {
        let (d, d1, d2) = (self.d, self.d1, self.d2);
        for j in 0..self.q {
            let (phi, a, b) = (
                &mut st.phi[j * d..(j + 1) * d],
                &mut st.a[j * d1..(j + 1) * d1],
                &mut st.b[j * d1..(j + 1) * d1],
            );
            self.params.embeddings[j].embed_into(x[j], phi);
            a.fill(0.0);
            b.fill(0.0);
            self.params.net.w1.add_matvec_cols(0, phi, a);
            self.params.net.w1.add_matvec_cols(d, phi, b);
        }
        let net = &self.params.net;
        for (i, &p) in self.active.iter().enumerate() {
            let pair = self.pairs[p];
            let a = &st.a[pair.first * d1..(pair.first + 1) * d1];
            let b = &st.b[pair.second * d1..(pair.second + 1) * d1];
            let cp = &self.c[p * d1..(p + 1) * d1];
            let r1 = &mut st.r1[i * d1..(i + 1) * d1];
            for m in 0..d1 {
                r1[m] = relu(a[m] + b[m] + cp[m]);
            }
            let r2 = &mut st.r2[i * d2..(i + 1) * d2];
            r2.copy_from_slice(&net.b2);
            net.w2.add_matvec(r1, r2);
            for r in r2.iter_mut() {
                *r = relu(*r);
            }
            let logit = dot(&net.w3, r2) + net.b3;
            st.logit[i] = logit;
            st.h[i] = hard_sigmoid_raw(logit);
        }
    }

    /// `Σ_active w_p h_p` for the last forward row.
    #[inline]
    pub(crate) fn weighted_sum(&self, st: &RowState) -> f64 {
        self.active
            .iter()
            .zip(&st.h)
            .map(|(&p, h)| self.params.output_weights[p] * h)
            .sum()
    }

    /// Back-propagates `dh[i] = ∂L/∂h_{active[i]}` for one row into `grads`
    /// (embeddings, `W1a`, `W1b`, `W2`, `W3`, biases) and into `sc.dc`.
    pub(crate) fn backward_row(&self, x: &[f64], st: &RowState, dh: &[f64], grads: &mut PinParams, sc: &mut BackScratch) {
        let (d, d1, d2) = (self.d, self.d1, self.d2);
        let net = &self.params.net;
        sc.da.fill(0.0);
        sc.db.fill(0.0);
        let mut touched = false;
        for (i, &p) in self.active.iter().enumerate() {
            let ds = dh[i] * hard_sigmoid_derivative(st.logit[i]);
            if ds == 0.0 {
                continue;
            }
            touched = true;
            let pair = self.pairs[p];
            let r1 = &st.r1[i * d1..(i + 1) * d1];
            let r2 = &st.r2[i * d2..(i + 1) * d2];
            let g = &mut grads.net;
            for m in 0..d2 {
                g.w3[m] += ds * r2[m];
                sc.dz2[m] = if r2[m] > 0.0 { ds * net.w3[m] } else { 0.0 };
            }
            g.b3 += ds;
            g.w2.add_outer(&sc.dz2, r1);
            for (gb, dz) in g.b2.iter_mut().zip(&sc.dz2) {
                *gb += dz;
            }
            sc.dz1.fill(0.0);
            net.w2.add_matvec_t(&sc.dz2, &mut sc.dz1);
            for m in 0..d1 {
                if r1[m] <= 0.0 {
                    sc.dz1[m] = 0.0;
                }
            }
            let (fa, sb) = (pair.first * d1, pair.second * d1);
            let cp = p * d1;
            for m in 0..d1 {
                let v = sc.dz1[m];
                sc.da[fa + m] += v;
                sc.db[sb + m] += v;
                sc.dc[cp + m] += v;
            }
        }
        if !touched {
            return;
        }
        for j in 0..self.q {
            let da = &sc.da[j * d1..(j + 1) * d1];
            let db = &sc.db[j * d1..(j + 1) * d1];
            if da.iter().all(|v| *v == 0.0) && db.iter().all(|v| *v == 0.0) {
                continue;
            }
            let phi = &st.phi[j * d..(j + 1) * d];
            grads.net.w1.add_outer_cols(0, da, phi);
            grads.net.w1.add_outer_cols(d, db, phi);
            sc.dphi.fill(0.0);
            net.w1.add_matvec_t_cols(0, da, &mut sc.dphi);
            net.w1.add_matvec_t_cols(d, db, &mut sc.dphi);
            self.params.embeddings[j].backward(x[j], &sc.dphi, &mut grads.embeddings[j]);
        }
    }

    /// Flushes the per-pair accumulator into token, `W1c` and `b1` gradients.
    pub(crate) fn finish(&self, grads: &mut PinParams, sc: &mut BackScratch) {
        let (d, d1) = (self.d, self.d1);
        for &p in &self.active {
            let dc = &sc.dc[p * d1..(p + 1) * d1];
            if dc.iter().all(|v| *v == 0.0) {
                continue;
            }
            grads.net.w1.add_outer_cols(2 * d, dc, self.params.tokens.row(p));
            self.params.net.w1.add_matvec_t_cols(2 * d, dc, grads.tokens.row_mut(p));
            for (gb, v) in grads.net.b1.iter_mut().zip(dc) {
                *gb += v;
            }
        }
        sc.dc.fill(0.0);
    }
}

/// Mean Poisson deviance of `model` over `rows` of `data` and its exact
/// gradient with respect to every parameter. Inactive pairs receive zero
/// gradient.
pub fn pin_backward(model: &PinModel, data: &Dataset, rows: &[usize]) -> (f64, PinParams) {
    let mut grads = model.params.zeros_like();
    let loss = accumulate_gradient(model, data, rows, &mut grads);
    (loss, grads)
}

/// Like [`pin_backward`] but adds into an existing gradient buffer (which is
/// zeroed first).
pub(crate) fn accumulate_gradient(model: &PinModel, data: &Dataset, rows: &[usize], grads: &mut PinParams) -> f64 {
    for b in grads.blocks_mut() {
        b.fill(0.0);
    }
    let engine = Engine::new(model);
    let mut st = engine.row_state();
    let mut sc = engine.scratch();
    let mut dh = vec![0.0; engine.active.len()];
    let n = rows.len() as f64;
    let mut loss = 0.0;
    for &i in rows {
        let x = data.row(i);
        engine.forward_row(x, &mut st);
        let eta = model.params.bias + engine.weighted_sum(&st);
        let f = eta.exp();
        let (y, v) = (data.response()[i], data.exposure()[i]);
        loss += unit_deviance(f, y, v);
        let g = 2.0 * v * (f - y) / n;
        grads.bias += g;
        for (k, &p) in engine.active.iter().enumerate() {
            grads.output_weights[p] += g * st.h[k];
            dh[k] = g * model.params.output_weights[p];
        }
        engine.backward_row(x, &st, &dh, grads, &mut sc);
    }
    engine.finish(grads, &mut sc);
    loss / n
}

/// Minimum of `||f_θ| - 1|` over the active pairs of the given rows.
pub fn min_kink_distance(model: &PinModel, data: &Dataset, rows: &[usize]) -> f64 {
    let engine = Engine::new(model);
    let mut st = engine.row_state();
    let mut best = f64::INFINITY;
    for &i in rows {
        engine.forward_row(data.row(i), &mut st);
        for l in &st.logit {
            best = best.min((l.abs() - 1.0).abs());
        }
    }
    best
}

/// Parameter counts per architectural block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub continuous_embeddings: usize,
    pub categorical_embeddings: usize,
    pub interaction_tokens: usize,
    pub first_layer: usize,
    pub second_layer: usize,
    pub output_layer: usize,
    pub output_weights: usize,
    pub total: usize,
}

pub fn parameter_count(config: &PinConfig, schema: &FeatureSchema) -> ParameterCount {
    let (d, dh, d0, d1, d2) = (
        config.embedding_dim,
        config.embedding_hidden,
        config.token_dim,
        config.hidden1,
        config.hidden2,
    );
    let q = schema.num_features();
    let continuous_embeddings = schema.num_continuous() * (2 * dh + (dh + 1) * d);
    let categorical_embeddings = schema
        .features
        .iter()
        .filter(|f| f.is_categorical())
        .map(|f| f.levels.len() * d)
        .sum();
    let pairs = pair_count(q);
    let interaction_tokens = pairs * d0;
    let first_layer = d1 * (2 * d + d0) + d1;
    let second_layer = d2 * d1 + d2;
    let output_layer = d2 + 1;
    let output_weights = pairs + 1;
    ParameterCount {
        continuous_embeddings,
        categorical_embeddings,
        interaction_tokens,
        first_layer,
        second_layer,
        output_layer,
        output_weights,
        total: continuous_embeddings
            + categorical_embeddings
            + interaction_tokens
            + first_layer
            + second_layer
            + output_layer
            + output_weights,
    }
}

/// Reindexes `model` so that feature `i` of the new model is feature
/// `permutation[i]` of the old one (0-based). Predictions satisfy
/// `new.predict(x') == model.predict(x)` with `x'[i] = x[permutation[i]]`.
pub fn permute_features(model: &PinModel, permutation: &[usize]) -> Result<PinModel> {
    let q = model.num_features();
    let mut inverse = vec![usize::MAX; q];
    if permutation.len() != q {
        return Err(PinError::Contract(format!("permutation of length {} for {q} features", permutation.len())));
    }
    for (i, &old) in permutation.iter().enumerate() {
        if old >= q || inverse[old] != usize::MAX {
            return Err(PinError::Contract(format!("{permutation:?} is not a permutation of 0..{q}")));
        }
        inverse[old] = i;
    }
    let mut out = model.clone();
    out.schema.features = permutation.iter().map(|&o| model.schema.features[o].clone()).collect();
    out.scalers.scalers = permutation.iter().map(|&o| model.scalers.scalers[o]).collect();
    out.params.embeddings = permutation.iter().map(|&o| model.params.embeddings[o].clone()).collect();
    for (new_p, (i, l)) in pair_list(q).into_iter().enumerate() {
        let old_p = model.pair_position(permutation[i], permutation[l]);
        let old_pair = model.pairs[old_p];
        out.pairs[new_p] = Pair {
            first: inverse[old_pair.first],
            second: inverse[old_pair.second],
        };
        out.active[new_p] = model.active[old_p];
        out.params.output_weights[new_p] = model.params.output_weights[old_p];
        out.params.tokens.row_mut(new_p).copy_from_slice(model.params.tokens.row(old_p));
    }
    Ok(out)
}

/// One cell of a two-feature marginal prediction grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridCell {
    /// Value of feature A (scaled input space, or 1-based level).
    pub a: f64,
    pub b: f64,
    /// Mean predicted frequency over the background with A and B overridden.
    pub mean_prediction: f64,
}

/// Grid points of one feature: `resolution` equispaced values on `[-1, 1]`
/// for continuous features, every level for categorical ones.
pub fn grid_values(model: &PinModel, feature: usize, resolution: usize) -> Vec<f64> {
    let spec = &model.schema.features[feature];
    if spec.is_categorical() {
        (1..=spec.levels.len()).map(|l| l as f64).collect()
    } else if resolution == 1 {
        vec![0.0]
    } else {
        (0..resolution)
            .map(|i| -1.0 + 2.0 * i as f64 / (resolution - 1) as f64)
            .collect()
    }
}

/// Marginalized two-feature heatmap data: for every grid cell the average
/// prediction over `background` with features A and B overridden.
pub fn predict_grid(
    model: &PinModel,
    feature_a: usize,
    feature_b: usize,
    resolution: usize,
    background: &Dataset,
) -> Result<Vec<GridCell>> {
    let q = model.num_features();
    if feature_a == feature_b || feature_a >= q || feature_b >= q {
        return Err(PinError::Contract(format!("invalid grid features ({feature_a}, {feature_b})")));
    }
    if background.is_empty() {
        return Err(PinError::Contract("grid needs a non-empty background".into()));
    }
    if resolution == 0 {
        return Err(PinError::Contract("grid resolution must be positive".into()));
    }
    let engine = Engine::new(model);
    let mut st = engine.row_state();
    let mut row = vec![0.0; q];
    let mut cells = Vec::new();
    for &a in &grid_values(model, feature_a, resolution) {
        for &b in &grid_values(model, feature_b, resolution) {
            let mut total = 0.0;
            for x in background.rows() {
                row.copy_from_slice(x);
                row[feature_a] = a;
                row[feature_b] = b;
                engine.forward_row(&row, &mut st);
                total += (model.params.bias + engine.weighted_sum(&st)).exp();
            }
            cells.push(GridCell {
                a,
                b,
                mean_prediction: total / background.len() as f64,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSpec;
    use crate::numeric::finite_difference_gradient;
    use crate::testing::{additive_example_model, random_dataset, random_model};
    use proptest::prelude::*;

    #[test]
    fn pair_indexing() {
        for q in 1..8 {
            for (pos, (j, k)) in pair_list(q).into_iter().enumerate() {
                assert_eq!(pair_index(q, j, k), pos);
            }
            assert_eq!(pair_list(q).len(), pair_count(q));
        }
    }

    #[test]
    fn logit_examples() {
        let mut rng = seeded_rng(1, 0);
        let cfg = PinConfig {
            embedding_dim: 2,
            embedding_hidden: 2,
            token_dim: 1,
            hidden1: 3,
            hidden2: 2,
        };
        let mut net = SharedInteractionNet::init(&cfg, &mut rng);
        for b in net.blocks_mut() {
            b.fill(0.0);
        }
        net.b3 = -0.7;
        assert_eq!(interaction_logit(&[1., 2.], &[3., 4.], &[5.], &net).unwrap(), -0.7);

        let mut net = SharedInteractionNet::init(&cfg, &mut rng);
        net.w3 = vec![0.4, 1.3];
        net.b1 = vec![0.5, -0.2, 1.0];
        net.b2 = vec![0.1, 0.3];
        let expect = {
            let r1: Vec<f64> = net.b1.iter().map(|v| relu(*v)).collect();
            let mut z2 = net.b2.clone();
            net.w2.add_matvec(&r1, &mut z2);
            dot(&net.w3, &z2.iter().map(|v| relu(*v)).collect::<Vec<_>>()) + net.b3
        };
        let got = interaction_logit(&[0., 0.], &[0., 0.], &[0.], &net).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert!(interaction_logit(&[0.], &[0., 0.], &[0.], &net).is_err());
    }

    #[test]
    fn additive_example_units() {
        let m = additive_example_model(2);
        assert_eq!(interaction_unit(&[1.0, 1.0], 0, 1, &m).unwrap(), 1.0);
        assert_eq!(interaction_unit(&[-0.5, 0.0], 0, 1, &m).unwrap(), 0.25);
        assert_eq!(interaction_unit(&[-0.5, 0.0], 0, 0, &m).unwrap(), 0.0);
        assert!(interaction_unit(&[0.0, 0.0], 1, 0, &m).is_err());
        // Logit 0 -> 0.5.
        assert_eq!(interaction_unit(&[0.25, -0.25], 0, 1, &m).unwrap(), 0.5);
    }

    #[test]
    fn forward_examples() {
        let mut m = random_model(3, 5);
        m.params.output_weights.fill(0.0);
        m.params.bias = 0.07f64.ln();
        let x = [0.3, -0.2, 2.0];
        assert!((pin_forward(&x, &m).unwrap() - 0.07).abs() < 1e-15);
        m.params.bias = 0.4;
        assert_eq!(pin_forward(&x, &m).unwrap(), 0.4f64.exp());
        assert!(pin_forward(&[0.3, -0.2, 9.0], &m).is_err());
        assert!(pin_forward(&[0.3, -0.2], &m).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn prediction_bounds_and_unit_range(seed in 0u64..10_000, x0 in -3f64..3.0, x1 in -3f64..3.0, lvl in 1u32..4) {
            let m = random_model(3, seed);
            let x = [x0, x1, lvl as f64];
            let f = pin_forward(&x, &m).unwrap();
            let l1 = m.output_weight_l1();
            prop_assert!(f >= (m.params.bias - l1).exp() * (1.0 - 1e-12));
            prop_assert!(f <= (m.params.bias + l1).exp() * (1.0 + 1e-12));
            for (j, k) in pair_list(3) {
                let h = interaction_unit(&x, j, k, &m).unwrap();
                prop_assert!((0.0..=1.0).contains(&h));
            }
        }

        #[test]
        fn unit_depends_only_on_its_pair(seed in 0u64..10_000, x0 in -1f64..1.0, x1 in -1f64..1.0, other in -1f64..1.0) {
            let m = random_model(3, seed);
            let a = interaction_unit(&[x0, x1, 1.0], 0, 1, &m).unwrap();
            let mut changed = [x0, x1, 3.0];
            changed[2] = 2.0 + other.signum().max(0.0);
            let b = interaction_unit(&changed, 0, 1, &m).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }

        #[test]
        fn permuted_model_predicts_permuted_inputs(
            seed in 0u64..10_000,
            perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
            x in prop::array::uniform3(-1f64..1.0),
            lvl in 1u32..4,
        ) {
            let m = random_model(4, seed);
            let pm = permute_features(&m, &perm).unwrap();
            let row = [x[0], x[1], x[2], lvl as f64];
            let moved: Vec<f64> = perm.iter().map(|&o| row[o]).collect();
            prop_assert!((pm.predict(&moved) - m.predict(&row)).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_pair_ignores_its_token() {
        let mut m = random_model(3, 8);
        let mut mask = vec![true; m.num_pairs()];
        let p = m.pair_position(0, 2);
        mask[p] = false;
        m.set_active(mask).unwrap();
        assert_eq!(m.params.output_weights[p], 0.0);
        let x = [0.1, 0.7, 2.0];
        let before = m.predict(&x);
        m.params.tokens.row_mut(p).fill(123.0);
        assert_eq!(before.to_bits(), m.predict(&x).to_bits());
    }

    #[test]
    fn parameter_accounting_matches_instantiated_model() {
        let m = random_model(3, 2);
        let count = parameter_count(&m.config, &m.schema);
        assert_eq!(count.total, m.params.num_parameters());
    }

    #[test]
    fn parameter_accounting_small_continuous() {
        let schema = FeatureSchema::new(vec![FeatureSpec::continuous("a"), FeatureSpec::continuous("b")], "v", "n").unwrap();
        let cfg = PinConfig {
            embedding_dim: 1,
            embedding_hidden: 1,
            token_dim: 1,
            hidden1: 1,
            hidden2: 1,
        };
        let c = parameter_count(&cfg, &schema);
        assert_eq!(c.categorical_embeddings, 0);
        assert_eq!(
            (c.continuous_embeddings, c.interaction_tokens, c.first_layer, c.second_layer, c.output_layer, c.output_weights),
            (8, 3, 4, 2, 2, 4)
        );
        assert_eq!(c.total, 23);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = random_model(3, 21);
        let data = random_dataset(&m, 24, 4);
        let rows: Vec<usize> = (0..data.len()).collect();
        for w in m.params.output_weights.iter_mut() {
            *w *= 4.0;
        }
        let (_, grads) = pin_backward(&m, &data, &rows);
        let base = m.clone();
        let fd = finite_difference_gradient(
            |p: &PinParams| {
                let mut mm = base.clone();
                mm.params = p.clone();
                pin_backward(&mm, &data, &rows).0
            },
            &m.params,
            1e-5,
        );
        let (a, n) = (grads.to_flat(), fd.to_flat());
        let bad = a
            .iter()
            .zip(&n)
            .filter(|(a, n)| (*a - *n).abs() > 1e-4 * a.abs().max(n.abs()).max(1e-6))
            .count();
        assert!(bad <= a.len() / 100, "{bad} of {} coordinates disagree", a.len());
    }

    #[test]
    fn saturated_unit_blocks_gradient() {
        let mut m = additive_example_model(2);
        // Only the off-diagonal pair, saturated for x = (1, 1).
        let mut mask = vec![false; 3];
        mask[1] = true;
        m.set_active(mask).unwrap();
        m.params.output_weights[1] = 0.5;
        let data = Dataset::new(2, vec![1.0, 1.0], vec![1.0], vec![1.0]).unwrap();
        let (_, g) = pin_backward(&m, &data, &[0]);
        assert!(g.tokens.as_slice().iter().all(|v| *v == 0.0));
        assert!(g.net.to_flat().iter().all(|v| *v == 0.0));
        assert!(g.output_weights[1] != 0.0);
    }

    #[test]
    fn perfect_fit_zero_bias_gradient() {
        let m = random_model(3, 4);
        let mut data = random_dataset(&m, 10, 9);
        // Replace counts by exact expectations: Y_i = f(x_i).
        let rows: Vec<Vec<f64>> = data.rows().map(|r| r.to_vec()).collect();
        let mut perfect = Dataset::empty(3);
        for (i, r) in rows.iter().enumerate() {
            let v = data.exposure()[i];
            perfect.push(r, m.predict(r) * v, v).unwrap();
        }
        data = perfect;
        let idx: Vec<usize> = (0..data.len()).collect();
        let (loss, g) = pin_backward(&m, &data, &idx);
        assert!(loss.abs() < 1e-14);
        assert!(g.bias.abs() < 1e-14);
    }

    #[test]
    fn permutation_examples() {
        let m = random_model(3, 17);
        assert_eq!(permute_features(&m, &[0, 1, 2]).unwrap(), m);
        let once = permute_features(&m, &[1, 0, 2]).unwrap();
        assert_eq!(permute_features(&once, &[1, 0, 2]).unwrap(), m);
        assert!(permute_features(&m, &[0, 0, 1]).is_err());
        assert!(permute_features(&m, &[0, 1]).is_err());
        let perm = [2, 0, 1];
        let pm = permute_features(&m, &perm).unwrap();
        for x in [[0.3, -0.8, 1.0], [0.9, 0.1, 3.0]] {
            let px: Vec<f64> = perm.iter().map(|&o| x[o]).collect();
            assert!((pm.predict(&px) - m.predict(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_examples() {
        let mut m = additive_example_model(2);
        let mut mask = vec![false; 3];
        mask[1] = true;
        m.set_active(mask).unwrap();
        m.params.output_weights[1] = 1.0;
        let bg = Dataset::new(2, vec![0.0, 0.0, 0.5, -0.5], vec![0.0; 2], vec![1.0; 2]).unwrap();
        let grid = predict_grid(&m, 0, 1, 9, &bg).unwrap();
        assert_eq!(grid.len(), 81);
        for c in &grid {
            let h = c.mean_prediction.ln();
            if c.a + c.b <= -1.0 {
                assert!(h.abs() < 1e-15, "{c:?}");
            } else if c.a + c.b >= 1.0 {
                assert!((h - 1.0).abs() < 1e-15, "{c:?}");
            } else {
                assert!((h - 0.5 * (1.0 + c.a + c.b)).abs() < 1e-12);
            }
        }
        assert!(predict_grid(&m, 0, 0, 4, &bg).is_err());
        assert!(predict_grid(&m, 0, 1, 4, &Dataset::empty(2)).is_err());

        let mut constant = random_model(3, 1);
        constant.params.output_weights.fill(0.0);
        let bg = random_dataset(&constant, 5, 2);
        let g = predict_grid(&constant, 0, 2, 3, &bg).unwrap();
        assert_eq!(g.len(), 3 * 3);
        assert!(g.iter().all(|c| (c.mean_prediction - constant.params.bias.exp()).abs() < 1e-15));
    }
}
