//! Interaction importance and forward selection.
//!
//! An additive baseline (a PIN restricted to its diagonal units) is fitted
//! and frozen. Every off-diagonal candidate pair `(j, k)` then gets its own
//! output component `exp(η_base + b_{j,k} + w_{j,k} h_{j,k}(x))`, all trained
//! jointly on the summed component deviances with shared embeddings and
//! `f_θ`. The held-out deviance decrease of each component over the
//! baseline ranks the pairs.

use std::io::Write;

use serde::Serialize;

use crate::data::{split_indices, Dataset};
use crate::error::{PinError, Result};
use crate::loss::{poisson_deviance, unit_deviance};
use crate::model::{Engine, Pair, PinModel, PinParams};
use crate::numeric::ParameterSet;
use crate::training::{fit_loop, train, Trainable, TrainConfig, TrainHistory};

/// The frozen part of the link: a diagonal-only PIN plus previously
/// selected interaction terms.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBaseline {
    pub diagonal: PinModel,
    /// One single-pair model per selected term; its bias holds `b_{j,k}`.
    pub terms: Vec<PinModel>,
}

impl FrozenBaseline {
    pub fn new(diagonal: PinModel) -> Self {
        Self {
            diagonal,
            terms: Vec::new(),
        }
    }

    pub fn link(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .fold(self.diagonal.predict_link(x), |acc, t| acc + t.predict_link(x))
    }

    pub fn offsets(&self, data: &Dataset) -> Vec<f64> {
        let mut out = self.diagonal.predict_link_dataset(data);
        for t in &self.terms {
            for (o, l) in out.iter_mut().zip(t.predict_link_dataset(data)) {
                *o += l;
            }
        }
        out
    }

    /// Canonical pairs already frozen into the baseline.
    pub fn selected_pairs(&self) -> Vec<(usize, usize)> {
        self.terms
            .iter()
            .flat_map(|t| t.active_pairs().into_iter().map(|p| t.pairs[p].canonical()))
            .collect()
    }

    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        let preds: Vec<f64> = self.offsets(data).into_iter().map(f64::exp).collect();
        poisson_deviance(&preds, data.response(), data.exposure())
    }
}

/// Fits a PIN whose only trainable output weights are the diagonal ones.
pub fn fit_diagonal_baseline(
    data: &Dataset,
    template: &PinModel,
    config: &TrainConfig,
    seed: u64,
) -> Result<(PinModel, TrainHistory)> {
    let skeleton = PinModel::new(template.schema.clone(), template.scalers.clone(), template.config, seed)?;
    train(data, skeleton.diagonal_only(), config, seed)
}

/// Trainable part of the multi-output model.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiOutputParams {
    /// Shared embeddings, tokens and `f_θ`; `output_weights[p]` is `w_{j,k}`.
    /// The bias is unused.
    pub shared: PinParams,
    /// `b_{j,k}` per pair (zero outside the candidates).
    pub offsets: Vec<f64>,
}

impl ParameterSet for MultiOutputParams {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut out = self.shared.blocks();
        out.push(&self.offsets);
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.shared.blocks_mut();
        out.push(&mut self.offsets);
        out
    }
}

/// Rows with their frozen baseline link values.
#[derive(Clone, Debug)]
pub struct OffsetData {
    pub data: Dataset,
    pub base: Vec<f64>,
}

impl OffsetData {
    pub fn new(data: Dataset, baseline: &FrozenBaseline) -> Self {
        let base = baseline.offsets(&data);
        Self { data, base }
    }
}

/// One output component per candidate pair over shared parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiOutputPin {
    pub params: MultiOutputParams,
    pub pairs: Vec<Pair>,
    /// Pair indices that own a component, in pair order.
    pub candidates: Vec<usize>,
    template: PinModel,
}

impl MultiOutputPin {
    /// Fresh components for every off-diagonal pair not yet in `baseline`:
    /// `w = 0`, `b = 0`, so every component starts at the baseline.
    pub fn new(baseline: &FrozenBaseline, seed: u64) -> Result<Self> {
        let d = &baseline.diagonal;
        let template = PinModel::new(d.schema.clone(), d.scalers.clone(), d.config, seed)?;
        let selected = baseline.selected_pairs();
        let candidates: Vec<usize> = (0..template.num_pairs())
            .filter(|&p| {
                let pair = template.pairs[p];
                !pair.is_diagonal() && !selected.contains(&pair.canonical())
            })
            .collect();
        if candidates.is_empty() {
            return Err(PinError::Contract("no candidate interactions remain".into()));
        }
        let p = template.num_pairs();
        Ok(Self {
            params: MultiOutputParams {
                shared: template.params.clone(),
                offsets: vec![0.0; p],
            },
            pairs: template.pairs.clone(),
            candidates,
            template,
        })
    }

    /// Components for the pairs still outside `baseline`, keeping this
    /// model's embeddings, tokens and `f_θ` but resetting every `w` and `b`
    /// to zero.
    pub fn restart(&self, baseline: &FrozenBaseline) -> Result<Self> {
        let selected = baseline.selected_pairs();
        let candidates: Vec<usize> = self
            .candidates
            .iter()
            .copied()
            .filter(|&p| !selected.contains(&self.pairs[p].canonical()))
            .collect();
        if candidates.is_empty() {
            return Err(PinError::Contract("no candidate interactions remain".into()));
        }
        let mut out = self.clone();
        out.params.shared.output_weights.fill(0.0);
        out.params.offsets.fill(0.0);
        out.candidates = candidates;
        Ok(out)
    }

    fn engine(&self) -> Engine<'_> {
        Engine::with_active(&self.params.shared, &self.pairs, self.candidates.clone())
    }

    /// Link values of every component for every row: `out[c][i]`.
    pub fn component_links(&self, data: &OffsetData) -> Vec<Vec<f64>> {
        let engine = self.engine();
        let mut st = engine.row_state();
        let mut out = vec![Vec::with_capacity(data.data.len()); self.candidates.len()];
        for (i, x) in data.data.rows().enumerate() {
            engine.forward_row(x, &mut st);
            for (c, &p) in self.candidates.iter().enumerate() {
                out[c].push(data.base[i] + self.params.offsets[p] + self.params.shared.output_weights[p] * st.h[c]);
            }
        }
        out
    }

    /// Component `(j, k)` as a stand-alone single-pair model with bias
    /// `b_{j,k}`, so that its link is `b_{j,k} + w_{j,k} h_{j,k}(x)`.
    pub fn term_model(&self, pair: (usize, usize)) -> Result<PinModel> {
        let p = self.template.pair_position(pair.0, pair.1);
        if !self.candidates.contains(&p) {
            return Err(PinError::Contract(format!("pair {pair:?} is not a candidate")));
        }
        let mut m = self.template.clone();
        m.params = self.params.shared.clone();
        m.params.bias = self.params.offsets[p];
        m.set_active((0..m.num_pairs()).map(|i| i == p).collect())?;
        Ok(m)
    }
}

impl Trainable for MultiOutputPin {
    type Params = MultiOutputParams;
    type Data = OffsetData;

    fn params(&self) -> &MultiOutputParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut MultiOutputParams {
        &mut self.params
    }

    fn zero_grads(&self) -> MultiOutputParams {
        MultiOutputParams {
            shared: self.params.shared.zeros_like(),
            offsets: vec![0.0; self.params.offsets.len()],
        }
    }

    fn num_rows(data: &OffsetData) -> usize {
        data.data.len()
    }

    /// Sum over components of their mean deviance on `rows`.
    fn batch_gradient(&self, data: &OffsetData, rows: &[usize], grads: &mut MultiOutputParams) -> f64 {
        for b in grads.blocks_mut() {
            b.fill(0.0);
        }
        let engine = self.engine();
        let mut st = engine.row_state();
        let mut sc = engine.scratch();
        let mut dh = vec![0.0; self.candidates.len()];
        let n = rows.len() as f64;
        let w = &self.params.shared.output_weights;
        let mut loss = 0.0;
        for &i in rows {
            let x = data.data.row(i);
            engine.forward_row(x, &mut st);
            let (y, v) = (data.data.response()[i], data.data.exposure()[i]);
            for (c, &p) in self.candidates.iter().enumerate() {
                let f = (data.base[i] + self.params.offsets[p] + w[p] * st.h[c]).exp();
                loss += unit_deviance(f, y, v);
                let g = 2.0 * v * (f - y) / n;
                grads.offsets[p] += g;
                grads.shared.output_weights[p] += g * st.h[c];
                dh[c] = g * w[p];
            }
            engine.backward_row(x, &st, &dh, &mut grads.shared, &mut sc);
        }
        engine.finish(&mut grads.shared, &mut sc);
        loss / n
    }

    fn loss(&self, data: &OffsetData) -> f64 {
        self.component_losses(data).map_or(f64::NAN, |l| l.iter().sum())
    }
}

impl MultiOutputPin {
    /// Held-out deviance of each component, in candidate order.
    pub fn component_losses(&self, data: &OffsetData) -> Result<Vec<f64>> {
        self.component_links(data)
            .into_iter()
            .map(|links| {
                let preds: Vec<f64> = links.into_iter().map(f64::exp).collect();
                poisson_deviance(&preds, data.data.response(), data.data.exposure())
            })
            .collect()
    }
}

/// Trains all candidate components in one run against the frozen
/// `baseline`, early-stopping on the summed validation loss.
pub fn fit_multioutput(
    baseline: &FrozenBaseline,
    data: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<(MultiOutputPin, TrainHistory)> {
    fit_multioutput_from(MultiOutputPin::new(baseline, seed)?, baseline, data, config, seed)
}

/// Like [`fit_multioutput`] but starting from `model` (for instance a
/// [`MultiOutputPin::restart`] of the previous round).
pub fn fit_multioutput_from(
    model: MultiOutputPin,
    baseline: &FrozenBaseline,
    data: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<(MultiOutputPin, TrainHistory)> {
    config.validate()?;
    if data.is_empty() {
        return Err(PinError::Contract("cannot train on an empty dataset".into()));
    }
    let (train_idx, val_idx) = split_indices(data.len(), config.validation_fraction, seed)?;
    let train_set = OffsetData::new(data.subset(&train_idx), baseline);
    let val_set = OffsetData::new(data.subset(&val_idx), baseline);
    fit_loop(model, &train_set, &val_set, config, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ImportanceRow {
    /// Canonical 0-based pair `j < k`.
    pub pair: (usize, usize),
    pub baseline_loss: f64,
    pub augmented_loss: f64,
    /// `baseline_loss − augmented_loss`
    pub delta: f64,
}

/// Candidate pairs ranked by held-out loss decrease.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceTable {
    /// 1-based selection round.
    pub round: usize,
    pub rows: Vec<ImportanceRow>,
}

impl ImportanceTable {
    pub fn top(&self) -> (usize, usize) {
        self.rows[0].pair
    }

    /// 1-based rank of `pair` (either order).
    pub fn rank_of(&self, pair: (usize, usize)) -> Option<usize> {
        let key = (pair.0.min(pair.1), pair.0.max(pair.1));
        self.rows.iter().position(|r| r.pair == key).map(|i| i + 1)
    }
}

/// Held-out deviance of every component against the baseline on `test`.
pub fn importance_scores(
    model: &MultiOutputPin,
    baseline: &FrozenBaseline,
    test: &Dataset,
    round: usize,
) -> Result<ImportanceTable> {
    if test.is_empty() {
        return Err(PinError::Contract("importance needs a non-empty test set".into()));
    }
    let data = OffsetData::new(test.clone(), baseline);
    let base_preds: Vec<f64> = data.base.iter().map(|b| b.exp()).collect();
    let baseline_loss = poisson_deviance(&base_preds, test.response(), test.exposure())?;
    let losses = model.component_losses(&data)?;
    let mut rows: Vec<ImportanceRow> = model
        .candidates
        .iter()
        .zip(losses)
        .map(|(&p, augmented_loss)| ImportanceRow {
            pair: model.pairs[p].canonical(),
            baseline_loss,
            augmented_loss,
            delta: baseline_loss - augmented_loss,
        })
        .collect();
    rows.sort_by(|a, b| b.delta.total_cmp(&a.delta).then(a.pair.cmp(&b.pair)));
    Ok(ImportanceTable { round, rows })
}

/// Outcome of multi-round forward selection.
#[derive(Clone, Debug)]
pub struct Selection {
    pub selected: Vec<(usize, usize)>,
    pub tables: Vec<ImportanceTable>,
    pub baseline: FrozenBaseline,
}

/// Seed of the multi-output run of `round` (1-based).
pub fn round_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_add(1_000_003 * round as u64)
}

/// Greedy selection: each round trains the remaining candidates against
/// the current baseline, picks the largest held-out decrease and freezes
/// that term into the baseline. Rounds after the first start from the
/// previous round's shared parameters with fresh zero components.
pub fn forward_select(
    learn: &Dataset,
    test: &Dataset,
    rounds: usize,
    template: &PinModel,
    config: &TrainConfig,
    seed: u64,
) -> Result<Selection> {
    let q = template.num_features();
    let max = q * (q - 1) / 2;
    if rounds == 0 || rounds > max {
        return Err(PinError::Contract(format!("rounds must lie in 1..={max}, got {rounds}")));
    }
    let (diagonal, _) = fit_diagonal_baseline(learn, template, config, seed)?;
    select_from(FrozenBaseline::new(diagonal), learn, test, rounds, config, seed)
}

/// Forward selection from an already fitted baseline.
pub fn select_from(
    mut baseline: FrozenBaseline,
    learn: &Dataset,
    test: &Dataset,
    rounds: usize,
    config: &TrainConfig,
    seed: u64,
) -> Result<Selection> {
    let mut selected = Vec::with_capacity(rounds);
    let mut tables = Vec::with_capacity(rounds);
    let mut previous: Option<MultiOutputPin> = None;
    for round in 1..=rounds {
        let start = match &previous {
            Some(m) => m.restart(&baseline)?,
            None => MultiOutputPin::new(&baseline, round_seed(seed, round))?,
        };
        let (multi, _) = fit_multioutput_from(start, &baseline, learn, config, round_seed(seed, round))?;
        let table = importance_scores(&multi, &baseline, test, round)?;
        let top = table.top();
        baseline.terms.push(multi.term_model(top)?);
        selected.push(top);
        tables.push(table);
        previous = Some(multi);
    }
    Ok(Selection {
        selected,
        tables,
        baseline,
    })
}

/// Writes `round,pair,baseline_loss,augmented_loss,delta`; losses are
/// multiplied by `units` (100 for 10⁻² units).
pub fn write_tables_csv<W: Write>(writer: W, tables: &[ImportanceTable], names: &[String], units: f64) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["round", "pair", "baseline_loss", "augmented_loss", "delta"])?;
    for t in tables {
        for r in &t.rows {
            wtr.write_record([
                t.round.to_string(),
                format!("{}:{}", names[r.pair.0], names[r.pair.1]),
                format!("{:.10}", r.baseline_loss * units),
                format!("{:.10}", r.augmented_loss * units),
                format!("{:.10}", r.delta * units),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
