//! Exact Shapley explanations on the link scale.
//!
//! The value of a coalition `C` is the empirical interventional expectation
//! `ν(C) = mean_{X ∈ B} η(x_C, X_{Q∖C})`. Because every unit depends on at
//! most two features, `ν` decomposes into four per-pair quantities
//! ([`PairMaskTable`]) and any coalition costs one `O(q²)` lookup-sum. The
//! same pairwise structure makes the paired-permutation walk exact.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{PinError, Result};
use crate::model::{Engine, PinModel};
use crate::seeded_rng;

/// Largest player count accepted by [`exact_subsets`].
pub const MAX_SUBSET_PLAYERS: usize = 12;
/// Largest player count accepted by [`permutation_full`].
pub const MAX_PERMUTATION_PLAYERS: usize = 8;
/// Largest player count a [`Coalition`] can represent.
pub const MAX_PLAYERS: usize = 62;

/// A subset of the players `0..q`, stored as a bitmask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coalition(pub u64);

impl Coalition {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn full(q: usize) -> Self {
        debug_assert!(q <= MAX_PLAYERS);
        Self((1u64 << q) - 1)
    }

    pub fn from_players(players: impl IntoIterator<Item = usize>) -> Self {
        players.into_iter().fold(Self::empty(), |c, j| c.with(j))
    }

    #[inline]
    pub fn contains(self, j: usize) -> bool {
        self.0 >> j & 1 == 1
    }

    #[inline]
    pub fn with(self, j: usize) -> Self {
        Self(self.0 | 1 << j)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

/// A cooperative game on `num_players()` players.
pub trait ValueFunction {
    fn num_players(&self) -> usize;
    fn value(&self, coalition: Coalition) -> f64;
}

fn all_values(game: &impl ValueFunction) -> Vec<f64> {
    (0..1u64 << game.num_players()).map(|m| game.value(Coalition(m))).collect()
}

fn check_players(q: usize, limit: usize, method: &str) -> Result<()> {
    if q == 0 {
        return Err(PinError::Contract("a game needs at least one player".into()));
    }
    if q > limit {
        return Err(PinError::Refused(format!(
            "{method} is limited to {limit} features (got {q}); use the paired-permutation method"
        )));
    }
    Ok(())
}

/// Shapley values from the weighted-subset formula
/// `ψ_j = Σ_{C ⊆ Q∖{j}} |C|!(q−|C|−1)!/q! · (ν(C ∪ {j}) − ν(C))`.
pub fn exact_subsets(game: &impl ValueFunction) -> Result<Vec<f64>> {
    let q = game.num_players();
    check_players(q, MAX_SUBSET_PLAYERS, "the subset formula")?;
    let values = all_values(game);
    let mut factorial = vec![1.0f64; q + 1];
    for i in 1..=q {
        factorial[i] = factorial[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..q)
        .map(|s| factorial[s] * factorial[q - s - 1] / factorial[q])
        .collect();
    let mut psi = vec![0.0; q];
    for (j, out) in psi.iter_mut().enumerate() {
        let bit = 1u64 << j;
        for m in 0..1u64 << q {
            if m & bit == 0 {
                let c = Coalition(m);
                *out += weight[c.len()] * (values[(m | bit) as usize] - values[m as usize]);
            }
        }
    }
    Ok(psi)
}

/// Shapley values as the average marginal contribution over all `q!`
/// orderings.
pub fn permutation_full(game: &impl ValueFunction) -> Result<Vec<f64>> {
    let q = game.num_players();
    check_players(q, MAX_PERMUTATION_PLAYERS, "full permutation enumeration")?;
    let values = all_values(game);
    let mut psi = vec![0.0; q];
    let mut count = 0usize;
    let mut add = |order: &[usize]| {
        let mut m = 0u64;
        for &j in order {
            let next = m | 1 << j;
            psi[j] += values[next as usize] - values[m as usize];
            m = next;
        }
        count += 1;
    };
    // Heap's algorithm.
    let mut order: Vec<usize> = (0..q).collect();
    let mut c = vec![0usize; q];
    add(&order);
    let mut i = 1;
    while i < q {
        if c[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(c[i], i);
            }
            add(&order);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    let n = count as f64;
    Ok(psi.into_iter().map(|v| v / n).collect())
}

/// Result of a paired-permutation walk with its cost accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedShapley {
    pub psi: Vec<f64>,
    pub nu_empty: f64,
    pub nu_full: f64,
    /// Value-function requests issued by the two walks: `2(q + 1)`.
    pub requests: usize,
    /// Distinct coalitions actually evaluated after memoization.
    pub evaluations: usize,
}

/// `ψ_j = ½[ν(C_{π,j} ∪ {j}) − ν(C_{π,j}) + ν(C_{ρ,j} ∪ {j}) − ν(C_{ρ,j})]`
/// where `C_{π,j}` are the players preceding `j` in `π` and `ρ` is `π`
/// reversed. Exact for games whose interactions are at most pairwise.
pub fn paired_permutation(game: &impl ValueFunction, permutation: &[usize]) -> Result<PairedShapley> {
    let q = game.num_players();
    check_players(q, MAX_PLAYERS, "the paired-permutation walk")?;
    check_permutation(permutation, q)?;
    let mut memo: HashMap<Coalition, f64> = HashMap::with_capacity(2 * q);
    let mut requests = 0;
    let mut psi = vec![0.0; q];
    let mut value = |c: Coalition| {
        requests += 1;
        *memo.entry(c).or_insert_with(|| game.value(c))
    };
    let reversed: Vec<usize> = permutation.iter().rev().copied().collect();
    let mut nu_empty = 0.0;
    let mut nu_full = 0.0;
    for walk in [permutation, &reversed] {
        let mut c = Coalition::empty();
        let mut prev = value(c);
        nu_empty = prev;
        for &j in walk {
            c = c.with(j);
            let v = value(c);
            psi[j] += 0.5 * (v - prev);
            prev = v;
        }
        nu_full = prev;
    }
    Ok(PairedShapley {
        psi,
        nu_empty,
        nu_full,
        requests,
        evaluations: memo.len(),
    })
}

fn check_permutation(permutation: &[usize], q: usize) -> Result<()> {
    let mut seen = vec![false; q];
    if permutation.len() != q {
        return Err(PinError::Contract(format!("permutation of length {} for {q} players", permutation.len())));
    }
    for &j in permutation {
        if j >= q || seen[j] {
            return Err(PinError::Contract(format!("{permutation:?} is not a permutation of 0..{q}")));
        }
        seen[j] = true;
    }
    Ok(())
}

/// Sorted indices of `k` rows drawn uniformly without replacement
/// (all rows when `k ≥ n`).
pub fn sample_rows(n: usize, k: usize, seed: u64, stream: u64) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut rng = seeded_rng(seed, stream);
    let mut idx = index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Background rows used to resample masked features.
#[derive(Clone, Debug)]
pub struct BackgroundSet {
    data: Dataset,
}

impl BackgroundSet {
    pub fn new(data: Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(PinError::Contract("background set must not be empty".into()));
        }
        Ok(Self { data })
    }

    /// Uniform sample of `size` rows without replacement.
    pub fn sample(data: &Dataset, size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(PinError::Contract("background size must be positive".into()));
        }
        Self::new(data.subset(&sample_rows(data.len(), size, seed, crate::STREAM_SAMPLE)))
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Per-pair masked unit means for one explained instance. Entries are
/// indexed by active pair and stored for the canonical order `j ≤ k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMaskTable {
    pub pairs: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub num_features: usize,
    /// `h(x_j, x_k)`
    pub both_present: Vec<f64>,
    /// `mean_B h(x_j, X_k)`; equals `both_present` on the diagonal.
    pub first_present: Vec<f64>,
    /// `mean_B h(X_j, x_k)`; equals `both_present` on the diagonal.
    pub second_present: Vec<f64>,
    /// `mean_B h(X_j, X_k)` with both values taken from the same row.
    pub none_present: Vec<f64>,
}

impl ValueFunction for PairMaskTable {
    fn num_players(&self) -> usize {
        self.num_features
    }

    fn value(&self, c: Coalition) -> f64 {
        let mut s = 0.0;
        for (i, &(j, k)) in self.pairs.iter().enumerate() {
            let h = match (c.contains(j), c.contains(k)) {
                (true, true) => self.both_present[i],
                (true, false) => self.first_present[i],
                (false, true) => self.second_present[i],
                (false, false) => self.none_present[i],
            };
            s += self.weights[i] * h;
        }
        self.bias + s
    }
}

/// Per-instance Shapley decomposition on the link scale.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapReport {
    pub instance: usize,
    pub psi: Vec<f64>,
    pub nu_empty: f64,
    pub nu_full: f64,
}

impl ShapReport {
    /// `ν(∅) + Σψ − ν(Q)`.
    pub fn efficiency_gap(&self) -> f64 {
        self.nu_empty + self.psi.iter().sum::<f64>() - self.nu_full
    }

    /// Writes `feature,psi` rows after a comment line with `ν(∅)` and `ν(Q)`.
    pub fn write_csv<W: Write>(&self, mut writer: W, names: &[String]) -> Result<()> {
        writeln!(
            writer,
            "# instance={} nu_empty={:.17e} nu_full={:.17e}",
            self.instance, self.nu_empty, self.nu_full
        )?;
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["feature", "psi"])?;
        for (name, psi) in names.iter().zip(&self.psi) {
            wtr.write_record([name.clone(), format!("{psi:.17e}")])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// One bar of a waterfall chart.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WaterfallStep {
    pub feature: usize,
    pub psi: f64,
    /// `ν(∅)` plus every contribution up to and including this one.
    pub cumulative: f64,
}

/// Contributions ordered by `|ψ|` descending (ties by feature index) with
/// running totals starting at `ν(∅)`.
pub fn export_waterfall(report: &ShapReport) -> Vec<WaterfallStep> {
    let mut order: Vec<usize> = (0..report.psi.len()).collect();
    order.sort_by(|&a, &b| report.psi[b].abs().total_cmp(&report.psi[a].abs()).then(a.cmp(&b)));
    let mut cumulative = report.nu_empty;
    order
        .into_iter()
        .map(|j| {
            cumulative += report.psi[j];
            WaterfallStep {
                feature: j,
                psi: report.psi[j],
                cumulative,
            }
        })
        .collect()
}

pub fn write_waterfall_csv<W: Write>(writer: W, steps: &[WaterfallStep], names: &[String]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["feature", "psi", "cumulative"])?;
    for s in steps {
        wtr.write_record([
            names[s.feature].clone(),
            format!("{:.17e}", s.psi),
            format!("{:.17e}", s.cumulative),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Explains single instances of one model against one background set.
///
/// First-layer feature parts of every background row and the both-masked
/// pair means are computed once; each instance then costs `2|B|` unit
/// evaluations per off-diagonal active pair.
pub struct Explainer<'m> {
    model: &'m PinModel,
    engine: Engine<'m>,
    background: &'m BackgroundSet,
    /// `|B| × q × d1`
    bg_a: Vec<f64>,
    bg_b: Vec<f64>,
    none_present: Vec<f64>,
}

impl<'m> Explainer<'m> {
    pub fn new(model: &'m PinModel, background: &'m BackgroundSet) -> Result<Self> {
        let q = model.num_features();
        if background.data().num_features() != q {
            return Err(PinError::Contract("background rows do not match the model".into()));
        }
        if q > MAX_PLAYERS {
            return Err(PinError::Refused(format!("at most {MAX_PLAYERS} features are supported")));
        }
        for row in background.data().rows() {
            model.check_input(row)?;
        }
        let engine = Engine::new(model);
        let (d, d1, d2) = engine.dims();
        let n = background.len();
        let mut bg_a = vec![0.0; n * q * d1];
        let mut bg_b = vec![0.0; n * q * d1];
        let mut phi = vec![0.0; d];
        for (i, row) in background.data().rows().enumerate() {
            for j in 0..q {
                let o = (i * q + j) * d1;
                engine.feature_parts(j, row[j], &mut phi, &mut bg_a[o..o + d1], &mut bg_b[o..o + d1]);
            }
        }
        let (mut z1, mut r1, mut r2) = (vec![0.0; d1], vec![0.0; d1], vec![0.0; d2]);
        let none_present = engine
            .active
            .iter()
            .map(|&p| {
                let pair = engine.pairs[p];
                let mut total = 0.0;
                for i in 0..n {
                    let a = &bg_a[(i * q + pair.first) * d1..][..d1];
                    let b = &bg_b[(i * q + pair.second) * d1..][..d1];
                    total += engine.unit_from_parts(p, a, b, &mut z1, &mut r1, &mut r2);
                }
                total / n as f64
            })
            .collect();
        Ok(Self {
            model,
            engine,
            background,
            bg_a,
            bg_b,
            none_present,
        })
    }

    pub fn model(&self) -> &PinModel {
        self.model
    }

    pub fn background(&self) -> &BackgroundSet {
        self.background
    }

    /// The four masking cases of every active pair for instance `x`.
    pub fn pair_masks(&self, x: &[f64]) -> Result<PairMaskTable> {
        self.model.check_input(x)?;
        let e = &self.engine;
        let q = self.model.num_features();
        let (d, d1, d2) = e.dims();
        let n = self.background.len();
        let mut xa = vec![0.0; q * d1];
        let mut xb = vec![0.0; q * d1];
        let mut phi = vec![0.0; d];
        for j in 0..q {
            e.feature_parts(j, x[j], &mut phi, &mut xa[j * d1..(j + 1) * d1], &mut xb[j * d1..(j + 1) * d1]);
        }
        let (mut z1, mut r1, mut r2) = (vec![0.0; d1], vec![0.0; d1], vec![0.0; d2]);
        let m = e.active.len();
        let mut table = PairMaskTable {
            pairs: Vec::with_capacity(m),
            weights: Vec::with_capacity(m),
            bias: self.model.params.bias,
            num_features: q,
            both_present: Vec::with_capacity(m),
            first_present: Vec::with_capacity(m),
            second_present: Vec::with_capacity(m),
            none_present: self.none_present.clone(),
        };
        for &p in &e.active {
            let pair = e.pairs[p];
            let (f, s) = (pair.first, pair.second);
            let a_x = &xa[f * d1..(f + 1) * d1];
            let b_x = &xb[s * d1..(s + 1) * d1];
            let both = e.unit_from_parts(p, a_x, b_x, &mut z1, &mut r1, &mut r2);
            let (mut first_slot, mut second_slot) = (both, both);
            if !pair.is_diagonal() {
                let (mut t1, mut t2) = (0.0, 0.0);
                for i in 0..n {
                    let bg_b = &self.bg_b[(i * q + s) * d1..][..d1];
                    t1 += e.unit_from_parts(p, a_x, bg_b, &mut z1, &mut r1, &mut r2);
                    let bg_a = &self.bg_a[(i * q + f) * d1..][..d1];
                    t2 += e.unit_from_parts(p, bg_a, b_x, &mut z1, &mut r1, &mut r2);
                }
                first_slot = t1 / n as f64;
                second_slot = t2 / n as f64;
            }
            let (j, k) = pair.canonical();
            let (jp, kp) = if f == j {
                (first_slot, second_slot)
            } else {
                (second_slot, first_slot)
            };
            table.pairs.push((j, k));
            table.weights.push(self.model.params.output_weights[p]);
            table.both_present.push(both);
            table.first_present.push(jp);
            table.second_present.push(kp);
        }
        Ok(table)
    }

    /// `ν(C)` for instance `x`.
    pub fn value(&self, x: &[f64], coalition: Coalition) -> Result<f64> {
        Ok(self.pair_masks(x)?.value(coalition))
    }

    pub fn exact_subsets(&self, x: &[f64], instance: usize) -> Result<ShapReport> {
        check_players(self.model.num_features(), MAX_SUBSET_PLAYERS, "the subset formula")?;
        let table = self.pair_masks(x)?;
        let psi = exact_subsets(&table)?;
        Ok(report(&table, instance, psi))
    }

    pub fn permutation_full(&self, x: &[f64], instance: usize) -> Result<ShapReport> {
        check_players(self.model.num_features(), MAX_PERMUTATION_PLAYERS, "full permutation enumeration")?;
        let table = self.pair_masks(x)?;
        let psi = permutation_full(&table)?;
        Ok(report(&table, instance, psi))
    }

    pub fn paired_permutation(&self, x: &[f64], instance: usize, permutation: &[usize]) -> Result<ShapReport> {
        check_permutation(permutation, self.model.num_features())?;
        let table = self.pair_masks(x)?;
        let out = paired_permutation(&table, permutation)?;
        Ok(ShapReport {
            instance,
            psi: out.psi,
            nu_empty: out.nu_empty,
            nu_full: out.nu_full,
        })
    }

    /// Paired-permutation explanation with the identity ordering.
    pub fn explain(&self, x: &[f64], instance: usize) -> Result<ShapReport> {
        let identity: Vec<usize> = (0..self.model.num_features()).collect();
        self.paired_permutation(x, instance, &identity)
    }
}

fn report(table: &PairMaskTable, instance: usize, psi: Vec<f64>) -> ShapReport {
    ShapReport {
        instance,
        psi,
        nu_empty: table.value(Coalition::empty()),
        nu_full: table.value(Coalition::full(table.num_features)),
    }
}

pub fn shapley_exact_subsets(x: &[f64], model: &PinModel, background: &BackgroundSet) -> Result<ShapReport> {
    check_players(model.num_features(), MAX_SUBSET_PLAYERS, "the subset formula")?;
    Explainer::new(model, background)?.exact_subsets(x, 0)
}

pub fn shapley_permutation_full(x: &[f64], model: &PinModel, background: &BackgroundSet) -> Result<ShapReport> {
    check_players(model.num_features(), MAX_PERMUTATION_PLAYERS, "full permutation enumeration")?;
    Explainer::new(model, background)?.permutation_full(x, 0)
}

pub fn shapley_paired_permutation(
    x: &[f64],
    model: &PinModel,
    background: &BackgroundSet,
    permutation: &[usize],
) -> Result<ShapReport> {
    Explainer::new(model, background)?.paired_permutation(x, 0, permutation)
}

/// Mean `|ψ_j|` over `reports`.
pub fn mean_abs_psi(reports: &[ShapReport]) -> Result<Vec<f64>> {
    let first = reports
        .first()
        .ok_or_else(|| PinError::Contract("SHAP importance needs at least one instance".into()))?;
    let mut out = vec![0.0; first.psi.len()];
    for r in reports {
        for (o, p) in out.iter_mut().zip(&r.psi) {
            *o += p.abs();
        }
    }
    let n = reports.len() as f64;
    Ok(out.into_iter().map(|v| v / n).collect())
}

/// SHAP variable importance `ψ̄_j = mean_i |ψ_j(x_i)|` over the rows of
/// `instances`, via paired permutation.
pub fn shap_importance(instances: &Dataset, model: &PinModel, background: &BackgroundSet) -> Result<Vec<f64>> {
    let explainer = Explainer::new(model, background)?;
    let reports = instances
        .rows()
        .enumerate()
        .map(|(i, x)| explainer.explain(x, i))
        .collect::<Result<Vec<_>>>()?;
    mean_abs_psi(&reports)
}

pub fn write_importance_csv<W: Write>(writer: W, names: &[String], importance: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["feature", "mean_abs_psi"])?;
    for (n, v) in names.iter().zip(importance) {
        wtr.write_record([n.clone(), format!("{v:.17e}")])?;
    }
    wtr.flush()?;
    Ok(())
}
