//! Schema-driven CSV ingestion, min-max scaling and seeded splitting.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{PinError, Result};
use crate::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<String>,
}

impl FeatureSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Continuous,
            levels: Vec::new(),
        }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, levels: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            levels: levels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == FeatureKind::Categorical
    }
}

/// Column roles of a tabular frequency dataset.
///
/// Claim counts come from `count` when present (`Y = N / v`); otherwise the
/// `response` column holds the frequency directly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
    pub exposure: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<String>,
}

impl FeatureSchema {
    pub fn new(
        features: Vec<FeatureSpec>,
        exposure: impl Into<String>,
        count: impl Into<String>,
    ) -> Result<Self> {
        let schema = Self {
            features,
            exposure: exposure.into(),
            response: None,
            count: Some(count.into()),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() < 2 {
            return Err(PinError::Schema(format!(
                "need at least 2 features, got {}",
                self.features.len()
            )));
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return Err(PinError::Schema(format!("duplicate feature name {}", f.name)));
            }
            match f.kind {
                FeatureKind::Categorical => {
                    if f.levels.is_empty() {
                        return Err(PinError::Schema(format!("categorical {} has no levels", f.name)));
                    }
                    let distinct: HashSet<_> = f.levels.iter().collect();
                    if distinct.len() != f.levels.len() {
                        return Err(PinError::Schema(format!("categorical {} has duplicate levels", f.name)));
                    }
                }
                FeatureKind::Continuous => {
                    if !f.levels.is_empty() {
                        return Err(PinError::Schema(format!("continuous {} declares levels", f.name)));
                    }
                }
            }
        }
        if self.count.is_none() && self.response.is_none() {
            return Err(PinError::Schema("schema needs a count or a response column".into()));
        }
        Ok(())
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn num_continuous(&self) -> usize {
        self.features.iter().filter(|f| !f.is_categorical()).count()
    }
}

/// Feature rows with exposures and claim counts.
///
/// Features are stored row-major; categorical entries hold the 1-based level
/// index as a float.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    num_features: usize,
    features: Vec<f64>,
    counts: Vec<f64>,
    exposure: Vec<f64>,
    response: Vec<f64>,
}

impl Dataset {
    pub fn new(num_features: usize, features: Vec<f64>, counts: Vec<f64>, exposure: Vec<f64>) -> Result<Self> {
        let n = exposure.len();
        if counts.len() != n || features.len() != n * num_features {
            return Err(PinError::Contract("dataset columns have inconsistent lengths".into()));
        }
        if let Some(i) = exposure.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(PinError::Domain(format!("non-positive exposure in row {i}")));
        }
        if let Some(i) = counts.iter().position(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(PinError::Domain(format!("negative claim count in row {i}")));
        }
        let response = counts.iter().zip(&exposure).map(|(n, v)| n / v).collect();
        Ok(Self {
            num_features,
            features,
            counts,
            exposure,
            response,
        })
    }

    pub fn empty(num_features: usize) -> Self {
        Self {
            num_features,
            features: Vec::new(),
            counts: Vec::new(),
            exposure: Vec::new(),
            response: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.exposure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exposure.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.num_features.max(1)).take(self.len())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn exposure(&self) -> &[f64] {
        &self.exposure
    }

    /// Observed frequencies `Y = N / v`.
    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn push(&mut self, row: &[f64], count: f64, exposure: f64) -> Result<()> {
        if row.len() != self.num_features {
            return Err(PinError::Contract("row length differs from feature count".into()));
        }
        if !(exposure > 0.0 && exposure.is_finite()) {
            return Err(PinError::Domain("non-positive exposure".into()));
        }
        if !(count >= 0.0 && count.is_finite()) {
            return Err(PinError::Domain("negative claim count".into()));
        }
        self.features.extend_from_slice(row);
        self.counts.push(count);
        self.exposure.push(exposure);
        self.response.push(count / exposure);
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.num_features);
        for &i in indices {
            out.features.extend_from_slice(self.row(i));
            out.counts.push(self.counts[i]);
            out.exposure.push(self.exposure[i]);
            out.response.push(self.response[i]);
        }
        out
    }

    /// `log(Σ N / Σ v)`, the intercept-only maximum likelihood estimate.
    pub fn log_mean_frequency(&self) -> f64 {
        let n: f64 = self.counts.iter().sum();
        let v: f64 = self.exposure.iter().sum();
        (n / v).ln()
    }
}

/// Affine map of one continuous column onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: f64,
    pub max: f64,
}

impl MinMaxScaler {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        2.0 * (x - self.min) / (self.max - self.min) - 1.0
    }

    #[inline]
    pub fn invert(&self, z: f64) -> f64 {
        self.min + (z + 1.0) * 0.5 * (self.max - self.min)
    }
}

/// One optional scaler per feature (`None` for categoricals).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalerSet {
    pub scalers: Vec<Option<MinMaxScaler>>,
}

impl ScalerSet {
    /// Identity scaling for every feature (used for models built directly in
    /// the scaled space).
    pub fn identity(schema: &FeatureSchema) -> Self {
        Self {
            scalers: schema
                .features
                .iter()
                .map(|f| (!f.is_categorical()).then_some(MinMaxScaler { min: -1.0, max: 1.0 }))
                .collect(),
        }
    }

    pub fn fit(schema: &FeatureSchema, data: &Dataset) -> Result<Self> {
        let mut scalers = Vec::with_capacity(schema.num_features());
        for (j, f) in schema.features.iter().enumerate() {
            if f.is_categorical() {
                scalers.push(None);
                continue;
            }
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for r in data.rows() {
                lo = lo.min(r[j]);
                hi = hi.max(r[j]);
            }
            if lo >= hi {
                return Err(PinError::Domain(format!("constant column {} cannot be scaled", f.name)));
            }
            scalers.push(Some(MinMaxScaler { min: lo, max: hi }));
        }
        Ok(Self { scalers })
    }

    /// Scales continuous columns; values outside the fitted range extrapolate.
    pub fn apply(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        for i in 0..out.len() {
            self.apply_row(out.row_mut(i));
        }
        out
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for (x, s) in row.iter_mut().zip(&self.scalers) {
            if let Some(s) = s {
                *x = s.apply(*x);
            }
        }
    }
}

/// Fits min-max scalers on `data` and returns the scaled copy with them.
pub fn fit_apply_scalers(schema: &FeatureSchema, data: &Dataset) -> Result<(Dataset, ScalerSet)> {
    let scalers = ScalerSet::fit(schema, data)?;
    Ok((scalers.apply(data), scalers))
}

pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| PinError::Schema(format!("column {name} missing from header")))
    };
    let feature_cols: Vec<usize> = schema.features.iter().map(|f| column(&f.name)).collect::<Result<_>>()?;
    let exposure_col = column(&schema.exposure)?;
    let (target_col, target_is_count) = match (&schema.count, &schema.response) {
        (Some(c), _) => (column(c)?, true),
        (None, Some(r)) => (column(r)?, false),
        (None, None) => unreachable!("validated schema has a target"),
    };
    let level_maps: Vec<HashMap<&str, usize>> = schema
        .features
        .iter()
        .map(|f| f.levels.iter().enumerate().map(|(i, l)| (l.as_str(), i + 1)).collect())
        .collect();

    let q = schema.num_features();
    let mut data = Dataset::empty(q);
    let mut row = vec![0.0; q];
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let row_no = line + 1;
        let numeric = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| PinError::Ingestion {
                    row: row_no,
                    column: name.to_string(),
                    message: format!("non-numeric value {raw:?}"),
                })
        };
        for (j, f) in schema.features.iter().enumerate() {
            row[j] = match f.kind {
                FeatureKind::Continuous => numeric(feature_cols[j], &f.name)?,
                FeatureKind::Categorical => {
                    let raw = record.get(feature_cols[j]).unwrap_or("").trim();
                    *level_maps[j].get(raw).ok_or_else(|| PinError::Ingestion {
                        row: row_no,
                        column: f.name.clone(),
                        message: format!("unknown level {raw} in column {}", f.name),
                    })? as f64
                }
            };
        }
        let exposure = numeric(exposure_col, &schema.exposure)?;
        if exposure <= 0.0 {
            return Err(PinError::Ingestion {
                row: row_no,
                column: schema.exposure.clone(),
                message: "non-positive exposure".into(),
            });
        }
        let target_name = if target_is_count {
            schema.count.clone()
        } else {
            schema.response.clone()
        }
        .unwrap_or_default();
        let target = numeric(target_col, &target_name)?;
        if target < 0.0 {
            return Err(PinError::Ingestion {
                row: row_no,
                column: target_name,
                message: "negative target".into(),
            });
        }
        let count = if target_is_count { target } else { target * exposure };
        data.push(&row, count, exposure)?;
    }
    Ok(data)
}

/// Writes raw (unscaled) rows in the ingestion format: features, exposure,
/// then the count column (or response when the schema has no count).
pub fn write_csv<W: Write>(writer: W, schema: &FeatureSchema, data: &Dataset) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = schema.features.iter().map(|f| f.name.clone()).collect();
    header.push(schema.exposure.clone());
    let use_count = schema.count.is_some();
    header.push(schema.count.clone().or_else(|| schema.response.clone()).unwrap_or_default());
    wtr.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for (j, f) in schema.features.iter().enumerate() {
            let x = data.row(i)[j];
            rec.push(if f.is_categorical() {
                f.levels[x as usize - 1].clone()
            } else {
                format!("{x}")
            });
        }
        rec.push(format!("{}", data.exposure()[i]));
        rec.push(if use_count {
            format!("{}", data.counts()[i])
        } else {
            format!("{}", data.response()[i])
        });
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Seeded uniform partition into `(train, validation)`; validation gets
/// `round(n * fraction)` rows, kept within `[1, n - 1]`.
pub fn split(data: &Dataset, validation_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train_idx, val_idx) = split_indices(data.len(), validation_fraction, seed)?;
    Ok((data.subset(&train_idx), data.subset(&val_idx)))
}

pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(PinError::Contract(format!(
            "validation fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    if n < 2 {
        return Err(PinError::Contract("need at least two rows to split".into()));
    }
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, crate::STREAM_SPLIT));
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema() -> FeatureSchema {
        FeatureSchema::new(
            vec![FeatureSpec::continuous("age"), FeatureSpec::categorical("brand", ["A", "B"])],
            "v",
            "n",
        )
        .unwrap()
    }

    #[test]
    fn loads_valid_file() {
        let csv = "age,brand,v,n\n20,A,1.0,0\n30,B,0.5,1\n40,A,2,3\n";
        let d = read_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.row(1), &[30.0, 2.0]);
        assert_eq!(d.response()[1], 2.0);
        assert_eq!(d.response()[2], 1.5);
    }

    #[test]
    fn rejects_unknown_level() {
        let csv = "age,brand,v,n\n20,Z,1.0,0\n";
        let err = read_csv(csv.as_bytes(), &schema()).unwrap_err();
        assert!(err.to_string().contains("unknown level Z in column brand"), "{err}");
    }

    #[test]
    fn rejects_zero_exposure_and_garbage() {
        let err = read_csv("age,brand,v,n\n20,A,0,0\n".as_bytes(), &schema()).unwrap_err();
        assert!(err.to_string().contains("non-positive exposure"));
        let err = read_csv("age,brand,v,n\nold,A,1,0\n".as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, PinError::Ingestion { row: 1, .. }));
        assert!(read_csv("age,v,n\n1,1,0\n".as_bytes(), &schema()).is_err());
    }

    #[test]
    fn response_only_schema() {
        let mut s = schema();
        s.count = None;
        s.response = Some("freq".into());
        let d = read_csv("age,brand,v,freq\n20,A,0.5,2\n".as_bytes(), &s).unwrap();
        assert_eq!(d.counts()[0], 1.0);
        assert_eq!(d.response()[0], 2.0);
    }

    #[test]
    fn schema_validation() {
        let one = FeatureSchema::new(vec![FeatureSpec::continuous("a")], "v", "n");
        assert!(one.is_err());
        let dup = FeatureSchema::new(vec![FeatureSpec::continuous("a"), FeatureSpec::continuous("a")], "v", "n");
        assert!(dup.is_err());
        let lv = FeatureSchema::new(
            vec![FeatureSpec::continuous("a"), FeatureSpec::categorical("b", ["x", "x"])],
            "v",
            "n",
        );
        assert!(lv.is_err());
        let json = r#"{"features":[{"name":"a","kind":"continuous"},{"name":"b","kind":"categorical","levels":["x","y"]}],"exposure":"v","response":"y"}"#;
        let s = FeatureSchema::from_json_str(json).unwrap();
        assert_eq!(s.features[1].levels.len(), 2);
    }

    #[test]
    fn scaling_examples() {
        let s = schema();
        let d = Dataset::new(2, vec![0.0, 1.0, 5.0, 2.0, 10.0, 1.0], vec![0.0; 3], vec![1.0; 3]).unwrap();
        let (scaled, sc) = fit_apply_scalers(&s, &d).unwrap();
        assert_eq!(scaled.column(0), vec![-1.0, 0.0, 1.0]);
        assert_eq!(scaled.column(1), vec![1.0, 2.0, 1.0]);
        let mut r = [20.0, 1.0];
        sc.apply_row(&mut r);
        assert_eq!(r[0], 3.0);
        // Re-applying stored scalers reproduces the scaled data bit-exactly.
        assert_eq!(sc.apply(&d), scaled);
        let two = Dataset::new(2, vec![0.0, 1.0, 10.0, 1.0], vec![0.0; 2], vec![1.0; 2]).unwrap();
        assert_eq!(fit_apply_scalers(&s, &two).unwrap().0.column(0), vec![-1.0, 1.0]);
        let flat = Dataset::new(2, vec![4.0, 1.0, 4.0, 1.0], vec![0.0; 2], vec![1.0; 2]).unwrap();
        assert!(fit_apply_scalers(&s, &flat).is_err());
    }

    #[test]
    fn split_is_reproducible_and_disjoint() {
        let (t1, v1) = split_indices(100, 0.1, 7).unwrap();
        let (t2, v2) = split_indices(100, 0.1, 7).unwrap();
        assert_eq!((t1.len(), v1.len()), (90, 10));
        assert_eq!((&t1, &v1), (&t2, &v2));
        let mut all: Vec<usize> = t1.iter().chain(&v1).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (_, v3) = split_indices(100, 0.1, 8).unwrap();
        assert_eq!(v3.len(), 10);
        assert_ne!(v1, v3);
    }

    #[test]
    fn split_size_at_full_portfolio_scale() {
        let (t, v) = split_indices(610_206, 0.1, 1).unwrap();
        assert!(v.len().abs_diff(61_021) <= 1);
        assert_eq!(t.len() + v.len(), 610_206);
    }

    #[test]
    fn csv_round_trip() {
        let s = schema();
        let d = Dataset::new(2, vec![1.5, 2.0, -3.0, 1.0], vec![1.0, 0.0], vec![0.25, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &s, &d).unwrap();
        assert_eq!(read_csv(buf.as_slice(), &s).unwrap(), d);
    }

    proptest! {
        #[test]
        fn scaler_maps_range_onto_unit_interval(lo in -1e3f64..1e3, width in 1e-3f64..1e3, t in 0f64..1.0) {
            let s = MinMaxScaler { min: lo, max: lo + width };
            prop_assert!((s.apply(lo) + 1.0).abs() < 1e-9);
            prop_assert!((s.apply(lo + width) - 1.0).abs() < 1e-9);
            let x = lo + t * width;
            let z = s.apply(x);
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&z));
            prop_assert!((s.invert(z) - x).abs() < 1e-9 * (1.0 + x.abs()));
        }

        #[test]
        fn split_partitions_rows(n in 2usize..500, frac in 0.01f64..0.99, seed in 0u64..1000) {
            let (t, v) = split_indices(n, frac, seed).unwrap();
            prop_assert!(!t.is_empty() && !v.is_empty());
            let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
