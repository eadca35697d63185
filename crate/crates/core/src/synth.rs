//! Seeded synthetic Poisson frequency data with known additive effects and
//! planted pairwise interactions.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, FeatureSchema, FeatureSpec};
use crate::error::{PinError, Result};
use crate::loss::poisson_deviance;
use crate::{seeded_rng, STREAM_SYNTH};

/// Draws used per row to estimate conditional means of interaction terms.
const PROJECTION_DRAWS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Marginal {
    /// `U[-1, 1]`
    Uniform,
    Categorical { levels: Vec<String>, probabilities: Vec<f64> },
}

/// Additive main effect on the log-rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Effect {
    None,
    Linear { slope: f64 },
    Quadratic { coefficient: f64 },
    /// `amplitude · sin(π · frequency · x)`
    Sine { amplitude: f64, frequency: f64 },
    /// One value per categorical level.
    Levels { values: Vec<f64> },
}

impl Effect {
    fn eval(&self, x: f64) -> f64 {
        match self {
            Effect::None => 0.0,
            Effect::Linear { slope } => slope * x,
            Effect::Quadratic { coefficient } => coefficient * x * x,
            Effect::Sine { amplitude, frequency } => amplitude * (PI * frequency * x).sin(),
            Effect::Levels { values } => values[x as usize - 1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionForm {
    /// `x_j · x_k`
    Product,
    /// `1{x_j + x_k > 0}`
    ThresholdedSum,
}

impl InteractionForm {
    fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            InteractionForm::Product => a * b,
            InteractionForm::ThresholdedSum => f64::from(u8::from(a + b > 0.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedInteraction {
    /// Names of two distinct continuous features.
    pub features: [String; 2],
    pub strength: f64,
    pub form: InteractionForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ExposureSpec {
    Constant { value: f64 },
    /// `min(cap, exp(N(mu, sigma²)))`
    LogNormal { mu: f64, sigma: f64, cap: Option<f64> },
}

/// Gaussian copula coupling two uniform features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CopulaSpec {
    pub features: [String; 2],
    pub correlation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGenerator {
    pub name: String,
    pub marginal: Marginal,
    pub effect: Effect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub features: Vec<FeatureGenerator>,
    #[serde(default)]
    pub interactions: Vec<PlantedInteraction>,
    /// `β₀` on the log-rate scale.
    pub intercept: f64,
    pub exposure: ExposureSpec,
    pub rows: usize,
    pub seed: u64,
    #[serde(default)]
    pub copula: Option<CopulaSpec>,
    #[serde(default = "default_exposure_column")]
    pub exposure_column: String,
    #[serde(default = "default_count_column")]
    pub count_column: String,
}

fn default_exposure_column() -> String {
    "exposure".into()
}

fn default_count_column() -> String {
    "claims".into()
}

/// Ground truth that accompanies a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub spec: GeneratorSpec,
    /// True log-rate per row.
    pub log_rates: Vec<f64>,
    /// Log-rate with every interaction replaced by its additive projection
    /// (conditional means minus the overall mean, by Monte Carlo).
    pub additive_log_rates: Vec<f64>,
    /// Average Poisson deviance of the true rates on the generated counts.
    pub true_deviance: f64,
    /// Same for the additive projection.
    pub additive_deviance: f64,
}

impl GeneratorSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// `q` uniform features with a cycling catalog of monotone main effects, an
    /// intercept of `log 0.3` and capped lognormal exposure. `interactions`
    /// holds `(j, k, γ)` with 0-based feature indices, all of product form.
    pub fn planted(q: usize, rows: usize, interactions: &[(usize, usize, f64)], seed: u64) -> Self {
        let catalog = [
            Effect::Linear { slope: 0.4 },
            Effect::Sine {
                amplitude: 0.3,
                frequency: 0.5,
            },
            Effect::Linear { slope: -0.3 },
            Effect::Sine {
                amplitude: -0.4,
                frequency: 0.5,
            },
        ];
        let features = (0..q)
            .map(|j| FeatureGenerator {
                name: format!("x{}", j + 1),
                marginal: Marginal::Uniform,
                effect: catalog[j % catalog.len()].clone(),
            })
            .collect();
        let interactions = interactions
            .iter()
            .map(|&(j, k, strength)| PlantedInteraction {
                features: [format!("x{}", j + 1), format!("x{}", k + 1)],
                strength,
                form: InteractionForm::Product,
            })
            .collect();
        Self {
            features,
            interactions,
            intercept: 0.3f64.ln(),
            exposure: ExposureSpec::LogNormal {
                mu: -0.5,
                sigma: 0.5,
                cap: Some(1.0),
            },
            rows,
            seed,
            copula: None,
            exposure_column: default_exposure_column(),
            count_column: default_count_column(),
        }
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.features
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| PinError::Contract(format!("unknown feature {name:?} in generator spec")))
    }

    fn continuous_pair(&self, names: &[String; 2], what: &str) -> Result<(usize, usize)> {
        let (a, b) = (self.index_of(&names[0])?, self.index_of(&names[1])?);
        if a == b {
            return Err(PinError::Contract(format!("{what} needs two distinct features")));
        }
        for i in [a, b] {
            if self.features[i].marginal != Marginal::Uniform {
                return Err(PinError::Contract(format!(
                    "{what} feature {:?} must be continuous",
                    self.features[i].name
                )));
            }
        }
        Ok((a, b))
    }

    pub fn validate(&self) -> Result<()> {
        self.schema()?;
        for f in &self.features {
            match (&f.marginal, &f.effect) {
                (Marginal::Categorical { levels, probabilities }, effect) => {
                    if levels.len() != probabilities.len() {
                        return Err(PinError::Contract(format!("{}: one probability per level", f.name)));
                    }
                    if probabilities.iter().any(|p| !(*p >= 0.0 && p.is_finite()))
                        || (probabilities.iter().sum::<f64>() - 1.0).abs() > 1e-9
                    {
                        return Err(PinError::Contract(format!("{}: probabilities must sum to 1", f.name)));
                    }
                    match effect {
                        Effect::Levels { values } if values.len() == levels.len() => {}
                        Effect::None => {}
                        _ => {
                            return Err(PinError::Contract(format!(
                                "{}: categorical features take a per-level effect",
                                f.name
                            )))
                        }
                    }
                }
                (Marginal::Uniform, Effect::Levels { .. }) => {
                    return Err(PinError::Contract(format!("{}: per-level effect on a continuous feature", f.name)));
                }
                _ => {}
            }
        }
        let mut seen = Vec::new();
        for i in &self.interactions {
            let (a, b) = self.continuous_pair(&i.features, "interaction")?;
            let key = (a.min(b), a.max(b));
            if seen.contains(&key) {
                return Err(PinError::Contract(format!("pair {:?} planted twice", i.features)));
            }
            seen.push(key);
            if !i.strength.is_finite() {
                return Err(PinError::Contract("interaction strength must be finite".into()));
            }
        }
        if let Some(c) = &self.copula {
            self.continuous_pair(&c.features, "copula")?;
            if c.correlation.is_nan() || c.correlation.abs() >= 1.0 {
                return Err(PinError::Contract("copula correlation must lie in (-1, 1)".into()));
            }
        }
        match self.exposure {
            ExposureSpec::Constant { value } if !(value > 0.0 && value.is_finite()) => {
                return Err(PinError::Contract("exposure must be positive".into()))
            }
            ExposureSpec::LogNormal { sigma, cap, .. }
                if sigma.is_nan() || sigma < 0.0 || cap.is_some_and(|c| c.is_nan() || c <= 0.0) =>
            {
                return Err(PinError::Contract("invalid lognormal exposure".into()))
            }
            _ => {}
        }
        if !self.intercept.is_finite() {
            return Err(PinError::Contract("intercept must be finite".into()));
        }
        Ok(())
    }

    /// Schema of the generated CSV.
    pub fn schema(&self) -> Result<FeatureSchema> {
        let features = self
            .features
            .iter()
            .map(|f| match &f.marginal {
                Marginal::Uniform => FeatureSpec::continuous(&f.name),
                Marginal::Categorical { levels, .. } => FeatureSpec::categorical(&f.name, levels.iter().cloned()),
            })
            .collect();
        FeatureSchema::new(features, &self.exposure_column, &self.count_column)
    }
}

/// Poisson draw: inversion for means below 10, the library sampler above.
pub fn sample_poisson(mean: f64, rng: &mut impl Rng) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean < 10.0 {
        let u: f64 = rng.gen();
        let mut k = 0u32;
        let mut p = (-mean).exp();
        let mut cdf = p;
        while u > cdf && p > 0.0 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        k as f64
    } else {
        Poisson::new(mean).expect("positive mean").sample(rng)
    }
}

struct Sampler {
    weights: Vec<Option<WeightedIndex<f64>>>,
    copula: Option<(usize, usize, f64)>,
}

impl Sampler {
    fn new(spec: &GeneratorSpec) -> Result<Self> {
        let weights = spec
            .features
            .iter()
            .map(|f| match &f.marginal {
                Marginal::Uniform => Ok(None),
                Marginal::Categorical { probabilities, .. } => WeightedIndex::new(probabilities)
                    .map(Some)
                    .map_err(|e| PinError::Contract(format!("{}: {e}", f.name))),
            })
            .collect::<Result<_>>()?;
        let copula = match &spec.copula {
            Some(c) => {
                let (a, b) = spec.continuous_pair(&c.features, "copula")?;
                Some((a, b, c.correlation))
            }
            None => None,
        };
        Ok(Self { weights, copula })
    }

    fn row(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        for (x, w) in out.iter_mut().zip(&self.weights) {
            *x = match w {
                None => rng.gen_range(-1.0..1.0),
                Some(w) => (w.sample(rng) + 1) as f64,
            };
        }
        if let Some((a, b, rho)) = self.copula {
            let std = Normal::new(0.0, 1.0).expect("standard normal");
            let z1: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            let z2 = rho * z1 + (1.0 - rho * rho).sqrt() * e;
            out[a] = 2.0 * std.cdf(z1) - 1.0;
            out[b] = 2.0 * std.cdf(z2) - 1.0;
        }
    }
}

/// Draws the dataset described by `spec` and its oracle record.
pub fn generate(spec: &GeneratorSpec) -> Result<(Dataset, FeatureSchema, Oracle)> {
    spec.validate()?;
    let schema = spec.schema()?;
    let q = spec.features.len();
    let sampler = Sampler::new(spec)?;
    let planted: Vec<(usize, usize, f64, InteractionForm)> = spec
        .interactions
        .iter()
        .map(|i| {
            let (a, b) = spec.continuous_pair(&i.features, "interaction")?;
            Ok((a, b, i.strength, i.form))
        })
        .collect::<Result<_>>()?;
    let mut rng = seeded_rng(spec.seed, STREAM_SYNTH);
    let mut projection_rng = seeded_rng(spec.seed, STREAM_SYNTH + 1000);
    let lognormal = match spec.exposure {
        ExposureSpec::LogNormal { mu, sigma, .. } => {
            Some(LogNormal::new(mu, sigma).map_err(|e| PinError::Contract(e.to_string()))?)
        }
        ExposureSpec::Constant { .. } => None,
    };
    // Overall means of the interaction terms, for the additive projection.
    let overall: Vec<f64> = planted
        .iter()
        .map(|&(_, _, g, form)| {
            let n = PROJECTION_DRAWS * 16;
            let s: f64 = (0..n)
                .map(|_| form.eval(projection_rng.gen_range(-1.0..1.0), projection_rng.gen_range(-1.0..1.0)))
                .sum();
            g * s / n as f64
        })
        .collect();

    let mut data = Dataset::empty(q);
    let mut log_rates = Vec::with_capacity(spec.rows);
    let mut additive_log_rates = Vec::with_capacity(spec.rows);
    let mut row = vec![0.0; q];
    for _ in 0..spec.rows {
        sampler.row(&mut rng, &mut row);
        let main: f64 = spec.intercept + spec.features.iter().zip(&row).map(|(f, &x)| f.effect.eval(x)).sum::<f64>();
        let mut inter = 0.0;
        let mut proj = 0.0;
        for (&(a, b, g, form), mean) in planted.iter().zip(&overall) {
            inter += g * form.eval(row[a], row[b]);
            let mut ca = 0.0;
            let mut cb = 0.0;
            for _ in 0..PROJECTION_DRAWS {
                ca += form.eval(row[a], projection_rng.gen_range(-1.0..1.0));
                cb += form.eval(projection_rng.gen_range(-1.0..1.0), row[b]);
            }
            proj += g * (ca + cb) / PROJECTION_DRAWS as f64 - mean;
        }
        let v = match (&spec.exposure, &lognormal) {
            (ExposureSpec::Constant { value }, _) => *value,
            (ExposureSpec::LogNormal { cap, .. }, Some(ln)) => {
                let v = ln.sample(&mut rng);
                cap.map_or(v, |c| v.min(c))
            }
            _ => unreachable!("lognormal distribution prepared above"),
        };
        let eta = main + inter;
        let count = sample_poisson(v * eta.exp(), &mut rng);
        data.push(&row, count, v)?;
        log_rates.push(eta);
        additive_log_rates.push(main + proj);
    }
    let true_deviance = deviance_of(&log_rates, &data)?;
    let additive_deviance = deviance_of(&additive_log_rates, &data)?;
    Ok((
        data,
        schema,
        Oracle {
            spec: spec.clone(),
            log_rates,
            additive_log_rates,
            true_deviance,
            additive_deviance,
        },
    ))
}

fn deviance_of(log_rates: &[f64], data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let preds: Vec<f64> = log_rates.iter().map(|e| e.exp()).collect();
    poisson_deviance(&preds, data.response(), data.exposure())
}
