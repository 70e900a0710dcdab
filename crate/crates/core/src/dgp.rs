//! Synthetic data generator: biased RCT, observational data and an unbiased
//! ground-truth RCT drawn from one outcome model with known uplift.
//!
//! Outcomes follow `Y = 1[f(x, t) + δ > µ]` with `δ ~ N(0, 1)` and
//!
//! ```text
//! f(x, t) = a + b·t + (c·x)·t + (d·x²)·t + e·x + g·x²
//! ```
//!
//! (vector terms are dot products, `x²` is elementwise). Both potential
//! outcomes of a row share its `δ`, which makes the Persuadable / Sure Thing /
//! Lost Cause / Sleeping Dog label of every row well defined.
//!
//! Treatment is binary. Assignment probabilities depend on which side of a
//! threshold one or two designated covariates fall (a "region"); the biased
//! RCT and the observational data each have their own rule, the ground truth
//! assigns uniformly.

use std::path::Path;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{default_feature_names, Dataset, Source};
use crate::error::{Error, Result};
use crate::rng;

pub const N_TREATMENTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonlinearOp {
    /// `Π x_i`
    Product,
    /// `x²`
    Square,
    Sin,
    Tanh,
    /// `exp(x)`
    Exp,
}

/// Marginal law of one covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateDist {
    Binomial { trials: u64, p: f64 },
    Poisson { lambda: f64 },
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
    /// `weight·N(mean_a, sd_a²) + (1 − weight)·N(mean_b, sd_b²)`
    Bimodal {
        weight: f64,
        mean_a: f64,
        sd_a: f64,
        mean_b: f64,
        sd_b: f64,
    },
    /// `intercept + Σ coefs_i·x[inputs_i] + N(0, noise_sd²)`
    Linear {
        inputs: Vec<usize>,
        coefs: Vec<f64>,
        #[serde(default)]
        intercept: f64,
        #[serde(default)]
        noise_sd: f64,
    },
    /// `scale·op(x[inputs]) + N(0, noise_sd²)`
    Nonlinear {
        op: NonlinearOp,
        inputs: Vec<usize>,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        noise_sd: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl CovariateDist {
    fn validate(&self, dim: usize) -> std::result::Result<(), String> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be finite"))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be finite and >= 0, got {v}"))
            }
        };
        let probability = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must be in [0, 1], got {v}"))
            }
        };
        let inputs_ok = |inputs: &[usize]| {
            if inputs.is_empty() {
                return Err("combination needs at least one input".to_owned());
            }
            match inputs.iter().find(|&&i| i >= dim) {
                Some(i) => Err(format!(
                    "input {i} must refer to an earlier dimension (< {dim})"
                )),
                None => Ok(()),
            }
        };
        match *self {
            CovariateDist::Binomial { p, .. } => probability("p", p),
            CovariateDist::Poisson { lambda } => {
                if lambda > 0.0 && lambda.is_finite() {
                    Ok(())
                } else {
                    Err(format!("lambda must be > 0, got {lambda}"))
                }
            }
            CovariateDist::Normal { mean, sd } => finite("mean", mean).and(non_negative("sd", sd)),
            CovariateDist::Uniform { low, high } => {
                finite("low", low)?;
                finite("high", high)?;
                if low < high {
                    Ok(())
                } else {
                    Err(format!("uniform needs low < high, got [{low}, {high}]"))
                }
            }
            CovariateDist::Bimodal {
                weight,
                mean_a,
                sd_a,
                mean_b,
                sd_b,
            } => {
                probability("weight", weight)?;
                finite("mean_a", mean_a)?;
                finite("mean_b", mean_b)?;
                non_negative("sd_a", sd_a)?;
                non_negative("sd_b", sd_b)
            }
            CovariateDist::Linear {
                ref inputs,
                ref coefs,
                intercept,
                noise_sd,
            } => {
                inputs_ok(inputs)?;
                if coefs.len() != inputs.len() {
                    return Err(format!(
                        "{} coefficients for {} inputs",
                        coefs.len(),
                        inputs.len()
                    ));
                }
                finite("intercept", intercept)?;
                non_negative("noise_sd", noise_sd)
            }
            CovariateDist::Nonlinear {
                op,
                ref inputs,
                scale,
                noise_sd,
            } => {
                inputs_ok(inputs)?;
                if op != NonlinearOp::Product && inputs.len() != 1 {
                    return Err(format!("{op:?} takes exactly one input"));
                }
                finite("scale", scale)?;
                non_negative("noise_sd", noise_sd)
            }
        }
    }

    /// Draw column `j` given the already-drawn lower-indexed columns.
    fn sample<R: Rng>(&self, prefix: &[f64], rng: &mut R) -> f64 {
        let gauss = |rng: &mut R, sd: f64| {
            if sd > 0.0 {
                sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            }
        };
        match *self {
            CovariateDist::Binomial { trials, p } => {
                Binomial::new(trials, p).expect("validated").sample(rng) as f64
            }
            CovariateDist::Poisson { lambda } => {
                Poisson::new(lambda).expect("validated").sample(rng)
            }
            CovariateDist::Normal { mean, sd } => Normal::new(mean, sd).expect("validated").sample(rng),
            CovariateDist::Uniform { low, high } => rng.gen_range(low..high),
            CovariateDist::Bimodal {
                weight,
                mean_a,
                sd_a,
                mean_b,
                sd_b,
            } => {
                let first = rng.gen::<f64>() < weight;
                let z: f64 = rng.sample(StandardNormal);
                if first {
                    mean_a + sd_a * z
                } else {
                    mean_b + sd_b * z
                }
            }
            CovariateDist::Linear {
                ref inputs,
                ref coefs,
                intercept,
                noise_sd,
            } => {
                let lin: f64 = inputs.iter().zip(coefs).map(|(&i, c)| c * prefix[i]).sum();
                intercept + lin + gauss(rng, noise_sd)
            }
            CovariateDist::Nonlinear {
                op,
                ref inputs,
                scale,
                noise_sd,
            } => {
                let v = prefix[inputs[0]];
                let raw = match op {
                    NonlinearOp::Product => inputs.iter().map(|&i| prefix[i]).product(),
                    NonlinearOp::Square => v * v,
                    NonlinearOp::Sin => v.sin(),
                    NonlinearOp::Tanh => v.tanh(),
                    NonlinearOp::Exp => v.exp(),
                };
                scale * raw + gauss(rng, noise_sd)
            }
        }
    }
}

/// Per-dimension covariate laws; column `j` may only combine columns `< j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovariateSpec {
    pub dims: Vec<CovariateDist>,
}

impl CovariateSpec {
    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::config("covariate spec needs at least one dimension"));
        }
        for (j, d) in self.dims.iter().enumerate() {
            d.validate(j)
                .map_err(|msg| Error::config(format!("covariate dimension {j}: {msg}")))?;
        }
        Ok(())
    }

    fn sample_row<R: Rng>(&self, rng: &mut R, out: &mut Vec<f64>) {
        out.clear();
        for d in &self.dims {
            let v = d.sample(out, rng);
            out.push(v);
        }
    }
}

/// Coefficients of the outcome score `f(x, t)` and the threshold `µ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModelSpec {
    /// `a`
    pub intercept: f64,
    /// `b`
    pub treatment: f64,
    /// `c`, multiplies `x·t`
    pub interaction: Vec<f64>,
    /// `d`, multiplies `x²·t`
    pub interaction_sq: Vec<f64>,
    /// `e`
    pub linear: Vec<f64>,
    /// `g`
    pub quadratic: Vec<f64>,
    /// `µ`
    pub threshold: f64,
}

impl OutcomeModelSpec {
    pub fn zeros(dim: usize) -> Self {
        OutcomeModelSpec {
            intercept: 0.0,
            treatment: 0.0,
            interaction: vec![0.0; dim],
            interaction_sq: vec![0.0; dim],
            linear: vec![0.0; dim],
            quadratic: vec![0.0; dim],
            threshold: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for (name, v) in [
            ("interaction", &self.interaction),
            ("interaction_sq", &self.interaction_sq),
            ("linear", &self.linear),
            ("quadratic", &self.quadratic),
        ] {
            if v.len() != dim {
                return Err(Error::config(format!(
                    "outcome.{name} has {} entries, covariates have {dim}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// `f(x, t)`.
pub fn outcome_score(x: &[f64], t: u32, spec: &OutcomeModelSpec) -> Result<f64> {
    if x.len() != spec.dim() || spec.validate(x.len()).is_err() {
        return Err(Error::Dimension {
            expected: spec.dim(),
            got: x.len(),
        });
    }
    Ok(score_unchecked(x, f64::from(t), spec))
}

fn score_unchecked(x: &[f64], t: f64, spec: &OutcomeModelSpec) -> f64 {
    let mut base = spec.intercept;
    let mut effect = spec.treatment;
    for (j, &v) in x.iter().enumerate() {
        let v2 = v * v;
        base += spec.linear[j] * v + spec.quadratic[j] * v2;
        effect += spec.interaction[j] * v + spec.interaction_sq[j] * v2;
    }
    base + effect * t
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `P(Y = 1 | x, t) = Φ(f(x, t) − µ)`.
pub fn true_outcome_prob(x: &[f64], t: u32, spec: &OutcomeModelSpec) -> Result<f64> {
    Ok(normal_cdf(outcome_score(x, t, spec)? - spec.threshold))
}

/// `P(Y = 1 | x, 1) − P(Y = 1 | x, 0)`.
pub fn true_uplift(x: &[f64], spec: &OutcomeModelSpec) -> Result<f64> {
    Ok(true_outcome_prob(x, 1, spec)? - true_outcome_prob(x, 0, spec)?)
}

/// Outcome for a given noise draw; an exact tie at `µ` is 0.
pub fn outcome_with_noise(score: f64, delta: f64, threshold: f64) -> u8 {
    u8::from(score + delta > threshold)
}

/// Draw `δ ~ N(0, 1)` from `rng` and threshold.
pub fn sample_outcome<R: Rng>(x: &[f64], t: u32, spec: &OutcomeModelSpec, rng: &mut R) -> Result<u8> {
    let score = outcome_score(x, t, spec)?;
    let delta: f64 = rng.sample(StandardNormal);
    Ok(outcome_with_noise(score, delta, spec.threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    /// `Y(1) = 1, Y(0) = 0`
    Persuadable,
    /// `Y(1) = 1, Y(0) = 1`
    SureThing,
    /// `Y(1) = 0, Y(0) = 0`
    LostCause,
    /// `Y(1) = 0, Y(0) = 1`
    SleepingDog,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Persuadable,
        Category::SureThing,
        Category::LostCause,
        Category::SleepingDog,
    ];

    pub fn from_potential_outcomes(y1: u8, y0: u8) -> Category {
        match (y1, y0) {
            (1, 0) => Category::Persuadable,
            (1, 1) => Category::SureThing,
            (0, 1) => Category::SleepingDog,
            _ => Category::LostCause,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Persuadable => "persuadables",
            Category::SureThing => "sure_things",
            Category::LostCause => "lost_causes",
            Category::SleepingDog => "sleeping_dogs",
        }
    }
}

/// Category of `x` given its shared noise draw `delta`.
pub fn classify_category(x: &[f64], spec: &OutcomeModelSpec, delta: f64) -> Result<Category> {
    let y1 = outcome_with_noise(outcome_score(x, 1, spec)?, delta, spec.threshold);
    let y0 = outcome_with_noise(outcome_score(x, 0, spec)?, delta, spec.threshold);
    Ok(Category::from_potential_outcomes(y1, y0))
}

/// Treatment probabilities by region. Region index is the bit pattern of
/// `x[columns[i]] > thresholds[i]`, bit `i` for column `i`; region `r`
/// assigns `1/N_t + magnitude·tilts[r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRule {
    pub columns: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub magnitude: f64,
    /// One zero-sum direction per region, `2^columns.len()` rows of `N_t`.
    pub tilts: Vec<Vec<f64>>,
}

impl AssignmentRule {
    pub fn uniform() -> Self {
        AssignmentRule {
            columns: Vec::new(),
            thresholds: Vec::new(),
            magnitude: 0.0,
            tilts: vec![vec![0.0; N_TREATMENTS]],
        }
    }

    /// A single-column rule with explicit probability vectors below/above.
    pub fn threshold_split(column: usize, threshold: f64, below: [f64; 2], above: [f64; 2]) -> Self {
        let base = 1.0 / N_TREATMENTS as f64;
        AssignmentRule {
            columns: vec![column],
            thresholds: vec![threshold],
            magnitude: 1.0,
            tilts: vec![
                below.iter().map(|p| p - base).collect(),
                above.iter().map(|p| p - base).collect(),
            ],
        }
    }

    pub fn n_regions(&self) -> usize {
        1 << self.columns.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.columns.len() != self.thresholds.len() {
            return Err(Error::config("assignment rule: columns and thresholds differ in length"));
        }
        if self.columns.len() > 8 {
            return Err(Error::config("assignment rule: at most 8 region columns"));
        }
        if let Some(c) = self.columns.iter().find(|&&c| c >= dim) {
            return Err(Error::config(format!("assignment rule: column {c} out of range")));
        }
        if self.tilts.len() != self.n_regions() {
            return Err(Error::config(format!(
                "assignment rule: {} tilt rows for {} regions",
                self.tilts.len(),
                self.n_regions()
            )));
        }
        if !(self.magnitude >= 0.0) {
            return Err(Error::config("assignment rule: magnitude must be >= 0"));
        }
        for r in 0..self.n_regions() {
            let p = self.probabilities(r);
            if p.len() != N_TREATMENTS {
                return Err(Error::config(format!(
                    "assignment rule: region {r} has {} probabilities, expected {N_TREATMENTS}",
                    p.len()
                )));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || p.iter().any(|&v| v < 0.0) {
                return Err(Error::config(format!(
                    "assignment rule: region {r} probabilities {p:?} are not a distribution"
                )));
            }
        }
        Ok(())
    }

    pub fn region(&self, x: &[f64]) -> Result<usize> {
        let mut r = 0;
        for (bit, (&c, &thr)) in self.columns.iter().zip(&self.thresholds).enumerate() {
            let v = *x
                .get(c)
                .ok_or_else(|| Error::config(format!("assignment rule: column {c} missing from row")))?;
            if v > thr {
                r |= 1 << bit;
            }
        }
        Ok(r)
    }

    pub fn probabilities(&self, region: usize) -> Vec<f64> {
        let base = 1.0 / N_TREATMENTS as f64;
        self.tilts[region].iter().map(|t| base + self.magnitude * t).collect()
    }
}

/// `f_b` for the biased RCT and `f_o` for the observational data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionBiasSpec {
    pub rct: AssignmentRule,
    pub obs: AssignmentRule,
}

impl SelectionBiasSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.rct.validate(dim)?;
        self.obs.validate(dim)?;
        if self.obs.magnitude <= self.rct.magnitude {
            return Err(Error::config(format!(
                "observational bias magnitude ({}) must exceed the RCT's ({})",
                self.obs.magnitude, self.rct.magnitude
            )));
        }
        Ok(())
    }
}

/// Draw a treatment from the region's probability vector.
pub fn assign_treatment<R: Rng>(x: &[f64], rule: &AssignmentRule, rng: &mut R) -> Result<u32> {
    let probs = rule.probabilities(rule.region(x)?);
    Ok(draw_categorical(&probs, rng.gen::<f64>()))
}

fn draw_categorical(probs: &[f64], u: f64) -> u32 {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_rct: usize,
    #[serde(default = "hundred")]
    pub obs_multiplier: usize,
    #[serde(default = "hundred")]
    pub ground_truth_multiplier: usize,
    #[serde(default)]
    pub seed: u64,
    pub covariates: CovariateSpec,
    pub outcome: OutcomeModelSpec,
    pub selection: SelectionBiasSpec,
}

fn hundred() -> usize {
    100
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rct == 0 {
            return Err(Error::config("n_rct must be >= 1"));
        }
        if self.obs_multiplier == 0 || self.ground_truth_multiplier == 0 {
            return Err(Error::config("obs_multiplier and ground_truth_multiplier must be >= 1"));
        }
        self.covariates.validate()?;
        let dim = self.covariates.dim();
        self.outcome.validate(dim)?;
        self.selection.validate(dim)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: DgpConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The calibrated 20-dimensional default.
    pub fn paper_default() -> Self {
        default_config()
    }
}

/// Which of the three synthetic datasets a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cohort {
    BiasedRct,
    Observational,
    GroundTruth,
}

impl Cohort {
    fn tag(self) -> &'static str {
        match self {
            Cohort::BiasedRct => "dgp/rct",
            Cohort::Observational => "dgp/obs",
            Cohort::GroundTruth => "dgp/gt",
        }
    }

    pub fn source(self) -> Source {
        match self {
            Cohort::BiasedRct => Source::Rct,
            Cohort::Observational => Source::Obs,
            Cohort::GroundTruth => Source::Gt,
        }
    }
}

/// Covariates for `n` rows, reproducible for fixed `(spec, n, seed)`.
pub fn gen_covariates(spec: &CovariateSpec, n: usize, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("row count must be >= 1"));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, "dgp/covariates", i as u64);
            let mut row = Vec::with_capacity(spec.dim());
            spec.sample_row(&mut rng, &mut row);
            row
        })
        .collect();
    Ok(rows.concat())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub data: Dataset,
    pub categories: Vec<Category>,
}

impl SimulatedData {
    /// Counts in [`Category::ALL`] order.
    pub fn category_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for c in &self.categories {
            counts[*c as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub biased_rct: SimulatedData,
    pub observational: SimulatedData,
    pub ground_truth: SimulatedData,
}

struct RowDraw {
    x: Vec<f64>,
    t: u32,
    y: u8,
    uplift: f64,
    category: Category,
}

/// One cohort of `n` rows. Row `i` consumes only stream `(seed, cohort, i)`:
/// covariates first, then the treatment draw, then `δ`.
pub fn generate_cohort(config: &DgpConfig, cohort: Cohort, n: usize) -> Result<SimulatedData> {
    config.validate()?;
    let uniform = AssignmentRule::uniform();
    let rule = match cohort {
        Cohort::BiasedRct => &config.selection.rct,
        Cohort::Observational => &config.selection.obs,
        Cohort::GroundTruth => &uniform,
    };
    let spec = &config.outcome;
    let draws: Vec<RowDraw> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<RowDraw> {
            let mut rng = rng::stream(config.seed, cohort.tag(), i as u64);
            let mut x = Vec::with_capacity(config.covariates.dim());
            config.covariates.sample_row(&mut rng, &mut x);
            let t = assign_treatment(&x, rule, &mut rng)?;
            let delta: f64 = rng.sample(StandardNormal);
            let s1 = score_unchecked(&x, 1.0, spec);
            let s0 = score_unchecked(&x, 0.0, spec);
            let y1 = outcome_with_noise(s1, delta, spec.threshold);
            let y0 = outcome_with_noise(s0, delta, spec.threshold);
            Ok(RowDraw {
                uplift: normal_cdf(s1 - spec.threshold) - normal_cdf(s0 - spec.threshold),
                y: if t == 1 { y1 } else { y0 },
                category: Category::from_potential_outcomes(y1, y0),
                x,
                t,
            })
        })
        .collect::<Result<_>>()?;

    let dim = config.covariates.dim();
    let mut features = Vec::with_capacity(n * dim);
    let mut treatment = Vec::with_capacity(n);
    let mut outcome = Vec::with_capacity(n);
    let mut uplift = Vec::with_capacity(n);
    let mut categories = Vec::with_capacity(n);
    for d in draws {
        features.extend_from_slice(&d.x);
        treatment.push(d.t);
        outcome.push(d.y);
        uplift.push(d.uplift);
        categories.push(d.category);
    }
    let data = Dataset::new(
        default_feature_names(dim),
        features,
        treatment,
        outcome,
        vec![cohort.source(); n],
        Some(uplift),
    )?;
    Ok(SimulatedData { data, categories })
}

/// Biased RCT, observational data and ground truth for `config.seed`.
pub fn generate(config: &DgpConfig) -> Result<Generated> {
    config.validate()?;
    let n = config.n_rct;
    Ok(Generated {
        biased_rct: generate_cohort(config, Cohort::BiasedRct, n)?,
        observational: generate_cohort(config, Cohort::Observational, n * config.obs_multiplier)?,
        ground_truth: generate_cohort(config, Cohort::GroundTruth, n * config.ground_truth_multiplier)?,
    })
}

fn default_config() -> DgpConfig {
    use CovariateDist::*;
    let dims = vec![
        // 0: binary segment, the default bucketing key
        Binomial { trials: 1, p: 0.5 },
        Binomial { trials: 4, p: 0.3 },
        Poisson { lambda: 2.0 },
        Poisson { lambda: 0.7 },
        // 4, 5: drive treatment assignment in both biased sources
        Normal { mean: 0.0, sd: 1.0 },
        Normal { mean: 0.0, sd: 1.0 },
        Normal { mean: 0.5, sd: 1.5 },
        Normal { mean: -1.0, sd: 0.5 },
        Uniform { low: 0.0, high: 1.0 },
        Uniform { low: -1.0, high: 1.0 },
        Uniform { low: 0.0, high: 5.0 },
        Bimodal {
            weight: 0.5,
            mean_a: -2.0,
            sd_a: 1.0,
            mean_b: 2.0,
            sd_b: 1.0,
        },
        Bimodal {
            weight: 0.3,
            mean_a: -1.0,
            sd_a: 0.5,
            mean_b: 1.5,
            sd_b: 0.7,
        },
        Linear {
            inputs: vec![4, 8],
            coefs: vec![0.6, 0.4],
            intercept: 0.0,
            noise_sd: 0.5,
        },
        Linear {
            inputs: vec![2, 6],
            coefs: vec![0.5, -0.3],
            intercept: -1.0,
            noise_sd: 0.3,
        },
        Linear {
            inputs: vec![5, 9],
            coefs: vec![1.0, -1.0],
            intercept: 0.0,
            noise_sd: 0.5,
        },
        Nonlinear {
            op: NonlinearOp::Product,
            inputs: vec![4, 5],
            scale: 1.0,
            noise_sd: 0.0,
        },
        Nonlinear {
            op: NonlinearOp::Square,
            inputs: vec![6],
            scale: 0.3,
            noise_sd: 0.1,
        },
        Nonlinear {
            op: NonlinearOp::Sin,
            inputs: vec![10],
            scale: 1.0,
            noise_sd: 0.0,
        },
        Nonlinear {
            op: NonlinearOp::Tanh,
            inputs: vec![11],
            scale: 1.0,
            noise_sd: 0.0,
        },
    ];
    let dim = dims.len();
    // Calibrated so the four response categories land on a 23.7 / 18.3 / 56 / 2
    // percent split. Uplift rises with x4 while the baseline score is convex
    // in x4, which a logistic learner can only fit locally: training arms that
    // cover different x4 ranges therefore get a distorted uplift slope.
    let mut outcome = OutcomeModelSpec::zeros(dim);
    outcome.intercept = 0.0;
    outcome.treatment = 0.7935;
    outcome.threshold = 1.307;
    outcome.linear[4] = 0.2;
    outcome.quadratic[4] = 0.4;
    outcome.interaction[4] = 0.7919;

    // treatment favoured where x4 <= 0, in both sources
    let tilts = vec![
        vec![-1.0, 1.0],
        vec![1.0, -1.0],
        vec![-1.0, 1.0],
        vec![1.0, -1.0],
    ];
    DgpConfig {
        n_rct: 1000,
        obs_multiplier: 100,
        ground_truth_multiplier: 100,
        seed: 20250601,
        covariates: CovariateSpec { dims },
        outcome,
        selection: SelectionBiasSpec {
            rct: AssignmentRule {
                columns: vec![4, 5],
                thresholds: vec![0.0, 0.0],
                magnitude: 0.1,
                tilts: tilts.clone(),
            },
            obs: AssignmentRule {
                columns: vec![4, 5],
                thresholds: vec![0.0, 0.0],
                magnitude: 0.35,
                tilts,
            },
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mean_var(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    }

    /// Composite Simpson integration of the standard normal density from
    /// -12 to z, independent of the erfc-based implementation.
    fn quadrature_cdf(z: f64) -> f64 {
        let a = -12.0;
        let n = 20_000;
        let h = (z - a) / n as f64;
        let pdf = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(a) + pdf(z);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(a + i as f64 * h);
        }
        s * h / 3.0
    }

    /// Pearson chi-square statistic of a 2x2 contingency table.
    fn chi_square_2x2(table: [[f64; 2]; 2]) -> f64 {
        let total: f64 = table.iter().flatten().sum();
        let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
        let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
        let mut chi = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let e = rows[i] * cols[j] / total;
                chi += (table[i][j] - e).powi(2) / e;
            }
        }
        chi
    }

    #[test]
    fn normal_column_moments() {
        let spec = CovariateSpec {
            dims: vec![CovariateDist::Normal { mean: 0.0, sd: 1.0 }],
        };
        let x = gen_covariates(&spec, 100_000, 1).unwrap();
        let (m, v) = mean_var(&x);
        assert!(m.abs() <= 0.02, "mean {m}");
        assert!((0.97..=1.03).contains(&v), "variance {v}");
    }

    #[test]
    fn uniform_column_support() {
        let spec = CovariateSpec {
            dims: vec![CovariateDist::Uniform { low: 0.0, high: 1.0 }],
        };
        let x = gen_covariates(&spec, 100_000, 2).unwrap();
        assert!(x.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn bimodal_column_is_bimodal() {
        let spec = CovariateSpec {
            dims: vec![CovariateDist::Bimodal {
                weight: 0.5,
                mean_a: -2.0,
                sd_a: 1.0,
                mean_b: 2.0,
                sd_b: 1.0,
            }],
        };
        let x = gen_covariates(&spec, 100_000, 3).unwrap();
        let (m, v) = mean_var(&x);
        assert!(m.abs() <= 0.05, "mean {m}");
        // Sarle's bimodality coefficient; above 5/9 suggests two modes
        let n = x.len() as f64;
        let sd = v.sqrt();
        let skew = x.iter().map(|t| ((t - m) / sd).powi(3)).sum::<f64>() / n;
        let kurt = x.iter().map(|t| ((t - m) / sd).powi(4)).sum::<f64>() / n - 3.0;
        let bc = (skew * skew + 1.0) / (kurt + 3.0 * (n - 1.0).powi(2) / ((n - 2.0) * (n - 3.0)));
        assert!(bc > 5.0 / 9.0, "bimodality coefficient {bc}");
        // the mixture has a density dip at 0: fewer points near 0 than near ±2
        let near = |c: f64| x.iter().filter(|&&t| (t - c).abs() < 0.25).count();
        assert!(near(0.0) * 2 < near(2.0) && near(0.0) * 2 < near(-2.0));
    }

    #[test]
    fn combination_columns_follow_inputs() {
        let spec = CovariateSpec {
            dims: vec![
                CovariateDist::Uniform { low: 0.0, high: 1.0 },
                CovariateDist::Uniform { low: 0.0, high: 1.0 },
                CovariateDist::Linear {
                    inputs: vec![0, 1],
                    coefs: vec![2.0, -1.0],
                    intercept: 0.5,
                    noise_sd: 0.0,
                },
                CovariateDist::Nonlinear {
                    op: NonlinearOp::Product,
                    inputs: vec![0, 1],
                    scale: 3.0,
                    noise_sd: 0.0,
                },
            ],
        };
        let x = gen_covariates(&spec, 100, 4).unwrap();
        for r in x.chunks(4) {
            assert!((r[2] - (0.5 + 2.0 * r[0] - r[1])).abs() < 1e-12);
            assert!((r[3] - 3.0 * r[0] * r[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_dimension_is_named() {
        let spec = CovariateSpec {
            dims: vec![
                CovariateDist::Normal { mean: 0.0, sd: 1.0 },
                CovariateDist::Binomial { trials: 1, p: 1.5 },
            ],
        };
        let msg = gen_covariates(&spec, 10, 0).unwrap_err().to_string();
        assert!(msg.contains("dimension 1"), "{msg}");
        let forward = CovariateSpec {
            dims: vec![CovariateDist::Linear {
                inputs: vec![0],
                coefs: vec![1.0],
                intercept: 0.0,
                noise_sd: 0.0,
            }],
        };
        assert!(forward.validate().is_err());
    }

    #[test]
    fn covariates_are_deterministic() {
        let spec = DgpConfig::paper_default().covariates;
        assert_eq!(gen_covariates(&spec, 500, 9).unwrap(), gen_covariates(&spec, 500, 9).unwrap());
        assert_ne!(gen_covariates(&spec, 500, 9).unwrap(), gen_covariates(&spec, 500, 10).unwrap());
    }

    #[test]
    fn outcome_score_examples() {
        let zero = OutcomeModelSpec::zeros(2);
        assert_eq!(outcome_score(&[3.0, -1.0], 1, &zero).unwrap(), 0.0);
        let mut s = OutcomeModelSpec::zeros(2);
        s.intercept = 1.0;
        s.treatment = 2.0;
        assert_eq!(outcome_score(&[5.0, 5.0], 1, &s).unwrap(), 3.0);
        assert_eq!(outcome_score(&[5.0, 5.0], 0, &s).unwrap(), 1.0);
        let mut s = OutcomeModelSpec::zeros(2);
        s.interaction = vec![1.0, 0.0];
        s.interaction_sq = vec![0.0, 1.0];
        assert_eq!(outcome_score(&[2.0, 3.0], 1, &s).unwrap(), 11.0);
        assert_eq!(outcome_score(&[2.0, 3.0], 0, &s).unwrap(), 0.0);
        assert!(matches!(
            outcome_score(&[1.0], 0, &s),
            Err(Error::Dimension { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn normal_cdf_matches_quadrature() {
        for z in [-6.0, -2.5, -1.0, -0.3, 0.0, 0.7, 1.0, 1.96, 4.0] {
            let q = quadrature_cdf(z);
            assert!((normal_cdf(z) - q).abs() < 1e-9, "z={z}: {} vs {q}", normal_cdf(z));
        }
        assert!((normal_cdf(1.0) - 0.8413).abs() < 1e-4);
    }

    fn offset_spec(offset: f64) -> OutcomeModelSpec {
        let mut s = OutcomeModelSpec::zeros(1);
        s.intercept = offset;
        s
    }

    fn empirical_rate(spec: &OutcomeModelSpec, x: &[f64], t: u32, draws: u64, seed: u64) -> f64 {
        let mut rng = rng::stream(seed, "test/outcome", 0);
        let ones: u64 = (0..draws)
            .map(|_| u64::from(sample_outcome(x, t, spec, &mut rng).unwrap()))
            .sum();
        ones as f64 / draws as f64
    }

    #[test]
    fn sample_outcome_rates() {
        let r = empirical_rate(&offset_spec(0.0), &[0.0], 0, 100_000, 1);
        assert!((0.494..=0.506).contains(&r), "{r}");
        let r = empirical_rate(&offset_spec(10.0), &[0.0], 0, 100_000, 2);
        assert!(r >= 0.9999, "{r}");
        let r = empirical_rate(&offset_spec(1.0), &[0.0], 0, 100_000, 3);
        assert!((r - 0.8413).abs() <= 0.005, "{r}");
    }

    #[test]
    fn strict_threshold() {
        assert_eq!(outcome_with_noise(1.0, 0.0, 1.0), 0);
        assert_eq!(outcome_with_noise(1.0, 1e-12, 1.0), 1);
    }

    #[test]
    fn true_outcome_prob_limits() {
        assert_eq!(true_outcome_prob(&[0.0], 0, &offset_spec(0.0)).unwrap(), 0.5);
        assert_eq!(true_outcome_prob(&[0.0], 0, &offset_spec(50.0)).unwrap(), 1.0);
        assert!((true_outcome_prob(&[0.0], 0, &offset_spec(1.0)).unwrap() - 0.8413).abs() < 1e-4);
    }

    #[test]
    fn sampled_rate_agrees_with_analytic_probability() {
        let spec = DgpConfig::paper_default().outcome;
        let xs = gen_covariates(&DgpConfig::paper_default().covariates, 20, 77).unwrap();
        let draws = 100_000;
        for (i, x) in xs.chunks(spec.dim()).enumerate() {
            let t = (i % 2) as u32;
            let p = true_outcome_prob(x, t, &spec).unwrap();
            let rate = empirical_rate(&spec, x, t, draws, 100 + i as u64);
            let se = (p * (1.0 - p) / draws as f64).sqrt().max(1e-6);
            assert!((rate - p).abs() <= 3.0 * se + 1e-5, "row {i}: rate {rate} vs p {p}");
        }
    }

    #[test]
    fn categories_truth_table() {
        assert_eq!(Category::from_potential_outcomes(1, 0), Category::Persuadable);
        assert_eq!(Category::from_potential_outcomes(1, 1), Category::SureThing);
        assert_eq!(Category::from_potential_outcomes(0, 0), Category::LostCause);
        assert_eq!(Category::from_potential_outcomes(0, 1), Category::SleepingDog);
        let mut s = OutcomeModelSpec::zeros(1);
        s.treatment = 1.0;
        s.threshold = 0.5;
        assert_eq!(classify_category(&[0.0], &s, 0.0).unwrap(), Category::Persuadable);
        assert_eq!(classify_category(&[0.0], &s, 1.0).unwrap(), Category::SureThing);
        assert_eq!(classify_category(&[0.0], &s, -1.0).unwrap(), Category::LostCause);
        s.treatment = -1.0;
        assert_eq!(classify_category(&[0.0], &s, 1.0).unwrap(), Category::SleepingDog);
    }

    fn assignment_counts(rule: &AssignmentRule, xs: &[f64], seed: u64) -> Vec<u32> {
        xs.iter()
            .enumerate()
            .map(|(i, &x)| assign_treatment(&[x], rule, &mut rng::stream(seed, "test/assign", i as u64)).unwrap())
            .collect()
    }

    #[test]
    fn uniform_assignment_frequencies() {
        let xs = vec![0.0; 100_000];
        let t = assignment_counts(&AssignmentRule::uniform(), &xs, 5);
        let share = t.iter().filter(|&&t| t == 1).count() as f64 / t.len() as f64;
        assert!((share - 0.5).abs() <= 0.01, "{share}");
    }

    #[test]
    fn region_probability_is_respected() {
        let rule = AssignmentRule::threshold_split(0, 0.0, [0.5, 0.5], [0.2, 0.8]);
        rule.validate(1).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let t = assignment_counts(&rule, &xs, 6);
        let mut table = [[0.0f64; 2]; 2];
        for (x, t) in xs.iter().zip(&t) {
            table[usize::from(*x > 0.0)][*t as usize] += 1.0;
        }
        let above = table[1][1] / (table[1][0] + table[1][1]);
        assert!((above - 0.8).abs() <= 0.01, "{above}");
        // T depends on region: reject independence at p < 0.001 (df = 1)
        assert!(chi_square_2x2(table) > 10.828);
    }

    #[test]
    fn probabilities_must_be_valid() {
        let rule = AssignmentRule::threshold_split(0, 0.0, [0.5, 0.5], [1.2, -0.2]);
        assert!(rule.validate(1).is_err());
        let mut sel = DgpConfig::paper_default().selection;
        sel.obs.magnitude = sel.rct.magnitude;
        assert!(sel.validate(20).is_err());
    }

    #[test]
    fn cohort_sizes() {
        let mut cfg = DgpConfig::paper_default();
        cfg.n_rct = 1000;
        let g = generate(&cfg).unwrap();
        assert_eq!(g.biased_rct.data.n_rows(), 1000);
        assert_eq!(g.observational.data.n_rows(), 100_000);
        assert_eq!(g.ground_truth.data.n_rows(), 100_000);
        for d in [&g.biased_rct, &g.observational, &g.ground_truth] {
            let truth = d.data.true_uplift().unwrap();
            for i in (0..d.data.n_rows()).step_by(997) {
                let expect = true_uplift(d.data.row(i), &cfg.outcome).unwrap();
                assert!((truth[i] - expect).abs() < 1e-12);
            }
        }
        // ground-truth assignment is independent of the selection covariate
        let gt = &g.ground_truth.data;
        let mut table = [[0.0f64; 2]; 2];
        for i in 0..gt.n_rows() {
            table[usize::from(gt.value(i, 4) > 0.0)][gt.treatment(i) as usize] += 1.0;
        }
        assert!(chi_square_2x2(table) < 6.635, "chi2 {}", chi_square_2x2(table));
    }

    #[test]
    fn generation_is_deterministic_and_thread_independent() {
        let mut cfg = DgpConfig::paper_default();
        cfg.n_rct = 300;
        cfg.obs_multiplier = 3;
        cfg.ground_truth_multiplier = 2;
        let a = generate(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| generate(&cfg).unwrap());
        assert_eq!(a, b);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.observational.data.write_csv(&mut ca).unwrap();
        b.observational.data.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = DgpConfig::paper_default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(DgpConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(DgpConfig::from_toml_str("n_rct = 0").is_err());
    }

    #[test]
    fn default_bias_ordering() {
        use crate::fusion::smd_report;
        let g = generate(&DgpConfig::paper_default()).unwrap();
        let cols: Vec<usize> = vec![2, 4, 5, 13, 15, 16];
        let smd = |d: &Dataset| smd_report(d, &cols).unwrap().mean();
        let (obs, rct, gt) = (smd(&g.observational.data), smd(&g.biased_rct.data), smd(&g.ground_truth.data));
        assert!(obs > rct && rct > gt, "obs {obs} rct {rct} gt {gt}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn region_probabilities_sum_to_one(
            magnitude in 0.0f64..0.5,
            tilt in prop::collection::vec(-1.0f64..=1.0, 4),
        ) {
            let rule = AssignmentRule {
                columns: vec![0, 1],
                thresholds: vec![0.0, 0.0],
                magnitude,
                tilts: tilt.iter().map(|&a| vec![a, -a]).collect(),
            };
            prop_assert!(rule.validate(2).is_ok());
            for r in 0..rule.n_regions() {
                let p = rule.probabilities(r);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(p.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn uplift_in_open_interval(x in prop::collection::vec(-3.0f64..3.0, 20)) {
            let spec = DgpConfig::paper_default().outcome;
            let u = true_uplift(&x, &spec).unwrap();
            prop_assert!(u > -1.0 && u < 1.0);
            let p1 = true_outcome_prob(&x, 1, &spec).unwrap();
            let p0 = true_outcome_prob(&x, 0, &spec).unwrap();
            prop_assert!((u - (p1 - p0)).abs() < 1e-15);
        }
    }
}
