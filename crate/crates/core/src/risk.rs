//! Coherent risk mappings on finite discrete distributions and their
//! mini-batch compositions.
//!
//! A risk mapping `sigma(p, v)` aggregates a value vector `v` under a
//! probability vector `p`. The base mappings implemented here are coherent:
//! convex in `v`, monotone, translation-equivariant, and positively
//! homogeneous. They are also law-invariant and depend only on values inside
//! the support of `p`.
//!
//! * Expectation: `sum_j p_j v_j`.
//! * Mean semideviation with weight `c` in [0, 1]:
//!   `mean + c * sum_j p_j * max(v_j - mean, 0)`.
//! * Average value-at-risk at level `alpha` in (0, 1]:
//!   `min_eta { eta + (1/alpha) * sum_j p_j * max(v_j - eta, 0) }`;
//!   the minimum is attained at one of the support values.
//! * Worst case: `max { v_j : p_j > 0 }`.
//!
//! The mini-batch composition with batch size `N >= 2` draws `N` independent
//! outcomes from `p`, applies the base mapping to the uniform empirical
//! measure of the draws, and averages over all draws:
//!
//! ```text
//! sigma_N(p, v) = E [ sigma(P_N, v) ],   P_N = (1/N) * sum_m delta_{j_m}
//! ```
//!
//! Mini-batching preserves coherence and softens the base mapping toward the
//! expectation; `batch_size 1` means the base mapping applied directly to
//! `p`. A mixture weight `w` in [0, 1] further blends the result with the
//! plain expectation: `(1 - w) * E_p[v] + w * sigma_N(p, v)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard cap on the number of tuples enumerated for an exact mini-batch
/// evaluation (`|support|^batch_size`).
pub const ENUMERATION_CAP: u64 = 1_000_000;

/// Errors from distribution construction and risk evaluation.
#[derive(Debug, Error)]
pub enum RiskError {
    #[error("invalid probability vector: {reason}")]
    InvalidDistribution { reason: String },
    #[error("invalid risk mapping spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("value vector has length {got}, distribution is over {need} outcomes")]
    DimensionMismatch { need: usize, got: usize },
    #[error("exact mini-batch evaluation needs {needed} tuples, cap is {cap}")]
    EnumerationCapExceeded { needed: u128, cap: u64 },
    #[error("distortion coefficient is only defined for expectation and worst-case bases, got {base:?}")]
    UnsupportedBase { base: BaseRisk },
}

/// A probability distribution over outcomes `0..len`, stored sparsely.
///
/// Atoms carry strictly positive probability and are kept in ascending
/// outcome order; probabilities sum to one within `1e-12`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    len: usize,
    atoms: Vec<(usize, f64)>,
}

impl DiscreteDistribution {
    /// Builds from a dense probability vector. Zero entries are dropped.
    pub fn from_dense(probs: &[f64]) -> Result<Self, RiskError> {
        let atoms = probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p != 0.0)
            .map(|(j, &p)| (j, p))
            .collect();
        Self::from_atoms(probs.len(), atoms)
    }

    /// Builds from sparse `(outcome, probability)` pairs over `0..len`.
    /// Duplicate outcomes are merged by summing their probabilities.
    pub fn from_atoms(len: usize, mut atoms: Vec<(usize, f64)>) -> Result<Self, RiskError> {
        let invalid = |reason: String| RiskError::InvalidDistribution { reason };
        atoms.sort_by_key(|&(j, _)| j);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(atoms.len());
        for (j, p) in atoms {
            if j >= len {
                return Err(invalid(format!("outcome {j} out of range for length {len}")));
            }
            if !p.is_finite() || p < 0.0 {
                return Err(invalid(format!("probability {p} at outcome {j}")));
            }
            match merged.last_mut() {
                Some((last, acc)) if *last == j => *acc += p,
                _ => merged.push((j, p)),
            }
        }
        merged.retain(|&(_, p)| p > 0.0);
        if merged.is_empty() {
            return Err(invalid("empty support".to_string()));
        }
        let sum: f64 = merged.iter().map(|&(_, p)| p).sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { len, atoms: merged })
    }

    /// Builds by normalizing nonnegative weights (at least one positive).
    pub fn from_weights(weights: &[f64]) -> Result<Self, RiskError> {
        let invalid = |reason: String| RiskError::InvalidDistribution { reason };
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("weights must be finite and nonnegative".to_string()));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(invalid("weights sum to zero".to_string()));
        }
        let atoms = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(j, &w)| (j, w / sum))
            .collect();
        // Renormalization puts the sum within one ulp of 1; construction
        // re-checks the 1e-12 budget.
        Self::from_atoms(weights.len(), atoms)
    }

    /// The unit mass on a single outcome.
    pub fn point_mass(len: usize, outcome: usize) -> Result<Self, RiskError> {
        Self::from_atoms(len, vec![(outcome, 1.0)])
    }

    /// The uniform distribution over `0..len`.
    pub fn uniform(len: usize) -> Result<Self, RiskError> {
        let w = vec![1.0; len];
        Self::from_weights(&w)
    }

    /// Number of outcomes (dense length), not the support size.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sparse `(outcome, probability)` atoms in ascending outcome order;
    /// every probability is strictly positive.
    pub fn atoms(&self) -> &[(usize, f64)] {
        &self.atoms
    }

    /// Outcomes with strictly positive probability, ascending.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.atoms.iter().map(|&(j, _)| j)
    }

    pub fn support_size(&self) -> usize {
        self.atoms.len()
    }

    /// Probability of one outcome (zero off the support).
    pub fn prob(&self, outcome: usize) -> f64 {
        match self.atoms.binary_search_by_key(&outcome, |&(j, _)| j) {
            Ok(k) => self.atoms[k].1,
            Err(_) => 0.0,
        }
    }

    /// Dense probability vector.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for &(j, p) in &self.atoms {
            out[j] = p;
        }
        out
    }

    /// Expectation of `values` under the distribution.
    pub fn expectation(&self, values: &[f64]) -> f64 {
        self.atoms.iter().map(|&(j, p)| p * values[j]).sum()
    }

    /// One draw by inverse-CDF scan over the atoms.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(j, p) in &self.atoms {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // Float droop in the running sum; the support is nonempty.
        self.atoms[self.atoms.len() - 1].0
    }
}

/// A coherent base risk mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseRisk {
    Expectation,
    /// Mean plus `c` times the upper semideviation, `c` in [0, 1].
    MeanSemideviation { c: f64 },
    /// Average value-at-risk at tail level `level` in (0, 1]; `level = 1`
    /// reduces to the expectation, `level -> 0` approaches the worst case.
    AvgValueAtRisk { level: f64 },
    /// Maximum value on the support.
    WorstCase,
}

impl BaseRisk {
    fn validate(&self) -> Result<(), RiskError> {
        let invalid = |reason: String| RiskError::InvalidSpec { reason };
        match *self {
            BaseRisk::Expectation | BaseRisk::WorstCase => Ok(()),
            BaseRisk::MeanSemideviation { c } => {
                if (0.0..=1.0).contains(&c) {
                    Ok(())
                } else {
                    Err(invalid(format!("semideviation weight must be in [0, 1], got {c}")))
                }
            }
            BaseRisk::AvgValueAtRisk { level } => {
                if level > 0.0 && level <= 1.0 {
                    Ok(())
                } else {
                    Err(invalid(format!("tail level must be in (0, 1], got {level}")))
                }
            }
        }
    }
}

/// A complete risk mapping: base, mini-batch size, and expectation mixture.
///
/// The JSON form is flat, for example
/// `{"base": "worst_case", "batch_size": 2, "mixture_weight": 1.0}`;
/// parameterized bases add their parameter
/// (`{"base": "avar", "level": 0.25, ...}`,
/// `{"base": "mean_semideviation", "c": 0.5, ...}`). Unknown keys are
/// rejected. `batch_size` defaults to 1 and `mixture_weight` to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecWire", into = "SpecWire")]
pub struct RiskMappingSpec {
    base: BaseRisk,
    batch_size: usize,
    mixture_weight: f64,
}

impl RiskMappingSpec {
    pub fn new(base: BaseRisk, batch_size: usize, mixture_weight: f64) -> Result<Self, RiskError> {
        base.validate()?;
        if batch_size == 0 {
            return Err(RiskError::InvalidSpec {
                reason: "batch_size must be at least 1".to_string(),
            });
        }
        if !(0.0..=1.0).contains(&mixture_weight) {
            return Err(RiskError::InvalidSpec {
                reason: format!("mixture_weight must be in [0, 1], got {mixture_weight}"),
            });
        }
        Ok(Self { base, batch_size, mixture_weight })
    }

    /// The risk-neutral mapping: plain expectation, no batching.
    pub fn expectation() -> Self {
        Self { base: BaseRisk::Expectation, batch_size: 1, mixture_weight: 1.0 }
    }

    /// Mini-batch worst case with the given batch size.
    pub fn worst_case_batch(batch_size: usize) -> Result<Self, RiskError> {
        Self::new(BaseRisk::WorstCase, batch_size, 1.0)
    }

    pub fn base(&self) -> BaseRisk {
        self.base
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn mixture_weight(&self) -> f64 {
        self.mixture_weight
    }

    /// Short machine-friendly tag, used in file names and reports.
    pub fn label(&self) -> String {
        let base = match self.base {
            BaseRisk::Expectation => "expectation".to_string(),
            BaseRisk::MeanSemideviation { c } => format!("msd{c}"),
            BaseRisk::AvgValueAtRisk { level } => format!("avar{level}"),
            BaseRisk::WorstCase => "worst_case".to_string(),
        };
        let mut label = format!("{base}_n{}", self.batch_size);
        if self.mixture_weight != 1.0 {
            label.push_str(&format!("_mix{}", self.mixture_weight));
        }
        label
    }
}

/// Flat wire form of [`RiskMappingSpec`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecWire {
    base: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    level: Option<f64>,
    #[serde(default = "default_batch_size")]
    batch_size: usize,
    #[serde(default = "default_mixture_weight")]
    mixture_weight: f64,
}

fn default_batch_size() -> usize {
    1
}

fn default_mixture_weight() -> f64 {
    1.0
}

impl TryFrom<SpecWire> for RiskMappingSpec {
    type Error = RiskError;

    fn try_from(w: SpecWire) -> Result<Self, RiskError> {
        let invalid = |reason: String| RiskError::InvalidSpec { reason };
        let base = match w.base.as_str() {
            "expectation" => BaseRisk::Expectation,
            "mean_semideviation" => BaseRisk::MeanSemideviation {
                c: w.c.ok_or_else(|| invalid("mean_semideviation needs field \"c\"".into()))?,
            },
            "avar" => BaseRisk::AvgValueAtRisk {
                level: w.level.ok_or_else(|| invalid("avar needs field \"level\"".into()))?,
            },
            "worst_case" => BaseRisk::WorstCase,
            other => return Err(invalid(format!("unknown base \"{other}\""))),
        };
        let stray_c = w.c.is_some() && !matches!(base, BaseRisk::MeanSemideviation { .. });
        let stray_level = w.level.is_some() && !matches!(base, BaseRisk::AvgValueAtRisk { .. });
        if stray_c || stray_level {
            return Err(invalid(format!("parameter not accepted by base \"{}\"", w.base)));
        }
        RiskMappingSpec::new(base, w.batch_size, w.mixture_weight)
    }
}

impl From<RiskMappingSpec> for SpecWire {
    fn from(s: RiskMappingSpec) -> SpecWire {
        let (base, c, level) = match s.base {
            BaseRisk::Expectation => ("expectation", None, None),
            BaseRisk::MeanSemideviation { c } => ("mean_semideviation", Some(c), None),
            BaseRisk::AvgValueAtRisk { level } => ("avar", None, Some(level)),
            BaseRisk::WorstCase => ("worst_case", None, None),
        };
        SpecWire {
            base: base.to_string(),
            c,
            level,
            batch_size: s.batch_size,
            mixture_weight: s.mixture_weight,
        }
    }
}

fn check_dimensions(dist: &DiscreteDistribution, values: &[f64]) -> Result<(), RiskError> {
    if values.len() != dist.len() {
        return Err(RiskError::DimensionMismatch { need: dist.len(), got: values.len() });
    }
    debug_assert!(
        dist.support().all(|j| values[j].is_finite()),
        "values must be finite on the support"
    );
    Ok(())
}

/// Base mapping applied directly to `(dist, values)`.
fn base_on_distribution(base: BaseRisk, dist: &DiscreteDistribution, values: &[f64]) -> f64 {
    match base {
        BaseRisk::Expectation => dist.expectation(values),
        BaseRisk::MeanSemideviation { c } => {
            let mean = dist.expectation(values);
            let semidev: f64 =
                dist.atoms().iter().map(|&(j, p)| p * (values[j] - mean).max(0.0)).sum();
            mean + c * semidev
        }
        BaseRisk::AvgValueAtRisk { level } => {
            // The objective eta + E[(v - eta)+]/level is piecewise linear in
            // eta with breakpoints at the support values, so scanning those
            // candidates is exact.
            dist.atoms()
                .iter()
                .map(|&(k, _)| {
                    let eta = values[k];
                    let tail: f64 =
                        dist.atoms().iter().map(|&(j, p)| p * (values[j] - eta).max(0.0)).sum();
                    eta + tail / level
                })
                .fold(f64::INFINITY, f64::min)
        }
        BaseRisk::WorstCase => {
            dist.atoms().iter().map(|&(j, _)| values[j]).fold(f64::NEG_INFINITY, f64::max)
        }
    }
}

/// Base mapping applied to the uniform empirical measure over `sample`.
fn base_on_sample(base: BaseRisk, sample: &[f64]) -> f64 {
    debug_assert!(!sample.is_empty());
    let n = sample.len() as f64;
    match base {
        BaseRisk::Expectation => sample.iter().sum::<f64>() / n,
        BaseRisk::MeanSemideviation { c } => {
            let mean = sample.iter().sum::<f64>() / n;
            let semidev = sample.iter().map(|&v| (v - mean).max(0.0)).sum::<f64>() / n;
            mean + c * semidev
        }
        BaseRisk::AvgValueAtRisk { level } => sample
            .iter()
            .map(|&eta| {
                let tail = sample.iter().map(|&v| (v - eta).max(0.0)).sum::<f64>() / n;
                eta + tail / level
            })
            .fold(f64::INFINITY, f64::min),
        BaseRisk::WorstCase => sample.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// The spec applied to the uniform empirical measure over sampled values:
/// the base on the sample, blended with the sample mean by the mixture
/// weight. This is the per-draw estimator whose expectation over draws is
/// the exact mini-batch value.
pub fn empirical_risk(spec: &RiskMappingSpec, sample_values: &[f64]) -> f64 {
    let w = spec.mixture_weight();
    let batch = base_on_sample(spec.base(), sample_values);
    if w == 1.0 {
        batch
    } else {
        let mean = sample_values.iter().sum::<f64>() / sample_values.len() as f64;
        (1.0 - w) * mean + w * batch
    }
}

/// Exact mini-batch evaluation by enumerating all `|support|^n` draw tuples
/// with product weights. Errors once the tuple count exceeds `cap`.
pub fn minibatch_enumerated(
    base: BaseRisk,
    n: usize,
    dist: &DiscreteDistribution,
    values: &[f64],
    cap: u64,
) -> Result<f64, RiskError> {
    check_dimensions(dist, values)?;
    let atoms = dist.atoms();
    let s = atoms.len() as u128;
    let needed = s.checked_pow(n as u32).unwrap_or(u128::MAX);
    if needed > cap as u128 {
        return Err(RiskError::EnumerationCapExceeded { needed, cap });
    }
    let mut digits = vec![0usize; n];
    let mut sample = vec![0.0f64; n];
    let mut total = 0.0;
    loop {
        let mut weight = 1.0;
        for (m, &d) in digits.iter().enumerate() {
            let (j, p) = atoms[d];
            weight *= p;
            sample[m] = values[j];
        }
        total += weight * base_on_sample(base, &sample);
        // Odometer increment over the support digits.
        let mut m = 0;
        loop {
            if m == n {
                return Ok(total);
            }
            digits[m] += 1;
            if digits[m] < atoms.len() {
                break;
            }
            digits[m] = 0;
            m += 1;
        }
    }
}

/// Exact mini-batch worst case through order statistics: the batch maximum
/// of `n` draws has distribution function `F(b)^n`, so pooling equal values
/// into atoms sorted ascending gives
/// `sum_k v_k * (F_k^n - F_{k-1}^n)`.
pub fn minibatch_worst_case_exact(
    n: usize,
    dist: &DiscreteDistribution,
    values: &[f64],
) -> Result<f64, RiskError> {
    check_dimensions(dist, values)?;
    let mut pairs: Vec<(f64, f64)> =
        dist.atoms().iter().map(|&(j, p)| (values[j], p)).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite values on support"));
    let mut pooled: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
    for (v, p) in pairs {
        match pooled.last_mut() {
            Some((last, acc)) if *last == v => *acc += p,
            _ => pooled.push((v, p)),
        }
    }
    let mut total = 0.0;
    let mut cdf_prev = 0.0f64;
    let mut cdf = 0.0f64;
    for (v, p) in pooled {
        cdf += p;
        total += v * (cdf.powi(n as i32) - cdf_prev.powi(n as i32));
        cdf_prev = cdf;
    }
    Ok(total)
}

fn batch_term(
    spec: &RiskMappingSpec,
    dist: &DiscreteDistribution,
    values: &[f64],
) -> Result<f64, RiskError> {
    if spec.batch_size() == 1 {
        return Ok(base_on_distribution(spec.base(), dist, values));
    }
    match spec.base() {
        // A mini-batch of the expectation is the expectation, by linearity.
        BaseRisk::Expectation => Ok(dist.expectation(values)),
        BaseRisk::WorstCase => minibatch_worst_case_exact(spec.batch_size(), dist, values),
        base => minibatch_enumerated(base, spec.batch_size(), dist, values, ENUMERATION_CAP),
    }
}

/// Exact value of the risk mapping on `(dist, values)`.
///
/// `batch_size == 1` applies the base mapping directly; larger batches are
/// evaluated exactly (closed form for the worst case, tuple enumeration
/// otherwise). The mixture weight blends with the plain expectation.
pub fn evaluate_risk(
    spec: &RiskMappingSpec,
    dist: &DiscreteDistribution,
    values: &[f64],
) -> Result<f64, RiskError> {
    check_dimensions(dist, values)?;
    let batch = batch_term(spec, dist, values)?;
    let w = spec.mixture_weight();
    if w == 1.0 {
        Ok(batch)
    } else {
        Ok((1.0 - w) * dist.expectation(values) + w * batch)
    }
}

/// One sampled estimate: draws `batch_size` outcomes i.i.d. from `dist`,
/// applies the spec to their empirical measure, and returns the estimate
/// together with the drawn outcomes (in draw order).
///
/// For `batch_size >= 2`, or the expectation base at any batch size, the
/// estimate is unbiased for [`evaluate_risk`]. For a non-expectation base at
/// `batch_size 1` the single-draw estimate averages to the plain expectation
/// rather than the directly applied base.
pub fn sample_risk_estimate<R: Rng + ?Sized>(
    spec: &RiskMappingSpec,
    dist: &DiscreteDistribution,
    values: &[f64],
    rng: &mut R,
) -> Result<(f64, Vec<usize>), RiskError> {
    check_dimensions(dist, values)?;
    let n = spec.batch_size();
    let mut outcomes = Vec::with_capacity(n);
    let mut sample = Vec::with_capacity(n);
    for _ in 0..n {
        let j = dist.sample(rng);
        outcomes.push(j);
        sample.push(values[j]);
    }
    Ok((empirical_risk(spec, &sample), outcomes))
}

/// Distortion coefficient `kappa` of the mapping at `dist`: the largest
/// relative deviation `|mu_j - p_j| / p_j` over the mapping's dual set.
///
/// For the mini-batch worst case with batch `N`, the dual extreme points are
/// indexed by orderings of the support; placing atom `j` after cumulative
/// probability `C` gives it dual mass `mu_j = (C + p_j)^N - C^N`. That
/// deviation is maximized at `C = 0` or `C = 1 - p_j`, so
///
/// ```text
/// kappa = max_j max( 1 - p_j^(N-1), (1 - (1 - p_j)^N - p_j) / p_j )
/// ```
///
/// which for `N = 2` equals `max_j (1 - p_j)`. With `batch_size 1` the
/// worst-case dual set is the whole simplex on the support. The result is
/// scaled by the mixture weight; only expectation and worst-case bases are
/// supported.
pub fn distortion_coefficient(
    spec: &RiskMappingSpec,
    dist: &DiscreteDistribution,
) -> Result<f64, RiskError> {
    let kappa = match spec.base() {
        BaseRisk::Expectation => 0.0,
        BaseRisk::WorstCase => {
            let n = spec.batch_size();
            if n == 1 {
                if dist.support_size() <= 1 {
                    0.0
                } else {
                    let p_min =
                        dist.atoms().iter().map(|&(_, p)| p).fold(f64::INFINITY, f64::min);
                    ((1.0 - p_min) / p_min).max(1.0)
                }
            } else {
                dist.atoms()
                    .iter()
                    .map(|&(_, p)| {
                        let first = 1.0 - p.powi(n as i32 - 1);
                        let last = (1.0 - (1.0 - p).powi(n as i32) - p) / p;
                        first.max(last)
                    })
                    .fold(0.0, f64::max)
            }
        }
        base => return Err(RiskError::UnsupportedBase { base }),
    };
    Ok(spec.mixture_weight() * kappa)
}
