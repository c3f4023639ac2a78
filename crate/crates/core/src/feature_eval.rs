//! Feature-based policy evaluation from simulated episodes.
//!
//! The policy value is approximated as v(s) = phi(s) . theta. Each outer
//! iteration simulates fresh episodes under the current parameter, forms one
//! regression row per step with target c + alpha * sigma_hat, where
//! sigma_hat applies the risk mapping to the empirical measure of the
//! sampled successor batch, and refits theta by ridge-regularized least
//! squares. The normal-equation inverse is maintained by rank-one updates:
//!
//! (A + phi phi^T)^{-1} = A^{-1} - (A^{-1} phi)(A^{-1} phi)^T / (1 + phi^T A^{-1} phi),
//!
//! with the Gram matrix kept alongside so merges and audits can solve the
//! normal equations directly. A stochastic-approximation variant updates
//! theta per step with a decaying rate a / (b + t).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use thiserror::Error;

use crate::mdp::{FiniteMdp, StationaryPolicy};
use crate::risk::{empirical_risk, RiskMappingSpec};
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum FeatureEvalError {
    #[error("feature vector has {got} entries, expected {need}")]
    Dimension { need: usize, got: usize },
    #[error("invalid parameter: {reason}")]
    InvalidParams { reason: String },
    #[error("numerical breakdown: {detail}")]
    NumericalBreakdown { detail: String },
}

/// Ridge-regularized least squares accumulator over rows (phi, y).
///
/// Maintains the inverse of A = lambda I + sum phi phi^T by rank-one
/// updates and the Gram matrix A itself for merging and auditing.
#[derive(Debug, Clone)]
pub struct LsAccumulator {
    dim: usize,
    lambda: f64,
    count: u64,
    a_inv: DMatrix<f64>,
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl LsAccumulator {
    pub fn new(dim: usize, lambda: f64) -> Result<Self, FeatureEvalError> {
        if dim == 0 {
            return Err(FeatureEvalError::InvalidParams {
                reason: "feature dimension must be positive".into(),
            });
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(FeatureEvalError::InvalidParams {
                reason: format!("ridge weight must be positive and finite, got {lambda}"),
            });
        }
        Ok(Self {
            dim,
            lambda,
            count: 0,
            a_inv: DMatrix::identity(dim, dim) / lambda,
            gram: DMatrix::identity(dim, dim) * lambda,
            rhs: DVector::zeros(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Adds one regression row by a rank-one inverse update. The
    /// denominator 1 + phi^T A^{-1} phi stays above 1 for a positive
    /// definite inverse, so a tiny or non-finite value signals breakdown.
    pub fn update(&mut self, phi: &[f64], target: f64) -> Result<(), FeatureEvalError> {
        if phi.len() != self.dim {
            return Err(FeatureEvalError::Dimension { need: self.dim, got: phi.len() });
        }
        let phi_v = DVector::from_column_slice(phi);
        let a_phi = &self.a_inv * &phi_v;
        let denom = 1.0 + phi_v.dot(&a_phi);
        if !denom.is_finite() || denom <= 1e-12 {
            return Err(FeatureEvalError::NumericalBreakdown {
                detail: format!("rank-one update denominator {denom} after {} rows", self.count),
            });
        }
        self.a_inv -= &a_phi * a_phi.transpose() / denom;
        // Symmetrize to keep roundoff from accumulating asymmetry.
        let sym = (&self.a_inv + self.a_inv.transpose()) * 0.5;
        self.a_inv = sym;
        self.gram += &phi_v * phi_v.transpose();
        self.rhs += phi_v * target;
        self.count += 1;
        Ok(())
    }

    /// theta from the maintained inverse; the zero vector before any rows.
    pub fn solve(&self) -> Vec<f64> {
        (&self.a_inv * &self.rhs).iter().copied().collect()
    }

    /// theta by solving the normal equations from the Gram matrix,
    /// independent of the rank-one update path.
    pub fn direct_solve(&self) -> Result<Vec<f64>, FeatureEvalError> {
        let chol = self.gram.clone().cholesky().ok_or_else(|| {
            FeatureEvalError::NumericalBreakdown {
                detail: "Gram matrix is not positive definite".into(),
            }
        })?;
        Ok(chol.solve(&self.rhs).iter().copied().collect())
    }

    /// Frobenius distance between the maintained inverse and a fresh
    /// inversion of the Gram matrix.
    pub fn audit_frobenius(&self) -> Result<f64, FeatureEvalError> {
        let direct = self.gram.clone().try_inverse().ok_or_else(|| {
            FeatureEvalError::NumericalBreakdown { detail: "Gram matrix is singular".into() }
        })?;
        Ok((&self.a_inv - direct).norm())
    }

    /// Pools another accumulator built with the same dimension and ridge
    /// weight, as if its rows had been added here; the inverse is recomputed
    /// from the pooled Gram matrix.
    pub fn merge(&mut self, other: &LsAccumulator) -> Result<(), FeatureEvalError> {
        if other.dim != self.dim {
            return Err(FeatureEvalError::Dimension { need: self.dim, got: other.dim });
        }
        if other.lambda != self.lambda {
            return Err(FeatureEvalError::InvalidParams {
                reason: format!("ridge weights differ: {} vs {}", self.lambda, other.lambda),
            });
        }
        // Both Gram matrices carry the lambda I term; keep it once.
        self.gram += &other.gram;
        self.gram -= DMatrix::identity(self.dim, self.dim) * self.lambda;
        self.rhs += &other.rhs;
        self.count += other.count;
        self.a_inv = self.gram.clone().try_inverse().ok_or_else(|| {
            FeatureEvalError::NumericalBreakdown {
                detail: "pooled Gram matrix is singular".into(),
            }
        })?;
        Ok(())
    }
}

/// Decaying step size a / (b + t) for stochastic approximation.
#[derive(Debug, Clone, Copy)]
pub struct StepSchedule {
    pub a: f64,
    pub b: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { a: 1.0, b: 10.0 }
    }
}

impl StepSchedule {
    pub fn rate(&self, t: u64) -> f64 {
        self.a / (self.b + t as f64)
    }
}

/// Parameter vector under per-step temporal-difference updates.
#[derive(Debug, Clone)]
pub struct TdState {
    theta: Vec<f64>,
    steps: u64,
    schedule: StepSchedule,
}

impl TdState {
    pub fn new(dim: usize, schedule: StepSchedule) -> Self {
        Self { theta: vec![0.0; dim], steps: 0, schedule }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update theta <- theta - gamma_t * phi * d with the residual
    /// d = phi . theta - target; returns d.
    pub fn step(&mut self, phi: &[f64], target: f64) -> Result<f64, FeatureEvalError> {
        if phi.len() != self.theta.len() {
            return Err(FeatureEvalError::Dimension { need: self.theta.len(), got: phi.len() });
        }
        let d: f64 = phi.iter().zip(&self.theta).map(|(p, t)| p * t).sum::<f64>() - target;
        if !d.is_finite() {
            return Err(FeatureEvalError::NumericalBreakdown {
                detail: format!("residual {d} at step {}", self.steps),
            });
        }
        let rate = self.schedule.rate(self.steps);
        for (t, p) in self.theta.iter_mut().zip(phi) {
            *t -= rate * p * d;
        }
        self.steps += 1;
        Ok(d)
    }
}

/// One simulated transition of a process: the stage cost, the discount to
/// apply to the successor value, and the batch of sampled successors.
#[derive(Debug, Clone)]
pub struct ProcessStep<S> {
    pub cost: f64,
    pub discount: f64,
    pub successors: Vec<S>,
}

/// A simulatable process with a feature map, as seen by an evaluator: the
/// policy is already embedded in the dynamics.
pub trait SampledProcess {
    type State: Clone;

    fn feature_dim(&self) -> usize;

    /// Start state of the episode with the given index. The index lets
    /// processes schedule start-state coverage deterministically.
    fn sample_start(&self, episode_index: u64, rng: &mut dyn RngCore) -> Self::State;

    fn is_terminal(&self, state: &Self::State) -> bool;

    /// Simulates one step from a non-terminal state, drawing `batch`
    /// i.i.d. successors.
    fn step(&self, state: &Self::State, batch: usize, rng: &mut dyn RngCore) -> ProcessStep<Self::State>;

    /// Writes the feature vector of a state into `out` (length
    /// `feature_dim`). Terminal states must map to the zero vector so their
    /// model value vanishes.
    fn features(&self, state: &Self::State, out: &mut [f64]);
}

/// phi(state) . theta, reusing `buf` for the feature vector.
pub fn model_value<P: SampledProcess + ?Sized>(
    process: &P,
    state: &P::State,
    theta: &[f64],
    buf: &mut Vec<f64>,
) -> f64 {
    buf.resize(process.feature_dim(), 0.0);
    process.features(state, buf);
    buf.iter().zip(theta).map(|(a, b)| a * b).sum()
}

/// One regression row: features of the visited state and the sampled
/// one-step target.
#[derive(Debug, Clone)]
pub struct LsRow {
    pub phi: Vec<f64>,
    pub target: f64,
}

/// Simulates one episode and emits one row per step. The target of a step
/// is c + alpha * sigma_hat, with sigma_hat the risk mapping applied to the
/// model values of the successor batch under `theta`. The trajectory
/// continues in a uniformly chosen batch element, which preserves the
/// transition law.
pub fn collect_episode_rows<P: SampledProcess>(
    process: &P,
    spec: &RiskMappingSpec,
    theta: &[f64],
    episode_index: u64,
    max_steps: usize,
    rng: &mut dyn RngCore,
) -> Vec<LsRow> {
    let dim = process.feature_dim();
    let mut rows = Vec::new();
    let mut state = process.sample_start(episode_index, rng);
    let mut buf = Vec::with_capacity(dim);
    for _ in 0..max_steps {
        if process.is_terminal(&state) {
            break;
        }
        let step = process.step(&state, spec.batch_size(), rng);
        let values: Vec<f64> = step
            .successors
            .iter()
            .map(|s| model_value(process, s, theta, &mut buf))
            .collect();
        let sigma = empirical_risk(spec, &values);
        let mut phi = vec![0.0; dim];
        process.features(&state, &mut phi);
        rows.push(LsRow { phi, target: step.cost + step.discount * sigma });
        let k = rng.gen_range(0..step.successors.len());
        state = step.successors[k].clone();
    }
    rows
}

/// Ridge weight selection for the least-squares fit.
#[derive(Debug, Clone, Copy)]
pub enum LambdaRule {
    Fixed(f64),
    /// factor * mean squared feature norm, measured on the first
    /// iteration's rows and frozen afterwards.
    ScaledByFeatureNorm(f64),
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::ScaledByFeatureNorm(1e-6)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LsParams {
    /// Fresh episodes simulated per outer iteration.
    pub episodes_per_iteration: usize,
    /// Outer refitting iterations.
    pub iterations: usize,
    /// Per-episode step cap.
    pub max_steps: usize,
    pub lambda: LambdaRule,
}

impl Default for LsParams {
    fn default() -> Self {
        Self {
            episodes_per_iteration: 80,
            iterations: 50,
            max_steps: 400,
            lambda: LambdaRule::default(),
        }
    }
}

/// One outer iteration's outcome: the refit parameter, the mean squared
/// fitted residual over that iteration's rows, and the parameter step norm.
#[derive(Debug, Clone)]
pub struct LsIterate {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct LsOutput {
    pub theta: Vec<f64>,
    pub iterates: Vec<LsIterate>,
    /// The ridge weight actually used.
    pub lambda: f64,
}

/// Iterated least-squares policy evaluation. Starting from theta = 0, each
/// outer iteration simulates fresh episodes (parallel, with per-episode
/// seeds derived from `master_seed`, so results do not depend on thread
/// scheduling) and refits theta on their rows.
pub fn evaluate_policy_ls<P: SampledProcess + Sync>(
    process: &P,
    spec: &RiskMappingSpec,
    params: &LsParams,
    master_seed: u64,
) -> Result<LsOutput, FeatureEvalError> {
    evaluate_policy_ls_pooled(std::slice::from_ref(process), spec, params, master_seed)
}

/// Pooled variant of [`evaluate_policy_ls`]: one shared model fitted to
/// episodes simulated on every process. Each outer iteration draws
/// `episodes_per_iteration` episodes per process and refits theta on the
/// union of their rows, so the fit generalizes across the pooled tasks
/// instead of chasing one task's geometry.
pub fn evaluate_policy_ls_pooled<P: SampledProcess + Sync>(
    processes: &[P],
    spec: &RiskMappingSpec,
    params: &LsParams,
    master_seed: u64,
) -> Result<LsOutput, FeatureEvalError> {
    if params.iterations == 0 || params.episodes_per_iteration == 0 {
        return Err(FeatureEvalError::InvalidParams {
            reason: "need at least one iteration and one episode per iteration".into(),
        });
    }
    let Some(first) = processes.first() else {
        return Err(FeatureEvalError::InvalidParams {
            reason: "need at least one process to pool".into(),
        });
    };
    let dim = first.feature_dim();
    if processes.iter().any(|p| p.feature_dim() != dim) {
        return Err(FeatureEvalError::InvalidParams {
            reason: "pooled processes must share one feature dimension".into(),
        });
    }
    let mut theta = vec![0.0; dim];
    let mut lambda = match params.lambda {
        LambdaRule::Fixed(l) => Some(l),
        LambdaRule::ScaledByFeatureNorm(_) => None,
    };
    let mut iterates = Vec::with_capacity(params.iterations);
    let m = params.episodes_per_iteration;
    for l in 0..params.iterations {
        let theta_ref = &theta;
        let episodes: Vec<Vec<LsRow>> = (0..processes.len() * m)
            .into_par_iter()
            .map(|idx| {
                let (j, e) = (idx / m, idx % m);
                let mut rng = stream_rng(master_seed, &[l as u64, j as u64, e as u64]);
                collect_episode_rows(
                    &processes[j],
                    spec,
                    theta_ref,
                    (l * m + e) as u64,
                    params.max_steps,
                    &mut rng,
                )
            })
            .collect();
        let lambda_now = *lambda.get_or_insert_with(|| {
            let factor = match params.lambda {
                LambdaRule::ScaledByFeatureNorm(f) => f,
                LambdaRule::Fixed(_) => unreachable!("fixed lambda is set up front"),
            };
            let mut sum = 0.0;
            let mut n = 0u64;
            for row in episodes.iter().flatten() {
                sum += row.phi.iter().map(|x| x * x).sum::<f64>();
                n += 1;
            }
            // Empty first iterations fall back to the bare factor.
            if n == 0 { factor } else { factor * (sum / n as f64) }
        });
        let mut acc = LsAccumulator::new(dim, lambda_now)?;
        for row in episodes.iter().flatten() {
            acc.update(&row.phi, row.target)?;
        }
        let new_theta = acc.solve();
        let step_norm = new_theta
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let mut sq_sum = 0.0;
        let mut rows = 0u64;
        for row in episodes.iter().flatten() {
            let fit: f64 = row.phi.iter().zip(&new_theta).map(|(p, t)| p * t).sum();
            sq_sum += (fit - row.target) * (fit - row.target);
            rows += 1;
        }
        let objective = if rows == 0 { 0.0 } else { sq_sum / rows as f64 };
        theta = new_theta;
        iterates.push(LsIterate { theta: theta.clone(), objective, step_norm });
    }
    Ok(LsOutput { theta, iterates, lambda: lambda.expect("set on first iteration") })
}

#[derive(Debug, Clone)]
pub struct TdOutput {
    pub theta: Vec<f64>,
    pub steps: u64,
}

/// Per-step temporal-difference evaluation over `total_steps` simulated
/// steps, restarting episodes at terminal states or after
/// `max_steps_per_episode` steps.
pub fn evaluate_policy_td<P: SampledProcess>(
    process: &P,
    spec: &RiskMappingSpec,
    schedule: StepSchedule,
    total_steps: u64,
    max_steps_per_episode: usize,
    master_seed: u64,
) -> Result<TdOutput, FeatureEvalError> {
    let dim = process.feature_dim();
    let mut td = TdState::new(dim, schedule);
    let mut rng = stream_rng(master_seed, &[]);
    let mut episode = 0u64;
    let mut phi = vec![0.0; dim];
    let mut buf = Vec::with_capacity(dim);
    while td.steps() < total_steps {
        let mut state = process.sample_start(episode, &mut rng);
        episode += 1;
        let mut in_episode = 0usize;
        while !process.is_terminal(&state)
            && td.steps() < total_steps
            && in_episode < max_steps_per_episode
        {
            let step = process.step(&state, spec.batch_size(), &mut rng);
            let values: Vec<f64> = step
                .successors
                .iter()
                .map(|s| model_value(process, s, td.theta(), &mut buf))
                .collect();
            let sigma = empirical_risk(spec, &values);
            process.features(&state, &mut phi);
            td.step(&phi, step.cost + step.discount * sigma)?;
            let k = rng.gen_range(0..step.successors.len());
            state = step.successors[k].clone();
            in_episode += 1;
        }
    }
    Ok(TdOutput { theta: td.theta().to_vec(), steps: td.steps() })
}

/// A finite MDP under a fixed stationary policy, exposed as a sampled
/// process with a user-supplied feature table.
#[derive(Debug, Clone)]
pub struct TabularProcess {
    mdp: FiniteMdp,
    policy: StationaryPolicy,
    features: Vec<Vec<f64>>,
    dim: usize,
}

impl TabularProcess {
    pub fn new(
        mdp: FiniteMdp,
        policy: StationaryPolicy,
        features: Vec<Vec<f64>>,
    ) -> Result<Self, FeatureEvalError> {
        policy
            .validate_for(&mdp)
            .map_err(|e| FeatureEvalError::InvalidParams { reason: e.to_string() })?;
        if features.len() != mdp.n_states() {
            return Err(FeatureEvalError::InvalidParams {
                reason: format!(
                    "feature table has {} rows, MDP has {} states",
                    features.len(),
                    mdp.n_states()
                ),
            });
        }
        let dim = features.first().map_or(0, Vec::len);
        if dim == 0 || features.iter().any(|row| row.len() != dim) {
            return Err(FeatureEvalError::InvalidParams {
                reason: "feature rows must be nonempty and equally sized".into(),
            });
        }
        Ok(Self { mdp, policy, features, dim })
    }

    /// One indicator feature per state, so the fit is exact in expectation.
    pub fn one_hot(mdp: FiniteMdp, policy: StationaryPolicy) -> Result<Self, FeatureEvalError> {
        let n = mdp.n_states();
        let features = (0..n)
            .map(|i| {
                let mut row = vec![0.0; n];
                row[i] = 1.0;
                row
            })
            .collect();
        Self::new(mdp, policy, features)
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }
}

impl SampledProcess for TabularProcess {
    type State = usize;

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn sample_start(&self, _episode_index: u64, rng: &mut dyn RngCore) -> usize {
        self.mdp.restart().sample(rng)
    }

    fn is_terminal(&self, state: &usize) -> bool {
        self.mdp.is_terminal(*state)
    }

    fn step(&self, state: &usize, batch: usize, rng: &mut dyn RngCore) -> ProcessStep<usize> {
        let action = self.policy.action(*state);
        let row = self.mdp.transition(*state, action).expect("validated policy");
        let successors = (0..batch.max(1)).map(|_| row.sample(rng)).collect();
        ProcessStep {
            cost: self.mdp.cost(*state, action).expect("validated policy"),
            discount: self.mdp.discount_of(*state, action).expect("validated policy"),
            successors,
        }
    }

    fn features(&self, state: &usize, out: &mut [f64]) {
        out.copy_from_slice(&self.features[*state]);
    }
}
