//! Exact dynamic-programming solvers for risk-averse MDPs.
//!
//! The stage value of an action replaces the usual expectation with a
//! coherent risk mapping: q(i, u) = c(i, u) + alpha(i, u) * sigma(P(i, u), v).
//! Because sigma is monotone and translation equivariant, the policy and
//! optimality operators contract in the sup norm with modulus alpha, so
//! value iteration from v = 0 converges geometrically. A second, coarser
//! modulus alpha * sqrt(1 + kappa) based on the mapping's distortion
//! coefficient kappa is reported for monitoring; solving proceeds even when
//! it reaches 1, and a run whose residuals stop decreasing is reported as
//! `NoContraction` rather than looping forever.

use thiserror::Error;

use crate::mdp::{ActionSpec, FiniteMdp, MdpError, StationaryPolicy};
use crate::risk::{distortion_coefficient, evaluate_risk, RiskError, RiskMappingSpec};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(
        "residuals stopped decreasing for {window} consecutive sweeps \
         (iteration {iteration}, residual {residual})"
    )]
    NoContraction { window: usize, iteration: usize, residual: f64 },
}

/// Iteration controls for the fixed-point solvers.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iters: 100_000 }
    }
}

/// Outcome summary of a fixed-point solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    /// Largest observed ratio of consecutive sup-norm residuals.
    pub contraction_estimate: Option<f64>,
    /// alpha_max * sqrt(1 + kappa_max) over all state-action rows, when the
    /// mapping's distortion coefficient is available.
    pub modulus_bound: Option<f64>,
}

impl SolveReport {
    /// Plain-text rendering, one `key: value` line per field.
    pub fn to_text(&self) -> String {
        let fmt_opt = |x: &Option<f64>| match x {
            Some(v) => v.to_string(),
            None => "n/a".to_string(),
        };
        format!(
            "converged: {}\niterations: {}\nfinal_residual: {}\ncontraction_estimate: {}\nmodulus_bound: {}\n",
            self.converged,
            self.iterations,
            self.final_residual,
            fmt_opt(&self.contraction_estimate),
            fmt_opt(&self.modulus_bound),
        )
    }
}

fn q_value(
    mdp: &FiniteMdp,
    spec: &RiskMappingSpec,
    action: &ActionSpec,
    values: &[f64],
    discounted: bool,
) -> Result<f64, SolverError> {
    let risk = evaluate_risk(spec, &action.transition, values)?;
    let alpha = if discounted { action.discount.unwrap_or(mdp.discount()) } else { 1.0 };
    Ok(action.cost + alpha * risk)
}

/// alpha_max * sqrt(1 + kappa_max) over all rows, or `None` when the
/// distortion coefficient is not available for this mapping.
pub fn modulus_bound(mdp: &FiniteMdp, spec: &RiskMappingSpec) -> Option<f64> {
    let mut kappa_max: f64 = 0.0;
    let mut alpha_max: f64 = 0.0;
    for i in 0..mdp.n_states() {
        for a in mdp.actions(i) {
            kappa_max = kappa_max.max(distortion_coefficient(spec, &a.transition).ok()?);
            alpha_max = alpha_max.max(a.discount.unwrap_or(mdp.discount()));
        }
    }
    Some(alpha_max * (1.0 + kappa_max).sqrt())
}

/// Backward recursion over a finite horizon. Returns the value vectors for
/// stages `0..=horizon`; the stage-`horizon` vector is zero. With
/// `discounted` unset, every stage applies discount 1.
pub fn evaluate_policy_finite(
    mdp: &FiniteMdp,
    policy: &StationaryPolicy,
    spec: &RiskMappingSpec,
    horizon: usize,
    discounted: bool,
) -> Result<Vec<Vec<f64>>, SolverError> {
    policy.validate_for(mdp)?;
    let n = mdp.n_states();
    let mut stages = vec![vec![0.0; n]; horizon + 1];
    for t in (0..horizon).rev() {
        let (head, tail) = stages.split_at_mut(t + 1);
        let current = &mut head[t];
        let next = &tail[0];
        for i in 0..n {
            let u = policy.action(i);
            let action = mdp
                .actions(i)
                .iter()
                .find(|a| a.id == u)
                .ok_or(MdpError::InfeasibleAction { state: i, action: u })?;
            current[i] = q_value(mdp, spec, action, next, discounted)?;
        }
    }
    Ok(stages)
}

/// Residual-driven iteration shared by policy evaluation and value
/// iteration. `sweep` writes the operator image of `values` into `next`.
fn fixed_point<F>(
    mdp: &FiniteMdp,
    spec: &RiskMappingSpec,
    opts: &SolveOptions,
    mut sweep: F,
) -> Result<(Vec<f64>, SolveReport), SolverError>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<(), SolverError>,
{
    const STALL_WINDOW: usize = 50;
    let n = mdp.n_states();
    let mut values = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut prev_residual: Option<f64> = None;
    let mut stalled = 0usize;
    let mut contraction_estimate: Option<f64> = None;
    let mut report = SolveReport {
        converged: false,
        iterations: 0,
        final_residual: f64::INFINITY,
        contraction_estimate: None,
        modulus_bound: modulus_bound(mdp, spec),
    };
    for iter in 1..=opts.max_iters {
        sweep(&values, &mut next)?;
        let residual = values
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut values, &mut next);
        report.iterations = iter;
        report.final_residual = residual;
        if let Some(prev) = prev_residual {
            if prev > 0.0 {
                let ratio = residual / prev;
                contraction_estimate =
                    Some(contraction_estimate.map_or(ratio, |c: f64| c.max(ratio)));
            }
            stalled = if residual >= prev { stalled + 1 } else { 0 };
            if stalled >= STALL_WINDOW {
                return Err(SolverError::NoContraction {
                    window: STALL_WINDOW,
                    iteration: iter,
                    residual,
                });
            }
        }
        prev_residual = Some(residual);
        if residual <= opts.tol {
            report.converged = true;
            break;
        }
    }
    report.contraction_estimate = contraction_estimate;
    Ok((values, report))
}

/// Infinite-horizon policy value: the fixed point of
/// v(i) = c(i, pi(i)) + alpha * sigma(P(i, pi(i)), v), iterated from zero.
pub fn evaluate_policy_exact(
    mdp: &FiniteMdp,
    policy: &StationaryPolicy,
    spec: &RiskMappingSpec,
    opts: &SolveOptions,
) -> Result<(Vec<f64>, SolveReport), SolverError> {
    policy.validate_for(mdp)?;
    let actions: Vec<&ActionSpec> = (0..mdp.n_states())
        .map(|i| {
            let u = policy.action(i);
            mdp.actions(i).iter().find(|a| a.id == u).expect("validated policy")
        })
        .collect();
    fixed_point(mdp, spec, opts, |values, next| {
        for (i, action) in actions.iter().enumerate() {
            next[i] = q_value(mdp, spec, action, values, true)?;
        }
        Ok(())
    })
}

/// Greedy policy for a value vector; ties go to the lowest action id.
pub fn greedy_policy(
    mdp: &FiniteMdp,
    spec: &RiskMappingSpec,
    values: &[f64],
) -> Result<StationaryPolicy, SolverError> {
    let mut actions = Vec::with_capacity(mdp.n_states());
    for i in 0..mdp.n_states() {
        let mut best: Option<(f64, usize)> = None;
        for a in mdp.actions(i) {
            let q = q_value(mdp, spec, a, values, true)?;
            // Strict improvement only, so the lowest id wins ties.
            if best.map_or(true, |(bq, _)| q < bq) {
                best = Some((q, a.id));
            }
        }
        actions.push(best.expect("states have feasible actions").1);
    }
    Ok(StationaryPolicy::new(actions))
}

/// Optimal value and policy by value iteration on the Bellman optimality
/// operator; the greedy policy of the final values is returned.
pub fn value_iteration_optimal(
    mdp: &FiniteMdp,
    spec: &RiskMappingSpec,
    opts: &SolveOptions,
) -> Result<(Vec<f64>, StationaryPolicy, SolveReport), SolverError> {
    let (values, report) = fixed_point(mdp, spec, opts, |values, next| {
        for i in 0..mdp.n_states() {
            let mut best = f64::INFINITY;
            for a in mdp.actions(i) {
                best = best.min(q_value(mdp, spec, a, values, true)?);
            }
            next[i] = best;
        }
        Ok(())
    })?;
    let policy = greedy_policy(mdp, spec, &values)?;
    Ok((values, policy, report))
}

/// Policy iteration outcome: the final values and policy plus the visited
/// policy sequence (the initial policy first).
#[derive(Debug, Clone)]
pub struct PolicyIterationOutcome {
    pub values: Vec<f64>,
    pub policy: StationaryPolicy,
    pub policies: Vec<StationaryPolicy>,
    pub report: SolveReport,
}

/// Policy iteration with exact (fixed-point) policy evaluation. The initial
/// policy minimizes the stage cost alone, which is the greedy policy of the
/// zero vector because sigma(p, 0) = 0.
pub fn policy_iteration_exact(
    mdp: &FiniteMdp,
    spec: &RiskMappingSpec,
    opts: &SolveOptions,
) -> Result<PolicyIterationOutcome, SolverError> {
    const MAX_POLICY_UPDATES: usize = 1_000;
    let mut policy = greedy_policy(mdp, spec, &vec![0.0; mdp.n_states()])?;
    let mut policies = vec![policy.clone()];
    let mut last: Option<(Vec<f64>, SolveReport)> = None;
    for _ in 0..MAX_POLICY_UPDATES {
        let (values, report) = evaluate_policy_exact(mdp, &policy, spec, opts)?;
        let improved = greedy_policy(mdp, spec, &values)?;
        if improved == policy {
            return Ok(PolicyIterationOutcome { values, policy, policies, report });
        }
        last = Some((values, report));
        policy = improved;
        policies.push(policy.clone());
    }
    // Stopped by the update cap; report the last evaluation, unconverged.
    let (values, mut report) = last.expect("at least one evaluation ran");
    report.converged = false;
    Ok(PolicyIterationOutcome { values, policy, policies, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::ActionSpec;
    use crate::risk::{BaseRisk, DiscreteDistribution};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(probs: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::from_dense(probs).unwrap()
    }

    fn single_state_loop(cost: f64, discount: f64) -> FiniteMdp {
        FiniteMdp::new(
            1,
            discount,
            &[],
            DiscreteDistribution::uniform(1).unwrap(),
            vec![vec![ActionSpec::new(0, cost, row(&[1.0]))]],
        )
        .unwrap()
    }

    /// Random MDP with every transition supported everywhere, so any
    /// stationary policy induces an ergodic chain.
    fn random_mdp(n: usize, m: usize, discount: f64, rng: &mut ChaCha8Rng) -> FiniteMdp {
        let actions = (0..n)
            .map(|_| {
                (0..m)
                    .map(|u| {
                        let weights: Vec<f64> =
                            (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
                        ActionSpec::new(
                            u,
                            rng.gen_range(0.0..1.0),
                            DiscreteDistribution::from_weights(&weights).unwrap(),
                        )
                    })
                    .collect()
            })
            .collect();
        FiniteMdp::new(n, discount, &[], DiscreteDistribution::uniform(n).unwrap(), actions)
            .unwrap()
    }

    #[test]
    fn geometric_series_value() {
        // v = 1 + 0.9 v, so v = 10.
        let mdp = single_state_loop(1.0, 0.9);
        let policy = StationaryPolicy::new(vec![0]);
        let spec = RiskMappingSpec::expectation();
        let (v, report) =
            evaluate_policy_exact(&mdp, &policy, &spec, &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(v[0], 10.0, epsilon = 1e-7);
        assert!(report.converged);
        // Ratios pick up relative roundoff once residuals near the
        // tolerance, so allow a small margin over the true modulus.
        assert!(report.contraction_estimate.unwrap() <= 0.9 + 1e-4);
        assert_abs_diff_eq!(report.modulus_bound.unwrap(), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn two_cycle_exact_values() {
        // Deterministic swap with costs (1, 0) and discount 1/2:
        // v0 = 1 + v1 / 2, v1 = v0 / 2, so v = (4/3, 2/3).
        let mdp = FiniteMdp::new(
            2,
            0.5,
            &[],
            DiscreteDistribution::uniform(2).unwrap(),
            vec![
                vec![ActionSpec::new(0, 1.0, row(&[0.0, 1.0]))],
                vec![ActionSpec::new(0, 0.0, row(&[1.0, 0.0]))],
            ],
        )
        .unwrap();
        let policy = StationaryPolicy::new(vec![0, 0]);
        let spec = RiskMappingSpec::expectation();
        let (v, _) =
            evaluate_policy_exact(&mdp, &policy, &spec, &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(v[0], 4.0 / 3.0, epsilon = 1e-8);
        assert_abs_diff_eq!(v[1], 2.0 / 3.0, epsilon = 1e-8);
    }

    #[test]
    fn finite_horizon_worst_case_batch2() {
        // Root branches uniformly to two absorbing states with stage costs
        // 0 and 1. Undiscounted, horizon 2: the stage-1 values under the
        // policy are (0, 0, 1) and the batch-2 worst case of a fair (0, 1)
        // draw is 3/4.
        let mdp = FiniteMdp::new(
            3,
            0.9,
            &[],
            DiscreteDistribution::point_mass(3, 0).unwrap(),
            vec![
                vec![ActionSpec::new(0, 0.0, row(&[0.0, 0.5, 0.5]))],
                vec![ActionSpec::new(0, 0.0, row(&[0.0, 1.0, 0.0]))],
                vec![ActionSpec::new(0, 1.0, row(&[0.0, 0.0, 1.0]))],
            ],
        )
        .unwrap();
        let policy = StationaryPolicy::new(vec![0, 0, 0]);
        let spec = RiskMappingSpec::worst_case_batch(2).unwrap();
        let stages = evaluate_policy_finite(&mdp, &policy, &spec, 2, false).unwrap();
        assert_eq!(stages.len(), 3);
        assert_eq!(stages[2], vec![0.0; 3]);
        assert_eq!(stages[1], vec![0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(stages[0][0], 0.75, epsilon = 1e-12);

        // Discounted variant scales the stage-0 risk term by 0.9; stage 1
        // is unchanged because the stage-2 values are zero.
        let stages = evaluate_policy_finite(&mdp, &policy, &spec, 2, true).unwrap();
        assert_abs_diff_eq!(stages[0][0], 0.9 * 0.75, epsilon = 1e-12);
    }

    #[test]
    fn worst_case_value_dominates_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let mdp = random_mdp(5, 2, 0.9, &mut rng);
            let policy = StationaryPolicy::new(vec![0; 5]);
            let neutral = RiskMappingSpec::expectation();
            let averse = RiskMappingSpec::worst_case_batch(2).unwrap();
            let (v_n, _) =
                evaluate_policy_exact(&mdp, &policy, &neutral, &SolveOptions::default()).unwrap();
            let (v_a, _) =
                evaluate_policy_exact(&mdp, &policy, &averse, &SolveOptions::default()).unwrap();
            for i in 0..5 {
                assert!(
                    v_a[i] >= v_n[i] - 1e-9,
                    "risk-averse value {} below neutral {} at state {i}",
                    v_a[i],
                    v_n[i]
                );
            }
        }
    }

    #[test]
    fn value_iteration_matches_policy_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let opts = SolveOptions::default();
        for trial in 0..10 {
            let mdp = random_mdp(6, 3, 0.85, &mut rng);
            let spec = if trial % 2 == 0 {
                RiskMappingSpec::expectation()
            } else {
                RiskMappingSpec::worst_case_batch(2).unwrap()
            };
            let (v_vi, _, r_vi) = value_iteration_optimal(&mdp, &spec, &opts).unwrap();
            let pi = policy_iteration_exact(&mdp, &spec, &opts).unwrap();
            assert!(r_vi.converged && pi.report.converged);
            assert!(!pi.policies.is_empty());
            for i in 0..6 {
                assert_abs_diff_eq!(v_vi[i], pi.values[i], epsilon = 2e-8);
            }
        }
    }

    #[test]
    fn greedy_ties_resolve_to_lowest_action_id() {
        let mdp = FiniteMdp::new(
            1,
            0.9,
            &[],
            DiscreteDistribution::uniform(1).unwrap(),
            vec![vec![
                ActionSpec::new(0, 1.0, row(&[1.0])),
                ActionSpec::new(1, 1.0, row(&[1.0])),
            ]],
        )
        .unwrap();
        let spec = RiskMappingSpec::expectation();
        let policy = greedy_policy(&mdp, &spec, &[0.0]).unwrap();
        assert_eq!(policy.action(0), 0);
    }

    #[test]
    fn undiscounted_loop_reports_no_contraction()
    {
        // Discount override 1 on a costly self-loop: the sweep adds 1
        // forever and the residual never decreases.
        let mut actions = vec![vec![ActionSpec::new(0, 1.0, row(&[1.0]))]];
        actions[0][0].discount = Some(1.0);
        let mdp = FiniteMdp::new(
            1,
            0.9,
            &[],
            DiscreteDistribution::uniform(1).unwrap(),
            actions,
        )
        .unwrap();
        let policy = StationaryPolicy::new(vec![0]);
        let spec = RiskMappingSpec::expectation();
        let err = evaluate_policy_exact(&mdp, &policy, &spec, &SolveOptions::default())
            .unwrap_err();
        assert!(matches!(err, SolverError::NoContraction { .. }), "got {err:?}");
    }

    #[test]
    fn terminal_states_keep_zero_value() {
        let mdp = FiniteMdp::new(
            2,
            0.9,
            &[1],
            DiscreteDistribution::point_mass(2, 0).unwrap(),
            vec![
                vec![ActionSpec::new(0, 1.0, row(&[0.5, 0.5]))],
                vec![ActionSpec::new(0, 0.0, row(&[0.0, 1.0]))],
            ],
        )
        .unwrap();
        let policy = StationaryPolicy::new(vec![0, 0]);
        let spec = RiskMappingSpec::worst_case_batch(2).unwrap();
        let (v, _) =
            evaluate_policy_exact(&mdp, &policy, &spec, &SolveOptions::default()).unwrap();
        assert_eq!(v[1], 0.0);
        assert!(v[0] > 0.0);
    }

    #[test]
    fn report_text_has_all_fields() {
        let report = SolveReport {
            converged: true,
            iterations: 12,
            final_residual: 1e-10,
            contraction_estimate: Some(0.5),
            modulus_bound: None,
        };
        let text = report.to_text();
        for key in
            ["converged:", "iterations:", "final_residual:", "contraction_estimate:", "modulus_bound:"]
        {
            assert!(text.contains(key), "missing {key} in {text}");
        }
        assert!(text.contains("n/a"));
    }

    #[test]
    fn modulus_bound_matches_distortion() {
        // Uniform two-point rows under batch-2 worst case have kappa = 1/2,
        // so the bound is 0.8 * sqrt(1.5).
        let mdp = FiniteMdp::new(
            2,
            0.8,
            &[],
            DiscreteDistribution::uniform(2).unwrap(),
            vec![
                vec![ActionSpec::new(0, 1.0, row(&[0.5, 0.5]))],
                vec![ActionSpec::new(0, 1.0, row(&[0.5, 0.5]))],
            ],
        )
        .unwrap();
        let spec = RiskMappingSpec::worst_case_batch(2).unwrap();
        let bound = modulus_bound(&mdp, &spec).unwrap();
        assert_abs_diff_eq!(bound, 0.8 * 1.5f64.sqrt(), epsilon = 1e-12);

        // Mean semideviation has no distortion coefficient here.
        let spec = RiskMappingSpec::new(BaseRisk::MeanSemideviation { c: 0.5 }, 1, 1.0).unwrap();
        assert!(modulus_bound(&mdp, &spec).is_none());
    }
}
