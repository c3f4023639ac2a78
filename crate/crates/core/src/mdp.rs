//! Finite Markov decision processes with per-state feasible action sets.
//!
//! States are `0..n_states`. Each state carries a nonempty set of feasible
//! action ids; every `(state, action)` pair has a transition distribution
//! over states and a stage cost. A scalar discount in (0, 1) applies
//! throughout, with optional per-action overrides (used by environments
//! where some controls are undiscounted). Terminal states must offer a
//! zero-cost self-loop action. A restart distribution describes where
//! episodes begin.

use std::collections::BTreeMap;
use std::io::Write;

use petgraph::graph::DiGraph;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::risk::{DiscreteDistribution, RiskError, RiskMappingSpec};

pub type ActionId = usize;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("invalid MDP: {reason}")]
    Invalid { reason: String },
    #[error("action {action} is not feasible in state {state}")]
    InfeasibleAction { state: usize, action: ActionId },
    #[error("chain is not unichain: found {recurrent_classes} recurrent classes")]
    NotUnichain { recurrent_classes: usize },
    #[error("stationary distribution iteration did not reach residual {tol} in {iters} sweeps")]
    StationaryNotConverged { tol: f64, iters: usize },
    #[error(transparent)]
    Risk(#[from] RiskError),
}

/// One feasible action of one state: id, stage cost, transition row, and an
/// optional discount override.
#[derive(Debug, Clone)]
pub struct ActionSpec {
    pub id: ActionId,
    pub cost: f64,
    pub transition: DiscreteDistribution,
    pub discount: Option<f64>,
}

impl ActionSpec {
    pub fn new(id: ActionId, cost: f64, transition: DiscreteDistribution) -> Self {
        Self { id, cost, transition, discount: None }
    }
}

/// A finite MDP; construction validates every structural invariant.
#[derive(Debug, Clone)]
pub struct FiniteMdp {
    n_states: usize,
    discount: f64,
    // Per state, sorted ascending by action id.
    actions: Vec<Vec<ActionSpec>>,
    terminal: Vec<bool>,
    restart: DiscreteDistribution,
}

impl FiniteMdp {
    pub fn new(
        n_states: usize,
        discount: f64,
        terminal_states: &[usize],
        restart: DiscreteDistribution,
        mut actions: Vec<Vec<ActionSpec>>,
    ) -> Result<Self, MdpError> {
        let invalid = |reason: String| MdpError::Invalid { reason };
        if n_states == 0 {
            return Err(invalid("MDP needs at least one state".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(invalid(format!("discount must be in (0, 1), got {discount}")));
        }
        if actions.len() != n_states {
            return Err(invalid(format!(
                "have action sets for {} states, expected {n_states}",
                actions.len()
            )));
        }
        if restart.len() != n_states {
            return Err(invalid(format!(
                "restart distribution is over {} states, expected {n_states}",
                restart.len()
            )));
        }
        let mut terminal = vec![false; n_states];
        for &t in terminal_states {
            if t >= n_states {
                return Err(invalid(format!("terminal state {t} out of range")));
            }
            terminal[t] = true;
        }
        for (i, acts) in actions.iter_mut().enumerate() {
            if acts.is_empty() {
                return Err(invalid(format!("state {i} has no feasible actions")));
            }
            acts.sort_by_key(|a| a.id);
            for pair in acts.windows(2) {
                if pair[0].id == pair[1].id {
                    return Err(invalid(format!(
                        "state {i} lists action {} twice",
                        pair[0].id
                    )));
                }
            }
            for a in acts.iter() {
                if !a.cost.is_finite() {
                    return Err(invalid(format!(
                        "cost of action {} in state {i} is not finite",
                        a.id
                    )));
                }
                if a.transition.len() != n_states {
                    return Err(invalid(format!(
                        "transition of action {} in state {i} is over {} states",
                        a.id,
                        a.transition.len()
                    )));
                }
                if let Some(d) = a.discount {
                    if !(d > 0.0 && d <= 1.0) {
                        return Err(invalid(format!(
                            "discount override {d} of action {} in state {i} not in (0, 1]",
                            a.id
                        )));
                    }
                }
            }
            if terminal[i] {
                let has_self_loop = acts.iter().any(|a| {
                    a.cost == 0.0
                        && a.transition.support_size() == 1
                        && a.transition.prob(i) == 1.0
                });
                if !has_self_loop {
                    return Err(invalid(format!(
                        "terminal state {i} has no zero-cost self-loop action"
                    )));
                }
            }
        }
        Ok(Self { n_states, discount, actions, terminal, restart })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn restart(&self) -> &DiscreteDistribution {
        &self.restart
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn terminal_states(&self) -> Vec<usize> {
        (0..self.n_states).filter(|&i| self.terminal[i]).collect()
    }

    /// Feasible actions of a state, ascending by id.
    pub fn actions(&self, state: usize) -> &[ActionSpec] {
        &self.actions[state]
    }

    fn action(&self, state: usize, action: ActionId) -> Result<&ActionSpec, MdpError> {
        self.actions[state]
            .binary_search_by_key(&action, |a| a.id)
            .map(|k| &self.actions[state][k])
            .map_err(|_| MdpError::InfeasibleAction { state, action })
    }

    pub fn cost(&self, state: usize, action: ActionId) -> Result<f64, MdpError> {
        Ok(self.action(state, action)?.cost)
    }

    pub fn transition(
        &self,
        state: usize,
        action: ActionId,
    ) -> Result<&DiscreteDistribution, MdpError> {
        Ok(&self.action(state, action)?.transition)
    }

    /// Effective discount of an action: the override if present, else the
    /// scalar MDP discount.
    pub fn discount_of(&self, state: usize, action: ActionId) -> Result<f64, MdpError> {
        Ok(self.action(state, action)?.discount.unwrap_or(self.discount))
    }

    /// Loads the JSON format documented in the README: dense restart
    /// weights, sparse transition triplets, one cost entry per
    /// state-action pair.
    pub fn from_json_str(json: &str) -> Result<Self, MdpError> {
        let wire: MdpWire = serde_json::from_str(json)
            .map_err(|e| MdpError::Invalid { reason: format!("JSON parse error: {e}") })?;
        wire.try_into()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&MdpWire::from(self)).expect("MDP wire form serializes")
    }
}

/// Wire form for the JSON file format.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpWire {
    n_states: usize,
    /// Feasible action ids per state.
    actions: Vec<Vec<usize>>,
    /// Sparse rows `(state, action, successor, probability)`.
    transitions: Vec<(usize, usize, usize, f64)>,
    /// One `(state, action, cost)` entry per feasible pair.
    costs: Vec<(usize, usize, f64)>,
    discount: f64,
    #[serde(default)]
    terminal_states: Vec<usize>,
    /// Dense restart weights, normalized on load.
    restart: Vec<f64>,
}

impl TryFrom<MdpWire> for FiniteMdp {
    type Error = MdpError;

    fn try_from(w: MdpWire) -> Result<Self, MdpError> {
        let invalid = |reason: String| MdpError::Invalid { reason };
        if w.actions.len() != w.n_states {
            return Err(invalid("actions list length differs from n_states".into()));
        }
        let mut triplets: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
        for (i, u, j, p) in w.transitions {
            triplets.entry((i, u)).or_default().push((j, p));
        }
        let mut costs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, u, c) in w.costs {
            if costs.insert((i, u), c).is_some() {
                return Err(invalid(format!("duplicate cost entry for state {i} action {u}")));
            }
        }
        let mut actions: Vec<Vec<ActionSpec>> = Vec::with_capacity(w.n_states);
        for (i, ids) in w.actions.iter().enumerate() {
            let mut specs = Vec::with_capacity(ids.len());
            for &u in ids {
                let atoms = triplets.remove(&(i, u)).ok_or_else(|| {
                    invalid(format!("no transition rows for state {i} action {u}"))
                })?;
                let cost = costs.remove(&(i, u)).ok_or_else(|| {
                    invalid(format!("no cost entry for state {i} action {u}"))
                })?;
                let transition = DiscreteDistribution::from_atoms(w.n_states, atoms)?;
                specs.push(ActionSpec::new(u, cost, transition));
            }
            actions.push(specs);
        }
        if let Some(((i, u), _)) = triplets.into_iter().next() {
            return Err(invalid(format!(
                "transition rows for state {i} action {u} not in the action list"
            )));
        }
        if let Some(((i, u), _)) = costs.into_iter().next() {
            return Err(invalid(format!(
                "cost entry for state {i} action {u} not in the action list"
            )));
        }
        let restart = DiscreteDistribution::from_weights(&w.restart)?;
        FiniteMdp::new(w.n_states, w.discount, &w.terminal_states, restart, actions)
    }
}

impl From<&FiniteMdp> for MdpWire {
    fn from(m: &FiniteMdp) -> MdpWire {
        let mut transitions = Vec::new();
        let mut costs = Vec::new();
        for (i, acts) in m.actions.iter().enumerate() {
            for a in acts {
                costs.push((i, a.id, a.cost));
                for &(j, p) in a.transition.atoms() {
                    transitions.push((i, a.id, j, p));
                }
            }
        }
        MdpWire {
            n_states: m.n_states,
            actions: m.actions.iter().map(|acts| acts.iter().map(|a| a.id).collect()).collect(),
            transitions,
            costs,
            discount: m.discount,
            terminal_states: m.terminal_states(),
            restart: m.restart.to_dense(),
        }
    }
}

/// A deterministic stationary policy: one feasible action id per state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationaryPolicy {
    pub actions: Vec<ActionId>,
}

impl StationaryPolicy {
    pub fn new(actions: Vec<ActionId>) -> Self {
        Self { actions }
    }

    pub fn action(&self, state: usize) -> ActionId {
        self.actions[state]
    }

    pub fn validate_for(&self, mdp: &FiniteMdp) -> Result<(), MdpError> {
        if self.actions.len() != mdp.n_states() {
            return Err(MdpError::Invalid {
                reason: format!(
                    "policy covers {} states, MDP has {}",
                    self.actions.len(),
                    mdp.n_states()
                ),
            });
        }
        for (i, &u) in self.actions.iter().enumerate() {
            mdp.action(i, u)?;
        }
        Ok(())
    }
}

/// A row-stochastic transition matrix stored as sparse rows.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    rows: Vec<DiscreteDistribution>,
}

/// The chain a stationary policy induces on the MDP's states.
pub fn induced_chain(mdp: &FiniteMdp, policy: &StationaryPolicy) -> Result<MarkovChain, MdpError> {
    policy.validate_for(mdp)?;
    let rows = (0..mdp.n_states())
        .map(|i| mdp.transition(i, policy.action(i)).map(Clone::clone))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MarkovChain { rows })
}

impl MarkovChain {
    pub fn new(rows: Vec<DiscreteDistribution>) -> Result<Self, MdpError> {
        let n = rows.len();
        if n == 0 {
            return Err(MdpError::Invalid { reason: "chain needs at least one state".into() });
        }
        if let Some(row) = rows.iter().find(|r| r.len() != n) {
            return Err(MdpError::Invalid {
                reason: format!("row is over {} states, chain has {n}", row.len()),
            });
        }
        Ok(Self { rows })
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &DiscreteDistribution {
        &self.rows[i]
    }

    /// Replaces the rows of the given terminal states with the restart
    /// distribution, producing the episodic process's recurrent chain.
    pub fn restarted(
        &self,
        terminal: &[usize],
        restart: &DiscreteDistribution,
    ) -> Result<MarkovChain, MdpError> {
        if restart.len() != self.n_states() {
            return Err(MdpError::Invalid {
                reason: "restart distribution dimension differs from chain".into(),
            });
        }
        let mut rows = self.rows.clone();
        for &t in terminal {
            if t >= rows.len() {
                return Err(MdpError::Invalid { reason: format!("terminal state {t} out of range") });
            }
            rows[t] = restart.clone();
        }
        Ok(MarkovChain { rows })
    }

    /// Left fixed point `q P = q` after verifying the chain has a single
    /// recurrent class. Small chains are solved directly; large ones by
    /// damped power iteration (the damping removes periodicity).
    pub fn stationary_distribution(&self) -> Result<DiscreteDistribution, MdpError> {
        let n = self.n_states();
        self.check_unichain()?;
        const TOL: f64 = 1e-10;
        let q = if n <= 2000 { self.stationary_direct() } else { None };
        let q = match q {
            Some(q) if self.residual(&q) <= TOL => q,
            // Direct solve unavailable or imprecise; refine by iteration.
            _ => self.stationary_power(TOL)?,
        };
        Ok(DiscreteDistribution::from_weights(&q)?)
    }

    fn residual(&self, q: &[f64]) -> f64 {
        let next = self.left_apply(q);
        q.iter().zip(next.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn left_apply(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; q.len()];
        for (i, row) in self.rows.iter().enumerate() {
            if q[i] == 0.0 {
                continue;
            }
            for &(j, p) in row.atoms() {
                out[j] += q[i] * p;
            }
        }
        out
    }

    fn stationary_direct(&self) -> Option<Vec<f64>> {
        use nalgebra::{DMatrix, DVector};
        let n = self.n_states();
        // Rows of A: (P^T - I) q = 0, with the last equation replaced by
        // sum(q) = 1.
        let mut a = DMatrix::<f64>::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, p) in row.atoms() {
                a[(j, i)] += p;
            }
            a[(i, i)] -= 1.0;
        }
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::<f64>::zeros(n);
        b[n - 1] = 1.0;
        let sol = a.lu().solve(&b)?;
        let mut q: Vec<f64> = sol.iter().copied().collect();
        for x in q.iter_mut() {
            if *x < 0.0 {
                // Transient states solve to zero up to roundoff.
                if *x < -1e-9 {
                    return None;
                }
                *x = 0.0;
            }
        }
        let sum: f64 = q.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return None;
        }
        for x in q.iter_mut() {
            *x /= sum;
        }
        Some(q)
    }

    fn stationary_power(&self, tol: f64) -> Result<Vec<f64>, MdpError> {
        let n = self.n_states();
        let mut q = vec![1.0 / n as f64; n];
        let max_sweeps = 200_000;
        for _ in 0..max_sweeps {
            let next = self.left_apply(&q);
            // Damped update q <- (q + qP) / 2 keeps aperiodic convergence.
            let mut damped: Vec<f64> = q.iter().zip(next.iter()).map(|(a, b)| 0.5 * (a + b)).collect();
            let sum: f64 = damped.iter().sum();
            for x in damped.iter_mut() {
                *x /= sum;
            }
            q = damped;
            if self.residual(&q) <= tol {
                return Ok(q);
            }
        }
        Err(MdpError::StationaryNotConverged { tol, iters: max_sweeps })
    }

    /// Errors unless exactly one closed communicating class exists.
    fn check_unichain(&self) -> Result<(), MdpError> {
        let n = self.n_states();
        let mut graph = DiGraph::<(), ()>::new();
        let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
        for (i, row) in self.rows.iter().enumerate() {
            for j in row.support() {
                if i != j {
                    graph.add_edge(nodes[i], nodes[j], ());
                }
            }
        }
        let sccs = petgraph::algo::tarjan_scc(&graph);
        let mut scc_of = vec![0usize; n];
        for (k, scc) in sccs.iter().enumerate() {
            for &node in scc {
                scc_of[node.index()] = k;
            }
        }
        let mut closed = vec![true; sccs.len()];
        for (i, row) in self.rows.iter().enumerate() {
            for j in row.support() {
                if scc_of[i] != scc_of[j] {
                    closed[scc_of[i]] = false;
                }
            }
        }
        let recurrent = closed.iter().filter(|&&c| c).count();
        if recurrent != 1 {
            return Err(MdpError::NotUnichain { recurrent_classes: recurrent });
        }
        Ok(())
    }
}

/// One simulated step: the state, the action taken, its stage cost, the
/// batch of sampled successors (in draw order), and the successor chosen to
/// continue the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub state: usize,
    pub action: ActionId,
    pub cost: f64,
    pub successors: Vec<usize>,
    pub next: usize,
}

/// A simulated episode. `truncated` is set when the step cap was reached
/// before a terminal state.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub start: usize,
    pub steps: Vec<EpisodeStep>,
    pub truncated: bool,
}

/// Where an episode begins.
#[derive(Debug, Clone, Copy)]
pub enum EpisodeStart {
    /// Draw from the MDP's restart distribution.
    Restart,
    /// Begin at a fixed state.
    At(usize),
}

/// Simulates one episode under a stationary policy.
///
/// At each step the policy's action is taken, `spec.batch_size()` successors
/// are drawn i.i.d. from the transition row (the same draws later serve the
/// risk estimate), and the trajectory continues in one of them chosen
/// uniformly, which preserves the transition law marginally. The episode
/// stops at a terminal state or after `max_steps` steps.
pub fn simulate_episode<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    policy: &StationaryPolicy,
    spec: &RiskMappingSpec,
    start: EpisodeStart,
    max_steps: usize,
    rng: &mut R,
) -> Result<Episode, MdpError> {
    policy.validate_for(mdp)?;
    let start_state = match start {
        EpisodeStart::Restart => mdp.restart().sample(rng),
        EpisodeStart::At(s) => {
            if s >= mdp.n_states() {
                return Err(MdpError::Invalid { reason: format!("start state {s} out of range") });
            }
            s
        }
    };
    let n_draws = spec.batch_size();
    let mut steps = Vec::new();
    let mut state = start_state;
    let mut truncated = false;
    loop {
        if mdp.is_terminal(state) {
            break;
        }
        if steps.len() >= max_steps {
            truncated = true;
            break;
        }
        let action = policy.action(state);
        let row = mdp.transition(state, action)?;
        let successors: Vec<usize> = (0..n_draws).map(|_| row.sample(rng)).collect();
        let next = successors[rng.gen_range(0..n_draws)];
        steps.push(EpisodeStep {
            state,
            action,
            cost: mdp.cost(state, action)?,
            successors,
            next,
        });
        state = next;
    }
    Ok(Episode { start: start_state, steps, truncated })
}

/// Writes episodes as CSV with header
/// `episode,step,state,action,cost,successors,next`; the successor batch is
/// joined with `|`.
pub fn write_episodes_csv<W: Write>(episodes: &[Episode], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "episode,step,state,action,cost,successors,next")?;
    for (e, ep) in episodes.iter().enumerate() {
        for (t, step) in ep.steps.iter().enumerate() {
            let succ = step
                .successors
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join("|");
            writeln!(
                out,
                "{e},{t},{},{},{},{succ},{}",
                step.state, step.action, step.cost, step.next
            )?;
        }
    }
    Ok(())
}
