//! Risk-averse Markov decision processes with coherent transition risk
//! mappings.
//!
//! The crate is organized bottom-up:
//!
//! - [`risk`]: coherent risk mappings on finite discrete distributions
//!   (expectation, mean semideviation, average value-at-risk, worst case),
//!   their mini-batch compositions, sampled estimates, and distortion
//!   coefficients.
//! - [`mdp`]: finite MDPs with per-state feasible action sets, induced and
//!   restarted Markov chains, stationary distributions, and episode
//!   simulation.
//! - [`solver`]: exact risk-averse dynamic programming on tabular MDPs
//!   (finite horizon, fixed point, optimal value iteration, policy
//!   iteration).
//! - [`feature_eval`]: simulation-based policy evaluation with linear value
//!   models, recursive least squares with rank-one inverse updates, and a
//!   temporal-difference variant.
//! - [`nav`]: the grid-navigation environment (waypoints, transmission
//!   points, information collection), its feature maps, threshold policies,
//!   and variable-depth lookahead improvement of the threshold parameter.
//! - [`harness`]: the experiment pipeline (training across sampled
//!   configurations, threshold improvement, policy comparison, exact
//!   baselines) plus the file formats used by the command-line tool.

pub mod feature_eval;
pub mod harness;
pub mod mdp;
pub mod nav;
pub mod risk;
pub mod rng;
pub mod solver;

pub use feature_eval::{LsAccumulator, SampledProcess, StepSchedule, TdState};
pub use harness::{ExperimentConfig, ExperimentSummary, HarnessError, PolicyStats};
pub use mdp::{Episode, FiniteMdp, MarkovChain, StationaryPolicy};
pub use nav::{DistanceField, GridMap, NavAction, NavConfig, NavInstance, NavParams, NavProcess, NavState};
pub use risk::{BaseRisk, DiscreteDistribution, RiskMappingSpec};
pub use solver::SolveReport;
