//! Grid navigation with information collection and transmission.
//!
//! A robot moves on an 8-connected grid with obstacles. It must observe a
//! set of waypoints (each from within an observation radius, measured in
//! grid BFS distance), accumulating information whose amount per waypoint
//! is random, and deliver the accumulated information at a transmission
//! point, which earns a negative cost. An episode ends when every waypoint
//! is observed, the buffer is empty, and the robot stands on a transmission
//! point. Moves cost one step each and are discounted; collect and
//! transmit are instantaneous by default (discount 1).
//!
//! The module also provides the pieces the evaluation stack builds on: a
//! 6-dimensional state summary and its 28-term quadratic expansion, a
//! one-parameter threshold policy family, a variable-depth lookahead value
//! for that family, and the grid search that picks the threshold by
//! common-random-number comparison.

use std::collections::{HashMap, VecDeque};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::risk::{empirical_risk, evaluate_risk, DiscreteDistribution, RiskError, RiskMappingSpec};
use crate::rng::stream_rng;

pub const FEATURE_DIM: usize = 6;
pub const POLY_DIM: usize = 28;

/// Most waypoint sets fit a u32 visitation mask.
pub const MAX_WAYPOINTS: usize = 32;

#[derive(Debug, Error)]
pub enum NavError {
    #[error("invalid map: {reason}")]
    InvalidMap { reason: String },
    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },
    #[error("invalid action: {reason}")]
    InvalidAction { reason: String },
    #[error("no valid configuration found in {attempts} attempts")]
    SamplingExhausted { attempts: usize },
    #[error(transparent)]
    Risk(#[from] RiskError),
}

/// The eight moves in their fixed order; ties among equally good moves are
/// broken by this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::N,
        Direction::NE,
        Direction::E,
        Direction::SE,
        Direction::S,
        Direction::SW,
        Direction::W,
        Direction::NW,
    ];

    /// (dx, dy) with y growing downward.
    pub fn offset(self) -> (i32, i32) {
        match self {
            Direction::N => (0, -1),
            Direction::NE => (1, -1),
            Direction::E => (1, 0),
            Direction::SE => (1, 1),
            Direction::S => (0, 1),
            Direction::SW => (-1, 1),
            Direction::W => (-1, 0),
            Direction::NW => (-1, -1),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::N => "n",
            Direction::NE => "ne",
            Direction::E => "e",
            Direction::SE => "se",
            Direction::S => "s",
            Direction::SW => "sw",
            Direction::W => "w",
            Direction::NW => "nw",
        }
    }
}

/// A grid cell, serialized as the pair [x, y].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(i32, i32)", into = "(i32, i32)")]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn step(self, dir: Direction) -> Cell {
        let (dx, dy) = dir.offset();
        Cell { x: self.x + dx, y: self.y + dy }
    }
}

impl From<(i32, i32)> for Cell {
    fn from((x, y): (i32, i32)) -> Self {
        Cell { x, y }
    }
}

impl From<Cell> for (i32, i32) {
    fn from(c: Cell) -> Self {
        (c.x, c.y)
    }
}

/// Rectangular grid with blocked cells; the free cells must form a single
/// 8-connected component.
#[derive(Debug, Clone)]
pub struct GridMap {
    width: i32,
    height: i32,
    blocked: Vec<bool>,
}

impl GridMap {
    pub fn new(width: usize, height: usize, obstacles: &[Cell]) -> Result<Self, NavError> {
        if width == 0 || height == 0 {
            return Err(NavError::InvalidMap { reason: "grid must be nonempty".into() });
        }
        let (w, h) = (width as i32, height as i32);
        let mut blocked = vec![false; width * height];
        for &c in obstacles {
            if c.x < 0 || c.y < 0 || c.x >= w || c.y >= h {
                return Err(NavError::InvalidMap {
                    reason: format!("obstacle ({}, {}) is out of bounds", c.x, c.y),
                });
            }
            let idx = (c.y * w + c.x) as usize;
            if blocked[idx] {
                return Err(NavError::InvalidMap {
                    reason: format!("obstacle ({}, {}) is listed twice", c.x, c.y),
                });
            }
            blocked[idx] = true;
        }
        let map = Self { width: w, height: h, blocked };
        let free = map.free_cells();
        if free.is_empty() {
            return Err(NavError::InvalidMap { reason: "no free cells".into() });
        }
        // Connectivity: BFS from one free cell must reach all of them.
        let mut seen = vec![false; (w * h) as usize];
        let mut queue = VecDeque::new();
        seen[map.index(free[0])] = true;
        queue.push_back(free[0]);
        let mut reached = 1usize;
        while let Some(c) = queue.pop_front() {
            for dir in Direction::ALL {
                if let Some(n) = map.neighbor(c, dir) {
                    let idx = map.index(n);
                    if !seen[idx] {
                        seen[idx] = true;
                        reached += 1;
                        queue.push_back(n);
                    }
                }
            }
        }
        if reached != free.len() {
            return Err(NavError::InvalidMap {
                reason: format!("free cells split into components ({reached} of {})", free.len()),
            });
        }
        Ok(map)
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn height(&self) -> usize {
        self.height as usize
    }

    fn index(&self, c: Cell) -> usize {
        (c.y * self.width + c.x) as usize
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && c.x < self.width && c.y < self.height
    }

    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c) && !self.blocked[self.index(c)]
    }

    /// The free cell one step in the given direction, if any.
    pub fn neighbor(&self, c: Cell, dir: Direction) -> Option<Cell> {
        let n = c.step(dir);
        if self.is_free(n) {
            Some(n)
        } else {
            None
        }
    }

    /// Free cells in row-major order.
    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell { x, y };
                if !self.blocked[self.index(c)] {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn obstacles(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Cell { x, y };
                if self.blocked[self.index(c)] {
                    out.push(c);
                }
            }
        }
        out
    }
}

/// All-pairs BFS distances over the free cells, 8-connected unit steps.
#[derive(Debug, Clone)]
pub struct DistanceField {
    width: i32,
    n: usize,
    dist: Vec<u32>,
}

const UNREACHED: u32 = u32::MAX;

impl DistanceField {
    pub fn new(map: &GridMap) -> Self {
        let n = map.width() * map.height();
        let mut dist = vec![UNREACHED; n * n];
        for src in map.free_cells() {
            let base = map.index(src) * n;
            dist[base + map.index(src)] = 0;
            let mut queue = VecDeque::new();
            queue.push_back(src);
            while let Some(c) = queue.pop_front() {
                let d = dist[base + map.index(c)];
                for dir in Direction::ALL {
                    if let Some(nb) = map.neighbor(c, dir) {
                        let slot = base + map.index(nb);
                        if dist[slot] == UNREACHED {
                            dist[slot] = d + 1;
                            queue.push_back(nb);
                        }
                    }
                }
            }
        }
        Self { width: map.width, n, dist }
    }

    fn index(&self, c: Cell) -> usize {
        (c.y * self.width + c.x) as usize
    }

    /// BFS distance between two free cells; `None` off the free component.
    pub fn dist(&self, a: Cell, b: Cell) -> Option<u32> {
        if a.x < 0 || a.y < 0 || b.x < 0 || b.y < 0 {
            return None;
        }
        let d = *self.dist.get(self.index(a) * self.n + self.index(b))?;
        if d == UNREACHED {
            None
        } else {
            Some(d)
        }
    }

    /// Largest finite pairwise distance.
    pub fn diameter(&self) -> u32 {
        self.dist.iter().copied().filter(|&d| d != UNREACHED).max().unwrap_or(0)
    }
}

fn default_move_cost() -> f64 {
    1.0
}
fn default_collect_base_cost() -> f64 {
    0.5
}
fn default_observe_radius() -> u32 {
    2
}
fn default_info_high() -> f64 {
    10.0
}
fn default_info_low() -> f64 {
    2.0
}
fn default_p_high() -> f64 {
    0.5
}
fn default_discount() -> f64 {
    0.95
}

/// Dynamics parameters; every field has a default.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NavParams {
    pub move_cost: f64,
    /// Collecting a waypoint at BFS distance d costs base * (1 + d).
    pub collect_base_cost: f64,
    pub observe_radius: u32,
    pub info_high: f64,
    pub info_low: f64,
    pub p_high: f64,
    pub discount: f64,
    /// Discount collect and transmit steps too; moves are always
    /// discounted.
    pub discount_on_ops: bool,
}

impl Default for NavParams {
    fn default() -> Self {
        Self {
            move_cost: default_move_cost(),
            collect_base_cost: default_collect_base_cost(),
            observe_radius: default_observe_radius(),
            info_high: default_info_high(),
            info_low: default_info_low(),
            p_high: default_p_high(),
            discount: default_discount(),
            discount_on_ops: false,
        }
    }
}

impl NavParams {
    pub fn validate(&self) -> Result<(), NavError> {
        let bad = |reason: String| Err(NavError::InvalidConfig { reason });
        if !(self.move_cost.is_finite() && self.move_cost >= 0.0) {
            return bad(format!("move cost {} must be finite and nonnegative", self.move_cost));
        }
        if !(self.collect_base_cost.is_finite() && self.collect_base_cost >= 0.0) {
            return bad(format!("collect cost {} must be finite and nonnegative", self.collect_base_cost));
        }
        if !(self.info_high.is_finite() && self.info_low.is_finite())
            || self.info_high < 0.0
            || self.info_low < 0.0
        {
            return bad("information increments must be finite and nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.p_high) {
            return bad(format!("p_high {} must lie in [0, 1]", self.p_high));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad(format!("discount {} must lie in (0, 1)", self.discount));
        }
        Ok(())
    }

    fn op_discount(&self) -> f64 {
        if self.discount_on_ops {
            self.discount
        } else {
            1.0
        }
    }
}

/// A navigation task: the map plus ordered waypoint and transmission cells.
#[derive(Debug, Clone)]
pub struct NavConfig {
    map: GridMap,
    waypoints: Vec<Cell>,
    transmission: Vec<Cell>,
}

impl NavConfig {
    pub fn new(map: GridMap, waypoints: Vec<Cell>, transmission: Vec<Cell>) -> Result<Self, NavError> {
        let bad = |reason: String| Err(NavError::InvalidConfig { reason });
        if waypoints.is_empty() || transmission.is_empty() {
            return bad("need at least one waypoint and one transmission point".into());
        }
        if waypoints.len() > MAX_WAYPOINTS {
            return bad(format!("at most {MAX_WAYPOINTS} waypoints are supported"));
        }
        let mut seen = Vec::new();
        for (kind, cells) in [("waypoint", &waypoints), ("transmission point", &transmission)] {
            for &c in cells.iter() {
                if !map.is_free(c) {
                    return bad(format!("{kind} ({}, {}) is not a free cell", c.x, c.y));
                }
                if seen.contains(&c) {
                    return bad(format!(
                        "cell ({}, {}) is used by more than one waypoint or transmission point",
                        c.x, c.y
                    ));
                }
                seen.push(c);
            }
        }
        Ok(Self { map, waypoints, transmission })
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    pub fn waypoints(&self) -> &[Cell] {
        &self.waypoints
    }

    pub fn transmission(&self) -> &[Cell] {
        &self.transmission
    }

    pub fn is_transmission(&self, c: Cell) -> bool {
        self.transmission.contains(&c)
    }

    /// Bitmask with every waypoint unvisited.
    pub fn full_mask(&self) -> u32 {
        if self.waypoints.len() == 32 {
            u32::MAX
        } else {
            (1u32 << self.waypoints.len()) - 1
        }
    }
}

/// An environment state: robot cell, bitmask of unvisited waypoints, and
/// the information buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub robot: Cell,
    pub unvisited: u32,
    pub info: f64,
}

/// Hashable key; the buffer is keyed by its bit pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NavStateKey {
    pub robot: (i32, i32),
    pub unvisited: u32,
    pub info_bits: u64,
}

impl NavState {
    pub fn new(robot: Cell, unvisited: u32, info: f64) -> Self {
        Self { robot, unvisited, info }
    }

    pub fn key(&self) -> NavStateKey {
        NavStateKey {
            robot: (self.robot.x, self.robot.y),
            unvisited: self.unvisited,
            info_bits: self.info.to_bits(),
        }
    }

    pub fn unvisited_count(&self) -> u32 {
        self.unvisited.count_ones()
    }

    pub fn is_unvisited(&self, w: usize) -> bool {
        self.unvisited & (1u32 << w) != 0
    }
}

/// Episodes end with the buffer empty, every waypoint observed, and the
/// robot on a transmission point.
pub fn is_terminal_state(config: &NavConfig, state: &NavState) -> bool {
    state.unvisited == 0 && state.info == 0.0 && config.is_transmission(state.robot)
}

/// A control: one of eight moves, observing a waypoint in range,
/// transmitting the buffer, or the terminal self-loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NavAction {
    Move(Direction),
    Collect(usize),
    Transmit,
    Terminate,
}

impl NavAction {
    /// Global id: moves take 0..8, collects 8..8+|W|, then transmit and
    /// terminate.
    pub fn id(self, n_waypoints: usize) -> usize {
        match self {
            NavAction::Move(d) => d as usize,
            NavAction::Collect(w) => 8 + w,
            NavAction::Transmit => 8 + n_waypoints,
            NavAction::Terminate => 9 + n_waypoints,
        }
    }

    pub fn from_id(id: usize, n_waypoints: usize) -> Option<NavAction> {
        match id {
            0..=7 => Some(NavAction::Move(Direction::ALL[id])),
            _ if id < 8 + n_waypoints => Some(NavAction::Collect(id - 8)),
            _ if id == 8 + n_waypoints => Some(NavAction::Transmit),
            _ if id == 9 + n_waypoints => Some(NavAction::Terminate),
            _ => None,
        }
    }

    pub fn label(self) -> String {
        match self {
            NavAction::Move(d) => format!("move_{}", d.label()),
            NavAction::Collect(w) => format!("collect_{w}"),
            NavAction::Transmit => "transmit".into(),
            NavAction::Terminate => "terminate".into(),
        }
    }
}

/// Feasible actions in ascending `NavAction` order. Terminal states get
/// only the self-loop.
pub fn feasible_actions(
    config: &NavConfig,
    params: &NavParams,
    dists: &DistanceField,
    state: &NavState,
) -> Vec<NavAction> {
    if is_terminal_state(config, state) {
        return vec![NavAction::Terminate];
    }
    let mut out = Vec::new();
    for dir in Direction::ALL {
        if config.map.neighbor(state.robot, dir).is_some() {
            out.push(NavAction::Move(dir));
        }
    }
    for (w, &cell) in config.waypoints.iter().enumerate() {
        if state.is_unvisited(w) {
            let d = dists.dist(state.robot, cell).expect("special cells are connected");
            if d <= params.observe_radius {
                out.push(NavAction::Collect(w));
            }
        }
    }
    if state.info > 0.0 && config.is_transmission(state.robot) {
        out.push(NavAction::Transmit);
    }
    out
}

/// The random part of a collect step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollectOutcome {
    High,
    Low,
}

/// One action's transition law: the stage cost, the discount on the
/// successor value, and the successor states with their probabilities.
#[derive(Debug, Clone)]
pub struct TransitionLaw {
    pub cost: f64,
    pub discount: f64,
    pub outcomes: Vec<(f64, NavState)>,
}

/// The full law of one action from one state.
pub fn transition_support(
    config: &NavConfig,
    params: &NavParams,
    dists: &DistanceField,
    state: &NavState,
    action: NavAction,
) -> Result<TransitionLaw, NavError> {
    let infeasible = |reason: String| Err(NavError::InvalidAction { reason });
    match action {
        NavAction::Move(dir) => {
            let Some(next) = config.map.neighbor(state.robot, dir) else {
                return infeasible(format!(
                    "move {} from ({}, {}) leaves the free cells",
                    dir.label(),
                    state.robot.x,
                    state.robot.y
                ));
            };
            Ok(TransitionLaw {
                cost: params.move_cost,
                discount: params.discount,
                outcomes: vec![(1.0, NavState { robot: next, ..*state })],
            })
        }
        NavAction::Collect(w) => {
            if w >= config.waypoints.len() || !state.is_unvisited(w) {
                return infeasible(format!("waypoint {w} is not awaiting observation"));
            }
            let d = dists
                .dist(state.robot, config.waypoints[w])
                .expect("special cells are connected");
            if d > params.observe_radius {
                return infeasible(format!(
                    "waypoint {w} at distance {d} is outside radius {}",
                    params.observe_radius
                ));
            }
            let cost = params.collect_base_cost * (1.0 + d as f64);
            let discount = params.op_discount();
            let mask = state.unvisited & !(1u32 << w);
            let high = NavState { unvisited: mask, info: state.info + params.info_high, ..*state };
            let low = NavState { unvisited: mask, info: state.info + params.info_low, ..*state };
            let outcomes = if params.p_high == 1.0 {
                vec![(1.0, high)]
            } else if params.p_high == 0.0 {
                vec![(1.0, low)]
            } else {
                vec![(params.p_high, high), (1.0 - params.p_high, low)]
            };
            Ok(TransitionLaw { cost, discount, outcomes })
        }
        NavAction::Transmit => {
            if !config.is_transmission(state.robot) {
                return infeasible("transmit away from a transmission point".into());
            }
            if state.info <= 0.0 {
                return infeasible("transmit with an empty buffer".into());
            }
            Ok(TransitionLaw {
                cost: -state.info,
                discount: params.op_discount(),
                outcomes: vec![(1.0, NavState { info: 0.0, ..*state })],
            })
        }
        NavAction::Terminate => {
            if !is_terminal_state(config, state) {
                return infeasible("terminate before the task is complete".into());
            }
            Ok(TransitionLaw { cost: 0.0, discount: 1.0, outcomes: vec![(1.0, *state)] })
        }
    }
}

/// One step with an explicit collect outcome (ignored by other actions).
pub fn transition_with_outcome(
    config: &NavConfig,
    params: &NavParams,
    dists: &DistanceField,
    state: &NavState,
    action: NavAction,
    outcome: CollectOutcome,
) -> Result<(NavState, f64, f64), NavError> {
    let law = transition_support(config, params, dists, state, action)?;
    let next = match action {
        NavAction::Collect(_) if law.outcomes.len() == 2 => {
            match outcome {
                CollectOutcome::High => law.outcomes[0].1,
                CollectOutcome::Low => law.outcomes[1].1,
            }
        }
        _ => law.outcomes[0].1,
    };
    Ok((next, law.cost, law.discount))
}

/// One sampled step: collect outcomes are high with probability `p_high`.
pub fn nav_transition(
    config: &NavConfig,
    params: &NavParams,
    dists: &DistanceField,
    state: &NavState,
    action: NavAction,
    rng: &mut dyn RngCore,
) -> Result<(NavState, f64, f64), NavError> {
    let outcome = if rng.gen_range(0.0..1.0) < params.p_high {
        CollectOutcome::High
    } else {
        CollectOutcome::Low
    };
    transition_with_outcome(config, params, dists, state, action, outcome)
}

/// The 6 state summary statistics:
/// unvisited count; mean and population standard deviation of the pairwise
/// distances among unvisited waypoints; distance to the nearest unvisited
/// waypoint; distance to the nearest transmission point; buffer content.
/// The vector is zero exactly on terminal states.
pub fn extract_features(
    config: &NavConfig,
    dists: &DistanceField,
    state: &NavState,
) -> [f64; FEATURE_DIM] {
    let unvisited: Vec<Cell> = config
        .waypoints
        .iter()
        .enumerate()
        .filter(|(w, _)| state.is_unvisited(*w))
        .map(|(_, &c)| c)
        .collect();
    let mut pair_dists = Vec::new();
    for i in 0..unvisited.len() {
        for j in (i + 1)..unvisited.len() {
            let d = dists.dist(unvisited[i], unvisited[j]).expect("special cells are connected");
            pair_dists.push(d as f64);
        }
    }
    let (mean, std) = if pair_dists.is_empty() {
        (0.0, 0.0)
    } else {
        // Two-pass moments keep the result independent of roundoff order
        // tricks and exactly reproducible under grid symmetries.
        let mean = pair_dists.iter().sum::<f64>() / pair_dists.len() as f64;
        let var = pair_dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / pair_dists.len() as f64;
        (mean, var.sqrt())
    };
    let nearest_unvisited = unvisited
        .iter()
        .map(|&c| dists.dist(state.robot, c).expect("special cells are connected"))
        .min()
        .map_or(0.0, |d| d as f64);
    let nearest_transmission = config
        .transmission
        .iter()
        .map(|&c| dists.dist(state.robot, c).expect("special cells are connected"))
        .min()
        .expect("configurations have a transmission point") as f64;
    [
        unvisited.len() as f64,
        mean,
        std,
        nearest_unvisited,
        nearest_transmission,
        state.info,
    ]
}

/// Quadratic expansion: a nonterminal indicator, the 6 inputs, and the 21
/// products f_i * f_j for i <= j. Zero input maps to zero output.
pub fn expand_polynomial(f: &[f64; FEATURE_DIM]) -> [f64; POLY_DIM] {
    let mut out = [0.0; POLY_DIM];
    out[0] = if f.iter().any(|&x| x != 0.0) { 1.0 } else { 0.0 };
    out[1..7].copy_from_slice(f);
    let mut k = 7;
    for i in 0..FEATURE_DIM {
        for j in i..FEATURE_DIM {
            out[k] = f[i] * f[j];
            k += 1;
        }
    }
    out
}

/// Model value of a state under a 28-dimensional parameter vector.
pub fn nav_model_value(
    config: &NavConfig,
    dists: &DistanceField,
    state: &NavState,
    theta: &[f64],
) -> f64 {
    let poly = expand_polynomial(&extract_features(config, dists, state));
    poly.iter().zip(theta).map(|(a, b)| a * b).sum()
}

/// Nearest entry of `cells` (by BFS distance from `from`) among the indices
/// where `keep` holds; ties go to the lowest index.
fn nearest_cell(
    dists: &DistanceField,
    from: Cell,
    cells: &[Cell],
    mut keep: impl FnMut(usize) -> bool,
) -> Option<(usize, u32)> {
    let mut best: Option<(usize, u32)> = None;
    for (k, &c) in cells.iter().enumerate() {
        if !keep(k) {
            continue;
        }
        let d = dists.dist(from, c).expect("special cells are connected");
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best
}

/// First direction in the fixed order whose step moves one unit closer (in
/// BFS distance) to the target.
fn move_toward(
    config: &NavConfig,
    dists: &DistanceField,
    from: Cell,
    target: Cell,
) -> NavAction {
    let d = dists.dist(from, target).expect("special cells are connected");
    for dir in Direction::ALL {
        if let Some(n) = config.map.neighbor(from, dir) {
            if dists.dist(n, target) == Some(d - 1) {
                return NavAction::Move(dir);
            }
        }
    }
    unreachable!("BFS distance decreases along some neighbor");
}

/// The one-parameter threshold policy. With waypoints left and a loaded
/// buffer, the robot heads for the transmission side exactly when
/// d_waypoint >= gamma * d_transmission / info, so larger gamma postpones
/// delivery; an empty buffer or an exhausted waypoint list forces the
/// respective branch. Within a branch the robot observes or transmits when
/// possible and otherwise steps toward the nearest relevant cell.
pub fn threshold_policy_action(
    config: &NavConfig,
    params: &NavParams,
    dists: &DistanceField,
    state: &NavState,
    gamma: f64,
) -> NavAction {
    if is_terminal_state(config, state) {
        return NavAction::Terminate;
    }
    let nearest_w = nearest_cell(dists, state.robot, &config.waypoints, |w| state.is_unvisited(w));
    let (t_idx, t_dist) = nearest_cell(dists, state.robot, &config.transmission, |_| true)
        .expect("configurations have a transmission point");
    let to_transmission = match nearest_w {
        None => true,
        Some((_, dw)) => {
            state.info > 0.0 && dw as f64 >= gamma * t_dist as f64 / state.info
        }
    };
    if to_transmission {
        if t_dist == 0 {
            if state.info > 0.0 {
                return NavAction::Transmit;
            }
            // Empty buffer on a transmission point with no waypoints left
            // is terminal, handled above; with waypoints left the branch
            // is not taken.
            unreachable!("transmission branch with nothing to transmit");
        }
        return move_toward(config, dists, state.robot, config.transmission[t_idx]);
    }
    let (w_idx, w_dist) = nearest_w.expect("waypoint branch requires an unvisited waypoint");
    if w_dist <= params.observe_radius {
        NavAction::Collect(w_idx)
    } else {
        move_toward(config, dists, state.robot, config.waypoints[w_idx])
    }
}

/// Myopic reference policy: head for the nearest relevant cell (unvisited
/// waypoints, plus transmission points once the buffer is loaded), observe
/// or transmit when possible. Ties prefer waypoints, then lower indices.
pub fn nearest_relevant_action(
    config: &NavConfig,
    params: &NavParams,
    dists: &DistanceField,
    state: &NavState,
) -> NavAction {
    if is_terminal_state(config, state) {
        return NavAction::Terminate;
    }
    let nearest_w = nearest_cell(dists, state.robot, &config.waypoints, |w| state.is_unvisited(w));
    let nearest_t = nearest_cell(dists, state.robot, &config.transmission, |_| true)
        .expect("configurations have a transmission point");
    let use_waypoint = match nearest_w {
        None => false,
        Some((_, dw)) => {
            if state.info > 0.0 {
                dw <= nearest_t.1
            } else {
                true
            }
        }
    };
    if use_waypoint {
        let (w_idx, dw) = nearest_w.expect("checked above");
        if dw <= params.observe_radius {
            NavAction::Collect(w_idx)
        } else {
            move_toward(config, dists, state.robot, config.waypoints[w_idx])
        }
    } else {
        let (t_idx, dt) = nearest_t;
        if dt == 0 {
            if state.info > 0.0 {
                return NavAction::Transmit;
            }
            unreachable!("transmission target with nothing to transmit");
        }
        move_toward(config, dists, state.robot, config.transmission[t_idx])
    }
}

/// Greedy one-step improvement of a fitted model: the feasible action
/// minimizing c + alpha * sigma(successor model values), with the risk
/// mapping applied exactly to the outcome law. Ties resolve in action
/// order.
pub fn one_step_lookahead_action(
    config: &NavConfig,
    params: &NavParams,
    dists: &DistanceField,
    state: &NavState,
    spec: &RiskMappingSpec,
    theta: &[f64],
) -> Result<NavAction, NavError> {
    let mut best: Option<(f64, NavAction)> = None;
    for action in feasible_actions(config, params, dists, state) {
        let law = transition_support(config, params, dists, state, action)?;
        let probs: Vec<f64> = law.outcomes.iter().map(|(p, _)| *p).collect();
        let values: Vec<f64> = law
            .outcomes
            .iter()
            .map(|(_, s)| nav_model_value(config, dists, s, theta))
            .collect();
        let outcome_dist = DiscreteDistribution::from_weights(&probs)?;
        let sigma = evaluate_risk(spec, &outcome_dist, &values)?;
        let q = law.cost + law.discount * sigma;
        if best.map_or(true, |(bq, _)| q < bq) {
            best = Some((q, action));
        }
    }
    Ok(best.expect("nonterminal states have feasible actions").1)
}

/// Step cap for threshold-policy walks: generous slack over the worst
/// shuttle route, as a safety net only.
pub fn step_cap(config: &NavConfig, dists: &DistanceField) -> usize {
    let targets = config.waypoints.len() + config.transmission.len();
    (4 * dists.diameter() as usize * targets).max(64)
}

/// Variable-depth lookahead value of the threshold policy: discounted move
/// costs accumulate until the policy observes or transmits, and that first
/// operation closes the walk with its own cost plus the risk mapping applied
/// to a successor batch of model values. Closing with the full one-step
/// target keeps the transmission payoff inside the score; dropping it would
/// bias the threshold search against ever transmitting.
/// Terminal states are worth zero.
pub fn lookahead_value(
    config: &NavConfig,
    params: &NavParams,
    dists: &DistanceField,
    state: &NavState,
    gamma: f64,
    spec: &RiskMappingSpec,
    theta: &[f64],
    rng: &mut dyn RngCore,
) -> f64 {
    let mut acc = 0.0;
    let mut disc = 1.0;
    let mut s = *state;
    for _ in 0..step_cap(config, dists) {
        if is_terminal_state(config, &s) {
            return acc;
        }
        let action = threshold_policy_action(config, params, dists, &s, gamma);
        let law = transition_support(config, params, dists, &s, action)
            .expect("threshold policy actions are feasible");
        match action {
            NavAction::Move(_) => {
                acc += disc * law.cost;
                disc *= law.discount;
                s = law.outcomes[0].1;
            }
            NavAction::Terminate => return acc,
            NavAction::Collect(_) | NavAction::Transmit => {
                let n = spec.batch_size();
                let mut values = Vec::with_capacity(n);
                for _ in 0..n {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    let mut cum = 0.0;
                    let mut chosen = law.outcomes.last().expect("laws have outcomes").1;
                    for &(p, succ) in &law.outcomes {
                        cum += p;
                        if u < cum {
                            chosen = succ;
                            break;
                        }
                    }
                    values.push(nav_model_value(config, dists, &chosen, theta));
                }
                let sigma = empirical_risk(spec, &values);
                return acc + disc * (law.cost + law.discount * sigma);
            }
        }
    }
    // Cap reached: close with the model value of where the walk stands.
    acc + disc * nav_model_value(config, dists, &s, theta)
}

/// The default threshold grid: 0, 0.25, ..., 5.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..21).map(|k| 0.25 * k as f64).collect()
}

#[derive(Debug, Clone)]
pub struct GammaSearch {
    pub best_gamma: f64,
    /// Test-set average lookahead value per grid entry.
    pub scores: Vec<f64>,
}

/// Picks the threshold minimizing the test-set average lookahead value.
/// Every grid entry reuses the same per-state random stream (common random
/// numbers), so the comparison is coupled; ties go to the smaller
/// threshold.
pub fn improve_gamma(
    config: &NavConfig,
    params: &NavParams,
    dists: &DistanceField,
    spec: &RiskMappingSpec,
    theta: &[f64],
    grid: &[f64],
    test_states: &[NavState],
    master_seed: u64,
) -> Result<GammaSearch, NavError> {
    if grid.is_empty() || test_states.is_empty() {
        return Err(NavError::InvalidConfig {
            reason: "threshold search needs a nonempty grid and test set".into(),
        });
    }
    let scores: Vec<f64> = grid
        .iter()
        .map(|&gamma| {
            // Collect per-state values in index order and sum sequentially:
            // a parallel reduction's grouping depends on scheduling and
            // would perturb the last ulp between runs.
            let values: Vec<f64> = test_states
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut rng = stream_rng(master_seed, &[i as u64]);
                    lookahead_value(config, params, dists, s, gamma, spec, theta, &mut rng)
                })
                .collect();
            values.iter().sum::<f64>() / test_states.len() as f64
        })
        .collect();
    let mut best = 0usize;
    for (k, &score) in scores.iter().enumerate() {
        if score < scores[best] {
            best = k;
        }
    }
    Ok(GammaSearch { best_gamma: grid[best], scores })
}

/// Draws a random task: obstacle cells uniformly without replacement,
/// rejecting disconnected maps, then waypoints and transmission points on
/// distinct free cells.
pub fn sample_config(
    width: usize,
    height: usize,
    n_obstacles: usize,
    n_waypoints: usize,
    n_transmission: usize,
    rng: &mut dyn RngCore,
) -> Result<NavConfig, NavError> {
    const ATTEMPTS: usize = 1000;
    let cells = width * height;
    if n_obstacles + n_waypoints + n_transmission >= cells {
        return Err(NavError::InvalidConfig {
            reason: "grid too small for the requested obstacles and points".into(),
        });
    }
    for _ in 0..ATTEMPTS {
        let picks = rand::seq::index::sample(rng, cells, n_obstacles);
        let obstacles: Vec<Cell> = picks
            .iter()
            .map(|k| Cell::new((k % width) as i32, (k / width) as i32))
            .collect();
        let Ok(map) = GridMap::new(width, height, &obstacles) else {
            continue;
        };
        let free = map.free_cells();
        if free.len() < n_waypoints + n_transmission {
            continue;
        }
        let picks = rand::seq::index::sample(rng, free.len(), n_waypoints + n_transmission);
        let special: Vec<Cell> = picks.iter().map(|k| free[k]).collect();
        let waypoints = special[..n_waypoints].to_vec();
        let transmission = special[n_waypoints..].to_vec();
        if let Ok(config) = NavConfig::new(map, waypoints, transmission) {
            return Ok(config);
        }
    }
    Err(NavError::SamplingExhausted { attempts: ATTEMPTS })
}

/// Training start state: robot uniform on free cells, the unvisited count
/// cycling through 1..=|W| with the episode index, the unvisited set
/// uniform at that count, and an empty buffer.
pub fn sample_start(config: &NavConfig, episode_index: u64, rng: &mut dyn RngCore) -> NavState {
    let free = config.map.free_cells();
    let robot = free[rng.gen_range(0..free.len())];
    let n = config.waypoints.len();
    let level = (episode_index as usize % n) + 1;
    let picks = rand::seq::index::sample(rng, n, level);
    let mut mask = 0u32;
    for w in picks.iter() {
        mask |= 1u32 << w;
    }
    NavState::new(robot, mask, 0.0)
}

/// Threshold-search test state: like a training start, but the buffer is
/// drawn from the reachable amounts (a uniform number of the already
/// observed waypoints' increments, each high or low independently), so the
/// branch condition actually discriminates thresholds.
pub fn sample_test_state(
    config: &NavConfig,
    params: &NavParams,
    index: u64,
    rng: &mut dyn RngCore,
) -> NavState {
    let mut state = sample_start(config, index, rng);
    let collected = config.waypoints.len() - state.unvisited_count() as usize;
    let batch = rng.gen_range(0..=collected);
    let mut info = 0.0;
    for _ in 0..batch {
        info += if rng.gen_range(0.0..1.0) < params.p_high {
            params.info_high
        } else {
            params.info_low
        };
    }
    state.info = info;
    state
}

/// The navigation environment under a fixed threshold policy, as a sampled
/// process with the quadratic feature expansion.
#[derive(Debug, Clone)]
pub struct NavProcess {
    config: NavConfig,
    params: NavParams,
    dists: DistanceField,
    gamma: f64,
}

impl NavProcess {
    pub fn new(config: NavConfig, params: NavParams, gamma: f64) -> Result<Self, NavError> {
        params.validate()?;
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(NavError::InvalidConfig {
                reason: format!("threshold {gamma} must be finite and nonnegative"),
            });
        }
        let dists = DistanceField::new(config.map());
        Ok(Self { config, params, dists, gamma })
    }

    pub fn config(&self) -> &NavConfig {
        &self.config
    }

    pub fn params(&self) -> &NavParams {
        &self.params
    }

    pub fn dists(&self) -> &DistanceField {
        &self.dists
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl crate::feature_eval::SampledProcess for NavProcess {
    type State = NavState;

    fn feature_dim(&self) -> usize {
        POLY_DIM
    }

    fn sample_start(&self, episode_index: u64, rng: &mut dyn RngCore) -> NavState {
        sample_start(&self.config, episode_index, rng)
    }

    fn is_terminal(&self, state: &NavState) -> bool {
        is_terminal_state(&self.config, state)
    }

    fn step(
        &self,
        state: &NavState,
        batch: usize,
        rng: &mut dyn RngCore,
    ) -> crate::feature_eval::ProcessStep<NavState> {
        let action = threshold_policy_action(&self.config, &self.params, &self.dists, state, self.gamma);
        let law = transition_support(&self.config, &self.params, &self.dists, state, action)
            .expect("threshold policy actions are feasible");
        let successors = (0..batch.max(1))
            .map(|_| {
                let u: f64 = rng.gen_range(0.0..1.0);
                let mut cum = 0.0;
                let mut chosen = law.outcomes.last().expect("laws have outcomes").1;
                for &(p, succ) in &law.outcomes {
                    cum += p;
                    if u < cum {
                        chosen = succ;
                        break;
                    }
                }
                chosen
            })
            .collect();
        crate::feature_eval::ProcessStep { cost: law.cost, discount: law.discount, successors }
    }

    fn features(&self, state: &NavState, out: &mut [f64]) {
        let poly = expand_polynomial(&extract_features(&self.config, &self.dists, state));
        out.copy_from_slice(&poly);
    }
}

/// Collect randomness for a rollout: a live stream, or one predrawn
/// outcome per waypoint so coupled policies see identical increments.
pub enum OutcomeSource<'a> {
    Stream(&'a mut dyn RngCore),
    Latent(Vec<CollectOutcome>),
}

impl OutcomeSource<'_> {
    fn outcome_for(&mut self, params: &NavParams, action: NavAction) -> CollectOutcome {
        match (self, action) {
            (OutcomeSource::Latent(table), NavAction::Collect(w)) => table[w],
            (OutcomeSource::Stream(rng), NavAction::Collect(_)) => {
                if rng.gen_range(0.0..1.0) < params.p_high {
                    CollectOutcome::High
                } else {
                    CollectOutcome::Low
                }
            }
            // Other actions are deterministic.
            _ => CollectOutcome::High,
        }
    }
}

/// Draws the per-waypoint outcome table for one coupled evaluation episode.
pub fn draw_outcome_table(config: &NavConfig, params: &NavParams, rng: &mut dyn RngCore) -> Vec<CollectOutcome> {
    (0..config.waypoints.len())
        .map(|_| {
            if rng.gen_range(0.0..1.0) < params.p_high {
                CollectOutcome::High
            } else {
                CollectOutcome::Low
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub state: NavState,
    pub action: NavAction,
    pub cost: f64,
    pub discount: f64,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
    pub final_state: NavState,
    pub truncated: bool,
}

/// Runs a policy until termination or the step cap.
pub fn rollout(
    config: &NavConfig,
    params: &NavParams,
    dists: &DistanceField,
    policy: &mut dyn FnMut(&NavState) -> NavAction,
    start: &NavState,
    outcomes: &mut OutcomeSource<'_>,
    max_steps: usize,
) -> Result<Rollout, NavError> {
    let mut s = *start;
    let mut steps = Vec::new();
    while !is_terminal_state(config, &s) {
        if steps.len() >= max_steps {
            return Ok(Rollout { steps, final_state: s, truncated: true });
        }
        let action = policy(&s);
        let outcome = outcomes.outcome_for(params, action);
        let (next, cost, discount) =
            transition_with_outcome(config, params, dists, &s, action, outcome)?;
        steps.push(RolloutStep { state: s, action, cost, discount });
        s = next;
    }
    Ok(Rollout { steps, final_state: s, truncated: false })
}

/// A navigation task with its dynamics parameters, as stored on disk.
#[derive(Debug, Clone)]
pub struct NavInstance {
    pub config: NavConfig,
    pub params: NavParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NavInstanceWire {
    width: usize,
    height: usize,
    #[serde(default)]
    obstacles: Vec<Cell>,
    waypoints: Vec<Cell>,
    transmission: Vec<Cell>,
    #[serde(default)]
    params: NavParams,
}

impl NavInstance {
    pub fn new(config: NavConfig, params: NavParams) -> Result<Self, NavError> {
        params.validate()?;
        Ok(Self { config, params })
    }

    pub fn from_json_str(json: &str) -> Result<Self, NavError> {
        let wire: NavInstanceWire = serde_json::from_str(json)
            .map_err(|e| NavError::InvalidConfig { reason: format!("JSON parse error: {e}") })?;
        let map = GridMap::new(wire.width, wire.height, &wire.obstacles)?;
        let config = NavConfig::new(map, wire.waypoints, wire.transmission)?;
        NavInstance::new(config, wire.params)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.wire()).expect("instance wire form serializes")
    }

    fn wire(&self) -> NavInstanceWire {
        NavInstanceWire {
            width: self.config.map().width(),
            height: self.config.map().height(),
            obstacles: self.config.map().obstacles(),
            waypoints: self.config.waypoints().to_vec(),
            transmission: self.config.transmission().to_vec(),
            params: self.params,
        }
    }
}

/// Serializes a task list as one JSON array.
pub fn instances_to_json_string(instances: &[NavInstance]) -> String {
    let wires: Vec<NavInstanceWire> = instances.iter().map(|i| i.wire()).collect();
    serde_json::to_string_pretty(&wires).expect("instance wire form serializes")
}

/// Parses a JSON array of tasks.
pub fn instances_from_json_str(json: &str) -> Result<Vec<NavInstance>, NavError> {
    let wires: Vec<NavInstanceWire> = serde_json::from_str(json)
        .map_err(|e| NavError::InvalidConfig { reason: format!("JSON parse error: {e}") })?;
    wires
        .into_iter()
        .map(|wire| {
            let map = GridMap::new(wire.width, wire.height, &wire.obstacles)?;
            let config = NavConfig::new(map, wire.waypoints, wire.transmission)?;
            NavInstance::new(config, wire.params)
        })
        .collect()
}

/// Restart law of the episodic task, for exact solvers: the unvisited
/// count uniform on 1..=|W|, the unvisited set uniform at that count, the
/// robot uniform on free cells, and an empty buffer.
pub fn start_state_support(config: &NavConfig) -> Vec<(f64, NavState)> {
    let free = config.map().free_cells();
    let n = config.waypoints().len();
    let masks_by_count: Vec<Vec<u32>> = {
        let mut by_count: Vec<Vec<u32>> = vec![Vec::new(); n + 1];
        for mask in 1..(1u64 << n) as u64 {
            let m = mask as u32;
            by_count[m.count_ones() as usize].push(m);
        }
        by_count
    };
    let mut out = Vec::new();
    for level in 1..=n {
        let masks = &masks_by_count[level];
        let p = 1.0 / (n as f64 * masks.len() as f64 * free.len() as f64);
        for &mask in masks {
            for &cell in &free {
                out.push((p, NavState::new(cell, mask, 0.0)));
            }
        }
    }
    out
}

/// Deduplicating state index for enumeration.
#[derive(Debug, Default)]
pub struct StateIndex {
    ids: HashMap<NavStateKey, usize>,
    states: Vec<NavState>,
}

impl StateIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, state: NavState) -> (usize, bool) {
        let next = self.states.len();
        match self.ids.entry(state.key()) {
            std::collections::hash_map::Entry::Occupied(e) => (*e.get(), false),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(next);
                self.states.push(state);
                (next, true)
            }
        }
    }

    pub fn get(&self, state: &NavState) -> Option<usize> {
        self.ids.get(&state.key()).copied()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[NavState] {
        &self.states
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_eval::SampledProcess;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty_map(w: usize, h: usize) -> GridMap {
        GridMap::new(w, h, &[]).unwrap()
    }

    fn cell(x: i32, y: i32) -> Cell {
        Cell::new(x, y)
    }

    /// Empty 5x5 with two waypoints in a column and one transmission point.
    fn frozen_config() -> (NavConfig, DistanceField) {
        let config = NavConfig::new(
            empty_map(5, 5),
            vec![cell(2, 0), cell(2, 4)],
            vec![cell(4, 0)],
        )
        .unwrap();
        let dists = DistanceField::new(config.map());
        (config, dists)
    }

    #[test]
    fn map_validation() {
        assert!(GridMap::new(0, 3, &[]).is_err());
        assert!(GridMap::new(3, 3, &[cell(3, 0)]).is_err());
        assert!(GridMap::new(3, 3, &[cell(1, 1), cell(1, 1)]).is_err());
        // A full wall splits the free cells.
        let wall = [cell(1, 0), cell(1, 1), cell(1, 2)];
        assert!(GridMap::new(3, 3, &wall).is_err());
        // A gap reconnects them.
        let gapped = [cell(1, 0), cell(1, 1)];
        assert!(GridMap::new(3, 3, &gapped).is_ok());
    }

    #[test]
    fn bfs_distances_are_chebyshev_on_empty_grids() {
        let map = empty_map(5, 5);
        let d = DistanceField::new(&map);
        assert_eq!(d.dist(cell(0, 0), cell(4, 4)), Some(4));
        assert_eq!(d.dist(cell(0, 0), cell(4, 1)), Some(4));
        assert_eq!(d.dist(cell(2, 2), cell(2, 2)), Some(0));
        assert_eq!(d.diameter(), 4);
    }

    #[test]
    fn bfs_distances_go_around_obstacles() {
        // Wall with a gap at the bottom.
        let map = GridMap::new(3, 3, &[cell(1, 0), cell(1, 1)]).unwrap();
        let d = DistanceField::new(&map);
        assert_eq!(d.dist(cell(0, 0), cell(2, 0)), Some(4));
        assert_eq!(d.dist(cell(0, 0), cell(1, 2)), Some(2));
    }

    #[test]
    fn config_validation() {
        let map = GridMap::new(3, 3, &[cell(1, 1)]).unwrap();
        // Waypoint on the obstacle.
        assert!(NavConfig::new(map.clone(), vec![cell(1, 1)], vec![cell(0, 0)]).is_err());
        // Waypoint and transmission share a cell.
        assert!(NavConfig::new(map.clone(), vec![cell(0, 0)], vec![cell(0, 0)]).is_err());
        // Duplicate waypoint.
        assert!(
            NavConfig::new(map.clone(), vec![cell(0, 0), cell(0, 0)], vec![cell(2, 2)]).is_err()
        );
        assert!(NavConfig::new(map, vec![cell(0, 0)], vec![]).is_err());
    }

    #[test]
    fn frozen_feature_vector() {
        let (config, dists) = frozen_config();
        let state = NavState::new(cell(0, 0), 0b11, 3.0);
        let f = extract_features(&config, &dists, &state);
        assert_eq!(f, [2.0, 4.0, 0.0, 2.0, 4.0, 3.0]);
    }

    #[test]
    fn features_vanish_exactly_on_terminal_states() {
        let (config, dists) = frozen_config();
        let terminal = NavState::new(cell(4, 0), 0, 0.0);
        assert!(is_terminal_state(&config, &terminal));
        assert_eq!(extract_features(&config, &dists, &terminal), [0.0; 6]);
        assert_eq!(expand_polynomial(&[0.0; 6]), [0.0; 28]);

        // Off the transmission point the distance feature is positive.
        let not_terminal = NavState::new(cell(3, 0), 0, 0.0);
        assert!(!is_terminal_state(&config, &not_terminal));
        let f = extract_features(&config, &dists, &not_terminal);
        assert_eq!(f[4], 1.0);
        assert_eq!(expand_polynomial(&f)[0], 1.0);
    }

    #[test]
    fn polynomial_expansion_layout() {
        let f = [2.0, 4.0, 0.0, 2.0, 4.0, 3.0];
        let p = expand_polynomial(&f);
        assert_eq!(p.len(), 28);
        assert_eq!(p[0], 1.0);
        assert_eq!(&p[1..7], &f);
        // First products row: f0 * f_j for j = 0..6.
        assert_eq!(&p[7..13], &[4.0, 8.0, 0.0, 4.0, 8.0, 6.0]);
        // Last product is f5 * f5.
        assert_eq!(p[27], 9.0);
    }

    /// Joint transforms of a configuration and state must leave the summary
    /// statistics bit-identical: distances are integers and the moment
    /// computations enumerate index pairs in the same order.
    #[test]
    fn features_invariant_under_grid_symmetries() {
        let base_obstacles = vec![cell(1, 1), cell(2, 3), cell(4, 2)];
        let (w, h) = (6i32, 5i32);
        let waypoints = vec![cell(0, 0), cell(5, 4), cell(3, 0)];
        let transmission = vec![cell(5, 0)];
        let states = [
            NavState::new(cell(2, 2), 0b101, 12.0),
            NavState::new(cell(0, 4), 0b111, 0.0),
            NavState::new(cell(5, 0), 0b010, 2.0),
        ];
        let config = NavConfig::new(
            GridMap::new(w as usize, h as usize, &base_obstacles).unwrap(),
            waypoints.clone(),
            transmission.clone(),
        )
        .unwrap();
        let dists = DistanceField::new(config.map());

        let rot = |c: Cell| cell(h - 1 - c.y, c.x);
        let flip = |c: Cell| cell(w - 1 - c.x, c.y);
        let shift = |c: Cell| cell(c.x + 2, c.y + 1);

        // Rotation by 90 degrees swaps width and height.
        let rotated = NavConfig::new(
            GridMap::new(h as usize, w as usize, &base_obstacles.iter().map(|&c| rot(c)).collect::<Vec<_>>()).unwrap(),
            waypoints.iter().map(|&c| rot(c)).collect(),
            transmission.iter().map(|&c| rot(c)).collect(),
        )
        .unwrap();
        let rotated_dists = DistanceField::new(rotated.map());

        let flipped = NavConfig::new(
            GridMap::new(w as usize, h as usize, &base_obstacles.iter().map(|&c| flip(c)).collect::<Vec<_>>()).unwrap(),
            waypoints.iter().map(|&c| flip(c)).collect(),
            transmission.iter().map(|&c| flip(c)).collect(),
        )
        .unwrap();
        let flipped_dists = DistanceField::new(flipped.map());

        // Translation embeds the grid at offset (2, 1) in a larger canvas
        // whose extra cells are all blocked.
        let mut padded_obstacles: Vec<Cell> =
            base_obstacles.iter().map(|&c| shift(c)).collect();
        for y in 0..(h + 3) {
            for x in 0..(w + 4) {
                let inside = (2..w + 2).contains(&x) && (1..h + 1).contains(&y);
                if !inside {
                    padded_obstacles.push(cell(x, y));
                }
            }
        }
        let shifted = NavConfig::new(
            GridMap::new((w + 4) as usize, (h + 3) as usize, &padded_obstacles).unwrap(),
            waypoints.iter().map(|&c| shift(c)).collect(),
            transmission.iter().map(|&c| shift(c)).collect(),
        )
        .unwrap();
        let shifted_dists = DistanceField::new(shifted.map());

        for s in &states {
            let reference = extract_features(&config, &dists, s);
            let cases: [(&NavConfig, &DistanceField, Cell); 3] = [
                (&rotated, &rotated_dists, rot(s.robot)),
                (&flipped, &flipped_dists, flip(s.robot)),
                (&shifted, &shifted_dists, shift(s.robot)),
            ];
            for (cfg, dst, robot) in cases {
                let mapped = NavState::new(robot, s.unvisited, s.info);
                let f = extract_features(cfg, dst, &mapped);
                assert_eq!(f, reference, "summary changed under a symmetry");
                assert_eq!(
                    expand_polynomial(&f),
                    expand_polynomial(&reference),
                    "expansion changed under a symmetry"
                );
            }
        }
    }

    #[test]
    fn action_ids_round_trip() {
        let n = 3;
        let actions = [
            NavAction::Move(Direction::N),
            NavAction::Move(Direction::NW),
            NavAction::Collect(0),
            NavAction::Collect(2),
            NavAction::Transmit,
            NavAction::Terminate,
        ];
        for a in actions {
            assert_eq!(NavAction::from_id(a.id(n), n), Some(a));
        }
        assert_eq!(NavAction::Transmit.id(n), 11);
        assert_eq!(NavAction::Terminate.id(n), 12);
        assert_eq!(NavAction::from_id(13, n), None);
        assert_eq!(NavAction::Move(Direction::N).label(), "move_n");
        assert_eq!(NavAction::Collect(2).label(), "collect_2");
    }

    #[test]
    fn action_order_matches_id_order() {
        let n = 2;
        let mut actions = vec![
            NavAction::Terminate,
            NavAction::Collect(1),
            NavAction::Move(Direction::SE),
            NavAction::Transmit,
            NavAction::Move(Direction::N),
            NavAction::Collect(0),
        ];
        actions.sort();
        let ids: Vec<usize> = actions.iter().map(|a| a.id(n)).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn feasible_actions_inventory() {
        let (config, dists) = frozen_config();
        let params = NavParams::default();
        // Corner cell: three moves; waypoint 0 at distance 2 is in range.
        let state = NavState::new(cell(0, 0), 0b11, 0.0);
        let actions = feasible_actions(&config, &params, &dists, &state);
        assert_eq!(
            actions,
            vec![
                NavAction::Move(Direction::E),
                NavAction::Move(Direction::SE),
                NavAction::Move(Direction::S),
                NavAction::Collect(0),
            ]
        );
        // On the transmission point with a loaded buffer.
        let state = NavState::new(cell(4, 0), 0, 5.0);
        let actions = feasible_actions(&config, &params, &dists, &state);
        assert!(actions.contains(&NavAction::Transmit));
        assert!(!actions.iter().any(|a| matches!(a, NavAction::Collect(_))));
        // Terminal.
        let state = NavState::new(cell(4, 0), 0, 0.0);
        assert_eq!(feasible_actions(&config, &params, &dists, &state), vec![NavAction::Terminate]);
    }

    #[test]
    fn transitions_follow_the_rules() {
        let (config, dists) = frozen_config();
        let params = NavParams::default();
        let state = NavState::new(cell(0, 0), 0b11, 0.0);

        let (next, cost, disc) = transition_with_outcome(
            &config, &params, &dists, &state, NavAction::Move(Direction::E), CollectOutcome::High,
        )
        .unwrap();
        assert_eq!(next.robot, cell(1, 0));
        assert_eq!((next.unvisited, next.info), (0b11, 0.0));
        assert_eq!(cost, 1.0);
        assert_eq!(disc, 0.95);

        // Collect waypoint 0 at distance 2: cost 0.5 * 3, undiscounted op.
        let (next, cost, disc) = transition_with_outcome(
            &config, &params, &dists, &state, NavAction::Collect(0), CollectOutcome::High,
        )
        .unwrap();
        assert_eq!(next.unvisited, 0b10);
        assert_eq!(next.info, 10.0);
        assert_abs_diff_eq!(cost, 1.5, epsilon = 1e-15);
        assert_eq!(disc, 1.0);
        let (next, ..) = transition_with_outcome(
            &config, &params, &dists, &state, NavAction::Collect(0), CollectOutcome::Low,
        )
        .unwrap();
        assert_eq!(next.info, 2.0);

        // Transmit empties the buffer at its negative cost.
        let loaded = NavState::new(cell(4, 0), 0, 12.0);
        let (next, cost, disc) = transition_with_outcome(
            &config, &params, &dists, &loaded, NavAction::Transmit, CollectOutcome::High,
        )
        .unwrap();
        assert_eq!(next.info, 0.0);
        assert_eq!(cost, -12.0);
        assert_eq!(disc, 1.0);

        // Infeasible requests are rejected.
        assert!(transition_with_outcome(
            &config, &params, &dists, &state, NavAction::Transmit, CollectOutcome::High,
        )
        .is_err());
        assert!(transition_with_outcome(
            &config, &params, &dists, &state, NavAction::Collect(1), CollectOutcome::High,
        )
        .is_err());
    }

    #[test]
    fn transition_support_lists_collect_outcomes() {
        let (config, dists) = frozen_config();
        let params = NavParams::default();
        let state = NavState::new(cell(0, 0), 0b11, 0.0);
        let law =
            transition_support(&config, &params, &dists, &state, NavAction::Collect(0)).unwrap();
        assert_eq!(law.outcomes.len(), 2);
        assert_abs_diff_eq!(law.outcomes[0].0, 0.5, epsilon = 1e-15);
        assert_eq!(law.outcomes[0].1.info, 10.0);
        assert_eq!(law.outcomes[1].1.info, 2.0);

        let mut sure = params;
        sure.p_high = 1.0;
        let law = transition_support(&config, &sure, &dists, &state, NavAction::Collect(0)).unwrap();
        assert_eq!(law.outcomes.len(), 1);

        let law =
            transition_support(&config, &params, &dists, &state, NavAction::Move(Direction::S))
                .unwrap();
        assert_eq!(law.outcomes.len(), 1);
        assert_eq!(law.outcomes[0].0, 1.0);
    }

    #[test]
    fn threshold_policy_branches_on_gamma() {
        // Robot at (2, 2): waypoint 1 at (2, 4) is at distance 2 (within
        // radius), the transmission point (4, 0) at distance 3.
        let (config, dists) = frozen_config();
        let params = NavParams::default();
        let state = NavState::new(cell(2, 2), 0b10, 4.0);
        // gamma = 0: the branch condition 2 >= 0 holds, so head out to
        // transmit.
        let a = threshold_policy_action(&config, &params, &dists, &state, 0.0);
        assert!(matches!(a, NavAction::Move(_)), "expected a move toward (4, 0), got {a:?}");
        // gamma = 5: threshold 5 * 3 / 4 = 3.75 > 2, so keep collecting.
        let a = threshold_policy_action(&config, &params, &dists, &state, 5.0);
        assert_eq!(a, NavAction::Collect(1));
    }

    #[test]
    fn threshold_policy_transmits_on_the_point() {
        let (config, dists) = frozen_config();
        let params = NavParams::default();
        // Standing on the transmission point with a loaded buffer, the
        // branch threshold is zero for any gamma.
        let state = NavState::new(cell(4, 0), 0b01, 7.0);
        for gamma in [0.0, 1.0, 5.0] {
            assert_eq!(
                threshold_policy_action(&config, &params, &dists, &state, gamma),
                NavAction::Transmit
            );
        }
    }

    #[test]
    fn threshold_policy_heads_home_when_done() {
        let (config, dists) = frozen_config();
        let params = NavParams::default();
        // Nothing left to observe, empty buffer, off the transmission
        // point: walk there and terminate on arrival.
        let state = NavState::new(cell(0, 0), 0, 0.0);
        let a = threshold_policy_action(&config, &params, &dists, &state, 1.0);
        assert!(matches!(a, NavAction::Move(_)));
        let terminal = NavState::new(cell(4, 0), 0, 0.0);
        assert_eq!(
            threshold_policy_action(&config, &params, &dists, &terminal, 1.0),
            NavAction::Terminate
        );
    }

    #[test]
    fn first_move_uses_direction_order() {
        // Target straight north; N, NE and NW all reduce the Chebyshev
        // distance on an empty grid, and N comes first in the order.
        let config = NavConfig::new(empty_map(5, 5), vec![cell(2, 0)], vec![cell(4, 4)]).unwrap();
        let dists = DistanceField::new(config.map());
        let params = NavParams {
            observe_radius: 0,
            ..NavParams::default()
        };
        let state = NavState::new(cell(2, 4), 0b1, 0.0);
        let a = threshold_policy_action(&config, &params, &dists, &state, 5.0);
        assert_eq!(a, NavAction::Move(Direction::N));
    }

    #[test]
    fn threshold_policy_terminates_from_random_starts() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let config = sample_config(6, 6, 4, 3, 1, &mut rng).unwrap();
        let params = NavParams::default();
        let dists = DistanceField::new(config.map());
        let cap = step_cap(&config, &dists);
        for episode in 0..20u64 {
            let start = sample_start(&config, episode, &mut rng);
            let mut policy =
                |s: &NavState| threshold_policy_action(&config, &params, &dists, s, 1.0);
            let mut outcomes = OutcomeSource::Stream(&mut rng);
            let run =
                rollout(&config, &params, &dists, &mut policy, &start, &mut outcomes, cap).unwrap();
            assert!(!run.truncated, "episode {episode} hit the step cap");
            assert!(is_terminal_state(&config, &run.final_state));
        }
    }

    #[test]
    fn nearest_relevant_policy_prefers_closer_targets() {
        let (config, dists) = frozen_config();
        let params = NavParams::default();
        // Loaded buffer, waypoint 1 at distance 2 beats transmission at
        // distance 3.
        let state = NavState::new(cell(2, 2), 0b10, 4.0);
        assert_eq!(
            nearest_relevant_action(&config, &params, &dists, &state),
            NavAction::Collect(1)
        );
        // Empty buffer: transmission is irrelevant however close.
        let state = NavState::new(cell(4, 1), 0b10, 0.0);
        let a = nearest_relevant_action(&config, &params, &dists, &state);
        assert!(matches!(a, NavAction::Move(_)));
        // All observed: deliver.
        let state = NavState::new(cell(4, 0), 0, 9.0);
        assert_eq!(nearest_relevant_action(&config, &params, &dists, &state), NavAction::Transmit);
    }

    #[test]
    fn zero_threshold_and_nearest_policies_differ() {
        let (config, dists) = frozen_config();
        let params = NavParams::default();
        // Loaded buffer between targets: the zero-threshold policy heads
        // out to deliver while the myopic reference collects the closer
        // waypoint first.
        let state = NavState::new(cell(2, 2), 0b10, 4.0);
        let threshold = threshold_policy_action(&config, &params, &dists, &state, 0.0);
        let nearest = nearest_relevant_action(&config, &params, &dists, &state);
        assert!(matches!(threshold, NavAction::Move(_)));
        assert_ne!(threshold, nearest);
    }

    #[test]
    fn one_step_lookahead_prefers_negative_cost_under_zero_model() {
        let (config, dists) = frozen_config();
        let params = NavParams::default();
        let spec = RiskMappingSpec::expectation();
        let theta = [0.0; POLY_DIM];
        // On the transmission point with a loaded buffer: transmit costs
        // -7, every alternative is nonnegative.
        let state = NavState::new(cell(4, 0), 0b10, 7.0);
        let a = one_step_lookahead_action(&config, &params, &dists, &state, &spec, &theta)
            .unwrap();
        assert_eq!(a, NavAction::Transmit);
        // Next to waypoint 0: collecting at distance 1 costs 1.0, the same
        // as a move; the tie resolves to the move because moves order
        // first.
        let state = NavState::new(cell(2, 1), 0b01, 0.0);
        let a = one_step_lookahead_action(&config, &params, &dists, &state, &spec, &theta)
            .unwrap();
        assert_eq!(a, NavAction::Move(Direction::N));
    }

    #[test]
    fn corridor_lookahead_value_is_moves_plus_closing_target() {
        // 8x1 corridor, robot at x = 0, waypoint at x = 5, radius 2: three
        // discounted moves, then the collect closes the walk.
        let config =
            NavConfig::new(empty_map(8, 1), vec![cell(5, 0)], vec![cell(7, 0)]).unwrap();
        let dists = DistanceField::new(config.map());
        let params = NavParams::default();
        let alpha = params.discount;
        let state = NavState::new(cell(0, 0), 0b1, 0.0);

        // Zero model: the close contributes only the collect cost at
        // distance 2, base * (1 + 2), undiscounted by the op itself.
        let moves = 1.0 + alpha + alpha * alpha;
        let collect_cost = params.collect_base_cost * 3.0;
        let spec = RiskMappingSpec::worst_case_batch(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = lookahead_value(
            &config, &params, &dists, &state, 5.0, &spec, &[0.0; POLY_DIM], &mut rng,
        );
        assert_abs_diff_eq!(v, moves + alpha.powi(3) * collect_cost, epsilon = 1e-12);

        // Deterministic high outcome and a model reading the buffer: the
        // close adds alpha^3 * theta_6 * info_high on top of its own cost.
        let sure = NavParams { p_high: 1.0, ..params };
        let mut theta = [0.0; POLY_DIM];
        theta[6] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = lookahead_value(&config, &sure, &dists, &state, 5.0, &spec, &theta, &mut rng);
        let expected = moves + alpha.powi(3) * (collect_cost + 0.25 * 10.0);
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);

        // Terminal start is worth zero.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let done = NavState::new(cell(7, 0), 0, 0.0);
        let v = lookahead_value(&config, &params, &dists, &done, 1.0, &spec, &theta, &mut rng);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn gamma_search_breaks_ties_toward_smaller_thresholds() {
        let (config, dists) = frozen_config();
        let params = NavParams::default();
        let spec = RiskMappingSpec::worst_case_batch(2).unwrap();
        // Empty buffers make every threshold act identically, so all
        // scores tie and the smallest grid entry wins.
        let states: Vec<NavState> = (0..4)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
                sample_start(&config, i, &mut rng)
            })
            .collect();
        let grid = default_gamma_grid();
        let search = improve_gamma(
            &config, &params, &dists, &spec, &[0.0; POLY_DIM], &grid, &states, 7,
        )
        .unwrap();
        assert_eq!(search.best_gamma, grid[0]);
        assert_eq!(search.scores.len(), grid.len());
        for s in &search.scores {
            assert_abs_diff_eq!(*s, search.scores[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn gamma_search_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let config = sample_config(6, 6, 3, 3, 1, &mut rng).unwrap();
        let params = NavParams::default();
        let dists = DistanceField::new(config.map());
        let spec = RiskMappingSpec::worst_case_batch(2).unwrap();
        let states: Vec<NavState> = (0..12)
            .map(|i| sample_test_state(&config, &params, i, &mut rng))
            .collect();
        let mut theta = [0.0; POLY_DIM];
        theta[1] = 0.5;
        theta[6] = -0.1;
        let grid = default_gamma_grid();
        let a = improve_gamma(&config, &params, &dists, &spec, &theta, &grid, &states, 11)
            .unwrap();
        let b = improve_gamma(&config, &params, &dists, &spec, &theta, &grid, &states, 11)
            .unwrap();
        assert_eq!(a.scores, b.scores, "common random numbers must be deterministic");
        assert_eq!(a.best_gamma, b.best_gamma);
    }

    #[test]
    fn start_states_cycle_unvisited_counts() {
        let (config, _) = frozen_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..6u64 {
            let s = sample_start(&config, i, &mut rng);
            assert_eq!(u64::from(s.unvisited_count()), (i % 2) + 1);
            assert_eq!(s.info, 0.0);
            assert!(config.map().is_free(s.robot));
        }
    }

    #[test]
    fn test_states_reach_only_attainable_buffer_amounts() {
        let (config, _) = frozen_config();
        let params = NavParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut seen_positive = false;
        for i in 0..40u64 {
            let s = sample_test_state(&config, &params, i, &mut rng);
            let collected = config.waypoints().len() as u32 - s.unvisited_count();
            // The buffer is a sum of at most `collected` increments from
            // {2, 10}.
            let max = f64::from(collected) * params.info_high;
            assert!(s.info >= 0.0 && s.info <= max);
            assert_eq!(s.info % 2.0, 0.0, "amounts are sums of 10s and 2s");
            seen_positive |= s.info > 0.0;
        }
        assert!(seen_positive, "test states should sometimes carry information");
    }

    #[test]
    fn nav_process_implements_sampled_process() {
        let (config, dists) = frozen_config();
        let params = NavParams::default();
        let proc = NavProcess::new(config.clone(), params, 1.0).unwrap();
        assert_eq!(proc.feature_dim(), POLY_DIM);
        let terminal = NavState::new(cell(4, 0), 0, 0.0);
        assert!(proc.is_terminal(&terminal));
        let mut out = vec![1.0; POLY_DIM];
        proc.features(&terminal, &mut out);
        assert_eq!(out, vec![0.0; POLY_DIM]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let start = proc.sample_start(0, &mut rng);
        assert_eq!(start.unvisited_count(), 1);
        let step = proc.step(&start, 3, &mut rng);
        assert_eq!(step.successors.len(), 3);
        let expected =
            threshold_policy_action(&config, &params, &dists, &start, 1.0);
        // The step applies the threshold policy's action.
        let law = transition_support(&config, &params, &dists, &start, expected).unwrap();
        assert_eq!(step.cost, law.cost);
        assert_eq!(step.discount, law.discount);
    }

    #[test]
    fn coupled_rollouts_share_collect_outcomes() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let config = sample_config(6, 6, 3, 3, 1, &mut rng).unwrap();
        let params = NavParams::default();
        let dists = DistanceField::new(config.map());
        let start = sample_start(&config, 2, &mut rng);
        let table = draw_outcome_table(&config, &params, &mut rng);
        let cap = step_cap(&config, &dists);

        let run_with = |gamma: f64, table: Vec<CollectOutcome>| {
            let mut policy =
                |s: &NavState| threshold_policy_action(&config, &params, &dists, s, gamma);
            let mut outcomes = OutcomeSource::Latent(table);
            rollout(&config, &params, &dists, &mut policy, &start, &mut outcomes, cap).unwrap()
        };
        let a = run_with(0.0, table.clone());
        let b = run_with(0.0, table.clone());
        assert_eq!(a.steps.len(), b.steps.len(), "latent rollouts are deterministic");

        // Whatever the policy, collecting waypoint w yields the table's
        // increment for w.
        let c = run_with(5.0, table.clone());
        for run in [&a, &c] {
            for (k, step) in run.steps.iter().enumerate() {
                if let NavAction::Collect(w) = step.action {
                    let next_info = run
                        .steps
                        .get(k + 1)
                        .map(|s| s.state.info)
                        .unwrap_or(run.final_state.info);
                    let gained = next_info - step.state.info;
                    let expected = match table[w] {
                        CollectOutcome::High => params.info_high,
                        CollectOutcome::Low => params.info_low,
                    };
                    assert_abs_diff_eq!(gained, expected, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn instance_json_round_trip() {
        let (config, _) = frozen_config();
        let params = NavParams { p_high: 0.25, ..NavParams::default() };
        let instance = NavInstance::new(config, params).unwrap();
        let json = instance.to_json_string();
        let back = NavInstance::from_json_str(&json).unwrap();
        assert_eq!(back.config.waypoints(), instance.config.waypoints());
        assert_eq!(back.config.transmission(), instance.config.transmission());
        assert_eq!(back.params.p_high, 0.25);

        // Params default when omitted; unknown keys are rejected.
        let minimal = r#"{
            "width": 3, "height": 3,
            "waypoints": [[0, 0]],
            "transmission": [[2, 2]]
        }"#;
        let inst = NavInstance::from_json_str(minimal).unwrap();
        assert_eq!(inst.params.discount, 0.95);
        let unknown = r#"{
            "width": 3, "height": 3,
            "waypoints": [[0, 0]],
            "transmission": [[2, 2]],
            "budget": 4
        }"#;
        assert!(NavInstance::from_json_str(unknown).is_err());
    }

    #[test]
    fn start_state_support_is_a_distribution() {
        let (config, _) = frozen_config();
        let support = start_state_support(&config);
        // 2 levels: 2 singleton masks + 1 full mask, times 25 cells.
        assert_eq!(support.len(), 3 * 25);
        let total: f64 = support.iter().map(|(p, _)| p).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        for (p, s) in &support {
            assert!(*p > 0.0);
            assert_eq!(s.info, 0.0);
            assert!(s.unvisited > 0);
        }
    }

    #[test]
    fn state_index_deduplicates_by_key() {
        let mut index = StateIndex::new();
        let a = NavState::new(cell(1, 1), 0b11, 10.0);
        let b = NavState::new(cell(1, 1), 0b11, 10.0);
        let c = NavState::new(cell(1, 1), 0b11, 2.0);
        assert_eq!(index.insert(a), (0, true));
        assert_eq!(index.insert(b), (0, false));
        assert_eq!(index.insert(c), (1, true));
        assert_eq!(index.len(), 2);
        assert_eq!(index.get(&a), Some(0));
    }

    #[test]
    fn sample_config_respects_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = sample_config(7, 5, 6, 4, 2, &mut rng).unwrap();
        assert_eq!(config.waypoints().len(), 4);
        assert_eq!(config.transmission().len(), 2);
        assert_eq!(config.map().obstacles().len(), 6);
        // Too many cells requested.
        assert!(sample_config(2, 2, 2, 2, 1, &mut rng).is_err());
    }
}
