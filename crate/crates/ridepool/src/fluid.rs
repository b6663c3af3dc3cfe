//! Steady-state fluid relaxation of the pricing-and-matching dynamics.
//!
//! For conversion probabilities `lambda`, the cost LP chooses match flows
//! `x_{i,j}^u` (new rider of type `i` joining a solo rider in state `(j,u)`)
//! and solo flows `y_i^u` to minimize average cost per period, subject to
//! demand balance, per-state flow balance, and ratio constraints that keep
//! match rates honest relative to solo flow. The LP duals drive the runtime
//! matching policies, and the envelope formula turns them into a cost
//! gradient for the pricing loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{CompatTable, NetError, RiderType, RoadNetwork, DEFAULT_TABLE_CAP};
use crate::lp::{LinearProgram, LpError, LpRow, LpStatus, Relation};

#[derive(Debug, Error)]
pub enum FluidError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("lambda has {got} entries, expected {want}")]
    LambdaSize { got: usize, want: usize },
    #[error("lambda[{0}] = {1} outside [0,1]")]
    LambdaRange(usize, f64),
    #[error("cost per distance unit must be positive, got {0}")]
    BadCost(f64),
    #[error("pre-trip matching disabled but waiting window is {0}")]
    WindowWithoutPreTrip(u32),
    #[error("fluid LP reported {0:?}")]
    BadStatus(LpStatus),
    #[error("ratio row generation did not settle after {0} rounds")]
    RowGeneration(usize),
}

/// How quoted prices translate into fares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FareConvention {
    /// Price is per distance unit; a converted rider pays `p * l_i`.
    #[default]
    PerMile,
    /// Price is the whole fare.
    PerTrip,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelOptions {
    /// Waiting window T in periods.
    pub window: u32,
    pub pre_trip: bool,
    pub on_trip: bool,
    pub ratio_constraints: bool,
    pub fare: FareConvention,
    pub compat_cap: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            window: 0,
            pre_trip: true,
            on_trip: true,
            ratio_constraints: true,
            fare: FareConvention::PerMile,
            compat_cap: DEFAULT_TABLE_CAP,
        }
    }
}

/// A network, a set of rider types, the cost rate, and the matching model
/// flags, with the compatibility table built eagerly. Immutable afterwards.
#[derive(Debug, Clone)]
pub struct FluidInstance {
    pub network: RoadNetwork,
    pub types: Vec<RiderType>,
    /// Operating cost per distance unit.
    pub cost_rate: f64,
    pub options: ModelOptions,
    compat: CompatTable,
    /// Demand-heterogeneity label recorded by generators, if any.
    pub delta: Option<f64>,
}

impl FluidInstance {
    pub fn new(
        network: RoadNetwork,
        types: Vec<RiderType>,
        cost_rate: f64,
        options: ModelOptions,
    ) -> Result<Self, FluidError> {
        if !(cost_rate > 0.0 && cost_rate.is_finite()) {
            return Err(FluidError::BadCost(cost_rate));
        }
        if !options.pre_trip && options.window != 0 {
            return Err(FluidError::WindowWithoutPreTrip(options.window));
        }
        let compat = CompatTable::build(
            &network,
            &types,
            options.window,
            options.on_trip,
            options.compat_cap,
        )?;
        Ok(FluidInstance {
            network,
            types,
            cost_rate,
            options,
            compat,
            delta: None,
        })
    }

    /// Same network and types under different model flags.
    pub fn with_options(&self, options: ModelOptions) -> Result<Self, FluidError> {
        let mut inst = Self::new(self.network.clone(), self.types.clone(), self.cost_rate, options)?;
        inst.delta = self.delta;
        Ok(inst)
    }

    pub fn with_cost(&self, cost_rate: f64) -> Result<Self, FluidError> {
        let mut inst = Self::new(self.network.clone(), self.types.clone(), cost_rate, self.options)?;
        inst.delta = self.delta;
        Ok(inst)
    }

    pub fn set_delta(&mut self, delta: f64) {
        self.delta = Some(delta);
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn compat(&self) -> &CompatTable {
        &self.compat
    }

    pub fn trip_len(&self, i: usize) -> u32 {
        self.compat.geometry().trip_len(i)
    }

    pub fn total_arrival_prob(&self) -> f64 {
        self.types.iter().map(|t| t.arrival_prob).sum()
    }

    /// Reporting period length in minutes: `0.1 / sum(Lambda)`.
    pub fn minutes_per_period(&self) -> f64 {
        0.1 / self.total_arrival_prob()
    }

    /// Fare paid by a converted rider of type `i` at conversion rate
    /// `lambda_i`.
    pub fn fare(&self, i: usize, lambda_i: f64) -> f64 {
        let p = self.types[i].wtp.price(lambda_i);
        match self.options.fare {
            FareConvention::PerMile => p * self.trip_len(i) as f64,
            FareConvention::PerTrip => p,
        }
    }

    /// Quoted price per distance unit (what the price metrics average).
    pub fn price_per_unit(&self, i: usize, lambda_i: f64) -> f64 {
        let p = self.types[i].wtp.price(lambda_i);
        match self.options.fare {
            FareConvention::PerMile => p,
            FareConvention::PerTrip => p / self.trip_len(i) as f64,
        }
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<(), FluidError> {
        if lambda.len() != self.types.len() {
            return Err(FluidError::LambdaSize {
                got: lambda.len(),
                want: self.types.len(),
            });
        }
        for (i, &l) in lambda.iter().enumerate() {
            if !(0.0..=1.0).contains(&l) || !l.is_finite() {
                return Err(FluidError::LambdaRange(i, l));
            }
        }
        Ok(())
    }
}

/// Maps LP columns and rows back to model quantities.
///
/// Columns: all `y_i^u` for `-T <= u <= l_i - 1` first, then all `x_{i,j}^u`
/// for matchable states `(j, u)`, `u >= -T + 1`, and `i` compatible.
/// Rows: one demand row per type, then one flow-balance row per matchable
/// state, then any ratio rows.
#[derive(Debug, Clone)]
pub struct CbIndex {
    pub window: u32,
    y_off: Vec<usize>,
    y_total: usize,
    /// (i, j, u) per x column, ordered by (j, u, i).
    pub x_keys: Vec<(usize, usize, i32)>,
    flow_off: Vec<usize>,
    flow_total: usize,
    num_types: usize,
}

impl CbIndex {
    fn new(inst: &FluidInstance) -> CbIndex {
        let n = inst.num_types();
        let t = inst.options.window as usize;
        let mut y_off = Vec::with_capacity(n + 1);
        let mut flow_off = Vec::with_capacity(n + 1);
        let mut y_total = 0;
        let mut flow_total = 0;
        y_off.push(0);
        flow_off.push(0);
        for j in 0..n {
            let len = inst.trip_len(j) as usize;
            y_total += t + len;
            flow_total += t + len - 1;
            y_off.push(y_total);
            flow_off.push(flow_total);
        }
        let mut x_keys = Vec::new();
        for j in 0..n {
            for u in (-(t as i32) + 1)..inst.trip_len(j) as i32 {
                for &i in inst.compat().compatible_types(j, u) {
                    x_keys.push((i as usize, j, u));
                }
            }
        }
        CbIndex {
            window: inst.options.window,
            y_off,
            y_total,
            x_keys,
            flow_off,
            flow_total,
            num_types: n,
        }
    }

    pub fn num_y(&self) -> usize {
        self.y_total
    }

    pub fn num_x(&self) -> usize {
        self.x_keys.len()
    }

    pub fn num_vars(&self) -> usize {
        self.y_total + self.x_keys.len()
    }

    /// Column of `y_i^u`.
    pub fn y(&self, i: usize, u: i32) -> usize {
        let off = u + self.window as i32;
        debug_assert!(off >= 0);
        self.y_off[i] + off as usize
    }

    pub fn x_col(&self, k: usize) -> usize {
        self.y_total + k
    }

    /// Row of the demand-balance constraint for type `i`.
    pub fn demand_row(&self, i: usize) -> usize {
        i
    }

    /// Row of the flow-balance constraint for state `(j, u)`, `u >= -T + 1`.
    pub fn flow_row(&self, j: usize, u: i32) -> usize {
        let off = u + self.window as i32 - 1;
        debug_assert!(off >= 0);
        self.num_types + self.flow_off[j] + off as usize
    }

    pub fn num_base_rows(&self) -> usize {
        self.num_types + self.flow_total
    }
}

/// Builder output: the LP together with its index.
pub struct CbModel {
    pub lp: LinearProgram,
    pub index: CbIndex,
}

fn base_rows(inst: &FluidInstance, index: &CbIndex, lambda: &[f64]) -> Vec<LpRow> {
    let n = inst.num_types();
    let t = inst.options.window as i32;
    let mut rows = Vec::with_capacity(index.num_base_rows());
    for i in 0..n {
        rows.push(LpRow {
            coeffs: vec![(index.y(i, -t), 1.0)],
            relation: Relation::Eq,
            rhs: inst.types[i].arrival_prob * lambda[i],
        });
    }
    for j in 0..n {
        for u in (-t + 1)..inst.trip_len(j) as i32 {
            rows.push(LpRow {
                coeffs: vec![(index.y(j, u), 1.0), (index.y(j, u - 1), -1.0)],
                relation: Relation::Eq,
                rhs: 0.0,
            });
        }
    }
    for (k, &(i, j, u)) in index.x_keys.iter().enumerate() {
        let col = index.x_col(k);
        rows[index.demand_row(i)].coeffs.push((col, 1.0));
        rows[index.flow_row(j, u)].coeffs.push((col, 1.0));
    }
    rows
}

/// Probability that no type compatible with state `(j, u)` converts.
fn no_compat_conversion(inst: &FluidInstance, lambda: &[f64], j: usize, u: i32) -> f64 {
    let mass: f64 = inst
        .compat()
        .compatible_types(j, u)
        .iter()
        .map(|&k| inst.types[k as usize].arrival_prob * lambda[k as usize])
        .sum();
    1.0 - mass
}

/// Ratio row for x column `k`, or `None` if it cannot bind.
fn ratio_row(inst: &FluidInstance, index: &CbIndex, lambda: &[f64], k: usize) -> Option<LpRow> {
    let (i, j, u) = index.x_keys[k];
    let demand = inst.types[i].arrival_prob * lambda[i];
    let blocker = no_compat_conversion(inst, lambda, j, u);
    if demand <= 0.0 || blocker <= 0.0 {
        return None;
    }
    Some(LpRow {
        coeffs: vec![(index.y(j, u), demand), (index.x_col(k), -blocker)],
        relation: Relation::Ge,
        rhs: 0.0,
    })
}

fn objective(inst: &FluidInstance, index: &CbIndex) -> Vec<f64> {
    let c = inst.cost_rate;
    let mut obj = vec![0.0; index.num_vars()];
    for i in 0..inst.num_types() {
        // Waiting states u < 0 carry no cost.
        for u in 0..inst.trip_len(i) as i32 {
            obj[index.y(i, u)] = c;
        }
    }
    for (k, &(i, j, u)) in index.x_keys.iter().enumerate() {
        obj[index.x_col(k)] = c * inst.compat().shared_trip_length(i, j, u) as f64;
    }
    obj
}

/// Builds the full cost LP at `lambda`, ratio rows included when enabled.
pub fn build_cb(inst: &FluidInstance, lambda: &[f64]) -> Result<CbModel, FluidError> {
    inst.check_lambda(lambda)?;
    let index = CbIndex::new(inst);
    let mut rows = base_rows(inst, &index, lambda);
    if inst.options.ratio_constraints {
        for k in 0..index.num_x() {
            if let Some(row) = ratio_row(inst, &index, lambda, k) {
                rows.push(row);
            }
        }
    }
    let lp = LinearProgram {
        num_vars: index.num_vars(),
        objective: objective(inst, &index),
        rows,
    };
    Ok(CbModel { lp, index })
}

/// Primal flows, duals, and cost of the relaxation at a given `lambda`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluidSolution {
    pub lambda: Vec<f64>,
    /// Average cost per period, C(lambda).
    pub cost: f64,
    /// Solo flows by type, indexed `u + T`.
    pub y: Vec<Vec<f64>>,
    /// Match flows aligned with `x_keys`.
    pub x: Vec<f64>,
    /// (i, j, u) key per x entry.
    pub x_keys: Vec<(usize, usize, i32)>,
    /// Demand-row duals.
    pub gamma: Vec<f64>,
    /// Flow-balance duals by type, indexed `u + T - 1` (states u >= -T+1).
    pub xi: Vec<Vec<f64>>,
    /// Ratio-row duals aligned with `x_keys`; zero where the row is slack
    /// or was never generated.
    pub eta: Vec<f64>,
    pub window: u32,
    pub lp_iterations: usize,
}

impl FluidSolution {
    pub fn y_at(&self, i: usize, u: i32) -> f64 {
        self.y[i][(u + self.window as i32) as usize]
    }

    /// Dual of the flow-balance row of state `(j, u)`.
    pub fn xi_at(&self, j: usize, u: i32) -> f64 {
        self.xi[j][(u + self.window as i32 - 1) as usize]
    }

    /// Flat CSV dump (kind, i, j, u, value, dual) for inspection.
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "kind,i,j,u,value,dual")?;
        for (i, ys) in self.y.iter().enumerate() {
            for (off, v) in ys.iter().enumerate() {
                let u = off as i32 - self.window as i32;
                writeln!(out, "y,{i},,{u},{v},")?;
            }
        }
        for (k, &(i, j, u)) in self.x_keys.iter().enumerate() {
            writeln!(out, "x,{i},{j},{u},{},{}", self.x[k], self.eta[k])?;
        }
        for (i, &g) in self.gamma.iter().enumerate() {
            writeln!(out, "gamma,{i},,,,{g}")?;
        }
        for (j, xs) in self.xi.iter().enumerate() {
            for (off, v) in xs.iter().enumerate() {
                let u = off as i32 - self.window as i32 + 1;
                writeln!(out, "xi,,{j},{u},,{v}")?;
            }
        }
        Ok(())
    }
}

const ROW_GEN_ROUNDS: usize = 60;

/// Solves the relaxation at `lambda`.
///
/// Ratio rows are generated lazily: solve with the rows seen so far, add any
/// violated ones, repeat. Duals of never-added rows are zero, which is dual
/// feasible because their x columns already price out without them.
pub fn solve_cb(inst: &FluidInstance, lambda: &[f64]) -> Result<FluidSolution, FluidError> {
    inst.check_lambda(lambda)?;
    let index = CbIndex::new(inst);
    let obj = objective(inst, &index);
    let base = base_rows(inst, &index, lambda);
    let nbase = base.len();

    let mut active: Vec<usize> = Vec::new();
    let mut in_active = vec![false; index.num_x()];
    let mut rounds = 0;
    let (solution, active) = loop {
        rounds += 1;
        if rounds > ROW_GEN_ROUNDS {
            return Err(FluidError::RowGeneration(ROW_GEN_ROUNDS));
        }
        let mut rows = base.clone();
        rows.extend(
            active
                .iter()
                .filter_map(|&k| ratio_row(inst, &index, lambda, k)),
        );
        let lp = LinearProgram {
            num_vars: index.num_vars(),
            objective: obj.clone(),
            rows,
        };
        let sol = crate::lp::solve_lp(&lp)?;
        if sol.status != LpStatus::Optimal {
            return Err(FluidError::BadStatus(sol.status));
        }
        if !inst.options.ratio_constraints {
            break (sol, active);
        }
        let mut violated_pairs = std::collections::BTreeSet::new();
        for k in 0..index.num_x() {
            if in_active[k] {
                continue;
            }
            let (i, j, u) = index.x_keys[k];
            let demand = inst.types[i].arrival_prob * lambda[i];
            let blocker = no_compat_conversion(inst, lambda, j, u);
            let lhs = demand * sol.primal[index.y(j, u)] - blocker * sol.primal[index.x_col(k)];
            if lhs < -1e-10 {
                violated_pairs.insert((i, j));
            }
        }
        if violated_pairs.is_empty() {
            break (sol, active);
        }
        // Capping one state of a pair redirects flow to that pair's other
        // states, so activate whole (i, j) chains to settle in few rounds.
        for (k, &(i, j, _)) in index.x_keys.iter().enumerate() {
            if !in_active[k]
                && violated_pairs.contains(&(i, j))
                && ratio_row(inst, &index, lambda, k).is_some()
            {
                in_active[k] = true;
                active.push(k);
            }
        }
    };

    let n = inst.num_types();
    let t = inst.options.window as i32;
    let mut y = Vec::with_capacity(n);
    let mut xi = Vec::with_capacity(n);
    for j in 0..n {
        y.push(
            (-t..inst.trip_len(j) as i32)
                .map(|u| solution.primal[index.y(j, u)])
                .collect(),
        );
        xi.push(
            (-t + 1..inst.trip_len(j) as i32)
                .map(|u| solution.duals[index.flow_row(j, u)])
                .collect(),
        );
    }
    let x: Vec<f64> = (0..index.num_x())
        .map(|k| solution.primal[index.x_col(k)])
        .collect();
    let gamma: Vec<f64> = (0..n).map(|i| solution.duals[index.demand_row(i)]).collect();
    // Active rows sit after the base rows in insertion order. Only rows that
    // can bind ever get activated, so positions line up one-to-one.
    let mut eta = vec![0.0; index.num_x()];
    for (pos, &k) in active.iter().enumerate() {
        debug_assert!(ratio_row(inst, &index, lambda, k).is_some());
        eta[k] = solution.duals[nbase + pos];
    }

    Ok(FluidSolution {
        lambda: lambda.to_vec(),
        cost: solution.objective,
        y,
        x,
        x_keys: index.x_keys.clone(),
        gamma,
        xi,
        eta,
        window: inst.options.window,
        lp_iterations: solution.iterations,
    })
}

/// Envelope-theorem cost gradient at an optimal solution:
/// `grad_i = Lambda_i * (gamma_i - sum over states (j,u) with i compatible
/// of [y_j^u eta_{i,j}^u + sum_k x_{k,j}^u eta_{k,j}^u])`.
pub fn cost_gradient(inst: &FluidInstance, sol: &FluidSolution) -> Vec<f64> {
    let n = inst.num_types();
    // Per-state totals sum_k x_k eta_k, and per (i, state) terms.
    let mut grad: Vec<f64> = (0..n)
        .map(|i| inst.types[i].arrival_prob * sol.gamma[i])
        .collect();
    // Group x entries by state (j, u); keys are ordered by (j, u, i).
    let mut k = 0;
    while k < sol.x_keys.len() {
        let (_, j, u) = sol.x_keys[k];
        let mut end = k;
        while end < sol.x_keys.len() && sol.x_keys[end].1 == j && sol.x_keys[end].2 == u {
            end += 1;
        }
        let state_total: f64 = (k..end).map(|t| sol.x[t] * sol.eta[t]).sum();
        let y_ju = sol.y_at(j, u);
        for t in k..end {
            let (i, _, _) = sol.x_keys[t];
            grad[i] -= inst.types[i].arrival_prob * (y_ju * sol.eta[t] + state_total);
        }
        k = end;
    }
    grad
}

/// Fluid profit objective: expected revenue per period minus C(lambda).
pub fn fluid_profit(inst: &FluidInstance, lambda: &[f64]) -> Result<f64, FluidError> {
    let sol = solve_cb(inst, lambda)?;
    Ok(revenue(inst, lambda) - sol.cost)
}

/// Expected revenue per period at `lambda`.
pub fn revenue(inst: &FluidInstance, lambda: &[f64]) -> f64 {
    lambda
        .iter()
        .enumerate()
        .map(|(i, &l)| inst.types[i].arrival_prob * l * inst.fare(i, l))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{RiderType, RoadNetwork};

    fn single_type_inst(window: u32) -> FluidInstance {
        let net = RoadNetwork::line(100);
        let types = vec![RiderType::new(0, 100, 0.1)];
        FluidInstance::new(
            net,
            types,
            0.7,
            ModelOptions {
                window,
                ..ModelOptions::default()
            },
        )
        .unwrap()
    }

    fn corridor_inst(l: u32, window: u32) -> FluidInstance {
        let net = RoadNetwork::line(100);
        let types = vec![
            RiderType::new(0, 100, 0.05),
            RiderType::new(100 - l, 100, 0.05),
        ];
        FluidInstance::new(
            net,
            types,
            0.7,
            ModelOptions {
                window,
                ..ModelOptions::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn single_type_lp_shape() {
        let inst = single_type_inst(0);
        let model = build_cb(&inst, &[0.15]).unwrap();
        assert_eq!(model.index.num_y(), 100);
        assert_eq!(model.index.num_x(), 0);
        assert_eq!(model.lp.num_vars, 100);
    }

    #[test]
    fn corridor_match_variable_count_matches_brute_force() {
        let inst = corridor_inst(50, 3);
        let model = build_cb(&inst, &[0.2, 0.2]).unwrap();
        // Brute-force count over the compat table.
        let mut count = 0;
        for j in 0..2 {
            for u in (-3 + 1)..inst.trip_len(j) as i32 {
                count += inst.compat().compatible_types(j, u).len();
            }
        }
        assert_eq!(model.index.num_x(), count);
        assert!(count > 0);
    }

    #[test]
    fn zero_lambda_costs_nothing() {
        let inst = corridor_inst(50, 2);
        let sol = solve_cb(&inst, &[0.0, 0.0]).unwrap();
        assert_eq!(sol.cost, 0.0);
        assert!(sol.x.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn single_type_cost_is_linear() {
        let inst = single_type_inst(0);
        let sol = solve_cb(&inst, &[0.15]).unwrap();
        // No matches possible: C = c * l * Lambda * lambda = 1.05.
        assert!((sol.cost - 1.05).abs() < 1e-8, "cost {}", sol.cost);
        let grad = cost_gradient(&inst, &sol);
        assert!((grad[0] - 0.1 * 0.7 * 100.0).abs() < 1e-7);
    }

    #[test]
    fn single_type_profit_closed_form() {
        let inst = single_type_inst(0);
        let g = fluid_profit(&inst, &[0.15]).unwrap();
        assert!((g - 0.225).abs() < 1e-8, "profit {g}");
        assert_eq!(fluid_profit(&inst, &[0.0]).unwrap(), 0.0);
        assert!(fluid_profit(&inst, &[1.0]).unwrap() <= 0.0);
    }

    #[test]
    fn cost_monotone_in_lambda() {
        let inst = corridor_inst(50, 2);
        let mut prev = 0.0;
        for step in 1..=4 {
            let l = 0.1 * step as f64;
            let sol = solve_cb(&inst, &[l, l]).unwrap();
            assert!(sol.cost >= prev - 1e-9, "cost decreased at {l}");
            prev = sol.cost;
        }
    }

    #[test]
    fn ratio_relaxation_never_costs_more() {
        let inst = corridor_inst(50, 3);
        let no_ratio = inst
            .with_options(ModelOptions {
                ratio_constraints: false,
                ..inst.options
            })
            .unwrap();
        for l in [0.1, 0.3, 0.6] {
            let with = solve_cb(&inst, &[l, l]).unwrap().cost;
            let without = solve_cb(&no_ratio, &[l, l]).unwrap().cost;
            assert!(without <= with + 1e-9, "relaxation increased cost at {l}");
        }
    }

    #[test]
    fn row_generation_matches_full_lp() {
        let inst = corridor_inst(40, 4);
        let lambda = [0.35, 0.2];
        let sol = solve_cb(&inst, &lambda).unwrap();
        let full = crate::lp::solve_lp(&build_cb(&inst, &lambda).unwrap().lp).unwrap();
        assert!(
            (sol.cost - full.objective).abs() <= 1e-7 * (1.0 + full.objective.abs()),
            "row generation {} vs full {}",
            sol.cost,
            full.objective
        );
    }

    #[test]
    fn solution_satisfies_balance_invariants() {
        let inst = corridor_inst(50, 3);
        let lambda = [0.3, 0.25];
        let sol = solve_cb(&inst, &lambda).unwrap();
        let t = 3i32;
        // Demand balance per type.
        for i in 0..2 {
            let matched: f64 = sol
                .x_keys
                .iter()
                .zip(&sol.x)
                .filter(|(&(xi, _, _), _)| xi == i)
                .map(|(_, &v)| v)
                .sum();
            let rhs = inst.types[i].arrival_prob * lambda[i];
            assert!((matched + sol.y_at(i, -t) - rhs).abs() < 1e-7);
        }
        // Flow balance per state.
        for j in 0..2 {
            for u in (-t + 1)..inst.trip_len(j) as i32 {
                let matched: f64 = sol
                    .x_keys
                    .iter()
                    .zip(&sol.x)
                    .filter(|(&(_, xj, xu), _)| xj == j && xu == u)
                    .map(|(_, &v)| v)
                    .sum();
                let resid = matched + sol.y_at(j, u) - sol.y_at(j, u - 1);
                assert!(resid.abs() < 1e-7, "state ({j},{u}) residual {resid}");
            }
        }
        // Ratio constraints.
        for (k, &(i, j, u)) in sol.x_keys.iter().enumerate() {
            let demand = inst.types[i].arrival_prob * lambda[i];
            let blocker = no_compat_conversion(&inst, &lambda, j, u);
            assert!(
                demand * sol.y_at(j, u) >= blocker * sol.x[k] - 1e-7,
                "ratio violated at {:?}",
                (i, j, u)
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_kinks() {
        let inst = corridor_inst(60, 2);
        let lambda = [0.22, 0.31];
        let sol = solve_cb(&inst, &lambda).unwrap();
        let grad = cost_gradient(&inst, &sol);
        let h = 1e-4;
        for i in 0..2 {
            let mut up = lambda;
            up[i] += h;
            let mut dn = lambda;
            dn[i] -= h;
            let cu = solve_cb(&inst, &up).unwrap().cost;
            let cd = solve_cb(&inst, &dn).unwrap().cost;
            let fwd = cu - sol.cost;
            let bwd = sol.cost - cd;
            let kink = (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs());
            if kink {
                continue;
            }
            let fd = (cu - cd) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-3, "type {i}: envelope {} vs fd {}", grad[i], fd);
        }
    }
}
