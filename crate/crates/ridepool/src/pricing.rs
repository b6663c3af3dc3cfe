//! Minorization-maximization pricing loop.
//!
//! Each iteration linearizes the fluid cost with the envelope gradient,
//! maximizes the resulting concave surrogate (revenue minus linearized cost)
//! coordinatewise over [0,1]^N, and keeps going while the fluid profit
//! improves.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fluid::{cost_gradient, revenue, solve_cb, FluidError, FluidInstance, FluidSolution};
use crate::graph::WtpModel;

#[derive(Debug, Error)]
pub enum PricingError {
    #[error("fluid solve failed at iteration {iteration}: {source}")]
    Solver {
        iteration: usize,
        #[source]
        source: FluidError,
        trace: Vec<f64>,
    },
    #[error("initial lambda has {got} entries, expected {want}")]
    InitialSize { got: usize, want: usize },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PricingConfig {
    /// Starting point; `None` uses the solo optimum `(1 - c) / 2` per type.
    pub initial: Option<Vec<f64>>,
    /// Stop once the profit improvement drops below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Extra runs from random starting points; the best result wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for PricingConfig {
    fn default() -> Self {
        PricingConfig {
            initial: None,
            tolerance: 1e-6,
            max_iterations: 200,
            restarts: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PricingResult {
    /// Optimized conversion probabilities.
    pub lambda: Vec<f64>,
    /// Quoted prices `p_i(lambda_i)`.
    pub prices: Vec<f64>,
    /// Fluid profit at `lambda`.
    pub profit: f64,
    /// Profit after each accepted iterate, nondecreasing by construction.
    pub trace: Vec<f64>,
    /// The accepted iterates themselves, aligned with `trace`.
    pub trace_lambda: Vec<Vec<f64>>,
    /// Fluid solution at `lambda`; its duals feed the matching policies.
    pub solution: FluidSolution,
}

/// Coordinatewise maximizer of the surrogate
/// `sum_i Lambda_i lambda_i fare_i(lambda_i) - grad . (lambda - lambda_k)`.
///
/// The surrogate is separable; under the uniform WTP model each coordinate
/// has the closed form `clamp((Lambda_i F_i hi - grad_i) / (2 Lambda_i F_i
/// (hi - lo)))` with `F_i` the fare scale (trip length under per-mile fares).
/// Types with zero arrival mass stay at zero.
pub fn surrogate_argmax(inst: &FluidInstance, _lambda_k: &[f64], grad: &[f64]) -> Vec<f64> {
    (0..inst.num_types())
        .map(|i| {
            let mass = inst.types[i].arrival_prob;
            if mass <= 0.0 {
                return 0.0;
            }
            let scale = match inst.options.fare {
                crate::fluid::FareConvention::PerMile => inst.trip_len(i) as f64,
                crate::fluid::FareConvention::PerTrip => 1.0,
            };
            let WtpModel::Uniform { lo, hi } = inst.types[i].wtp;
            // d/dl [mass * l * (hi - (hi-lo) l) * scale - grad l] = 0.
            ((mass * scale * hi - grad[i]) / (2.0 * mass * scale * (hi - lo))).clamp(0.0, 1.0)
        })
        .collect()
}

fn default_initial(inst: &FluidInstance) -> Vec<f64> {
    let l = ((1.0 - inst.cost_rate) / 2.0).clamp(0.0, 1.0);
    vec![l; inst.num_types()]
}

struct MmRun {
    lambda: Vec<f64>,
    profit: f64,
    trace: Vec<f64>,
    trace_lambda: Vec<Vec<f64>>,
    solution: FluidSolution,
}

fn mm_from(
    inst: &FluidInstance,
    start: Vec<f64>,
    cfg: &PricingConfig,
) -> Result<MmRun, PricingError> {
    let solve = |lambda: &[f64], iteration: usize, trace: &[f64]| {
        solve_cb(inst, lambda).map_err(|source| PricingError::Solver {
            iteration,
            source,
            trace: trace.to_vec(),
        })
    };
    let mut lambda = start;
    let mut sol = solve(&lambda, 0, &[])?;
    let mut profit = revenue(inst, &lambda) - sol.cost;
    let mut trace = vec![profit];
    let mut trace_lambda = vec![lambda.clone()];
    for iteration in 1..=cfg.max_iterations {
        let grad = cost_gradient(inst, &sol);
        let next = surrogate_argmax(inst, &lambda, &grad);
        let next_sol = solve(&next, iteration, &trace)?;
        let next_profit = revenue(inst, &next) - next_sol.cost;
        if next_profit <= profit + cfg.tolerance {
            // Ceased to improve; keep the better of the two iterates.
            if next_profit > profit {
                lambda = next;
                profit = next_profit;
                sol = next_sol;
                trace.push(profit);
                trace_lambda.push(lambda.clone());
            }
            break;
        }
        lambda = next;
        profit = next_profit;
        sol = next_sol;
        trace.push(profit);
        trace_lambda.push(lambda.clone());
    }
    Ok(MmRun {
        lambda,
        profit,
        trace,
        trace_lambda,
        solution: sol,
    })
}

/// Runs the MM loop (plus any random restarts) and returns the best iterate.
pub fn mm_optimize(inst: &FluidInstance, cfg: &PricingConfig) -> Result<PricingResult, PricingError> {
    if !(cfg.tolerance > 0.0) {
        return Err(PricingError::BadTolerance(cfg.tolerance));
    }
    let start = match &cfg.initial {
        Some(v) => {
            if v.len() != inst.num_types() {
                return Err(PricingError::InitialSize {
                    got: v.len(),
                    want: inst.num_types(),
                });
            }
            v.clone()
        }
        None => default_initial(inst),
    };
    let mut best = mm_from(inst, start, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.restarts {
        let random: Vec<f64> = (0..inst.num_types()).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let run = mm_from(inst, random, cfg)?;
        if run.profit > best.profit {
            best = run;
        }
    }
    let prices: Vec<f64> = best
        .lambda
        .iter()
        .enumerate()
        .map(|(i, &l)| inst.types[i].wtp.price(l))
        .collect();
    Ok(PricingResult {
        lambda: best.lambda,
        prices,
        profit: best.profit,
        trace: best.trace,
        trace_lambda: best.trace_lambda,
        solution: best.solution,
    })
}
