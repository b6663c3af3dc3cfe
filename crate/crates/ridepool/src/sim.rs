//! Discrete-time simulator of the arrival / conversion / matching dynamics,
//! with profit accounting, a replayable event log, and the reported metrics.
//!
//! Each period: (1) at most one rider arrives and converts with probability
//! `lambda`, (2) the policy matches, matched pairs leave on their shared
//! route immediately, (3) everyone else's clock advances and riders reaching
//! their destination exit. Costs are charged per distance unit actually
//! driven; matched pairs are charged their full remaining shared route at
//! match time.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fluid::FluidInstance;
use crate::graph::DropOrder;
use crate::policy::{
    combined_decide, on_trip_decide, ActiveRider, DualTables, MatchDecision, PolicyError,
    PolicyKind,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("lambda has {got} entries, expected {want}")]
    LambdaSize { got: usize, want: usize },
    #[error("policy {policy:?} needs a zero waiting window, instance has T={window}")]
    WindowMismatch { policy: PolicyKind, window: u32 },
    #[error("simulation needs at least one period")]
    NoPeriods,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimConfig {
    pub periods: u64,
    pub seed: u64,
    pub replications: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            periods: 100_000,
            seed: 0,
            replications: 8,
        }
    }
}

/// Replayable record of everything that affects the metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Event {
    /// A rider showed up and was quoted a fare (converted or not).
    Arrival {
        period: u64,
        ty: usize,
        fare: f64,
        converted: bool,
    },
    /// Two riders left on a shared route. `ex_*` is the later-state rider
    /// whose position anchors the route; `new_*` is the joining one.
    Match {
        period: u64,
        new_ty: usize,
        new_clock: i32,
        ex_ty: usize,
        ex_clock: i32,
        /// Remaining shared route length from the existing rider's position.
        shared_len: u32,
        /// Pickup-to-dropoff distances along the executed route.
        onboard_new: u32,
        onboard_ex: u32,
        /// Distance with both riders in the vehicle.
        overlap: u32,
    },
    /// A solo rider reached the destination.
    SoloComplete { period: u64, ty: usize },
    /// A rider still active when the horizon hit; accrued distance only.
    HorizonActive { ty: usize, clock: i32 },
}

pub type EventLog = Vec<Event>;

/// Raw per-replication accumulators; metric ratios are derived on demand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub periods: u64,
    pub arrivals: u64,
    pub conversions: u64,
    pub matches: u64,
    pub on_trip_matches: u64,
    pub solo_completions: u64,
    pub active_at_horizon: u64,
    pub revenue: f64,
    /// Total vehicle distance driven (shared remainders charged at match).
    pub distance: u64,
    pub quoted_price_sum: f64,
    pub payment_price_sum: f64,
    /// Sum of solo trip lengths over converted riders.
    pub converted_len: u64,
    /// Sum over matched riders of onboard distance and of solo length.
    pub matched_onboard: u64,
    pub matched_len: u64,
    /// Match counts binned by phase and heterogeneity
    /// (delta < 1/3, < 2/3, >= 2/3).
    pub delta_bins_pre: [u64; 3],
    pub delta_bins_on: [u64; 3],
}

impl Tally {
    fn absorb(&mut self, inst: &FluidInstance, lambda: &[f64], event: &Event) {
        match *event {
            Event::Arrival {
                ty,
                fare,
                converted,
                ..
            } => {
                self.arrivals += 1;
                self.quoted_price_sum += inst.price_per_unit(ty, lambda[ty]);
                if converted {
                    self.conversions += 1;
                    self.revenue += fare;
                    self.payment_price_sum += inst.price_per_unit(ty, lambda[ty]);
                    self.converted_len += inst.trip_len(ty) as u64;
                }
            }
            Event::Match {
                new_ty,
                ex_ty,
                ex_clock,
                shared_len,
                onboard_new,
                onboard_ex,
                overlap,
                ..
            } => {
                self.matches += 1;
                let on_trip = ex_clock >= 1;
                if on_trip {
                    self.on_trip_matches += 1;
                }
                self.distance += ex_clock.max(0) as u64 + shared_len as u64;
                self.matched_onboard += onboard_new as u64 + onboard_ex as u64;
                self.matched_len +=
                    inst.trip_len(new_ty) as u64 + inst.trip_len(ex_ty) as u64;
                let delta = 1.0 - overlap as f64 / shared_len as f64;
                let bin = if delta < 1.0 / 3.0 {
                    0
                } else if delta < 2.0 / 3.0 {
                    1
                } else {
                    2
                };
                if on_trip {
                    self.delta_bins_on[bin] += 1;
                } else {
                    self.delta_bins_pre[bin] += 1;
                }
            }
            Event::SoloComplete { ty, .. } => {
                self.solo_completions += 1;
                self.distance += inst.trip_len(ty) as u64;
            }
            Event::HorizonActive { clock, .. } => {
                self.active_at_horizon += 1;
                self.distance += clock.max(0) as u64;
            }
        }
    }

    pub fn profit(&self, inst: &FluidInstance) -> f64 {
        self.revenue - inst.cost_rate * self.distance as f64
    }

    pub fn profit_per_period(&self, inst: &FluidInstance) -> f64 {
        self.profit(inst) / self.periods as f64
    }
}

/// Derived metrics for one replication. Ratios with an empty denominator are
/// absent rather than NaN.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub profit_per_period: f64,
    pub profit_per_minute: f64,
    pub avg_quoted_price: Option<f64>,
    pub avg_payment: Option<f64>,
    pub throughput_per_minute: f64,
    pub match_rate: Option<f64>,
    pub on_trip_match_portion: Option<f64>,
    pub cost_efficiency: Option<f64>,
    pub avg_detour_rate: Option<f64>,
}

impl MetricsRow {
    pub fn from_tally(inst: &FluidInstance, t: &Tally) -> MetricsRow {
        let minutes = inst.minutes_per_period();
        let per_period = t.profit_per_period(inst);
        let ratio = |num: f64, den: f64| if den > 0.0 { Some(num / den) } else { None };
        MetricsRow {
            profit_per_period: per_period,
            profit_per_minute: per_period / minutes,
            avg_quoted_price: ratio(t.quoted_price_sum, t.arrivals as f64),
            avg_payment: ratio(t.payment_price_sum, t.conversions as f64),
            throughput_per_minute: t.conversions as f64 / t.periods as f64 / minutes,
            match_rate: ratio(2.0 * t.matches as f64, t.conversions as f64),
            on_trip_match_portion: ratio(t.on_trip_matches as f64, t.matches as f64),
            cost_efficiency: ratio(
                inst.cost_rate * t.converted_len as f64
                    - inst.cost_rate * t.distance as f64,
                inst.cost_rate * t.converted_len as f64,
            ),
            avg_detour_rate: ratio(
                (t.matched_onboard - t.matched_len) as f64,
                t.matched_len as f64,
            ),
        }
    }

    pub const COLUMNS: [&'static str; 9] = [
        "profit_per_period",
        "profit_per_minute",
        "avg_quoted_price",
        "avg_payment",
        "throughput_per_minute",
        "match_rate",
        "on_trip_match_portion",
        "cost_efficiency",
        "avg_detour_rate",
    ];

    pub fn values(&self) -> [Option<f64>; 9] {
        [
            Some(self.profit_per_period),
            Some(self.profit_per_minute),
            self.avg_quoted_price,
            self.avg_payment,
            Some(self.throughput_per_minute),
            self.match_rate,
            self.on_trip_match_portion,
            self.cost_efficiency,
            self.avg_detour_rate,
        ]
    }
}

/// Mean and standard error of each metric across replications, plus the
/// per-replication rows and tallies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub per_replication: Vec<MetricsRow>,
    pub tallies: Vec<Tally>,
    pub mean: MetricsRow,
    /// Standard error per column, absent where fewer than 2 values exist.
    pub se: Vec<Option<f64>>,
}

impl RunMetrics {
    fn aggregate(inst: &FluidInstance, tallies: Vec<Tally>) -> RunMetrics {
        let rows: Vec<MetricsRow> = tallies
            .iter()
            .map(|t| MetricsRow::from_tally(inst, t))
            .collect();
        let mut mean_vals = [None; 9];
        let mut se_vals = vec![None; 9];
        for c in 0..9 {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.values()[c]).collect();
            if vals.is_empty() {
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            mean_vals[c] = Some(mean);
            if vals.len() >= 2 {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                se_vals[c] = Some((var / n).sqrt());
            }
        }
        let get = |c: usize| mean_vals[c];
        let mean = MetricsRow {
            profit_per_period: get(0).unwrap_or(0.0),
            profit_per_minute: get(1).unwrap_or(0.0),
            avg_quoted_price: get(2),
            avg_payment: get(3),
            throughput_per_minute: get(4).unwrap_or(0.0),
            match_rate: get(5),
            on_trip_match_portion: get(6),
            cost_efficiency: get(7),
            avg_detour_rate: get(8),
        };
        RunMetrics {
            per_replication: rows,
            tallies,
            mean,
            se: se_vals,
        }
    }

    pub fn mean_profit_per_period(&self) -> f64 {
        self.mean.profit_per_period
    }

    pub fn se_profit_per_period(&self) -> f64 {
        self.se[0].unwrap_or(0.0)
    }
}

struct Rider {
    ty: usize,
    clock: i32,
}

/// One replication of the simulator; owns the state and the log.
pub struct Simulation<'a> {
    inst: &'a FluidInstance,
    lambda: &'a [f64],
    duals: &'a DualTables,
    policy: PolicyKind,
    riders: Vec<Rider>,
    period: u64,
    pub log: EventLog,
    pub tally: Tally,
    /// Cumulative arrival-probability thresholds for the type draw.
    arrival_cdf: Vec<f64>,
}

impl<'a> Simulation<'a> {
    pub fn new(
        inst: &'a FluidInstance,
        lambda: &'a [f64],
        duals: &'a DualTables,
        policy: PolicyKind,
    ) -> Result<Self, SimError> {
        if lambda.len() != inst.num_types() {
            return Err(SimError::LambdaSize {
                got: lambda.len(),
                want: inst.num_types(),
            });
        }
        if policy.forces_zero_window() && inst.options.window != 0 {
            return Err(SimError::WindowMismatch {
                policy,
                window: inst.options.window,
            });
        }
        let mut acc = 0.0;
        let arrival_cdf = inst
            .types
            .iter()
            .map(|t| {
                acc += t.arrival_prob;
                acc
            })
            .collect();
        Ok(Simulation {
            inst,
            lambda,
            duals,
            policy,
            riders: Vec::new(),
            period: 0,
            log: EventLog::new(),
            tally: Tally::default(),
            arrival_cdf,
        })
    }

    fn push(&mut self, event: Event) {
        self.tally.absorb(self.inst, self.lambda, &event);
        self.log.push(event);
    }

    /// Advances one period given an explicit arrival draw (used directly by
    /// tests; `step` draws it from the RNG).
    pub fn step_with_arrival(&mut self, arrival: Option<(usize, bool)>) -> Result<(), SimError> {
        let window = self.inst.options.window as i32;
        // (1) Arrival and conversion.
        let mut new_rider = false;
        if let Some((ty, converted)) = arrival {
            let fare = self.inst.fare(ty, self.lambda[ty]);
            self.push(Event::Arrival {
                period: self.period,
                ty,
                fare,
                converted,
            });
            if converted {
                self.riders.push(Rider {
                    ty,
                    clock: -window,
                });
                new_rider = true;
            }
        }

        // (2) Matching.
        match self.policy {
            PolicyKind::OnTrip => {
                if new_rider {
                    let new_idx = self.riders.len() - 1;
                    let new_ty = self.riders[new_idx].ty;
                    let occupied: Vec<(usize, i32)> = self.riders[..new_idx]
                        .iter()
                        .map(|r| (r.ty, r.clock))
                        .collect();
                    let decision = on_trip_decide(
                        self.duals,
                        self.inst.compat(),
                        self.inst.cost_rate,
                        &occupied,
                        new_ty,
                    );
                    if let MatchDecision::Single(Some((j, u))) = decision {
                        let ex_idx = self
                            .riders
                            .iter()
                            .position(|r| r.ty == j && r.clock == u)
                            .expect("occupied state has a rider");
                        self.execute_match(new_idx, ex_idx);
                    }
                }
            }
            PolicyKind::PreTrip | PolicyKind::Combined => {
                // The duals shift with every clock tick, so the matching is
                // re-solved every period, arrival or not.
                let view: Vec<ActiveRider> = self
                    .riders
                    .iter()
                    .map(|r| ActiveRider {
                        ty: r.ty,
                        clock: r.clock,
                    })
                    .collect();
                let decision = combined_decide(
                    self.duals,
                    self.inst.compat(),
                    self.inst.cost_rate,
                    &view,
                )?;
                if let MatchDecision::Pairs(mut pairs) = decision {
                    // Log in a fixed order, then drop everyone matched.
                    pairs.sort_unstable_by_key(|&(a, b)| (a.min(b), a.max(b)));
                    for &(a, b) in &pairs {
                        self.execute_match(a, b);
                    }
                    let matched: std::collections::HashSet<usize> =
                        pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
                    let mut idx = 0;
                    self.riders.retain(|_| {
                        let keep = !matched.contains(&idx);
                        idx += 1;
                        keep
                    });
                }
            }
        }

        // (3) Clock advance and exits.
        let mut done = Vec::new();
        for (idx, r) in self.riders.iter_mut().enumerate() {
            r.clock += 1;
            if r.clock >= self.inst.trip_len(r.ty) as i32 {
                done.push(idx);
            }
        }
        for idx in done.into_iter().rev() {
            let r = self.riders.remove(idx);
            self.push(Event::SoloComplete {
                period: self.period,
                ty: r.ty,
            });
        }
        self.period += 1;

        // Distinct clocks: one arrival per period, uniform ticks.
        debug_assert!({
            let mut clocks: Vec<i32> = self.riders.iter().map(|r| r.clock).collect();
            clocks.sort_unstable();
            clocks.windows(2).all(|w| w[0] != w[1])
        });
        Ok(())
    }

    /// Logs the match of the rider pair at the given indices and removes
    /// them (on-trip path); the combined path batch-removes instead, so this
    /// only mutates via the log for that caller.
    fn execute_match(&mut self, a: usize, b: usize) {
        let (e, l) = if self.riders[a].clock < self.riders[b].clock {
            (a, b)
        } else {
            (b, a)
        };
        let (i, u) = (self.riders[e].ty, self.riders[e].clock);
        let (j, v) = (self.riders[l].ty, self.riders[l].clock);
        let geo = self.inst.compat().geometry();
        let shared_len = self.inst.compat().shared_trip_length(i, j, v);
        let approach = shared_len - geo.shared_tail(i, j).0;
        let (tail, order) = geo.shared_tail(i, j);
        let (onboard_new, onboard_ex, overlap) = match order {
            DropOrder::ExistingFirst => {
                let to_ex_dest = geo.origin_to_dest(i, j);
                (
                    tail,
                    v.max(0) as u32 + approach + to_ex_dest,
                    to_ex_dest,
                )
            }
            DropOrder::NewFirst => {
                let own = geo.trip_len(i);
                (own, v.max(0) as u32 + approach + tail, own)
            }
        };
        debug_assert!(onboard_new >= geo.trip_len(i) && onboard_ex >= geo.trip_len(j));
        self.push(Event::Match {
            period: self.period,
            new_ty: i,
            new_clock: u,
            ex_ty: j,
            ex_clock: v,
            shared_len,
            onboard_new,
            onboard_ex,
            overlap,
        });
        if matches!(self.policy, PolicyKind::OnTrip) {
            let (hi, lo) = (a.max(b), a.min(b));
            self.riders.remove(hi);
            self.riders.remove(lo);
        }
    }

    pub fn step(&mut self, rng: &mut impl Rng) -> Result<(), SimError> {
        let draw: f64 = rng.gen();
        let mut arrival = None;
        for (ty, &cum) in self.arrival_cdf.iter().enumerate() {
            if draw < cum {
                let converted = rng.gen::<f64>() < self.lambda[ty];
                arrival = Some((ty, converted));
                break;
            }
        }
        self.step_with_arrival(arrival)
    }

    /// Marks the horizon: remaining riders contribute accrued distance.
    pub fn finish(&mut self) {
        for idx in 0..self.riders.len() {
            let (ty, clock) = (self.riders[idx].ty, self.riders[idx].clock);
            self.push(Event::HorizonActive { ty, clock });
        }
        self.riders.clear();
        self.tally.periods = self.period;
    }

    pub fn active_riders(&self) -> usize {
        self.riders.len()
    }
}

/// Runs one seeded replication to completion.
pub fn run_one(
    inst: &FluidInstance,
    lambda: &[f64],
    duals: &DualTables,
    policy: PolicyKind,
    periods: u64,
    seed: u64,
) -> Result<(Tally, EventLog), SimError> {
    if periods == 0 {
        return Err(SimError::NoPeriods);
    }
    let mut sim = Simulation::new(inst, lambda, duals, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..periods {
        sim.step(&mut rng)?;
    }
    sim.finish();
    Ok((sim.tally, sim.log))
}

/// Runs all replications (in parallel, seeds `seed..seed+reps`) and merges
/// the results in replication order.
pub fn run_simulation(
    inst: &FluidInstance,
    lambda: &[f64],
    duals: &DualTables,
    policy: PolicyKind,
    cfg: &SimConfig,
) -> Result<RunMetrics, SimError> {
    let tallies: Result<Vec<Tally>, SimError> = (0..cfg.replications.max(1) as u64)
        .into_par_iter()
        .map(|rep| {
            run_one(inst, lambda, duals, policy, cfg.periods, cfg.seed + rep)
                .map(|(tally, _)| tally)
        })
        .collect();
    Ok(RunMetrics::aggregate(inst, tallies?))
}

/// Recomputes the metrics of a finished run from its event log alone.
pub fn compute_metrics(inst: &FluidInstance, lambda: &[f64], periods: u64, log: &EventLog) -> Tally {
    let mut tally = Tally::default();
    for event in log {
        tally.absorb(inst, lambda, event);
    }
    tally.periods = periods;
    tally
}

/// Writes an event log as CSV (one row per event).
pub fn write_event_csv(log: &EventLog, out: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(
        out,
        "period,kind,ty,fare,converted,new_ty,new_clock,ex_ty,ex_clock,shared_len,onboard_new,onboard_ex,overlap,clock"
    )?;
    for e in log {
        match *e {
            Event::Arrival {
                period,
                ty,
                fare,
                converted,
            } => writeln!(out, "{period},arrival,{ty},{fare},{converted},,,,,,,,,")?,
            Event::Match {
                period,
                new_ty,
                new_clock,
                ex_ty,
                ex_clock,
                shared_len,
                onboard_new,
                onboard_ex,
                overlap,
            } => writeln!(
                out,
                "{period},match,,,,{new_ty},{new_clock},{ex_ty},{ex_clock},{shared_len},{onboard_new},{onboard_ex},{overlap},"
            )?,
            Event::SoloComplete { period, ty } => {
                writeln!(out, "{period},solo_complete,{ty},,,,,,,,,,,")?
            }
            Event::HorizonActive { ty, clock } => {
                writeln!(out, ",horizon_active,{ty},,,,,,,,,,,{clock}")?
            }
        }
    }
    Ok(())
}
