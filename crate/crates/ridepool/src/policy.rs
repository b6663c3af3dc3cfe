//! Runtime matching policies driven by the fluid duals.
//!
//! Two rules: the single-arrival on-trip rule (match a converting rider to
//! the occupied compatible state with the lowest generalized cost
//! `c l_{i,j}^u - xi_j^u` whenever that beats `gamma_i`), and the per-period
//! non-bipartite matching over all active riders, solved exactly over the
//! negative-cost edges.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fluid::FluidSolution;
use crate::graph::CompatTable;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("{riders} active riders exceed the matching cap of {cap}")]
    TooManyRiders { riders: usize, cap: usize },
}

/// Which matching phases the runtime policy uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Waiting-window matching only; solo riders stay solo once dispatched.
    PreTrip,
    /// No waiting window; new riders may join riders already en route.
    OnTrip,
    /// Both phases.
    Combined,
}

impl PolicyKind {
    /// Model flags implied by the policy.
    pub fn on_trip_enabled(self) -> bool {
        !matches!(self, PolicyKind::PreTrip)
    }

    pub fn forces_zero_window(self) -> bool {
        matches!(self, PolicyKind::OnTrip)
    }
}

/// Demand duals `gamma_i` and flow-balance duals `xi_j^u`, with the
/// convention `xi_i^{-T} = gamma_i` for brand-new riders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualTables {
    pub gamma: Vec<f64>,
    /// Per type, duals for clocks `-T + 1 ..= l_j - 1`, indexed `u + T - 1`.
    pub xi: Vec<Vec<f64>>,
    pub window: u32,
}

impl DualTables {
    pub fn from_solution(sol: &FluidSolution) -> DualTables {
        DualTables {
            gamma: sol.gamma.clone(),
            xi: sol.xi.clone(),
            window: sol.window,
        }
    }

    /// `xi_j^u`, falling back to `gamma_j` at the entry clock `-T`.
    pub fn xi(&self, j: usize, u: i32) -> f64 {
        let t = self.window as i32;
        debug_assert!(u >= -t);
        if u <= -t {
            self.gamma[j]
        } else {
            self.xi[j][(u + t - 1) as usize]
        }
    }
}

/// Outcome of a matching decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchDecision {
    /// Disjoint rider-index pairs chosen by the per-period matching.
    Pairs(Vec<(usize, usize)>),
    /// On-trip rule: the chosen occupied state, or `None` for solo dispatch.
    Single(Option<(usize, i32)>),
}

/// An active rider as the policies see it.
#[derive(Debug, Clone, Copy)]
pub struct ActiveRider {
    pub ty: usize,
    pub clock: i32,
}

/// Single-arrival on-trip rule: evaluate every occupied compatible state,
/// take the cheapest, and match only if `gamma_i` covers it. Ties prefer the
/// smaller clock, then the smaller type id.
pub fn on_trip_decide(
    duals: &DualTables,
    compat: &CompatTable,
    cost_rate: f64,
    occupied: &[(usize, i32)],
    new_type: usize,
) -> MatchDecision {
    let mut best: Option<(f64, i32, usize)> = None;
    for &(j, u) in occupied {
        debug_assert!(u >= 1, "on-trip occupancy must be en route");
        if !compat.is_compatible(new_type, j, u) {
            continue;
        }
        let cost = cost_rate * compat.shared_trip_length(new_type, j, u) as f64 - duals.xi(j, u);
        let key = (cost, u, j);
        if best.map_or(true, |b| key < b) {
            best = Some(key);
        }
    }
    match best {
        Some((kappa, u, j)) if duals.gamma[new_type] >= kappa => {
            MatchDecision::Single(Some((j, u)))
        }
        _ => MatchDecision::Single(None),
    }
}

/// Weighted edge between two active riders, identified by their positions in
/// the rider slice.
#[derive(Debug, Clone, Copy)]
pub struct MatchEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

pub const DEFAULT_RIDER_CAP: usize = 64;

/// Per-period matching over all active riders (any new arrival included at
/// clock `-T`): minimum-total-generalized-cost pairing where the edge cost
/// charges the shared trip from the later rider's state and credits both
/// riders' duals. Pairs of riders who are both en route are never formed,
/// and two waiting riders pair only when one is about to depart.
pub fn combined_decide(
    duals: &DualTables,
    compat: &CompatTable,
    cost_rate: f64,
    riders: &[ActiveRider],
) -> Result<MatchDecision, PolicyError> {
    let edges = candidate_edges(duals, compat, cost_rate, riders);
    let pairs = exact_matching(&edges, riders.len(), DEFAULT_RIDER_CAP)?;
    Ok(MatchDecision::Pairs(pairs))
}

/// Enumerates the feasible negative-weight edges for `combined_decide`.
pub fn candidate_edges(
    duals: &DualTables,
    compat: &CompatTable,
    cost_rate: f64,
    riders: &[ActiveRider],
) -> Vec<MatchEdge> {
    let mut edges = Vec::new();
    for a in 0..riders.len() {
        for b in (a + 1)..riders.len() {
            let (e, l) = if riders[a].clock < riders[b].clock {
                (a, b)
            } else {
                (b, a)
            };
            let (u, v) = (riders[e].clock, riders[l].clock);
            debug_assert_ne!(u, v, "active riders always have distinct clocks");
            // Two waiting riders keep waiting unless one must depart now;
            // two dispatched riders are already on separate vehicles.
            if v < 0 || u > 0 {
                continue;
            }
            let (i, j) = (riders[e].ty, riders[l].ty);
            if !compat.is_compatible(i, j, v) {
                continue;
            }
            let weight = cost_rate * compat.shared_trip_length(i, j, v) as f64
                - duals.xi(i, u)
                - duals.xi(j, v);
            if weight < 0.0 {
                edges.push(MatchEdge { a: e, b: l, weight });
            }
        }
    }
    // Tie order: lowest generalized cost, then smallest later clock, then
    // smallest type ids. The matching search is stable with respect to this
    // order, so equal-cost optima resolve deterministically.
    edges.sort_by(|x, y| {
        let key = |e: &MatchEdge| {
            (
                riders[e.b].clock,
                riders[e.b].ty,
                riders[e.a].clock,
                riders[e.a].ty,
            )
        };
        x.weight
            .partial_cmp(&y.weight)
            .unwrap()
            .then(key(x).cmp(&key(y)))
    });
    edges
}

/// Exact minimum-weight matching over the given edges (the empty matching is
/// always feasible, so only negative edges matter; nonnegative ones are
/// dropped).
///
/// Memoized search over rider subsets. Partners are explored cheapest-first
/// and improvements must be strict, so tied optima resolve the same way on
/// every run.
pub fn exact_matching(
    edges: &[MatchEdge],
    num_riders: usize,
    cap: usize,
) -> Result<Vec<(usize, usize)>, PolicyError> {
    if num_riders > cap || num_riders > 64 {
        return Err(PolicyError::TooManyRiders {
            riders: num_riders,
            cap: cap.min(64),
        });
    }
    // Compact to riders that touch a negative edge.
    let mut seen = vec![usize::MAX; num_riders];
    let mut order: Vec<usize> = Vec::new();
    let mut filtered: Vec<(usize, usize, f64)> = Vec::new();
    for edge in edges {
        if edge.weight >= 0.0 {
            continue;
        }
        for r in [edge.a, edge.b] {
            if seen[r] == usize::MAX {
                seen[r] = order.len();
                order.push(r);
            }
        }
        filtered.push((seen[edge.a], seen[edge.b], edge.weight));
    }
    if filtered.is_empty() {
        return Ok(Vec::new());
    }
    // Cheapest-first exploration; the stable sort keeps the caller's tie
    // order intact.
    filtered.sort_by(|x, y| x.2.partial_cmp(&y.2).unwrap());
    let n = order.len();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(a, b, w) in &filtered {
        adj[a].push((b, w));
        adj[b].push((a, w));
    }

    struct Search<'a> {
        adj: &'a [Vec<(usize, f64)>],
        memo: std::collections::HashMap<u64, (f64, Option<(usize, usize)>)>,
    }
    impl Search<'_> {
        fn best(&mut self, mask: u64) -> (f64, Option<(usize, usize)>) {
            if mask == 0 {
                return (0.0, None);
            }
            if let Some(&hit) = self.memo.get(&mask) {
                return hit;
            }
            let r = mask.trailing_zeros() as usize;
            let rest = mask & !(1u64 << r);
            // Try each partner of r (cheapest-first), then leaving r alone.
            let mut best = (self.best(rest).0, None);
            for &(s, w) in &self.adj[r] {
                if rest & (1u64 << s) == 0 {
                    continue;
                }
                let sub = self.best(rest & !(1u64 << s)).0 + w;
                if sub < best.0 {
                    best = (sub, Some((r, s)));
                }
            }
            self.memo.insert(mask, best);
            best
        }
    }
    let mut search = Search {
        adj: &adj,
        memo: std::collections::HashMap::new(),
    };
    let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut pairs = Vec::new();
    let mut mask = full;
    while mask != 0 {
        let (_, choice) = search.best(mask);
        let r = mask.trailing_zeros() as usize;
        match choice {
            Some((a, b)) => {
                debug_assert_eq!(a, r);
                pairs.push((order[a].min(order[b]), order[a].max(order[b])));
                mask &= !(1u64 << a);
                mask &= !(1u64 << b);
            }
            None => {
                mask &= !(1u64 << r);
            }
        }
    }
    pairs.sort_unstable();
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fluid::{FluidInstance, ModelOptions};
    use crate::graph::{RiderType, RoadNetwork};

    fn corridor(window: u32) -> FluidInstance {
        let net = RoadNetwork::line(100);
        let types = vec![
            RiderType::new(0, 100, 0.05),
            RiderType::new(50, 100, 0.05),
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

    fn duals_for(window: u32, gamma: Vec<f64>, xi_fill: f64, lens: &[u32]) -> DualTables {
        let xi = lens
            .iter()
            .map(|&l| vec![xi_fill; (window as usize) + l as usize - 1])
            .collect();
        DualTables { gamma, xi, window }
    }

    #[test]
    fn on_trip_rule_empty_candidates_goes_solo() {
        let inst = corridor(0);
        let duals = duals_for(0, vec![70.0, 35.0], 0.0, &[100, 50]);
        let d = on_trip_decide(&duals, inst.compat(), inst.cost_rate, &[], 1);
        assert_eq!(d, MatchDecision::Single(None));
        // Occupied but incompatible: the long type cannot join the short one.
        let d = on_trip_decide(&duals, inst.compat(), inst.cost_rate, &[(1, 10)], 0);
        assert_eq!(d, MatchDecision::Single(None));
    }

    #[test]
    fn on_trip_rule_picks_min_generalized_cost() {
        let inst = corridor(0);
        // Candidates (j=0, u=20): c*l = 0.7*80 = 56, xi = 55 -> cost 1;
        // (j=0, u=30): c*l = 0.7*70 = 49, xi = 40 -> cost 9.
        let mut duals = duals_for(0, vec![0.0, 70.0], 0.0, &[100, 50]);
        duals.xi[0][19] = 55.0;
        duals.xi[0][29] = 40.0;
        let d = on_trip_decide(&duals, inst.compat(), inst.cost_rate, &[(0, 20), (0, 30)], 1);
        assert_eq!(d, MatchDecision::Single(Some((0, 20))));
        // gamma below every candidate cost: solo.
        duals.gamma[1] = 0.5;
        let d = on_trip_decide(&duals, inst.compat(), inst.cost_rate, &[(0, 20), (0, 30)], 1);
        assert_eq!(d, MatchDecision::Single(None));
    }

    #[test]
    fn exact_matching_trivial_cases() {
        assert_eq!(exact_matching(&[], 4, 64).unwrap(), vec![]);
        let one = [MatchEdge { a: 0, b: 2, weight: -1.5 }];
        assert_eq!(exact_matching(&one, 3, 64).unwrap(), vec![(0, 2)]);
        // Nonnegative edges never enter a matching.
        let zero = [MatchEdge { a: 0, b: 1, weight: 0.0 }];
        assert_eq!(exact_matching(&zero, 2, 64).unwrap(), vec![]);
        assert!(matches!(
            exact_matching(&one, 65, 64),
            Err(PolicyError::TooManyRiders { .. })
        ));
    }

    #[test]
    fn triangle_picks_single_cheapest_edge() {
        let edges = [
            MatchEdge { a: 0, b: 1, weight: -5.0 },
            MatchEdge { a: 1, b: 2, weight: -4.0 },
            MatchEdge { a: 0, b: 2, weight: -3.0 },
        ];
        assert_eq!(exact_matching(&edges, 3, 64).unwrap(), vec![(0, 1)]);
    }

    /// Test-only oracle: enumerate every matching by include/exclude
    /// recursion over the edge list.
    fn brute_force_min(edges: &[MatchEdge], n: usize) -> f64 {
        fn rec(edges: &[MatchEdge], k: usize, used: &mut [bool]) -> f64 {
            if k == edges.len() {
                return 0.0;
            }
            let skip = rec(edges, k + 1, used);
            let e = edges[k];
            if e.weight < 0.0 && !used[e.a] && !used[e.b] {
                used[e.a] = true;
                used[e.b] = true;
                let take = e.weight + rec(edges, k + 1, used);
                used[e.a] = false;
                used[e.b] = false;
                return skip.min(take);
            }
            skip
        }
        rec(edges, 0, &mut vec![false; n])
    }

    #[test]
    fn exact_matching_agrees_with_enumeration_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..60 {
            let n = rng.gen_range(2..=10);
            let mut edges = Vec::new();
            for a in 0..n {
                for b in (a + 1)..n {
                    if rng.gen_bool(0.5) {
                        edges.push(MatchEdge {
                            a,
                            b,
                            weight: rng.gen_range(-10.0..2.0),
                        });
                    }
                }
            }
            let pairs = exact_matching(&edges, n, 64).unwrap();
            let got: f64 = pairs
                .iter()
                .map(|&(a, b)| {
                    edges
                        .iter()
                        .find(|e| (e.a, e.b) == (a, b) || (e.b, e.a) == (a, b))
                        .unwrap()
                        .weight
                })
                .sum();
            let want = brute_force_min(&edges, n);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            // Disjointness.
            let mut seen = std::collections::HashSet::new();
            for &(a, b) in &pairs {
                assert!(seen.insert(a) && seen.insert(b));
            }
        }
    }

    #[test]
    fn combined_phase_rules_hold() {
        let inst = corridor(5);
        let duals = duals_for(5, vec![100.0, 100.0], 50.0, &[100, 50]);
        // Riders: two waiting longs with slack, an en-route long, an
        // en-route short. Waiting pairs with slack and en-route pairs are
        // both off limits.
        let riders = [
            ActiveRider { ty: 0, clock: -3 },
            ActiveRider { ty: 0, clock: -1 },
            ActiveRider { ty: 0, clock: 4 },
            ActiveRider { ty: 1, clock: 7 },
        ];
        let edges = candidate_edges(&duals, inst.compat(), inst.cost_rate, &riders);
        for e in &edges {
            let (u, v) = (
                riders[e.a].clock.min(riders[e.b].clock),
                riders[e.a].clock.max(riders[e.b].clock),
            );
            assert!(!(u < v && v < 0), "waiting pair with slack matched");
            assert!(!(0 < u && u < v), "two dispatched riders matched");
        }
        let MatchDecision::Pairs(pairs) =
            combined_decide(&duals, inst.compat(), inst.cost_rate, &riders).unwrap()
        else {
            panic!("combined returns pairs")
        };
        for (a, b) in pairs {
            let (e, l) = if riders[a].clock < riders[b].clock {
                (a, b)
            } else {
                (b, a)
            };
            assert!(inst
                .compat()
                .is_compatible(riders[e].ty, riders[l].ty, riders[l].clock));
        }
    }

    #[test]
    fn ideal_pretrip_self_match_at_deadline() {
        let inst = corridor(5);
        // Two waiting same-type riders, one at the departure deadline; the
        // edge weight c*l_i - xi(u) - xi(0) is negative, so they pair up.
        let duals = duals_for(5, vec![60.0, 30.0], 45.0, &[100, 50]);
        let riders = [
            ActiveRider { ty: 0, clock: -2 },
            ActiveRider { ty: 0, clock: 0 },
        ];
        let d = combined_decide(&duals, inst.compat(), inst.cost_rate, &riders).unwrap();
        assert_eq!(d, MatchDecision::Pairs(vec![(0, 1)]));
    }

    #[test]
    fn single_arrival_consistency_with_on_trip_rule() {
        // With T = 0, one new rider, and everyone else en route, the
        // per-period matching and the on-trip rule agree.
        use rand::{Rng, SeedableRng};
        let inst = corridor(0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let gamma = vec![rng.gen_range(0.0..80.0), rng.gen_range(0.0..80.0)];
            let mut duals = duals_for(0, gamma, 0.0, &[100, 50]);
            for xs in duals.xi.iter_mut() {
                for v in xs.iter_mut() {
                    *v = rng.gen_range(-10.0..70.0);
                }
            }
            let mut riders = vec![ActiveRider { ty: 1, clock: 0 }];
            let mut occupied = Vec::new();
            let mut used = std::collections::HashSet::new();
            for _ in 0..rng.gen_range(0..6) {
                let u = rng.gen_range(1..99);
                if used.insert(u) {
                    riders.push(ActiveRider { ty: 0, clock: u });
                    occupied.push((0usize, u));
                }
            }
            let single = on_trip_decide(&duals, inst.compat(), inst.cost_rate, &occupied, 1);
            let combined =
                combined_decide(&duals, inst.compat(), inst.cost_rate, &riders).unwrap();
            let MatchDecision::Pairs(pairs) = combined else { unreachable!() };
            match single {
                MatchDecision::Single(Some((j, u))) => {
                    let partner = riders
                        .iter()
                        .position(|r| r.ty == j && r.clock == u)
                        .unwrap();
                    // Skip knife-edge gamma = kappa ties: the per-period
                    // matching only takes strictly negative edges.
                    let kappa = inst.cost_rate
                        * inst.compat().shared_trip_length(1, j, u) as f64
                        - duals.xi(j, u);
                    if (duals.gamma[1] - kappa).abs() > 1e-9 {
                        assert_eq!(pairs, vec![(0.min(partner), 0.max(partner))]);
                    }
                }
                MatchDecision::Single(None) => assert!(pairs.is_empty()),
                _ => unreachable!(),
            }
        }
    }
}
