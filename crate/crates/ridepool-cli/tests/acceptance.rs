//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines as they complete.
//!
//! Criterion 9's first clause is a documented red: at corridor length 40 the
//! steady-state upper bound itself rules the required ordering out (see the
//! test body), while the same comparison passes at corridor length 100.

use ridepool::fluid::{cost_gradient, solve_cb, FluidInstance, ModelOptions};
use ridepool::instances::{gen_example1, gen_example2};
use ridepool::policy::{
    candidate_edges, combined_decide, ActiveRider, DualTables, MatchDecision, MatchEdge,
    PolicyKind,
};
use ridepool::pricing::{mm_optimize, PricingConfig, PricingResult};
use ridepool::sim::{compute_metrics, run_one, run_simulation, Event, RunMetrics, SimConfig};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion} {}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn on_trip_opts() -> ModelOptions {
    ModelOptions {
        window: 0,
        pre_trip: false,
        ..ModelOptions::default()
    }
}

fn pre_trip_opts(window: u32) -> ModelOptions {
    ModelOptions {
        window,
        on_trip: false,
        ..ModelOptions::default()
    }
}

fn combined_opts(window: u32) -> ModelOptions {
    ModelOptions {
        window,
        ..ModelOptions::default()
    }
}

fn policy_of(opts: &ModelOptions) -> PolicyKind {
    match (opts.pre_trip, opts.on_trip) {
        (false, true) => PolicyKind::OnTrip,
        (true, false) => PolicyKind::PreTrip,
        _ => PolicyKind::Combined,
    }
}

/// MM pricing followed by simulation under the resulting duals.
fn price_and_simulate(
    inst: &FluidInstance,
    periods: u64,
    replications: u32,
    seed: u64,
) -> (PricingResult, RunMetrics) {
    let pricing = mm_optimize(inst, &PricingConfig::default()).expect("pricing");
    let duals = DualTables::from_solution(&pricing.solution);
    let metrics = run_simulation(
        inst,
        &pricing.lambda,
        &duals,
        policy_of(&inst.options),
        &SimConfig {
            periods,
            seed,
            replications,
        },
    )
    .expect("simulation");
    (pricing, metrics)
}

#[test]
fn criterion_01_solo_analytic_baseline() {
    // Single type, arrival mass 0.1, length 100, zero window: a pure solo
    // market with a closed-form optimum.
    let inst = FluidInstance::new(
        ridepool::graph::RoadNetwork::line(100),
        vec![ridepool::graph::RiderType::new(0, 100, 0.1)],
        0.7,
        pre_trip_opts(0),
    )
    .unwrap();
    let (pricing, metrics) = price_and_simulate(&inst, 100_000, 10, 11);
    let lambda_ok = (pricing.lambda[0] - 0.15).abs() <= 1e-6;
    let price_ok = (pricing.prices[0] - 0.85).abs() <= 1e-9;
    let profit = metrics.mean_profit_per_period();
    let se = metrics.se_profit_per_period();
    let sim_ok = (profit - 0.225).abs() <= 3.0 * se;
    let detail = format!(
        "lambda {} (want 0.15), price/mile {} (want 0.85), sim profit {profit:.5} +- {se:.5} vs 0.225",
        pricing.lambda[0], pricing.prices[0]
    );
    report("01 solo analytic baseline", lambda_ok && price_ok && sim_ok, &detail);
    assert!(lambda_ok && price_ok && sim_ok, "{detail}");
}

#[test]
fn criterion_02_shutdown_above_unit_cost() {
    let inst = FluidInstance::new(
        ridepool::graph::RoadNetwork::line(100),
        vec![ridepool::graph::RiderType::new(0, 100, 0.1)],
        1.1,
        pre_trip_opts(0),
    )
    .unwrap();
    let (pricing, metrics) = price_and_simulate(&inst, 20_000, 3, 2);
    let pass = pricing.lambda[0] == 0.0
        && pricing.profit == 0.0
        && metrics.mean_profit_per_period() == 0.0;
    let detail = format!(
        "lambda {}, fluid profit {}, sim profit {}",
        pricing.lambda[0],
        pricing.profit,
        metrics.mean_profit_per_period()
    );
    report("02 shutdown at c=1.1", pass, &detail);
    assert!(pass, "{detail}");
}

/// Deterministic random grid instances for criteria 3-5: N <= 5 types of
/// equal length <= 40 on the block grid, waiting window <= 10.
fn random_grid_instance(k: u64, opts_for: impl Fn(u32) -> ModelOptions) -> FluidInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
    let n = rng.gen_range(2..=5);
    let len = *[20u32, 30, 40].get(rng.gen_range(0..3)).unwrap();
    let window = rng.gen_range(0..=10u32);
    gen_example2(n, len, 0.1, 0.7, 40 + k, opts_for(window)).unwrap()
}

#[test]
fn criterion_03_fluid_upper_bound_every_policy() {
    let mut worst = f64::NEG_INFINITY;
    let mut detail = String::new();
    for k in 0..10u64 {
        for policy in [PolicyKind::PreTrip, PolicyKind::OnTrip, PolicyKind::Combined] {
            let inst = random_grid_instance(k, |w| match policy {
                PolicyKind::PreTrip => pre_trip_opts(w),
                PolicyKind::OnTrip => on_trip_opts(),
                PolicyKind::Combined => combined_opts(w),
            });
            let (pricing, metrics) = price_and_simulate(&inst, 25_000, 4, 7 + k);
            let margin = metrics.mean_profit_per_period()
                - pricing.profit
                - 3.0 * metrics.se_profit_per_period();
            if margin > worst {
                worst = margin;
                detail = format!(
                    "worst margin {margin:.6} (instance {k}, {policy:?}: sim {:.5} vs g {:.5})",
                    metrics.mean_profit_per_period(),
                    pricing.profit
                );
            }
        }
    }
    let pass = worst <= 0.0;
    report("03 fluid upper bound g >= sim", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_04_minimum_total_length_at_first_step() {
    let mut checked = 0u64;
    for k in 0..10u64 {
        let inst = random_grid_instance(k, combined_opts);
        let geo = inst.compat().geometry();
        for i in 0..inst.num_types() {
            for j in 0..inst.num_types() {
                let best = (1..geo.trip_len(j) as i32)
                    .map(|u| geo.shared_trip_length(i, j, u) + u as u32)
                    .min()
                    .expect("trip lengths exceed 1");
                assert_eq!(
                    best,
                    geo.shared_trip_length(i, j, 1) + 1,
                    "instance {k}, pair ({i},{j})"
                );
                checked += 1;
            }
        }
    }
    report(
        "04 min_u (l_ij^u + u) = l_ij^1 + 1",
        true,
        &format!("{checked} type pairs, exact"),
    );
}

#[test]
fn criterion_05_compatibility_propagates_to_first_step() {
    let mut checked = 0u64;
    for k in 0..10u64 {
        let inst = random_grid_instance(k, combined_opts);
        let geo = inst.compat().geometry();
        for i in 0..inst.num_types() {
            for j in 0..inst.num_types() {
                for u in 1..geo.trip_len(j) as i32 {
                    if geo.is_compatible(i, j, u) {
                        assert!(
                            geo.is_compatible(i, j, 1),
                            "instance {k}: ({i},{j},{u}) compatible but ({i},{j},1) not"
                        );
                        checked += 1;
                    }
                }
            }
        }
    }
    report(
        "05 on-trip compatibility implies u=1 compatibility",
        true,
        &format!("{checked} compatible states, no exceptions"),
    );
}

#[test]
fn criterion_06_no_ratio_duals_reduce_to_minimum_length_rule() {
    // Corridor l=50 with ratio rows disabled; runtime duals overridden to
    // the linear form xi_i^u = gamma_i - c*u.
    let opts = ModelOptions {
        ratio_constraints: false,
        ..on_trip_opts()
    };
    let inst = gen_example1(100, 50, 0.1, 0.7, opts).unwrap();
    let pricing = mm_optimize(&inst, &PricingConfig::default()).unwrap();
    let gamma = pricing.solution.gamma.clone();
    let c = inst.cost_rate;
    let xi = (0..inst.num_types())
        .map(|i| {
            (1..inst.trip_len(i) as i32)
                .map(|u| gamma[i] - c * u as f64)
                .collect()
        })
        .collect();
    let duals = DualTables {
        gamma,
        xi,
        window: 0,
    };
    let (tally, log) = run_one(
        &inst,
        &pricing.lambda,
        &duals,
        PolicyKind::OnTrip,
        200_000,
        21,
    )
    .unwrap();
    let mut matches = 0u64;
    for event in &log {
        if let Event::Match {
            new_ty,
            ex_ty,
            ex_clock,
            shared_len,
            ..
        } = event
        {
            matches += 1;
            let first = inst.compat().shared_trip_length(*new_ty, *ex_ty, 1);
            assert_eq!(
                shared_len + *ex_clock as u32,
                first + 1,
                "match at u={ex_clock} misses the minimum-total-length rule"
            );
        }
    }
    assert_eq!(matches, tally.matches);
    let pass = matches > 0;
    report(
        "06 linear duals match only at minimum total length",
        pass,
        &format!("{matches} matches, all satisfy l^u + u = l^1 + 1"),
    );
    assert!(pass, "expected at least one match in 200k periods");
}

#[test]
fn criterion_07_envelope_gradient_vs_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    let mut kinks = 0;
    let mut worst_rel: f64 = 0.0;
    for point in 0..40 {
        let len = rng.gen_range(10..=16u32);
        let l = rng.gen_range(3..len);
        let window = rng.gen_range(0..=3u32);
        let inst = gen_example1(len, l, 0.1, 0.7, combined_opts(window)).unwrap();
        let lambda: Vec<f64> = (0..2).map(|_| rng.gen_range(0.05..0.55)).collect();
        let sol = solve_cb(&inst, &lambda).unwrap();
        let grad = cost_gradient(&inst, &sol);
        let h = 1e-4;
        for i in 0..2 {
            let mut up = lambda.clone();
            up[i] += h;
            let mut dn = lambda.clone();
            dn[i] -= h;
            let cu = solve_cb(&inst, &up).unwrap().cost;
            let cd = solve_cb(&inst, &dn).unwrap().cost;
            let (fwd, bwd) = (cu - sol.cost, sol.cost - cd);
            if (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs()) {
                kinks += 1;
                continue;
            }
            let fd = (cu - cd) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-6);
            worst_rel = worst_rel.max(rel);
            assert!(
                rel <= 1e-3,
                "point {point} coord {i}: envelope {} vs fd {fd} (rel {rel:.2e})",
                grad[i]
            );
            checked += 1;
        }
    }
    let pass = checked >= 20;
    report(
        "07 gradient matches central differences",
        pass,
        &format!("{checked} coordinates checked ({kinks} kinks excluded), worst rel {worst_rel:.2e}"),
    );
    assert!(pass, "only {checked} non-kink points");
}

#[test]
fn criterion_08_per_period_matching_equals_enumeration() {
    // Oracle: enumerate every matching over the candidate edges.
    fn enumerate_best(edges: &[MatchEdge]) -> (f64, Vec<(usize, usize)>) {
        fn rec(
            edges: &[MatchEdge],
            k: usize,
            used: &mut std::collections::HashSet<usize>,
        ) -> (f64, Vec<(usize, usize)>) {
            if k == edges.len() {
                return (0.0, Vec::new());
            }
            let mut best = rec(edges, k + 1, used);
            let e = edges[k];
            if !used.contains(&e.a) && !used.contains(&e.b) {
                used.insert(e.a);
                used.insert(e.b);
                let (w, mut pairs) = rec(edges, k + 1, used);
                used.remove(&e.a);
                used.remove(&e.b);
                if w + e.weight < best.0 {
                    pairs.push((e.a.min(e.b), e.a.max(e.b)));
                    best = (w + e.weight, pairs);
                }
            }
            best
        }
        let (w, mut pairs) = rec(edges, 0, &mut std::collections::HashSet::new());
        pairs.sort_unstable();
        (w, pairs)
    }

    let inst = gen_example1(100, 50, 0.1, 0.7, combined_opts(5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut nontrivial = 0;
    for case in 0..100 {
        let count = rng.gen_range(2..=12usize);
        // Distinct clocks across riders, each within its type's range.
        let mut clocks: Vec<i32> = (-5..50).collect();
        for i in (1..clocks.len()).rev() {
            clocks.swap(i, rng.gen_range(0..=i));
        }
        let riders: Vec<ActiveRider> = clocks[..count]
            .iter()
            .map(|&clock| ActiveRider {
                ty: usize::from(rng.gen_bool(0.5)),
                clock,
            })
            .collect();
        let duals = DualTables {
            gamma: vec![rng.gen_range(0.0..80.0), rng.gen_range(0.0..80.0)],
            xi: vec![
                (0..104).map(|_| rng.gen_range(-10.0..70.0)).collect(),
                (0..54).map(|_| rng.gen_range(-10.0..70.0)).collect(),
            ],
            window: 5,
        };
        let edges = candidate_edges(&duals, inst.compat(), inst.cost_rate, &riders);
        let decision = combined_decide(&duals, inst.compat(), inst.cost_rate, &riders).unwrap();
        let MatchDecision::Pairs(pairs) = decision else {
            panic!("combined returns pairs")
        };
        let (oracle_w, oracle_pairs) = enumerate_best(&edges);
        let got_w: f64 = pairs
            .iter()
            .map(|&(a, b)| {
                edges
                    .iter()
                    .find(|e| (e.a.min(e.b), e.a.max(e.b)) == (a, b))
                    .unwrap()
                    .weight
            })
            .sum();
        assert_eq!(pairs, oracle_pairs, "case {case}: decision differs");
        assert!((got_w - oracle_w).abs() < 1e-9);
        if !pairs.is_empty() {
            nontrivial += 1;
        }
    }
    report(
        "08 per-period matching equals enumeration",
        true,
        &format!("100 random rider sets, {nontrivial} with matches, exact agreement"),
    );
}

#[test]
fn criterion_09_corridor_heterogeneity_shape() {
    let sim = |l: u32, len: u32, opts: ModelOptions, seed: u64| -> (f64, f64) {
        let inst = gen_example1(len, l, 0.1, 0.7, opts).unwrap();
        let (_, m) = price_and_simulate(&inst, 50_000, 10, seed);
        (m.mean_profit_per_period(), m.se_profit_per_period())
    };

    // Companion run at corridor length 100, where the hump is expected and
    // observed: profit rises from delta=0, peaks in the middle, falls off.
    let c100: Vec<(f64, f64, f64)> = [(100u32, 0.0), (50, 0.5), (5, 0.95)]
        .iter()
        .map(|&(l, d)| {
            let (m, se) = sim(l, 100, on_trip_opts(), 31);
            (d, m, se)
        })
        .collect();
    println!(
        "criterion 09 companion (corridor length 100, on-trip): {:?}",
        c100.iter()
            .map(|(d, m, _)| format!("delta={d}: {m:.4}"))
            .collect::<Vec<_>>()
    );
    let companion_ok = c100[1].1 > c100[0].1 && c100[1].1 > c100[2].1;

    // The stated desk-scale comparison at corridor length 40. The middle
    // point cannot win here: maximizing the steady-state relaxation over all
    // prices caps profit at delta=0.5 near 0.0855/period, below the 0.0900
    // solo optimum at delta=0, so no policy can clear the first clause at
    // this scale. The clause is asserted anyway and documents the scale
    // artifact; the length-100 companion above shows the intended shape.
    let on40: Vec<(f64, f64, f64)> = [(40u32, 0.0), (20, 0.5), (2, 0.95)]
        .iter()
        .map(|&(l, d)| {
            let (m, se) = sim(l, 40, on_trip_opts(), 33);
            (d, m, se)
        })
        .collect();
    let mid_beats_low = on40[1].1 > on40[0].1;
    let mid_beats_high = on40[1].1 > on40[2].1;

    // Pre-trip (window 5) nonincreasing across the delta grid within 2 SE.
    let pre40: Vec<(f64, f64, f64)> = [(40u32, 0.0), (30, 0.25), (20, 0.5), (10, 0.75), (2, 0.95)]
        .iter()
        .map(|&(l, d)| {
            let (m, se) = sim(l, 40, pre_trip_opts(5), 35);
            (d, m, se)
        })
        .collect();
    let mut pre_nonincreasing = true;
    for w in pre40.windows(2) {
        let slack = 2.0 * (w[0].2.powi(2) + w[1].2.powi(2)).sqrt();
        if w[1].1 > w[0].1 + slack {
            pre_nonincreasing = false;
        }
    }

    let detail = format!(
        "L40 on-trip {:?}; pre-trip {:?}; L100 hump {}",
        on40.iter()
            .map(|(d, m, _)| format!("d={d}: {m:.4}"))
            .collect::<Vec<_>>(),
        pre40
            .iter()
            .map(|(d, m, _)| format!("d={d}: {m:.4}"))
            .collect::<Vec<_>>(),
        if companion_ok { "holds" } else { "broken" },
    );
    let pass = mid_beats_low && mid_beats_high && pre_nonincreasing && companion_ok;
    report("09 corridor heterogeneity shape", pass, &detail);
    assert!(
        pass,
        "clauses: mid>low {mid_beats_low}, mid>high {mid_beats_high}, \
         pre-trip nonincreasing {pre_nonincreasing}, length-100 hump {companion_ok} — {detail}"
    );
}

#[test]
fn criterion_10_grid_dispersion_direction() {
    let run = |policy: PolicyKind, n: usize| -> (f64, f64) {
        let vals: Vec<f64> = (0..3u64)
            .map(|seed| {
                let opts = match policy {
                    PolicyKind::OnTrip => on_trip_opts(),
                    _ => pre_trip_opts(5),
                };
                let inst = gen_example2(n, 40, 0.1, 0.7, 100 + seed, opts).unwrap();
                let (_, m) = price_and_simulate(&inst, 30_000, 5, 9 + seed);
                m.mean_profit_per_period()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / 3.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
        (mean, (var / 3.0).sqrt())
    };
    let mut detail = String::new();
    let mut pass = true;
    let mut on_trip = Vec::new();
    let mut pre_trip = Vec::new();
    for n in [1usize, 5, 10] {
        on_trip.push(run(PolicyKind::OnTrip, n));
        pre_trip.push(run(PolicyKind::PreTrip, n));
    }
    for w in on_trip.windows(2) {
        let slack = 2.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt();
        if w[1].0 < w[0].0 - slack {
            pass = false;
        }
    }
    for w in pre_trip.windows(2) {
        let slack = 2.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt();
        if w[1].0 > w[0].0 + slack {
            pass = false;
        }
    }
    detail.push_str(&format!(
        "on-trip means {:?} nondecreasing, pre-trip means {:?} nonincreasing (2-SE slack)",
        on_trip.iter().map(|(m, _)| (m * 1e4).round() / 1e4).collect::<Vec<_>>(),
        pre_trip.iter().map(|(m, _)| (m * 1e4).round() / 1e4).collect::<Vec<_>>()
    ));
    report("10 grid dispersion direction", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_11_combined_dominates_pre_trip() {
    let mut pass = true;
    let mut detail = String::new();
    for window in [0u32, 5] {
        for cost in [0.7, 1.1] {
            let pre = gen_example1(40, 20, 0.1, cost, pre_trip_opts(window)).unwrap();
            let comb = gen_example1(40, 20, 0.1, cost, combined_opts(window)).unwrap();
            let (_, m_pre) = price_and_simulate(&pre, 30_000, 5, 13);
            let (_, m_comb) = price_and_simulate(&comb, 30_000, 5, 13);
            let slack = 2.0
                * (m_pre.se_profit_per_period().powi(2) + m_comb.se_profit_per_period().powi(2))
                    .sqrt();
            let ok = m_comb.mean_profit_per_period() >= m_pre.mean_profit_per_period() - slack;
            if !ok {
                pass = false;
            }
            detail.push_str(&format!(
                "[T={window} c={cost}: combined {:.4} vs pre-trip {:.4}] ",
                m_comb.mean_profit_per_period(),
                m_pre.mean_profit_per_period()
            ));
        }
    }
    report("11 combined dominates pre-trip", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_12_accounting_identities_and_replay() {
    for (opts, policy) in [
        (combined_opts(5), PolicyKind::Combined),
        (pre_trip_opts(5), PolicyKind::PreTrip),
        (on_trip_opts(), PolicyKind::OnTrip),
    ] {
        let inst = gen_example1(40, 20, 0.1, 0.7, opts).unwrap();
        let pricing = mm_optimize(&inst, &PricingConfig::default()).unwrap();
        let duals = DualTables::from_solution(&pricing.solution);
        let (tally, log) =
            run_one(&inst, &pricing.lambda, &duals, policy, 50_000, 17).unwrap();

        // Conservation of converted riders.
        assert_eq!(
            tally.conversions,
            tally.solo_completions + 2 * tally.matches + tally.active_at_horizon,
            "{policy:?}: conversion conservation"
        );

        // Profit identity, with revenue and distance refolded from raw
        // events independently of the online accumulator.
        let mut revenue = 0.0;
        let mut distance = 0u64;
        for e in &log {
            match *e {
                Event::Arrival { fare, converted, .. } => {
                    if converted {
                        revenue += fare;
                    }
                }
                Event::Match {
                    ex_clock,
                    shared_len,
                    ..
                } => distance += ex_clock.max(0) as u64 + shared_len as u64,
                Event::SoloComplete { ty, .. } => distance += inst.trip_len(ty) as u64,
                Event::HorizonActive { clock, .. } => distance += clock.max(0) as u64,
            }
        }
        let profit = revenue - inst.cost_rate * distance as f64;
        assert_eq!(
            profit.to_bits(),
            tally.profit(&inst).to_bits(),
            "{policy:?}: profit identity"
        );

        // Log replay reproduces the online metrics bit for bit.
        let replay = compute_metrics(&inst, &pricing.lambda, 50_000, &log);
        assert_eq!(tally, replay, "{policy:?}: replay mismatch");
    }
    report(
        "12 accounting identities and log replay",
        true,
        "conversions conserved, profit = revenue - c*distance, replay identical (3 policies)",
    );
}
