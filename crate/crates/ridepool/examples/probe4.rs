use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ridepool::fluid::{build_cb, revenue, solve_cb, ModelOptions};
use ridepool::instances::gen_example2;
use ridepool::policy::{DualTables, PolicyKind};
use ridepool::pricing::{mm_optimize, PricingConfig};
use ridepool::sim::{run_simulation, SimConfig};

fn main() {
    // Reconstruct acceptance instance k=3 (PreTrip).
    let k = 3u64;
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
    let n = rng.gen_range(2..=5);
    let len = *[20u32, 30, 40].get(rng.gen_range(0..3)).unwrap();
    let window = rng.gen_range(0..=10u32);
    println!("instance: n={n} len={len} T={window}");
    let opts = ModelOptions { window, on_trip: false, ..ModelOptions::default() };
    let inst = gen_example2(n, len, 0.1, 0.7, 40 + k, opts).unwrap();
    let pricing = mm_optimize(&inst, &PricingConfig::default()).unwrap();
    println!("lambda = {:?}, g = {}", pricing.lambda, pricing.profit);

    // Cross-check C(lambda) via the full LP (all ratio rows).
    let sol = solve_cb(&inst, &pricing.lambda).unwrap();
    let full = ridepool::lp::solve_lp(&build_cb(&inst, &pricing.lambda).unwrap().lp).unwrap();
    println!("row-gen C = {}, full-LP C = {}", sol.cost, full.objective);
    println!("revenue = {}", revenue(&inst, &pricing.lambda));

    // Long simulation to see where the violation comes from.
    let duals = DualTables::from_solution(&pricing.solution);
    for (periods, reps) in [(25_000u64, 4u32), (200_000, 8)] {
        let m = run_simulation(&inst, &pricing.lambda, &duals, PolicyKind::PreTrip,
            &SimConfig { periods, seed: 7 + k, replications: reps }).unwrap();
        let t = &m.tallies[0];
        println!(
            "periods={periods} reps={reps}: sim profit {:.5} +- {:.5} | conv={} matches={} solo={} active={} rev={:.1} dist={}",
            m.mean_profit_per_period(), m.se_profit_per_period(),
            t.conversions, t.matches, t.solo_completions, t.active_at_horizon, t.revenue, t.distance,
        );
    }
    // Fluid prediction of per-period rates at lambda-hat.
    let conv_rate: f64 = pricing.lambda.iter().enumerate()
        .map(|(i, l)| inst.types[i].arrival_prob * l).sum();
    let match_rate: f64 = sol.x.iter().sum();
    println!("fluid conv rate {conv_rate:.5}, match rate {match_rate:.5}, cost {:.5}", sol.cost);
}
