use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ridepool::fluid::{revenue, solve_cb, ModelOptions};
use ridepool::instances::gen_example2;
use ridepool::policy::{DualTables, PolicyKind};
use ridepool::pricing::{mm_optimize, PricingConfig};
use ridepool::sim::{run_one, Event};
use std::collections::HashMap;

fn main() {
    let k = 3u64;
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
    let n = rng.gen_range(2..=5);
    let len = *[20u32, 30, 40].get(rng.gen_range(0..3)).unwrap();
    let window = rng.gen_range(0..=10u32) as i32;
    let opts = ModelOptions { window: window as u32, on_trip: false, ..ModelOptions::default() };
    let inst = gen_example2(n, len, 0.1, 0.7, 40 + k, opts).unwrap();
    let pricing = mm_optimize(&inst, &PricingConfig::default()).unwrap();
    let lambda = pricing.lambda.clone();
    let duals = DualTables::from_solution(&pricing.solution);
    let periods = 2_000_000u64;
    let (tally, log) = run_one(&inst, &lambda, &duals, PolicyKind::PreTrip, periods, 123).unwrap();
    println!("sim profit/period {:.6} vs g {:.6}", tally.profit(&inst) / periods as f64, pricing.profit);

    // Empirical mapped flows: x[(i,j,v0)] and per-rider y-chain exits.
    // Matches: earlier-clock rider (new_*) is the demand side; v0 is the
    // state-side rider's clock at the demand rider's arrival.
    let mut x: HashMap<(usize, usize, i32), f64> = HashMap::new();
    let mut y_exit: HashMap<(usize, i32), f64> = HashMap::new(); // type, state of mapped exit (chain cut AFTER this state's inflow)
    let mut demand_solo: Vec<f64> = vec![0.0; n]; // riders entering y at -T
    let mut conv: Vec<f64> = vec![0.0; n];
    for e in &log {
        match *e {
            Event::Arrival { ty, converted, .. } => {
                if converted { conv[ty] += 1.0; }
            }
            Event::Match { new_ty, new_clock, ex_ty, ex_clock, .. } => {
                assert_eq!(ex_clock, 0);
                let v0 = -new_clock - window;
                assert!(v0 >= -window + 1 && v0 <= 0, "v0 {v0}");
                *x.entry((new_ty, ex_ty, v0)).or_default() += 1.0;
                *y_exit.entry((ex_ty, v0)).or_default() += 1.0;
            }
            Event::SoloComplete { ty, .. } => { *y_exit.entry((ty, len as i32)).or_default() += 1.0; }
            Event::HorizonActive { ty, clock } => { *y_exit.entry((ty, clock.min(len as i32))).or_default() += 1.0; }
        }
    }
    // Demand side: conversions either matched-as-demand or entered the chain.
    for i in 0..n {
        let matched_as_demand: f64 = x.iter().filter(|((a, _, _), _)| *a == i).map(|(_, v)| v).sum();
        demand_solo[i] = conv[i] - matched_as_demand;
    }
    // y_j^u = riders of type j whose mapped exit state is beyond u.
    let y = |j: usize, u: i32| -> f64 {
        y_exit.iter().filter(|((t, eu), _)| *t == j && *eu > u).map(|(_, v)| v).sum::<f64>()
    };
    let per = periods as f64;
    // Check ratio rows at the mapped flows.
    let mut worst: f64 = 0.0;
    let mut worst_row = (0, 0, 0);
    for (&(i, j, v0), &xv) in &x {
        let mass: f64 = inst.compat().compatible_types(j, v0).iter()
            .map(|&kk| inst.types[kk as usize].arrival_prob * lambda[kk as usize]).sum();
        let lhs = inst.types[i].arrival_prob * lambda[i] * y(j, v0) / per;
        let rhs = (1.0 - mass) * xv / per;
        if rhs - lhs > worst {
            worst = rhs - lhs;
            worst_row = (i, j, v0);
        }
    }
    println!("worst ratio violation of mapped flows: {worst:.3e} at {worst_row:?}");
    // Mapped cost = sum over riders of c * (distance traveled in mapped flow)
    // solo completion: c*len; matched state-side at v0<=0: 0 moving cost + handled via x cost; demand-side: x cost c*l^{v0}.
    let mut mapped_cost = 0.0;
    for (&(i, j, v0), &xv) in &x {
        mapped_cost += inst.cost_rate * inst.compat().shared_trip_length(i, j, v0) as f64 * xv;
    }
    for ((_t, eu), v) in &y_exit {
        if *eu == len as i32 { mapped_cost += inst.cost_rate * len as f64 * v; }
        else if *eu > 0 { mapped_cost += inst.cost_rate * *eu as f64 * v; }
    }
    let c_at = solve_cb(&inst, &lambda).unwrap().cost;
    println!("mapped cost/period {:.6} vs realized {:.6} vs C(lambda) {:.6}",
        mapped_cost / per, inst.cost_rate * tally.distance as f64 / per, c_at);
    println!("revenue/period {:.6} vs fluid revenue {:.6}", tally.revenue / per, revenue(&inst, &lambda));
    println!("conv rate {:.6} vs fluid {:.6}", conv.iter().sum::<f64>() / per,
        lambda.iter().enumerate().map(|(i, l)| inst.types[i].arrival_prob * l).sum::<f64>());
}
