//! Experiment harness: instance generation, fluid solves, pricing runs,
//! simulations, parameter sweeps, and trip-data ingestion.

mod config;
mod outputs;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use ridepool::fluid::{build_cb, revenue, solve_cb};
use ridepool::graph::RoadNetwork;
use ridepool::instances::{
    gen_example1, gen_example2, ingest_trips, parse_node_coords, parse_trips, parse_zones,
    type_list_to_string, IngestParams,
};
use ridepool::policy::PolicyKind;
use ridepool::pricing::mm_optimize;
use ridepool::sim::{run_one, run_simulation, write_event_csv};

use config::Config;
use outputs::{
    echo_config, ensure_dir, save_metrics, write_json, write_profit_table, write_sweep_csv,
    PricingArtifact, SweepRow,
};

#[derive(Parser)]
#[command(
    name = "ridepool",
    about = "Shared-ride pricing and matching experiments",
    version
)]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override simulation.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override output.dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override simulation.replications.
    #[arg(long, global = true)]
    replications: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a builtin instance (network, types, runnable config) to disk.
    Gen {
        /// Builtin family: 1 = two-type corridor, 2 = grid types.
        #[arg(long)]
        example: u8,
        /// Corridor length (example 1) or equal trip length (example 2).
        #[arg(long, default_value_t = 100)]
        length: u32,
        /// Short-type length l (example 1).
        #[arg(long, alias = "l")]
        short_length: Option<u32>,
        /// Number of types (example 2).
        #[arg(long, default_value_t = 5)]
        n_types: usize,
        #[arg(long, default_value_t = 0.1)]
        lambda_total: f64,
        #[arg(long, default_value_t = 0.7)]
        cost_rate: f64,
        /// Sampling seed (example 2).
        #[arg(long, default_value_t = 0)]
        instance_seed: u64,
    },
    /// Solve the steady-state cost relaxation at a fixed lambda.
    SolveFluid {
        /// Scalar conversion probability applied to every type.
        #[arg(long)]
        lambda: Option<f64>,
        /// Also dump the LP in CPLEX text format for external cross-checks.
        #[arg(long)]
        dump_lp: bool,
    },
    /// Optimize conversion probabilities and save the pricing artifact.
    Price,
    /// Simulate the configured policy under a pricing artifact.
    Simulate {
        /// Pricing artifact path; defaults to <out>/pricing.json and is
        /// computed (and saved) on the fly when missing.
        #[arg(long)]
        pricing: Option<PathBuf>,
    },
    /// Run the configured sweep grid: price + simulate per cell.
    Sweep,
    /// Estimate rider types from trip records via two-step clustering.
    Ingest {
        /// Trip CSV: pickup_x,pickup_y,dropoff_x,dropoff_y,timestamp.
        #[arg(long)]
        trips: PathBuf,
        /// Zone polygons: "zone_id x1 y1 x2 y2 x3 y3 ..." per line.
        #[arg(long)]
        zones: PathBuf,
        /// Node coordinates: "node_id x y" per line.
        #[arg(long)]
        nodes: PathBuf,
        /// Network edge list the types snap onto.
        #[arg(long)]
        network: PathBuf,
        #[arg(long, default_value_t = 2)]
        clusters_per_zone: usize,
        /// Observation window length in periods.
        #[arg(long)]
        window_periods: f64,
        /// Arrival-rate multiplier for desk-scale runs.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen {
            example,
            length,
            short_length,
            n_types,
            lambda_total,
            cost_rate,
            instance_seed,
        } => cmd_gen(
            &cli,
            *example,
            *length,
            *short_length,
            *n_types,
            *lambda_total,
            *cost_rate,
            *instance_seed,
        ),
        Command::SolveFluid { lambda, dump_lp } => cmd_solve_fluid(&cli, *lambda, *dump_lp),
        Command::Price => cmd_price(&cli).map(|_| ()),
        Command::Simulate { pricing } => cmd_simulate(&cli, pricing.as_deref()),
        Command::Sweep => cmd_sweep(&cli),
        Command::Ingest {
            trips,
            zones,
            nodes,
            network,
            clusters_per_zone,
            window_periods,
            scale,
        } => cmd_ingest(
            &cli,
            trips,
            zones,
            nodes,
            network,
            *clusters_per_zone,
            *window_periods,
            *scale,
        ),
    }
}

/// Loads the config and applies command-line overrides.
fn load_config(cli: &Cli) -> Result<(Config, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .context("--config is required for this command")?;
    let mut cfg = Config::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(reps) = cli.replications {
        cfg.simulation.replications = reps;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.display().to_string();
    }
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((cfg, base))
}

fn out_dir(cfg: &Config, base: &Path) -> PathBuf {
    let dir = PathBuf::from(&cfg.output.dir);
    if dir.is_absolute() {
        dir
    } else {
        base.join(dir)
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    cli: &Cli,
    example: u8,
    length: u32,
    short_length: Option<u32>,
    n_types: usize,
    lambda_total: f64,
    cost_rate: f64,
    instance_seed: u64,
) -> Result<()> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    ensure_dir(&dir)?;
    let opts = ridepool::fluid::ModelOptions::default();
    let (inst, mut cfg) = match example {
        1 => {
            let l = short_length.unwrap_or(length);
            let inst = gen_example1(length, l, lambda_total, cost_rate, opts)?;
            let mut cfg = Config::default();
            cfg.instance.kind = "example1".into();
            cfg.instance.length = Some(length);
            cfg.instance.short_length = Some(l);
            cfg.instance.lambda_total = Some(lambda_total);
            (inst, cfg)
        }
        2 => {
            let inst = gen_example2(
                n_types,
                length,
                lambda_total,
                cost_rate,
                instance_seed,
                opts,
            )?;
            let mut cfg = Config::default();
            cfg.instance.kind = "example2".into();
            cfg.instance.length = Some(length);
            cfg.instance.n_types = Some(n_types);
            cfg.instance.instance_seed = Some(instance_seed);
            cfg.instance.lambda_total = Some(lambda_total);
            (inst, cfg)
        }
        other => bail!("--example must be 1 or 2, got {other}"),
    };
    cfg.model.cost_rate = cost_rate;
    std::fs::write(dir.join("network.txt"), inst.network.to_edge_list())?;
    std::fs::write(dir.join("types.txt"), type_list_to_string(&inst.types))?;
    // A files-based copy of the same instance, directly runnable.
    let mut files_cfg = cfg.clone();
    files_cfg.instance = config::InstanceSection {
        kind: "files".into(),
        network_file: Some("network.txt".into()),
        types_file: Some("types.txt".into()),
        ..Default::default()
    };
    std::fs::write(
        dir.join("instance.toml"),
        toml::to_string_pretty(&files_cfg)?,
    )?;
    write_json(
        &dir.join("gen_info.json"),
        &serde_json::json!({
            "example": example,
            "delta": inst.delta,
            "num_types": inst.num_types(),
            "num_nodes": inst.network.num_nodes(),
            "trip_lengths": (0..inst.num_types()).map(|i| inst.trip_len(i)).collect::<Vec<_>>(),
        }),
    )?;
    println!("wrote instance files to {}", dir.display());
    Ok(())
}

fn cmd_solve_fluid(cli: &Cli, lambda: Option<f64>, dump_lp: bool) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let dir = out_dir(&cfg, &base);
    ensure_dir(&dir)?;
    echo_config(&cfg, &dir)?;
    let inst = cfg.build_instance(&base)?;
    let scalar = lambda
        .or(cfg.pricing.initial_lambda)
        .unwrap_or(((1.0 - cfg.model.cost_rate) / 2.0).clamp(0.0, 1.0));
    let lam = vec![scalar; inst.num_types()];
    let sol = solve_cb(&inst, &lam)?;
    let mut buf = Vec::new();
    sol.write_csv(&mut buf)?;
    std::fs::write(dir.join("fluid_solution.csv"), buf)?;
    write_json(
        &dir.join("fluid.json"),
        &serde_json::json!({
            "lambda": lam,
            "cost": sol.cost,
            "revenue": revenue(&inst, &lam),
            "profit": revenue(&inst, &lam) - sol.cost,
            "lp_iterations": sol.lp_iterations,
        }),
    )?;
    if dump_lp {
        let model = build_cb(&inst, &lam)?;
        let mut buf = Vec::new();
        model.lp.write_lp_format(&mut buf)?;
        std::fs::write(dir.join("cb.lp"), buf)?;
    }
    println!(
        "fluid cost {:.6}, profit {:.6} at lambda {:.4}",
        sol.cost,
        revenue(&inst, &lam) - sol.cost,
        scalar
    );
    Ok(())
}

fn cmd_price(cli: &Cli) -> Result<PathBuf> {
    let (cfg, base) = load_config(cli)?;
    let dir = out_dir(&cfg, &base);
    ensure_dir(&dir)?;
    echo_config(&cfg, &dir)?;
    let inst = cfg.build_instance(&base)?;
    let result = mm_optimize(&inst, &cfg.pricing_config(inst.num_types()))?;
    let artifact = PricingArtifact::new(&cfg, &result);
    let path = dir.join("pricing.json");
    artifact.save(&path)?;
    if cfg.pricing.verbose_trace {
        let mut buf = String::from("iteration,profit");
        for i in 0..inst.num_types() {
            buf.push_str(&format!(",lambda_{i}"));
        }
        buf.push('\n');
        for (k, (g, lam)) in result.trace.iter().zip(&result.trace_lambda).enumerate() {
            buf.push_str(&k.to_string());
            buf.push_str(&format!(",{g}"));
            for l in lam {
                buf.push_str(&format!(",{l}"));
            }
            buf.push('\n');
        }
        std::fs::write(dir.join("pricing_trace.csv"), buf)?;
    }
    println!(
        "priced {} types: fluid profit {:.6}, lambda {:?}",
        inst.num_types(),
        result.profit,
        result.lambda
    );
    Ok(path)
}

fn cmd_simulate(cli: &Cli, pricing_path: Option<&Path>) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let dir = out_dir(&cfg, &base);
    ensure_dir(&dir)?;
    echo_config(&cfg, &dir)?;
    let inst = cfg.build_instance(&base)?;
    let default_path = dir.join("pricing.json");
    let path = pricing_path.unwrap_or(&default_path);
    let artifact = if path.exists() {
        let artifact = PricingArtifact::load(path)?;
        artifact.check_against(&cfg, inst.num_types())?;
        artifact
    } else {
        let result = mm_optimize(&inst, &cfg.pricing_config(inst.num_types()))?;
        let artifact = PricingArtifact::new(&cfg, &result);
        artifact.save(&default_path)?;
        artifact
    };
    let metrics = run_simulation(
        &inst,
        &artifact.lambda,
        &artifact.duals,
        cfg.model.policy,
        &cfg.sim_config(),
    )?;
    save_metrics(&metrics, &dir)?;
    if cfg.simulation.event_log {
        let (_, log) = run_one(
            &inst,
            &artifact.lambda,
            &artifact.duals,
            cfg.model.policy,
            cfg.simulation.periods,
            cfg.simulation.seed,
        )?;
        let mut buf = Vec::new();
        write_event_csv(&log, &mut buf)?;
        std::fs::write(dir.join("events.csv"), buf)?;
    }
    println!(
        "simulated {} replications x {} periods: profit/period {:.6} (se {:.6})",
        cfg.simulation.replications,
        cfg.simulation.periods,
        metrics.mean_profit_per_period(),
        metrics.se_profit_per_period()
    );
    Ok(())
}

/// One sweep cell fully specified.
#[derive(Clone)]
struct Cell {
    policy: PolicyKind,
    window: u32,
    cost_rate: f64,
    short_length: Option<u32>,
    n_types: Option<usize>,
    instance_seed: Option<u64>,
}

impl Cell {
    fn name(&self) -> String {
        let mut name = format!("{}_T{}_c{}", policy_name(self.policy), self.window, self.cost_rate);
        if let Some(l) = self.short_length {
            name.push_str(&format!("_l{l}"));
        }
        if let Some(n) = self.n_types {
            name.push_str(&format!("_n{n}"));
        }
        if let Some(s) = self.instance_seed {
            name.push_str(&format!("_s{s}"));
        }
        name
    }

    /// Per-cell configuration derived from the base one.
    fn apply(&self, base: &Config) -> Config {
        let mut cfg = base.clone();
        cfg.model.policy = self.policy;
        cfg.model.window = if self.policy.forces_zero_window() {
            0
        } else {
            self.window
        };
        cfg.model.cost_rate = self.cost_rate;
        if let Some(l) = self.short_length {
            cfg.instance.short_length = Some(l);
        }
        if let Some(n) = self.n_types {
            cfg.instance.n_types = Some(n);
        }
        if let Some(s) = self.instance_seed {
            cfg.instance.instance_seed = Some(s);
        }
        cfg.sweep = None;
        cfg
    }
}

fn cmd_sweep(cli: &Cli) -> Result<()> {
    let (cfg, base) = load_config(cli)?;
    let sweep = cfg.sweep.clone().context("config has no [sweep] section")?;
    let dir = out_dir(&cfg, &base);
    ensure_dir(&dir)?;
    echo_config(&cfg, &dir)?;

    let policies = if sweep.policies.is_empty() {
        vec![cfg.model.policy]
    } else {
        sweep.policies.clone()
    };
    let windows = if sweep.windows.is_empty() {
        vec![cfg.model.window]
    } else {
        sweep.windows.clone()
    };
    let costs = if sweep.cost_rates.is_empty() {
        vec![cfg.model.cost_rate]
    } else {
        sweep.cost_rates.clone()
    };
    // Instance axis by kind; a single None entry means "as configured".
    let mut instance_axis: Vec<(Option<u32>, Option<usize>, Option<u64>)> =
        vec![(None, None, None)];
    if cfg.instance.kind == "example1" && !sweep.short_lengths.is_empty() {
        instance_axis = sweep
            .short_lengths
            .iter()
            .map(|&l| (Some(l), None, None))
            .collect();
    } else if cfg.instance.kind == "example2" && !sweep.n_types.is_empty() {
        let seeds: Vec<u64> = if sweep.instance_seeds.is_empty() {
            vec![cfg.instance.instance_seed.unwrap_or(0)]
        } else {
            sweep.instance_seeds.clone()
        };
        instance_axis = sweep
            .n_types
            .iter()
            .flat_map(|&n| seeds.iter().map(move |&s| (None, Some(n), Some(s))))
            .collect();
    }

    let mut cells = Vec::new();
    for policy in &policies {
        let cell_windows: Vec<u32> = if policy.forces_zero_window() {
            vec![0]
        } else {
            windows.clone()
        };
        for window in cell_windows {
            for &cost_rate in &costs {
                for &(short_length, n_types, instance_seed) in &instance_axis {
                    cells.push(Cell {
                        policy: *policy,
                        window,
                        cost_rate,
                        short_length,
                        n_types,
                        instance_seed,
                    });
                }
            }
        }
    }

    let rows: Result<Vec<SweepRow>> = cells
        .par_iter()
        .map(|cell| -> Result<SweepRow> {
            let cell_cfg = cell.apply(&cfg);
            let cell_dir = dir.join("cells").join(cell.name());
            ensure_dir(&cell_dir)?;
            echo_config(&cell_cfg, &cell_dir)?;
            let inst = cell_cfg.build_instance(&base)?;
            let result = mm_optimize(&inst, &cell_cfg.pricing_config(inst.num_types()))?;
            let artifact = PricingArtifact::new(&cell_cfg, &result);
            artifact.save(&cell_dir.join("pricing.json"))?;
            let metrics = run_simulation(
                &inst,
                &artifact.lambda,
                &artifact.duals,
                cell_cfg.model.policy,
                &cell_cfg.sim_config(),
            )?;
            save_metrics(&metrics, &cell_dir)?;
            Ok(SweepRow {
                policy: cell.policy,
                window: cell_cfg.model.window,
                cost_rate: cell.cost_rate,
                short_length: cell.short_length,
                delta: inst.delta,
                n_types: cell.n_types,
                instance_seed: cell.instance_seed,
                fluid_profit: result.profit,
                mean: metrics.mean.clone(),
                se_profit_per_period: metrics.se_profit_per_period(),
            })
        })
        .collect();
    let rows = rows?;

    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf)?;
    std::fs::write(dir.join("sweep.csv"), buf)?;
    write_json(&dir.join("sweep.json"), &rows)?;

    // Plot-ready profit tables along the instance axes.
    if cfg.instance.kind == "example1" && !sweep.short_lengths.is_empty() {
        let table: Vec<(String, String, f64, f64)> = rows
            .iter()
            .map(|r| {
                (
                    format!("{}", r.delta.unwrap_or(f64::NAN)),
                    format!("{}_T{}_c{}", policy_name(r.policy), r.window, r.cost_rate),
                    r.mean.profit_per_period,
                    r.se_profit_per_period,
                )
            })
            .collect();
        let mut buf = Vec::new();
        write_profit_table("delta", &table, &mut buf)?;
        std::fs::write(dir.join("profit_vs_delta.csv"), buf)?;
    }
    if cfg.instance.kind == "example2" && !sweep.n_types.is_empty() {
        // Mean over instance seeds per (policy, window, cost, n).
        let mut grouped: std::collections::BTreeMap<(String, usize), Vec<f64>> =
            std::collections::BTreeMap::new();
        for r in &rows {
            let key = (
                format!("{}_T{}_c{}", policy_name(r.policy), r.window, r.cost_rate),
                r.n_types.unwrap_or(0),
            );
            grouped
                .entry(key)
                .or_default()
                .push(r.mean.profit_per_period);
        }
        let table: Vec<(String, String, f64, f64)> = grouped
            .into_iter()
            .map(|((policy, n), vals)| {
                let count = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / count;
                let se = if vals.len() > 1 {
                    let var =
                        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0);
                    (var / count).sqrt()
                } else {
                    0.0
                };
                (n.to_string(), policy, mean, se)
            })
            .collect();
        let mut buf = Vec::new();
        write_profit_table("n_types", &table, &mut buf)?;
        std::fs::write(dir.join("profit_vs_n.csv"), buf)?;
    }
    println!("swept {} cells into {}", rows.len(), dir.display());
    Ok(())
}

fn policy_name(policy: PolicyKind) -> &'static str {
    match policy {
        PolicyKind::PreTrip => "pre_trip",
        PolicyKind::OnTrip => "on_trip",
        PolicyKind::Combined => "combined",
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_ingest(
    cli: &Cli,
    trips: &Path,
    zones: &Path,
    nodes: &Path,
    network: &Path,
    clusters_per_zone: usize,
    window_periods: f64,
    scale: f64,
) -> Result<()> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    ensure_dir(&dir)?;
    let read =
        |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let records = parse_trips(&read(trips)?)?;
    let zone_list = parse_zones(&read(zones)?)?;
    let coords = parse_node_coords(&read(nodes)?)?;
    let net = RoadNetwork::from_edge_list(&read(network)?)?;
    let params = IngestParams {
        clusters_per_zone,
        window_periods,
        scale,
        seed: cli.seed.unwrap_or(0),
    };
    let outcome = ingest_trips(&records, &zone_list, &coords, &net, &params)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::write(dir.join("types.txt"), type_list_to_string(&outcome.types))?;
    write_json(
        &dir.join("ingest.json"),
        &serde_json::json!({
            "trips": records.len(),
            "zones": zone_list.len(),
            "types": outcome.types.len(),
            "total_arrival_prob": outcome.types.iter().map(|t| t.arrival_prob).sum::<f64>(),
            "warnings": outcome.warnings,
            "clusters_per_zone": clusters_per_zone,
            "window_periods": window_periods,
            "scale": scale,
        }),
    )?;
    println!(
        "ingested {} trips into {} types ({} warnings)",
        records.len(),
        outcome.types.len(),
        outcome.warnings.len()
    );
    Ok(())
}
