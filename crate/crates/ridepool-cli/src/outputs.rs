//! Result emission: metrics CSV/JSON, pricing artifacts, config echoes.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ridepool::fluid::FareConvention;
use ridepool::policy::{DualTables, PolicyKind};
use ridepool::pricing::PricingResult;
use ridepool::sim::{MetricsRow, RunMetrics};

use crate::config::Config;

/// Pricing output consumed by `simulate`: the optimized conversion
/// probabilities plus the dual tables that drive the matching policy.
#[derive(Debug, Serialize, Deserialize)]
pub struct PricingArtifact {
    pub lambda: Vec<f64>,
    pub prices: Vec<f64>,
    pub fluid_profit: f64,
    pub trace: Vec<f64>,
    pub duals: DualTables,
    pub policy: PolicyKind,
    pub window: u32,
    pub cost_rate: f64,
    pub fare: FareConvention,
    pub num_types: usize,
}

impl PricingArtifact {
    pub fn new(cfg: &Config, result: &PricingResult) -> PricingArtifact {
        PricingArtifact {
            lambda: result.lambda.clone(),
            prices: result.prices.clone(),
            fluid_profit: result.profit,
            trace: result.trace.clone(),
            duals: DualTables::from_solution(&result.solution),
            policy: cfg.model.policy,
            window: cfg.model.window,
            cost_rate: cfg.model.cost_rate,
            fare: cfg.model.fare,
            num_types: result.lambda.len(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<PricingArtifact> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading pricing artifact {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("parsing pricing artifact {}", path.display()))
    }

    /// Rejects artifacts produced under a different model setup.
    pub fn check_against(&self, cfg: &Config, num_types: usize) -> Result<()> {
        anyhow::ensure!(
            self.num_types == num_types,
            "pricing artifact has {} types, instance has {num_types}",
            self.num_types
        );
        anyhow::ensure!(
            self.policy == cfg.model.policy && self.window == cfg.model.window,
            "pricing artifact was built for policy {:?} window {}, config wants {:?} window {}",
            self.policy,
            self.window,
            cfg.model.policy,
            cfg.model.window
        );
        anyhow::ensure!(
            (self.cost_rate - cfg.model.cost_rate).abs() < 1e-12 && self.fare == cfg.model.fare,
            "pricing artifact cost/fare setup differs from the config"
        );
        Ok(())
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Echoes the exact resolved configuration into the output directory.
pub fn echo_config(cfg: &Config, dir: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg)?;
    std::fs::write(dir.join("config_echo.toml"), text)
        .with_context(|| format!("echoing config into {}", dir.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Metrics CSV: one row per replication, then a mean row and an SE row.
/// Ratios with empty denominators print as empty cells.
pub fn write_metrics_csv(metrics: &RunMetrics, out: &mut impl Write) -> Result<()> {
    write!(out, "replication")?;
    for col in MetricsRow::COLUMNS {
        write!(out, ",{col}")?;
    }
    writeln!(out, ",arrivals,conversions,matches,solo_completions")?;
    for (rep, (row, tally)) in metrics
        .per_replication
        .iter()
        .zip(&metrics.tallies)
        .enumerate()
    {
        write!(out, "{rep}")?;
        for v in row.values() {
            write!(out, ",{}", fmt_opt(v))?;
        }
        writeln!(
            out,
            ",{},{},{},{}",
            tally.arrivals, tally.conversions, tally.matches, tally.solo_completions
        )?;
    }
    write!(out, "mean")?;
    for v in metrics.mean.values() {
        write!(out, ",{}", fmt_opt(v))?;
    }
    writeln!(out, ",,,,")?;
    write!(out, "se")?;
    for v in &metrics.se {
        write!(out, ",{}", fmt_opt(*v))?;
    }
    writeln!(out, ",,,,")?;
    Ok(())
}

pub fn save_metrics(metrics: &RunMetrics, dir: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics_csv(metrics, &mut buf)?;
    std::fs::write(dir.join("metrics.csv"), buf)?;
    write_json(&dir.join("metrics.json"), metrics)
}

/// One sweep cell: the grid coordinates plus summary metrics.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub policy: PolicyKind,
    pub window: u32,
    pub cost_rate: f64,
    pub short_length: Option<u32>,
    pub delta: Option<f64>,
    pub n_types: Option<usize>,
    pub instance_seed: Option<u64>,
    pub fluid_profit: f64,
    pub mean: MetricsRow,
    pub se_profit_per_period: f64,
}

pub fn write_sweep_csv(rows: &[SweepRow], out: &mut impl Write) -> Result<()> {
    write!(
        out,
        "policy,window,cost_rate,short_length,delta,n_types,instance_seed,fluid_profit"
    )?;
    for col in MetricsRow::COLUMNS {
        write!(out, ",{col}")?;
    }
    writeln!(out, ",se_profit_per_period")?;
    for r in rows {
        let policy = match r.policy {
            PolicyKind::PreTrip => "pre_trip",
            PolicyKind::OnTrip => "on_trip",
            PolicyKind::Combined => "combined",
        };
        write!(
            out,
            "{},{},{},{},{},{},{},{}",
            policy,
            r.window,
            r.cost_rate,
            r.short_length.map(|v| v.to_string()).unwrap_or_default(),
            fmt_opt(r.delta),
            r.n_types.map(|v| v.to_string()).unwrap_or_default(),
            r.instance_seed.map(|v| v.to_string()).unwrap_or_default(),
            r.fluid_profit
        )?;
        for v in r.mean.values() {
            write!(out, ",{}", fmt_opt(v))?;
        }
        writeln!(out, ",{}", r.se_profit_per_period)?;
    }
    Ok(())
}

/// Profit-vs-axis table: one line per axis value and policy.
pub fn write_profit_table(
    axis_name: &str,
    rows: &[(String, String, f64, f64)],
    out: &mut impl Write,
) -> Result<()> {
    writeln!(out, "{axis_name},policy,mean_profit_per_period,se")?;
    for (axis, policy, mean, se) in rows {
        writeln!(out, "{axis},{policy},{mean},{se}")?;
    }
    Ok(())
}
