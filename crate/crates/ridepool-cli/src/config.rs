//! Experiment configuration: TOML schema, validation, and resolution into a
//! runnable instance. Unknown keys are rejected so typos surface by name.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ridepool::fluid::{FareConvention, FluidInstance, ModelOptions};
use ridepool::graph::{RoadNetwork, DEFAULT_TABLE_CAP};
use ridepool::instances::{gen_example1, gen_example2, parse_type_list};
use ridepool::policy::PolicyKind;
use ridepool::pricing::PricingConfig;
use ridepool::sim::SimConfig;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub instance: InstanceSection,
    pub model: ModelSection,
    #[serde(default)]
    pub pricing: PricingSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct InstanceSection {
    /// "example1" (two-type corridor), "example2" (grid), or "files".
    pub kind: String,
    /// Corridor length for example1; equal trip length for example2.
    #[serde(default)]
    pub length: Option<u32>,
    /// Short-type length l for example1.
    #[serde(default)]
    pub short_length: Option<u32>,
    /// Type count for example2.
    #[serde(default)]
    pub n_types: Option<usize>,
    /// Sampling seed for example2.
    #[serde(default)]
    pub instance_seed: Option<u64>,
    #[serde(default)]
    pub lambda_total: Option<f64>,
    /// Edge list file ("node_a node_b" per line) for kind = "files".
    #[serde(default)]
    pub network_file: Option<String>,
    /// Type list file ("id origin dest lambda" per line) for kind = "files".
    #[serde(default)]
    pub types_file: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub cost_rate: f64,
    pub policy: PolicyKind,
    #[serde(default)]
    pub window: u32,
    #[serde(default)]
    pub fare: FareConvention,
    #[serde(default = "default_true")]
    pub ratio_constraints: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            cost_rate: 0.7,
            policy: PolicyKind::Combined,
            window: 0,
            fare: FareConvention::PerMile,
            ratio_constraints: true,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingSection {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    /// Scalar starting conversion probability for every type.
    #[serde(default)]
    pub initial_lambda: Option<f64>,
    /// Emit the per-iteration objective trace as CSV.
    #[serde(default)]
    pub verbose_trace: bool,
}

fn default_tolerance() -> f64 {
    1e-6
}

fn default_max_iterations() -> usize {
    200
}

impl Default for PricingSection {
    fn default() -> Self {
        PricingSection {
            tolerance: default_tolerance(),
            max_iterations: default_max_iterations(),
            restarts: 0,
            seed: 0,
            initial_lambda: None,
            verbose_trace: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_periods")]
    pub periods: u64,
    #[serde(default = "default_replications")]
    pub replications: u32,
    #[serde(default)]
    pub seed: u64,
    /// Dump the full event log of replication 0 as CSV.
    #[serde(default)]
    pub event_log: bool,
}

fn default_periods() -> u64 {
    100_000
}

fn default_replications() -> u32 {
    8
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            periods: default_periods(),
            replications: default_replications(),
            seed: 0,
            event_log: false,
        }
    }
}

/// Grid axes for `sweep`; instance axes apply to the matching instance kind.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub policies: Vec<PolicyKind>,
    #[serde(default)]
    pub windows: Vec<u32>,
    #[serde(default)]
    pub cost_rates: Vec<f64>,
    /// example1 heterogeneity axis (short lengths l).
    #[serde(default)]
    pub short_lengths: Vec<u32>,
    /// example2 type-count axis.
    #[serde(default)]
    pub n_types: Vec<usize>,
    /// example2 sampling seeds.
    #[serde(default)]
    pub instance_seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
}

fn default_out_dir() -> String {
    "out".to_string()
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_out_dir(),
        }
    }
}

impl Config {
    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.instance.kind.as_str() {
            "example1" | "example2" | "files" => {}
            other => bail!("instance.kind {other:?} is not example1 | example2 | files"),
        }
        if !(self.model.cost_rate > 0.0) {
            bail!("model.cost_rate must be positive");
        }
        if self.model.policy.forces_zero_window() && self.model.window != 0 {
            bail!("model.window must be 0 under the on_trip policy");
        }
        if let Some(l) = self.pricing.initial_lambda {
            if !(0.0..=1.0).contains(&l) {
                bail!("pricing.initial_lambda must lie in [0,1]");
            }
        }
        if self.simulation.periods == 0 {
            bail!("simulation.periods must be at least 1");
        }
        Ok(())
    }

    /// Model flags for the configured policy; the pre-trip policy drops the
    /// on-trip compatibility sets, the on-trip policy forces a zero window.
    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            window: self.model.window,
            pre_trip: !self.model.policy.forces_zero_window(),
            on_trip: self.model.policy.on_trip_enabled(),
            ratio_constraints: self.model.ratio_constraints,
            fare: self.model.fare,
            compat_cap: DEFAULT_TABLE_CAP,
        }
    }

    /// Builds the configured instance, reading files relative to `base`.
    pub fn build_instance(&self, base: &std::path::Path) -> Result<FluidInstance> {
        let opts = self.model_options();
        let inst = &self.instance;
        let lambda_total = inst.lambda_total.unwrap_or(0.1);
        match inst.kind.as_str() {
            "example1" => {
                let length = inst.length.context("instance.length required for example1")?;
                let short = inst.short_length.unwrap_or(length);
                Ok(gen_example1(
                    length,
                    short,
                    lambda_total,
                    self.model.cost_rate,
                    opts,
                )?)
            }
            "example2" => {
                let length = inst.length.context("instance.length required for example2")?;
                let n = inst.n_types.context("instance.n_types required for example2")?;
                Ok(gen_example2(
                    n,
                    length,
                    lambda_total,
                    self.model.cost_rate,
                    inst.instance_seed.unwrap_or(0),
                    opts,
                )?)
            }
            "files" => {
                let net_path = base.join(
                    inst.network_file
                        .as_deref()
                        .context("instance.network_file required for files")?,
                );
                let types_path = base.join(
                    inst.types_file
                        .as_deref()
                        .context("instance.types_file required for files")?,
                );
                let net_text = std::fs::read_to_string(&net_path)
                    .with_context(|| format!("reading {}", net_path.display()))?;
                let types_text = std::fs::read_to_string(&types_path)
                    .with_context(|| format!("reading {}", types_path.display()))?;
                let network = RoadNetwork::from_edge_list(&net_text)?;
                let types = parse_type_list(&types_text)?;
                Ok(FluidInstance::new(
                    network,
                    types,
                    self.model.cost_rate,
                    opts,
                )?)
            }
            _ => unreachable!("validated"),
        }
    }

    pub fn pricing_config(&self, num_types: usize) -> PricingConfig {
        PricingConfig {
            initial: self.pricing.initial_lambda.map(|l| vec![l; num_types]),
            tolerance: self.pricing.tolerance,
            max_iterations: self.pricing.max_iterations,
            restarts: self.pricing.restarts,
            seed: self.pricing.seed,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            periods: self.simulation.periods,
            seed: self.simulation.seed,
            replications: self.simulation.replications,
        }
    }
}
