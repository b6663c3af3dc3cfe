//! Shared-ride pricing and matching toolkit.
//!
//! Pipeline: build a road network and rider types ([`graph`]), relax the
//! matching dynamics into a steady-state cost LP ([`fluid`]) solved by a
//! revised simplex ([`lp`]), optimize conversion probabilities against it
//! ([`pricing`]), drive runtime matching off the LP duals ([`policy`]), and
//! evaluate everything in a discrete-time simulator ([`sim`]). Instance
//! generators and trip-data ingestion live in [`instances`].

pub mod fluid;
pub mod graph;
pub mod instances;
pub mod lp;
pub mod policy;
pub mod pricing;
pub mod sim;

pub use fluid::{FareConvention, FluidInstance, FluidSolution, ModelOptions};
pub use graph::{CompatTable, NodeId, RiderType, RoadNetwork, SoloState, WtpModel};
pub use policy::{DualTables, MatchDecision, PolicyKind};
pub use pricing::{PricingConfig, PricingResult};
pub use sim::{RunMetrics, SimConfig};
