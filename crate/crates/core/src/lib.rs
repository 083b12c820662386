pub mod compensator;
pub mod error;
pub mod feedback;
pub mod hysteresis;
pub mod ident;
pub mod lti;
pub mod simulate;
pub mod timeseries;

pub use compensator::{run_compensation, CompensationOptions, Compensator};
pub use error::{Error, Result};
pub use feedback::{stability_margins, MarginReport, PiController};
pub use hysteresis::{KpModel, KpModelParams, KpOperator, KpOperatorParams};
pub use ident::{FrfPoint, FrfRecord, ShapeSearch, SosFit};
pub use lti::{DiscreteSystem, TransferFunction};
pub use simulate::{run_scenario, LoopMode, ReferenceSpec, ScenarioConfig};
pub use timeseries::TimeSeries;

/// Version of the core library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
