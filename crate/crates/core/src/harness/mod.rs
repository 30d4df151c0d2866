//! Flight logs, time alignment, RMSE scoring and the end-to-end pipeline.

pub mod align;
pub mod log;
pub mod pipeline;
pub mod report;

pub use align::{align, AlignedTable};
pub use log::{FlightLog, SensorPacket, TruthRecord};
pub use pipeline::{run_simulation, replay, FlowSource, PipelineConfig, SimulationOutput};
pub use report::{rmse, RmseReport, TrialRmse};
