//! Asynchronous diagnostics: XML configuration, per-level reductions, the
//! server cluster and the model-side bridge.

pub mod config;
pub mod message;
pub mod reduction;
pub mod server;
pub mod writer;

pub use config::{parse_io_config, ActionKind, DiagnosticAction, FieldRequest, IoServerConfig};
pub use message::{DiagnosticMessage, SlabData, SlabExtent};
pub use reduction::{combine_partials, horizontal_reduction, LevelPartial, ReductionOperator, ServerPartial};
pub use server::{Arrival, IoBridge, IoCluster, IoReport, IoServerOptions};
pub use writer::{write_diagnostics, DiagnosticsWriter};
