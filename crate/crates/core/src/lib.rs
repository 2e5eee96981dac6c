//! Mass-conserving perceptron: a single-store gated recurrent cell whose
//! gates act as conductivities, trained by reverse-mode differentiation
//! through the full simulated sequence.

pub mod arch;
pub mod autodiff;
pub mod benchmarks;
pub mod cell;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gates;
pub mod params;
pub mod metrics;
pub mod persist;
pub mod protocol;
pub mod report;
pub mod training;

pub use arch::{parse_arch, ArchitectureSpec};
pub use cell::{mass_ledger, simulate, step, CellState, MassLedger, SimOptions, SimulationTrace};
pub use data::{
    compute_scaling, generate_synthetic, ingest_forcing, partition_by_year, ForcingSeries, Label, PartitionMask,
    ScalingStats, SyntheticClimate, SyntheticTruth, SPLIT_PATTERN,
};
pub use error::{Error, Result};
pub use gates::count_parameters;
pub use params::ParameterVector;
