//! Simulator, data pipeline and learned kinematics for a two-module
//! hydraulic soft arm.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod datapipe;
pub mod error;
pub mod geometry;
pub mod kinlearn;
pub mod nnet;
pub mod pipeline;
pub mod plant;

pub use control::{make_coverage_scripts, regulate, CoverageGrid, CoveragePlan, RegulatorConfig};
pub use datapipe::{LogRow, NormalizationSpec, RunLog, WindowConfig, WindowedSample};
pub use error::{Error, Result};
pub use geometry::{ArmGeometry, MarkerTuple};
pub use kinlearn::{EvalReport, KinematicModel, ModelKind, TrainConfig};
pub use nnet::{AdamState, Checkpoint, LayerSpec, Network};
pub use pipeline::{PipelineConfig, ReachOutcome};
pub use plant::{
    ArmState, PlantConfig, PressureVector, ScriptEvent, Simulator, TrajectoryScript, ValveVector,
};
