//! Functional degradation modeling of curve-valued degradation data whose
//! curves live on heterogeneous domains.
//!
//! Each discharge curve is split into a shape on [0, 1] and a domain end point
//! (EOD). Shapes are modeled through functional principal component scores
//! with a multivariate mixed model; EODs with a linear or functional linear
//! mixed model. Predicted shapes and EODs are recombined into predicted curves
//! and scalar degradation amounts.

// `!(x > 0.0)` is used on purpose so NaN inputs fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bootstrap;
pub mod bspline;
pub mod data;
pub mod degradation;
pub mod eod;
pub mod error;
pub mod experiment;
pub mod flmm;
pub mod fpca;
pub mod gpm;
pub mod grid;
pub mod linalg;
pub mod lmm;
pub mod mlmm;
pub mod optim;
pub mod pipeline;
pub mod simulator;

pub use error::{Error, Result};

pub use bootstrap::{bootstrap_prediction_intervals, BootstrapConfig, BootstrapResult, IntervalRow};
pub use data::{
    ingest_dataset, ingest_files, CovariateVector, CycleRecord, Dataset, RawCurve, ScaledCurve, UnitSeries,
    DATASET_SCHEMA_VERSION,
};
pub use degradation::{degradation_amount, lp_norm, DegradationPath, ErrorPair, PathEntry, Source};
pub use eod::{EodFormula, EodKind, FutureCycle, LmeEodFit};
pub use experiment::{run_experiment, ExperimentGrid, ExperimentResult, MethodKind};
pub use flmm::{FlmmEodFit, FlmmOptions, Smoothing};
pub use fpca::{ComponentSelection, FpcaModel, FpcaOptions, ScoreVector};
pub use gpm::{GpmFit, GpmForm, GpmSpec};
pub use lmm::LmmOptions;
pub use mlmm::MlmmFit;
pub use pipeline::{
    evaluate, forecast, run_fdm_pipeline, run_gpm_pipeline, EodFit, Evaluation, FdmModel, PipelineConfig, PipelineOutput, TrainingSet,
    UnitPrediction, MODEL_SCHEMA_VERSION,
};
pub use simulator::{generate_dataset, SimulationConfig, SimulationParams, SimulatedData};
