//! Individual treatment effects from counterfactual mappings in a
//! triangular model with a binary endogenous treatment and a binary
//! instrument.
//!
//! The pipeline runs cell by cell: complier distributions and the
//! counterfactual maps φ̂ are estimated within each covariate cell, each
//! observation's missing potential outcome is imputed through φ̂, and the
//! resulting ITEs feed a kernel density estimate.

pub mod counterfactual;
pub mod data;
pub mod density;
pub mod empirical;
pub mod error;
pub mod export;
pub mod ite;
pub mod pipeline;
pub mod simulate;

pub use counterfactual::{
    covariance_kernel, empirical_objective, estimate_map, map_inference, mass_point_diagnostic, plugin_map_oracle,
    standard_error, CounterfactualMap, MapEstimator, MapInference, MassPointOptions, MassPointReport,
};
pub use data::{cell_stats, load_csv, read_csv, CellKey, CellStats, Dataset, Observation, Schema};
pub use density::{
    bandwidth, kde, BandKind, BandwidthChoice, BandwidthRule, DensityBand, DensityConfig, DensityEstimate, Kernel,
};
pub use empirical::{
    complier_cdf, monotonicity_diagnostic, rank_function, support_condition_diagnostic, CellSample, ComplierCdf,
    ComplierOptions, MonotonicityReport, SupportOptions, SupportReport,
};
pub use error::{Error, Result};
pub use ite::{estimate_ite, late, sign_classification, IteRecord, LateEstimate, SignReport};
pub use pipeline::{bootstrap_band, fit, run, Estimation, EstimatorConfig, FittedCell};
pub use simulate::{
    draw_sample, population_late, table1_harness, truth_oracle, RmseReport, SimConfig, SimSample, StructuralFamily,
};
