//! Domain types, constraints, and the conditional-probability formulas.

mod dataset;
mod design;
mod params;
pub mod transform;

pub use dataset::Dataset;
pub use design::StudyDesign;
pub use params::{
    arrival_from_logistic, capture_ages, conditional_arrival, conditional_recruitment,
    normalized_logistic_weights, retention_ages, retention_from_logistic, stick_breaking,
    survival_ages, ParameterSet, SIMPLEX_TOL,
};
