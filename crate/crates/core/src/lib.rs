pub mod error;
pub mod estimate;
pub mod hmm;
pub mod io;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod simulate;
pub mod structure;

pub use error::{Error, Result};
pub use estimate::{
    bootstrap, derived_abundance, fit, step_up_selection, BootstrapConfig, BootstrapResult,
    FitConfig, FitResult, Move,
};
pub use hmm::{log_likelihood, primary_likelihood, secondary_likelihood};
pub use model::{Dataset, ParameterSet, StudyDesign};
pub use oracle::brute_force_likelihood;
pub use simulate::{paper_scenario, simulate, SimTruth};
pub use structure::{expand_structure, CompiledStructure, ModelStructure};
