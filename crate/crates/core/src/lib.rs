//! Particle solver and numerical certificates for first-order mean field
//! games with linear controlled dynamics `ẋ = Ax + Bu`.
//!
//! Equilibria are measures on trajectories, represented as weighted path
//! ensembles and computed by fictitious play over discrete best responses.

// Checks such as `!(x > 0.0)` reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod hamiltonian;
mod linalg;
pub mod measures;
pub mod ocp;
pub mod pde_check;
pub mod regularity;

pub use dynamics::{
    integrate_path, matrix_exponential, reference_ensemble, DiscreteSystem, LinearDynamics, Path,
    TimeGrid,
};
pub use equilibrium::{
    best_response_ensemble, exploitability, fictitious_play, initial_ensemble, lipschitz_equilibrium, Averaging,
    EquilibriumConfig, EquilibriumReport, Initialization, LipschitzCertificate, StopReason,
};
pub use error::{Error, Result};
pub use hamiltonian::{
    check_h1, check_tonelli, hamiltonian_grad, legendre_hamiltonian, Coupling, GrowthConstants,
    LagrangianModel, QuadraticModel, SampleBox, TonelliConstants,
};
pub use measures::{
    check_admissible, disintegrate, wasserstein1, AdmissibilityReport, FlowOfMeasures,
    ParticleMeasure, StartGroup, TrajectoryEnsemble,
};
pub use pde_check::{
    continuity_residual, hjb_residual, monotonicity_check, synthesis_check, uniqueness_check, ContinuityReport, HjbReport,
    MonotonicityReport, SynthesisReport, TestFunction, UniquenessReport,
};
pub use regularity::{
    holder_fit, lipschitz_probe, semiconcavity_probe, HolderFit, LipschitzProbe, ProbeRegion, SemiconcavityReport,
    SemiconcavitySettings, TimeModulus,
};
pub use ocp::{
    apriori_bounds, dpp_residual, pmp_residual, solve_best_response, AprioriBounds, BoundRatios, OcpOptions,
    OcpSolution, ValueOracle, ValueProbe,
};
