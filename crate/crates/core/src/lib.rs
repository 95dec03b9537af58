//! Robust optimal stopping on a recombining binomial lattice, where the
//! stopper faces an adversary choosing a Girsanov tilt at a convex penalty.
//!
//! The lower value is computed by backward induction over a finite tilt grid
//! or in closed form through the penalty transform; the game is cross-checked
//! against exhaustive enumeration on small trees and a saddle point is
//! extracted from the reflected BSDE with the transform as generator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod lattice;
pub mod measures;
pub mod oracle;
pub mod penalty;
pub mod rbsde;
pub mod stopping;

pub use error::{Error, Result};
pub use lattice::{
    build_lattice, first_hitting_rule, payoff_from_function, LatticeModel, NodeTable, PayoffProcess, StoppingRule,
};
pub use measures::{
    density_process, paste, penalty_cost, tilt_probabilities, truncate_policy, ControlPolicy, MeasureDensity, Start,
};
pub use oracle::{
    brute_force_values, enumerate_game, verify_minimax, verify_saddle_exhaustive, EnumeratedGame, FullTree,
};
pub use penalty::{check_assumptions, AssumptionParams, PenaltyFamily, PenaltySpec, TimeParam};
pub use rbsde::{extract_saddle, solve_rbsde, SaddleCertificate, SaddleOptions};
pub use stopping::{
    evaluate_rho, evaluate_strategy, robust_value_exact, robust_value_grid, snell_envelope, tau_family, tau_v,
    ThetaGrid, Tolerances, ValueSurface,
};
