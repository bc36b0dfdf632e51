//! Mean-field approximation of expected discounted counts, its Monte-Carlo
//! reference, and the Lipschitz error bound relating the two.

mod bound;
mod cost;
mod linear;

pub use bound::{estimate_lipschitz, error_bound, LipschitzProfile};
pub use cost::{
    mean_field_cost, mean_field_curve, monte_carlo_cost, monte_carlo_curve, CostEstimate, JumpProcess, NjodeProcess,
};
pub use linear::{linear_mfa_experiment, mfa_csv, LinearJumpSystem, MfaRow};
