//! The learned environment: latent jump-ODE dynamics, Poisson intensity
//! head, likelihood, maximum-likelihood fitting and rollouts.
//!
//! Each bin `[tau_i, tau_i + width)` is processed as flow, then intensity,
//! then emission (observed or sampled count), then jump.

mod checkpoint;
mod fit;
mod model;
mod rollout;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use fit::{
    emission_loglik, fit_mle, fit_poisson_baseline, nll_and_grad, poisson_baseline_nll, sequence_loglik,
    sequence_loglik_graph, sequence_loglik_trace, FitConfig, FitData, FitResult,
};
pub use model::{
    clamp_hits, Bound, DriftKind, IntensityKind, JumpKind, LatentState, NjodeConfig, NjodeModel, EXPONENT_CLAMP,
    PARAM_NAMES,
};
pub use rollout::{
    flow, intensity, jump_update, mean_field_graph, mean_field_rollout, sample_rollout, RolloutMode, RolloutTrace,
};
pub(crate) use model::{P_H0, P_INFLUENCE};
pub(crate) use rollout::{bin_step, sample_poisson};
