//! Receding-horizon intervention planning: relaxed edge selection, hard
//! masks, soft penalties, gradient-based lookahead and the MPC loop.
//!
//! Matrices indexed `[m][n]` address the edge `m -> n` throughout.

mod constraints;
mod mpc;
mod objective;
mod relax;

pub use constraints::{admissible, project_topk, ActionMatrix, ConsecutiveTracker, ConstraintSpec};
pub use mpc::{
    filter_state, mpc_run, Controller, Environment, HawkesEnvironment, MpcOptions, MpcTrajectory, NjodeEnvironment,
    RefitConfig, StageObservation, StageRecord,
};
pub use objective::{lookahead_graph, lookahead_objective, objective_and_grad, plan_step, PlanConfig, PlanDiagnostics};
pub use relax::{
    apply_hard_mask, intervene, masked_logits, relax, relax_values, soft_penalty, soft_penalty_graph, Relaxation,
    MASK_SENTINEL,
};
