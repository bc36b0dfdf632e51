//! Numeric foundation: dense tensors, reverse-mode gradients and ODE
//! integration.
//!
//! Gradients through the integrator are discretize-then-differentiate: the
//! solver's stages are recorded on the same [`Graph`] as everything else and
//! the backward pass walks them like any other op.

mod check;
mod graph;
mod ode;
mod optim;
mod tensor;

pub use check::{check_gradient, GradCheck};
pub use graph::{Graph, Var};
pub(crate) use graph::{sigmoid, softplus};
pub use ode::{integrate, integrate_ode, integrate_ode_graph, OdeMethod, OdeSolverConfig, OdeSystem};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
