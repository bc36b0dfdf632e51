//! Ground-truth environment: multivariate Hawkes simulation by thinning,
//! event binning, and the conditional spike-count family.

mod binning;
mod counts;
mod hawkes;
pub mod io;
mod spectral;

pub use binning::{bin_events, SpikeCountMatrix};
pub use counts::{CountDistribution, CountFamily};
pub use hawkes::{expected_counts_from, simulate_thinning, BinOutcome, Event, EventSequence, HawkesEnv, HawkesModel};
pub use spectral::{rescale_to_stable, spectral_radius, spectral_radius_dense};
