//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use netsteer::harness::RunConfig;
use netsteer::Result;

/// Cumulative county cases; three Georgia counties with gaps and one
/// correction, plus an out-of-state row.
pub const CASES_CSV: &str = "date,county,state,fips,cases,deaths
2020-03-01,Appling,Georgia,13001,1,0
2020-03-02,Appling,Georgia,13001,3,0
2020-03-04,Appling,Georgia,13001,6,0
2020-03-01,Bacon,Georgia,13005,0,0
2020-03-03,Bacon,Georgia,13005,2,0
2020-03-04,Bacon,Georgia,13005,1,0
2020-03-02,Baker,Georgia,13007,4,0
2020-03-04,Baker,Georgia,13007,9,0
2020-03-01,Autauga,Alabama,01001,5,0
";

/// Every command at toy size; runs in about a second in total.
pub fn small_config(cases: &Path) -> Result<RunConfig> {
    let text = format!(
        r#"
seed = 3
float_format = "fixed:6"
[simulate]
n_sequences = 2
[simulate.task]
n_nodes = 4
sparsity = 0.4
horizon = 30.0
[fit]
n_sequences = 2
[fit.task]
n_nodes = 4
sparsity = 0.4
horizon = 30.0
[fit.fit]
epochs = 3
[plan]
n_sequences = 1
stages = 5
[plan.task]
n_nodes = 4
sparsity = 0.4
horizon = 30.0
k = 1
[plan.fit]
epochs = 3
[plan.plan]
opt_iters = 3
[meta]
n_tasks = 2
start_every = 10
[meta.task]
n_nodes = 4
sparsity = 0.4
horizon = 30.0
k = 1
[meta.fit]
epochs = 3
[meta.meta]
iters = 3
collect_bins = 3
[adapt]
n_heldout = 2
n_rescaled = 1
adapt_steps = 2
scratch_steps = 3
[mfa_eval]
steps = 5
rollouts = 200
[ingest]
path = {:?}
state = "Georgia"
max_nodes = 2
"#,
        cases.to_str().expect("utf-8 path")
    );
    RunConfig::from_toml(&text)
}

