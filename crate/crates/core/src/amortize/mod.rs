//! Cross-task amortization: a permutation-equivariant edge policy, a
//! two-headed latent representation trained with a PEM-weighted
//! bi-contrastive loss, meta-training over a task pool, and few-step
//! adaptation.

mod bcme;
mod meta;
mod nets;
mod pem;
mod perm;

pub use bcme::{
    bcme_graph, bcme_loss, contrastive_sample, pem_weight, sample_loss, sample_loss_graph, ContrastiveSample,
    WEIGHT_FLOOR,
};
pub use meta::{
    adapt, embedding_csv, heldout_bcme, meta_train, policy_action, policy_cost, AdaptResult, MetaConfig, MetaRecord,
    MetaResult, Task, TaskPool,
};
pub use nets::{row_directions, Embedding, PolicyNet, ReprNet};
pub use pem::{pem_distance, pem_terms, PemConfig, PolicyEnv};
pub use perm::{
    augment_magnitude, augment_permutation, identity_perm, inverse_perm, permute_constraints, permute_mask,
    permute_matrix, permute_rows, random_perm, scale_rows, unpermute_matrix, Perm, MAGNITUDE_RANGE,
};
