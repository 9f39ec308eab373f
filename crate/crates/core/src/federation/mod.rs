//! The federated protocol: client sampling, invariant broadcast, the
//! two-stage local optimisation, diversity transfer, invariant-only
//! aggregation, and the FedAvg/FedProx baselines under the same harness.

mod client;
mod config;
mod engine;
pub mod metrics;
mod server;

pub use client::{
    client_loss, epoch_batches, evaluate_single, evaluate_two_branch, fedprox_loss, invariant_gradients,
    local_stage1_specific, local_stage2_invariant, local_train_single, single_gradient, RoundInputs, Stage,
    StageReport,
};
pub use config::{Algorithm, FederationConfig};
pub use engine::{Execution, Federation, NoObserver, RoundObserver, RoundRecord};
pub use server::{
    diversity_exchange, full_aggregate, invariant_aggregate, sample_clients, FullUpdate, InvariantUpdate,
    PeerSnapshot, ServerState,
};
