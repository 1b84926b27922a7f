//! Tabular offline-to-online reinforcement learning with iterative KL policy
//! regularization: exact dynamic-programming operators, sample-based
//! finetuning, a deterministic-policy variant, and numeric bound audits.

pub mod deterministic;
pub mod env;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod mdp;
pub mod pretrain;
pub mod regularized;
pub mod rng;
pub mod theory;

pub use env::{make_env, EnvSpec};
pub use error::{LabError, Result};
pub use harness::{compare, emit_plots, run_batch, Algo, ComparisonReport, PretrainChoice, RunConfig};
pub use mdp::{
    expected_return, greedy_policy, optimal_q_exact, policy_evaluation_exact, value_iteration_optimal, Mdp, QTable,
    TabularPolicy, VTable,
};
pub use regularized::{
    advance_schedule, frozen_exact_iterate, kl_regularized_improvement, polyak_update, proto_exact_iterate,
    regularized_policy_evaluation_exact, unregularized_iterate, v_max_alpha, IterationRecord, IterationTrace, NoiseSpec,
    PolyakState, ScheduleState,
};
