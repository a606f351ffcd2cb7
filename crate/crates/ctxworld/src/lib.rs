//! World models that adapt from context.
//!
//! `ctxworld` studies two mechanisms by which a world model can improve its
//! next-observation predictions purely by conditioning on a growing context
//! of observations and actions, without any parameter updates:
//!
//! * **Environment recognition (ER)** — keep one fitted model per training
//!   environment and use the context only to identify which one is active.
//! * **Environment learning (EL)** — estimate the active environment's
//!   transition law directly from context count statistics.
//!
//! The crate provides three layers:
//!
//! 1. [`tabular`] + [`estimators`] + [`bounds`] — procedurally generated
//!    discrete (PO)MDP families, the two count-based predictors, and
//!    Monte-Carlo verification of their finite-sample error bounds
//!    (identification error decaying as `T^-1/2` toward the best matching
//!    error for ER; an environment-complexity bound for EL).
//! 2. [`cartpole`] + [`gsa`] — randomized cart-pole physics with scripted
//!    data collection, and a from-scratch gated-slot-attention sequence
//!    model (chunkwise-parallel training form, constant-memory recurrent
//!    inference form, reverse-mode autodiff, adaptive-moment training).
//! 3. [`harness`] — reproducible experiment orchestration: dataset builds,
//!    training runs, in-context evaluation sweeps, bound reports, and the
//!    analysis probes (predictive-coding sensitivity, memory-state
//!    silhouette scores), all emitting CSV/JSON reports.
//!
//! ## Runnable examples
//!
//! Each major capability has a runnable example under `examples/`:
//!
//! ```text
//! cargo run --release --example gen_env_family
//! cargo run --release --example context_scaling
//! cargo run --release --example verify_bounds
//! cargo run --release --example crossover_scan
//! cargo run --release --example cartpole_dataset
//! cargo run --release --example train_world_model
//! cargo run --release --example icl_emergence
//! cargo run --release --example memory_probes
//! ```
//!
//! A thin CLI (`ctxworld`) wraps the same entry points for scripted use; see
//! the README for subcommands and config schemas.

pub mod bounds;
pub mod cartpole;
pub mod error;
pub mod estimators;
pub mod gsa;
pub mod harness;
pub mod rng;
pub mod tabular;

pub use error::{Error, Result};
