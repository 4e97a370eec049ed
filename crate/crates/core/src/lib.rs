//! Graphon mean-field games with entropy regularization: exact and sampled
//! policy evaluation, exploitability, and policy mirror descent.

pub mod error;
pub mod estimation;
pub mod evaluation;
pub mod experiment;
pub mod game;
pub mod graphon;
pub mod meanfield;
pub mod solver;

pub use error::{GmfgError, Result};
pub use evaluation::{eval_policy_exact, exploitability, kl_metric, soft_best_response, QProfile, VProfile};
pub use game::{build_beach_bar, BeachBarConfig, GameSpec};
pub use graphon::{discretize, DiscreteGraphon, GraphonSpec};
pub use meanfield::{compute_aggregates, induce_flow, AggregateField, DistributionFlow, PolicyProfile};
pub use solver::{average_policies, pmd_run, pmd_run_with_eval, pmd_step, PMDConfig};
