//! Best-of-N distillation on enumerable token policies.
//!
//! The crate computes the exact Best-of-N distribution of a reference
//! policy, trains softmax policies toward it by Jeffreys-divergence
//! distribution matching (exactly or from samples), runs iterative BOND
//! and J-BOND with a moving anchor, and compares against KL-regularized
//! REINFORCE. Everything operates on outcome spaces small enough to
//! enumerate, so every stochastic estimator has an exact counterpart.

pub mod baselines;
pub mod bon;
pub mod bond;
pub mod divergence;
pub mod error;
pub mod harness;
pub mod jbond;
pub mod metrics;
pub mod optim;
pub mod outcome_space;
pub mod policy;
pub mod quantile;
pub mod rng;
pub mod verify;

pub use error::{BondError, Result};
pub use outcome_space::{Outcome, Prompt, PromptId, PromptSet, Vocab};
pub use policy::{AutoregressivePolicy, CategoricalPolicy, ParamVector, Policy, PolicyKind};
pub use rng::Seed;
