//! Distributionally robust deep Q-learning with Sinkhorn-ball ambiguity sets.

pub mod dist;
pub mod dual;
pub mod envs;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod rdqn;
pub mod transition;

pub use dual::{
    AmbiguityConfig, DualObjective, DualSolveResult, EpsilonBarPolicy, LambdaCache, NuFamily, NuSpec, SolverConfig,
};
pub use error::{Error, Result};
pub use nn::{Activation, AdamConfig, AdamState, QNetwork};
pub use rdqn::{EvalStats, ReplayBuffer, Summary, TrainConfig, TrainOutcome};
pub use transition::Transition;
