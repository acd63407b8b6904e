//! Group-relative policy optimization with clip-higher and token-mean
//! aggregation, plus two-phase experience replay (collect verified
//! successes from a seed policy, then replay them alongside fresh rollouts).
//!
//! Everything runs on a tiny n-gram softmax policy with exact gradients, over
//! synthetic tasks whose rewards are checked by rule.
//!
//! The numerical core is generic over the scalar type ([`Scalar`], implemented
//! for `f32` and `f64`). The aliases at the bottom of this file fix the scalar
//! to `f64`, which is what the trainer and CLI use.

pub mod error;
pub mod eval;
pub mod grpo;
pub mod optim;
pub mod policy;
pub mod pool;
pub mod rng;
pub mod runlog;
pub mod scalar;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use eval::{compare_runs, evaluate, steps_to_threshold, EvalOptions, EvalReport, RunComparison};
pub use grpo::{
    clipped_token_term, group_advantage, surrogate_objective, token_ratio, Aggregation, ClipConfig,
    ClippedTerm, Group, SurrogateResult, Trajectory, TrajectorySource, DEFAULT_DEGENERACY_EPS,
};
pub use optim::{Optimizer, OptimizerKind};
pub use policy::{PolicyParams, SampledSequence, SparseGrad, TokenId, Vocab};
pub use pool::{collect, sample_replay, CollectOptions, ExperiencePool, ExperienceRecord};
pub use rng::{Stream, Streams};
pub use runlog::{RunLog, RunRecord};
pub use scalar::Scalar;
pub use tasks::{generate_taskset, verify, FamilyParams, Split, Task, TaskFamily, TaskSet};
pub use trainer::{
    assemble_groups, checkpoint_path, load_resume, rollout_phase, state_path, train, update_phase,
    ReplayLogprobSource, ReplayMissingPolicy, ResumeState, TrainConfig, TrainOptions, TrainOutcome,
    UpdateStats,
};

/// Policy parameters in double precision.
pub type Policy = PolicyParams<f64>;
/// Sparse logit gradient in double precision.
pub type Gradient = SparseGrad<f64>;
/// A double-precision trajectory.
pub type Traj = Trajectory<f64>;
/// A double-precision mixed group.
pub type MixedGroup = Group<f64>;
/// Surrogate objective result in double precision.
pub type Surrogate = SurrogateResult<f64>;
