//! In-process simulated distributed system: actors with per-actor epsilon,
//! central batched inference, learner with target network, evaluator.

pub mod driver;
pub mod inference;
pub mod learner;
pub mod schedule;

pub use driver::{evaluate, final_window_summary, train, TrainOutput};
pub use inference::{InferenceRequest, InferenceResult, InferenceService};
pub use learner::{
    build_training_loss, compute_raw_targets, Learner, LearnerMetrics, LearnerOutcome, LossHyper,
    LossInputs, LossOutputs,
};
pub use schedule::{actor_step, epsilon_for_actor, ActorSchedule};
