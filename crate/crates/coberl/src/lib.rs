//! Desk-scale gated transformer+LSTM agent trained with an off-policy RL
//! loss plus a masked contrastive auxiliary loss, together with an
//! in-process simulated actor/learner system and toy environments.

pub mod config;
pub mod contrastive;
pub mod encoder;
pub mod envs;
pub mod error;
pub mod gtrxl;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod replay;
pub mod rl_losses;

pub use config::RunConfig;
pub use error::{CoberlError, Result};
