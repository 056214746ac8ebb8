//! Shared helpers for integration tests: synthetic sequences and batches.

use coberl::model::{AgentState, NetConfig};
use coberl::replay::{TransitionSequence, TransitionStep};
use numerics::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A synthetic trace with random observations/actions/rewards. `valid_len`
/// steps are real; the rest is zero padding. The last valid step is terminal.
pub fn random_sequence(
    net: &NetConfig,
    trace_length: usize,
    valid_len: usize,
    episode_id: u64,
    seed: u64,
) -> TransitionSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs_dim = net.obs_dim;
    let mut steps = Vec::with_capacity(trace_length);
    let mut prev_action = 0usize;
    let mut prev_reward = 0.0;
    for s in 0..trace_length {
        let live = s < valid_len;
        let obs = if live {
            Tensor::new(
                vec![obs_dim],
                (0..obs_dim).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap()
        } else {
            Tensor::zeros(&[obs_dim])
        };
        let action = if live { rng.gen_range(0..net.n_actions) } else { 0 };
        let reward = if live { rng.gen_range(-1.0..1.0) } else { 0.0 };
        let next_obs = if live {
            Tensor::new(
                vec![obs_dim],
                (0..obs_dim).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap()
        } else {
            Tensor::zeros(&[obs_dim])
        };
        steps.push(TransitionStep {
            prev_reward,
            prev_action,
            prev_lstm_hidden: vec![0.0; net.d_lstm],
            observation: obs,
            action,
            lstm_hidden: vec![0.0; net.d_lstm],
            reward,
            next_observation: next_obs,
            terminal: live && s + 1 == valid_len,
        });
        if live {
            prev_action = action;
            prev_reward = reward;
        }
    }
    TransitionSequence {
        steps,
        valid: (0..trace_length).map(|s| s < valid_len).collect(),
        initial_state: AgentState::zeros(
            net.d_lstm,
            net.transformer.n_layers,
            net.transformer.memory_size,
            net.d_model,
        ),
        episode_id,
    }
}
