//! Single-threaded deterministic training loop: actors step round-robin
//! through batched inference, completed traces flow into prioritized replay,
//! the learner runs on a step-count cadence and publishes snapshots, and a
//! separate evaluator reports greedy returns.

use std::path::{Path, PathBuf};

use numerics::{ParameterSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::envs::{make_env, Environment, Observation};
use crate::error::{CoberlError, Result};
use crate::harness::inference::{InferenceRequest, InferenceService};
use crate::harness::learner::{Learner, LearnerOutcome};
use crate::harness::schedule::{actor_step, epsilon_for_actor, ActorSchedule};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::model::{AgentState, NetConfig};
use crate::replay::{PrioritizedReplay, TransitionSequence, TransitionStep};

fn derive_seed(base: u64, stream: u64) -> u64 {
    base.wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B54A32D192ED03))
        .rotate_left(23)
        ^ stream
}

struct ActorRunner {
    env: Box<dyn Environment>,
    state: AgentState,
    obs: Observation,
    prev_action: usize,
    prev_reward: f64,
    epsilon: f64,
    rng: ChaCha8Rng,
    episode_id: u64,
    episode_steps: Vec<TransitionStep>,
    trace_snapshots: Vec<AgentState>,
    emitted_traces: usize,
    episode_return: f64,
}

impl ActorRunner {
    fn new(
        cfg: &RunConfig,
        net: &NetConfig,
        actor_idx: usize,
        seed: u64,
        episode_id: u64,
    ) -> Result<Self> {
        let sched = ActorSchedule::new(cfg.epsilon_base, cfg.epsilon_alpha, cfg.num_actors);
        let mut env = make_env(cfg, derive_seed(seed, 1000 + actor_idx as u64))?;
        let obs = env.reset();
        Ok(ActorRunner {
            env,
            state: net.fresh_state(),
            obs,
            prev_action: 0,
            prev_reward: 0.0,
            epsilon: epsilon_for_actor(actor_idx, &sched),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 2000 + actor_idx as u64)),
            episode_id,
            episode_steps: Vec::new(),
            trace_snapshots: Vec::new(),
            emitted_traces: 0,
            episode_return: 0.0,
        })
    }

    fn request(&self) -> InferenceRequest {
        InferenceRequest {
            observation: self.obs.clone(),
            prev_action: self.prev_action,
            prev_reward: self.prev_reward,
            state: self.state.clone(),
        }
    }
}

fn pad_step(obs_shape: &[usize; 3], d_lstm: usize) -> TransitionStep {
    TransitionStep {
        prev_reward: 0.0,
        prev_action: 0,
        prev_lstm_hidden: vec![0.0; d_lstm],
        observation: Tensor::zeros(obs_shape),
        action: 0,
        lstm_hidden: vec![0.0; d_lstm],
        reward: 0.0,
        next_observation: Tensor::zeros(obs_shape),
        terminal: false,
    }
}

/// Build the trace starting at `start` from an episode's step records.
fn build_sequence(
    steps: &[TransitionStep],
    start: usize,
    trace_length: usize,
    initial_state: AgentState,
    episode_id: u64,
    obs_shape: &[usize; 3],
    d_lstm: usize,
) -> TransitionSequence {
    let avail = steps.len() - start;
    let valid_len = avail.min(trace_length);
    let mut out_steps = Vec::with_capacity(trace_length);
    let mut valid = Vec::with_capacity(trace_length);
    for s in 0..trace_length {
        if s < valid_len {
            out_steps.push(steps[start + s].clone());
            valid.push(true);
        } else {
            out_steps.push(pad_step(obs_shape, d_lstm));
            valid.push(false);
        }
    }
    TransitionSequence {
        steps: out_steps,
        valid,
        initial_state,
        episode_id,
    }
}

pub struct TrainOutput {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_params: ParameterSet,
    pub eval_reports: Vec<(u64, f64)>,
    pub env_steps: u64,
    pub learner_steps: u64,
}

/// Greedy evaluation: `episodes` episodes with the evaluation epsilon, mean
/// return. The evaluator owns its environment and RNG streams.
pub fn evaluate(
    net: &NetConfig,
    params: &ParameterSet,
    cfg: &RunConfig,
    seed: u64,
    episodes: usize,
) -> Result<f64> {
    let service = InferenceService::new(net.clone(), params.clone());
    let mut env = make_env(cfg, derive_seed(seed, 31))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 32));
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut state = net.fresh_state();
        let mut obs = env.reset();
        let mut prev_action = 0usize;
        let mut prev_reward = 0.0;
        loop {
            let results = service.infer_batch(&[InferenceRequest {
                observation: obs.clone(),
                prev_action,
                prev_reward,
                state: state.clone(),
            }])?;
            let r = &results[0];
            let action = actor_step(&r.q_values, cfg.evaluation_epsilon, &mut rng);
            let step = self_step(&mut env, action)?;
            total += step.reward;
            state = r.state.clone();
            prev_action = action;
            prev_reward = step.reward;
            obs = step.observation;
            if step.terminal {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

fn self_step(env: &mut Box<dyn Environment>, action: usize) -> Result<crate::envs::EnvStep> {
    env.step(action)
}

/// Run a full training session; deterministic given `cfg.seed`.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let seed = cfg.seed;
    let probe_env = make_env(cfg, 0)?;
    let net = NetConfig::from_run(cfg, probe_env.n_actions(), probe_env.obs_shape())?;
    let obs_shape = probe_env.obs_shape();
    drop(probe_env);

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let params = net.init_params(&mut init_rng);
    let mut learner = Learner::new(net.clone(), cfg.clone(), params, derive_seed(seed, 2));
    let mut service = InferenceService::new(net.clone(), learner.params.clone());
    let mut replay = PrioritizedReplay::new(
        cfg.replay_capacity,
        cfg.trace_length,
        cfg.min_sequences_to_start,
        cfg.replay_sampling_exponent,
    );
    let mut replay_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));

    let mut episode_counter = 0u64;
    let mut actors = Vec::with_capacity(cfg.num_actors);
    for a in 0..cfg.num_actors {
        actors.push(ActorRunner::new(cfg, &net, a, seed, episode_counter)?);
        episode_counter += 1;
    }
    let epsilon_mean =
        actors.iter().map(|a| a.epsilon).sum::<f64>() / actors.len() as f64;

    let metrics_path = out_dir.join(format!("metrics_seed{seed}.csv"));
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let mut eval_reports: Vec<(u64, f64)> = Vec::new();
    let mut env_steps = 0u64;
    let mut published_at_step = 0u64;
    let mut next_learn = cfg.learner_period as u64;
    let mut next_eval = cfg.eval_every as u64;
    let mut next_log = cfg.metrics_log_every as u64;
    let mut recent_returns: Vec<f64> = Vec::new();
    let mut last_loss_rl = None;
    let mut last_loss_aux = None;

    while env_steps < cfg.total_env_steps as u64 {
        // one round-robin sweep: batched inference for every actor
        let requests: Vec<InferenceRequest> = actors.iter().map(|a| a.request()).collect();
        let results = service.infer_batch(&requests)?;
        for (actor, result) in actors.iter_mut().zip(results) {
            if actor.episode_steps.len() % cfg.replay_period == 0 {
                actor.trace_snapshots.push(actor.state.clone());
            }
            let action = actor_step(&result.q_values, actor.epsilon, &mut actor.rng);
            let env_step = actor.env.step(action)?;
            actor.episode_steps.push(TransitionStep {
                prev_reward: actor.prev_reward,
                prev_action: actor.prev_action,
                prev_lstm_hidden: actor.state.lstm_hidden.data().to_vec(),
                observation: actor.obs.tensor().clone(),
                action,
                lstm_hidden: result.state.lstm_hidden.data().to_vec(),
                reward: env_step.reward,
                next_observation: env_step.observation.tensor().clone(),
                terminal: env_step.terminal,
            });
            actor.episode_return += env_step.reward;
            actor.state = result.state;
            actor.prev_action = action;
            actor.prev_reward = env_step.reward;
            actor.obs = env_step.observation;
            env_steps += 1;

            // emit traces that are complete
            while actor.episode_steps.len()
                >= actor.emitted_traces * cfg.replay_period + cfg.trace_length
            {
                let start = actor.emitted_traces * cfg.replay_period;
                let seq = build_sequence(
                    &actor.episode_steps,
                    start,
                    cfg.trace_length,
                    actor.trace_snapshots[actor.emitted_traces].clone(),
                    actor.episode_id,
                    &obs_shape,
                    net.d_lstm,
                );
                replay.insert(seq, None)?;
                actor.emitted_traces += 1;
            }

            if env_step.terminal {
                // flush remaining partial traces with at least one
                // post-burn-in step
                let mut start = actor.emitted_traces * cfg.replay_period;
                while start < actor.episode_steps.len() {
                    let valid_len = actor.episode_steps.len() - start;
                    if valid_len > cfg.burn_in_len() {
                        let seq = build_sequence(
                            &actor.episode_steps,
                            start,
                            cfg.trace_length,
                            actor.trace_snapshots[start / cfg.replay_period].clone(),
                            actor.episode_id,
                            &obs_shape,
                            net.d_lstm,
                        );
                        replay.insert(seq, None)?;
                    }
                    start += cfg.replay_period;
                }
                recent_returns.push(actor.episode_return);
                actor.obs = actor.env.reset();
                actor.state = net.fresh_state();
                actor.prev_action = 0;
                actor.prev_reward = 0.0;
                actor.episode_steps.clear();
                actor.trace_snapshots.clear();
                actor.emitted_traces = 0;
                actor.episode_return = 0.0;
                actor.episode_id = episode_counter;
                episode_counter += 1;
            }
        }

        // learner cadence
        while env_steps >= next_learn {
            next_learn += cfg.learner_period as u64;
            let batch = match replay.sample(
                cfg.batch_size,
                cfg.importance_sampling_exponent,
                &mut replay_rng,
            ) {
                Ok(b) => b,
                Err(CoberlError::NotReady { .. }) => continue,
                Err(e) => return Err(e),
            };
            match learner.step(&batch)? {
                LearnerOutcome::Applied(m) => {
                    let ids: Vec<_> = batch.iter().map(|s| s.id).collect();
                    replay.update_priorities(&ids, &m.priorities)?;
                    last_loss_rl = Some(m.loss_rl);
                    last_loss_aux = Some(m.loss_contrastive);
                }
                LearnerOutcome::Aborted { diagnostic } => {
                    eprintln!("learner step aborted: {diagnostic}");
                }
            }
            if learner.steps - published_at_step >= cfg.snapshot_publish_interval as u64 {
                service.publish(&learner.params);
                published_at_step = learner.steps;
            }
        }

        // evaluator cadence
        while env_steps >= next_eval {
            let eval_idx = next_eval / cfg.eval_every as u64;
            next_eval += cfg.eval_every as u64;
            let mean = evaluate(
                &net,
                &learner.params,
                cfg,
                derive_seed(seed, 50_000 + eval_idx),
                cfg.eval_episodes,
            )?;
            eval_reports.push((env_steps, mean));
            writer.write(&MetricsRow {
                step: env_steps,
                eval_return: Some(mean),
                ..Default::default()
            })?;
        }

        // metrics cadence
        while env_steps >= next_log {
            next_log += cfg.metrics_log_every as u64;
            let episode_return = if recent_returns.is_empty() {
                None
            } else {
                Some(recent_returns.iter().sum::<f64>() / recent_returns.len() as f64)
            };
            recent_returns.clear();
            writer.write(&MetricsRow {
                step: env_steps,
                episode_return,
                eval_return: None,
                loss_rl: last_loss_rl,
                loss_contrastive: last_loss_aux,
                priority_mean: Some(replay.mean_priority()),
                epsilon_mean: Some(epsilon_mean),
            })?;
        }
    }
    writer.flush()?;

    let checkpoint_path = out_dir.join(format!("checkpoint_seed{seed}.ckpt"));
    numerics::checkpoint::save_params(&checkpoint_path, &learner.params, &cfg.to_text())?;
    Ok(TrainOutput {
        metrics_path,
        checkpoint_path,
        final_params: learner.params.clone(),
        eval_reports,
        env_steps,
        learner_steps: learner.steps,
    })
}

/// Mean of the evaluation reports falling in the final 5% of the budget.
pub fn final_window_summary(output: &TrainOutput, budget: u64) -> Option<f64> {
    let cutoff = budget as f64 * (1.0 - crate::metrics::FINAL_WINDOW_FRACTION);
    let window: Vec<f64> = output
        .eval_reports
        .iter()
        .filter(|(step, _)| *step as f64 >= cutoff)
        .map(|(_, v)| *v)
        .collect();
    if window.is_empty() {
        None
    } else {
        Some(window.iter().sum::<f64>() / window.len() as f64)
    }
}
