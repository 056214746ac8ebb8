//! Learner: target computation, the full training loss (RL + contrastive)
//! as a single graph build, and the optimizer step with target-network sync.
//!
//! `build_training_loss` is the one construction of the loss; the gradient
//! checks differentiate exactly what training runs.

use std::collections::BTreeMap;

use numerics::{adam_step, clip_global_norm, AdamState, Graph, ParameterSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{MaskTokenKind, RunConfig, TargetPolicy};
use crate::contrastive::{compute_aux_loss_graph_weighted, MaskPlan};
use crate::encoder::{self, action_reward_rows};
use crate::error::{CoberlError, Result};
use crate::gtrxl::gtrxl_forward_batch;
use crate::model::{
    bind_all, bind_all_const, dueling_q_graph, gru_gate_graph, lstm_unroll, GateVarNames,
    NetConfig, ParamVars,
};
use crate::replay::{PrioritizedSample, TransitionSequence};
use crate::rl_losses::{peng_targets, priority_from_tds, ValueTransform};

/// Scalar knobs of the loss build.
#[derive(Clone, Debug)]
pub struct LossHyper {
    pub aux_weight: f64,
    pub kl_weight: f64,
    pub rl_pass_masked: bool,
    /// build the contrastive subgraph even when `aux_weight == 0`
    pub include_aux: bool,
}

/// Everything the loss build needs, precomputed and frozen so the build is a
/// deterministic function of the online parameters.
#[derive(Clone, Debug)]
pub struct LossInputs {
    pub sequences: Vec<TransitionSequence>,
    pub is_weights: Vec<f64>,
    pub mask_plan: MaskPlan,
    /// per sequence, per step: transform(G_t); padded steps carry 0
    pub targets_transformed: Vec<Vec<f64>>,
    /// per sequence, per step: contributes to the RL loss
    pub loss_mask: Vec<Vec<bool>>,
}

pub struct LossOutputs {
    pub total: Var,
    pub rl: Var,
    pub aux: Var,
    pub q_taken: Var,
    pub loss_positions: usize,
}

fn flat_obs_rows(sequences: &[TransitionSequence], obs_dim: usize) -> (Tensor, Vec<usize>, Vec<f64>) {
    let t_len = sequences[0].trace_length();
    let b = sequences.len();
    let mut obs = Tensor::zeros(&[b * t_len, obs_dim]);
    let mut actions = Vec::with_capacity(b * t_len);
    let mut rewards = Vec::with_capacity(b * t_len);
    for (i, seq) in sequences.iter().enumerate() {
        for (s, step) in seq.steps.iter().enumerate() {
            let row = i * t_len + s;
            obs.data_mut()[row * obs_dim..(row + 1) * obs_dim]
                .copy_from_slice(step.observation.data());
            actions.push(step.prev_action);
            rewards.push(step.prev_reward);
        }
    }
    (obs, actions, rewards)
}

/// Embed every step of every sequence: `[B*T, d_model]`, sequence-major.
fn embed_batch(
    graph: &mut Graph,
    pv: &ParamVars,
    net: &NetConfig,
    sequences: &[TransitionSequence],
) -> Result<Var> {
    let (obs, actions, rewards) = flat_obs_rows(sequences, net.obs_dim);
    let obs_var = graph.constant(obs);
    let ar = action_reward_rows(&actions, &rewards, net.n_actions)?;
    let ar_var = graph.constant(ar);
    encoder::build_input_embedding(graph, pv, &net.encoder, obs_var, ar_var)
}

/// Replace planned positions with the mask token (gradient flows into a
/// trainable token through the substitution).
fn mask_embeddings(
    graph: &mut Graph,
    pv: &ParamVars,
    net: &NetConfig,
    y: Var,
    plan: &MaskPlan,
    batch: usize,
    t_len: usize,
) -> Var {
    let d = net.d_model;
    let mut keep = Tensor::full(&[batch * t_len, d], 1.0);
    let mut mask_col = Tensor::zeros(&[batch * t_len, 1]);
    for (i, indices) in plan.masked_indices.iter().enumerate() {
        for &t in indices {
            let row = i * t_len + t;
            keep.data_mut()[row * d..(row + 1) * d].fill(0.0);
            mask_col.data_mut()[row] = 1.0;
        }
    }
    let kept = graph.mul_const(y, keep);
    match net.mask_token {
        MaskTokenKind::Zero => kept,
        MaskTokenKind::Trainable => {
            let col = graph.constant(mask_col);
            let token_rows = graph.matmul(col, pv["mask_token"]);
            graph.add(kept, token_rows)
        }
    }
}

/// Run the transformer over the whole batch (block-diagonal attention, one
/// memory per sequence).
fn transformer_over_batch(
    graph: &mut Graph,
    pv: &ParamVars,
    net: &NetConfig,
    input: Var,
    sequences: &[TransitionSequence],
    t_len: usize,
    causal: bool,
) -> Result<Var> {
    let memories: Vec<&crate::gtrxl::TransformerMemory> = sequences
        .iter()
        .map(|seq| &seq.initial_state.memory)
        .collect();
    let (out, _) = gtrxl_forward_batch(
        graph,
        pv,
        "gtrxl",
        &net.transformer,
        input,
        &memories,
        t_len,
        causal,
    )?;
    Ok(out)
}

/// Q values for all steps of all sequences: gate, LSTM from stored state,
/// skip-concatenation, dueling head.
fn q_head_over_batch(
    graph: &mut Graph,
    pv: &ParamVars,
    net: &NetConfig,
    y_unmasked: Var,
    x_rl: Var,
    sequences: &[TransitionSequence],
    t_len: usize,
) -> Var {
    let z = if net.use_gate {
        let names = GateVarNames::new("gate");
        gru_gate_graph(graph, pv, &names, y_unmasked, x_rl)
    } else {
        x_rl
    };
    let b = sequences.len();
    let mut h0 = Tensor::zeros(&[b, net.d_lstm]);
    let mut c0 = Tensor::zeros(&[b, net.d_lstm]);
    for (i, seq) in sequences.iter().enumerate() {
        h0.data_mut()[i * net.d_lstm..(i + 1) * net.d_lstm]
            .copy_from_slice(seq.initial_state.lstm_hidden.data());
        c0.data_mut()[i * net.d_lstm..(i + 1) * net.d_lstm]
            .copy_from_slice(seq.initial_state.lstm_cell.data());
    }
    let (lstm_out, _, _) = lstm_unroll(graph, pv, z, b, t_len, h0, c0, net.d_lstm);
    let output = graph.concat_cols(&[lstm_out, y_unmasked]);
    dueling_q_graph(graph, pv, output)
}

/// Build the complete training loss. All stochastic choices (mask plan) and
/// all target-network quantities are frozen inside `inputs`.
pub fn build_training_loss(
    graph: &mut Graph,
    online: &ParamVars,
    net: &NetConfig,
    hyper: &LossHyper,
    inputs: &LossInputs,
) -> Result<LossOutputs> {
    let b = inputs.sequences.len();
    if b == 0 {
        return Err(CoberlError::Input("empty batch".into()));
    }
    let t_len = inputs.sequences[0].trace_length();
    let y = embed_batch(graph, online, net, &inputs.sequences)?;
    let y_masked = mask_embeddings(graph, online, net, y, &inputs.mask_plan, b, t_len);

    // contrastive pass: non-causal transformer over masked inputs,
    // critic-embedded against the unmasked targets
    let aux = if hyper.include_aux {
        let x_c = transformer_over_batch(
            graph,
            online,
            net,
            y_masked,
            &inputs.sequences,
            t_len,
            false,
        )?;
        let x_emb = crate::contrastive::critic_embed_graph(graph, online, x_c);
        let y_emb = crate::contrastive::critic_embed_graph(graph, online, y);
        let mut aux_mask = inputs.mask_plan.mask_ext();
        for (i, seq) in inputs.sequences.iter().enumerate() {
            for (s, &v) in seq.valid.iter().enumerate() {
                if !v {
                    aux_mask.data_mut()[i * t_len + s] = 0.0;
                }
            }
        }
        let (total, _inv) = compute_aux_loss_graph_weighted(
            graph,
            x_emb,
            y_emb,
            &aux_mask,
            b,
            t_len,
            hyper.kl_weight,
        )?;
        total
    } else {
        graph.constant(Tensor::scalar(0.0))
    };

    // RL pass: causal transformer; per the published procedure it consumes
    // the masked inputs, while the gate always receives unmasked embeddings
    let rl_input = if hyper.rl_pass_masked { y_masked } else { y };
    let x_rl = transformer_over_batch(graph, online, net, rl_input, &inputs.sequences, t_len, true)?;
    let q = q_head_over_batch(graph, online, net, y, x_rl, &inputs.sequences, t_len);

    let actions: Vec<usize> = inputs
        .sequences
        .iter()
        .flat_map(|seq| seq.steps.iter().map(|s| s.action))
        .collect();
    let q_taken = graph.select_col_per_row(q, &actions);

    let mut target_col = Tensor::zeros(&[b * t_len, 1]);
    let mut weight_col = Tensor::zeros(&[b * t_len, 1]);
    let mut loss_positions = 0usize;
    for i in 0..b {
        for s in 0..t_len {
            let row = i * t_len + s;
            target_col.data_mut()[row] = inputs.targets_transformed[i][s];
            if inputs.loss_mask[i][s] {
                weight_col.data_mut()[row] = inputs.is_weights[i];
                loss_positions += 1;
            }
        }
    }
    if loss_positions == 0 {
        return Err(CoberlError::Input(
            "batch has no steps contributing to the RL loss".into(),
        ));
    }
    let targets = graph.constant(target_col);
    let delta = graph.sub(targets, q_taken);
    let sq = graph.mul(delta, delta);
    let weighted = graph.mul_const(sq, weight_col);
    let sum = graph.sum_all(weighted);
    let rl = graph.scale(sum, 0.5 / loss_positions as f64);

    let aux_scaled = graph.scale(aux, hyper.aux_weight);
    let total = graph.add(rl, aux_scaled);
    Ok(LossOutputs {
        total,
        rl,
        aux,
        q_taken,
        loss_positions,
    })
}

/// Build target-network inputs (`T+1` positions per sequence, the last being
/// the bootstrap state) and return raw-space Peng targets per sequence.
pub fn compute_raw_targets(
    net: &NetConfig,
    cfg: &RunConfig,
    target_params: &ParameterSet,
    sequences: &[TransitionSequence],
    mask_plan: &MaskPlan,
) -> Result<Vec<Vec<f64>>> {
    let b = sequences.len();
    let t_len = sequences[0].trace_length();
    let ext = t_len + 1;
    let transform = ValueTransform {
        kind: cfg.q_value_transform.clone(),
        epsilon: cfg.value_transform_epsilon,
    };

    // extended sequences: same steps plus one bootstrap row
    let mut obs = Tensor::zeros(&[b * ext, net.obs_dim]);
    let mut actions = vec![0usize; b * ext];
    let mut rewards = vec![0.0; b * ext];
    for (i, seq) in sequences.iter().enumerate() {
        let valid_len = seq.valid_len();
        for (s, step) in seq.steps.iter().enumerate() {
            let row = i * ext + s;
            obs.data_mut()[row * net.obs_dim..(row + 1) * net.obs_dim]
                .copy_from_slice(step.observation.data());
            actions[row] = step.prev_action;
            rewards[row] = step.prev_reward;
        }
        // bootstrap position right after the last valid step
        let last = &seq.steps[valid_len - 1];
        let row = i * ext + valid_len;
        obs.data_mut()[row * net.obs_dim..(row + 1) * net.obs_dim]
            .copy_from_slice(last.next_observation.data());
        actions[row] = last.action;
        rewards[row] = last.reward;
    }

    let mut graph = Graph::new();
    let pv = bind_all_const(&mut graph, target_params);
    let obs_var = graph.constant(obs);
    let ar = action_reward_rows(&actions, &rewards, net.n_actions)?;
    let ar_var = graph.constant(ar);
    let y = encoder::build_input_embedding(&mut graph, &pv, &net.encoder, obs_var, ar_var)?;
    // the target pass sees the same masked inputs as the online RL pass
    let y_rl = if cfg.rl_pass_masked {
        let ext_plan = MaskPlan {
            masked_indices: mask_plan.masked_indices.clone(),
            mask_rate: mask_plan.mask_rate,
            t_len: ext,
        };
        mask_embeddings(&mut graph, &pv, net, y, &ext_plan, b, ext)
    } else {
        y
    };
    let memories: Vec<&crate::gtrxl::TransformerMemory> = sequences
        .iter()
        .map(|seq| &seq.initial_state.memory)
        .collect();
    let (x_rl, _) = gtrxl_forward_batch(
        &mut graph,
        &pv,
        "gtrxl",
        &net.transformer,
        y_rl,
        &memories,
        ext,
        true,
    )?;
    let q = q_head_over_batch(&mut graph, &pv, net, y, x_rl, sequences, ext);
    let q_vals = graph.value(q).clone();

    let mut all_targets = Vec::with_capacity(b);
    for (i, seq) in sequences.iter().enumerate() {
        let valid_len = seq.valid_len();
        let mut tqm = Vec::with_capacity(valid_len + 1);
        for s in 0..=valid_len {
            let row = i * ext + s;
            let row_vals = &q_vals.data()[row * net.n_actions..(row + 1) * net.n_actions];
            let boot = match cfg.rl_target_policy {
                TargetPolicy::Max => row_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                TargetPolicy::EpsGreedy => {
                    let max = row_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mean = row_vals.iter().sum::<f64>() / row_vals.len() as f64;
                    (1.0 - cfg.target_epsilon) * max + cfg.target_epsilon * mean
                }
            };
            tqm.push(transform.inverse(boot));
        }
        let rewards: Vec<f64> = seq.steps[..valid_len].iter().map(|s| s.reward).collect();
        let terminal: Vec<bool> = seq.steps[..valid_len].iter().map(|s| s.terminal).collect();
        let mut raw = peng_targets(&rewards, &tqm, &terminal, cfg.q_lambda, cfg.discount_factor)?;
        raw.resize(t_len, 0.0);
        all_targets.push(raw);
    }
    Ok(all_targets)
}

#[derive(Clone, Debug)]
pub struct LearnerMetrics {
    pub loss_rl: f64,
    pub loss_contrastive: f64,
    pub grad_norm: f64,
    pub priorities: Vec<f64>,
    pub target_synced: bool,
}

#[derive(Debug)]
pub enum LearnerOutcome {
    Applied(LearnerMetrics),
    Aborted { diagnostic: String },
}

pub struct Learner {
    pub net: NetConfig,
    pub cfg: RunConfig,
    pub params: ParameterSet,
    pub target: ParameterSet,
    pub opt: AdamState,
    pub steps: u64,
    pub consecutive_aborts: u32,
    mask_rng: ChaCha8Rng,
}

pub const MAX_CONSECUTIVE_ABORTS: u32 = 3;

impl Learner {
    pub fn new(net: NetConfig, cfg: RunConfig, params: ParameterSet, mask_seed: u64) -> Self {
        let opt = AdamState::new(
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_epsilon,
        );
        Learner {
            net,
            target: params.clone(),
            params,
            opt,
            steps: 0,
            consecutive_aborts: 0,
            mask_rng: ChaCha8Rng::seed_from_u64(mask_seed),
            cfg,
        }
    }

    pub fn hyper(&self, include_aux: bool) -> LossHyper {
        LossHyper {
            aux_weight: self.cfg.contrastive_loss_weight,
            kl_weight: self.cfg.contrastive_kl_weight,
            rl_pass_masked: self.cfg.rl_pass_masked,
            include_aux,
        }
    }

    /// Assemble frozen loss inputs for a batch: mask plan, targets, masks.
    pub fn prepare_inputs(&mut self, batch: &[PrioritizedSample]) -> Result<LossInputs> {
        let sequences: Vec<TransitionSequence> =
            batch.iter().map(|s| s.sequence.clone()).collect();
        let t_len = sequences[0].trace_length();
        let plan = crate::contrastive::plan_masks(
            sequences.len(),
            t_len,
            self.cfg.contrastive_mask_rate,
            &mut self.mask_rng,
        )?;
        let raw = compute_raw_targets(&self.net, &self.cfg, &self.target, &sequences, &plan)?;
        let transform = ValueTransform {
            kind: self.cfg.q_value_transform.clone(),
            epsilon: self.cfg.value_transform_epsilon,
        };
        let targets_transformed: Vec<Vec<f64>> = raw
            .iter()
            .map(|seq| seq.iter().map(|&g| transform.transform(g)).collect())
            .collect();
        let burn_in = self.cfg.burn_in_len();
        let loss_mask: Vec<Vec<bool>> = sequences
            .iter()
            .map(|seq| {
                seq.valid
                    .iter()
                    .enumerate()
                    .map(|(s, &v)| v && s >= burn_in)
                    .collect()
            })
            .collect();
        Ok(LossInputs {
            is_weights: batch.iter().map(|s| s.weight).collect(),
            sequences,
            mask_plan: plan,
            targets_transformed,
            loss_mask,
        })
    }

    /// One optimization step over a replay batch.
    pub fn step(&mut self, batch: &[PrioritizedSample]) -> Result<LearnerOutcome> {
        let include_aux = self.cfg.contrastive_loss_weight != 0.0;
        let inputs = self.prepare_inputs(batch)?;
        let hyper = self.hyper(include_aux);

        let mut graph = Graph::new();
        let online = bind_all(&mut graph, &self.params);
        let out = build_training_loss(&mut graph, &online, &self.net, &hyper, &inputs)?;
        let total = graph.value(out.total).item();
        if !total.is_finite() {
            self.consecutive_aborts += 1;
            let diagnostic = format!(
                "non-finite loss at learner step {}: rl={:?} aux={:?}",
                self.steps,
                graph.value(out.rl).item(),
                graph.value(out.aux).item()
            );
            if self.consecutive_aborts >= MAX_CONSECUTIVE_ABORTS {
                return Err(CoberlError::Halted(format!(
                    "{MAX_CONSECUTIVE_ABORTS} consecutive aborted learner steps; last: {diagnostic}"
                )));
            }
            return Ok(LearnerOutcome::Aborted { diagnostic });
        }
        self.consecutive_aborts = 0;

        let loss_rl = graph.value(out.rl).item();
        let loss_aux = graph.value(out.aux).item();

        // TD errors from the built graph, for priorities
        let t_len = inputs.sequences[0].trace_length();
        let q_taken = graph.value(out.q_taken).clone();
        let mut priorities = Vec::with_capacity(batch.len());
        for (i, seq) in inputs.sequences.iter().enumerate() {
            let mut tds = Vec::new();
            for s in 0..t_len {
                if inputs.loss_mask[i][s] {
                    let row = i * t_len + s;
                    tds.push(inputs.targets_transformed[i][s] - q_taken.data()[row]);
                }
            }
            let _ = seq;
            priorities.push(if tds.is_empty() {
                0.0
            } else {
                priority_from_tds(&tds, self.cfg.replay_priority_exponent)?
            });
        }

        let grads_raw = graph.backward(out.total)?;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, var) in &online {
            let g = grads_raw
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.params.get(name).unwrap().shape()));
            grads.insert(name.clone(), g);
        }
        let grad_norm = grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clipped = clip_global_norm(&grads, self.cfg.adam_clip_norm);
        self.params = adam_step(&self.params, &clipped, &mut self.opt)?;
        self.steps += 1;
        let target_synced = self.steps % self.cfg.target_update_period as u64 == 0;
        if target_synced {
            self.target = self.params.clone();
        }
        Ok(LearnerOutcome::Applied(LearnerMetrics {
            loss_rl,
            loss_contrastive: loss_aux,
            grad_norm,
            priorities,
            target_synced,
        }))
    }
}
