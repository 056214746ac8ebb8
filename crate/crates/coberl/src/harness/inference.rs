//! Central batched inference against the latest published parameter
//! snapshot. Acting always runs the causal pass on unmasked inputs.

use numerics::{Graph, ParameterSet, Tensor};

use crate::encoder::{self, action_reward_rows};
use crate::envs::Observation;
use crate::error::{CoberlError, Result};
use crate::gtrxl::gtrxl_forward_batch;
use crate::model::{dueling_q_graph, gru_gate_graph, lstm_step, AgentState, GateVarNames, NetConfig, ParamVars};

#[derive(Clone, Debug)]
pub struct InferenceRequest {
    pub observation: Observation,
    pub prev_action: usize,
    pub prev_reward: f64,
    pub state: AgentState,
}

#[derive(Clone, Debug)]
pub struct InferenceResult {
    pub q_values: Tensor,
    pub state: AgentState,
}

pub struct InferenceService {
    net: NetConfig,
    snapshot: ParameterSet,
}

impl InferenceService {
    pub fn new(net: NetConfig, snapshot: ParameterSet) -> Self {
        InferenceService { net, snapshot }
    }

    /// Replace the working snapshot with a newer published parameter set.
    pub fn publish(&mut self, params: &ParameterSet) {
        self.snapshot = params.clone();
    }

    pub fn snapshot_version(&self) -> u64 {
        self.snapshot.version()
    }

    /// One forward pass over a batch of per-actor single steps. Each actor's
    /// recurrent state is advanced and returned.
    pub fn infer_batch(&self, requests: &[InferenceRequest]) -> Result<Vec<InferenceResult>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let net = &self.net;
        let b = requests.len();
        let mut graph = Graph::new();
        // the acting path never consults the mask token: it is deliberately
        // left unbound so any masking attempt fails loudly
        let pv: ParamVars = self
            .snapshot
            .iter()
            .filter(|(name, _)| name.as_str() != "mask_token")
            .map(|(name, t)| (name.clone(), graph.constant(t.clone())))
            .collect();
        assert!(
            !pv.contains_key("mask_token"),
            "acting path must not consult the mask token"
        );

        let mut obs = Tensor::zeros(&[b, net.obs_dim]);
        let mut actions = Vec::with_capacity(b);
        let mut rewards = Vec::with_capacity(b);
        for (i, req) in requests.iter().enumerate() {
            if req.observation.tensor().len() != net.obs_dim {
                return Err(CoberlError::Config(format!(
                    "observation size {} != configured {}",
                    req.observation.tensor().len(),
                    net.obs_dim
                )));
            }
            obs.data_mut()[i * net.obs_dim..(i + 1) * net.obs_dim]
                .copy_from_slice(req.observation.tensor().data());
            actions.push(req.prev_action);
            rewards.push(req.prev_reward);
        }
        let obs_var = graph.constant(obs);
        let ar = action_reward_rows(&actions, &rewards, net.n_actions)?;
        let ar_var = graph.constant(ar);
        let y = encoder::build_input_embedding(&mut graph, &pv, &net.encoder, obs_var, ar_var)?;

        // transformer advances each actor's own memory
        let memories: Vec<&crate::gtrxl::TransformerMemory> =
            requests.iter().map(|r| &r.state.memory).collect();
        let (x_all, new_memories) = gtrxl_forward_batch(
            &mut graph,
            &pv,
            "gtrxl",
            &net.transformer,
            y,
            &memories,
            1,
            true,
        )?;
        let z = if net.use_gate {
            let names = GateVarNames::new("gate");
            gru_gate_graph(&mut graph, &pv, &names, y, x_all)
        } else {
            x_all
        };
        let mut h0 = Tensor::zeros(&[b, net.d_lstm]);
        let mut c0 = Tensor::zeros(&[b, net.d_lstm]);
        for (i, req) in requests.iter().enumerate() {
            h0.data_mut()[i * net.d_lstm..(i + 1) * net.d_lstm]
                .copy_from_slice(req.state.lstm_hidden.data());
            c0.data_mut()[i * net.d_lstm..(i + 1) * net.d_lstm]
                .copy_from_slice(req.state.lstm_cell.data());
        }
        let h0 = graph.constant(h0);
        let c0 = graph.constant(c0);
        let (h_new, c_new) = lstm_step(&mut graph, &pv, z, h0, c0, net.d_lstm);
        let output = graph.concat_cols(&[h_new, y]);
        let q = dueling_q_graph(&mut graph, &pv, output);

        let q_vals = graph.value(q).clone();
        let h_vals = graph.value(h_new).clone();
        let c_vals = graph.value(c_new).clone();
        let mut results = Vec::with_capacity(b);
        for (i, mem) in new_memories.into_iter().enumerate() {
            let q_row = Tensor::new(
                vec![net.n_actions],
                q_vals.data()[i * net.n_actions..(i + 1) * net.n_actions].to_vec(),
            )
            .unwrap();
            let h = Tensor::new(
                vec![net.d_lstm],
                h_vals.data()[i * net.d_lstm..(i + 1) * net.d_lstm].to_vec(),
            )
            .unwrap();
            let c = Tensor::new(
                vec![net.d_lstm],
                c_vals.data()[i * net.d_lstm..(i + 1) * net.d_lstm].to_vec(),
            )
            .unwrap();
            results.push(InferenceResult {
                q_values: q_row,
                state: AgentState {
                    lstm_hidden: h,
                    lstm_cell: c,
                    memory: mem,
                },
            });
        }
        Ok(results)
    }
}
