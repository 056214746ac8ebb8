//! The agent head: GRU gate combining encoder output Y and transformer
//! output X, LSTM over the gated result, skip-concatenation, and dueling
//! Q head.

use std::collections::BTreeMap;

use numerics::{Graph, ParameterSet, Tensor, Var};
use rand::Rng;

use crate::config::{MaskTokenKind, RunConfig, TransformerActivation};
use crate::encoder::{self, EncoderConfig};
use crate::error::{CoberlError, Result};
use crate::gtrxl::{self, TransformerConfig, TransformerMemory};

pub type ParamVars = BTreeMap<String, Var>;

/// Bind every named parameter into the graph as a gradient-tracked leaf.
pub fn bind_all(graph: &mut Graph, params: &ParameterSet) -> ParamVars {
    params
        .iter()
        .map(|(name, t)| (name.clone(), graph.param(t.clone())))
        .collect()
}

/// Bind every named parameter as a constant (no gradient): target networks.
pub fn bind_all_const(graph: &mut Graph, params: &ParameterSet) -> ParamVars {
    params
        .iter()
        .map(|(name, t)| (name.clone(), graph.constant(t.clone())))
        .collect()
}

/// The seven gate tensors.
#[derive(Clone, Debug)]
pub struct GateParameters {
    pub wz: Tensor,
    pub uz: Tensor,
    pub wg: Tensor,
    pub ug: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub bg: Tensor,
}

impl GateParameters {
    pub fn zeros(d: usize, bias: f64) -> Self {
        GateParameters {
            wz: Tensor::zeros(&[d, d]),
            uz: Tensor::zeros(&[d, d]),
            wg: Tensor::zeros(&[d, d]),
            ug: Tensor::zeros(&[d, d]),
            wr: Tensor::zeros(&[d, d]),
            ur: Tensor::zeros(&[d, d]),
            bg: Tensor::full(&[d], bias),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        for (name, t) in [
            ("wz", &self.wz),
            ("uz", &self.uz),
            ("wg", &self.wg),
            ("ug", &self.ug),
            ("wr", &self.wr),
            ("ur", &self.ur),
        ] {
            if t.shape() != [d, d] {
                return Err(CoberlError::Config(format!(
                    "gate matrix {name} has shape {:?}, expected [{d}, {d}]",
                    t.shape()
                )));
            }
        }
        if self.bg.len() != d {
            return Err(CoberlError::Config(format!(
                "gate bias width {} != {d}",
                self.bg.len()
            )));
        }
        Ok(())
    }
}

pub struct GateVarNames {
    pub wz: String,
    pub uz: String,
    pub wg: String,
    pub ug: String,
    pub wr: String,
    pub ur: String,
    pub bg: String,
}

impl GateVarNames {
    pub fn new(prefix: &str) -> Self {
        GateVarNames {
            wz: format!("{prefix}.wz"),
            uz: format!("{prefix}.uz"),
            wg: format!("{prefix}.wg"),
            ug: format!("{prefix}.ug"),
            wr: format!("{prefix}.wr"),
            ur: format!("{prefix}.ur"),
            bg: format!("{prefix}.bg"),
        }
    }
}

/// Register gate parameters. `zero_matrices` selects the transformer-skip
/// init (all matrices zero) used by the outer gate.
pub fn init_gate_params(
    prefix: &str,
    d: usize,
    bias: f64,
    zero_matrices: bool,
    params: &mut ParameterSet,
    rng: &mut impl Rng,
) {
    let names = GateVarNames::new(prefix);
    for name in [names.wz, names.uz, names.wg, names.ur, names.ug, names.wr] {
        let t = if zero_matrices {
            Tensor::zeros(&[d, d])
        } else {
            numerics::init::trunc_normal_scaled(&[d, d], d, rng)
        };
        params.insert(name, t);
    }
    params.insert(names.bg, Tensor::full(&[d], bias));
}

/// GRU-type gate:
///   r = sigmoid(Wr x + Ur y)
///   z = sigmoid(Wz x + Uz y - bg)
///   h = tanh(Wg x + Ug (r . y))
///   g(y, x) = (1 - z) . y + z . h
/// where y is the skip path (encoder output) and x the new output
/// (transformer output).
pub fn gru_gate_graph(
    graph: &mut Graph,
    params: &ParamVars,
    names: &GateVarNames,
    y: Var,
    x: Var,
) -> Var {
    let p = |g: &ParamVars, n: &String| g[n];
    let wz_x = graph.matmul(x, p(params, &names.wz));
    let uz_y = graph.matmul(y, p(params, &names.uz));
    let z_pre = graph.add(wz_x, uz_y);
    let neg_bg = graph.scale(p(params, &names.bg), -1.0);
    let z_pre = graph.add_row(z_pre, neg_bg);
    let z = graph.sigmoid(z_pre);

    let wr_x = graph.matmul(x, p(params, &names.wr));
    let ur_y = graph.matmul(y, p(params, &names.ur));
    let r_pre = graph.add(wr_x, ur_y);
    let r = graph.sigmoid(r_pre);

    let ry = graph.mul(r, y);
    let wg_x = graph.matmul(x, p(params, &names.wg));
    let ug_ry = graph.matmul(ry, p(params, &names.ug));
    let h_pre = graph.add(wg_x, ug_ry);
    let h = graph.tanh(h_pre);

    let zh = graph.mul(z, h);
    let ones = graph.value(z).map(|_| 1.0);
    let ones = graph.constant(ones);
    let one_minus_z = graph.sub(ones, z);
    let zy = graph.mul(one_minus_z, y);
    graph.add(zy, zh)
}

/// Tensor-level gate evaluation (the graph path with constant bindings).
pub fn gru_gate(y: &Tensor, x: &Tensor, gate: &GateParameters) -> Result<Tensor> {
    let d = y.cols();
    if x.cols() != d || x.rows() != y.rows() {
        return Err(CoberlError::Config(format!(
            "gate width mismatch: y {:?} vs x {:?}",
            y.shape(),
            x.shape()
        )));
    }
    gate.validate(d)?;
    let mut graph = Graph::new();
    let mut params = ParameterSet::new();
    let names = GateVarNames::new("gate");
    params.insert(names.wz.clone(), gate.wz.clone());
    params.insert(names.uz.clone(), gate.uz.clone());
    params.insert(names.wg.clone(), gate.wg.clone());
    params.insert(names.ug.clone(), gate.ug.clone());
    params.insert(names.wr.clone(), gate.wr.clone());
    params.insert(names.ur.clone(), gate.ur.clone());
    params.insert(names.bg.clone(), gate.bg.clone());
    let pv = bind_all_const(&mut graph, &params);
    let yv = graph.constant(y.clone());
    let xv = graph.constant(x.clone());
    let out = gru_gate_graph(&mut graph, &pv, &names, yv, xv);
    Ok(graph.value(out).clone())
}

/// Position-wise gate over aligned sequences.
pub fn combine(y_seq: &Tensor, x_seq: &Tensor, gate: &GateParameters) -> Result<Tensor> {
    if y_seq.rows() != x_seq.rows() || y_seq.cols() != x_seq.cols() {
        return Err(CoberlError::Input(format!(
            "combine length/width mismatch: {:?} vs {:?}",
            y_seq.shape(),
            x_seq.shape()
        )));
    }
    gru_gate(y_seq, x_seq, gate)
}

/// Recurrent state carried by an actor: LSTM hidden and cell plus per-layer
/// transformer memory.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub lstm_hidden: Tensor,
    pub lstm_cell: Tensor,
    pub memory: TransformerMemory,
}

impl AgentState {
    pub fn zeros(d_lstm: usize, n_layers: usize, memory_size: usize, d_model: usize) -> Self {
        AgentState {
            lstm_hidden: Tensor::zeros(&[d_lstm]),
            lstm_cell: Tensor::zeros(&[d_lstm]),
            memory: TransformerMemory::zeros(n_layers, memory_size, d_model),
        }
    }

    pub fn to_named(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert(format!("{prefix}.lstm_h"), self.lstm_hidden.clone());
        out.insert(format!("{prefix}.lstm_c"), self.lstm_cell.clone());
        out.insert(
            format!("{prefix}.mem_valid"),
            Tensor::scalar(self.memory.valid as f64),
        );
        for (i, layer) in self.memory.layers.iter().enumerate() {
            out.insert(format!("{prefix}.mem_l{i}"), layer.clone());
        }
        out
    }

    pub fn from_named(prefix: &str, named: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |k: String| {
            named
                .get(&k)
                .cloned()
                .ok_or_else(|| CoberlError::Input(format!("missing state tensor '{k}'")))
        };
        let mut layers = Vec::new();
        loop {
            match named.get(&format!("{prefix}.mem_l{}", layers.len())) {
                Some(t) => layers.push(t.clone()),
                None => break,
            }
        }
        Ok(AgentState {
            lstm_hidden: get(format!("{prefix}.lstm_h"))?,
            lstm_cell: get(format!("{prefix}.lstm_c"))?,
            memory: TransformerMemory {
                layers,
                valid: get(format!("{prefix}.mem_valid"))?.item() as usize,
            },
        })
    }
}

/// Architecture dimensions resolved from a [`RunConfig`] and an environment.
#[derive(Clone, Debug)]
pub struct NetConfig {
    pub d_model: usize,
    pub d_ar: usize,
    pub d_lstm: usize,
    pub head_hidden: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub critic_size: usize,
    pub mask_token: MaskTokenKind,
    pub use_gate: bool,
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
}

impl NetConfig {
    pub fn from_run(cfg: &RunConfig, n_actions: usize, obs_shape: [usize; 3]) -> Result<Self> {
        cfg.validate()?;
        let obs_dim = obs_shape.iter().product();
        let net = NetConfig {
            d_model: cfg.d_model,
            d_ar: cfg.d_ar,
            d_lstm: cfg.d_lstm,
            head_hidden: cfg.head_hidden,
            n_actions,
            obs_dim,
            critic_size: cfg.critic_size,
            mask_token: cfg.contrastive_mask_token.clone(),
            use_gate: cfg.use_gate,
            encoder: EncoderConfig {
                preset: cfg.encoder_preset.clone(),
                obs_dim,
                d_obs: cfg.d_obs(),
                blocks: cfg.encoder_blocks,
                group_size: cfg.group_norm_size,
            },
            transformer: TransformerConfig {
                n_layers: cfg.n_layers,
                memory_size: cfg.memory_size,
                d_model: cfg.d_model,
                n_heads: cfg.n_heads,
                d_head: cfg.attention_size,
                d_ff: cfg.transformer_ff_size,
                activation: cfg.transformer_activation.clone(),
            },
        };
        net.encoder.validate()?;
        net.transformer.validate()?;
        Ok(net)
    }

    pub fn fresh_state(&self) -> AgentState {
        AgentState::zeros(
            self.d_lstm,
            self.transformer.n_layers,
            self.transformer.memory_size,
            self.d_model,
        )
    }

    /// Initialize every parameter of the network.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParameterSet {
        let mut params = ParameterSet::new();
        encoder::init_encoder_params(&self.encoder, "enc", &mut params, rng);
        // previous action/reward embedding: [one-hot(a) || r] -> d_ar
        params.insert(
            "ar.w",
            numerics::init::trunc_normal_scaled(
                &[self.n_actions + 1, self.d_ar],
                self.n_actions + 1,
                rng,
            ),
        );
        params.insert("ar.b", Tensor::zeros(&[self.d_ar]));
        gtrxl::init_gtrxl_params(&self.transformer, "gtrxl", &mut params, rng);
        // outer gate: zero matrices, bias 2 -> the head starts as the
        // encoder/LSTM path and ignores the transformer until warmed up
        init_gate_params("gate", self.d_model, 2.0, true, &mut params, rng);
        // LSTM, gates ordered [i, f, g, o], forget bias 1
        params.insert(
            "lstm.wx",
            numerics::init::trunc_normal_scaled(&[self.d_model, 4 * self.d_lstm], self.d_model, rng),
        );
        params.insert(
            "lstm.wh",
            numerics::init::trunc_normal_scaled(&[self.d_lstm, 4 * self.d_lstm], self.d_lstm, rng),
        );
        let mut lstm_b = Tensor::zeros(&[4 * self.d_lstm]);
        for i in self.d_lstm..2 * self.d_lstm {
            lstm_b.data_mut()[i] = 1.0;
        }
        params.insert("lstm.b", lstm_b);
        // dueling head
        let head_in = self.d_lstm + self.d_model;
        params.insert(
            "head.w1",
            numerics::init::trunc_normal_scaled(&[head_in, self.head_hidden], head_in, rng),
        );
        params.insert("head.b1", Tensor::zeros(&[self.head_hidden]));
        params.insert(
            "head.adv_w",
            numerics::init::trunc_normal_scaled(
                &[self.head_hidden, self.n_actions],
                self.head_hidden,
                rng,
            ),
        );
        params.insert("head.adv_b", Tensor::zeros(&[self.n_actions]));
        params.insert(
            "head.val_w",
            numerics::init::trunc_normal_scaled(&[self.head_hidden, 1], self.head_hidden, rng),
        );
        params.insert("head.val_b", Tensor::zeros(&[1]));
        // contrastive critic and mask token
        params.insert(
            "critic.w",
            numerics::init::trunc_normal_scaled(&[self.d_model, self.critic_size], self.d_model, rng),
        );
        params.insert("critic.b", Tensor::zeros(&[self.critic_size]));
        if self.mask_token == MaskTokenKind::Trainable {
            params.insert(
                "mask_token",
                numerics::init::trunc_normal_scaled(&[self.d_model], self.d_model, rng),
            );
        }
        params
    }

    /// The mask-token embedding as a plain tensor.
    pub fn mask_token_value(&self, params: &ParameterSet) -> Tensor {
        match self.mask_token {
            MaskTokenKind::Trainable => params
                .get("mask_token")
                .cloned()
                .expect("trainable mask token registered"),
            MaskTokenKind::Zero => Tensor::zeros(&[self.d_model]),
        }
    }
}

/// One LSTM step over a `[B, d_model]` input with `[B, d_lstm]` state.
pub fn lstm_step(
    graph: &mut Graph,
    params: &ParamVars,
    x: Var,
    h: Var,
    c: Var,
    d_lstm: usize,
) -> (Var, Var) {
    let zx = graph.matmul(x, params["lstm.wx"]);
    let zh = graph.matmul(h, params["lstm.wh"]);
    let z = graph.add(zx, zh);
    let z = graph.add_row(z, params["lstm.b"]);
    let i = graph.slice_cols(z, 0, d_lstm);
    let f = graph.slice_cols(z, d_lstm, d_lstm);
    let g_ = graph.slice_cols(z, 2 * d_lstm, d_lstm);
    let o = graph.slice_cols(z, 3 * d_lstm, d_lstm);
    let i = graph.sigmoid(i);
    let f = graph.sigmoid(f);
    let g_ = graph.tanh(g_);
    let o = graph.sigmoid(o);
    let fc = graph.mul(f, c);
    let ig = graph.mul(i, g_);
    let c_new = graph.add(fc, ig);
    let tc = graph.tanh(c_new);
    let h_new = graph.mul(o, tc);
    (h_new, c_new)
}

/// Unroll the LSTM over `B` sequences of length `T` stored sequence-major
/// (`[B*T, d_model]`, rows of sequence i at `i*T..(i+1)*T`). Initial states
/// are `[B, d_lstm]` constants. Returns sequence-major outputs plus final
/// hidden/cell values.
pub fn lstm_unroll(
    graph: &mut Graph,
    params: &ParamVars,
    input: Var,
    batch: usize,
    t_len: usize,
    h0: Tensor,
    c0: Tensor,
    d_lstm: usize,
) -> (Var, Tensor, Tensor) {
    let mut h = graph.constant(h0);
    let mut c = graph.constant(c0);
    let mut outputs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let idx: Vec<usize> = (0..batch).map(|i| i * t_len + t).collect();
        let x_t = graph.gather_rows(input, idx);
        let (h_new, c_new) = lstm_step(graph, params, x_t, h, c, d_lstm);
        h = h_new;
        c = c_new;
        outputs.push(h);
    }
    // stack time-major then permute back to sequence-major
    let stacked = graph.concat_rows(&outputs);
    let perm: Vec<usize> = (0..batch)
        .flat_map(|i| (0..t_len).map(move |t| t * batch + i))
        .collect();
    let seq_major = graph.gather_rows(stacked, perm);
    let h_final = graph.value(h).clone();
    let c_final = graph.value(c).clone();
    (seq_major, h_final, c_final)
}

/// Dueling head: shared hidden layer with ReLU, then `Q = V + A - mean(A)`.
pub fn dueling_q_graph(graph: &mut Graph, params: &ParamVars, output: Var) -> Var {
    let h = graph.linear(output, params["head.w1"], params["head.b1"]);
    let h = graph.relu(h);
    let adv = graph.linear(h, params["head.adv_w"], params["head.adv_b"]);
    let val = graph.linear(h, params["head.val_w"], params["head.val_b"]);
    let centered = graph.sub_row_mean(adv);
    graph.add_col(centered, val)
}

/// Tensor-level dueling combination from explicit value/advantage streams.
pub fn dueling_q(value: f64, advantages: &Tensor) -> Tensor {
    let mean = advantages.data().iter().sum::<f64>() / advantages.len() as f64;
    advantages.map(|a| value + a - mean)
}

/// Spec-level head unroll for a single sequence: LSTM over Z with carried
/// state, output `[lstm_out_t || Y_t]`.
pub fn unroll_head(
    z_seq: &Tensor,
    y_seq: &Tensor,
    state: &AgentState,
    params: &ParameterSet,
    d_lstm: usize,
) -> Result<(Tensor, AgentState)> {
    if z_seq.rows() != y_seq.rows() {
        return Err(CoberlError::Input("Z/Y length mismatch".into()));
    }
    if state.lstm_hidden.len() != d_lstm {
        return Err(CoberlError::Config(format!(
            "state width {} != d_lstm {d_lstm}",
            state.lstm_hidden.len()
        )));
    }
    let mut graph = Graph::new();
    let pv = bind_all_const(&mut graph, params);
    let z = graph.constant(z_seq.clone());
    let t_len = z_seq.rows();
    let h0 = state.lstm_hidden.clone().reshape(vec![1, d_lstm])?;
    let c0 = state.lstm_cell.clone().reshape(vec![1, d_lstm])?;
    let (out, h_f, c_f) = lstm_unroll(&mut graph, &pv, z, 1, t_len, h0, c0, d_lstm);
    let y = graph.constant(y_seq.clone());
    let cat = graph.concat_cols(&[out, y]);
    let result = graph.value(cat).clone();
    Ok((
        result,
        AgentState {
            lstm_hidden: h_f.reshape(vec![d_lstm])?,
            lstm_cell: c_f.reshape(vec![d_lstm])?,
            memory: state.memory.clone(),
        },
    ))
}
