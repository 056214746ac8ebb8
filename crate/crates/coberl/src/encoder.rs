//! Observation encoder: maps raw observations plus previous action/reward
//! into the per-step embedding fed to the transformer.

use numerics::{Graph, ParameterSet, Tensor, Var};
use rand::Rng;

use crate::config::EncoderPreset;
use crate::error::{CoberlError, Result};
use crate::model::ParamVars;

/// Width of the residual stack and the MLP head of the full-size preset.
const PAPER_STACK_WIDTH: usize = 512;

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub preset: EncoderPreset,
    pub obs_dim: usize,
    /// output width, `d_model - d_ar`
    pub d_obs: usize,
    pub blocks: usize,
    pub group_size: usize,
}

impl EncoderConfig {
    /// Working width of the residual stack.
    pub fn stack_width(&self) -> usize {
        match self.preset {
            EncoderPreset::Paper => PAPER_STACK_WIDTH,
            _ => self.d_obs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.d_obs == 0 {
            return Err(CoberlError::Config("encoder widths must be positive".into()));
        }
        match self.preset {
            EncoderPreset::Flat => Ok(()),
            _ => {
                if self.stack_width() % self.group_size != 0 {
                    Err(CoberlError::Config(format!(
                        "encoder width {} not divisible by group size {}",
                        self.stack_width(),
                        self.group_size
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

pub fn init_encoder_params(
    cfg: &EncoderConfig,
    prefix: &str,
    params: &mut ParameterSet,
    rng: &mut impl Rng,
) {
    match cfg.preset {
        EncoderPreset::Flat => {
            params.insert(
                format!("{prefix}.w"),
                numerics::init::trunc_normal_scaled(&[cfg.obs_dim, cfg.d_obs], cfg.obs_dim, rng),
            );
            params.insert(format!("{prefix}.b"), Tensor::zeros(&[cfg.d_obs]));
        }
        EncoderPreset::Desk | EncoderPreset::Paper => {
            let w = cfg.stack_width();
            params.insert(
                format!("{prefix}.w0"),
                numerics::init::trunc_normal_scaled(&[cfg.obs_dim, w], cfg.obs_dim, rng),
            );
            params.insert(format!("{prefix}.b0"), Tensor::zeros(&[w]));
            for i in 0..cfg.blocks {
                let p = format!("{prefix}.block{i}");
                params.insert(
                    format!("{p}.w1"),
                    numerics::init::trunc_normal_scaled(&[w, w], w, rng),
                );
                params.insert(format!("{p}.b1"), Tensor::zeros(&[w]));
                params.insert(format!("{p}.gn_g"), Tensor::full(&[w], 1.0));
                params.insert(format!("{p}.gn_b"), Tensor::zeros(&[w]));
                params.insert(
                    format!("{p}.w2"),
                    numerics::init::trunc_normal_scaled(&[w, w], w, rng),
                );
                params.insert(format!("{p}.b2"), Tensor::zeros(&[w]));
            }
            match cfg.preset {
                EncoderPreset::Desk => {
                    // single final projection
                    params.insert(
                        format!("{prefix}.wf"),
                        numerics::init::trunc_normal_scaled(&[w, cfg.d_obs], w, rng),
                    );
                    params.insert(format!("{prefix}.bf"), Tensor::zeros(&[cfg.d_obs]));
                }
                EncoderPreset::Paper => {
                    // two-layer ReLU MLP head
                    params.insert(
                        format!("{prefix}.wf1"),
                        numerics::init::trunc_normal_scaled(&[w, PAPER_STACK_WIDTH], w, rng),
                    );
                    params.insert(format!("{prefix}.bf1"), Tensor::zeros(&[PAPER_STACK_WIDTH]));
                    params.insert(
                        format!("{prefix}.wf2"),
                        numerics::init::trunc_normal_scaled(
                            &[PAPER_STACK_WIDTH, cfg.d_obs],
                            PAPER_STACK_WIDTH,
                            rng,
                        ),
                    );
                    params.insert(format!("{prefix}.bf2"), Tensor::zeros(&[cfg.d_obs]));
                }
                EncoderPreset::Flat => unreachable!(),
            }
        }
    }
}

/// Encode flattened observations `[N, obs_dim]` into features `[N, d_obs]`.
pub fn encode_observations(
    graph: &mut Graph,
    params: &ParamVars,
    prefix: &str,
    cfg: &EncoderConfig,
    obs: Var,
) -> Result<Var> {
    if graph.value(obs).cols() != cfg.obs_dim {
        return Err(CoberlError::Config(format!(
            "observation width {} != configured {}",
            graph.value(obs).cols(),
            cfg.obs_dim
        )));
    }
    let p = |name: &str| params[&format!("{prefix}.{name}")];
    match cfg.preset {
        EncoderPreset::Flat => Ok(graph.linear(obs, p("w"), p("b"))),
        EncoderPreset::Desk | EncoderPreset::Paper => {
            let mut h = graph.linear(obs, p("w0"), p("b0"));
            for i in 0..cfg.blocks {
                let bp = |name: &str| params[&format!("{prefix}.block{i}.{name}")];
                let t = graph.linear(h, bp("w1"), bp("b1"));
                let t = graph.group_norm(t, bp("gn_g"), bp("gn_b"), cfg.group_size, 1e-6);
                let t = graph.relu(t);
                let t = graph.linear(t, bp("w2"), bp("b2"));
                h = graph.add(h, t);
            }
            match cfg.preset {
                EncoderPreset::Desk => Ok(graph.linear(h, p("wf"), p("bf"))),
                EncoderPreset::Paper => {
                    let h = graph.linear(h, p("wf1"), p("bf1"));
                    let h = graph.relu(h);
                    Ok(graph.linear(h, p("wf2"), p("bf2")))
                }
                EncoderPreset::Flat => unreachable!(),
            }
        }
    }
}

/// Build the `[one-hot(action) || reward]` rows fed to the action/reward
/// projection. An out-of-range action id is an input error.
pub fn action_reward_rows(
    prev_actions: &[usize],
    prev_rewards: &[f64],
    n_actions: usize,
) -> Result<Tensor> {
    if prev_actions.len() != prev_rewards.len() {
        return Err(CoberlError::Input(
            "action/reward length mismatch".into(),
        ));
    }
    let n = prev_actions.len();
    let width = n_actions + 1;
    let mut out = Tensor::zeros(&[n, width]);
    for (i, (&a, &r)) in prev_actions.iter().zip(prev_rewards).enumerate() {
        if a >= n_actions {
            return Err(CoberlError::Input(format!(
                "action id {a} out of range ({n_actions} actions)"
            )));
        }
        out.data_mut()[i * width + a] = 1.0;
        out.data_mut()[i * width + n_actions] = r;
    }
    Ok(out)
}

/// Project previous action/reward into the `d_ar`-wide embedding.
pub fn embed_action_reward(graph: &mut Graph, params: &ParamVars, ar_rows: Var) -> Var {
    graph.linear(ar_rows, params["ar.w"], params["ar.b"])
}

/// Full per-step input embedding: `[encode(obs) || ar_embed]`, width d_model.
pub fn build_input_embedding(
    graph: &mut Graph,
    params: &ParamVars,
    cfg: &EncoderConfig,
    obs: Var,
    ar_rows: Var,
) -> Result<Var> {
    let features = encode_observations(graph, params, "enc", cfg, obs)?;
    let ar = embed_action_reward(graph, params, ar_rows);
    Ok(graph.concat_cols(&[features, ar]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::bind_all;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_cfg() -> EncoderConfig {
        EncoderConfig {
            preset: EncoderPreset::Desk,
            obs_dim: 75,
            d_obs: 48,
            blocks: 2,
            group_size: 8,
        }
    }

    fn run_encoder(cfg: &EncoderConfig, obs: Tensor, params: &ParameterSet) -> Tensor {
        let mut g = Graph::new();
        let pv = bind_all(&mut g, params);
        let o = g.constant(obs);
        let out = encode_observations(&mut g, &pv, "enc", cfg, o).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn desk_config_output_width_48() {
        let cfg = desk_cfg();
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_encoder_params(&cfg, "enc", &mut params, &mut rng);
        let obs = Tensor::full(&[2, 75], 0.3);
        let out = run_encoder(&cfg, obs, &params);
        assert_eq!(out.shape(), &[2, 48]);
    }

    #[test]
    fn zero_observation_with_zero_final_layer_gives_zero() {
        let cfg = desk_cfg();
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_encoder_params(&cfg, "enc", &mut params, &mut rng);
        *params.get_mut("enc.wf").unwrap() = Tensor::zeros(&[48, 48]);
        *params.get_mut("enc.bf").unwrap() = Tensor::zeros(&[48]);
        let out = run_encoder(&cfg, Tensor::zeros(&[1, 75]), &params);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_preset_width_448() {
        let cfg = EncoderConfig {
            preset: EncoderPreset::Paper,
            obs_dim: 75,
            d_obs: 448, // d_model 512, d_ar 64
            blocks: 2,
            group_size: 8,
        };
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_encoder_params(&cfg, "enc", &mut params, &mut rng);
        // MLP head sizes (512, 448)
        assert_eq!(params.get("enc.wf1").unwrap().shape(), &[512, 512]);
        assert_eq!(params.get("enc.wf2").unwrap().shape(), &[512, 448]);
        let out = run_encoder(&cfg, Tensor::full(&[1, 75], 0.1), &params);
        assert_eq!(out.shape(), &[1, 448]);
    }

    #[test]
    fn encoding_deterministic() {
        let cfg = desk_cfg();
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        init_encoder_params(&cfg, "enc", &mut params, &mut rng);
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let obs = Tensor::new(
            vec![3, 75],
            (0..225).map(|_| rng2.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let a = run_encoder(&cfg, obs.clone(), &params);
        let b = run_encoder(&cfg, obs, &params);
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let cfg = desk_cfg();
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        init_encoder_params(&cfg, "enc", &mut params, &mut rng);
        let mut g = Graph::new();
        let pv = bind_all(&mut g, &params);
        let obs = g.constant(Tensor::zeros(&[1, 10]));
        assert!(encode_observations(&mut g, &pv, "enc", &cfg, obs).is_err());
    }

    #[test]
    fn action_reward_rows_layout() {
        // episode start: a=0, r=0 -> [1, 0, .., 0, 0]
        let rows = action_reward_rows(&[0], &[0.0], 4).unwrap();
        assert_eq!(rows.data(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        let rows = action_reward_rows(&[2], &[-1.5], 4).unwrap();
        assert_eq!(rows.data(), &[0.0, 0.0, 1.0, 0.0, -1.5]);
        assert!(action_reward_rows(&[4], &[0.0], 4).is_err());
    }

    #[test]
    fn zero_projection_gives_zero_ar_embedding() {
        let mut params = ParameterSet::new();
        params.insert("ar.w", Tensor::zeros(&[5, 8]));
        params.insert("ar.b", Tensor::zeros(&[8]));
        let mut g = Graph::new();
        let pv = bind_all(&mut g, &params);
        let rows = g.constant(action_reward_rows(&[1, 3], &[0.5, -0.5], 4).unwrap());
        let out = embed_action_reward(&mut g, &pv, rows);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ar_embeddings_differ_iff_projection_columns_differ() {
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        params.insert(
            "ar.w",
            numerics::init::trunc_normal_scaled(&[5, 8], 5, &mut rng),
        );
        params.insert("ar.b", Tensor::zeros(&[8]));
        let mut g = Graph::new();
        let pv = bind_all(&mut g, &params);
        let rows = g.constant(action_reward_rows(&[0, 1], &[0.7, 0.7], 4).unwrap());
        let out = embed_action_reward(&mut g, &pv, rows);
        let v = g.value(out);
        let row0 = &v.data()[..8];
        let row1 = &v.data()[8..];
        assert_ne!(row0, row1, "distinct actions with random projections must differ");
        // equal projection columns for the two actions -> identical outputs
        let mut w = params.get("ar.w").unwrap().clone();
        for j in 0..8 {
            let first = w.data()[j];
            w.data_mut()[8 + j] = first;
        }
        let mut p2 = ParameterSet::new();
        p2.insert("ar.w", w);
        p2.insert("ar.b", Tensor::zeros(&[8]));
        let mut g2 = Graph::new();
        let pv2 = bind_all(&mut g2, &p2);
        let rows2 = g2.constant(action_reward_rows(&[0, 1], &[0.7, 0.7], 4).unwrap());
        let out2 = embed_action_reward(&mut g2, &pv2, rows2);
        let v2 = g2.value(out2);
        assert_eq!(&v2.data()[..8], &v2.data()[8..]);
    }

    #[test]
    fn full_embedding_width_is_d_model() {
        let cfg = desk_cfg();
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        init_encoder_params(&cfg, "enc", &mut params, &mut rng);
        params.insert(
            "ar.w",
            numerics::init::trunc_normal_scaled(&[5, 16], 5, &mut rng),
        );
        params.insert("ar.b", Tensor::zeros(&[16]));
        let mut g = Graph::new();
        let pv = bind_all(&mut g, &params);
        let obs = g.constant(Tensor::full(&[2, 75], 0.2));
        let ar = g.constant(action_reward_rows(&[0, 1], &[0.0, 1.0], 4).unwrap());
        let y = build_input_embedding(&mut g, &pv, &cfg, obs, ar).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 64]); // 48 + 16
    }
}
