//! Run configuration: a flat `key = value` text format. Every hyperparameter
//! table row has a key; defaults are the published full-scale values, and the
//! desk presets override them in the shipped config files.

use crate::error::{CoberlError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ValueTransformKind {
    SignedSqrt,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TargetPolicy {
    Max,
    EpsGreedy,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderPreset {
    Desk,
    Paper,
    Flat,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskTokenKind {
    Trainable,
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransformerActivation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // optimizer
    pub optimizer: String,
    pub learning_rate: f64,
    pub adam_epsilon: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_clip_norm: f64,
    // rl loss
    pub q_lambda: f64,
    pub q_value_transform: ValueTransformKind,
    pub value_transform_epsilon: f64,
    pub discount_factor: f64,
    pub rl_target_policy: TargetPolicy,
    pub target_epsilon: f64,
    // replay
    pub batch_size: usize,
    pub trace_length: usize,
    pub replay_period: usize,
    pub replay_capacity: usize,
    pub replay_priority_exponent: f64,
    pub replay_sampling_exponent: f64,
    pub importance_sampling_exponent: f64,
    pub min_sequences_to_start: usize,
    // learner / harness
    pub target_update_period: usize,
    pub burn_in: Option<usize>,
    pub snapshot_publish_interval: usize,
    pub learner_period: usize,
    pub total_env_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub evaluation_epsilon: f64,
    pub metrics_log_every: usize,
    pub num_actors: usize,
    pub epsilon_base: f64,
    pub epsilon_alpha: f64,
    pub seed: u64,
    // architecture
    pub d_model: usize,
    pub d_ar: usize,
    pub d_lstm: usize,
    pub head_hidden: usize,
    pub n_layers: usize,
    pub memory_size: usize,
    pub n_heads: usize,
    pub attention_size: usize,
    pub transformer_ff_size: usize,
    pub transformer_activation: TransformerActivation,
    pub encoder_preset: EncoderPreset,
    pub encoder_blocks: usize,
    pub group_norm_size: usize,
    pub use_gate: bool,
    // contrastive
    pub contrastive_loss_weight: f64,
    pub contrastive_mask_rate: f64,
    pub contrastive_kl_weight: f64,
    pub contrastive_mask_token: MaskTokenKind,
    pub critic_size: usize,
    pub rl_pass_masked: bool,
    // environment
    pub env_id: String,
    pub env_horizon: usize,
    pub env_cues: usize,
    pub env_noise: f64,
    pub bandit_payouts: Vec<f64>,
}

impl Default for RunConfig {
    /// Published full-scale defaults (Atari rows where the tables differ).
    fn default() -> Self {
        RunConfig {
            optimizer: "adam".into(),
            learning_rate: 0.0003,
            adam_epsilon: 1e-7,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_clip_norm: 40.0,
            q_lambda: 0.8,
            q_value_transform: ValueTransformKind::SignedSqrt,
            value_transform_epsilon: 1e-3,
            discount_factor: 0.997,
            rl_target_policy: TargetPolicy::Max,
            target_epsilon: 0.01,
            batch_size: 32,
            trace_length: 80,
            replay_period: 40,
            replay_capacity: 80_000,
            replay_priority_exponent: 0.9,
            replay_sampling_exponent: 1.0,
            importance_sampling_exponent: 0.6,
            min_sequences_to_start: 5000,
            target_update_period: 400,
            burn_in: None,
            snapshot_publish_interval: 10,
            learner_period: 16,
            total_env_steps: 200_000,
            eval_every: 2000,
            eval_episodes: 5,
            evaluation_epsilon: 0.01,
            metrics_log_every: 500,
            num_actors: 512,
            epsilon_base: 0.4,
            epsilon_alpha: 7.0,
            seed: 0,
            d_model: 512,
            d_ar: 64,
            d_lstm: 512,
            head_hidden: 512,
            n_layers: 8,
            memory_size: 64,
            n_heads: 8,
            attention_size: 64,
            transformer_ff_size: 512,
            transformer_activation: TransformerActivation::Gelu,
            encoder_preset: EncoderPreset::Paper,
            encoder_blocks: 2,
            group_norm_size: 8,
            use_gate: true,
            contrastive_loss_weight: 1.0,
            contrastive_mask_rate: 0.15,
            contrastive_kl_weight: 1.0,
            contrastive_mask_token: MaskTokenKind::Trainable,
            critic_size: 512,
            rl_pass_masked: true,
            env_id: "cue_recall".into(),
            env_horizon: 12,
            env_cues: 4,
            env_noise: 0.25,
            bandit_payouts: vec![0.0, 1.0],
        }
    }
}

impl RunConfig {
    /// Desk-scale preset used by the test and example configs.
    pub fn desk() -> Self {
        RunConfig {
            d_model: 64,
            d_ar: 16,
            d_lstm: 64,
            head_hidden: 64,
            n_layers: 2,
            memory_size: 8,
            n_heads: 2,
            attention_size: 32,
            transformer_ff_size: 128,
            encoder_preset: EncoderPreset::Desk,
            critic_size: 32,
            batch_size: 16,
            trace_length: 8,
            replay_period: 4,
            replay_capacity: 512,
            min_sequences_to_start: 32,
            ..Default::default()
        }
    }

    /// Width of the observation encoding: `d_model - d_ar`.
    pub fn d_obs(&self) -> usize {
        self.d_model - self.d_ar
    }

    pub fn burn_in_len(&self) -> usize {
        self.burn_in.unwrap_or(self.replay_period.min(
            self.trace_length.saturating_sub(1),
        ))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CoberlError::Config(m));
        if self.optimizer != "adam" {
            return err(format!("unsupported optimizer '{}'", self.optimizer));
        }
        if self.d_ar >= self.d_model {
            return err(format!(
                "d_ar {} must be smaller than d_model {}",
                self.d_ar, self.d_model
            ));
        }
        if self.burn_in_len() >= self.trace_length {
            return err(format!(
                "burn_in {} must be smaller than trace_length {}",
                self.burn_in_len(),
                self.trace_length
            ));
        }
        if !(self.contrastive_mask_rate > 0.0 && self.contrastive_mask_rate <= 1.0) {
            return err(format!(
                "contrastive_mask_rate {} outside (0, 1]",
                self.contrastive_mask_rate
            ));
        }
        if self.replay_period == 0
            || self.trace_length == 0
            || self.target_update_period == 0
            || self.learner_period == 0
            || self.snapshot_publish_interval == 0
        {
            return err("all periods must be >= 1".into());
        }
        if self.num_actors == 0 {
            return err("num_actors must be >= 1".into());
        }
        if self.adam_clip_norm <= 0.0 {
            return err("adam_clip_norm must be positive".into());
        }
        if self.n_heads == 0 || self.attention_size == 0 {
            return err("attention dims must be positive".into());
        }
        if self.value_transform_epsilon <= 0.0
            && self.q_value_transform == ValueTransformKind::SignedSqrt
        {
            return err("value_transform_epsilon must be positive for signed_sqrt".into());
        }
        match self.encoder_preset {
            EncoderPreset::Desk | EncoderPreset::Paper => {
                if self.d_obs() % self.group_norm_size != 0 {
                    return err(format!(
                        "encoder width {} not divisible by group_norm_size {}",
                        self.d_obs(),
                        self.group_norm_size
                    ));
                }
            }
            EncoderPreset::Flat => {}
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CoberlError::Config(format!(
                    "line {}: expected key = value, got '{raw}'",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim()).map_err(|e| {
                CoberlError::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fer(key, value, self)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv = |k: &str, v: String| format!("{k} = {v}\n");
        s += &kv("optimizer", self.optimizer.clone());
        s += &kv("learning_rate", self.learning_rate.to_string());
        s += &kv("adam_epsilon", self.adam_epsilon.to_string());
        s += &kv("adam_beta1", self.adam_beta1.to_string());
        s += &kv("adam_beta2", self.adam_beta2.to_string());
        s += &kv("adam_clip_norm", self.adam_clip_norm.to_string());
        s += &kv("q_lambda", self.q_lambda.to_string());
        s += &kv(
            "q_value_transform",
            match self.q_value_transform {
                ValueTransformKind::SignedSqrt => "signed_sqrt".into(),
                ValueTransformKind::Identity => "identity".into(),
            },
        );
        s += &kv(
            "value_transform_epsilon",
            self.value_transform_epsilon.to_string(),
        );
        s += &kv("discount_factor", self.discount_factor.to_string());
        s += &kv(
            "rl_target_policy",
            match self.rl_target_policy {
                TargetPolicy::Max => "max".into(),
                TargetPolicy::EpsGreedy => "eps_greedy".into(),
            },
        );
        s += &kv("target_epsilon", self.target_epsilon.to_string());
        s += &kv("batch_size", self.batch_size.to_string());
        s += &kv("trace_length", self.trace_length.to_string());
        s += &kv("replay_period", self.replay_period.to_string());
        s += &kv("replay_capacity", self.replay_capacity.to_string());
        s += &kv(
            "replay_priority_exponent",
            self.replay_priority_exponent.to_string(),
        );
        s += &kv(
            "replay_sampling_exponent",
            self.replay_sampling_exponent.to_string(),
        );
        s += &kv(
            "importance_sampling_exponent",
            self.importance_sampling_exponent.to_string(),
        );
        s += &kv(
            "min_sequences_to_start",
            self.min_sequences_to_start.to_string(),
        );
        s += &kv("target_update_period", self.target_update_period.to_string());
        if let Some(b) = self.burn_in {
            s += &kv("burn_in", b.to_string());
        }
        s += &kv(
            "snapshot_publish_interval",
            self.snapshot_publish_interval.to_string(),
        );
        s += &kv("learner_period", self.learner_period.to_string());
        s += &kv("total_env_steps", self.total_env_steps.to_string());
        s += &kv("eval_every", self.eval_every.to_string());
        s += &kv("eval_episodes", self.eval_episodes.to_string());
        s += &kv("evaluation_epsilon", self.evaluation_epsilon.to_string());
        s += &kv("metrics_log_every", self.metrics_log_every.to_string());
        s += &kv("num_actors", self.num_actors.to_string());
        s += &kv("epsilon_base", self.epsilon_base.to_string());
        s += &kv("epsilon_alpha", self.epsilon_alpha.to_string());
        s += &kv("seed", self.seed.to_string());
        s += &kv("d_model", self.d_model.to_string());
        s += &kv("d_ar", self.d_ar.to_string());
        s += &kv("d_lstm", self.d_lstm.to_string());
        s += &kv("head_hidden", self.head_hidden.to_string());
        s += &kv("n_layers", self.n_layers.to_string());
        s += &kv("memory_size", self.memory_size.to_string());
        s += &kv("n_heads", self.n_heads.to_string());
        s += &kv("attention_size", self.attention_size.to_string());
        s += &kv("transformer_ff_size", self.transformer_ff_size.to_string());
        s += &kv(
            "transformer_activation",
            match self.transformer_activation {
                TransformerActivation::Gelu => "gelu".into(),
                TransformerActivation::Relu => "relu".into(),
            },
        );
        s += &kv(
            "encoder_preset",
            match self.encoder_preset {
                EncoderPreset::Desk => "desk".into(),
                EncoderPreset::Paper => "paper".into(),
                EncoderPreset::Flat => "flat".into(),
            },
        );
        s += &kv("encoder_blocks", self.encoder_blocks.to_string());
        s += &kv("group_norm_size", self.group_norm_size.to_string());
        s += &kv("use_gate", self.use_gate.to_string());
        s += &kv(
            "contrastive_loss_weight",
            self.contrastive_loss_weight.to_string(),
        );
        s += &kv(
            "contrastive_mask_rate",
            self.contrastive_mask_rate.to_string(),
        );
        s += &kv("contrastive_kl_weight", self.contrastive_kl_weight.to_string());
        s += &kv(
            "contrastive_mask_token",
            match self.contrastive_mask_token {
                MaskTokenKind::Trainable => "trainable".into(),
                MaskTokenKind::Zero => "zero".into(),
            },
        );
        s += &kv("critic_size", self.critic_size.to_string());
        s += &kv("rl_pass_masked", self.rl_pass_masked.to_string());
        s += &kv("env_id", self.env_id.clone());
        s += &kv("env_horizon", self.env_horizon.to_string());
        s += &kv("env_cues", self.env_cues.to_string());
        s += &kv("env_noise", self.env_noise.to_string());
        s += &kv(
            "bandit_payouts",
            self.bandit_payouts
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        s
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CoberlError::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn fer(key: &str, value: &str, c: &mut RunConfig) -> Result<()> {
    match key {
        "optimizer" => c.optimizer = value.to_string(),
        "learning_rate" => c.learning_rate = parse(key, value)?,
        "adam_epsilon" => c.adam_epsilon = parse(key, value)?,
        "adam_beta1" => c.adam_beta1 = parse(key, value)?,
        "adam_beta2" => c.adam_beta2 = parse(key, value)?,
        "adam_clip_norm" => c.adam_clip_norm = parse(key, value)?,
        "q_lambda" => c.q_lambda = parse(key, value)?,
        "q_value_transform" => {
            c.q_value_transform = match value {
                "signed_sqrt" => ValueTransformKind::SignedSqrt,
                "identity" => ValueTransformKind::Identity,
                _ => {
                    return Err(CoberlError::Config(format!(
                        "unknown q_value_transform '{value}'"
                    )))
                }
            }
        }
        "value_transform_epsilon" => c.value_transform_epsilon = parse(key, value)?,
        "discount_factor" => c.discount_factor = parse(key, value)?,
        "rl_target_policy" => {
            c.rl_target_policy = match value {
                "max" => TargetPolicy::Max,
                "eps_greedy" => TargetPolicy::EpsGreedy,
                _ => {
                    return Err(CoberlError::Config(format!(
                        "unknown rl_target_policy '{value}'"
                    )))
                }
            }
        }
        "target_epsilon" => c.target_epsilon = parse(key, value)?,
        "batch_size" => c.batch_size = parse(key, value)?,
        "trace_length" => c.trace_length = parse(key, value)?,
        "replay_period" => c.replay_period = parse(key, value)?,
        "replay_capacity" => c.replay_capacity = parse(key, value)?,
        "replay_priority_exponent" => c.replay_priority_exponent = parse(key, value)?,
        "replay_sampling_exponent" => c.replay_sampling_exponent = parse(key, value)?,
        "importance_sampling_exponent" => c.importance_sampling_exponent = parse(key, value)?,
        "min_sequences_to_start" => c.min_sequences_to_start = parse(key, value)?,
        "target_update_period" => c.target_update_period = parse(key, value)?,
        "burn_in" => c.burn_in = Some(parse(key, value)?),
        "snapshot_publish_interval" => c.snapshot_publish_interval = parse(key, value)?,
        "learner_period" => c.learner_period = parse(key, value)?,
        "total_env_steps" => c.total_env_steps = parse(key, value)?,
        "eval_every" => c.eval_every = parse(key, value)?,
        "eval_episodes" => c.eval_episodes = parse(key, value)?,
        "evaluation_epsilon" => c.evaluation_epsilon = parse(key, value)?,
        "metrics_log_every" => c.metrics_log_every = parse(key, value)?,
        "num_actors" => c.num_actors = parse(key, value)?,
        "epsilon_base" => c.epsilon_base = parse(key, value)?,
        "epsilon_alpha" => c.epsilon_alpha = parse(key, value)?,
        "seed" => c.seed = parse(key, value)?,
        "d_model" => c.d_model = parse(key, value)?,
        "d_ar" => c.d_ar = parse(key, value)?,
        "d_lstm" => c.d_lstm = parse(key, value)?,
        "head_hidden" => c.head_hidden = parse(key, value)?,
        "n_layers" => c.n_layers = parse(key, value)?,
        "memory_size" => c.memory_size = parse(key, value)?,
        "n_heads" => c.n_heads = parse(key, value)?,
        "attention_size" => c.attention_size = parse(key, value)?,
        "transformer_ff_size" => c.transformer_ff_size = parse(key, value)?,
        "transformer_activation" => {
            c.transformer_activation = match value {
                "gelu" => TransformerActivation::Gelu,
                "relu" => TransformerActivation::Relu,
                _ => {
                    return Err(CoberlError::Config(format!(
                        "unknown transformer_activation '{value}'"
                    )))
                }
            }
        }
        "encoder_preset" => {
            c.encoder_preset = match value {
                "desk" => EncoderPreset::Desk,
                "paper" => EncoderPreset::Paper,
                "flat" => EncoderPreset::Flat,
                _ => {
                    return Err(CoberlError::Config(format!(
                        "unknown encoder_preset '{value}'"
                    )))
                }
            }
        }
        "encoder_blocks" => c.encoder_blocks = parse(key, value)?,
        "group_norm_size" => c.group_norm_size = parse(key, value)?,
        "use_gate" => c.use_gate = parse(key, value)?,
        "contrastive_loss_weight" => c.contrastive_loss_weight = parse(key, value)?,
        "contrastive_mask_rate" => c.contrastive_mask_rate = parse(key, value)?,
        "contrastive_kl_weight" => c.contrastive_kl_weight = parse(key, value)?,
        "contrastive_mask_token" => {
            c.contrastive_mask_token = match value {
                "trainable" => MaskTokenKind::Trainable,
                "zero" => MaskTokenKind::Zero,
                _ => {
                    return Err(CoberlError::Config(format!(
                        "unknown contrastive_mask_token '{value}'"
                    )))
                }
            }
        }
        "critic_size" => c.critic_size = parse(key, value)?,
        "rl_pass_masked" => c.rl_pass_masked = parse(key, value)?,
        "env_id" => c.env_id = value.to_string(),
        "env_horizon" => c.env_horizon = parse(key, value)?,
        "env_cues" => c.env_cues = parse(key, value)?,
        "env_noise" => c.env_noise = parse(key, value)?,
        "bandit_payouts" => {
            c.bandit_payouts = value
                .split(',')
                .map(|v| parse("bandit_payouts", v.trim()))
                .collect::<Result<Vec<f64>>>()?
        }
        _ => {
            return Err(CoberlError::Config(format!("unknown key '{key}'")));
        }
    }
    Ok(())
}
