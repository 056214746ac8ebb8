//! Toy environments where memory effects are measurable at desk scale.

use numerics::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CoberlError, Result};

pub const OBS_SHAPE: [usize; 3] = [5, 5, 3];

/// Raw observation, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Observation(pub Tensor);

impl Observation {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Clone, Debug)]
pub struct EnvStep {
    pub observation: Observation,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Environment: Send {
    /// Start a new episode and return the first observation.
    fn reset(&mut self) -> Observation;
    /// Apply an action; errors if the episode already ended or the action is
    /// out of range.
    fn step(&mut self, action: usize) -> Result<EnvStep>;
    fn n_actions(&self) -> usize;
    fn obs_shape(&self) -> [usize; 3];
}

/// Cue-recall: a cue shown at t=0 must be reproduced as the action at
/// t = H-1. Observations in between are uniform noise, so the task is
/// solvable only with memory of the first step.
pub struct CueRecallEnv {
    horizon: usize,
    n_cues: usize,
    noise: f64,
    rng: ChaCha8Rng,
    t: usize,
    cue: usize,
    in_episode: bool,
}

pub fn cue_recall_env(
    horizon: usize,
    n_cues: usize,
    distractor_noise: f64,
    seed: u64,
) -> Result<CueRecallEnv> {
    if horizon < 3 {
        return Err(CoberlError::Config(format!(
            "cue_recall horizon must be >= 3, got {horizon}"
        )));
    }
    if n_cues < 2 {
        return Err(CoberlError::Config(format!(
            "cue_recall needs >= 2 cues, got {n_cues}"
        )));
    }
    if n_cues > OBS_SHAPE[1] * OBS_SHAPE[2] {
        return Err(CoberlError::Config(format!(
            "cue_recall supports at most {} cues",
            OBS_SHAPE[1] * OBS_SHAPE[2]
        )));
    }
    if !(0.0..=1.0).contains(&distractor_noise) {
        return Err(CoberlError::Config(format!(
            "distractor noise {distractor_noise} outside [0, 1]"
        )));
    }
    Ok(CueRecallEnv {
        horizon,
        n_cues,
        noise: distractor_noise,
        rng: ChaCha8Rng::seed_from_u64(seed),
        t: 0,
        cue: 0,
        in_episode: false,
    })
}

impl CueRecallEnv {
    fn obs_at(&mut self, t: usize) -> Observation {
        let [h, w, c] = OBS_SHAPE;
        let mut obs = Tensor::zeros(&[h, w, c]);
        if t == 0 {
            // cue: constant block in the first row, one slot per cue id
            let col = self.cue % w;
            let chan = self.cue / w;
            obs.data_mut()[col * c + chan] = 1.0;
        } else if t == self.horizon - 1 {
            // query marker in the last cell
            let n = obs.len();
            obs.data_mut()[n - 1] = 1.0;
        } else {
            for v in obs.data_mut() {
                *v = self.rng.gen_range(0.0..=self.noise.max(f64::MIN_POSITIVE));
            }
        }
        Observation(obs)
    }
}

impl Environment for CueRecallEnv {
    fn reset(&mut self) -> Observation {
        self.cue = self.rng.gen_range(0..self.n_cues);
        self.t = 0;
        self.in_episode = true;
        self.obs_at(0)
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if !self.in_episode {
            return Err(CoberlError::Input(
                "step after terminal: reset required".into(),
            ));
        }
        if action >= self.n_cues {
            return Err(CoberlError::Input(format!(
                "action {action} out of range (K={})",
                self.n_cues
            )));
        }
        self.t += 1;
        let at_end = self.t == self.horizon;
        let reward = if at_end {
            if action == self.cue {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        };
        if at_end {
            self.in_episode = false;
        }
        let observation = if at_end {
            Observation(Tensor::zeros(&[OBS_SHAPE[0], OBS_SHAPE[1], OBS_SHAPE[2]]))
        } else {
            let t = self.t;
            self.obs_at(t)
        };
        Ok(EnvStep {
            observation,
            reward,
            terminal: at_end,
        })
    }

    fn n_actions(&self) -> usize {
        self.n_cues
    }

    fn obs_shape(&self) -> [usize; 3] {
        OBS_SHAPE
    }
}

/// Memoryless one-step bandit: reward = table[action].
pub struct BanditEnv {
    payouts: Vec<f64>,
    in_episode: bool,
}

pub fn bandit_env(payouts: Vec<f64>, _seed: u64) -> Result<BanditEnv> {
    if payouts.len() < 2 {
        return Err(CoberlError::Config(format!(
            "bandit needs >= 2 arms, got {}",
            payouts.len()
        )));
    }
    Ok(BanditEnv {
        payouts,
        in_episode: false,
    })
}

impl Environment for BanditEnv {
    fn reset(&mut self) -> Observation {
        self.in_episode = true;
        Observation(Tensor::zeros(&[OBS_SHAPE[0], OBS_SHAPE[1], OBS_SHAPE[2]]))
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if !self.in_episode {
            return Err(CoberlError::Input(
                "step after terminal: reset required".into(),
            ));
        }
        if action >= self.payouts.len() {
            return Err(CoberlError::Input(format!(
                "action {action} out of range (K={})",
                self.payouts.len()
            )));
        }
        self.in_episode = false;
        Ok(EnvStep {
            observation: Observation(Tensor::zeros(&[
                OBS_SHAPE[0],
                OBS_SHAPE[1],
                OBS_SHAPE[2],
            ])),
            reward: self.payouts[action],
            terminal: true,
        })
    }

    fn n_actions(&self) -> usize {
        self.payouts.len()
    }

    fn obs_shape(&self) -> [usize; 3] {
        OBS_SHAPE
    }
}

/// Environment registry keyed by the config's string id.
pub fn make_env(cfg: &RunConfig, seed: u64) -> Result<Box<dyn Environment>> {
    match cfg.env_id.as_str() {
        "cue_recall" => Ok(Box::new(cue_recall_env(
            cfg.env_horizon,
            cfg.env_cues,
            cfg.env_noise,
            seed,
        )?)),
        "bandit" => Ok(Box::new(bandit_env(cfg.bandit_payouts.clone(), seed)?)),
        other => Err(CoberlError::Config(format!("unknown env id '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episode_structure() {
        let mut env = cue_recall_env(3, 2, 0.2, 7).unwrap();
        assert_eq!(env.n_actions(), 2);
        let _obs = env.reset();
        let s1 = env.step(0).unwrap();
        assert!(!s1.terminal);
        assert_eq!(s1.reward, 0.0);
        let s2 = env.step(0).unwrap();
        assert!(!s2.terminal);
        let s3 = env.step(0).unwrap();
        assert!(s3.terminal);
        assert!(s3.reward == 1.0 || s3.reward == -1.0);
        assert!(env.step(0).is_err());
    }

    #[test]
    fn observations_in_unit_range_and_deterministic() {
        let run = |seed| {
            let mut env = cue_recall_env(6, 4, 0.5, seed).unwrap();
            let mut all = vec![env.reset().0];
            for _ in 0..6 {
                match env.step(1) {
                    Ok(s) => {
                        assert!(s.observation.0.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                        let terminal = s.terminal;
                        all.push(s.observation.0);
                        if terminal {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
            all
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn oracle_policy_always_scores_one() {
        let mut env = cue_recall_env(5, 4, 0.3, 11).unwrap();
        for _ in 0..20 {
            let obs = env.reset();
            // recover the cue from the first observation: data index for
            // (row 0, col, chan) is col*C + chan and cue = chan*W + col
            let c = OBS_SHAPE[2];
            let idx = obs
                .0
                .data()
                .iter()
                .position(|&v| v == 1.0)
                .expect("cue cell present");
            let cue = (idx % c) * OBS_SHAPE[1] + idx / c;
            let mut total = 0.0;
            loop {
                let s = env.step(cue).unwrap();
                total += s.reward;
                if s.terminal {
                    break;
                }
            }
            assert_eq!(total, 1.0);
        }
    }

    #[test]
    fn random_policy_expected_return_matches_formula() {
        // K=4: expectation 1 - 2(K-1)/K = -0.5
        let mut env = cue_recall_env(4, 4, 0.2, 123).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let episodes = 4000;
        let mut total = 0.0;
        for _ in 0..episodes {
            env.reset();
            loop {
                let s = env.step(rng.gen_range(0..4)).unwrap();
                total += s.reward;
                if s.terminal {
                    break;
                }
            }
        }
        let mean = total / episodes as f64;
        // sigma_mean = sqrt(0.75/4000) ~ 0.0137; allow 4 sigma
        assert!(
            (mean - (-0.5)).abs() < 0.06,
            "random-policy mean {mean} far from -0.5"
        );
    }

    #[test]
    fn bandit_basics() {
        let mut env = bandit_env(vec![0.0, 1.0], 0).unwrap();
        env.reset();
        let s = env.step(1).unwrap();
        assert_eq!(s.reward, 1.0);
        assert!(s.terminal);
        env.reset();
        assert_eq!(env.step(0).unwrap().reward, 0.0);
        // uniform policy return = mean(table)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut total = 0.0;
        let n = 10_000;
        for _ in 0..n {
            env.reset();
            total += env.step(rng.gen_range(0..2)).unwrap().reward;
        }
        assert!((total / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn tabular_q_learning_solves_bandit_within_1k_episodes() {
        let table = vec![0.2, 0.9, 0.5];
        let mut env = bandit_env(table.clone(), 0).unwrap();
        let mut q = vec![0.0f64; 3];
        let mut counts = vec![0usize; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for ep in 0..1000 {
            env.reset();
            let eps = (1.0 - ep as f64 / 500.0).max(0.05);
            let a = if rng.gen_bool(eps) {
                rng.gen_range(0..3)
            } else {
                q.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            let r = env.step(a).unwrap().reward;
            counts[a] += 1;
            q[a] += (r - q[a]) / counts[a] as f64;
        }
        let greedy = q
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(greedy, 1);
        env.reset();
        assert_eq!(env.step(greedy).unwrap().reward, 0.9);
    }

    #[test]
    fn registry_dispatch() {
        let mut cfg = RunConfig::desk();
        cfg.env_id = "cue_recall".into();
        cfg.env_horizon = 5;
        cfg.env_cues = 3;
        assert_eq!(make_env(&cfg, 0).unwrap().n_actions(), 3);
        cfg.env_id = "bandit".into();
        cfg.bandit_payouts = vec![0.0, 0.5, 1.0];
        assert_eq!(make_env(&cfg, 0).unwrap().n_actions(), 3);
        cfg.env_id = "nope".into();
        assert!(make_env(&cfg, 0).is_err());
    }

    #[test]
    fn invalid_params_are_config_errors() {
        assert!(cue_recall_env(2, 2, 0.1, 0).is_err());
        assert!(cue_recall_env(5, 1, 0.1, 0).is_err());
        assert!(cue_recall_env(5, 2, 1.5, 0).is_err());
        assert!(bandit_env(vec![1.0], 0).is_err());
    }
}
