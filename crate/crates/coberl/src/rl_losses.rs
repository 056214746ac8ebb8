//! Multi-step return targets, value transform, TD errors and replay
//! priorities. All functions here are pure and operate in plain f64; the
//! learner rebuilds the same arithmetic on the graph for differentiation and
//! the tests cross-check the two paths.

use crate::config::ValueTransformKind;
use crate::error::{CoberlError, Result};

/// Invertible squashing applied to value targets.
#[derive(Clone, Debug)]
pub struct ValueTransform {
    pub kind: ValueTransformKind,
    pub epsilon: f64,
}

impl ValueTransform {
    pub fn signed_sqrt(epsilon: f64) -> Self {
        ValueTransform {
            kind: ValueTransformKind::SignedSqrt,
            epsilon,
        }
    }

    pub fn identity() -> Self {
        ValueTransform {
            kind: ValueTransformKind::Identity,
            epsilon: 1e-3,
        }
    }

    /// h(x) = sign(x)(sqrt(|x|+1) - 1) + eps*x, or x for the identity kind.
    pub fn transform(&self, v: f64) -> f64 {
        match self.kind {
            ValueTransformKind::Identity => v,
            ValueTransformKind::SignedSqrt => {
                v.signum() * ((v.abs() + 1.0).sqrt() - 1.0) + self.epsilon * v
            }
        }
    }

    /// Analytic inverse of `transform`.
    pub fn inverse(&self, v: f64) -> f64 {
        match self.kind {
            ValueTransformKind::Identity => v,
            ValueTransformKind::SignedSqrt => {
                let eps = self.epsilon;
                let inner = (1.0 + 4.0 * eps * (v.abs() + 1.0 + eps)).sqrt() - 1.0;
                let root = inner / (2.0 * eps);
                v.signum() * (root * root - 1.0)
            }
        }
    }
}

/// Peng's Q(lambda) targets by backward recursion, raw (untransformed) space.
///
/// `target_q_max` holds max-Q bootstrap values for positions `0..=T` in raw
/// space (position T is the state after the last step). Terminal steps zero
/// the continuation.
pub fn peng_targets(
    rewards: &[f64],
    target_q_max: &[f64],
    terminal: &[bool],
    lambda: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    let t_len = rewards.len();
    if terminal.len() != t_len || target_q_max.len() != t_len + 1 {
        return Err(CoberlError::Input(format!(
            "peng_targets length mismatch: rewards {}, terminal {}, target_q_max {} (need T+1)",
            t_len,
            terminal.len(),
            target_q_max.len()
        )));
    }
    let mut targets = vec![0.0; t_len];
    let mut g_next = target_q_max[t_len];
    for t in (0..t_len).rev() {
        let g = if terminal[t] {
            rewards[t]
        } else {
            rewards[t] + gamma * ((1.0 - lambda) * target_q_max[t + 1] + lambda * g_next)
        };
        targets[t] = g;
        g_next = g;
    }
    Ok(targets)
}

/// TD errors and the squared-error loss in transformed space.
///
/// `q_taken` are online Q(x_t, a_t) values (already transformed space),
/// `targets_raw` come from [`peng_targets`]; each step can carry an
/// importance-sampling weight.
pub fn q_lambda_loss(
    q_taken: &[f64],
    targets_raw: &[f64],
    transform: &ValueTransform,
    is_weights: Option<&[f64]>,
) -> (f64, Vec<f64>) {
    assert_eq!(q_taken.len(), targets_raw.len(), "q/target length mismatch");
    let n = q_taken.len();
    let mut tds = Vec::with_capacity(n);
    let mut loss = 0.0;
    for t in 0..n {
        let delta = transform.transform(targets_raw[t]) - q_taken[t];
        let w = is_weights.map_or(1.0, |w| w[t]);
        loss += w * 0.5 * delta * delta;
        tds.push(delta);
    }
    if n > 0 {
        loss /= n as f64;
    }
    (loss, tds)
}

/// Replay priority: eta * max|td| + (1 - eta) * mean|td|.
pub fn priority_from_tds(tds: &[f64], eta: f64) -> Result<f64> {
    if tds.is_empty() {
        return Err(CoberlError::Input("priority of empty TD sequence".into()));
    }
    let max = tds.iter().map(|d| d.abs()).fold(0.0, f64::max);
    let mean = tds.iter().map(|d| d.abs()).sum::<f64>() / tds.len() as f64;
    Ok(eta * max + (1.0 - eta) * mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_examples() {
        let h = ValueTransform::signed_sqrt(1e-3);
        assert_eq!(h.transform(0.0), 0.0);
        assert!((h.transform(3.0) - 1.003).abs() < 1e-12);
        // odd
        for x in [0.5, 2.0, 17.3, 99.0] {
            assert!((h.transform(-x) + h.transform(x)).abs() < 1e-12);
        }
        // identity preset
        let id = ValueTransform::identity();
        assert_eq!(id.transform(5.5), 5.5);
        assert_eq!(id.inverse(5.5), 5.5);
    }

    #[test]
    fn transform_round_trip_and_monotone() {
        let h = ValueTransform::signed_sqrt(1e-3);
        let mut prev = f64::NEG_INFINITY;
        let mut x = -100.0;
        while x <= 100.0 {
            let y = h.transform(x);
            assert!(y > prev, "not strictly increasing at {x}");
            prev = y;
            assert!((h.inverse(y) - x).abs() < 1e-8, "round trip failed at {x}");
            x += 0.5;
        }
    }

    #[test]
    fn peng_lambda_zero_is_one_step() {
        let rewards = [0.5, -1.0, 2.0];
        let tqm = [9.0, 1.0, 2.0, 3.0];
        let terminal = [false, false, false];
        let g = peng_targets(&rewards, &tqm, &terminal, 0.0, 0.9).unwrap();
        for t in 0..3 {
            assert!((g[t] - (rewards[t] + 0.9 * tqm[t + 1])).abs() < 1e-12);
        }
    }

    #[test]
    fn peng_lambda_one_is_monte_carlo() {
        let rewards = [1.0, 2.0, 4.0];
        let tqm = [0.0; 4];
        let terminal = [false, false, true];
        let gamma = 0.5;
        let g = peng_targets(&rewards, &tqm, &terminal, 1.0, gamma).unwrap();
        assert!((g[0] - (1.0 + 0.5 * 2.0 + 0.25 * 4.0)).abs() < 1e-12);
        assert!((g[2] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn peng_worked_example() {
        // r=[1,1], terminal after step 2, gamma=0.5, lambda=0.8, maxQ(s1)=2
        let g = peng_targets(&[1.0, 1.0], &[0.0, 2.0, 0.0], &[false, true], 0.8, 0.5).unwrap();
        assert!((g[0] - 1.6).abs() < 1e-12);
        assert!((g[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn peng_length_mismatch_is_input_error() {
        assert!(matches!(
            peng_targets(&[1.0], &[0.0], &[false], 0.8, 0.5),
            Err(CoberlError::Input(_))
        ));
    }

    #[test]
    fn loss_zero_when_q_matches_targets() {
        let h = ValueTransform::signed_sqrt(1e-3);
        let targets = [1.0, -2.0, 0.3];
        let q: Vec<f64> = targets.iter().map(|&g| h.transform(g)).collect();
        let (loss, tds) = q_lambda_loss(&q, &targets, &h, None);
        assert_eq!(loss, 0.0);
        assert!(tds.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn loss_single_step_delta_two() {
        let h = ValueTransform::identity();
        let (loss, tds) = q_lambda_loss(&[1.0], &[3.0], &h, Some(&[1.0]));
        assert_eq!(tds, vec![2.0]);
        assert_eq!(loss, 2.0);
    }

    #[test]
    fn priority_mixture() {
        assert!((priority_from_tds(&[1.0, 3.0], 0.9).unwrap() - 2.9).abs() < 1e-12);
        assert_eq!(priority_from_tds(&[-2.0, 2.0], 0.3).unwrap(), 2.0);
        assert_eq!(priority_from_tds(&[0.0, 0.0], 0.9).unwrap(), 0.0);
        assert!(priority_from_tds(&[], 0.9).is_err());
    }

    #[test]
    fn priority_monotone_in_each_component() {
        let base = priority_from_tds(&[1.0, 2.0, 0.5], 0.9).unwrap();
        let bumped = priority_from_tds(&[1.0, 2.5, 0.5], 0.9).unwrap();
        assert!(bumped > base);
        let bumped2 = priority_from_tds(&[1.4, 2.0, 0.5], 0.9).unwrap();
        assert!(bumped2 > base);
    }
}
