//! Per-actor exploration schedule and epsilon-greedy action selection.

use numerics::Tensor;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct ActorSchedule {
    pub base_eps: f64,
    pub alpha: f64,
    pub num_actors: usize,
}

impl ActorSchedule {
    pub fn new(base_eps: f64, alpha: f64, num_actors: usize) -> Self {
        assert!(num_actors >= 1, "need at least one actor");
        ActorSchedule {
            base_eps,
            alpha,
            num_actors,
        }
    }
}

/// epsilon_l = eps^(1 + alpha * l / (L-1)); a single actor uses exponent 1.
pub fn epsilon_for_actor(l: usize, sched: &ActorSchedule) -> f64 {
    debug_assert!(l < sched.num_actors);
    if sched.num_actors == 1 {
        return sched.base_eps;
    }
    let exponent = 1.0 + sched.alpha * l as f64 / (sched.num_actors as f64 - 1.0);
    sched.base_eps.powf(exponent)
}

/// Epsilon-greedy over Q values; argmax ties broken by lowest index.
pub fn actor_step(q_values: &Tensor, epsilon: f64, rng: &mut impl Rng) -> usize {
    let n = q_values.len();
    debug_assert!(n > 0);
    if epsilon > 0.0 && rng.gen_range(0.0..1.0) < epsilon {
        rng.gen_range(0..n)
    } else {
        q_values.row_argmax()[0]
    }
}
