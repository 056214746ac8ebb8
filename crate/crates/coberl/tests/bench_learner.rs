//! Manual timing probe for learner-step cost (run with --ignored).

use coberl::config::RunConfig;
use coberl::envs::make_env;
use coberl::harness::{Learner, LearnerOutcome};
use coberl::model::NetConfig;
use coberl::replay::PrioritizedReplay;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

#[test]
#[ignore]
fn learner_step_timing() {
    let mut cfg = RunConfig::desk();
    cfg.trace_length = 12;
    cfg.replay_period = 12;
    cfg.burn_in = Some(0);
    cfg.batch_size = 8;
    cfg.memory_size = 16;
    cfg.min_sequences_to_start = 16;
    let env = make_env(&cfg, 0).unwrap();
    let net = NetConfig::from_run(&cfg, env.n_actions(), env.obs_shape()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = net.init_params(&mut rng);
    let mut learner = Learner::new(net.clone(), cfg.clone(), params, 7);
    let mut replay = PrioritizedReplay::new(64, 12, 16, 1.0);
    for i in 0..32 {
        replay
            .insert(common::random_sequence(&net, 12, 12, i, 1000 + i), None)
            .unwrap();
    }
    let mut sample_rng = ChaCha8Rng::seed_from_u64(1);
    let batch = replay.sample(8, 0.6, &mut sample_rng).unwrap();

    let t0 = std::time::Instant::now();
    let inputs = learner.prepare_inputs(&batch).unwrap();
    let t_prepare = t0.elapsed();

    let t1 = std::time::Instant::now();
    let mut graph = numerics::Graph::new();
    let online = coberl::model::bind_all(&mut graph, &learner.params);
    let out = coberl::harness::build_training_loss(
        &mut graph,
        &online,
        &learner.net,
        &learner.hyper(true),
        &inputs,
    )
    .unwrap();
    let t_forward = t1.elapsed();

    let t2 = std::time::Instant::now();
    let _grads = graph.backward(out.total).unwrap();
    let t_backward = t2.elapsed();

    let t3 = std::time::Instant::now();
    for _ in 0..5 {
        match learner.step(&batch).unwrap() {
            LearnerOutcome::Applied(_) => {}
            LearnerOutcome::Aborted { diagnostic } => panic!("{diagnostic}"),
        }
    }
    let t_full = t3.elapsed() / 5;

    println!("prepare (target pass): {t_prepare:?}");
    println!("loss forward build:    {t_forward:?}");
    println!("backward:              {t_backward:?}");
    println!("full step average:     {t_full:?}");
}
