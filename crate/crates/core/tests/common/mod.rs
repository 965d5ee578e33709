#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use steppo::harness::{ExperimentConfig, Lab};
use steppo::policy::PolicySnapshot;
use steppo::store::Trajectory;

pub fn default_config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

/// The shipped default experiment config.
pub fn shipped_config() -> ExperimentConfig {
    let text = std::fs::read_to_string(default_config_path()).expect("configs/default.toml");
    ExperimentConfig::from_toml(&text).expect("valid shipped config")
}

/// A quick config for tests that only need a few iterations.
pub fn small_config(iterations: usize, seeds: &[u64]) -> ExperimentConfig {
    let mut cfg = shipped_config();
    cfg.run.iterations = iterations;
    cfg.run.seeds = seeds.to_vec();
    cfg.run.rollouts_per_iteration = 32;
    cfg.run.eval_episodes = 16;
    cfg
}

/// Weights uniform in `(-scale, scale)`; `scale = 0` is the uniform policy.
pub fn random_policy(lab: &Lab, rng: &mut ChaCha8Rng, scale: f64, version: u64) -> PolicySnapshot {
    let w = (0..lab.policy_spec.param_count())
        .map(|_| if scale > 0.0 { rng.gen_range(-scale..scale) } else { 0.0 })
        .collect();
    PolicySnapshot::from_weights(lab.policy_spec, w, version).expect("finite weights")
}

/// Sampled trajectories from random policies on random environments.
pub fn sampled_batch(lab: &Lab, seed: u64, trajectories: usize, scale: f64) -> (PolicySnapshot, Vec<Trajectory>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = random_policy(lab, &mut rng, scale, 0);
    let mut out = Vec::with_capacity(trajectories);
    while out.len() < trajectories {
        let env_seed = rng.gen();
        let group = lab
            .collect_group(
                &policy,
                env_seed,
                &mut rng,
                &format!("b{seed}-{}", out.len()),
                "test",
                0,
            )
            .expect("rollout");
        out.extend(group.into_iter().map(|e| e.trajectory));
    }
    out.truncate(trajectories);
    (policy, out)
}
