//! Experiment driver: configuration, rollout collection, synchronous and
//! asynchronous training loops, and multi-regime comparisons.
//!
//! Every random stream is derived from the run seed, so `run_sync` is a pure
//! function of `(config, seed)`. Asynchronous runs derive worker streams from
//! `(seed, worker_id)`; only the interleaving of versions is left to the
//! scheduler.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::credit::{compute_advantages, group_by_initial_state, CreditConfig, FittedValue, Regime, ValueFeatures};
use crate::env::{HopChain, HopChainSpec, HopGrammar, StepAction};
use crate::gateway_datapool::{now_ms, Datapool, Gateway, PoolConfig, ProducerMessage};
use crate::optimizer::{update, ClipConfig, UpdateStats};
use crate::policy::{PolicySnapshot, PolicySpec};
use crate::prefix_tree::prompt_prefix_stats;
use crate::store::{meta, StepRecord, Trajectory};
use crate::tokenizer::{DriftReport, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("configs differ beyond regime at key `{key}`")]
    ConfigsDifferBeyondRegime { key: String },
    #[error("seed {seed}, iteration {iteration}: {message}")]
    Iteration {
        seed: u64,
        iteration: usize,
        message: String,
    },
    #[error("record from version {record_version} drawn at version {current} exceeds staleness bound {bound}")]
    StalenessViolation {
        record_version: u64,
        current: u64,
        bound: u64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// True for errors caused by the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::ConfigsDifferBeyondRegime { .. }
        )
    }
}

fn config_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub hops: usize,
    pub max_steps: usize,
    pub step_penalty: f64,
    pub terminal_reward: f64,
    /// Pool the per-episode chains are drawn from.
    pub entities: Vec<String>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            hops: 3,
            max_steps: 8,
            step_penalty: 0.0,
            terminal_reward: 1.0,
            entities: ["w", "x", "y", "z"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyInit {
    Zeros,
    /// Position-0 preference for verb-entity merges (searches most) and a
    /// position-1 preference for eos, the analogue of starting from an
    /// instruction-following model.
    FormatPrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub max_response_len: usize,
    pub temperature: f64,
    pub count_buckets: usize,
    pub position_cap: usize,
    pub init: PolicyInit,
    pub prior_merge: f64,
    pub prior_search: f64,
    pub prior_eos: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            max_response_len: 4,
            temperature: 1.0,
            count_buckets: 8,
            position_cap: 4,
            init: PolicyInit::FormatPrior,
            prior_merge: 3.0,
            prior_search: 1.0,
            prior_eos: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub iterations: usize,
    pub rollouts_per_iteration: usize,
    pub eval_episodes: usize,
    pub workers: usize,
    pub async_enabled: bool,
    pub weight_refresh_every: u64,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    /// Trailing iterations averaged into the "final" metrics.
    pub final_window: usize,
    /// How long the async trainer waits for a full batch.
    pub batch_timeout_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            rollouts_per_iteration: 64,
            eval_episodes: 64,
            workers: 4,
            async_enabled: false,
            weight_refresh_every: 1,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: "runs/default".into(),
            final_window: 10,
            batch_timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub credit: CreditConfig,
    pub clip: ClipConfig,
    pub pool: PoolConfig,
    pub run: RunConfig,
}

/// Keys allowed to differ between the configs of one comparison.
const COMPARISON_FREE_KEYS: [&str; 2] = ["credit.regime", "run.output_dir"];

impl ExperimentConfig {
    pub fn regime(&self) -> Regime {
        self.credit.regime
    }

    pub fn with_regime(&self, regime: Regime) -> Self {
        let mut c = self.clone();
        c.credit.regime = regime;
        c
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.credit.validate().map_err(config_err)?;
        self.clip.validate().map_err(config_err)?;
        let lab = Lab::new(self)?;
        lab.env_for(0).map_err(config_err)?;
        let run = &self.run;
        if run.seeds.is_empty() {
            return Err(config_err("run.seeds must not be empty"));
        }
        if run.workers == 0 {
            return Err(config_err("run.workers must be >= 1"));
        }
        if run.weight_refresh_every == 0 {
            return Err(config_err("run.weight_refresh_every must be >= 1"));
        }
        let g = self.credit.group_size;
        if run.rollouts_per_iteration == 0 || !run.rollouts_per_iteration.is_multiple_of(g) {
            return Err(config_err(format!(
                "run.rollouts_per_iteration {} must be a positive multiple of credit.group_size {g}",
                run.rollouts_per_iteration
            )));
        }
        if run.eval_episodes == 0 || run.final_window == 0 {
            return Err(config_err("run.eval_episodes and run.final_window must be >= 1"));
        }
        if !(self.policy.temperature > 0.0 && self.policy.temperature.is_finite()) {
            return Err(config_err("policy.temperature must be > 0"));
        }
        if self.pool.capacity < run.rollouts_per_iteration * self.env.max_steps {
            return Err(config_err("pool.capacity cannot hold one batch"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        resolve_config(Some(text), &[])
    }

    /// Dotted key → rendered value for every leaf.
    pub fn flatten(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        flatten_into("", &toml::Value::try_from(self).expect("config serializes"), &mut out);
        out
    }

    /// First key, in sorted order, that differs between `self` and `other`
    /// other than the regime and the output path.
    pub fn difference_beyond_regime(&self, other: &Self) -> Option<String> {
        let (a, b) = (self.flatten(), other.flatten());
        a.keys()
            .chain(b.keys())
            .filter(|k| !COMPARISON_FREE_KEYS.contains(&k.as_str()))
            .find(|k| a.get(*k) != b.get(*k))
            .cloned()
    }
}

fn flatten_into(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn merge_table(base: &mut toml::Table, incoming: toml::Table, path: &str) -> Result<(), HarnessError> {
    for (k, v) in incoming {
        let key = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(config_err(format!("unknown config key `{key}`"))),
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge_table(b, t, &key)?,
            (Some(toml::Value::Table(_)), _) => return Err(config_err(format!("config key `{key}` must be a table"))),
            (Some(slot), v) => *slot = coerce(slot, v),
        }
    }
    Ok(())
}

fn coerce(existing: &toml::Value, v: toml::Value) -> toml::Value {
    match (existing, v) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Parses `key=value` into its parts.
pub fn parse_override(s: &str) -> Result<(String, String), HarnessError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Defaults, then the file, then dotted overrides. Unknown keys anywhere are
/// rejected. The result is validated.
pub fn resolve_config(
    file_text: Option<&str>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig, HarnessError> {
    let toml::Value::Table(mut table) = toml::Value::try_from(ExperimentConfig::default()).expect("default serializes")
    else {
        unreachable!("config serializes to a table")
    };
    if let Some(text) = file_text {
        let file: toml::Table = toml::from_str(text).map_err(|e| config_err(format!("config parse error: {e}")))?;
        merge_table(&mut table, file, "")?;
    }
    for (key, raw) in overrides {
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts.pop().expect("split yields one part");
        let mut cur = &mut table;
        for p in &parts {
            cur = match cur.get_mut(*p) {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(config_err(format!("unknown config key `{key}`"))),
            };
        }
        match cur.get_mut(leaf) {
            Some(toml::Value::Table(_)) | None => return Err(config_err(format!("unknown config key `{key}`"))),
            Some(slot) => *slot = coerce(slot, parse_override_value(raw)),
        }
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(format!("config error: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Mixes a seed with a domain tag and two indices (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, domain: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for x in [a, b] {
        z = z.wrapping_add(x).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub mod domain {
    pub const TRAIN_ENV: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const EVAL_ENV: u64 = 3;
    pub const WORKER_RNG: u64 = 4;
    pub const WORKER_ENV: u64 = 5;
    pub const DRIFT: u64 = 6;
}

/// Metadata key on the final record of an episode: `success` or `failure`.
pub const OUTCOME_KEY: &str = "outcome";

pub fn is_success(traj: &Trajectory) -> bool {
    traj.records()
        .last()
        .and_then(|r| r.metadata.get(OUTCOME_KEY))
        .is_some_and(|o| o == "success")
}

/// One finished episode.
#[derive(Debug, Clone)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub success: bool,
}

/// Everything derived from a config that the loops share.
#[derive(Debug, Clone)]
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub vocab: Arc<Vocab>,
    pub grammar: HopGrammar,
    pub policy_spec: PolicySpec,
    pub value_features: ValueFeatures,
}

impl Lab {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let vocab = Arc::new(Vocab::default_hopchain());
        let grammar = HopGrammar::default();
        let sep = vocab
            .id_of(&grammar.separator)
            .ok_or_else(|| config_err("separator is not in the vocabulary"))?;
        if cfg.policy.max_response_len == 0 || cfg.policy.count_buckets == 0 {
            return Err(config_err(
                "policy.max_response_len and policy.count_buckets must be >= 1",
            ));
        }
        let mut policy_spec = PolicySpec::for_vocab(&vocab, sep, cfg.policy.max_response_len);
        policy_spec.count_buckets = cfg.policy.count_buckets;
        policy_spec.position_cap = cfg.policy.position_cap;
        let value_features = ValueFeatures::step_level(sep, cfg.env.hops + 2, cfg.env.max_steps.max(1));
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            grammar,
            policy_spec,
            value_features,
        })
    }

    pub fn env_for(&self, env_seed: u64) -> Result<HopChain, crate::env::EnvError> {
        let e = &self.cfg.env;
        let spec = HopChainSpec::sample(
            &e.entities,
            e.hops,
            e.max_steps,
            e.step_penalty,
            e.terminal_reward,
            env_seed,
        )?;
        HopChain::new(spec, self.vocab.clone(), self.grammar.clone())
    }

    pub fn initial_policy(&self) -> PolicySnapshot {
        let spec = self.policy_spec;
        let mut w = vec![0.0; spec.param_count()];
        if self.cfg.policy.init == PolicyInit::FormatPrior {
            let v = spec.vocab_size;
            let p = &self.cfg.policy;
            let r0 = spec.row_position(0);
            for &m in self.vocab.merges() {
                let s = self.vocab.token_str(m).expect("merge id");
                let search = if s.starts_with(self.grammar.search.as_str()) {
                    p.prior_search
                } else {
                    0.0
                };
                w[r0 * v + m as usize] = p.prior_merge + search;
            }
            if spec.max_response_len > 1 {
                w[spec.row_position(1) * v + spec.eos_id as usize] = p.prior_eos;
            }
        }
        PolicySnapshot::from_weights(spec, w, 0).expect("finite initial weights")
    }

    /// Plays one episode. `rng = None` decodes greedily.
    pub fn play(
        &self,
        env: &HopChain,
        policy: &PolicySnapshot,
        rng: Option<&mut ChaCha8Rng>,
        trace_id: &str,
        metadata: &BTreeMap<String, String>,
        wall_time_ms: u64,
    ) -> Result<Episode, String> {
        self.play_inner(env, policy, rng, false, trace_id, metadata, wall_time_ms)
    }

    #[allow(clippy::too_many_arguments)]
    fn play_inner(
        &self,
        env: &HopChain,
        policy: &PolicySnapshot,
        mut rng: Option<&mut ChaCha8Rng>,
        canonical_only: bool,
        trace_id: &str,
        metadata: &BTreeMap<String, String>,
        wall_time_ms: u64,
    ) -> Result<Episode, String> {
        let mask = canonical_only.then_some(&*self.vocab);
        let mut traj = Trajectory::new(trace_id);
        let mut state = env.reset(trace_id).map_err(|e| e.to_string())?;
        loop {
            let sampled = match rng.as_deref_mut() {
                Some(r) => policy
                    .sample_action(&state.prompt_ids.ids, r, self.cfg.policy.temperature, mask)
                    .map_err(|e| e.to_string())?,
                None => policy.greedy_action(&state.prompt_ids.ids),
            };
            let action =
                StepAction::from_response(crate::tokenizer::TokenSeq::raw(sampled.ids), &self.vocab, &self.grammar)
                    .map_err(|e| e.to_string())?;
            let outcome = env.step(&state, &action).map_err(|e| e.to_string())?;
            let correct = outcome.success;
            let mut metadata = metadata.clone();
            if outcome.done {
                metadata.insert(
                    OUTCOME_KEY.to_string(),
                    if correct { "success" } else { "failure" }.to_string(),
                );
            }
            traj.append_step(StepRecord {
                trace_id: trace_id.to_string(),
                step_index: state.step_index,
                prompt_ids: state.prompt_ids.clone(),
                response_ids: action.response_ids,
                old_token_logprobs: sampled.token_logprobs,
                reward: outcome.reward,
                done: outcome.done,
                policy_version: policy.version(),
                wall_time_ms,
                metadata,
            })
            .map_err(|e| e.to_string())?;
            if outcome.done {
                return Ok(Episode {
                    trajectory: traj,
                    success: correct,
                });
            }
            state = outcome.next;
        }
    }

    fn group_metadata(&self, env_seed: u64, producer: &str) -> BTreeMap<String, String> {
        BTreeMap::from([
            (meta::ENV_SEED.to_string(), env_seed.to_string()),
            (meta::GROUP.to_string(), env_seed.to_string()),
            (meta::PRODUCER.to_string(), producer.to_string()),
        ])
    }

    /// `group_size` rollouts on one environment seed.
    pub fn collect_group(
        &self,
        policy: &PolicySnapshot,
        env_seed: u64,
        rng: &mut ChaCha8Rng,
        trace_prefix: &str,
        producer: &str,
        wall_time_ms: u64,
    ) -> Result<Vec<Episode>, String> {
        let env = self.env_for(env_seed).map_err(|e| e.to_string())?;
        let md = self.group_metadata(env_seed, producer);
        (0..self.cfg.credit.group_size)
            .map(|k| {
                self.play(
                    &env,
                    policy,
                    Some(rng),
                    &format!("{trace_prefix}-k{k}"),
                    &md,
                    wall_time_ms,
                )
            })
            .collect()
    }

    /// The synchronous batch for `iteration`, a pure function of its inputs.
    pub fn collect_sync(&self, policy: &PolicySnapshot, seed: u64, iteration: usize) -> Result<Vec<Episode>, String> {
        let groups = self.cfg.run.rollouts_per_iteration / self.cfg.credit.group_size;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain::ROLLOUT, iteration as u64, 0));
        let mut out = Vec::with_capacity(self.cfg.run.rollouts_per_iteration);
        for g in 0..groups {
            let env_seed = derive_seed(seed, domain::TRAIN_ENV, iteration as u64, g as u64);
            out.extend(self.collect_group(
                policy,
                env_seed,
                &mut rng,
                &format!("s{seed}-i{iteration}-g{g}"),
                "sync",
                iteration as u64,
            )?);
        }
        Ok(out)
    }

    /// Held-out environment seeds, shared by every regime and iteration.
    pub fn eval_seeds(&self, seed: u64) -> Vec<u64> {
        (0..self.cfg.run.eval_episodes as u64)
            .map(|i| derive_seed(seed, domain::EVAL_ENV, i, 0))
            .collect()
    }

    pub fn evaluate(&self, policy: &PolicySnapshot, seed: u64) -> Result<EvalStats, String> {
        let seeds = self.eval_seeds(seed);
        let mut successes = 0;
        let mut total = 0.0;
        for (i, &s) in seeds.iter().enumerate() {
            let env = self.env_for(s).map_err(|e| e.to_string())?;
            let ep = self.play(&env, policy, None, &format!("eval-{i}"), &BTreeMap::new(), 0)?;
            successes += usize::from(ep.success);
            total += ep.trajectory.total_reward();
        }
        Ok(EvalStats {
            success_rate: successes as f64 / seeds.len() as f64,
            mean_return: total / seeds.len() as f64,
        })
    }

    /// Samples `rollouts` episodes and audits every step response for
    /// retokenization drift.
    pub fn sample_drift(
        &self,
        policy: &PolicySnapshot,
        rollouts: usize,
        seed: u64,
        canonical_only: bool,
    ) -> Result<(DriftReport, Vec<Trajectory>), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain::DRIFT, 0, 0));
        let mut trajs = Vec::with_capacity(rollouts);
        for i in 0..rollouts {
            let env = self
                .env_for(derive_seed(seed, domain::DRIFT, 1, i as u64))
                .map_err(|e| e.to_string())?;
            let ep = self.play_inner(
                &env,
                policy,
                Some(&mut rng),
                canonical_only,
                &format!("drift-{i}"),
                &BTreeMap::new(),
                0,
            )?;
            trajs.push(ep.trajectory);
        }
        let report = DriftReport::audit(
            trajs.iter().flat_map(|t| t.records()).map(|r| &r.response_ids),
            &self.vocab,
        )
        .map_err(|e| e.to_string())?;
        Ok((report, trajs))
    }

    /// Fits the value, computes advantages, and runs the regime's update.
    pub fn train_step(
        &self,
        batch: &[Trajectory],
        policy: &PolicySnapshot,
    ) -> Result<(PolicySnapshot, UpdateStats, bool), String> {
        let (adv, fitted) = compute_advantages(
            batch,
            &self.cfg.credit,
            self.value_features,
            self.cfg.policy.max_response_len,
        )
        .map_err(|e| e.to_string())?;
        let degenerate = match &fitted {
            FittedValue::Step(v) | FittedValue::Token(v) => v.fit_stats.degenerate,
            FittedValue::None => false,
        };
        let (next, stats) = update(batch, &adv, policy, &self.cfg.clip).map_err(|e| e.to_string())?;
        Ok((next, stats, degenerate))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub success_rate: f64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub regime: Regime,
    pub iteration: usize,
    /// Undiscounted return over this iteration's training rollouts.
    pub mean_return: f64,
    pub max_return: f64,
    pub train_success_rate: f64,
    /// Greedy success on the held-out evaluation seeds after the update.
    pub success_rate: f64,
    pub eval_mean_return: f64,
    pub mean_traj_len: f64,
    pub mean_response_tokens: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub drift_rate: f64,
    pub prefix_savings: f64,
    pub staleness_mean: f64,
    pub staleness_max: u64,
    /// Batch records by `policy_version` lag behind the trainer.
    pub version_lag: BTreeMap<u64, usize>,
    pub trajectories: usize,
    pub shortfall: usize,
    pub policy_version: u64,
    pub value_degenerate: bool,
    pub update_aborted: bool,
}

impl MetricsRow {
    pub fn is_finite(&self) -> bool {
        [
            self.mean_return,
            self.max_return,
            self.train_success_rate,
            self.success_rate,
            self.eval_mean_return,
            self.mean_traj_len,
            self.mean_response_tokens,
            self.clip_fraction,
            self.grad_norm,
            self.drift_rate,
            self.prefix_savings,
            self.staleness_mean,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

pub const CURVES_HEADER: &str = "iteration,seed,regime,mean_return,success_rate,train_success_rate,mean_traj_len,clip_fraction,drift_rate,prefix_savings,staleness_mean,policy_version";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.seed,
            self.regime,
            self.mean_return,
            self.success_rate,
            self.train_success_rate,
            self.mean_traj_len,
            self.clip_fraction,
            self.drift_rate,
            self.prefix_savings,
            self.staleness_mean,
            self.policy_version
        )
    }
}

struct BatchSummary {
    mean_return: f64,
    max_return: f64,
    train_success_rate: f64,
    mean_traj_len: f64,
    mean_response_tokens: f64,
    drift_rate: f64,
    prefix_savings: f64,
    version_lag: BTreeMap<u64, usize>,
    staleness_mean: f64,
    staleness_max: u64,
}

fn summarize(episodes: &[Episode], vocab: &Vocab, current_version: u64) -> BatchSummary {
    let n = episodes.len().max(1) as f64;
    let returns: Vec<f64> = episodes.iter().map(|e| e.trajectory.total_reward()).collect();
    let records: Vec<&StepRecord> = episodes.iter().flat_map(|e| e.trajectory.records()).collect();
    let drift = DriftReport::audit(records.iter().map(|r| &r.response_ids), vocab).map_or(0.0, |d| d.drift_rate());
    let prefix_savings = prompt_prefix_stats(records.iter().copied()).map_or(0.0, |p| p.savings_ratio);
    let mut version_lag = BTreeMap::new();
    let mut lag_sum = 0u64;
    let mut staleness_max = 0;
    for r in &records {
        let lag = current_version.saturating_sub(r.policy_version);
        *version_lag.entry(lag).or_insert(0) += 1;
        lag_sum += lag;
        staleness_max = staleness_max.max(lag);
    }
    let step_count = records.len().max(1) as f64;
    BatchSummary {
        mean_return: returns.iter().sum::<f64>() / n,
        max_return: returns.iter().copied().fold(0.0, f64::max),
        train_success_rate: episodes.iter().filter(|e| e.success).count() as f64 / n,
        mean_traj_len: records.len() as f64 / n,
        mean_response_tokens: records.iter().map(|r| r.response_ids.len()).sum::<usize>() as f64 / step_count,
        drift_rate: drift,
        prefix_savings,
        version_lag,
        staleness_mean: lag_sum as f64 / step_count,
        staleness_max,
    }
}

/// Output of one `(config, seed)` run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub regime: Regime,
    pub rows: Vec<MetricsRow>,
    pub final_policy: PolicySnapshot,
    /// Training batch of the last iteration, step-native.
    pub last_batch: Vec<Trajectory>,
    pub worker_failures: Vec<String>,
}

impl RunResult {
    fn tail(&self, window: usize) -> &[MetricsRow] {
        let n = self.rows.len();
        &self.rows[n.saturating_sub(window)..]
    }

    fn tail_mean(&self, window: usize, f: impl Fn(&MetricsRow) -> f64) -> f64 {
        let t = self.tail(window);
        if t.is_empty() {
            return 0.0;
        }
        t.iter().map(f).sum::<f64>() / t.len() as f64
    }

    /// Mean greedy success over the last `window` iterations.
    pub fn final_success(&self, window: usize) -> f64 {
        self.tail_mean(window, |r| r.success_rate)
    }

    /// Mean training-rollout return over the last `window` iterations.
    pub fn final_return(&self, window: usize) -> f64 {
        self.tail_mean(window, |r| r.mean_return)
    }
}

fn iteration_err(seed: u64, iteration: usize) -> impl Fn(String) -> HarnessError {
    move |message| HarnessError::Iteration {
        seed,
        iteration,
        message,
    }
}

/// Synchronous training for one seed; `on_row` sees each row as it is made.
pub fn run_sync_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<RunResult, HarnessError> {
    let lab = Lab::new(cfg)?;
    let mut policy = lab.initial_policy();
    let mut rows = Vec::with_capacity(cfg.run.iterations);
    let mut last_batch = Vec::new();
    for it in 0..cfg.run.iterations {
        let err = iteration_err(seed, it);
        let episodes = lab.collect_sync(&policy, seed, it).map_err(&err)?;
        let summary = summarize(&episodes, &lab.vocab, policy.version());
        let batch: Vec<Trajectory> = episodes.into_iter().map(|e| e.trajectory).collect();
        let (next, stats, degenerate) = lab.train_step(&batch, &policy).map_err(&err)?;
        policy = next;
        let eval = lab.evaluate(&policy, seed).map_err(&err)?;
        let row = make_row(
            seed,
            cfg.regime(),
            it,
            &summary,
            &stats,
            eval,
            batch.len(),
            0,
            policy.version(),
            degenerate,
        );
        on_row(&row);
        rows.push(row);
        last_batch = batch;
    }
    Ok(RunResult {
        seed,
        regime: cfg.regime(),
        rows,
        final_policy: policy,
        last_batch,
        worker_failures: Vec::new(),
    })
}

#[allow(clippy::too_many_arguments)]
fn make_row(
    seed: u64,
    regime: Regime,
    iteration: usize,
    s: &BatchSummary,
    stats: &UpdateStats,
    eval: EvalStats,
    trajectories: usize,
    shortfall: usize,
    policy_version: u64,
    value_degenerate: bool,
) -> MetricsRow {
    MetricsRow {
        seed,
        regime,
        iteration,
        mean_return: s.mean_return,
        max_return: s.max_return,
        train_success_rate: s.train_success_rate,
        success_rate: eval.success_rate,
        eval_mean_return: eval.mean_return,
        mean_traj_len: s.mean_traj_len,
        mean_response_tokens: s.mean_response_tokens,
        clip_fraction: stats.clip_fraction,
        grad_norm: stats.grad_norm,
        drift_rate: s.drift_rate,
        prefix_savings: s.prefix_savings,
        staleness_mean: s.staleness_mean,
        staleness_max: s.staleness_max,
        version_lag: s.version_lag.clone(),
        trajectories,
        shortfall,
        policy_version,
        value_degenerate,
        update_aborted: stats.aborted,
    }
}

/// All seeds of `cfg`, synchronously.
pub fn run_sync(cfg: &ExperimentConfig) -> Result<Vec<RunResult>, HarnessError> {
    if cfg.run.async_enabled {
        return Err(config_err("run_sync requires run.async_enabled = false"));
    }
    cfg.run.seeds.iter().map(|&s| run_sync_seed(cfg, s, |_| {})).collect()
}

/// Fault and pacing injection for asynchronous runs.
#[derive(Debug, Clone, Default)]
pub struct AsyncHooks {
    /// `(worker, group)`: that worker panics after producing that many groups.
    pub crash_worker: Option<(usize, usize)>,
    /// Extra delay after each group a worker produces.
    pub worker_delay: Duration,
}

struct Shared {
    published: RwLock<Arc<PolicySnapshot>>,
    stop: AtomicBool,
    live_workers: AtomicUsize,
    failures: Mutex<Vec<String>>,
}

impl Shared {
    fn head(&self) -> Arc<PolicySnapshot> {
        self.published.read().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

fn worker_loop(lab: &Lab, seed: u64, worker: usize, shared: &Shared, gateway: &Gateway, hooks: &AsyncHooks) {
    let cfg = &lab.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain::WORKER_RNG, worker as u64, 0));
    let mut local = shared.head();
    let producer = format!("worker-{worker}");
    let backlog = cfg.run.rollouts_per_iteration;
    let mut group = 0usize;
    while !shared.stop.load(Ordering::Acquire) {
        let head = shared.head();
        if head.version() >= local.version() + cfg.run.weight_refresh_every {
            local = head.clone();
        }
        if gateway.pool().eligible_trajectories(head.version()) >= backlog {
            thread::sleep(Duration::from_micros(500));
            continue;
        }
        let env_seed = derive_seed(seed, domain::WORKER_ENV, worker as u64, group as u64);
        let prefix = format!("s{seed}-w{worker}-g{group}");
        let episodes = match lab.collect_group(&local, env_seed, &mut rng, &prefix, &producer, now_ms()) {
            Ok(e) => e,
            Err(e) => panic!("rollout failed: {e}"),
        };
        for ep in episodes {
            for rec in ep.trajectory.into_records() {
                // Rejections are counted by the pool and surface in its stats.
                let _ = gateway.submit(&producer, ProducerMessage::StepNative(rec));
            }
        }
        group += 1;
        if hooks.crash_worker == Some((worker, group)) {
            panic!("injected crash in worker {worker} after group {group}");
        }
        if !hooks.worker_delay.is_zero() {
            thread::sleep(hooks.worker_delay);
        }
    }
}

/// Drops trajectories whose group has a single member in the batch, which
/// the trajectory baseline cannot score.
fn complete_groups(batch: Vec<Trajectory>) -> Vec<Trajectory> {
    let groups = group_by_initial_state(&batch);
    let keep: Vec<bool> = {
        let mut keep = vec![false; batch.len()];
        for g in groups.iter().filter(|g| g.len() >= 2) {
            for &i in g {
                keep[i] = true;
            }
        }
        keep
    };
    batch
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(t, _)| t)
        .collect()
}

/// Asynchronous training for one seed: `run.workers` producers feed the pool
/// through the gateway while this thread trains on staleness-bounded batches.
pub fn run_async_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    hooks: &AsyncHooks,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<RunResult, HarnessError> {
    let lab = Lab::new(cfg)?;
    let pool = Arc::new(
        Datapool::new(cfg.pool)
            .map_err(config_err)?
            .with_vocab_size(lab.vocab.len()),
    );
    let gateway = Gateway::new(lab.vocab.clone(), pool.clone());
    let shared = Shared {
        published: RwLock::new(Arc::new(lab.initial_policy())),
        stop: AtomicBool::new(false),
        live_workers: AtomicUsize::new(cfg.run.workers),
        failures: Mutex::new(Vec::new()),
    };
    let k = cfg.pool.max_staleness;
    let timeout = Duration::from_millis(cfg.run.batch_timeout_ms);

    let result = thread::scope(|scope| {
        for w in 0..cfg.run.workers {
            let (lab, shared, gateway) = (&lab, &shared, &gateway);
            scope.spawn(move || {
                let outcome = catch_unwind(AssertUnwindSafe(|| worker_loop(lab, seed, w, shared, gateway, hooks)));
                if let Err(payload) = outcome {
                    let msg = payload
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "worker panicked".into());
                    shared
                        .failures
                        .lock()
                        .unwrap_or_else(|e| e.into_inner())
                        .push(format!("worker-{w}: {msg}"));
                }
                shared.live_workers.fetch_sub(1, Ordering::AcqRel);
            });
        }

        let mut trainer = || -> Result<(Vec<MetricsRow>, Vec<Trajectory>), HarnessError> {
            let mut rows = Vec::with_capacity(cfg.run.iterations);
            let mut last_batch = Vec::new();
            let want = cfg.run.rollouts_per_iteration;
            for it in 0..cfg.run.iterations {
                let err = iteration_err(seed, it);
                let policy = shared.head();
                let version = policy.version();
                let mut batch = pool.wait_for_trajectories(want, version, timeout);
                for rec in batch.iter().flat_map(|t| t.records()) {
                    if version.checked_sub(rec.policy_version).is_none_or(|lag| lag > k) {
                        return Err(HarnessError::StalenessViolation {
                            record_version: rec.policy_version,
                            current: version,
                            bound: k,
                        });
                    }
                }
                if cfg.regime() == Regime::Trajectory {
                    batch = complete_groups(batch);
                }
                let shortfall = want.saturating_sub(batch.len());
                if batch.is_empty() {
                    if shared.live_workers.load(Ordering::Acquire) == 0 {
                        return Err(err("every worker has failed".into()));
                    }
                    let row = MetricsRow {
                        seed,
                        regime: cfg.regime(),
                        iteration: it,
                        mean_return: 0.0,
                        max_return: 0.0,
                        train_success_rate: 0.0,
                        success_rate: rows.last().map_or(0.0, |r: &MetricsRow| r.success_rate),
                        eval_mean_return: rows.last().map_or(0.0, |r: &MetricsRow| r.eval_mean_return),
                        mean_traj_len: 0.0,
                        mean_response_tokens: 0.0,
                        clip_fraction: 0.0,
                        grad_norm: 0.0,
                        drift_rate: 0.0,
                        prefix_savings: 0.0,
                        staleness_mean: 0.0,
                        staleness_max: 0,
                        version_lag: BTreeMap::new(),
                        trajectories: 0,
                        shortfall,
                        policy_version: version,
                        value_degenerate: false,
                        update_aborted: false,
                    };
                    on_row(&row);
                    rows.push(row);
                    continue;
                }
                let episodes: Vec<Episode> = batch
                    .iter()
                    .map(|t| Episode {
                        success: is_success(t),
                        trajectory: t.clone(),
                    })
                    .collect();
                let summary = summarize(&episodes, &lab.vocab, version);
                let (next, stats, degenerate) = lab.train_step(&batch, &policy).map_err(&err)?;
                let next = Arc::new(next);
                *shared.published.write().unwrap_or_else(|e| e.into_inner()) = next.clone();
                let eval = lab.evaluate(&next, seed).map_err(&err)?;
                let row = make_row(
                    seed,
                    cfg.regime(),
                    it,
                    &summary,
                    &stats,
                    eval,
                    batch.len(),
                    shortfall,
                    next.version(),
                    degenerate,
                );
                on_row(&row);
                rows.push(row);
                last_batch = batch;
            }
            Ok((rows, last_batch))
        };
        let out = trainer();
        shared.stop.store(true, Ordering::Release);
        out
    });
    let (rows, last_batch) = result?;
    let final_policy = (*shared.head()).clone();
    let worker_failures = shared.failures.into_inner().unwrap_or_else(|e| e.into_inner());
    Ok(RunResult {
        seed,
        regime: cfg.regime(),
        rows,
        final_policy,
        last_batch,
        worker_failures,
    })
}

/// All seeds of `cfg`, asynchronously.
pub fn run_async(cfg: &ExperimentConfig) -> Result<Vec<RunResult>, HarnessError> {
    if !cfg.run.async_enabled {
        return Err(config_err("run_async requires run.async_enabled = true"));
    }
    cfg.run
        .seeds
        .iter()
        .map(|&s| run_async_seed(cfg, s, &AsyncHooks::default(), |_| {}))
        .collect()
}

/// Runs `cfg` with whichever loop it selects.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RunResult>, HarnessError> {
    if cfg.run.async_enabled {
        run_async(cfg)
    } else {
        run_sync(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeSummary {
    pub regime: Regime,
    /// Per seed, in `seeds` order.
    pub final_returns: Vec<f64>,
    pub final_success: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl RegimeSummary {
    pub fn mean_return(&self) -> (f64, f64) {
        mean_std(&self.final_returns)
    }

    pub fn mean_success(&self) -> (f64, f64) {
        mean_std(&self.final_success)
    }
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    pub final_window: usize,
    pub summaries: Vec<RegimeSummary>,
    pub runs: Vec<RunResult>,
}

impl ComparisonReport {
    pub fn summary(&self, regime: Regime) -> Option<&RegimeSummary> {
        self.summaries.iter().find(|s| s.regime == regime)
    }

    /// Seeds on which StepPO's final return strictly exceeds `regime`'s.
    pub fn step_wins_over(&self, regime: Regime) -> Option<usize> {
        let step = self.summary(Regime::Step)?;
        let other = self.summary(regime)?;
        Some(
            step.final_returns
                .iter()
                .zip(&other.final_returns)
                .filter(|(s, o)| s > o)
                .count(),
        )
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from(CURVES_HEADER);
        out.push('\n');
        for r in self.runs.iter().flat_map(|r| &r.rows) {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }

    pub fn summary_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Final metrics: mean over the last {} iterations; success is greedy on shared held-out environment seeds.\n",
            self.final_window
        );
        let _ = writeln!(
            out,
            "| regime | final return (mean ± std) | final success (mean ± std) | StepPO wins |"
        );
        let _ = writeln!(out, "|---|---|---|---|");
        for s in &self.summaries {
            let (rm, rs) = s.mean_return();
            let (sm, ss) = s.mean_success();
            let wins = if s.regime == Regime::Step {
                "-".to_string()
            } else {
                format!("{}/{}", self.step_wins_over(s.regime).unwrap_or(0), self.seeds.len())
            };
            let _ = writeln!(out, "| {} | {rm:.4} ± {rs:.4} | {sm:.4} ± {ss:.4} | {wins} |", s.regime);
        }
        let _ = writeln!(
            out,
            "\n| seed | {} |",
            self.summaries
                .iter()
                .map(|s| s.regime.name())
                .collect::<Vec<_>>()
                .join(" | ")
        );
        let _ = writeln!(out, "|---|{}", "---|".repeat(self.summaries.len()));
        let step = self.summary(Regime::Step);
        for (i, seed) in self.seeds.iter().enumerate() {
            let cells: Vec<String> = self
                .summaries
                .iter()
                .map(|s| {
                    let r = s.final_returns[i];
                    match step {
                        Some(st) if s.regime != Regime::Step => {
                            let mark = if st.final_returns[i] > r {
                                "StepPO wins"
                            } else {
                                "StepPO loses"
                            };
                            format!("{r:.4} ({mark})")
                        }
                        _ => format!("{r:.4}"),
                    }
                })
                .collect();
            let _ = writeln!(out, "| {seed} | {} |", cells.join(" | "));
        }
        out
    }
}

/// Runs every config over the shared seed list. The configs may differ only
/// in `credit.regime` (and `run.output_dir`).
pub fn run_comparison(configs: &[ExperimentConfig]) -> Result<ComparisonReport, HarnessError> {
    let first = configs.first().ok_or_else(|| config_err("no configs to compare"))?;
    for c in &configs[1..] {
        if let Some(key) = first.difference_beyond_regime(c) {
            return Err(HarnessError::ConfigsDifferBeyondRegime { key });
        }
    }
    let window = first.run.final_window;
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for c in configs {
        let results = run(c)?;
        summaries.push(RegimeSummary {
            regime: c.regime(),
            final_returns: results.iter().map(|r| r.final_return(window)).collect(),
            final_success: results.iter().map(|r| r.final_success(window)).collect(),
        });
        runs.extend(results);
    }
    Ok(ComparisonReport {
        seeds: first.run.seeds.clone(),
        final_window: window,
        summaries,
        runs,
    })
}

/// Writes `metrics.jsonl` (one row per line) for a set of runs.
pub fn write_metrics_jsonl(path: &std::path::Path, runs: &[RunResult]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for r in runs.iter().flat_map(|r| &r.rows) {
        out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn curves_csv(runs: &[RunResult]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for r in runs.iter().flat_map(|r| &r.rows) {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(iterations: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.run.iterations = iterations;
        c.run.rollouts_per_iteration = 16;
        c.run.eval_episodes = 8;
        c.run.seeds = vec![7];
        c
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let ov = |s: &str| vec![parse_override(s).unwrap()];
        let c = resolve_config(None, &ov("clip.learning_rate=1")).unwrap();
        assert_eq!(c.clip.learning_rate, 1.0);
        let c = resolve_config(None, &ov("credit.regime=token")).unwrap();
        assert_eq!(c.regime(), Regime::Token);
        let c = resolve_config(None, &ov("run.seeds=[3, 4]")).unwrap();
        assert_eq!(c.run.seeds, vec![3, 4]);
        assert!(resolve_config(None, &ov("clip.learning_rat=1")).is_err());
        assert!(resolve_config(None, &ov("nope=1")).is_err());
        assert!(resolve_config(None, &ov("clip=1")).is_err());
        assert!(resolve_config(Some("[clip]\nmystery = 2\n"), &[]).is_err());
        assert!(resolve_config(None, &ov("run.seeds=[]")).is_err());
    }

    #[test]
    fn overrides_win_over_file() {
        let c = resolve_config(
            Some("[credit]\ngamma = 0.5\n"),
            &[("credit.gamma".into(), "0.9".into())],
        )
        .unwrap();
        assert_eq!(c.credit.gamma, 0.9);
        let c = resolve_config(Some("[credit]\ngamma = 0.5\n"), &[]).unwrap();
        assert_eq!(c.credit.gamma, 0.5);
    }

    #[test]
    fn difference_guard() {
        let a = ExperimentConfig::default();
        let mut b = a.with_regime(Regime::Token);
        b.run.output_dir = "elsewhere".into();
        assert_eq!(a.difference_beyond_regime(&b), None);
        b.credit.gamma = 0.9;
        assert_eq!(a.difference_beyond_regime(&b).as_deref(), Some("credit.gamma"));
    }

    #[test]
    fn zero_iterations_is_empty() {
        let r = run_sync(&small(0)).unwrap();
        assert!(r[0].rows.is_empty());
    }

    #[test]
    fn sync_is_deterministic() {
        let c = small(3);
        let a = run_sync(&c).unwrap();
        let b = run_sync(&c).unwrap();
        assert_eq!(a[0].rows, b[0].rows);
        assert_eq!(a[0].final_policy, b[0].final_policy);
        assert!(a[0].rows.iter().all(MetricsRow::is_finite));
    }

    #[test]
    fn derived_seeds_are_distinct() {
        let mut seen = std::collections::BTreeSet::new();
        for d in 1..=5 {
            for a in 0..20 {
                for b in 0..5 {
                    assert!(seen.insert(derive_seed(0, d, a, b)));
                }
            }
        }
    }

    #[test]
    fn format_prior_prefers_well_formed_searches() {
        let lab = Lab::new(&ExperimentConfig::default()).unwrap();
        let p = lab.initial_policy();
        let env = lab.env_for(1).unwrap();
        let s0 = env.reset("t").unwrap();
        let g = p.greedy_action(&s0.prompt_ids.ids);
        let text = crate::tokenizer::decode(&g.ids, &lab.vocab).unwrap();
        assert!(
            text.starts_with('s') && text.ends_with('$') && text.len() == 3,
            "{text}"
        );
    }

    #[test]
    fn complete_groups_drops_singletons() {
        let lab = Lab::new(&small(1)).unwrap();
        let p = lab.initial_policy();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut batch: Vec<Trajectory> = lab
            .collect_group(&p, 5, &mut rng, "a", "t", 0)
            .unwrap()
            .into_iter()
            .map(|e| e.trajectory)
            .collect();
        batch.extend(
            lab.collect_group(&p, 6, &mut rng, "b", "t", 0)
                .unwrap()
                .into_iter()
                .take(1)
                .map(|e| e.trajectory),
        );
        let kept = complete_groups(batch);
        assert_eq!(kept.len(), lab.cfg.credit.group_size);
    }
}
