//! Clipped-surrogate policy updates at step, token and trajectory granularity.
//!
//! All three regimes share one loop over "credit units". A unit is a span of
//! response positions inside one stored step, paired with one advantage:
//!
//! | regime     | unit span          | advantage              |
//! |------------|--------------------|------------------------|
//! | step       | whole response     | step GAE `A_t`         |
//! | token      | one token          | token GAE              |
//! | trajectory | whole response     | `R(tau) - b`, broadcast |
//!
//! A unit's ratio is `exp(sum over span of (log pi_new - log pi_old))`, so a
//! step ratio is the product of its token ratios. The objective is the mean
//! over units of `min(w A, clip(w, 1 - eps_low, 1 + eps_high) A)`; the
//! gradient of a clipped-out unit is zero. Plain gradient ascent, fixed
//! learning rate, sequential accumulation: same inputs give bit-identical
//! snapshots.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::credit::{AdvantageSet, Regime, TrajectoryCredit};
use crate::policy::{PolicySnapshot, PromptContext};
use crate::store::{StepRecord, Trajectory};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimizerError {
    #[error("advantages are {got} regime, update expects {expected}")]
    RegimeMismatch { expected: Regime, got: Regime },
    #[error("record {trace:?}/{step} carries {got} old log-probs for {expected} tokens")]
    MissingOldLogprobs {
        trace: String,
        step: usize,
        expected: usize,
        got: usize,
    },
    #[error("advantage set does not line up with the batch: {0}")]
    MisalignedAdvantages(String),
    #[error("invalid clip config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub learning_rate: f64,
    pub epochs_per_batch: usize,
    pub max_ratio_log: f64,
    pub entropy_bonus: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.2,
            learning_rate: 0.05,
            epochs_per_batch: 2,
            max_ratio_log: 20.0,
            entropy_bonus: 0.0,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |m: &str| Err(OptimizerError::InvalidConfig(m.into()));
        if !(self.eps_low > 0.0 && self.eps_high > 0.0) {
            return bad("eps_low and eps_high must be > 0");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.epochs_per_batch == 0 {
            return bad("epochs_per_batch must be >= 1");
        }
        if !(self.max_ratio_log > 0.0) {
            return bad("max_ratio_log must be > 0");
        }
        if !(self.entropy_bonus >= 0.0) {
            return bad("entropy_bonus must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioEval {
    pub ratio: f64,
    /// Unclamped sum of per-token log-ratios.
    pub log_ratio: f64,
    pub clamped: bool,
}

fn check_old_logprobs(record: &StepRecord) -> Result<(), OptimizerError> {
    if record.old_token_logprobs.len() != record.response_ids.len() || record.response_ids.is_empty() {
        return Err(OptimizerError::MissingOldLogprobs {
            trace: record.trace_id.clone(),
            step: record.step_index,
            expected: record.response_ids.len(),
            got: record.old_token_logprobs.len(),
        });
    }
    Ok(())
}

fn ratio_from_log(log_ratio: f64, max_ratio_log: f64) -> RatioEval {
    let clamped = log_ratio.abs() > max_ratio_log;
    RatioEval {
        ratio: log_ratio.clamp(-max_ratio_log, max_ratio_log).exp(),
        log_ratio,
        clamped,
    }
}

/// `w_t = prod_i pi_new(y_i | s_t, y_<i) / pi_old(...)`, computed in log space.
pub fn step_ratio(new: &PolicySnapshot, record: &StepRecord, max_ratio_log: f64) -> Result<RatioEval, OptimizerError> {
    check_old_logprobs(record)?;
    let ctx = PromptContext::from_prompt(new.spec(), &record.prompt_ids.ids);
    let lp = new.action_logprob_ctx(&ctx, &record.response_ids.ids);
    let mut log_ratio = 0.0;
    for (n, o) in lp.per_token.iter().zip(&record.old_token_logprobs) {
        log_ratio += n - o;
    }
    Ok(ratio_from_log(log_ratio, max_ratio_log))
}

/// `min(w A, clip(w, 1 - eps_low, 1 + eps_high) A)`; maximized by the update.
pub fn clipped_surrogate(w: f64, advantage: f64, cfg: &ClipConfig) -> f64 {
    let clipped = w.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    (w * advantage).min(clipped * advantage)
}

/// True when the clipped branch is strictly smaller, i.e. the term is flat in `w`.
fn clip_active(w: f64, advantage: f64, cfg: &ClipConfig) -> bool {
    let clipped = w.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    clipped * advantage < w * advantage
}

/// One credit unit: a span of response positions of one step and its advantage.
#[derive(Debug, Clone, PartialEq)]
pub struct CreditUnit {
    pub traj: usize,
    pub step: usize,
    pub positions: Range<usize>,
    pub advantage: f64,
}

/// Expands an advantage set into credit units for `trajs`.
pub fn credit_units(trajs: &[Trajectory], adv: &AdvantageSet) -> Result<Vec<CreditUnit>, OptimizerError> {
    let misaligned = |m: String| Err(OptimizerError::MisalignedAdvantages(m));
    if adv.per_trajectory.len() != trajs.len() {
        return misaligned(format!(
            "{} credit entries for {} trajectories",
            adv.per_trajectory.len(),
            trajs.len()
        ));
    }
    let mut units = Vec::new();
    for (ti, (t, credit)) in trajs.iter().zip(&adv.per_trajectory).enumerate() {
        for rec in t.records() {
            check_old_logprobs(rec)?;
        }
        match credit {
            TrajectoryCredit::Step { advantages, .. } => {
                if advantages.len() != t.len() {
                    return misaligned(format!(
                        "trajectory {ti}: {} step advantages for {} steps",
                        advantages.len(),
                        t.len()
                    ));
                }
                for (si, (rec, &a)) in t.records().iter().zip(advantages).enumerate() {
                    units.push(CreditUnit {
                        traj: ti,
                        step: si,
                        positions: 0..rec.response_ids.len(),
                        advantage: a,
                    });
                }
            }
            TrajectoryCredit::Trajectory { advantage, .. } => {
                for (si, rec) in t.records().iter().enumerate() {
                    units.push(CreditUnit {
                        traj: ti,
                        step: si,
                        positions: 0..rec.response_ids.len(),
                        advantage: *advantage,
                    });
                }
            }
            TrajectoryCredit::Token { advantages, .. } => {
                if advantages.len() != t.len() {
                    return misaligned(format!(
                        "trajectory {ti}: token advantages for {} steps, expected {}",
                        advantages.len(),
                        t.len()
                    ));
                }
                for (si, (rec, step_adv)) in t.records().iter().zip(advantages).enumerate() {
                    if step_adv.len() != rec.response_ids.len() {
                        return misaligned(format!(
                            "trajectory {ti} step {si}: {} token advantages",
                            step_adv.len()
                        ));
                    }
                    for (p, &a) in step_adv.iter().enumerate() {
                        units.push(CreditUnit {
                            traj: ti,
                            step: si,
                            positions: p..p + 1,
                            advantage: a,
                        });
                    }
                }
            }
        }
    }
    Ok(units)
}

/// Diagnostics for one evaluation of the surrogate and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEval {
    pub gradient: Vec<f64>,
    pub mean_surrogate: f64,
    pub clipped: usize,
    pub clamped: usize,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

/// Mean clipped surrogate over `units` under `current` and its gradient.
pub fn surrogate_gradient(
    trajs: &[Trajectory],
    units: &[CreditUnit],
    current: &PolicySnapshot,
    cfg: &ClipConfig,
) -> SurrogateEval {
    let mut gradient = vec![0.0; current.spec().param_count()];
    let n = units.len().max(1) as f64;
    let mut surrogate_sum = 0.0;
    let (mut clipped, mut clamped) = (0, 0);
    let (mut ratio_min, mut ratio_max) = (f64::INFINITY, f64::NEG_INFINITY);

    // Per-token log-probs of every step under `current`, computed once.
    let mut cache: Vec<Vec<(PromptContext, Vec<f64>)>> = Vec::with_capacity(trajs.len());
    for t in trajs {
        cache.push(
            t.records()
                .iter()
                .map(|r| {
                    let ctx = PromptContext::from_prompt(current.spec(), &r.prompt_ids.ids);
                    let lp = current.action_logprob_ctx(&ctx, &r.response_ids.ids).per_token;
                    (ctx, lp)
                })
                .collect(),
        );
    }

    for u in units {
        let rec = &trajs[u.traj].records()[u.step];
        let (ctx, new_lp) = &cache[u.traj][u.step];
        let mut log_ratio = 0.0;
        for p in u.positions.clone() {
            log_ratio += new_lp[p] - rec.old_token_logprobs[p];
        }
        let r = ratio_from_log(log_ratio, cfg.max_ratio_log);
        ratio_min = ratio_min.min(r.ratio);
        ratio_max = ratio_max.max(r.ratio);
        surrogate_sum += clipped_surrogate(r.ratio, u.advantage, cfg);
        if r.clamped {
            clamped += 1;
        } else if clip_active(r.ratio, u.advantage, cfg) {
            clipped += 1;
        } else if u.advantage != 0.0 {
            current.accumulate_logprob_grad(
                ctx,
                &rec.response_ids.ids,
                u.positions.clone(),
                r.ratio * u.advantage / n,
                &mut gradient,
            );
        }
        if cfg.entropy_bonus > 0.0 {
            current.accumulate_entropy_grad(
                ctx,
                &rec.response_ids.ids,
                u.positions.clone(),
                cfg.entropy_bonus / n,
                &mut gradient,
            );
        }
    }
    SurrogateEval {
        gradient,
        mean_surrogate: surrogate_sum / n,
        clipped,
        clamped,
        ratio_min,
        ratio_max,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean surrogate at the start of the update.
    pub mean_surrogate: f64,
    /// Fraction of unit evaluations, over all epochs, on the clipped branch.
    pub clip_fraction: f64,
    pub mean_abs_advantage: f64,
    /// L2 norm of the first-epoch gradient.
    pub grad_norm: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub clamped: usize,
    pub units: usize,
    pub new_version: u64,
    pub aborted: bool,
}

fn run_update(
    trajs: &[Trajectory],
    units: &[CreditUnit],
    old: &PolicySnapshot,
    cfg: &ClipConfig,
) -> Result<(PolicySnapshot, UpdateStats), OptimizerError> {
    cfg.validate()?;
    let mut current = old.clone();
    let mut stats = UpdateStats {
        mean_surrogate: 0.0,
        clip_fraction: 0.0,
        mean_abs_advantage: if units.is_empty() {
            0.0
        } else {
            units.iter().map(|u| u.advantage.abs()).sum::<f64>() / units.len() as f64
        },
        grad_norm: 0.0,
        ratio_min: 1.0,
        ratio_max: 1.0,
        clamped: 0,
        units: units.len(),
        new_version: old.version() + 1,
        aborted: false,
    };
    let mut clipped_total = 0;
    for epoch in 0..cfg.epochs_per_batch {
        let eval = surrogate_gradient(trajs, units, &current, cfg);
        if eval.gradient.iter().any(|g| !g.is_finite()) {
            stats.aborted = true;
            stats.new_version = old.version();
            return Ok((old.clone(), stats));
        }
        if epoch == 0 {
            stats.mean_surrogate = eval.mean_surrogate;
            stats.grad_norm = eval.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
            stats.ratio_min = eval.ratio_min;
            stats.ratio_max = eval.ratio_max;
        } else {
            stats.ratio_min = stats.ratio_min.min(eval.ratio_min);
            stats.ratio_max = stats.ratio_max.max(eval.ratio_max);
        }
        clipped_total += eval.clipped;
        stats.clamped += eval.clamped;
        let step: Vec<f64> = eval.gradient.iter().map(|g| cfg.learning_rate * g).collect();
        current = current.stepped(&step).with_version(old.version());
    }
    if units.is_empty() {
        stats.ratio_min = 1.0;
        stats.ratio_max = 1.0;
    } else {
        stats.clip_fraction = clipped_total as f64 / (units.len() * cfg.epochs_per_batch) as f64;
    }
    Ok((current.with_version(old.version() + 1), stats))
}

fn expect_regime(adv: &AdvantageSet, expected: Regime) -> Result<(), OptimizerError> {
    if adv.regime != expected {
        return Err(OptimizerError::RegimeMismatch {
            expected,
            got: adv.regime,
        });
    }
    Ok(())
}

/// StepPO: one ratio and one advantage per interaction step.
pub fn steppo_update(
    batch: &[Trajectory],
    advantages: &AdvantageSet,
    old: &PolicySnapshot,
    cfg: &ClipConfig,
) -> Result<(PolicySnapshot, UpdateStats), OptimizerError> {
    expect_regime(advantages, Regime::Step)?;
    run_update(batch, &credit_units(batch, advantages)?, old, cfg)
}

/// Token-level PPO: one ratio and one advantage per generated token.
pub fn token_ppo_update(
    batch: &[Trajectory],
    advantages: &AdvantageSet,
    old: &PolicySnapshot,
    cfg: &ClipConfig,
) -> Result<(PolicySnapshot, UpdateStats), OptimizerError> {
    expect_regime(advantages, Regime::Token)?;
    run_update(batch, &credit_units(batch, advantages)?, old, cfg)
}

/// Trajectory-level baseline: step ratios, one broadcast scalar per trajectory.
pub fn traj_update(
    batch: &[Trajectory],
    advantages: &AdvantageSet,
    old: &PolicySnapshot,
    cfg: &ClipConfig,
) -> Result<(PolicySnapshot, UpdateStats), OptimizerError> {
    expect_regime(advantages, Regime::Trajectory)?;
    run_update(batch, &credit_units(batch, advantages)?, old, cfg)
}

/// Dispatches on the advantage set's regime.
pub fn update(
    batch: &[Trajectory],
    advantages: &AdvantageSet,
    old: &PolicySnapshot,
    cfg: &ClipConfig,
) -> Result<(PolicySnapshot, UpdateStats), OptimizerError> {
    match advantages.regime {
        Regime::Step => steppo_update(batch, advantages, old, cfg),
        Regime::Token => token_ppo_update(batch, advantages, old, cfg),
        Regime::Trajectory => traj_update(batch, advantages, old, cfg),
    }
}
