//! Advantage estimation at step, trajectory and token granularity.
//!
//! * step: `delta_t = r_t + gamma V(s_{t+1}) - V(s_t)` with `V(terminal) = 0`,
//!   then `A_t = sum_l (gamma lambda)^l delta_{t+l}` by backward recursion.
//! * trajectory: one scalar `R(tau) - mean(R)` per trajectory within its group.
//! * token: the trajectory is flattened into one transition per generated
//!   token, the step reward sits on the step's last token, and the same GAE
//!   runs over the flat sequence with a value function over state and
//!   in-response position.
//!
//! Value functions are linear over sparse binary features and are refit
//! from the current batch by ridge least squares.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::store::{meta, StepRecord, Trajectory};
use crate::tokenizer::TokenId;

pub const RIDGE: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CreditError {
    #[error("invalid credit config: {0}")]
    InvalidConfig(String),
    #[error("no trajectories to fit")]
    EmptyBatch,
    #[error("trajectory {0:?} is not complete")]
    IncompleteTrajectory(String),
    #[error("group of {0} trajectories is too small for a mean baseline")]
    GroupTooSmall(usize),
    #[error("step {step} of trajectory {trace:?} has no per-token log-probs")]
    MissingTokenLogprobs { trace: String, step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Step,
    Trajectory,
    Token,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Step => "step",
            Regime::Trajectory => "trajectory",
            Regime::Token => "token",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "step" => Ok(Regime::Step),
            "trajectory" => Ok(Regime::Trajectory),
            "token" => Ok(Regime::Token),
            other => Err(format!("unknown regime {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CreditConfig {
    pub gamma: f64,
    pub lam: f64,
    pub regime: Regime,
    pub group_size: usize,
    pub advantage_norm: bool,
}

impl Default for CreditConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lam: 1.0,
            regime: Regime::Step,
            group_size: 8,
            advantage_norm: true,
        }
    }
}

impl CreditConfig {
    pub fn validate(&self) -> Result<(), CreditError> {
        let bad = |m: String| Err(CreditError::InvalidConfig(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} not in (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lam) {
            return bad(format!("lam {} not in [0, 1]", self.lam));
        }
        if self.group_size < 2 {
            return bad(format!("group_size {} < 2", self.group_size));
        }
        Ok(())
    }
}

/// Sparse binary state features for the value functions, read straight from
/// the stored prompt ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueFeatures {
    pub count_token: TokenId,
    pub count_buckets: usize,
    pub step_buckets: usize,
    /// Position one-hots appended for the token-level value; 0 for step level.
    pub position_buckets: usize,
}

impl ValueFeatures {
    pub fn step_level(count_token: TokenId, count_buckets: usize, step_buckets: usize) -> Self {
        Self {
            count_token,
            count_buckets,
            step_buckets,
            position_buckets: 0,
        }
    }

    pub fn with_positions(self, position_buckets: usize) -> Self {
        Self {
            position_buckets,
            ..self
        }
    }

    pub fn dim(&self) -> usize {
        1 + self.count_buckets + self.step_buckets + self.position_buckets
    }

    /// Bias, fact-count bucket, step-index bucket, and (token level only)
    /// in-response position bucket.
    pub fn rows(&self, record: &StepRecord, position: Option<usize>) -> Vec<usize> {
        let count = record.prompt_ids.ids.iter().filter(|&&t| t == self.count_token).count();
        let mut rows = vec![
            0,
            1 + count.min(self.count_buckets - 1),
            1 + self.count_buckets + record.step_index.min(self.step_buckets - 1),
        ];
        if let (Some(p), true) = (position, self.position_buckets > 0) {
            rows.push(1 + self.count_buckets + self.step_buckets + p.min(self.position_buckets - 1));
        }
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub residual_norm: f64,
    /// Residual norm of the all-zero predictor, for comparison.
    pub zero_residual_norm: f64,
    pub samples: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub weights: Vec<f64>,
    pub features: ValueFeatures,
    pub fit_stats: FitStats,
}

impl ValueParams {
    pub fn zero(features: ValueFeatures) -> Self {
        Self {
            weights: vec![0.0; features.dim()],
            features,
            fit_stats: FitStats {
                residual_norm: 0.0,
                zero_residual_norm: 0.0,
                samples: 0,
                degenerate: false,
            },
        }
    }

    fn eval_rows(&self, rows: &[usize]) -> f64 {
        rows.iter().map(|&r| self.weights[r]).sum()
    }

    pub fn state_value(&self, record: &StepRecord) -> f64 {
        self.eval_rows(&self.features.rows(record, None))
    }

    pub fn token_value(&self, record: &StepRecord, position: usize) -> f64 {
        self.eval_rows(&self.features.rows(record, Some(position)))
    }
}

/// Ridge least squares on sparse binary design rows via normal equations.
pub fn ridge_fit(rows: &[Vec<usize>], targets: &[f64], dim: usize) -> (Vec<f64>, FitStats) {
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for (r, &y) in rows.iter().zip(targets) {
        for &i in r {
            rhs[i] += y;
            for &j in r {
                gram[(i, j)] += 1.0;
            }
        }
    }
    for i in 0..dim {
        gram[(i, i)] += RIDGE;
    }
    let zero_residual_norm = targets.iter().map(|y| y * y).sum::<f64>().sqrt();
    let solved = gram
        .cholesky()
        .map(|c| c.solve(&rhs))
        .filter(|w| w.iter().all(|x| x.is_finite()));
    let (weights, degenerate) = match solved {
        Some(w) => (w.iter().copied().collect::<Vec<_>>(), false),
        None => (vec![0.0; dim], true),
    };
    let residual_norm = rows
        .iter()
        .zip(targets)
        .map(|(r, y)| {
            let pred: f64 = r.iter().map(|&i| weights[i]).sum();
            (y - pred).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let stats = FitStats {
        residual_norm,
        zero_residual_norm,
        samples: targets.len(),
        degenerate,
    };
    (weights, stats)
}

/// Backward-recursion lambda-returns `G_t = r_t + gamma((1-lam) V_{t+1} + lam G_{t+1})`
/// with `V_T = G_T = 0`.
fn lambda_returns(rewards: &[f64], next_values: &[f64], gamma: f64, lam: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for t in (0..rewards.len()).rev() {
        g = rewards[t] + gamma * ((1.0 - lam) * next_values[t] + lam * g);
        out[t] = g;
    }
    out
}

fn check_complete(trajs: &[Trajectory]) -> Result<(), CreditError> {
    if trajs.is_empty() {
        return Err(CreditError::EmptyBatch);
    }
    match trajs.iter().find(|t| !t.is_terminal()) {
        Some(t) => Err(CreditError::IncompleteTrajectory(t.trace_id().into())),
        None => Ok(()),
    }
}

/// Flat transitions of one trajectory: (record index, in-response position or None, reward).
fn transitions(traj: &Trajectory, token_level: bool) -> Vec<(usize, Option<usize>, f64)> {
    let mut out = Vec::new();
    for (i, rec) in traj.records().iter().enumerate() {
        if token_level {
            let n = rec.response_ids.len();
            for p in 0..n {
                let r = if p + 1 == n { rec.reward } else { 0.0 };
                out.push((i, Some(p), r));
            }
        } else {
            out.push((i, None, rec.reward));
        }
    }
    out
}

fn fit_generic(
    trajs: &[Trajectory],
    gamma: f64,
    lam: f64,
    features: ValueFeatures,
    token_level: bool,
) -> Result<ValueParams, CreditError> {
    check_complete(trajs)?;
    let mut rows = Vec::new();
    let mut per_traj = Vec::with_capacity(trajs.len());
    for t in trajs {
        let tr = transitions(t, token_level);
        let start = rows.len();
        for &(i, p, _) in &tr {
            rows.push(features.rows(&t.records()[i], p));
        }
        per_traj.push((start, tr));
    }
    let targets_for = |value: Option<&[f64]>| -> Vec<f64> {
        let mut targets = Vec::with_capacity(rows.len());
        for (start, tr) in &per_traj {
            let rewards: Vec<f64> = tr.iter().map(|x| x.2).collect();
            let next: Vec<f64> = (0..tr.len())
                .map(|k| match value {
                    Some(v) if k + 1 < tr.len() => v[start + k + 1],
                    _ => 0.0,
                })
                .collect();
            let l = if value.is_some() { lam } else { 1.0 };
            targets.extend(lambda_returns(&rewards, &next, gamma, l));
        }
        targets
    };
    // Monte-Carlo targets first; for lam < 1 refit once on lambda-returns
    // bootstrapped from that first fit.
    let mc = targets_for(None);
    let (mut weights, mut stats) = ridge_fit(&rows, &mc, features.dim());
    if lam < 1.0 && !stats.degenerate {
        let preds: Vec<f64> = rows.iter().map(|r| r.iter().map(|&i| weights[i]).sum()).collect();
        let targets = targets_for(Some(&preds));
        (weights, stats) = ridge_fit(&rows, &targets, features.dim());
    }
    Ok(ValueParams {
        weights,
        features,
        fit_stats: stats,
    })
}

/// Fits `V(s_t)` to empirical lambda-returns. A degenerate solve falls back
/// to the zero value function with `fit_stats.degenerate` set.
pub fn fit_value(
    trajs: &[Trajectory],
    gamma: f64,
    lam: f64,
    features: ValueFeatures,
) -> Result<ValueParams, CreditError> {
    fit_generic(trajs, gamma, lam, features, false)
}

/// Token-level value over state features plus in-response position.
pub fn fit_token_value(
    trajs: &[Trajectory],
    gamma: f64,
    lam: f64,
    features: ValueFeatures,
) -> Result<ValueParams, CreditError> {
    fit_generic(trajs, gamma, lam, features, true)
}

/// One `delta_t` per step with `V(s_T) = 0`.
pub fn td_residuals(traj: &Trajectory, value: &ValueParams, gamma: f64) -> Vec<f64> {
    let values: Vec<f64> = traj.records().iter().map(|r| value.state_value(r)).collect();
    td_from_values(traj.records().iter().map(|r| r.reward), &values, gamma)
}

/// `delta_t = r_t + gamma v_{t+1} - v_t` where `v_T = 0`.
pub fn td_from_values(rewards: impl IntoIterator<Item = f64>, values: &[f64], gamma: f64) -> Vec<f64> {
    rewards
        .into_iter()
        .enumerate()
        .map(|(t, r)| {
            let next = values.get(t + 1).copied().unwrap_or(0.0);
            r + gamma * next - values[t]
        })
        .collect()
}

/// `A_t = delta_t + gamma lam A_{t+1}`, `A_T = 0`.
pub fn step_gae(deltas: &[f64], gamma: f64, lam: f64) -> Vec<f64> {
    let mut out = vec![0.0; deltas.len()];
    let mut acc = 0.0;
    for t in (0..deltas.len()).rev() {
        acc = deltas[t] + gamma * lam * acc;
        out[t] = acc;
    }
    out
}

/// `R_i - mean(R)` for one group.
pub fn traj_advantage(group_returns: &[f64]) -> Result<Vec<f64>, CreditError> {
    if group_returns.len() < 2 {
        return Err(CreditError::GroupTooSmall(group_returns.len()));
    }
    let b = group_returns.iter().sum::<f64>() / group_returns.len() as f64;
    Ok(group_returns.iter().map(|r| r - b).collect())
}

/// One list per step, one entry per response token.
pub type PerToken = Vec<Vec<f64>>;

/// Per-token (delta, advantage) lists aligned to each step's response ids.
pub fn token_advantages(
    traj: &Trajectory,
    gamma: f64,
    lam: f64,
    token_value: &ValueParams,
) -> Result<(PerToken, PerToken), CreditError> {
    if !traj.is_terminal() {
        return Err(CreditError::IncompleteTrajectory(traj.trace_id().into()));
    }
    for rec in traj.records() {
        if rec.old_token_logprobs.len() != rec.response_ids.len() {
            return Err(CreditError::MissingTokenLogprobs {
                trace: rec.trace_id.clone(),
                step: rec.step_index,
            });
        }
    }
    let tr = transitions(traj, true);
    let values: Vec<f64> = tr
        .iter()
        .map(|&(i, p, _)| token_value.token_value(&traj.records()[i], p.expect("token level")))
        .collect();
    let deltas = td_from_values(tr.iter().map(|x| x.2), &values, gamma);
    let adv = step_gae(&deltas, gamma, lam);
    let mut d_out = Vec::with_capacity(traj.len());
    let mut a_out = Vec::with_capacity(traj.len());
    let mut k = 0;
    for rec in traj.records() {
        let n = rec.response_ids.len();
        d_out.push(deltas[k..k + n].to_vec());
        a_out.push(adv[k..k + n].to_vec());
        k += n;
    }
    Ok((d_out, a_out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "lowercase")]
pub enum TrajectoryCredit {
    Step {
        deltas: Vec<f64>,
        advantages: Vec<f64>,
    },
    Trajectory {
        ret: f64,
        baseline: f64,
        advantage: f64,
    },
    Token {
        deltas: Vec<Vec<f64>>,
        advantages: Vec<Vec<f64>>,
    },
}

impl TrajectoryCredit {
    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        match self {
            TrajectoryCredit::Step { advantages, .. } => advantages.iter_mut().for_each(f),
            TrajectoryCredit::Trajectory { advantage, .. } => f(advantage),
            TrajectoryCredit::Token { advantages, .. } => advantages.iter_mut().flatten().for_each(f),
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            TrajectoryCredit::Step { advantages, .. } => advantages.clone(),
            TrajectoryCredit::Trajectory { advantage, .. } => vec![*advantage],
            TrajectoryCredit::Token { advantages, .. } => advantages.iter().flatten().copied().collect(),
        }
    }
}

/// Advantages for a batch, aligned index-for-index with the trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub regime: Regime,
    pub config: CreditConfig,
    pub per_trajectory: Vec<TrajectoryCredit>,
}

impl AdvantageSet {
    /// Number of credit units: steps, trajectories or tokens.
    pub fn unit_count(&self) -> usize {
        self.per_trajectory.iter().map(|c| c.values().len()).sum()
    }

    pub fn all_advantages(&self) -> Vec<f64> {
        self.per_trajectory.iter().flat_map(|c| c.values()).collect()
    }

    /// Zero mean, unit variance over the batch's units. A constant batch
    /// becomes all zeros.
    pub fn normalize(&mut self) {
        let all = self.all_advantages();
        if all.is_empty() {
            return;
        }
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let scale = if std > 1e-12 { 1.0 / std } else { 0.0 };
        for c in &mut self.per_trajectory {
            c.for_each_mut(|a| *a = (*a - mean) * scale);
        }
    }
}

/// Groups trajectories by their `group` metadata on step 0, falling back to
/// the initial prompt ids. Returns index lists in first-seen order.
pub fn group_by_initial_state(trajs: &[Trajectory]) -> Vec<Vec<usize>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, t) in trajs.iter().enumerate() {
        let key = t
            .records()
            .first()
            .map(|r| {
                r.metadata
                    .get(meta::GROUP)
                    .cloned()
                    .unwrap_or_else(|| format!("{:?}", r.prompt_ids.ids))
            })
            .unwrap_or_default();
        let entry = groups.entry(key.clone()).or_default();
        if entry.is_empty() {
            order.push(key);
        }
        entry.push(i);
    }
    order.into_iter().map(|k| groups.remove(&k).expect("key")).collect()
}

/// Value functions used by `compute_advantages`, echoed for logging.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedValue {
    None,
    Step(ValueParams),
    Token(ValueParams),
}

/// Fits the regime's value function (if any) and computes its advantages.
pub fn compute_advantages(
    trajs: &[Trajectory],
    cfg: &CreditConfig,
    features: ValueFeatures,
    position_buckets: usize,
) -> Result<(AdvantageSet, FittedValue), CreditError> {
    cfg.validate()?;
    check_complete(trajs)?;
    let (per_trajectory, fitted) = match cfg.regime {
        Regime::Step => {
            let v = fit_value(trajs, cfg.gamma, cfg.lam, features)?;
            let credits = trajs
                .iter()
                .map(|t| {
                    let deltas = td_residuals(t, &v, cfg.gamma);
                    let advantages = step_gae(&deltas, cfg.gamma, cfg.lam);
                    TrajectoryCredit::Step { deltas, advantages }
                })
                .collect();
            (credits, FittedValue::Step(v))
        }
        Regime::Token => {
            let tf = features.with_positions(position_buckets);
            let v = fit_token_value(trajs, cfg.gamma, cfg.lam, tf)?;
            let credits = trajs
                .iter()
                .map(|t| {
                    let (deltas, advantages) = token_advantages(t, cfg.gamma, cfg.lam, &v)?;
                    Ok(TrajectoryCredit::Token { deltas, advantages })
                })
                .collect::<Result<_, CreditError>>()?;
            (credits, FittedValue::Token(v))
        }
        Regime::Trajectory => {
            let mut credits = vec![None; trajs.len()];
            for group in group_by_initial_state(trajs) {
                let returns: Vec<f64> = group.iter().map(|&i| trajs[i].total_reward()).collect();
                let adv = traj_advantage(&returns)?;
                let baseline = returns[0] - adv[0];
                for (k, &i) in group.iter().enumerate() {
                    credits[i] = Some(TrajectoryCredit::Trajectory {
                        ret: returns[k],
                        baseline,
                        advantage: adv[k],
                    });
                }
            }
            let credits = credits.into_iter().map(|c| c.expect("every index grouped")).collect();
            (credits, FittedValue::None)
        }
    };
    let mut set = AdvantageSet {
        regime: cfg.regime,
        config: *cfg,
        per_trajectory,
    };
    if cfg.advantage_norm {
        set.normalize();
    }
    Ok((set, fitted))
}
