//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs as a plain binary (`harness = false`) so the report is always shown.
//! `cargo test --test acceptance -- 9 10` runs only the listed criteria.

mod common;

use std::collections::BTreeSet;
use std::sync::{Arc, Barrier, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use steppo::credit::{compute_advantages, step_gae, td_from_values, AdvantageSet, Regime, TrajectoryCredit};
use steppo::gateway_datapool::{now_ms, Datapool, IngestEnvelope, PoolConfig};
use steppo::harness::{self, run_async_seed, AsyncHooks, ExperimentConfig, Lab, RunResult};
use steppo::optimizer::{step_ratio, steppo_update, token_ppo_update, ClipConfig};
use steppo::policy::{ActiveRows, PolicySnapshot, PromptContext};
use steppo::prefix_tree::{step_key_sequence, PrefixTree, StepReplay};
use steppo::store::text_round_trip;
use steppo::tokenizer::{encode, DriftReport};

use common::{random_policy, sampled_batch, shipped_config};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn seconds(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn gae_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut count) = (0.0f64, 0usize);
    for &gamma in &[0.5, 0.9, 0.99, 1.0] {
        for &lam in &[0.0, 0.5, 0.95, 1.0] {
            for _ in 0..125 {
                let t = rng.gen_range(1..=16);
                let r: Vec<f64> = (0..t).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let v: Vec<f64> = (0..t).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let delta: Vec<f64> = (0..t)
                    .map(|i| r[i] + gamma * if i + 1 < t { v[i + 1] } else { 0.0 } - v[i])
                    .collect();
                let got = step_gae(&td_from_values(r.iter().copied(), &v, gamma), gamma, lam);
                for (i, a) in got.iter().enumerate() {
                    let direct: f64 = delta[i..]
                        .iter()
                        .enumerate()
                        .map(|(l, d)| (gamma * lam).powi(l as i32) * d)
                        .sum();
                    worst = worst.max((a - direct).abs());
                }
                count += 1;
            }
        }
    }
    let s = seconds(t0);
    verdict(
        worst <= 1e-10 && s < 5.0,
        format!("{count} trajectories, max |diff| {worst:.2e} (tol 1e-10), {s:.2}s (limit 5s)"),
    )
}

fn ratio_factorization() -> Verdict {
    let t0 = Instant::now();
    let lab = Lab::new(&shipped_config()).expect("lab");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut pairs) = (0.0f64, 0usize);
    while pairs < 1000 {
        let (_, batch) = sampled_batch(&lab, rng.gen(), 16, 2.0);
        let new = random_policy(&lab, &mut rng, 2.0, 1);
        for rec in batch.iter().flat_map(|t| t.records()) {
            let ids = &rec.response_ids.ids;
            let mut log_sum = 0.0;
            for i in 0..ids.len() {
                log_sum +=
                    new.token_logprobs(&rec.prompt_ids.ids, &ids[..i])[ids[i] as usize] - rec.old_token_logprobs[i];
            }
            let w = step_ratio(&new, rec, f64::INFINITY).expect("ratio").ratio;
            let oracle = log_sum.exp();
            worst = worst.max((w - oracle).abs() / oracle.max(1.0));
            pairs += 1;
        }
    }
    let s = seconds(t0);
    verdict(
        worst <= 1e-9 && s < 5.0,
        format!("{pairs} pairs, max rel diff {worst:.2e} (tol 1e-9), {s:.2}s (limit 5s)"),
    )
}

/// `grad log pi` written directly from the log-linear softmax, without the
/// library's accumulation routine.
fn naive_logprob_grad(policy: &PolicySnapshot, prompt: &[u32], response: &[u32]) -> Vec<f64> {
    let spec = policy.spec();
    let v = spec.vocab_size;
    let w = policy.weights();
    let ctx = PromptContext::from_prompt(spec, prompt);
    let mut g = vec![0.0; w.len()];
    for (pos, &y) in response.iter().enumerate() {
        let prev = if pos == 0 { None } else { Some(response[pos - 1]) };
        let rows = ActiveRows::new(spec, &ctx, prev, pos);
        let logits: Vec<f64> = (0..v)
            .map(|k| rows.as_slice().iter().map(|&r| w[r * v + k]).sum())
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for &r in rows.as_slice() {
            for k in 0..v {
                let p = (logits[k] - m).exp() / z;
                g[r * v + k] += f64::from(u8::from(k == y as usize)) - p;
            }
        }
    }
    g
}

fn trust_region_center() -> Verdict {
    let t0 = Instant::now();
    let cfg = shipped_config();
    let lab = Lab::new(&cfg).expect("lab");
    let clip = ClipConfig {
        learning_rate: 1.0,
        epochs_per_batch: 1,
        entropy_bonus: 0.0,
        ..cfg.clip
    };
    let (mut worst, mut clip_max) = (0.0f64, 0.0f64);
    for seed in 0..5 {
        let (policy, batch) = sampled_batch(&lab, 100 + seed, 64, 1.5);
        let (adv, _) = compute_advantages(&batch, &cfg.credit, lab.value_features, cfg.policy.max_response_len)
            .expect("advantages");
        let (next, stats) = steppo_update(&batch, &adv, &policy, &clip).expect("update");
        let mut oracle = vec![0.0; policy.weights().len()];
        let mut units = 0usize;
        for (t, credit) in batch.iter().zip(&adv.per_trajectory) {
            let TrajectoryCredit::Step { advantages, .. } = credit else {
                unreachable!("step regime")
            };
            for (rec, a) in t.records().iter().zip(advantages) {
                let g = naive_logprob_grad(&policy, &rec.prompt_ids.ids, &rec.response_ids.ids);
                for (o, gi) in oracle.iter_mut().zip(g) {
                    *o += a * gi;
                }
                units += 1;
            }
        }
        for (i, o) in oracle.iter().enumerate() {
            let direction = next.weights()[i] - policy.weights()[i];
            worst = worst.max((direction - o / units as f64).abs());
        }
        clip_max = clip_max.max(stats.clip_fraction);
    }
    let s = seconds(t0);
    verdict(
        worst <= 1e-10 && clip_max == 0.0 && s < 5.0,
        format!("max |diff| {worst:.2e} (tol 1e-10), clip fraction {clip_max}, {s:.2}s (limit 5s)"),
    )
}

fn gradient_correctness() -> Verdict {
    let lab = Lab::new(&shipped_config()).expect("lab");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut instances = 0;
    while instances < 100 {
        let (_, batch) = sampled_batch(&lab, rng.gen(), 1, 1.0);
        let rec = &batch[0].records()[rng.gen_range(0..batch[0].len())];
        let policy = random_policy(&lab, &mut rng, 3.0, 0);
        let (prompt, response) = (&rec.prompt_ids.ids, &rec.response_ids.ids);
        let analytic = policy.logprob_grad(prompt, response).expect("valid response");
        let lp = |p: &PolicySnapshot| p.action_logprob(prompt, response).expect("valid").total;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for i in 0..analytic.len() {
            let mut e = vec![0.0; analytic.len()];
            e[i] = h;
            let up = lp(&policy.stepped(&e));
            e[i] = -h;
            let down = lp(&policy.stepped(&e));
            let fd = (up - down) / (2.0 * h);
            diff2 += (fd - analytic[i]).powi(2);
            norm2 += analytic[i].powi(2);
        }
        worst = worst.max(diff2.sqrt() / norm2.sqrt().max(1e-12));
        instances += 1;
    }
    verdict(
        worst <= 1e-6,
        format!("{instances} instances, max relative error {worst:.2e} (tol 1e-6)"),
    )
}

fn drift_demonstration() -> Verdict {
    let mut cfg = shipped_config();
    cfg.policy.max_response_len = 4;
    let lab = Lab::new(&cfg).expect("lab");
    let uniform = PolicySnapshot::zeros(lab.policy_spec);
    let (a, trajs) = lab.sample_drift(&uniform, 1000, 7, false).expect("sample");
    let (b, _) = lab.sample_drift(&uniform, 1000, 7, false).expect("sample");
    let (c, canon_trajs) = lab.sample_drift(&uniform, 1000, 7, true).expect("sample");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let alphabet: Vec<char> = "wxyzsa>$".chars().collect();
    let encoded: Vec<_> = (0..1000)
        .map(|_| {
            let n = rng.gen_range(1..=8);
            let text: String = (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect();
            encode(&text, &lab.vocab).expect("encodable")
        })
        .collect();
    let d = DriftReport::audit(&encoded, &lab.vocab).expect("audit");

    let mut with_drift = 0;
    let mut round_trip_ok = true;
    for t in &trajs {
        let drifted = DriftReport::audit(t.records().iter().map(|r| &r.response_ids), &lab.vocab).expect("audit");
        if drifted.drifted() > 0 {
            with_drift += 1;
            round_trip_ok &= text_round_trip(t, &lab.vocab).expect("round trip").changed_records() >= 1;
        }
    }
    let canonical_clean = canon_trajs
        .iter()
        .all(|t| text_round_trip(t, &lab.vocab).expect("round trip").changed_records() == 0);
    let pass = a.drift_rate() > 0.0
        && a == b
        && c.drift_rate() == 0.0
        && d.drift_rate() == 0.0
        && round_trip_ok
        && canonical_clean;
    verdict(
        pass,
        format!(
            "sampled drift {:.4} (repeat equal: {}), canonical-masked {}, canonical encodings {}, {with_drift} drifted trajectories all changed by round trip: {round_trip_ok}",
            a.drift_rate(),
            a == b,
            c.drift_rate(),
            d.drift_rate()
        ),
    )
}

fn as_token_set(step: &AdvantageSet) -> AdvantageSet {
    let per_trajectory = step
        .per_trajectory
        .iter()
        .map(|c| match c {
            TrajectoryCredit::Step { deltas, advantages } => TrajectoryCredit::Token {
                deltas: deltas.iter().map(|d| vec![*d]).collect(),
                advantages: advantages.iter().map(|a| vec![*a]).collect(),
            },
            _ => unreachable!("step regime"),
        })
        .collect();
    AdvantageSet {
        regime: Regime::Token,
        per_trajectory,
        ..step.clone()
    }
}

fn granularity_collapse() -> Verdict {
    let mut cfg = shipped_config();
    cfg.policy.max_response_len = 1;
    let lab = Lab::new(&cfg).expect("lab");
    let mut identical = 0;
    let batches = 10u64;
    for seed in 0..batches {
        let (policy, batch) = sampled_batch(&lab, 200 + seed, 64, 1.0);
        assert!(batch
            .iter()
            .flat_map(|t| t.records())
            .all(|r| r.response_ids.len() == 1));
        let (adv, _) = compute_advantages(&batch, &cfg.credit, lab.value_features, 1).expect("advantages");
        let (s, _) = steppo_update(&batch, &adv, &policy, &cfg.clip).expect("step update");
        let (t, _) = token_ppo_update(&batch, &as_token_set(&adv), &policy, &cfg.clip).expect("token update");
        let same = s.version() == t.version()
            && s.weights()
                .iter()
                .zip(t.weights())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        identical += usize::from(same);
    }
    verdict(
        identical as u64 == batches,
        format!("{identical}/{batches} batches bit-identical with one token per step"),
    )
}

fn prefix_tree_exactness() -> Verdict {
    let lab = Lab::new(&shipped_config()).expect("lab");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut node_ok, mut worst) = (0, 0.0f64);
    for b in 0..100 {
        let (_, batch) = sampled_batch(&lab, 300 + b, rng.gen_range(1..=24), 2.0);
        let records: Vec<_> = batch.iter().flat_map(|t| t.records()).collect();
        let replay = StepReplay::build(records.iter().copied());
        let mut prefixes = BTreeSet::new();
        for r in &records {
            let keys = step_key_sequence(r);
            for k in 1..=keys.len() {
                prefixes.insert(keys[..k].to_vec());
            }
        }
        node_ok += usize::from(replay.tree.unique_nodes() == prefixes.len());
        let policy = random_policy(&lab, &mut rng, 2.0, 0);
        let planned = replay.planned_logprobs(&policy).expect("non-empty");
        for (i, r) in records.iter().enumerate() {
            let naive = policy
                .action_logprob(&r.prompt_ids.ids, &r.response_ids.ids)
                .expect("valid")
                .per_token;
            for (p, n) in replay.record_logprobs(&planned, i).iter().zip(&naive) {
                worst = worst.max((p - n).abs());
            }
        }
    }
    let mut twin = PrefixTree::new();
    twin.insert(&[3u32, 1, 4, 1]);
    twin.insert(&[3u32, 1, 4, 1]);
    let half = twin.savings_ratio().expect("non-empty");
    verdict(
        node_ok == 100 && worst <= 1e-12 && half == 0.5,
        format!("{node_ok}/100 node counts match, replay max |diff| {worst:.2e} (tol 1e-12), twin savings {half}"),
    )
}

fn datapool_contracts() -> Verdict {
    let k = 2;
    let pool = Arc::new(
        Datapool::new(PoolConfig {
            capacity: 1500,
            max_staleness: k,
            ..PoolConfig::default()
        })
        .expect("pool"),
    );
    let lab = Lab::new(&shipped_config()).expect("lab");
    let producers = 4;
    let per_producer = 2500;
    let start = Arc::new(Barrier::new(producers + 1));
    let current = 5u64;
    let mut worst_lag = 0u64;
    let mut drawn_records = 0usize;
    thread::scope(|s| {
        for p in 0..producers {
            let (pool, lab, start) = (pool.clone(), &lab, start.clone());
            s.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(800 + p as u64);
                let mut sent = 0;
                let mut n = 0;
                start.wait();
                while sent < per_producer {
                    let (_, batch) = sampled_batch(lab, rng.gen(), 1, 1.0);
                    let version = rng.gen_range(0..=current);
                    for mut rec in batch.into_iter().next().expect("one").into_records() {
                        if sent == per_producer {
                            break;
                        }
                        rec.trace_id = format!("p{p}-{n}");
                        rec.policy_version = version;
                        pool.ingest(IngestEnvelope {
                            producer_id: format!("p{p}"),
                            payload: rec,
                            received_at_ms: now_ms(),
                        })
                        .expect("valid record");
                        sent += 1;
                    }
                    n += 1;
                }
            });
        }
        start.wait();
        let deadline = Instant::now() + Duration::from_secs(30);
        while Instant::now() < deadline {
            let b = pool.draw_batch(64, current);
            for r in &b.records {
                worst_lag = worst_lag.max(current - r.policy_version);
            }
            drawn_records += b.records.len();
            let st = pool.stats(current);
            if st.admitted + st.rejected == (producers * per_producer) as u64 {
                break;
            }
        }
    });
    let st = pool.stats(current);
    let conserved = st.admitted == st.drawn + st.evicted + st.resident as u64 && st.conserved();
    let pool_ok = conserved && st.admitted == 10_000 && worst_lag <= k && st.drawn as usize == drawn_records;

    let mut cfg = shipped_config();
    cfg.run.async_enabled = true;
    cfg.run.workers = 4;
    cfg.pool.max_staleness = k;
    cfg.run.iterations = 60;
    let run = run_async_seed(&cfg, 0, &AsyncHooks::default(), |_| {});
    let (async_ok, async_detail) = match &run {
        Ok(r) => {
            let max = r.rows.iter().map(|row| row.staleness_max).max().unwrap_or(0);
            (
                max <= k && r.worker_failures.is_empty(),
                format!("async run {} batches, max staleness {max}", r.rows.len()),
            )
        }
        Err(e) => (false, format!("async run failed: {e}")),
    };
    verdict(
        pool_ok && async_ok,
        format!(
            "admitted {} = drawn {} + evicted {} + resident {}; drawn max lag {worst_lag} (K={k}); {async_detail}",
            st.admitted, st.drawn, st.evicted, st.resident
        ),
    )
}

static SYNC_STEP: OnceLock<Vec<RunResult>> = OnceLock::new();

fn central_comparison() -> Verdict {
    let t0 = Instant::now();
    let cfg = shipped_config();
    let configs = [cfg.with_regime(Regime::Step), cfg.with_regime(Regime::Token)];
    let report = match harness::run_comparison(&configs) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("comparison failed: {e}")),
    };
    let step = report.summary(Regime::Step).expect("step summary");
    let (success, _) = step.mean_success();
    let wins = report.step_wins_over(Regime::Token).unwrap_or(0);
    let _ = SYNC_STEP.set(
        report
            .runs
            .iter()
            .filter(|r| r.regime == Regime::Step)
            .cloned()
            .collect(),
    );
    let s = seconds(t0);
    let per_seed: Vec<String> = step
        .final_returns
        .iter()
        .zip(&report.summary(Regime::Token).expect("token summary").final_returns)
        .map(|(a, b)| format!("{a:.4}>{b:.4}"))
        .collect();
    verdict(
        success >= 0.9 && wins >= 4 && s < 600.0,
        format!(
            "StepPO mean final success {success:.4} (need >= 0.9), return wins {wins}/5 (need >= 4) [{}], {s:.1}s (target 600s)",
            per_seed.join(" ")
        ),
    )
}

fn async_convergence() -> Verdict {
    let t0 = Instant::now();
    let base = shipped_config();
    let sync = SYNC_STEP.get_or_init(|| harness::run_sync(&base).expect("sync run"));
    let mut cfg: ExperimentConfig = base.clone();
    cfg.run.async_enabled = true;
    cfg.run.workers = 4;
    cfg.pool.max_staleness = 2;
    cfg.run.iterations = base.run.iterations * 3 / 2;
    let runs = match harness::run_async(&cfg) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("async run failed: {e}")),
    };
    let w = base.run.final_window;
    let mean = |rs: &[RunResult]| rs.iter().map(|r| r.final_success(w)).sum::<f64>() / rs.len() as f64;
    let (sync_s, async_s) = (mean(sync), mean(&runs));
    let s = seconds(t0);
    verdict(
        async_s >= 0.9 * sync_s && s < 900.0,
        format!(
            "async final success {async_s:.4} vs sync {sync_s:.4} (need >= {:.4}) after {} iterations, {s:.1}s (target 900s)",
            0.9 * sync_s,
            cfg.run.iterations
        ),
    )
}

type Criterion = (&'static str, &'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 10] = [
        ("1", "gae oracle equivalence", gae_oracle),
        ("2", "ratio factorization", ratio_factorization),
        ("3", "trust-region center", trust_region_center),
        ("4", "gradient correctness", gradient_correctness),
        ("5", "drift demonstration", drift_demonstration),
        ("6", "granularity collapse", granularity_collapse),
        ("7", "prefix-tree exactness", prefix_tree_exactness),
        ("8", "datapool contracts", datapool_contracts),
        ("9", "central comparison", central_comparison),
        ("10", "async convergence", async_convergence),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let selected: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.iter().any(|s| *s == id) {
            continue;
        }
        let v = check();
        failed += usize::from(!v.pass);
        println!(
            "criterion {id:>2} {:<24} {}  {}",
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
