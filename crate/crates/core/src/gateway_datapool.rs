//! Ingestion gateway and staleness-bounded datapool.
//!
//! Producers hand the [`Gateway`] either step-native records (white-box
//! agents that report token ids and log-probs) or text turns (black-box
//! agents whose text is tokenized canonically at the boundary). Both become
//! [`IngestEnvelope`]s admitted purely on payload validity.
//!
//! The [`Datapool`] is safe to share between many producers and one trainer.
//! Records are evicted oldest-first when full. Records older than
//! `max_staleness` policy versions stay resident for audit but are never
//! served. Drawn records leave the pool, so at every quiescent point
//! `admitted == drawn + evicted + resident`.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::store::{meta, StepRecord, Trajectory};
use crate::tokenizer::{encode, Vocab};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PoolError {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid pool config: {0}")]
    InvalidConfig(String),
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestEnvelope {
    pub producer_id: String,
    pub payload: StepRecord,
    pub received_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Eviction {
    OldestFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub capacity: usize,
    pub max_staleness: u64,
    #[serde(default = "default_eviction")]
    pub eviction: Eviction,
}

fn default_eviction() -> Eviction {
    Eviction::OldestFirst
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            capacity: 8192,
            max_staleness: 2,
            eviction: Eviction::OldestFirst,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Admission {
    pub sequence: u64,
    /// Records evicted to make room.
    pub evicted: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProducerStats {
    pub admitted: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub resident: usize,
    pub admitted: u64,
    pub rejected: u64,
    pub drawn: u64,
    pub evicted: u64,
    pub version_histogram: BTreeMap<u64, usize>,
    /// Resident records by `current_version - policy_version`.
    pub staleness_histogram: BTreeMap<u64, usize>,
    pub per_producer: BTreeMap<String, ProducerStats>,
}

impl PoolStats {
    pub fn conserved(&self) -> bool {
        self.admitted == self.drawn + self.evicted + self.resident as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrawnBatch {
    pub records: Vec<StepRecord>,
    pub requested: usize,
    pub shortfall: usize,
}

#[derive(Debug, Default)]
struct TraceState {
    /// Admission sequence numbers of resident records, in step order.
    resident: Vec<u64>,
    next_index: usize,
    closed: bool,
    /// Some record was evicted or drawn; the remainder is not a full trajectory.
    broken: bool,
    first_seq: u64,
}

#[derive(Debug, Default)]
struct PoolInner {
    next_seq: u64,
    records: BTreeMap<u64, (String, StepRecord)>,
    traces: HashMap<String, TraceState>,
    admitted: u64,
    rejected: u64,
    drawn: u64,
    evicted: u64,
    per_producer: BTreeMap<String, ProducerStats>,
}

pub struct Datapool {
    cfg: PoolConfig,
    vocab_size: Option<usize>,
    inner: Mutex<PoolInner>,
    ready: Condvar,
}

fn lag(current: u64, version: u64) -> Option<u64> {
    current.checked_sub(version)
}

impl Datapool {
    pub fn new(cfg: PoolConfig) -> Result<Self, PoolError> {
        if cfg.capacity == 0 {
            return Err(PoolError::InvalidConfig("capacity must be positive".into()));
        }
        Ok(Self {
            cfg,
            vocab_size: None,
            inner: Mutex::new(PoolInner::default()),
            ready: Condvar::new(),
        })
    }

    /// Also reject token ids outside `0..vocab_size`.
    pub fn with_vocab_size(mut self, vocab_size: usize) -> Self {
        self.vocab_size = Some(vocab_size);
        self
    }

    pub fn config(&self) -> &PoolConfig {
        &self.cfg
    }

    fn lock(&self) -> MutexGuard<'_, PoolInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn validate(&self, inner: &PoolInner, rec: &StepRecord) -> Result<(), String> {
        rec.check()?;
        if rec.trace_id.is_empty() {
            return Err("empty trace id".into());
        }
        if let Some(v) = self.vocab_size {
            let bad = rec
                .prompt_ids
                .ids
                .iter()
                .chain(&rec.response_ids.ids)
                .find(|&&t| t as usize >= v);
            if let Some(t) = bad {
                return Err(format!("token id {t} outside vocabulary of {v}"));
            }
        }
        let (expected, closed) = inner
            .traces
            .get(&rec.trace_id)
            .map_or((0, false), |t| (t.next_index, t.closed));
        if closed {
            return Err(format!("trace {:?} already terminated", rec.trace_id));
        }
        if rec.step_index != expected {
            return Err(format!(
                "trace {:?}: step {} where {} was expected",
                rec.trace_id, rec.step_index, expected
            ));
        }
        Ok(())
    }

    pub fn ingest(&self, envelope: IngestEnvelope) -> Result<Admission, PoolError> {
        let mut inner = self.lock();
        let IngestEnvelope {
            producer_id, payload, ..
        } = envelope;
        if let Err(reason) = self.validate(&inner, &payload) {
            inner.rejected += 1;
            inner.per_producer.entry(producer_id).or_default().rejected += 1;
            return Err(PoolError::InvalidRecord(reason));
        }
        let seq = inner.next_seq;
        inner.next_seq += 1;
        let trace = inner.traces.entry(payload.trace_id.clone()).or_default();
        if trace.resident.is_empty() && trace.next_index == 0 {
            trace.first_seq = seq;
        }
        trace.resident.push(seq);
        trace.next_index += 1;
        trace.closed = payload.done;
        inner.records.insert(seq, (payload.trace_id.clone(), payload));
        inner.admitted += 1;
        inner.per_producer.entry(producer_id).or_default().admitted += 1;

        let mut evicted = 0;
        while inner.records.len() > self.cfg.capacity {
            let (&oldest, _) = inner.records.iter().next().expect("non-empty");
            let (trace_id, _) = inner.records.remove(&oldest).expect("present");
            if let Some(t) = inner.traces.get_mut(&trace_id) {
                t.resident.retain(|&s| s != oldest);
                t.broken = true;
            }
            inner.evicted += 1;
            evicted += 1;
        }
        drop(inner);
        self.ready.notify_all();
        Ok(Admission { sequence: seq, evicted })
    }

    fn eligible(&self, rec: &StepRecord, current: u64) -> bool {
        lag(current, rec.policy_version).is_some_and(|l| l <= self.cfg.max_staleness)
    }

    /// Complete, unbroken, fully eligible traces, oldest first.
    fn complete_traces(&self, inner: &PoolInner, current: u64) -> Vec<String> {
        let mut out: Vec<(u64, String)> = inner
            .traces
            .iter()
            .filter(|(_, t)| t.closed && !t.broken && !t.resident.is_empty())
            .filter(|(_, t)| t.resident.iter().all(|s| self.eligible(&inner.records[s].1, current)))
            .map(|(id, t)| (t.first_seq, id.clone()))
            .collect();
        out.sort();
        out.into_iter().map(|(_, id)| id).collect()
    }

    fn take(&self, inner: &mut PoolInner, trace_id: &str, seqs: &[u64]) -> Vec<StepRecord> {
        let mut out = Vec::with_capacity(seqs.len());
        for s in seqs {
            if let Some((_, rec)) = inner.records.remove(s) {
                out.push(rec);
            }
        }
        inner.drawn += out.len() as u64;
        if let Some(t) = inner.traces.get_mut(trace_id) {
            t.resident.retain(|s| !seqs.contains(s));
            if t.resident.is_empty() && t.closed {
                inner.traces.remove(trace_id);
            } else {
                t.broken = true;
            }
        }
        out
    }

    /// Up to `n` eligible records grouped by trace, complete trajectories
    /// first. Drawn records leave the pool.
    pub fn draw_batch(&self, n: usize, current_version: u64) -> DrawnBatch {
        let mut inner = self.lock();
        let mut records = Vec::new();
        for id in self.complete_traces(&inner, current_version) {
            let seqs = inner.traces[&id].resident.clone();
            if records.len() + seqs.len() > n {
                continue;
            }
            records.extend(self.take(&mut inner, &id, &seqs));
        }
        if records.len() < n {
            let mut rest: Vec<(u64, String)> = inner
                .traces
                .iter()
                .filter(|(_, t)| !t.resident.is_empty())
                .map(|(id, t)| (t.resident[0], id.clone()))
                .collect();
            rest.sort();
            for (_, id) in rest {
                let budget = n - records.len();
                if budget == 0 {
                    break;
                }
                let seqs: Vec<u64> = inner.traces[&id]
                    .resident
                    .iter()
                    .copied()
                    .filter(|s| self.eligible(&inner.records[s].1, current_version))
                    .take(budget)
                    .collect();
                if !seqs.is_empty() {
                    records.extend(self.take(&mut inner, &id, &seqs));
                }
            }
        }
        let shortfall = n.saturating_sub(records.len());
        DrawnBatch {
            records,
            requested: n,
            shortfall,
        }
    }

    /// Up to `count` complete eligible trajectories, oldest first.
    pub fn draw_trajectories(&self, count: usize, current_version: u64) -> Vec<Trajectory> {
        let mut inner = self.lock();
        self.draw_trajectories_locked(&mut inner, count, current_version)
    }

    fn draw_trajectories_locked(&self, inner: &mut PoolInner, count: usize, current: u64) -> Vec<Trajectory> {
        let ids: Vec<String> = self.complete_traces(inner, current).into_iter().take(count).collect();
        ids.into_iter()
            .map(|id| {
                let seqs = inner.traces[&id].resident.clone();
                let recs = self.take(inner, &id, &seqs);
                Trajectory::from_records(recs).expect("resident traces are contiguous")
            })
            .collect()
    }

    /// Waits until `count` complete eligible trajectories exist or `timeout`
    /// passes, then draws what is there.
    pub fn wait_for_trajectories(&self, count: usize, current_version: u64, timeout: Duration) -> Vec<Trajectory> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.lock();
        loop {
            let ready = self.complete_traces(&inner, current_version).len();
            let now = Instant::now();
            if ready >= count || now >= deadline {
                return self.draw_trajectories_locked(&mut inner, count, current_version);
            }
            inner = self
                .ready
                .wait_timeout(inner, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Records a producer may still expect to be served at `current_version`.
    pub fn eligible_count(&self, current_version: u64) -> usize {
        let inner = self.lock();
        inner
            .records
            .values()
            .filter(|(_, r)| self.eligible(r, current_version))
            .count()
    }

    /// Complete trajectories that `draw_trajectories` would serve right now.
    pub fn eligible_trajectories(&self, current_version: u64) -> usize {
        let inner = self.lock();
        self.complete_traces(&inner, current_version).len()
    }

    pub fn stats(&self, current_version: u64) -> PoolStats {
        let inner = self.lock();
        let mut version_histogram = BTreeMap::new();
        let mut staleness_histogram = BTreeMap::new();
        for (_, r) in inner.records.values() {
            *version_histogram.entry(r.policy_version).or_default() += 1;
            if let Some(l) = lag(current_version, r.policy_version) {
                *staleness_histogram.entry(l).or_default() += 1;
            }
        }
        PoolStats {
            resident: inner.records.len(),
            admitted: inner.admitted,
            rejected: inner.rejected,
            drawn: inner.drawn,
            evicted: inner.evicted,
            version_histogram,
            staleness_histogram,
            per_producer: inner.per_producer.clone(),
        }
    }

    /// Resident records in admission order, e.g. for a JSONL export.
    pub fn snapshot_records(&self) -> Vec<StepRecord> {
        self.lock().records.values().map(|(_, r)| r.clone()).collect()
    }
}

/// A turn reported by an agent that only exposes text.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTurn {
    pub trace_id: String,
    pub step_index: usize,
    pub prompt: String,
    pub response: String,
    /// Log-probs as the agent reported them, one per canonical response token.
    pub token_logprobs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub policy_version: u64,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProducerMessage {
    StepNative(StepRecord),
    Text(TextTurn),
}

/// Normalizes producer messages into step-native envelopes for a pool.
#[derive(Clone)]
pub struct Gateway {
    vocab: Arc<Vocab>,
    pool: Arc<Datapool>,
}

impl Gateway {
    pub fn new(vocab: Arc<Vocab>, pool: Arc<Datapool>) -> Self {
        Self { vocab, pool }
    }

    pub fn pool(&self) -> &Arc<Datapool> {
        &self.pool
    }

    pub fn normalize(&self, producer_id: &str, msg: ProducerMessage) -> Result<IngestEnvelope, PoolError> {
        let mut payload = match msg {
            ProducerMessage::StepNative(r) => r,
            ProducerMessage::Text(t) => {
                let enc = |s: &str| encode(s, &self.vocab).map_err(|e| PoolError::InvalidRecord(e.to_string()));
                StepRecord {
                    trace_id: t.trace_id,
                    step_index: t.step_index,
                    prompt_ids: enc(&t.prompt)?,
                    response_ids: enc(&t.response)?,
                    old_token_logprobs: t.token_logprobs,
                    reward: t.reward,
                    done: t.done,
                    policy_version: t.policy_version,
                    wall_time_ms: now_ms(),
                    metadata: t.metadata,
                }
            }
        };
        payload
            .metadata
            .entry(meta::PRODUCER.to_string())
            .or_insert_with(|| producer_id.to_string());
        Ok(IngestEnvelope {
            producer_id: producer_id.to_string(),
            payload,
            received_at_ms: now_ms(),
        })
    }

    pub fn submit(&self, producer_id: &str, msg: ProducerMessage) -> Result<Admission, PoolError> {
        self.pool.ingest(self.normalize(producer_id, msg)?)
    }
}
