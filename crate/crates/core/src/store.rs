//! Step-native trajectory storage.
//!
//! A [`StepRecord`] is one `(s_t, a_t, r_t)` unit holding token-exact prompt
//! and response ids together with the rollout policy's per-token log-probs.
//! Nothing in this module retokenizes a stored field. The text-space
//! conversion exists only to demonstrate what is lost when a trajectory is
//! kept as messages and rebuilt by re-encoding.
//!
//! # JSONL layout
//!
//! The first line is the header `{"schema":"steppo/1"}`. Every following
//! line is one step record; consecutive lines with the same `trace_id` form
//! a trajectory. Rewards and log-probs are written as decimal strings in
//! shortest round-trip form; reading a file back reproduces every bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tokenizer::{decode, encode, TokenId, TokenSeq, TokenizerError, Vocab};

pub const SCHEMA_VERSION: &str = "steppo/1";

/// Reserved metadata keys.
pub mod meta {
    pub const PRODUCER: &str = "producer";
    /// Free-form agent report; semantics are left to the producer.
    pub const REPORT: &str = "report";
    pub const ENV_SEED: &str = "env_seed";
    /// Rollouts sharing a group share their initial state.
    pub const GROUP: &str = "group";
    pub const CURATION: &str = "curation";
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("step {got} appended where step {expected} was expected")]
    OutOfOrderStep { expected: usize, got: usize },
    #[error("append after terminal step")]
    AppendAfterTerminal,
    #[error("record for trace {got:?} appended to trajectory {expected:?}")]
    TraceMismatch { expected: String, got: String },
    #[error("schema version mismatch: expected {expected:?}, found {found:?}")]
    SchemaVersionMismatch { expected: String, found: String },
    #[error("malformed line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub trace_id: String,
    pub step_index: usize,
    pub prompt_ids: TokenSeq,
    pub response_ids: TokenSeq,
    #[serde(with = "exact_f64_vec")]
    pub old_token_logprobs: Vec<f64>,
    #[serde(with = "exact_f64")]
    pub reward: f64,
    pub done: bool,
    pub policy_version: u64,
    pub wall_time_ms: u64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl StepRecord {
    /// Checks the record-local invariants; returns a reason on failure.
    pub fn check(&self) -> Result<(), String> {
        if self.old_token_logprobs.len() != self.response_ids.len() {
            return Err(format!(
                "{} log-probs for {} response tokens",
                self.old_token_logprobs.len(),
                self.response_ids.len()
            ));
        }
        if self.response_ids.is_empty() {
            return Err("empty response".into());
        }
        if !self.reward.is_finite() {
            return Err(format!("non-finite reward {}", self.reward));
        }
        if let Some(lp) = self.old_token_logprobs.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
            return Err(format!("invalid log-prob {lp}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    trace_id: String,
    records: Vec<StepRecord>,
}

impl Trajectory {
    pub fn new(trace_id: impl Into<String>) -> Self {
        Self {
            trace_id: trace_id.into(),
            records: Vec::new(),
        }
    }

    /// Builds a trajectory by appending every record in order.
    pub fn from_records(records: Vec<StepRecord>) -> Result<Self, StoreError> {
        let trace = records.first().map(|r| r.trace_id.clone()).unwrap_or_default();
        let mut t = Self::new(trace);
        for r in records {
            t.append_step(r)?;
        }
        Ok(t)
    }

    pub fn trace_id(&self) -> &str {
        &self.trace_id
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<StepRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_terminal(&self) -> bool {
        self.records.last().is_some_and(|r| r.done)
    }

    pub fn token_count(&self) -> usize {
        self.records.iter().map(|r| r.response_ids.len()).sum()
    }

    /// Undiscounted sum of rewards.
    pub fn total_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum()
    }

    pub fn append_step(&mut self, record: StepRecord) -> Result<(), StoreError> {
        if self.is_terminal() {
            return Err(StoreError::AppendAfterTerminal);
        }
        if record.step_index != self.records.len() {
            return Err(StoreError::OutOfOrderStep {
                expected: self.records.len(),
                got: record.step_index,
            });
        }
        if record.trace_id != self.trace_id {
            return Err(StoreError::TraceMismatch {
                expected: self.trace_id.clone(),
                got: record.trace_id,
            });
        }
        self.records.push(record);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextMessage {
    pub role: Role,
    pub content: String,
}

/// A trajectory kept as chat messages: observations as user turns, actions
/// as assistant turns. Token ids and log-probs are gone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextTrajectory {
    pub trace_id: String,
    pub messages: Vec<TextMessage>,
    pub rewards: Vec<f64>,
    pub terminal: bool,
}

/// A step rebuilt from text by canonical re-encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RebuiltStep {
    pub step_index: usize,
    pub prompt_ids: Vec<TokenId>,
    pub response_ids: Vec<TokenId>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextRoundTrip {
    pub steps: Vec<RebuiltStep>,
    /// Per step: rebuilt ids differ from the stored ids.
    pub drift: Vec<bool>,
}

impl TextRoundTrip {
    pub fn changed_records(&self) -> usize {
        self.drift.iter().filter(|d| **d).count()
    }
}

pub fn to_text_space(traj: &Trajectory, vocab: &Vocab) -> Result<TextTrajectory, StoreError> {
    let mut messages = Vec::with_capacity(traj.len() * 2);
    let mut rewards = Vec::with_capacity(traj.len());
    for rec in traj.records() {
        messages.push(TextMessage {
            role: Role::User,
            content: decode(&rec.prompt_ids.ids, vocab)?,
        });
        messages.push(TextMessage {
            role: Role::Assistant,
            content: decode(&rec.response_ids.ids, vocab)?,
        });
        rewards.push(rec.reward);
    }
    Ok(TextTrajectory {
        trace_id: traj.trace_id().to_string(),
        messages,
        rewards,
        terminal: traj.is_terminal(),
    })
}

pub fn from_text_space(text: &TextTrajectory, vocab: &Vocab) -> Result<Vec<RebuiltStep>, StoreError> {
    let mut steps = Vec::with_capacity(text.rewards.len());
    for (i, pair) in text.messages.chunks(2).enumerate() {
        let [user, assistant] = pair else {
            return Err(StoreError::MalformedLine {
                line: i,
                message: "unpaired message".into(),
            });
        };
        if user.role != Role::User || assistant.role != Role::Assistant {
            return Err(StoreError::MalformedLine {
                line: i,
                message: "expected user then assistant".into(),
            });
        }
        steps.push(RebuiltStep {
            step_index: i,
            prompt_ids: encode(&user.content, vocab)?.ids,
            response_ids: encode(&assistant.content, vocab)?.ids,
            reward: text.rewards.get(i).copied().unwrap_or(0.0),
        });
    }
    Ok(steps)
}

/// Round-trips through text space and flags every step whose ids changed.
pub fn text_round_trip(traj: &Trajectory, vocab: &Vocab) -> Result<TextRoundTrip, StoreError> {
    let steps = from_text_space(&to_text_space(traj, vocab)?, vocab)?;
    let drift = steps
        .iter()
        .zip(traj.records())
        .map(|(s, r)| s.prompt_ids != r.prompt_ids.ids || s.response_ids != r.response_ids.ids)
        .collect();
    Ok(TextRoundTrip { steps, drift })
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
}

pub fn write_jsonl<W: Write>(trajectories: &[Trajectory], mut out: W) -> Result<(), StoreError> {
    let header = Header {
        schema: SCHEMA_VERSION.into(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::other)?;
    out.write_all(b"\n")?;
    for traj in trajectories {
        for rec in traj.records() {
            serde_json::to_writer(&mut out, rec).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Trajectory>, StoreError> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.ok_or(StoreError::MalformedLine {
        line: 1,
        message: "missing header".into(),
    })?;
    let header: Header = serde_json::from_str(&header).map_err(|e| StoreError::MalformedLine {
        line: 1,
        message: e.to_string(),
    })?;
    if header.schema != SCHEMA_VERSION {
        return Err(StoreError::SchemaVersionMismatch {
            expected: SCHEMA_VERSION.into(),
            found: header.schema,
        });
    }
    let mut out: Vec<Trajectory> = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        let rec: StepRecord = serde_json::from_str(&line).map_err(|e| StoreError::MalformedLine {
            line: lineno,
            message: e.to_string(),
        })?;
        let bad = |e: StoreError| StoreError::MalformedLine {
            line: lineno,
            message: e.to_string(),
        };
        match out.last_mut() {
            Some(t) if t.trace_id() == rec.trace_id && !t.is_terminal() => t.append_step(rec).map_err(bad)?,
            _ => {
                let mut t = Trajectory::new(rec.trace_id.clone());
                t.append_step(rec).map_err(bad)?;
                out.push(t);
            }
        }
    }
    Ok(out)
}

pub fn serialize_jsonl(trajectories: &[Trajectory], path: &Path) -> Result<(), StoreError> {
    write_jsonl(trajectories, BufWriter::new(File::create(path)?))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Trajectory>, StoreError> {
    read_jsonl(BufReader::new(File::open(path)?))
}

/// `f64` as a shortest round-trip decimal string.
pub(crate) mod exact_f64 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

pub(crate) mod exact_f64_vec {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.to_string()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        v.iter().map(|s| s.parse().map_err(D::Error::custom)).collect()
    }
}
