//! Toy subword tokenizer with greedy longest-match encoding and a drift auditor.
//!
//! The vocabulary is a small alphabet of single-character atoms plus merge
//! entries that concatenate atoms. Encoding is greedy longest-match from the
//! left, which makes the canonical segmentation of any text unique. Sequences
//! emitted token-by-token by a sampler need not be canonical, and for those
//! `encode(decode(z)) != z`. [`drift_audit`] measures exactly that.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Dense token identifier.
pub type TokenId = u32;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TokenizerError {
    #[error("unknown character {ch:?} at byte offset {offset}")]
    UnknownCharacter { ch: char, offset: usize },
    #[error("unknown token id {0}")]
    UnknownTokenId(TokenId),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("vocab file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

/// A token sequence plus whether the greedy encoder produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub canonical: bool,
}

impl TokenSeq {
    /// A sequence of unknown provenance, e.g. emitted by a sampler.
    pub fn raw(ids: Vec<TokenId>) -> Self {
        Self { ids, canonical: false }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    /// id -> string, dense.
    strings: Vec<String>,
    atoms: Vec<TokenId>,
    merges: Vec<TokenId>,
    eos_id: TokenId,
    lookup: HashMap<String, TokenId>,
    /// Longest entry length in characters.
    max_chars: usize,
}

impl Vocab {
    /// Builds a vocabulary from `(string, id)` entries. Single-character
    /// strings are atoms; longer strings are merges and must be spelled with
    /// atoms.
    pub fn new(entries: Vec<(String, TokenId)>, eos_id: TokenId) -> Result<Self, TokenizerError> {
        if entries.is_empty() {
            return Err(TokenizerError::InvalidVocab("no entries".into()));
        }
        let n = entries.len();
        let mut slots: Vec<Option<String>> = vec![None; n];
        let mut lookup = HashMap::with_capacity(n);
        for (s, id) in entries {
            if s.is_empty() {
                return Err(TokenizerError::InvalidVocab(format!("empty string for id {id}")));
            }
            let idx = id as usize;
            if idx >= n {
                return Err(TokenizerError::InvalidVocab(format!(
                    "id {id} is not dense (vocab has {n} entries)"
                )));
            }
            if slots[idx].is_some() {
                return Err(TokenizerError::InvalidVocab(format!("duplicate id {id}")));
            }
            if lookup.insert(s.clone(), id).is_some() {
                return Err(TokenizerError::InvalidVocab(format!("duplicate string {s:?}")));
            }
            slots[idx] = Some(s);
        }
        let strings: Vec<String> = slots
            .into_iter()
            .map(|s| s.expect("dense ids fill every slot"))
            .collect();

        let mut atoms = Vec::new();
        let mut merges = Vec::new();
        for (id, s) in strings.iter().enumerate() {
            if s.chars().count() == 1 {
                atoms.push(id as TokenId);
            } else {
                merges.push(id as TokenId);
            }
        }
        for &m in &merges {
            let s = &strings[m as usize];
            if let Some(ch) = s.chars().find(|c| !lookup.contains_key(&c.to_string())) {
                return Err(TokenizerError::InvalidVocab(format!(
                    "merge {s:?} uses {ch:?}, which is not an atom"
                )));
            }
        }
        let eos_str = strings
            .get(eos_id as usize)
            .ok_or_else(|| TokenizerError::InvalidVocab(format!("eos id {eos_id} out of range")))?;
        if eos_str.chars().count() != 1 {
            return Err(TokenizerError::InvalidVocab("eos must be an atom".into()));
        }
        if merges.iter().any(|&m| strings[m as usize].contains(eos_str.as_str())) {
            return Err(TokenizerError::InvalidVocab("eos string appears inside a merge".into()));
        }
        let max_chars = strings.iter().map(|s| s.chars().count()).max().unwrap_or(1);
        Ok(Self {
            strings,
            atoms,
            merges,
            eos_id,
            lookup,
            max_chars,
        })
    }

    /// Eight atoms (`s a w x y z > $`), eight verb+entity merges and `$` as eos.
    pub fn default_hopchain() -> Self {
        let atoms = ["s", "a", "w", "x", "y", "z", ">", "$"];
        let merges = ["sw", "sx", "sy", "sz", "aw", "ax", "ay", "az"];
        let entries = atoms
            .iter()
            .chain(merges.iter())
            .enumerate()
            .map(|(i, s)| (s.to_string(), i as TokenId))
            .collect();
        Self::new(entries, 7).expect("default vocab is valid")
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn eos_str(&self) -> &str {
        &self.strings[self.eos_id as usize]
    }

    pub fn atoms(&self) -> &[TokenId] {
        &self.atoms
    }

    pub fn merges(&self) -> &[TokenId] {
        &self.merges
    }

    pub fn token_str(&self, id: TokenId) -> Result<&str, TokenizerError> {
        self.strings
            .get(id as usize)
            .map(String::as_str)
            .ok_or(TokenizerError::UnknownTokenId(id))
    }

    pub fn id_of(&self, s: &str) -> Option<TokenId> {
        self.lookup.get(s).copied()
    }

    /// Parses the plain-text format: one entry per line, `<string>\t<id>`,
    /// with an optional third column `eos` marking the end-of-action token.
    pub fn parse_spec(text: &str) -> Result<Self, TokenizerError> {
        let mut entries = Vec::new();
        let mut eos = None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            let s = cols.next().unwrap_or_default();
            let id = cols.next().ok_or_else(|| TokenizerError::Parse {
                line: lineno,
                message: "expected <string>\\t<id>".into(),
            })?;
            let id: TokenId = id.trim().parse().map_err(|_| TokenizerError::Parse {
                line: lineno,
                message: format!("bad id {id:?}"),
            })?;
            match cols.next() {
                None => {}
                Some("eos") => {
                    if eos.replace(id).is_some() {
                        return Err(TokenizerError::Parse {
                            line: lineno,
                            message: "second eos entry".into(),
                        });
                    }
                }
                Some(other) => {
                    return Err(TokenizerError::Parse {
                        line: lineno,
                        message: format!("unknown flag {other:?}"),
                    })
                }
            }
            if cols.next().is_some() {
                return Err(TokenizerError::Parse {
                    line: lineno,
                    message: "too many columns".into(),
                });
            }
            entries.push((s.to_string(), id));
        }
        let eos = eos.ok_or_else(|| TokenizerError::InvalidVocab("no eos entry".into()))?;
        Self::new(entries, eos)
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path).map_err(|e| TokenizerError::Io(e.to_string()))?;
        Self::parse_spec(&text)
    }

    pub fn to_spec(&self) -> String {
        let mut out = String::new();
        for (id, s) in self.strings.iter().enumerate() {
            if id as TokenId == self.eos_id {
                let _ = writeln!(out, "{s}\t{id}\teos");
            } else {
                let _ = writeln!(out, "{s}\t{id}");
            }
        }
        out
    }
}

/// Greedy longest-match segmentation, left to right.
pub fn encode(text: &str, vocab: &Vocab) -> Result<TokenSeq, TokenizerError> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut ids = Vec::with_capacity(chars.len());
    let mut pos = 0;
    while pos < chars.len() {
        let start = chars[pos].0;
        let longest = vocab.max_chars.min(chars.len() - pos);
        let mut matched = None;
        for len in (1..=longest).rev() {
            let end = chars.get(pos + len).map_or(text.len(), |&(b, _)| b);
            if let Some(id) = vocab.id_of(&text[start..end]) {
                matched = Some((id, len));
                break;
            }
        }
        let (id, len) = matched.ok_or(TokenizerError::UnknownCharacter {
            ch: chars[pos].1,
            offset: start,
        })?;
        ids.push(id);
        pos += len;
    }
    Ok(TokenSeq { ids, canonical: true })
}

pub fn decode(ids: &[TokenId], vocab: &Vocab) -> Result<String, TokenizerError> {
    let mut out = String::with_capacity(ids.len() * 2);
    for &id in ids {
        out.push_str(vocab.token_str(id)?);
    }
    Ok(out)
}

/// True when `ids` is exactly what the greedy encoder produces for its text.
pub fn is_canonical(ids: &[TokenId], vocab: &Vocab) -> Result<bool, TokenizerError> {
    let text = decode(ids, vocab)?;
    Ok(encode(&text, vocab)?.ids == ids)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftEntry {
    pub original: Vec<TokenId>,
    pub reencoded: Vec<TokenId>,
    pub drifted: bool,
}

pub fn drift_audit(ids: &TokenSeq, vocab: &Vocab) -> Result<DriftEntry, TokenizerError> {
    let text = decode(&ids.ids, vocab)?;
    let reencoded = encode(&text, vocab)?.ids;
    let drifted = reencoded != ids.ids;
    debug_assert!(!(ids.canonical && drifted), "canonical sequence drifted");
    Ok(DriftEntry {
        original: ids.ids.clone(),
        reencoded,
        drifted,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub entries: Vec<DriftEntry>,
}

impl DriftReport {
    pub fn audit<'a, I>(seqs: I, vocab: &Vocab) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = &'a TokenSeq>,
    {
        let entries = seqs
            .into_iter()
            .map(|s| drift_audit(s, vocab))
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn drifted(&self) -> usize {
        self.entries.iter().filter(|e| e.drifted).count()
    }

    /// Fraction of drifted sequences; 0 for an empty report.
    pub fn drift_rate(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.drifted() as f64 / self.entries.len() as f64
        }
    }
}
