//! Log-linear autoregressive policy over the toy vocabulary.
//!
//! Each response token is drawn from `softmax(W^T phi)` where `phi` is a
//! sparse binary feature vector built from the prompt (fact count, last
//! prompt token), the previous response token, and the position inside the
//! response. Log-probs, sampling and the score-function gradient are all
//! exact, which is what lets the update rules be checked against oracles.
//!
//! A response either ends with eos or has exactly `max_response_len` tokens
//! (truncated by the sampler). Anything else is rejected.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::{is_canonical, TokenId, Vocab};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PolicyError {
    #[error("response does not end with eos")]
    MissingEos,
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("weights have {got} entries, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("snapshot format: {0}")]
    Format(String),
}

/// Describes the feature map and the response budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicySpec {
    pub vocab_size: usize,
    /// Token whose occurrences in the prompt count revealed facts.
    pub separator_id: TokenId,
    pub count_buckets: usize,
    pub position_cap: usize,
    pub max_response_len: usize,
    pub eos_id: TokenId,
}

impl PolicySpec {
    pub fn for_vocab(vocab: &Vocab, separator_id: TokenId, max_response_len: usize) -> Self {
        Self {
            vocab_size: vocab.len(),
            separator_id,
            count_buckets: 8,
            position_cap: 4,
            max_response_len,
            eos_id: vocab.eos_id(),
        }
    }

    // Row layout: bias | fact count | last prompt token | previous token (BOS first) | position.
    pub fn row_bias(&self) -> usize {
        0
    }

    pub fn row_count(&self, count: usize) -> usize {
        1 + count.min(self.count_buckets - 1)
    }

    pub fn row_last_prompt(&self, tok: TokenId) -> usize {
        1 + self.count_buckets + tok as usize
    }

    /// `None` is the begin-of-response slot.
    pub fn row_prev(&self, tok: Option<TokenId>) -> usize {
        let base = 1 + self.count_buckets + self.vocab_size;
        tok.map_or(base, |t| base + 1 + t as usize)
    }

    pub fn row_position(&self, pos: usize) -> usize {
        1 + self.count_buckets + 2 * self.vocab_size + 1 + pos.min(self.position_cap)
    }

    pub fn feature_dim(&self) -> usize {
        1 + self.count_buckets + 2 * self.vocab_size + 1 + self.position_cap + 1
    }

    pub fn param_count(&self) -> usize {
        self.feature_dim() * self.vocab_size
    }

    fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Format(m.to_string()));
        if self.vocab_size == 0 || self.count_buckets == 0 || self.max_response_len == 0 {
            return bad("vocab_size, count_buckets and max_response_len must be positive");
        }
        if self.eos_id as usize >= self.vocab_size || self.separator_id as usize >= self.vocab_size {
            return bad("eos_id and separator_id must be vocabulary ids");
        }
        Ok(())
    }
}

/// Incrementally computed summary of a prompt: everything the features read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PromptContext {
    pub fact_count: usize,
    pub last_token: Option<TokenId>,
}

impl PromptContext {
    pub fn from_prompt(spec: &PolicySpec, prompt: &[TokenId]) -> Self {
        prompt.iter().fold(Self::default(), |ctx, &t| ctx.extend(spec, t))
    }

    pub fn extend(self, spec: &PolicySpec, tok: TokenId) -> Self {
        Self {
            fact_count: self.fact_count + usize::from(tok == spec.separator_id),
            last_token: Some(tok),
        }
    }
}

/// Active feature rows at one decoding position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveRows {
    rows: [usize; 5],
    len: usize,
}

impl ActiveRows {
    pub fn new(spec: &PolicySpec, ctx: &PromptContext, prev: Option<TokenId>, pos: usize) -> Self {
        let mut rows = [0; 5];
        let mut len = 0;
        let mut push = |r| {
            rows[len] = r;
            len += 1;
        };
        push(spec.row_bias());
        push(spec.row_count(ctx.fact_count));
        if let Some(t) = ctx.last_token {
            push(spec.row_last_prompt(t));
        }
        push(spec.row_prev(prev));
        push(spec.row_position(pos));
        Self { rows, len }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.rows[..self.len]
    }
}

/// Immutable parameter set with a version number.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    spec: PolicySpec,
    /// Row-major `feature_dim x vocab_size`.
    weights: Vec<f64>,
    version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionLogprob {
    pub total: f64,
    pub per_token: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse {
    pub ids: Vec<TokenId>,
    /// Per-token log-probs under the untempered, unmasked policy.
    pub token_logprobs: Vec<f64>,
}

impl PolicySnapshot {
    pub fn zeros(spec: PolicySpec) -> Self {
        Self {
            weights: vec![0.0; spec.param_count()],
            spec,
            version: 0,
        }
    }

    pub fn from_weights(spec: PolicySpec, weights: Vec<f64>, version: u64) -> Result<Self, PolicyError> {
        spec.validate()?;
        if weights.len() != spec.param_count() {
            return Err(PolicyError::ShapeMismatch {
                expected: spec.param_count(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(PolicyError::Format("non-finite weight".into()));
        }
        Ok(Self { spec, weights, version })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn weight(&self, row: usize, token: TokenId) -> f64 {
        self.weights[row * self.spec.vocab_size + token as usize]
    }

    fn logits_into(&self, rows: &ActiveRows, out: &mut [f64]) {
        let v = self.spec.vocab_size;
        out.fill(0.0);
        for &r in rows.as_slice() {
            let w = &self.weights[r * v..(r + 1) * v];
            for (o, x) in out.iter_mut().zip(w) {
                *o += x;
            }
        }
    }

    /// Log-softmax at the position after `prefix`.
    pub fn logprobs_at(&self, ctx: &PromptContext, prev: Option<TokenId>, pos: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.vocab_size];
        self.logits_into(&ActiveRows::new(&self.spec, ctx, prev, pos), &mut out);
        log_softmax_in_place(&mut out);
        out
    }

    pub fn token_logprobs(&self, prompt: &[TokenId], response_prefix: &[TokenId]) -> Vec<f64> {
        let ctx = PromptContext::from_prompt(&self.spec, prompt);
        self.logprobs_at(&ctx, response_prefix.last().copied(), response_prefix.len())
    }

    pub fn check_response(&self, response: &[TokenId]) -> Result<(), PolicyError> {
        let n = response.len();
        if n == 0 {
            return Err(PolicyError::InvalidResponse("empty".into()));
        }
        if n > self.spec.max_response_len {
            return Err(PolicyError::InvalidResponse(format!(
                "{n} tokens exceeds max_response_len {}",
                self.spec.max_response_len
            )));
        }
        if let Some(i) = response.iter().position(|&t| t as usize >= self.spec.vocab_size) {
            return Err(PolicyError::InvalidResponse(format!(
                "token {} out of range",
                response[i]
            )));
        }
        if response[..n - 1].contains(&self.spec.eos_id) {
            return Err(PolicyError::InvalidResponse("eos before the last position".into()));
        }
        if response[n - 1] != self.spec.eos_id && n < self.spec.max_response_len {
            return Err(PolicyError::MissingEos);
        }
        Ok(())
    }

    /// Per-token log-probs of `response`, summed left to right into `total`.
    pub fn action_logprob(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<ActionLogprob, PolicyError> {
        self.check_response(response)?;
        let ctx = PromptContext::from_prompt(&self.spec, prompt);
        Ok(self.action_logprob_ctx(&ctx, response))
    }

    pub(crate) fn action_logprob_ctx(&self, ctx: &PromptContext, response: &[TokenId]) -> ActionLogprob {
        let mut logits = vec![0.0; self.spec.vocab_size];
        let mut per_token = Vec::with_capacity(response.len());
        let mut prev = None;
        for (pos, &y) in response.iter().enumerate() {
            self.logits_into(&ActiveRows::new(&self.spec, ctx, prev, pos), &mut logits);
            log_softmax_in_place(&mut logits);
            per_token.push(logits[y as usize]);
            prev = Some(y);
        }
        let mut total = 0.0;
        for lp in &per_token {
            total += lp;
        }
        ActionLogprob { total, per_token }
    }

    /// Draws tokens until eos or `max_response_len`.
    ///
    /// With `canonical_only`, tokens that would make the sequence differ
    /// from its greedy re-encoding are masked out before sampling. Stored
    /// log-probs are always those of the plain policy at temperature 1.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        prompt: &[TokenId],
        rng: &mut R,
        temperature: f64,
        canonical_only: Option<&Vocab>,
    ) -> Result<SampledResponse, PolicyError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(PolicyError::BadTemperature(temperature));
        }
        let ctx = PromptContext::from_prompt(&self.spec, prompt);
        let v = self.spec.vocab_size;
        let mut logits = vec![0.0; v];
        let mut weights = vec![0.0; v];
        let mut ids = Vec::with_capacity(self.spec.max_response_len);
        let mut token_logprobs = Vec::with_capacity(self.spec.max_response_len);
        for pos in 0..self.spec.max_response_len {
            self.logits_into(
                &ActiveRows::new(&self.spec, &ctx, ids.last().copied(), pos),
                &mut logits,
            );
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (w, &z) in weights.iter_mut().zip(&logits) {
                *w = ((z - max) / temperature).exp();
            }
            if let Some(vocab) = canonical_only {
                let mut probe = ids.clone();
                probe.push(0);
                for (t, w) in weights.iter_mut().enumerate() {
                    *probe.last_mut().expect("non-empty") = t as TokenId;
                    if !is_canonical(&probe, vocab).unwrap_or(false) {
                        *w = 0.0;
                    }
                }
            }
            let y = draw(&weights, rng);
            log_softmax_in_place(&mut logits);
            token_logprobs.push(logits[y]);
            ids.push(y as TokenId);
            if y as TokenId == self.spec.eos_id {
                break;
            }
        }
        Ok(SampledResponse { ids, token_logprobs })
    }

    /// Argmax decoding; ties go to the lowest token id.
    pub fn greedy_action(&self, prompt: &[TokenId]) -> SampledResponse {
        let ctx = PromptContext::from_prompt(&self.spec, prompt);
        let mut logits = vec![0.0; self.spec.vocab_size];
        let mut ids = Vec::new();
        let mut token_logprobs = Vec::new();
        for pos in 0..self.spec.max_response_len {
            self.logits_into(
                &ActiveRows::new(&self.spec, &ctx, ids.last().copied(), pos),
                &mut logits,
            );
            log_softmax_in_place(&mut logits);
            let mut best = 0;
            for (t, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = t;
                }
            }
            token_logprobs.push(logits[best]);
            ids.push(best as TokenId);
            if best as TokenId == self.spec.eos_id {
                break;
            }
        }
        SampledResponse { ids, token_logprobs }
    }

    /// `grad_W log pi(response | prompt)`, accumulated into `out` scaled by `scale`.
    ///
    /// `positions` restricts the sum to a sub-range of the response, which
    /// is how per-token updates reuse it.
    pub fn accumulate_logprob_grad(
        &self,
        ctx: &PromptContext,
        response: &[TokenId],
        positions: std::ops::Range<usize>,
        scale: f64,
        out: &mut [f64],
    ) {
        let v = self.spec.vocab_size;
        let mut probs = vec![0.0; v];
        for pos in positions {
            let prev = if pos == 0 { None } else { Some(response[pos - 1]) };
            let rows = ActiveRows::new(&self.spec, ctx, prev, pos);
            self.logits_into(&rows, &mut probs);
            softmax_in_place(&mut probs);
            let y = response[pos] as usize;
            for &r in rows.as_slice() {
                let g = &mut out[r * v..(r + 1) * v];
                for (k, (gk, pk)) in g.iter_mut().zip(&probs).enumerate() {
                    let indicator = if k == y { 1.0 } else { 0.0 };
                    *gk += scale * (indicator - pk);
                }
            }
        }
    }

    /// Gradient of the summed per-position entropy over `positions`.
    pub fn accumulate_entropy_grad(
        &self,
        ctx: &PromptContext,
        response: &[TokenId],
        positions: std::ops::Range<usize>,
        scale: f64,
        out: &mut [f64],
    ) {
        let v = self.spec.vocab_size;
        let mut logp = vec![0.0; v];
        for pos in positions {
            let prev = if pos == 0 { None } else { Some(response[pos - 1]) };
            let rows = ActiveRows::new(&self.spec, ctx, prev, pos);
            self.logits_into(&rows, &mut logp);
            log_softmax_in_place(&mut logp);
            let entropy: f64 = -logp.iter().map(|l| l.exp() * l).sum::<f64>();
            for &r in rows.as_slice() {
                let g = &mut out[r * v..(r + 1) * v];
                for (gk, lk) in g.iter_mut().zip(&logp) {
                    *gk += scale * -(lk.exp() * (lk + entropy));
                }
            }
        }
    }

    pub fn logprob_grad(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
        self.check_response(response)?;
        let ctx = PromptContext::from_prompt(&self.spec, prompt);
        let mut g = vec![0.0; self.spec.param_count()];
        self.accumulate_logprob_grad(&ctx, response, 0..response.len(), 1.0, &mut g);
        Ok(g)
    }

    /// New snapshot one version ahead with `weights + step`.
    pub fn stepped(&self, step: &[f64]) -> Self {
        let weights = self.weights.iter().zip(step).map(|(w, s)| w + s).collect();
        Self {
            spec: self.spec,
            weights,
            version: self.version + 1,
        }
    }

    pub fn with_version(&self, version: u64) -> Self {
        Self {
            version,
            ..self.clone()
        }
    }

    /// Text dump: header, version, spec, shape, then one weight row per line.
    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(out, "{SNAPSHOT_HEADER}");
        let _ = writeln!(out, "version {}", self.version);
        let _ = writeln!(
            out,
            "spec {} {} {} {} {} {}",
            s.vocab_size, s.separator_id, s.count_buckets, s.position_cap, s.max_response_len, s.eos_id
        );
        let _ = writeln!(out, "shape {} {}", s.feature_dim(), s.vocab_size);
        for row in self.weights.chunks(s.vocab_size) {
            let line: Vec<String> = row.iter().map(|w| w.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, PolicyError> {
        let fmt = |m: &str| PolicyError::Format(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(SNAPSHOT_HEADER) {
            return Err(fmt("missing or unsupported header"));
        }
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("version "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fmt("bad version line"))?;
        let nums: Vec<usize> = lines
            .next()
            .and_then(|l| l.strip_prefix("spec "))
            .ok_or_else(|| fmt("bad spec line"))?
            .split(' ')
            .map(|x| x.parse().map_err(|_| fmt("bad spec field")))
            .collect::<Result<_, _>>()?;
        let [vocab_size, separator_id, count_buckets, position_cap, max_response_len, eos_id] = nums[..] else {
            return Err(fmt("spec line needs six fields"));
        };
        let spec = PolicySpec {
            vocab_size,
            separator_id: separator_id as TokenId,
            count_buckets,
            position_cap,
            max_response_len,
            eos_id: eos_id as TokenId,
        };
        spec.validate()?;
        let shape = format!("shape {} {}", spec.feature_dim(), spec.vocab_size);
        if lines.next() != Some(shape.as_str()) {
            return Err(fmt("shape line does not match spec"));
        }
        let mut weights = Vec::with_capacity(spec.param_count());
        for line in lines {
            for x in line.split(' ') {
                weights.push(x.parse::<f64>().map_err(|_| fmt("bad weight"))?);
            }
        }
        Self::from_weights(spec, weights, version)
    }
}

pub const SNAPSHOT_HEADER: &str = "steppo-snapshot/1";

fn draw<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if u < w {
            return i;
        }
        u -= w;
    }
    last
}

pub fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in z.iter() {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    for x in z.iter_mut() {
        *x -= lse;
    }
}

fn softmax_in_place(z: &mut [f64]) {
    log_softmax_in_place(z);
    for x in z.iter_mut() {
        *x = x.exp();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(max_len: usize) -> PolicySpec {
        PolicySpec::for_vocab(&Vocab::default_hopchain(), 6, max_len)
    }

    fn random_snapshot(seed: u64, scale: f64, spec: PolicySpec) -> PolicySnapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..spec.param_count()).map(|_| rng.gen_range(-scale..scale)).collect();
        PolicySnapshot::from_weights(spec, w, 0).unwrap()
    }

    const PROMPT: &[TokenId] = &[2, 6, 3];

    #[test]
    fn zero_weights_are_uniform() {
        let p = PolicySnapshot::zeros(spec(4));
        for lp in p.token_logprobs(PROMPT, &[]) {
            assert!((lp + 16f64.ln()).abs() < 1e-15);
        }
        let a = p.action_logprob(PROMPT, &[7]).unwrap();
        assert!((a.total + 16f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_column_dominates() {
        let s = spec(4);
        let mut w = vec![0.0; s.param_count()];
        w[s.row_bias() * s.vocab_size + 9] = 1e6;
        let p = PolicySnapshot::from_weights(s, w, 0).unwrap();
        let lp = p.token_logprobs(PROMPT, &[]);
        assert!(lp[9] > -1e-6);
        assert!(lp.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn normalization_on_random_weights() {
        for seed in 0..20 {
            let p = random_snapshot(seed, 3.0, spec(4));
            for prefix in [&[][..], &[0], &[0, 2], &[8, 1, 2]] {
                let sum: f64 = p.token_logprobs(PROMPT, prefix).iter().map(|x| x.exp()).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_is_left_to_right_sum() {
        let p = random_snapshot(1, 2.0, spec(4));
        let a = p.action_logprob(PROMPT, &[8, 3, 7]).unwrap();
        let mut acc = 0.0;
        for x in &a.per_token {
            acc += x;
        }
        assert_eq!(a.total, acc);
        for (i, x) in a.per_token.iter().enumerate() {
            let y = [8, 3, 7][i];
            assert_eq!(*x, p.token_logprobs(PROMPT, &[8, 3, 7][..i])[y as usize]);
        }
    }

    #[test]
    fn joint_matches_enumeration_at_length_three() {
        // Enumerate every length-3 sequence; the normalized joint restricted
        // to length-3 sequences equals the product of conditionals, so its
        // log must equal action_logprob.total once the length-3 mass is
        // accounted for.
        let s = spec(3);
        let p = random_snapshot(5, 1.5, s);
        let v = s.vocab_size as u32;
        let target = [9u32, 4, 7];
        let mut joint_target = 0.0;
        let mut mass = 0.0;
        for a in 0..v {
            let l0 = p.token_logprobs(PROMPT, &[]);
            for b in 0..v {
                let l1 = p.token_logprobs(PROMPT, &[a]);
                for c in 0..v {
                    let l2 = p.token_logprobs(PROMPT, &[a, b]);
                    let pr = (l0[a as usize] + l1[b as usize] + l2[c as usize]).exp();
                    mass += pr;
                    if [a, b, c] == target {
                        joint_target = pr;
                    }
                }
            }
        }
        assert!((mass - 1.0).abs() < 1e-10);
        let total = p.action_logprob(PROMPT, &target).unwrap().total;
        assert!(((joint_target / mass).ln() - total).abs() < 1e-10);
    }

    #[test]
    fn response_validation() {
        let p = PolicySnapshot::zeros(spec(3));
        assert_eq!(p.action_logprob(PROMPT, &[8, 3]), Err(PolicyError::MissingEos));
        assert!(p.action_logprob(PROMPT, &[8, 3, 2]).is_ok(), "truncated at max length");
        assert!(p.action_logprob(PROMPT, &[7, 7]).is_err());
        assert!(p.action_logprob(PROMPT, &[]).is_err());
        assert!(p.action_logprob(PROMPT, &[8, 3, 2, 7]).is_err());
    }

    #[test]
    fn sampling_determinism_and_logprobs() {
        let p = random_snapshot(2, 1.0, spec(4));
        let a = p
            .sample_action(PROMPT, &mut ChaCha8Rng::seed_from_u64(9), 1.0, None)
            .unwrap();
        let b = p
            .sample_action(PROMPT, &mut ChaCha8Rng::seed_from_u64(9), 1.0, None)
            .unwrap();
        assert_eq!(a, b);
        let scored = p.action_logprob(PROMPT, &a.ids).unwrap();
        assert_eq!(scored.per_token, a.token_logprobs);
        assert!(p
            .sample_action(PROMPT, &mut ChaCha8Rng::seed_from_u64(9), 0.0, None)
            .is_err());
    }

    #[test]
    fn low_temperature_is_greedy() {
        let p = random_snapshot(4, 2.0, spec(4));
        let g = p.greedy_action(PROMPT);
        for seed in 0..20 {
            let s = p
                .sample_action(PROMPT, &mut ChaCha8Rng::seed_from_u64(seed), 1e-4, None)
                .unwrap();
            assert_eq!(s.ids, g.ids);
        }
    }

    #[test]
    fn uniform_single_token_frequencies() {
        let p = PolicySnapshot::zeros(spec(1));
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 10_000;
        let mut counts = [0usize; 16];
        for _ in 0..n {
            let s = p.sample_action(PROMPT, &mut rng, 1.0, None).unwrap();
            assert_eq!(s.ids.len(), 1);
            counts[s.ids[0] as usize] += 1;
        }
        let q = 1.0 / 16.0;
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * q).abs() < 3.0 * sigma, "count {c}");
        }
    }

    #[test]
    fn canonical_only_sampling_never_drifts() {
        let vocab = Vocab::default_hopchain();
        let p = PolicySnapshot::zeros(spec(4));
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..300 {
            let s = p.sample_action(PROMPT, &mut rng, 1.0, Some(&vocab)).unwrap();
            assert!(is_canonical(&s.ids, &vocab).unwrap());
        }
    }

    fn fd_check(p: &PolicySnapshot, response: &[TokenId]) -> f64 {
        let g = p.logprob_grad(PROMPT, response).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..g.len() {
            let mut plus = p.weights().to_vec();
            plus[i] += h;
            let mut minus = p.weights().to_vec();
            minus[i] -= h;
            let lp = |w: Vec<f64>| {
                PolicySnapshot::from_weights(*p.spec(), w, 0)
                    .unwrap()
                    .action_logprob(PROMPT, response)
                    .unwrap()
                    .total
            };
            let fd = (lp(plus) - lp(minus)) / (2.0 * h);
            let denom = g[i].abs().max(fd.abs()).max(1e-3);
            worst = worst.max((g[i] - fd).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let p = random_snapshot(seed, 1.0, spec(4));
            assert!(fd_check(&p, &[8, 2, 7]) < 1e-6);
        }
    }

    #[test]
    fn score_function_has_zero_mean() {
        let p = random_snapshot(8, 1.5, spec(1));
        let mut acc = vec![0.0; p.spec().param_count()];
        for y in 0..16u32 {
            let prob = p.action_logprob(PROMPT, &[y]).unwrap().total.exp();
            let g = p.logprob_grad(PROMPT, &[y]).unwrap();
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += prob * gi;
            }
        }
        assert!(acc.iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let p = random_snapshot(3, 1.0, spec(4));
        let ctx = PromptContext::from_prompt(p.spec(), PROMPT);
        let response = [8u32, 2, 7];
        let entropy = |snap: &PolicySnapshot| -> f64 {
            (0..response.len())
                .map(|i| {
                    let lp = snap.token_logprobs(PROMPT, &response[..i]);
                    -lp.iter().map(|l| l.exp() * l).sum::<f64>()
                })
                .sum()
        };
        let mut g = vec![0.0; p.spec().param_count()];
        p.accumulate_entropy_grad(&ctx, &response, 0..3, 1.0, &mut g);
        let h = 1e-5;
        for i in (0..g.len()).step_by(7) {
            let mut w = p.weights().to_vec();
            w[i] += h;
            let up = entropy(&PolicySnapshot::from_weights(*p.spec(), w.clone(), 0).unwrap());
            w[i] -= 2.0 * h;
            let down = entropy(&PolicySnapshot::from_weights(*p.spec(), w, 0).unwrap());
            let fd = (up - down) / (2.0 * h);
            assert!((g[i] - fd).abs() < 1e-6 * g[i].abs().max(1.0));
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let p = random_snapshot(6, 1.0, spec(4)).with_version(42);
        let back = PolicySnapshot::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        assert!(PolicySnapshot::from_text("steppo-snapshot/0\n").is_err());
    }
}
