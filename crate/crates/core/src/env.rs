//! Step-level MDP interface and HopChain, a synthetic multi-hop retrieval task.
//!
//! A chain `e_0 -> e_1 -> ... -> e_K` is hidden from the agent. The first
//! observation reveals only the query entity `e_0`. Searching the most
//! recently revealed entity reveals the next link; answering ends the
//! episode and pays `terminal_reward` only when the answer is `e_K` and
//! `e_K` has already been revealed; an unsupported guess counts as wrong.
//! Feedback never lives in a separate artifact: it is folded into the next
//! state's rendering.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::store::Trajectory;
use crate::tokenizer::{decode, encode, TokenId, TokenSeq, TokenizerError, Vocab};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("invalid HopChain spec: {0}")]
    InvalidSpec(String),
    #[error("step called on a terminal state")]
    TerminalStateStepped,
    #[error("trajectory is not complete")]
    IncompleteTrajectory,
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// Surface syntax of actions and observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopGrammar {
    pub search: String,
    pub answer: String,
    pub separator: String,
}

impl Default for HopGrammar {
    fn default() -> Self {
        Self {
            search: "s".into(),
            answer: "a".into(),
            separator: ">".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopChainSpec {
    /// `e_0..e_K`; `e_0` is the query, `e_K` the answer.
    pub chain: Vec<String>,
    pub max_steps: usize,
    pub step_penalty: f64,
    pub terminal_reward: f64,
    pub seed: u64,
}

impl HopChainSpec {
    /// Draws a chain of `hops + 1` distinct entities from `pool`, determined by `seed`.
    pub fn sample(
        pool: &[String],
        hops: usize,
        max_steps: usize,
        step_penalty: f64,
        terminal_reward: f64,
        seed: u64,
    ) -> Result<Self, EnvError> {
        if pool.len() < hops + 1 {
            return Err(EnvError::InvalidSpec(format!(
                "entity pool of {} cannot form a {hops}-hop chain",
                pool.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chain = pool.to_vec();
        chain.shuffle(&mut rng);
        chain.truncate(hops + 1);
        Ok(Self {
            chain,
            max_steps,
            step_penalty,
            terminal_reward,
            seed,
        })
    }

    pub fn hops(&self) -> usize {
        self.chain.len().saturating_sub(1)
    }

    pub fn answer(&self) -> &str {
        &self.chain[self.chain.len() - 1]
    }

    pub fn validate(&self, vocab: &Vocab, grammar: &HopGrammar) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidSpec(m));
        if self.chain.len() < 2 {
            return bad("chain needs at least one hop".into());
        }
        if self.max_steps < self.chain.len() {
            return bad(format!(
                "max_steps {} < hops + 1 = {}",
                self.max_steps,
                self.chain.len()
            ));
        }
        if !(self.step_penalty <= 0.0) {
            return bad(format!("step_penalty {} must be <= 0", self.step_penalty));
        }
        if !self.terminal_reward.is_finite() {
            return bad("terminal_reward must be finite".into());
        }
        let reserved = [
            grammar.search.as_str(),
            grammar.answer.as_str(),
            grammar.separator.as_str(),
            vocab.eos_str(),
        ];
        for (i, e) in self.chain.iter().enumerate() {
            if self.chain[..i].contains(e) {
                return bad(format!("entity {e:?} repeats"));
            }
            if e.chars().count() != 1 || vocab.id_of(e).is_none() {
                return bad(format!("entity {e:?} is not a vocabulary atom"));
            }
            if reserved.contains(&e.as_str()) {
                return bad(format!("entity {e:?} collides with grammar or eos"));
            }
        }
        for sym in &reserved[..3] {
            if sym.chars().count() != 1 || vocab.id_of(sym).is_none() {
                return bad(format!("grammar symbol {sym:?} is not a vocabulary atom"));
            }
        }
        Ok(())
    }
}

/// What the agent can see: the revealed prefix of the chain and its budget.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HopView {
    /// `e_0..e_m`, the entities revealed so far.
    pub revealed: Vec<String>,
    pub remaining_steps: usize,
    pub terminal: bool,
}

impl HopView {
    pub fn query(&self) -> &str {
        &self.revealed[0]
    }

    pub fn fact_count(&self) -> usize {
        self.revealed.len() - 1
    }

    pub fn frontier(&self) -> &str {
        &self.revealed[self.revealed.len() - 1]
    }

    /// Facts as `(from, to)` links.
    pub fn facts(&self) -> impl Iterator<Item = (&str, &str)> {
        self.revealed.windows(2).map(|w| (w[0].as_str(), w[1].as_str()))
    }

    pub fn render(&self, grammar: &HopGrammar) -> String {
        self.revealed.join(&grammar.separator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepState {
    pub trace_id: String,
    pub step_index: usize,
    pub prompt_ids: TokenSeq,
    pub view: HopView,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParsedAction {
    Search(String),
    Answer(String),
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAction {
    pub response_ids: TokenSeq,
    pub parsed: ParsedAction,
}

impl StepAction {
    /// Parses a response of the form `<verb><entity><eos>`. Anything else,
    /// including a response truncated before eos, is malformed.
    pub fn from_response(response_ids: TokenSeq, vocab: &Vocab, grammar: &HopGrammar) -> Result<Self, EnvError> {
        let text = decode(&response_ids.ids, vocab)?;
        let parsed = parse_action(&text, vocab.eos_str(), grammar);
        Ok(Self { response_ids, parsed })
    }
}

pub fn parse_action(text: &str, eos: &str, grammar: &HopGrammar) -> ParsedAction {
    let Some(body) = text.strip_suffix(eos) else {
        return ParsedAction::Malformed;
    };
    let mut chars = body.chars();
    let (Some(verb), Some(entity), None) = (chars.next(), chars.next(), chars.next()) else {
        return ParsedAction::Malformed;
    };
    let entity = entity.to_string();
    if [
        grammar.search.as_str(),
        grammar.answer.as_str(),
        grammar.separator.as_str(),
        eos,
    ]
    .contains(&entity.as_str())
    {
        return ParsedAction::Malformed;
    }
    let verb = verb.to_string();
    if verb == grammar.search {
        ParsedAction::Search(entity)
    } else if verb == grammar.answer {
        ParsedAction::Answer(entity)
    } else {
        ParsedAction::Malformed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub next: StepState,
    pub done: bool,
    /// A grounded, correct answer ended the episode.
    pub success: bool,
}

/// One HopChain episode instance.
#[derive(Debug, Clone)]
pub struct HopChain {
    spec: HopChainSpec,
    vocab: Arc<Vocab>,
    grammar: HopGrammar,
}

impl HopChain {
    pub fn new(spec: HopChainSpec, vocab: Arc<Vocab>, grammar: HopGrammar) -> Result<Self, EnvError> {
        spec.validate(&vocab, &grammar)?;
        Ok(Self { spec, vocab, grammar })
    }

    pub fn spec(&self) -> &HopChainSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn grammar(&self) -> &HopGrammar {
        &self.grammar
    }

    /// Token id of the fact separator, the token whose count in a prompt is
    /// the number of revealed facts.
    pub fn separator_id(&self) -> TokenId {
        self.vocab.id_of(&self.grammar.separator).expect("validated grammar")
    }

    fn make_state(&self, trace_id: &str, step_index: usize, view: HopView) -> Result<StepState, EnvError> {
        let prompt_ids = encode(&view.render(&self.grammar), &self.vocab)?;
        Ok(StepState {
            trace_id: trace_id.to_string(),
            step_index,
            prompt_ids,
            view,
        })
    }

    pub fn reset(&self, trace_id: &str) -> Result<StepState, EnvError> {
        let view = HopView {
            revealed: vec![self.spec.chain[0].clone()],
            remaining_steps: self.spec.max_steps,
            terminal: false,
        };
        self.make_state(trace_id, 0, view)
    }

    pub fn step(&self, state: &StepState, action: &StepAction) -> Result<StepOutcome, EnvError> {
        if state.view.terminal {
            return Err(EnvError::TerminalStateStepped);
        }
        let mut view = state.view.clone();
        view.remaining_steps = view.remaining_steps.saturating_sub(1);
        let (mut reward, mut done, mut success) = (self.spec.step_penalty, false, false);
        match &action.parsed {
            ParsedAction::Search(entity) => {
                // Only the last revealed entity has an unrevealed successor.
                let m = view.fact_count();
                if entity == view.frontier() && m + 1 < self.spec.chain.len() {
                    view.revealed.push(self.spec.chain[m + 1].clone());
                }
            }
            ParsedAction::Answer(entity) => {
                done = true;
                // An answer only counts once the evidence for it is in view.
                let grounded = view.revealed.iter().any(|e| e == entity);
                success = grounded && entity == self.spec.answer();
                reward = if success { self.spec.terminal_reward } else { 0.0 };
            }
            ParsedAction::Malformed => {}
        }
        if state.step_index + 1 >= self.spec.max_steps {
            done = true;
        }
        view.terminal = done;
        let next = self.make_state(&state.trace_id, state.step_index + 1, view)?;
        Ok(StepOutcome {
            reward,
            next,
            done,
            success,
        })
    }
}

/// `sum_t gamma^t r_t` over a complete trajectory.
pub fn episode_return(traj: &Trajectory, gamma: f64) -> Result<f64, EnvError> {
    if !traj.is_terminal() {
        return Err(EnvError::IncompleteTrajectory);
    }
    let mut total = 0.0;
    let mut discount = 1.0;
    for rec in traj.records() {
        total += discount * rec.reward;
        discount *= gamma;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::StepRecord;
    use rand::Rng;

    fn env_with(chain: &[&str], max_steps: usize, step_penalty: f64) -> HopChain {
        let spec = HopChainSpec {
            chain: chain.iter().map(|s| s.to_string()).collect(),
            max_steps,
            step_penalty,
            terminal_reward: 1.0,
            seed: 0,
        };
        HopChain::new(spec, Arc::new(Vocab::default_hopchain()), HopGrammar::default()).unwrap()
    }

    fn act(env: &HopChain, text: &str) -> StepAction {
        let ids = encode(text, env.vocab()).unwrap();
        StepAction::from_response(ids, env.vocab(), env.grammar()).unwrap()
    }

    #[test]
    fn reset_reveals_only_query() {
        let env = env_with(&["w", "x", "y"], 8, 0.0);
        let s0 = env.reset("t").unwrap();
        assert_eq!(s0.view.revealed, vec!["w".to_string()]);
        assert_eq!(s0.view.fact_count(), 0);
        assert_eq!(decode(&s0.prompt_ids.ids, env.vocab()).unwrap(), "w");
        assert_eq!(env.reset("t").unwrap(), s0);
    }

    #[test]
    fn invalid_specs() {
        let vocab = Vocab::default_hopchain();
        let g = HopGrammar::default();
        let mut spec = HopChainSpec {
            chain: vec!["w".into(), "x".into()],
            max_steps: 0,
            step_penalty: 0.0,
            terminal_reward: 1.0,
            seed: 0,
        };
        assert!(matches!(spec.validate(&vocab, &g), Err(EnvError::InvalidSpec(_))));
        spec.max_steps = 2;
        assert!(spec.validate(&vocab, &g).is_ok());
        spec.chain = vec!["w".into(), "w".into()];
        assert!(spec.validate(&vocab, &g).is_err());
        spec.chain = vec!["w".into(), "s".into()];
        assert!(spec.validate(&vocab, &g).is_err());
        spec.chain = vec!["w".into(), "x".into()];
        spec.step_penalty = 0.5;
        assert!(spec.validate(&vocab, &g).is_err());
    }

    #[test]
    fn one_hop_optimal_play() {
        let env = env_with(&["w", "x"], 8, 0.0);
        let s0 = env.reset("t").unwrap();
        let o1 = env.step(&s0, &act(&env, "sw$")).unwrap();
        assert_eq!((o1.reward, o1.done), (0.0, false));
        assert_eq!(decode(&o1.next.prompt_ids.ids, env.vocab()).unwrap(), "w>x");
        let o2 = env.step(&o1.next, &act(&env, "ax$")).unwrap();
        assert_eq!((o2.reward, o2.done), (1.0, true));
        assert_eq!(
            env.step(&o2.next, &act(&env, "ax$")).unwrap_err(),
            EnvError::TerminalStateStepped
        );
    }

    #[test]
    fn unrevealed_answer_is_not_rewarded() {
        let env = env_with(&["w", "x"], 8, 0.0);
        let s0 = env.reset("t").unwrap();
        let o = env.step(&s0, &act(&env, "ax$")).unwrap();
        assert_eq!((o.reward, o.done), (0.0, true));
    }

    #[test]
    fn wrong_answer_and_unrevealed_search() {
        let env = env_with(&["w", "x"], 8, -0.1);
        let s0 = env.reset("t").unwrap();
        let o = env.step(&s0, &act(&env, "aw$")).unwrap();
        assert_eq!((o.reward, o.done), (0.0, true));

        let o = env.step(&s0, &act(&env, "sz$")).unwrap();
        assert_eq!((o.reward, o.done), (-0.1, false));
        assert_eq!(o.next.view.revealed, s0.view.revealed);
        assert_eq!(o.next.prompt_ids, s0.prompt_ids);

        let o = env.step(&s0, &act(&env, "w>$")).unwrap();
        assert_eq!((o.reward, o.done), (-0.1, false));
    }

    #[test]
    fn non_canonical_action_parses_like_canonical() {
        let env = env_with(&["w", "x"], 8, 0.0);
        let v = env.vocab();
        let split = TokenSeq::raw(vec![v.id_of("s").unwrap(), v.id_of("w").unwrap(), v.eos_id()]);
        let a = StepAction::from_response(split, v, env.grammar()).unwrap();
        assert_eq!(a.parsed, ParsedAction::Search("w".into()));
        let truncated = TokenSeq::raw(vec![v.id_of("sw").unwrap(), v.id_of("x").unwrap()]);
        let a = StepAction::from_response(truncated, v, env.grammar()).unwrap();
        assert_eq!(a.parsed, ParsedAction::Malformed);
    }

    #[test]
    fn max_steps_forces_done() {
        let env = env_with(&["w", "x"], 2, 0.0);
        let s0 = env.reset("t").unwrap();
        let o1 = env.step(&s0, &act(&env, "sz$")).unwrap();
        assert!(!o1.done);
        let o2 = env.step(&o1.next, &act(&env, "sz$")).unwrap();
        assert!(o2.done);
        assert!(o2.next.view.terminal);
    }

    fn all_actions(env: &HopChain) -> Vec<StepAction> {
        let mut out = vec![act(env, "w>$")];
        for e in ["w", "x", "y", "z"] {
            out.push(act(env, &format!("s{e}$")));
            out.push(act(env, &format!("a{e}$")));
        }
        out
    }

    /// Exhaustive search over action sequences; returns (best undiscounted
    /// return, shortest length achieving it).
    fn brute_force(env: &HopChain, state: &StepState, depth: usize, acc: f64) -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for a in all_actions(env) {
            let o = env.step(state, &a).unwrap();
            let cand = if o.done {
                (acc + o.reward, depth + 1)
            } else {
                brute_force(env, &o.next, depth + 1, acc + o.reward)
            };
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                best = cand;
            }
        }
        best
    }

    #[test]
    fn brute_force_optimal_return() {
        for chain in [&["w", "x"][..], &["y", "w", "z"][..]] {
            let k = chain.len() - 1;
            let env = env_with(chain, k + 2, 0.0);
            let s0 = env.reset("t").unwrap();
            let (ret, len) = brute_force(&env, &s0, 0, 0.0);
            assert_eq!(ret, 1.0);
            assert_eq!(len, k + 1);
            let mut st = s0.clone();
            for _ in 0..k {
                let frontier = st.view.revealed.last().unwrap().clone();
                st = env.step(&st, &act(&env, &format!("s{frontier}$"))).unwrap().next;
            }
            let o = env.step(&st, &act(&env, &format!("a{}$", chain[k]))).unwrap();
            assert!(o.done);
            assert_eq!(o.reward, 1.0);
        }
    }

    #[test]
    fn reward_support_and_length_bound() {
        let env = env_with(&["w", "x", "y", "z"], 8, -0.25);
        let actions = all_actions(&env);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let allowed = [-0.25, 0.75, 0.0, 1.0];
        for _ in 0..200 {
            let mut s = env.reset("t").unwrap();
            let mut steps = 0;
            loop {
                let a = &actions[rng.gen_range(0..actions.len())];
                let o = env.step(&s, a).unwrap();
                assert!(allowed.contains(&o.reward));
                steps += 1;
                if o.done {
                    break;
                }
                s = o.next;
            }
            assert!(steps <= 8);
        }
    }

    fn traj_with_rewards(rewards: &[f64]) -> Trajectory {
        let mut t = Trajectory::new("t");
        for (i, &r) in rewards.iter().enumerate() {
            let rec = StepRecord {
                trace_id: "t".into(),
                step_index: i,
                prompt_ids: TokenSeq::raw(vec![2]),
                response_ids: TokenSeq::raw(vec![7]),
                old_token_logprobs: vec![-1.0],
                reward: r,
                done: i + 1 == rewards.len(),
                policy_version: 0,
                wall_time_ms: 0,
                metadata: Default::default(),
            };
            t.append_step(rec).unwrap();
        }
        t
    }

    #[test]
    fn episode_return_examples() {
        let t = traj_with_rewards(&[0.0, 0.0, 1.0]);
        assert_eq!(episode_return(&t, 1.0).unwrap(), 1.0);
        assert_eq!(episode_return(&t, 0.5).unwrap(), 0.25);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rewards: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = traj_with_rewards(&rewards);
        let mut oracle = 0.0;
        for (i, r) in rewards.iter().enumerate() {
            oracle += 0.99f64.powi(i as i32) * r;
        }
        assert!((episode_return(&t, 0.99).unwrap() - oracle).abs() < 1e-12);

        let mut open = Trajectory::new("o");
        let mut rec = t.records()[0].clone();
        rec.done = false;
        rec.trace_id = "o".into();
        open.append_step(rec).unwrap();
        assert_eq!(episode_return(&open, 0.9), Err(EnvError::IncompleteTrajectory));
    }
}
