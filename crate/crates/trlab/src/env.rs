//! Finite shared-context message-action MDP with a turn-taking router.
//!
//! States are bounded token sequences plus a turn counter. Exactly one agent
//! is active in each non-terminal state; it emits a message (token sequence)
//! that is appended to the context. The context cap forces termination into
//! an absorbing zero-reward state, which keeps the infinite-horizon
//! discounted return exact despite the cap (truncation error of the cap
//! itself is gamma^cap * r_max / (1-gamma), reported in run summaries).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id. The designated EOS id is `vocab_size - 1`.
pub type Token = u16;

/// Shared textual state: token sequence, completed-message count, terminal flag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextState {
    pub tokens: Vec<Token>,
    pub turn: u32,
    pub terminal: bool,
}

impl ContextState {
    /// Initial state for a prompt context. Terminal immediately if the
    /// prompt already fills the context cap.
    pub fn initial(tokens: Vec<Token>, env: &EnvConfig) -> Self {
        let terminal = tokens.len() >= env.ctx_len_max;
        ContextState {
            tokens,
            turn: 0,
            terminal,
        }
    }

    /// Identity key used for policy rows, router tables and enumeration.
    pub fn key(&self) -> (Vec<Token>, u32) {
        (self.tokens.clone(), self.turn)
    }

    /// Token sequence rendered as a plain digit/letter string for CSV export.
    pub fn token_string(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                s.push('.');
            }
            let _ = write!(s, "{t}");
        }
        s
    }
}

/// Reward table. Every entry magnitude must stay within `r_max`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardSpec {
    /// Reward fires when the post-append context ends with a listed suffix;
    /// the first matching pattern wins and the episode terminates.
    TerminalPattern { patterns: Vec<PatternReward> },
    /// Reward keyed by (source context tokens, message tokens), with a
    /// default for unlisted pairs. Termination comes from the context cap.
    PerStepTable {
        default: f64,
        entries: Vec<StepReward>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PatternReward {
    pub suffix: Vec<Token>,
    pub reward: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StepReward {
    pub context: Vec<Token>,
    pub message: Vec<Token>,
    pub reward: f64,
}

impl RewardSpec {
    /// Largest reward magnitude appearing in the table.
    pub fn max_abs(&self) -> f64 {
        match self {
            RewardSpec::TerminalPattern { patterns } => patterns
                .iter()
                .map(|p| p.reward.abs())
                .fold(0.0, f64::max),
            RewardSpec::PerStepTable { default, entries } => entries
                .iter()
                .map(|e| e.reward.abs())
                .fold(default.abs(), f64::max),
        }
    }
}

/// Deterministic turn-taking router. Terminal states are router-free.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Router {
    RoundRobin,
    /// Explicit state -> agent mapping keyed by (tokens, turn).
    FixedTable { table: Vec<RouterEntry> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RouterEntry {
    pub context: Vec<Token>,
    pub turn: u32,
    pub agent: usize,
}

/// Environment parameters. Immutable after validation; shared read-only.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub vocab_size: usize,
    /// Cap on tokens per message (T_max). 1 selects single-token macro-actions.
    pub msg_len_max: usize,
    /// Cap on total context tokens before forced termination.
    pub ctx_len_max: usize,
    pub n_agents: usize,
    pub gamma: f64,
    pub r_max: f64,
    /// Hard cap on the enumerated state count.
    #[serde(default = "default_state_cap")]
    pub state_cap: usize,
    /// Initial contexts with probabilities (the distribution mu).
    pub initial_contexts: Vec<Vec<Token>>,
    pub initial_probs: Vec<f64>,
    pub reward: RewardSpec,
}

fn default_state_cap() -> usize {
    20_000
}

impl EnvConfig {
    /// Designated end-of-sequence token id.
    pub fn eos(&self) -> Token {
        (self.vocab_size - 1) as Token
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.msg_len_max == 0 {
            return Err(Error::Config("msg_len_max must be >= 1".into()));
        }
        if self.n_agents == 0 {
            return Err(Error::Config("n_agents must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if self.r_max <= 0.0 {
            return Err(Error::Config("r_max must be positive".into()));
        }
        if self.initial_contexts.is_empty()
            || self.initial_contexts.len() != self.initial_probs.len()
        {
            return Err(Error::Config(
                "initial_contexts and initial_probs must be non-empty and equal length".into(),
            ));
        }
        let total: f64 = self.initial_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "initial_probs must sum to 1 (got {total})"
            )));
        }
        if self.initial_probs.iter().any(|p| *p < 0.0) {
            return Err(Error::Config("initial_probs must be nonnegative".into()));
        }
        for c in &self.initial_contexts {
            if c.iter().any(|t| (*t as usize) >= self.vocab_size) {
                return Err(Error::Config("initial context token out of vocab".into()));
            }
        }
        if self.reward.max_abs() > self.r_max + 1e-12 {
            return Err(Error::Config(format!(
                "reward table magnitude {} exceeds r_max {}",
                self.reward.max_abs(),
                self.r_max
            )));
        }
        Ok(())
    }

    /// Truncation error bound gamma^cap * r_max / (1-gamma) reported in
    /// run summaries.
    pub fn truncation_error_bound(&self) -> f64 {
        self.gamma.powi(self.ctx_len_max as i32) * self.r_max / (1.0 - self.gamma)
    }

    /// Checks a message against the message grammar: non-empty, within the
    /// length cap, EOS only in final position, and either EOS-terminated or
    /// exactly at the cap.
    pub fn validate_message(&self, message: &[Token]) -> Result<()> {
        if message.is_empty() {
            return Err(Error::Usage("empty message".into()));
        }
        if message.len() > self.msg_len_max {
            return Err(Error::Usage(format!(
                "message length {} exceeds msg_len_max {}",
                message.len(),
                self.msg_len_max
            )));
        }
        if message.iter().any(|t| (*t as usize) >= self.vocab_size) {
            return Err(Error::Usage("message token out of vocab".into()));
        }
        let eos = self.eos();
        if message[..message.len() - 1].contains(&eos) {
            return Err(Error::Usage("EOS may only terminate a message".into()));
        }
        if message.len() < self.msg_len_max && *message.last().unwrap() != eos {
            return Err(Error::Usage(
                "message must end with EOS or reach msg_len_max".into(),
            ));
        }
        Ok(())
    }

    /// All valid messages in deterministic (token-lexicographic) order.
    /// In single-token mode this is just the vocabulary.
    pub fn enumerate_messages(&self) -> Vec<Vec<Token>> {
        let mut out = Vec::new();
        let mut prefix = Vec::new();
        self.extend_messages(&mut prefix, &mut out);
        out
    }

    fn extend_messages(&self, prefix: &mut Vec<Token>, out: &mut Vec<Vec<Token>>) {
        let eos = self.eos();
        for t in 0..self.vocab_size as Token {
            prefix.push(t);
            if prefix.len() == self.msg_len_max || t == eos {
                out.push(prefix.clone());
            } else {
                self.extend_messages(prefix, out);
            }
            prefix.pop();
        }
    }
}

/// Active agent for a non-terminal state.
pub fn active_agent(state: &ContextState, router: &Router, env: &EnvConfig) -> Result<usize> {
    if state.terminal {
        return Err(Error::Usage(
            "terminal states have no active agent".into(),
        ));
    }
    match router {
        Router::RoundRobin => Ok(state.turn as usize % env.n_agents),
        Router::FixedTable { table } => {
            let hit = table
                .iter()
                .find(|e| e.context == state.tokens && e.turn == state.turn)
                .ok_or_else(|| {
                    Error::Usage(format!(
                        "router table has no entry for state {:?}/turn {}",
                        state.tokens, state.turn
                    ))
                })?;
            if hit.agent >= env.n_agents {
                return Err(Error::Config(format!(
                    "router table assigns agent {} but team has {}",
                    hit.agent, env.n_agents
                )));
            }
            Ok(hit.agent)
        }
    }
}

/// Appends a message to the context, truncating at the cap, and emits the
/// reward earned by this transition.
pub fn step(state: &ContextState, message: &[Token], env: &EnvConfig) -> Result<(ContextState, f64)> {
    if state.terminal {
        return Err(Error::Usage("cannot step a terminal state".into()));
    }
    env.validate_message(message)?;

    let room = env.ctx_len_max - state.tokens.len();
    let take = message.len().min(room);
    let mut tokens = state.tokens.clone();
    tokens.extend_from_slice(&message[..take]);

    let mut terminal = tokens.len() >= env.ctx_len_max;
    let reward = match &env.reward {
        RewardSpec::TerminalPattern { patterns } => {
            let mut r = 0.0;
            for p in patterns {
                if tokens.len() >= p.suffix.len() && tokens.ends_with(&p.suffix) {
                    r = p.reward;
                    terminal = true;
                    break;
                }
            }
            r
        }
        RewardSpec::PerStepTable { default, entries } => entries
            .iter()
            .find(|e| e.context == state.tokens && e.message == message)
            .map(|e| e.reward)
            .unwrap_or(*default),
    };
    assert!(
        reward.abs() <= env.r_max + 1e-12,
        "reward bound violated: |{reward}| > {}",
        env.r_max
    );

    Ok((
        ContextState {
            tokens,
            turn: state.turn + 1,
            terminal,
        },
        reward,
    ))
}

/// Enumerated reachable state space with a deterministic ordering
/// (lexicographic on token sequence, then turn) and an index map.
#[derive(Debug, Clone)]
pub struct StateSpace {
    pub states: Vec<ContextState>,
    index: BTreeMap<(Vec<Token>, u32), usize>,
}

impl StateSpace {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, state: &ContextState) -> Result<usize> {
        self.index.get(&state.key()).copied().ok_or_else(|| {
            Error::Usage(format!(
                "state {:?}/turn {} not in enumeration",
                state.tokens, state.turn
            ))
        })
    }

    pub fn state(&self, idx: usize) -> &ContextState {
        &self.states[idx]
    }

    /// CSV table (schema v1): index, token string, turn, terminal flag.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("schema_version,index,tokens,turn,terminal\n");
        for (i, s) in self.states.iter().enumerate() {
            let _ = writeln!(out, "1,{},{},{},{}", i, s.token_string(), s.turn, s.terminal);
        }
        out
    }
}

/// Breadth-first enumeration of every state reachable from the support of
/// the initial distribution.
pub fn enumerate_states(env: &EnvConfig, _router: &Router) -> Result<StateSpace> {
    env.validate()?;
    let messages = env.enumerate_messages();
    let mut seen: BTreeMap<(Vec<Token>, u32), ContextState> = BTreeMap::new();
    let mut frontier: Vec<ContextState> = Vec::new();

    for ctx in &env.initial_contexts {
        let s = ContextState::initial(ctx.clone(), env);
        if seen.insert(s.key(), s.clone()).is_none() {
            frontier.push(s);
        }
    }

    while let Some(s) = frontier.pop() {
        if s.terminal {
            continue;
        }
        for m in &messages {
            let (next, _r) = step(&s, m, env)?;
            if seen.len() >= env.state_cap && !seen.contains_key(&next.key()) {
                return Err(Error::Capacity(format!(
                    "state enumeration exceeded cap {} (vocab={}, msg_len_max={}, ctx_len_max={})",
                    env.state_cap, env.vocab_size, env.msg_len_max, env.ctx_len_max
                )));
            }
            if seen.insert(next.key(), next.clone()).is_none() {
                frontier.push(next);
            }
        }
    }

    let states: Vec<ContextState> = seen.into_values().collect();
    let index = states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.key(), i))
        .collect();
    Ok(StateSpace { states, index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    pub(crate) fn tiny_env() -> EnvConfig {
        EnvConfig {
            vocab_size: 2,
            msg_len_max: 1,
            ctx_len_max: 2,
            n_agents: 2,
            gamma: 0.5,
            r_max: 1.0,
            state_cap: 1000,
            initial_contexts: vec![vec![]],
            initial_probs: vec![1.0],
            reward: RewardSpec::TerminalPattern {
                patterns: vec![PatternReward {
                    suffix: vec![1, 1],
                    reward: 1.0,
                }],
            },
        }
    }

    #[test]
    fn round_robin_active_agent() {
        let mut env = tiny_env();
        env.n_agents = 3;
        let s = ContextState {
            tokens: vec![0, 1],
            turn: 4,
            terminal: false,
        };
        assert_eq!(active_agent(&s, &Router::RoundRobin, &env).unwrap(), 1);

        env.n_agents = 1;
        assert_eq!(active_agent(&s, &Router::RoundRobin, &env).unwrap(), 0);
    }

    #[test]
    fn fixed_table_matches_lookup() {
        let env = tiny_env();
        let router = Router::FixedTable {
            table: vec![
                RouterEntry {
                    context: vec![],
                    turn: 0,
                    agent: 1,
                },
                RouterEntry {
                    context: vec![0],
                    turn: 1,
                    agent: 0,
                },
            ],
        };
        let s0 = ContextState::initial(vec![], &env);
        assert_eq!(active_agent(&s0, &router, &env).unwrap(), 1);
        let s1 = ContextState {
            tokens: vec![0],
            turn: 1,
            terminal: false,
        };
        assert_eq!(active_agent(&s1, &router, &env).unwrap(), 0);
    }

    #[test]
    fn terminal_state_has_no_agent() {
        let env = tiny_env();
        let s = ContextState {
            tokens: vec![1, 1],
            turn: 2,
            terminal: true,
        };
        assert!(active_agent(&s, &Router::RoundRobin, &env).is_err());
    }

    #[test]
    fn step_appends_and_counts_turns() {
        let env = tiny_env();
        let s = ContextState::initial(vec![], &env);
        let (next, r) = step(&s, &[0], &env).unwrap();
        assert_eq!(next.tokens, vec![0]);
        assert_eq!(next.turn, 1);
        assert!(!next.terminal);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn step_truncates_at_cap() {
        let mut env = tiny_env();
        env.msg_len_max = 2;
        env.ctx_len_max = 3;
        let s = ContextState {
            tokens: vec![0, 0],
            turn: 1,
            terminal: false,
        };
        // 2-token message into a single remaining slot.
        let (next, _r) = step(&s, &[0, 1], &env).unwrap();
        assert_eq!(next.tokens, vec![0, 0, 0]);
        assert!(next.terminal);
    }

    #[test]
    fn terminal_pattern_pays_configured_reward() {
        let env = tiny_env();
        let s = ContextState {
            tokens: vec![1],
            turn: 1,
            terminal: false,
        };
        let (next, r) = step(&s, &[1], &env).unwrap();
        assert!(next.terminal);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn over_length_message_rejected() {
        let env = tiny_env();
        let s = ContextState::initial(vec![], &env);
        assert!(step(&s, &[0, 1], &env).is_err());
    }

    #[test]
    fn enumeration_matches_hand_count() {
        let env = tiny_env();
        let space = enumerate_states(&env, &Router::RoundRobin).unwrap();
        // {eps, 0, 1, 00, 01, 10, 11}
        assert_eq!(space.len(), 7);
        let terminals = space.states.iter().filter(|s| s.terminal).count();
        assert_eq!(terminals, 4);
        // Deterministic lexicographic order.
        let keys: Vec<_> = space.states.iter().map(|s| s.tokens.clone()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn zero_cap_keeps_only_initial_terminals() {
        let mut env = tiny_env();
        env.ctx_len_max = 0;
        let space = enumerate_states(&env, &Router::RoundRobin).unwrap();
        assert_eq!(space.len(), 1);
        assert!(space.states[0].terminal);
    }

    // Independent recursive reachability oracle (no shared code with the
    // BFS path).
    fn reach(env: &EnvConfig, s: &ContextState, acc: &mut BTreeSet<(Vec<Token>, u32)>) {
        if !acc.insert(s.key()) || s.terminal {
            return;
        }
        for m in env.enumerate_messages() {
            let (next, _) = step(s, &m, env).unwrap();
            reach(env, &next, acc);
        }
    }

    #[test]
    fn enumeration_matches_recursive_oracle() {
        let mut env = tiny_env();
        env.vocab_size = 3;
        env.ctx_len_max = 3;
        env.msg_len_max = 2;
        env.reward = RewardSpec::TerminalPattern {
            patterns: vec![PatternReward {
                suffix: vec![0, 1],
                reward: 0.5,
            }],
        };
        let space = enumerate_states(&env, &Router::RoundRobin).unwrap();
        let mut acc = BTreeSet::new();
        for c in &env.initial_contexts {
            reach(&env, &ContextState::initial(c.clone(), &env), &mut acc);
        }
        assert_eq!(space.len(), acc.len());
        for s in &space.states {
            assert!(acc.contains(&s.key()));
        }
    }

    #[test]
    fn enumeration_is_deterministic() {
        let env = tiny_env();
        let a = enumerate_states(&env, &Router::RoundRobin).unwrap();
        let b = enumerate_states(&env, &Router::RoundRobin).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn cap_exceeded_names_config() {
        let mut env = tiny_env();
        env.state_cap = 3;
        let err = enumerate_states(&env, &Router::RoundRobin).unwrap_err();
        match err {
            Error::Capacity(msg) => assert!(msg.contains("vocab=2")),
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn message_grammar() {
        let mut env = tiny_env();
        env.vocab_size = 3;
        env.msg_len_max = 2;
        // eos = 2; valid: [2], [0,x], [1,x]
        let msgs = env.enumerate_messages();
        assert_eq!(msgs.len(), 7);
        assert!(env.validate_message(&[2]).is_ok());
        assert!(env.validate_message(&[0, 2]).is_ok());
        assert!(env.validate_message(&[0]).is_err()); // short, no EOS
        assert!(env.validate_message(&[2, 0]).is_err()); // EOS not final
    }
}
