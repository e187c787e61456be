//! Tabular-softmax agent policies and the factorized team policy.
//!
//! Each agent holds a logit table keyed by (state, message prefix). Missing
//! rows read as zeros, i.e. the uniform policy, and are materialized on
//! write. Logits are clamped to ±LOGIT_CLAMP so statewise KL stays finite
//! and the Fisher information stays well-conditioned. Under the turn-taking
//! protocol an inactive agent has no distribution at a state; its no-op is
//! implicit and contributes nothing to trajectories or divergences.
//!
//! Policies are read-shared during rollout collection; gradient updates
//! happen under an exclusive-writer contract (no concurrent reads while a
//! factor is being mutated).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::env::{active_agent, ContextState, EnvConfig, Router, StateSpace, Token};
use crate::error::{Error, Result};

/// Hard clamp on stored logits.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Cap on enumerable message spaces (vocab^msg_len_max style growth).
const MESSAGE_SPACE_CAP: usize = 200_000;

/// Row key: (state tokens, state turn, message prefix).
pub type RowKey = (Vec<Token>, u32, Vec<Token>);

/// Enumerated message distribution at one state.
#[derive(Debug, Clone)]
pub struct MessageDist {
    pub support: Vec<Vec<Token>>,
    pub probs: Vec<f64>,
}

/// One agent's tabular-softmax policy over per-token conditionals.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPolicy {
    pub agent_id: usize,
    pub vocab: usize,
    logits: BTreeMap<RowKey, Vec<f64>>,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|l| l.exp()).collect()
}

impl AgentPolicy {
    /// Uniform policy: every row reads as zeros.
    pub fn uniform(agent_id: usize, vocab: usize) -> Self {
        AgentPolicy {
            agent_id,
            vocab,
            logits: BTreeMap::new(),
        }
    }

    fn check_query(&self, state: &ContextState, prefix: &[Token], env: &EnvConfig) -> Result<()> {
        if state.terminal {
            return Err(Error::Usage(
                "no policy row at a terminal state".into(),
            ));
        }
        if prefix.len() >= env.msg_len_max {
            return Err(Error::Usage(format!(
                "prefix length {} leaves no room in a message of at most {} tokens",
                prefix.len(),
                env.msg_len_max
            )));
        }
        if prefix.contains(&env.eos()) {
            return Err(Error::Usage("prefix may not contain EOS".into()));
        }
        Ok(())
    }

    /// Stored logits for a row, or zeros if the row was never written.
    pub fn logits_at(&self, state: &ContextState, prefix: &[Token]) -> Vec<f64> {
        self.logits
            .get(&(state.tokens.clone(), state.turn, prefix.to_vec()))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab])
    }

    pub fn set_logits(&mut self, state: &ContextState, prefix: &[Token], logits: Vec<f64>) {
        debug_assert_eq!(logits.len(), self.vocab);
        let clamped = logits
            .into_iter()
            .map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
            .collect();
        self.logits
            .insert((state.tokens.clone(), state.turn, prefix.to_vec()), clamped);
    }

    /// Adds a delta to one row, materializing it if needed.
    pub fn add_to_logits(&mut self, state: &ContextState, prefix: &[Token], delta: &[f64]) {
        let mut row = self.logits_at(state, prefix);
        for (z, d) in row.iter_mut().zip(delta) {
            *z = (*z + d).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        }
        self.set_logits(state, prefix, row);
    }

    /// Token distribution at (state, prefix).
    pub fn probs_at(&self, state: &ContextState, prefix: &[Token]) -> Vec<f64> {
        softmax(&self.logits_at(state, prefix))
    }

    /// Log-probability of one token given the state and message prefix.
    pub fn token_logprob(
        &self,
        state: &ContextState,
        prefix: &[Token],
        token: Token,
        env: &EnvConfig,
    ) -> Result<f64> {
        self.check_query(state, prefix, env)?;
        if (token as usize) >= self.vocab {
            return Err(Error::Usage(format!("token {token} out of vocab")));
        }
        Ok(log_softmax(&self.logits_at(state, prefix))[token as usize])
    }

    /// Log-probability of a whole message: sum of per-token conditionals.
    pub fn message_logprob(
        &self,
        state: &ContextState,
        message: &[Token],
        env: &EnvConfig,
    ) -> Result<f64> {
        env.validate_message(message)?;
        let mut lp = 0.0;
        for (u, tok) in message.iter().enumerate() {
            lp += self.token_logprob(state, &message[..u], *tok, env)?;
        }
        Ok(lp)
    }

    /// Autoregressive sampling until EOS or the message length cap.
    pub fn sample_message<R: Rng>(
        &self,
        state: &ContextState,
        env: &EnvConfig,
        rng: &mut R,
    ) -> Result<Vec<Token>> {
        self.check_query(state, &[], env)?;
        let eos = env.eos();
        let mut message = Vec::new();
        loop {
            let probs = self.probs_at(state, &message);
            let mut u: f64 = rng.gen();
            let mut tok = (self.vocab - 1) as Token;
            for (t, p) in probs.iter().enumerate() {
                if u < *p {
                    tok = t as Token;
                    break;
                }
                u -= p;
            }
            message.push(tok);
            if tok == eos || message.len() == env.msg_len_max {
                return Ok(message);
            }
        }
    }

    /// Exact enumerated message distribution at one state.
    pub fn message_dist(&self, state: &ContextState, env: &EnvConfig) -> Result<MessageDist> {
        let support = env.enumerate_messages();
        if support.len() > MESSAGE_SPACE_CAP {
            return Err(Error::Capacity(format!(
                "message space of {} exceeds cap {}",
                support.len(),
                MESSAGE_SPACE_CAP
            )));
        }
        let probs = support
            .iter()
            .map(|m| self.message_logprob(state, m, env).map(f64::exp))
            .collect::<Result<Vec<f64>>>()?;
        Ok(MessageDist { support, probs })
    }

    /// Gaussian-perturbed copy with rows materialized for every reachable
    /// (state, prefix) pair where this agent is active.
    pub fn perturbed<R: Rng>(
        &self,
        space: &StateSpace,
        router: &Router,
        env: &EnvConfig,
        scale: f64,
        rng: &mut R,
    ) -> Result<AgentPolicy> {
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Numerical(e.to_string()))?;
        let mut out = self.clone();
        for state in &space.states {
            if state.terminal {
                continue;
            }
            if active_agent(state, router, env)? != self.agent_id {
                continue;
            }
            for prefix in enumerate_prefixes(env) {
                let mut row = out.logits_at(state, &prefix);
                for z in row.iter_mut() {
                    *z += normal.sample(rng);
                }
                out.set_logits(state, &prefix, row);
            }
        }
        Ok(out)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&RowKey, &Vec<f64>)> {
        self.logits.iter()
    }

    pub fn row_count(&self) -> usize {
        self.logits.len()
    }
}

/// All message prefixes an agent can face: sequences of non-EOS tokens of
/// length 0..msg_len_max-1 (token mode has only the empty prefix).
pub fn enumerate_prefixes(env: &EnvConfig) -> Vec<Vec<Token>> {
    let mut out = vec![vec![]];
    let eos = env.eos();
    let mut frontier = vec![vec![]];
    for _ in 1..env.msg_len_max {
        let mut next = Vec::new();
        for p in &frontier {
            for t in 0..env.vocab_size as Token {
                if t == eos {
                    continue;
                }
                let mut q = p.clone();
                q.push(t);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Exact statewise KL between two agents' message distributions at a state.
///
/// Token mode reduces to categorical KL over the vocabulary; message mode
/// enumerates the message space. Softmax rows have full support, so
/// absolute continuity always holds and the value is finite.
pub fn kl_statewise(
    p: &AgentPolicy,
    q: &AgentPolicy,
    state: &ContextState,
    env: &EnvConfig,
) -> Result<f64> {
    if env.msg_len_max == 1 {
        let lp = log_softmax(&p.logits_at(state, &[]));
        let lq = log_softmax(&q.logits_at(state, &[]));
        let mut kl = 0.0;
        for v in 0..p.vocab {
            kl += lp[v].exp() * (lp[v] - lq[v]);
        }
        return Ok(kl.max(0.0));
    }
    let dp = p.message_dist(state, env)?;
    let mut kl = 0.0;
    for (m, pm) in dp.support.iter().zip(&dp.probs) {
        let lq = q.message_logprob(state, m, env)?;
        kl += pm * (pm.ln() - lq);
    }
    Ok(kl.max(0.0))
}

/// Fisher information of the softmax row at a state, in logit coordinates:
/// F = diag(pi) - pi pi^T. Token mode only.
pub fn fisher_at(agent: &AgentPolicy, state: &ContextState, env: &EnvConfig) -> Result<DMatrix<f64>> {
    if env.msg_len_max != 1 {
        return Err(Error::Usage(
            "fisher_at requires single-token messages".into(),
        ));
    }
    let pi = agent.probs_at(state, &[]);
    let v = pi.len();
    let mut f = DMatrix::zeros(v, v);
    for a in 0..v {
        for b in 0..v {
            f[(a, b)] = if a == b { pi[a] - pi[a] * pi[a] } else { -pi[a] * pi[b] };
        }
    }
    Ok(f)
}

/// Factorized team policy: one tabular agent per seat plus the router.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamPolicy {
    pub agents: Vec<AgentPolicy>,
    pub router: Router,
}

impl TeamPolicy {
    pub fn uniform(env: &EnvConfig, router: Router) -> Self {
        let agents = (0..env.n_agents)
            .map(|j| AgentPolicy::uniform(j, env.vocab_size))
            .collect();
        TeamPolicy { agents, router }
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Team with factor `j` replaced; the input team is left untouched.
    pub fn replace_factor(&self, j: usize, new: AgentPolicy) -> Result<TeamPolicy> {
        if j >= self.agents.len() {
            return Err(Error::Usage(format!(
                "agent index {j} out of range for team of {}",
                self.agents.len()
            )));
        }
        let mut team = self.clone();
        let mut agent = new;
        agent.agent_id = j;
        team.agents[j] = agent;
        Ok(team)
    }

    /// The active agent's policy at a non-terminal state.
    pub fn active(&self, state: &ContextState, env: &EnvConfig) -> Result<&AgentPolicy> {
        let j = active_agent(state, &self.router, env)?;
        Ok(&self.agents[j])
    }

    /// Exact team-level KL at one state, computed over the joint message
    /// support with inactive factors as explicit point masses. Under
    /// turn-taking this equals the active factor's statewise KL.
    pub fn team_kl_statewise(
        &self,
        other: &TeamPolicy,
        state: &ContextState,
        env: &EnvConfig,
    ) -> Result<f64> {
        let j = active_agent(state, &self.router, env)?;
        let p_active = &self.agents[j];
        let q_active = &other.agents[j];
        if env.msg_len_max == 1 {
            let lp = log_softmax(&p_active.logits_at(state, &[]));
            let lq = log_softmax(&q_active.logits_at(state, &[]));
            let mut kl = 0.0;
            for v in 0..p_active.vocab {
                // Joint action: active token v, every other factor no-op
                // with probability one under both teams.
                let mut pj = lp[v].exp();
                let mut qj = lq[v].exp();
                for k in 0..self.agents.len() {
                    if k != j {
                        pj *= 1.0;
                        qj *= 1.0;
                    }
                }
                kl += pj * (pj.ln() - qj.ln());
            }
            return Ok(kl.max(0.0));
        }
        let dp = p_active.message_dist(state, env)?;
        let mut kl = 0.0;
        for (m, pm) in dp.support.iter().zip(&dp.probs) {
            let qm = q_active.message_logprob(state, m, env)?.exp();
            let mut pj = *pm;
            let mut qj = qm;
            for k in 0..self.agents.len() {
                if k != j {
                    pj *= 1.0;
                    qj *= 1.0;
                }
            }
            kl += pj * (pj.ln() - qj.ln());
        }
        Ok(kl.max(0.0))
    }

    /// Versioned text snapshot (state key, logit row) for checkpoint,
    /// resume, and plug-and-play swaps.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "trlab-policy v1");
        let _ = writeln!(out, "agents {}", self.agents.len());
        for agent in &self.agents {
            let _ = writeln!(out, "agent {} vocab {} rows {}", agent.agent_id, agent.vocab, agent.logits.len());
            for ((tokens, turn, prefix), row) in &agent.logits {
                let toks = join_tokens(tokens);
                let pref = join_tokens(prefix);
                let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                let _ = writeln!(out, "{toks}|{turn}|{pref} {}", vals.join(" "));
            }
        }
        out
    }

    pub fn from_text(text: &str, router: Router) -> Result<TeamPolicy> {
        let mut lines = text.lines();
        match lines.next() {
            Some("trlab-policy v1") => {}
            other => {
                return Err(Error::Parse(format!(
                    "unsupported policy snapshot header: {other:?}"
                )))
            }
        }
        let n: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("agents "))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse("missing agent count".into()))?;
        let mut agents = Vec::with_capacity(n);
        for _ in 0..n {
            let header = lines
                .next()
                .ok_or_else(|| Error::Parse("truncated snapshot".into()))?;
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 6 || parts[0] != "agent" {
                return Err(Error::Parse(format!("bad agent header: {header}")));
            }
            let agent_id: usize = parts[1].parse().map_err(|_| Error::Parse("bad id".into()))?;
            let vocab: usize = parts[3].parse().map_err(|_| Error::Parse("bad vocab".into()))?;
            let rows: usize = parts[5].parse().map_err(|_| Error::Parse("bad rows".into()))?;
            let mut agent = AgentPolicy::uniform(agent_id, vocab);
            for _ in 0..rows {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Parse("truncated rows".into()))?;
                let (key, vals) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::Parse(format!("bad row: {line}")))?;
                let mut key_parts = key.split('|');
                let tokens = split_tokens(key_parts.next().unwrap_or(""))?;
                let turn: u32 = key_parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Parse("bad turn".into()))?;
                let prefix = split_tokens(key_parts.next().unwrap_or(""))?;
                let row: Vec<f64> = vals
                    .split_whitespace()
                    .map(|v| v.parse().map_err(|_| Error::Parse("bad logit".into())))
                    .collect::<Result<_>>()?;
                if row.len() != vocab {
                    return Err(Error::Parse("row length mismatch".into()));
                }
                agent.logits.insert((tokens, turn, prefix), row);
            }
            agents.push(agent);
        }
        Ok(TeamPolicy { agents, router })
    }
}

fn join_tokens(tokens: &[Token]) -> String {
    if tokens.is_empty() {
        "-".into()
    } else {
        tokens
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(".")
    }
}

fn split_tokens(s: &str) -> Result<Vec<Token>> {
    if s == "-" || s.is_empty() {
        return Ok(vec![]);
    }
    s.split('.')
        .map(|p| p.parse().map_err(|_| Error::Parse(format!("bad token: {p}"))))
        .collect()
}
