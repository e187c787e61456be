//! Token-level KL functionals: the exact reference-weighted functional,
//! the autoregressive chain-rule decomposition, the sampled rollout
//! monitor, token-average vs token-sum relations, and monitor reliability
//! diagnostics.
//!
//! Orientation: all trust regions and monitors use behavior-to-updated
//! KL(pi_cur || pi_new). Under turn-taking, a single-factor KL functional
//! sums only over states where that factor is active; inactive agents have
//! no distribution there and contribute zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::RolloutBatch;
use crate::env::{ContextState, EnvConfig};
use crate::error::{Error, Result};
use crate::exact::Evaluator;
use crate::policy::{enumerate_prefixes, kl_statewise, AgentPolicy, TeamPolicy};
use crate::seed::SeedTree;

/// KL value with provenance: exact functionals carry zero stderr; sampled
/// monitors floor slightly-negative estimates at zero for gating but keep
/// the raw value for calibration.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KlEstimate {
    pub value: f64,
    pub raw_value: f64,
    pub stderr: f64,
    pub n_samples: usize,
    pub mode: KlMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    Exact,
    Sampled,
}

impl KlEstimate {
    pub fn exact(value: f64) -> Self {
        KlEstimate {
            value: value.max(0.0),
            raw_value: value,
            stderr: 0.0,
            n_samples: 0,
            mode: KlMode::Exact,
        }
    }
}

/// Per-step trust-region radii.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrustRegionSchedule {
    pub radii: Vec<f64>,
    #[serde(default)]
    pub mode: ScheduleMode,
}

/// Fixed radii gate on the monitor directly; adaptive-target narrows the
/// early-stop band toward the radius so the realized KL tracks the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    #[default]
    Fixed,
    AdaptiveTarget,
}

impl TrustRegionSchedule {
    pub fn fixed(radius: f64, n: usize) -> Self {
        TrustRegionSchedule {
            radii: vec![radius; n],
            mode: ScheduleMode::Fixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() || self.radii.iter().any(|r| *r <= 0.0) {
            return Err(Error::Config("all trust-region radii must be > 0".into()));
        }
        Ok(())
    }

    /// Radius for within-stage step i (0-based); the last entry repeats.
    pub fn radius(&self, i: usize) -> f64 {
        self.radii[i.min(self.radii.len() - 1)]
    }
}

/// Exact token-level KL between two teams under the reference team's
/// discounted occupancy: sum_s d^ref(s) KL(p(.|s) || q(.|s)), using the
/// active-factor reduction per state.
pub fn token_kl_tok(
    eval: &Evaluator,
    ref_team: &TeamPolicy,
    p: &TeamPolicy,
    q: &TeamPolicy,
) -> Result<KlEstimate> {
    let occ = eval.exact_occupancy(ref_team)?;
    let mut total = 0.0;
    for (s, state) in eval.space.states.iter().enumerate() {
        if state.terminal || occ.dist[s] == 0.0 {
            continue;
        }
        let j = crate::env::active_agent(state, &eval.router, &eval.env)?;
        total += occ.dist[s] * kl_statewise(&p.agents[j], &q.agents[j], state, &eval.env)?;
    }
    Ok(KlEstimate::exact(total))
}

/// Exact token-level KL of a single factor under the reference occupancy:
/// states where the factor is inactive contribute zero.
pub fn token_kl_factor(
    eval: &Evaluator,
    ref_team: &TeamPolicy,
    agent: usize,
    p_agent: &AgentPolicy,
    q_agent: &AgentPolicy,
) -> Result<KlEstimate> {
    let occ = eval.exact_occupancy(ref_team)?;
    let mut total = 0.0;
    for (s, state) in eval.space.states.iter().enumerate() {
        if state.terminal || occ.dist[s] == 0.0 {
            continue;
        }
        if crate::env::active_agent(state, &eval.router, &eval.env)? != agent {
            continue;
        }
        total += occ.dist[s] * kl_statewise(p_agent, q_agent, state, &eval.env)?;
    }
    Ok(KlEstimate::exact(total))
}

/// Per-state maximum KL over reachable non-terminal states (forward
/// orientation new||old), the radius entering the oracle upper envelope.
pub fn max_statewise_kl(
    eval: &Evaluator,
    new: &TeamPolicy,
    old: &TeamPolicy,
) -> Result<f64> {
    let mut max = 0.0f64;
    for state in eval.space.states.iter().filter(|s| !s.terminal) {
        let j = crate::env::active_agent(state, &eval.router, &eval.env)?;
        max = max.max(kl_statewise(&new.agents[j], &old.agents[j], state, &eval.env)?);
    }
    Ok(max)
}

/// Message-level KL via the chain rule: the expected sum of per-token KLs
/// over prefixes reached under p. Equals the direct message-level KL.
pub fn chain_rule_message_kl(
    p: &AgentPolicy,
    q: &AgentPolicy,
    state: &ContextState,
    env: &EnvConfig,
) -> Result<f64> {
    let prefixes = enumerate_prefixes(env);
    let mut total = 0.0;
    for prefix in &prefixes {
        // Probability under p of reaching this prefix with the message
        // still open (no EOS yet, length below the cap).
        let mut reach = 1.0;
        for (u, tok) in prefix.iter().enumerate() {
            reach *= p.token_logprob(state, &prefix[..u], *tok, env)?.exp();
        }
        if reach == 0.0 {
            continue;
        }
        let pp = p.probs_at(state, prefix);
        let qp = q.probs_at(state, prefix);
        let kl: f64 = pp
            .iter()
            .zip(&qp)
            .map(|(a, b)| if *a > 0.0 { a * (a.ln() - b.ln()) } else { 0.0 })
            .sum();
        total += reach * kl;
    }
    Ok(total)
}

/// Token-average and token-sum statistics of the per-message KL at a state:
/// avg = E_m[S(m)/T(m)], sum = E_m[S(m)], with the sandwich
/// avg <= sum <= t_max * avg.
pub fn token_avg_vs_sum(
    p: &AgentPolicy,
    q: &AgentPolicy,
    state: &ContextState,
    env: &EnvConfig,
) -> Result<(f64, f64, usize)> {
    let dist = p.message_dist(state, env)?;
    let mut avg = 0.0;
    let mut sum = 0.0;
    for (m, pm) in dist.support.iter().zip(&dist.probs) {
        if *pm == 0.0 {
            continue;
        }
        let mut s_m = 0.0;
        for u in 0..m.len() {
            let pp = p.probs_at(state, &m[..u]);
            let qp = q.probs_at(state, &m[..u]);
            let kl: f64 = pp
                .iter()
                .zip(&qp)
                .map(|(a, b)| if *a > 0.0 { a * (a.ln() - b.ln()) } else { 0.0 })
                .sum();
            s_m += kl;
        }
        sum += pm * s_m;
        avg += pm * s_m / m.len() as f64;
    }
    let t_max = env.msg_len_max;
    assert!(
        avg <= sum + 1e-12 && sum <= t_max as f64 * avg + 1e-12,
        "token avg/sum sandwich violated: avg {avg}, sum {sum}, t_max {t_max}"
    );
    Ok((avg, sum, t_max))
}

/// Sampled token-KL monitor: mean over the agent's messages of the
/// token-sum log-ratio log p / log q along behavior-sampled tokens.
/// Unbiased for the per-state message KL when the batch was collected with
/// `p` as the behavior factor.
pub fn sampled_kl_monitor(
    batch: &RolloutBatch,
    agent: usize,
    p_agent: &AgentPolicy,
    q_agent: &AgentPolicy,
    env: &EnvConfig,
) -> Result<KlEstimate> {
    let records = batch.agent_messages(agent);
    if records.is_empty() {
        return Err(Error::Estimation(format!(
            "no messages from agent {agent} in batch"
        )));
    }
    let mut terms = Vec::with_capacity(records.len());
    for rec in &records {
        let mut t = 0.0;
        for u in 0..rec.message.len() {
            let lp = p_agent.token_logprob(&rec.state, &rec.message[..u], rec.message[u], env)?;
            let lq = q_agent.token_logprob(&rec.state, &rec.message[..u], rec.message[u], env)?;
            t += lp - lq;
        }
        terms.push(t);
    }
    let n = terms.len();
    let mean = terms.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(KlEstimate {
        value: mean.max(0.0),
        raw_value: mean,
        stderr,
        n_samples: n,
        mode: KlMode::Sampled,
    })
}

/// Exact limit of the flat per-message monitor: reach-weighted mean of the
/// per-state message KL over states where the agent acts.
pub fn flat_monitor_exact(
    eval: &Evaluator,
    behavior: &TeamPolicy,
    agent: usize,
    p_agent: &AgentPolicy,
    q_agent: &AgentPolicy,
) -> Result<f64> {
    let rho = eval.reach_weights(behavior)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, state) in eval.space.states.iter().enumerate() {
        if state.terminal || rho[s] == 0.0 {
            continue;
        }
        if crate::env::active_agent(state, &eval.router, &eval.env)? != agent {
            continue;
        }
        num += rho[s] * kl_statewise(p_agent, q_agent, state, &eval.env)?;
        den += rho[s];
    }
    if den == 0.0 {
        return Err(Error::Estimation(format!(
            "agent {agent} never acts under the behavior team"
        )));
    }
    Ok(num / den)
}

/// Token-position subsampling reliability report for the sampled monitor.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SubsampleReport {
    /// Median over trials of |D_q - D| / delta.
    pub median_dev: f64,
    /// Conditional flip probability on the near-threshold band
    /// [0.8 delta, 1.2 delta]; `None` when the full-batch monitor is not
    /// near the threshold (undefined, not zero). Reported as zero when no
    /// subsample can deviate (all terms identical, e.g. p = q or q_frac 1).
    pub flip_rate: Option<f64>,
    pub n_positions: usize,
}

/// Recomputes the monitor from a random fraction of token positions,
/// `trials` times, and reports the normalized deviation and the
/// near-threshold flip rate.
pub fn subsample_flip_rate(
    batch: &RolloutBatch,
    agent: usize,
    p_agent: &AgentPolicy,
    q_agent: &AgentPolicy,
    env: &EnvConfig,
    delta: f64,
    q_frac: f64,
    trials: usize,
    seed: u64,
) -> Result<SubsampleReport> {
    if !(q_frac > 0.0 && q_frac <= 1.0) {
        return Err(Error::Usage("q_frac must lie in (0, 1]".into()));
    }
    let records = batch.agent_messages(agent);
    if records.is_empty() {
        return Err(Error::Estimation("no messages to subsample".into()));
    }
    let n_messages = records.len();
    let mut terms = Vec::new();
    for rec in &records {
        for u in 0..rec.message.len() {
            let lp = p_agent.token_logprob(&rec.state, &rec.message[..u], rec.message[u], env)?;
            let lq = q_agent.token_logprob(&rec.state, &rec.message[..u], rec.message[u], env)?;
            terms.push(lp - lq);
        }
    }
    let k = terms.len();
    let full = terms.iter().sum::<f64>() / n_messages as f64;
    let take = ((q_frac * k as f64).ceil() as usize).clamp(1, k);

    let tree = SeedTree::new(seed);
    let mut devs = Vec::with_capacity(trials);
    let mut flips = 0usize;
    let mut any_dev = false;
    for trial in 0..trials {
        let est = if take == k {
            // The full subsample is the full-batch estimator itself.
            full
        } else {
            let mut rng = tree.rng_indexed("subsample", trial as u64);
            // Partial Fisher-Yates for `take` distinct positions.
            let mut idx: Vec<usize> = (0..k).collect();
            for i in 0..take {
                let j = rng.gen_range(i..k);
                idx.swap(i, j);
            }
            let sub_mean: f64 =
                idx[..take].iter().map(|&i| terms[i]).sum::<f64>() / take as f64;
            sub_mean * k as f64 / n_messages as f64
        };
        let dev = (est - full).abs();
        if dev > 0.0 {
            any_dev = true;
        }
        devs.push(dev / delta);
        if (full <= delta) != (est <= delta) {
            flips += 1;
        }
    }
    devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_dev = devs[devs.len() / 2];
    let near_threshold = full >= 0.8 * delta && full <= 1.2 * delta;
    let flip_rate = if near_threshold {
        Some(flips as f64 / trials as f64)
    } else if !any_dev {
        Some(0.0)
    } else {
        None
    };
    Ok(SubsampleReport {
        median_dev,
        flip_rate,
        n_positions: k,
    })
}
