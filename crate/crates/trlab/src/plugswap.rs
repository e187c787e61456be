//! Plug-and-play agent replacement: probe-context sampling from the team's
//! occupancy, pre-swap alignment of the replacement by KL-projection
//! distillation, swap execution, and swap-shock measurement.
//!
//! Alignment enforces the KL cap only on the probe distribution; the
//! fresh-occupancy KL after alignment is measured and reported, never
//! asserted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::active_agent;
use crate::error::{Error, Result};
use crate::exact::Evaluator;
use crate::policy::{enumerate_prefixes, kl_statewise, AgentPolicy, TeamPolicy};

/// Probe contexts drawn i.i.d. (with replacement, multiplicities kept)
/// from the team occupancy conditioned on the replaced agent being active.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    /// State indices into the evaluator's enumeration, with repetitions.
    pub draws: Vec<usize>,
    pub agent: usize,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Normalized multiplicity weight per distinct probe state.
    pub fn weights(&self) -> Vec<(usize, f64)> {
        let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
        for d in &self.draws {
            *counts.entry(*d).or_default() += 1;
        }
        let n = self.draws.len() as f64;
        counts
            .into_iter()
            .map(|(s, c)| (s, c as f64 / n))
            .collect()
    }
}

/// Alignment parameters: the probe-KL target, step budget, learning rate,
/// and the teacher sample count used by the sampled distillation mode.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    pub delta_align: f64,
    pub max_steps: usize,
    pub lr: f64,
    #[serde(default = "default_teacher_samples")]
    pub teacher_samples_per_context: usize,
}

fn default_teacher_samples() -> usize {
    8
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            delta_align: 0.01,
            max_steps: 500,
            lr: 0.5,
            teacher_samples_per_context: 8,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta_align <= 0.0 {
            return Err(Error::Config("delta_align must be positive".into()));
        }
        if self.max_steps == 0 || self.lr <= 0.0 {
            return Err(Error::Config("alignment needs max_steps >= 1 and lr > 0".into()));
        }
        Ok(())
    }
}

/// Draws probe contexts from the exact conditional occupancy of states
/// where agent `j` is active.
pub fn sample_probe_contexts<R: Rng>(
    eval: &Evaluator,
    team: &TeamPolicy,
    agent: usize,
    size: usize,
    rng: &mut R,
) -> Result<ProbeSet> {
    let occ = eval.exact_occupancy(team)?;
    let mut support = Vec::new();
    let mut mass = 0.0;
    for (s, state) in eval.space.states.iter().enumerate() {
        if state.terminal || occ.dist[s] <= 0.0 {
            continue;
        }
        if active_agent(state, &eval.router, &eval.env)? == agent {
            support.push((s, occ.dist[s]));
            mass += occ.dist[s];
        }
    }
    if mass <= 0.0 {
        return Err(Error::Usage(format!(
            "occupancy puts no mass on states where agent {agent} acts"
        )));
    }
    let mut draws = Vec::with_capacity(size);
    for _ in 0..size {
        let mut u: f64 = rng.gen::<f64>() * mass;
        let mut chosen = support.last().unwrap().0;
        for (s, m) in &support {
            if u < *m {
                chosen = *s;
                break;
            }
            u -= m;
        }
        draws.push(chosen);
    }
    Ok(ProbeSet { draws, agent })
}

/// Exact probe-averaged message KL(old || candidate).
pub fn probe_kl(
    eval: &Evaluator,
    probes: &ProbeSet,
    old: &AgentPolicy,
    candidate: &AgentPolicy,
) -> Result<f64> {
    let mut total = 0.0;
    for (s, w) in probes.weights() {
        total += w * kl_statewise(old, candidate, eval.space.state(s), &eval.env)?;
    }
    Ok(total)
}

/// How alignment gradients are obtained: exact tabular KL gradients, or
/// sampled teacher-forced distillation (gradients from messages drawn from
/// the old policy; the stopping rule still checks the exact probe KL).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    #[default]
    Exact,
    TeacherSample,
}

#[derive(Debug, Clone)]
pub struct AlignOutcome {
    pub policy: AgentPolicy,
    pub probe_kl: f64,
    pub steps: usize,
    pub success: bool,
    /// Probe KL after each descent step (for the monotonicity check).
    pub loss_trace: Vec<f64>,
}

/// Distills the replacement toward the replaced agent on the probe set by
/// gradient descent on E_nu KL(old || new), stopping once the probe KL
/// falls below delta_align or the step budget runs out.
pub fn stage0_align<R: Rng>(
    eval: &Evaluator,
    old: &AgentPolicy,
    new: &AgentPolicy,
    probes: &ProbeSet,
    cfg: &AlignConfig,
    mode: AlignMode,
    rng: &mut R,
) -> Result<AlignOutcome> {
    cfg.validate()?;
    if probes.is_empty() {
        return Err(Error::Usage("empty probe set".into()));
    }
    let env = &eval.env;
    let weights = probes.weights();
    let mut current = new.clone();
    let mut trace = Vec::new();
    let mut kl = probe_kl(eval, probes, old, &current)?;
    if kl <= cfg.delta_align {
        return Ok(AlignOutcome {
            policy: current,
            probe_kl: kl,
            steps: 0,
            success: true,
            loss_trace: trace,
        });
    }
    for step in 1..=cfg.max_steps {
        match mode {
            AlignMode::Exact => {
                // d/dz KL(p || softmax(z)) = softmax(z) - p per prefix row,
                // weighted by the teacher's reach probability.
                for (s, w) in &weights {
                    let state = eval.space.state(*s).clone();
                    for prefix in enumerate_prefixes(env) {
                        let mut reach = 1.0;
                        for (u, tok) in prefix.iter().enumerate() {
                            reach *= old
                                .token_logprob(&state, &prefix[..u], *tok, env)?
                                .exp();
                        }
                        if reach == 0.0 {
                            continue;
                        }
                        let p_old = old.probs_at(&state, &prefix);
                        let p_new = current.probs_at(&state, &prefix);
                        let delta: Vec<f64> = p_old
                            .iter()
                            .zip(&p_new)
                            .map(|(po, pn)| -cfg.lr * w * reach * (pn - po))
                            .collect();
                        current.add_to_logits(&state, &prefix, &delta);
                    }
                }
            }
            AlignMode::TeacherSample => {
                // Stochastic cross-entropy descent on teacher-forced
                // messages sampled from the old policy.
                for (s, w) in &weights {
                    let state = eval.space.state(*s).clone();
                    for _ in 0..cfg.teacher_samples_per_context {
                        let message = old.sample_message(&state, env, rng)?;
                        for u in 0..message.len() {
                            let prefix = &message[..u];
                            let p_new = current.probs_at(&state, prefix);
                            let tok = message[u] as usize;
                            let scale =
                                cfg.lr * w / cfg.teacher_samples_per_context as f64;
                            let delta: Vec<f64> = (0..current.vocab)
                                .map(|v| {
                                    let tgt = if v == tok { 1.0 } else { 0.0 };
                                    scale * (tgt - p_new[v])
                                })
                                .collect();
                            current.add_to_logits(&state, prefix, &delta);
                        }
                    }
                }
            }
        }
        kl = probe_kl(eval, probes, old, &current)?;
        trace.push(kl);
        if kl <= cfg.delta_align {
            return Ok(AlignOutcome {
                policy: current,
                probe_kl: kl,
                steps: step,
                success: true,
                loss_trace: trace,
            });
        }
    }
    Ok(AlignOutcome {
        policy: current,
        probe_kl: kl,
        steps: cfg.max_steps,
        success: false,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwapStrategy {
    Direct,
    Aligned,
}

/// Swap report: exact return before/after, the shock, the probe KL reached
/// by alignment, and the fresh-occupancy KL of the new factor against the
/// old one (measured, not guaranteed).
#[derive(Debug, Clone, Serialize)]
pub struct SwapReport {
    pub agent: usize,
    pub strategy: SwapStrategy,
    pub j_before: f64,
    pub j_after: f64,
    pub swap_shock: f64,
    pub probe_kl: Option<f64>,
    pub align_steps: usize,
    pub align_success: Option<bool>,
    pub fresh_occupancy_kl: f64,
}

/// Replaces agent `j`; aligned mode runs stage-0 distillation on the probe
/// set first. The post-swap trust-region bookkeeping anchors at the spliced
/// (new behavior) policy.
#[allow(clippy::too_many_arguments)]
pub fn swap_agent<R: Rng>(
    eval: &Evaluator,
    team: &TeamPolicy,
    agent: usize,
    replacement: AgentPolicy,
    align: Option<(&AlignConfig, &ProbeSet, AlignMode)>,
    rng: &mut R,
) -> Result<(TeamPolicy, SwapReport)> {
    if agent >= team.n_agents() {
        return Err(Error::Usage(format!("agent index {agent} out of range")));
    }
    let j_before = eval.exact_return(team)?;
    let old = team.agents[agent].clone();
    let (candidate, strategy, probe, steps, success) = match align {
        None => (replacement, SwapStrategy::Direct, None, 0, None),
        Some((cfg, probes, mode)) => {
            let out = stage0_align(eval, &old, &replacement, probes, cfg, mode, rng)?;
            (
                out.policy,
                SwapStrategy::Aligned,
                Some(out.probe_kl),
                out.steps,
                Some(out.success),
            )
        }
    };
    let fresh_occupancy_kl =
        crate::divergence::token_kl_factor(eval, team, agent, &old, &candidate)?.value;
    let new_team = team.replace_factor(agent, candidate)?;
    let j_after = eval.exact_return(&new_team)?;
    Ok((
        new_team,
        SwapReport {
            agent,
            strategy,
            j_before,
            j_after,
            swap_shock: swap_shock_metric(&[j_before, j_after], 1),
            probe_kl: probe,
            align_steps: steps,
            align_success: success,
            fresh_occupancy_kl,
        },
    ))
}

/// Immediate drop in exact return at the swap point, floored at zero.
pub fn swap_shock_metric(j_trace: &[f64], swap_idx: usize) -> f64 {
    if swap_idx == 0 || swap_idx >= j_trace.len() {
        return 0.0;
    }
    (j_trace[swap_idx - 1] - j_trace[swap_idx]).max(0.0)
}
