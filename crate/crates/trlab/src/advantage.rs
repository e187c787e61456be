//! Rollout collection, group-normalized clipped sequence advantages, and
//! the estimation-error bookkeeping (zeta proxies, shrinkage, clipping
//! bias).
//!
//! A rollout batch is grouped by prompt: each group holds G trajectories
//! from the same initial context, with per-token behavior log-probabilities
//! recorded for later likelihood ratios. Groups draw from independent RNG
//! streams derived from the batch seed, so collection order (or parallel
//! collection) cannot change the data.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::env::{step, ContextState, EnvConfig, Token};
use crate::error::{Error, Result};
use crate::exact::{Evaluator, ValueTable};
use crate::policy::TeamPolicy;
use crate::seed::SeedTree;

/// One message emission: the source state, the active agent, the message,
/// its per-token behavior log-probs, and the transition reward.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: ContextState,
    pub agent: usize,
    pub message: Vec<Token>,
    pub token_logps: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub final_state: ContextState,
    /// Discounted episode return R_g.
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptGroup {
    pub prompt: Vec<Token>,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub groups: Vec<PromptGroup>,
    /// Snapshot id of the behavior team the batch was collected under.
    pub behavior_team_id: String,
    pub gamma: f64,
}

impl RolloutBatch {
    pub fn n_trajectories(&self) -> usize {
        self.groups.iter().map(|g| g.trajectories.len()).sum()
    }

    /// All messages emitted by one agent across the batch.
    pub fn agent_messages(&self, agent: usize) -> Vec<&StepRecord> {
        self.groups
            .iter()
            .flat_map(|g| &g.trajectories)
            .flat_map(|t| &t.steps)
            .filter(|s| s.agent == agent)
            .collect()
    }

    /// Empirical discounted state-visitation mass on the enumerated space
    /// (terminal absorption carries the tail mass gamma^T).
    pub fn discounted_visit_mass(&self, eval: &Evaluator) -> Result<Vec<f64>> {
        let gamma = self.gamma;
        let mut mass = vec![0.0; eval.n_states()];
        let mut count = 0usize;
        for group in &self.groups {
            for traj in &group.trajectories {
                count += 1;
                let mut disc = 1.0;
                for step in &traj.steps {
                    mass[eval.space.index_of(&step.state)?] += (1.0 - gamma) * disc;
                    disc *= gamma;
                }
                mass[eval.space.index_of(&traj.final_state)?] += disc;
            }
        }
        if count == 0 {
            return Err(Error::Estimation("empty batch".into()));
        }
        for m in mass.iter_mut() {
            *m /= count as f64;
        }
        Ok(mass)
    }
}

/// Stable snapshot id for a team (used to tag batches).
pub fn team_id(team: &TeamPolicy) -> String {
    let mut h = Sha256::new();
    h.update(team.to_text().as_bytes());
    let d = h.finalize();
    d[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// Draws `n` prompt contexts i.i.d. from the initial distribution.
pub fn sample_prompts<R: Rng>(env: &EnvConfig, n: usize, rng: &mut R) -> Vec<Vec<Token>> {
    (0..n)
        .map(|_| {
            let mut u: f64 = rng.gen();
            for (ctx, p) in env.initial_contexts.iter().zip(&env.initial_probs) {
                if u < *p {
                    return ctx.clone();
                }
                u -= p;
            }
            env.initial_contexts.last().unwrap().clone()
        })
        .collect()
}

/// Collects G trajectories per prompt under the team, recording per-token
/// behavior log-probs. Deterministic given `seed`; each (group, member)
/// pair has its own RNG stream.
pub fn collect_rollouts(
    team: &TeamPolicy,
    env: &EnvConfig,
    prompts: &[Vec<Token>],
    g: usize,
    seed: u64,
) -> Result<RolloutBatch> {
    if g == 0 || prompts.is_empty() {
        return Err(Error::Usage("need at least one prompt and G >= 1".into()));
    }
    let tree = SeedTree::new(seed);
    let mut groups = Vec::with_capacity(prompts.len());
    for (gi, prompt) in prompts.iter().enumerate() {
        let mut trajectories = Vec::with_capacity(g);
        for member in 0..g {
            let mut rng = tree.rng_indexed("rollout", (gi * g + member) as u64);
            let mut state = ContextState::initial(prompt.clone(), env);
            let mut steps = Vec::new();
            let mut disc = 1.0;
            let mut ret = 0.0;
            while !state.terminal {
                let agent_idx = crate::env::active_agent(&state, &team.router, env)?;
                let agent = &team.agents[agent_idx];
                let message = agent.sample_message(&state, env, &mut rng)?;
                let token_logps: Vec<f64> = (0..message.len())
                    .map(|u| agent.token_logprob(&state, &message[..u], message[u], env))
                    .collect::<Result<_>>()?;
                let (next, reward) = step(&state, &message, env)?;
                ret += disc * reward;
                disc *= env.gamma;
                steps.push(StepRecord {
                    state: state.clone(),
                    agent: agent_idx,
                    message,
                    token_logps,
                    reward,
                });
                state = next;
            }
            trajectories.push(Trajectory {
                steps,
                final_state: state,
                ret,
            });
        }
        groups.push(PromptGroup {
            prompt: prompt.clone(),
            trajectories,
        });
    }
    Ok(RolloutBatch {
        groups,
        behavior_team_id: team_id(team),
        gamma: env.gamma,
    })
}

/// Group-advantage parameters: group size, hard clip,
/// and the epsilon inside the standard deviation.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GroupAdvConfig {
    pub group_size: usize,
    pub a_clip: f64,
    pub eps_norm: f64,
}

impl Default for GroupAdvConfig {
    fn default() -> Self {
        GroupAdvConfig {
            group_size: 8,
            a_clip: 3.0,
            eps_norm: 1e-6,
        }
    }
}

impl GroupAdvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.a_clip <= 0.0 {
            return Err(Error::Config("a_clip must be positive".into()));
        }
        if self.eps_norm < 0.0 {
            return Err(Error::Config("eps_norm must be nonnegative".into()));
        }
        Ok(())
    }
}

fn standardize(returns: &[f64], eps_norm: f64) -> (Vec<f64>, f64, f64) {
    let g = returns.len() as f64;
    let mu = returns.iter().sum::<f64>() / g;
    let var = returns.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / g;
    let sigma = (var + eps_norm).sqrt();
    let std = returns
        .iter()
        .map(|r| {
            let num = r - mu;
            if num == 0.0 {
                0.0
            } else {
                num / sigma
            }
        })
        .collect();
    (std, mu, sigma)
}

/// Standardized, hard-clipped group advantages for one prompt group.
pub fn group_advantage(returns: &[f64], cfg: &GroupAdvConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if returns.len() != cfg.group_size {
        return Err(Error::Usage(format!(
            "expected {} returns, got {}",
            cfg.group_size,
            returns.len()
        )));
    }
    let (std, _mu, _sigma) = standardize(returns, cfg.eps_norm);
    let out: Vec<f64> = std
        .iter()
        .map(|a| a.clamp(-cfg.a_clip, cfg.a_clip))
        .collect();
    for a in &out {
        assert!(a.abs() <= cfg.a_clip, "advantage bound violated");
    }
    Ok(out)
}

/// Unclipped and clipped standardized advantages per group, in batch order.
pub fn batch_advantages(
    batch: &RolloutBatch,
    cfg: &GroupAdvConfig,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    batch
        .groups
        .iter()
        .map(|g| {
            let returns: Vec<f64> = g.trajectories.iter().map(|t| t.ret).collect();
            if returns.len() != cfg.group_size {
                return Err(Error::Usage(format!(
                    "group has {} trajectories, expected {}",
                    returns.len(),
                    cfg.group_size
                )));
            }
            let (raw, _, _) = standardize(&returns, cfg.eps_norm);
            let clipped = raw.iter().map(|a| a.clamp(-cfg.a_clip, cfg.a_clip)).collect();
            Ok((raw, clipped))
        })
        .collect()
}

/// Decomposed zeta proxy (normalization / advantage-clip / ratio-clip).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ZetaProxy {
    /// Half-split normalization-uncertainty term; undefined for G < 4.
    pub norm_term: Option<f64>,
    pub clip_term: f64,
    pub ratio_term: f64,
}

impl ZetaProxy {
    pub fn total(&self) -> f64 {
        self.norm_term.unwrap_or(0.0) + self.clip_term + self.ratio_term
    }
}

/// Trajectory-level likelihood ratio of the updated agent: product of
/// per-message ratios over that agent's messages.
pub fn trajectory_ratio(
    traj: &Trajectory,
    agent: usize,
    new_team: &TeamPolicy,
    env: &EnvConfig,
) -> Result<f64> {
    let mut logw = 0.0;
    for s in traj.steps.iter().filter(|s| s.agent == agent) {
        let lp_new = new_team.agents[agent].message_logprob(&s.state, &s.message, env)?;
        let lp_old: f64 = s.token_logps.iter().sum();
        logw += lp_new - lp_old;
    }
    Ok(logw.exp())
}

/// Computes the three proxy components from a batch and the updated factor.
///
/// The ratio term uses trajectory-level product ratios w and their clipped
/// versions; the half-split norm term restandardizes each group half and
/// measures the mean absolute disagreement against the full-group value.
pub fn zeta_proxy(
    batch: &RolloutBatch,
    new_team: &TeamPolicy,
    agent: usize,
    cfg: &GroupAdvConfig,
    ppo_eps: f64,
    env: &EnvConfig,
) -> Result<ZetaProxy> {
    let advs = batch_advantages(batch, cfg)?;
    let mut clip_sum = 0.0;
    let mut ratio_sum = 0.0;
    let mut count = 0usize;
    for (group, (raw, clipped)) in batch.groups.iter().zip(&advs) {
        for (gi, traj) in group.trajectories.iter().enumerate() {
            let w = trajectory_ratio(traj, agent, new_team, env)?;
            let w_clip = w.clamp(1.0 - ppo_eps, 1.0 + ppo_eps);
            clip_sum += (raw[gi] - clipped[gi]).abs();
            ratio_sum += clipped[gi].abs() * (w - w_clip).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Estimation("empty batch".into()));
    }
    let clip_term = clip_sum / count as f64;
    let ratio_term = ratio_sum / count as f64;

    let norm_term = if cfg.group_size >= 4 {
        let mut total = 0.0;
        let mut members = 0usize;
        for (group, (_raw, clipped)) in batch.groups.iter().zip(&advs) {
            let returns: Vec<f64> = group.trajectories.iter().map(|t| t.ret).collect();
            let half = returns.len() / 2;
            let (lo, _, _) = standardize(&returns[..half], cfg.eps_norm);
            let (hi, _, _) = standardize(&returns[half..], cfg.eps_norm);
            for (gi, full) in clipped.iter().enumerate() {
                let half_val = if gi < half {
                    lo[gi].clamp(-cfg.a_clip, cfg.a_clip)
                } else {
                    hi[gi - half].clamp(-cfg.a_clip, cfg.a_clip)
                };
                total += (half_val - full).abs();
                members += 1;
            }
        }
        Some(total / members as f64)
    } else {
        None
    };

    Ok(ZetaProxy {
        norm_term,
        clip_term,
        ratio_term,
    })
}

/// Which advantage estimator the exact-mismatch measurement probes.
#[derive(Debug, Clone, Copy)]
pub enum AdvEstimator {
    /// Group-standardized, hard-clipped (the training estimator).
    GroupStd(GroupAdvConfig),
    /// Plain group-mean baseline R - mu_hat (exposes the 1/G shrinkage bias).
    GroupMeanBaseline,
    /// Oracle: the exact advantage itself (mismatch identically zero).
    OracleExact,
}

/// Monte Carlo estimate of the true estimation error
/// |E_{s~d^b, a~new}[E[A_hat] - A^b]| with its standard error.
///
/// Each trial collects one fresh batch under the behavior team, broadcasts
/// the estimator value over the updated agent's messages, importance-weights
/// actions to the new team, and discount-weights states to the occupancy.
pub fn zeta_exact_mc(
    eval: &Evaluator,
    behavior: &TeamPolicy,
    new_team: &TeamPolicy,
    agent: usize,
    estimator: AdvEstimator,
    adv_exact: &ValueTable,
    prompts_per_trial: usize,
    g: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if trials < 2 {
        return Err(Error::Usage("need at least 2 trials".into()));
    }
    let env = &eval.env;
    let tree = SeedTree::new(seed);
    let mut trial_means = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut prng = tree.rng_indexed("prompts", trial as u64);
        let prompts = sample_prompts(env, prompts_per_trial, &mut prng);
        let batch = collect_rollouts(
            behavior,
            env,
            &prompts,
            g,
            tree.child_indexed("batch", trial as u64),
        )?;
        let mut acc = 0.0;
        let mut count = 0usize;
        for group in &batch.groups {
            let returns: Vec<f64> = group.trajectories.iter().map(|t| t.ret).collect();
            let est_values: Vec<Option<f64>> = match estimator {
                AdvEstimator::GroupStd(cfg) => group_advantage(&returns, &cfg)?
                    .into_iter()
                    .map(Some)
                    .collect(),
                AdvEstimator::GroupMeanBaseline => {
                    let mu = returns.iter().sum::<f64>() / returns.len() as f64;
                    returns.iter().map(|r| Some(r - mu)).collect()
                }
                AdvEstimator::OracleExact => vec![None; returns.len()],
            };
            for (traj, est) in group.trajectories.iter().zip(&est_values) {
                count += 1;
                let mut disc = 1.0;
                let mut contrib = 0.0;
                for s in &traj.steps {
                    if s.agent == agent {
                        let si = eval.space.index_of(&s.state)?;
                        let mi = eval
                            .messages
                            .iter()
                            .position(|m| *m == s.message)
                            .ok_or_else(|| Error::Usage("unknown message".into()))?;
                        let a_true = adv_exact.adv[si][mi];
                        let est_val = est.unwrap_or(a_true);
                        let lp_new =
                            new_team.agents[agent].message_logprob(&s.state, &s.message, env)?;
                        let lp_old: f64 = s.token_logps.iter().sum();
                        let w = (lp_new - lp_old).exp();
                        contrib += disc * w * (est_val - a_true);
                    }
                    disc *= env.gamma;
                }
                acc += contrib;
            }
        }
        trial_means.push(acc / count as f64);
    }
    let mean = trial_means.iter().sum::<f64>() / trials as f64;
    let var = trial_means
        .iter()
        .map(|x| (x - mean).powi(2))
        .sum::<f64>()
        / (trials - 1) as f64;
    let stderr = (var / trials as f64).sqrt();
    Ok((mean.abs(), stderr))
}

/// Regresses the self-included group-mean residual R - mu_hat on the true
/// centered return R - mu(x) across Monte Carlo trials; the slope estimates
/// 1 - 1/G. The residuals within a group share the same mu_hat, so the
/// standard error is cluster-robust with groups as clusters. Returns
/// (slope, 95% CI half-width).
pub fn shrinkage_check(
    eval: &Evaluator,
    team: &TeamPolicy,
    g: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let env = &eval.env;
    let values = eval.exact_advantage(team)?;
    let tree = SeedTree::new(seed);
    let mut groups: Vec<Vec<(f64, f64)>> = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut prng = tree.rng_indexed("prompt", trial as u64);
        let prompts = sample_prompts(env, 1, &mut prng);
        let batch = collect_rollouts(
            team,
            env,
            &prompts,
            g,
            tree.child_indexed("batch", trial as u64),
        )?;
        let group = &batch.groups[0];
        let s0 = ContextState::initial(group.prompt.clone(), env);
        let mu_x = values.v[eval.space.index_of(&s0)?];
        let returns: Vec<f64> = group.trajectories.iter().map(|t| t.ret).collect();
        let mu_hat = returns.iter().sum::<f64>() / returns.len() as f64;
        groups.push(returns.iter().map(|r| (r - mu_x, r - mu_hat)).collect());
    }
    let sxx: f64 = groups
        .iter()
        .flatten()
        .map(|(x, _)| x * x)
        .sum();
    if sxx < 1e-12 {
        return Err(Error::Estimation(
            "degenerate zero-variance returns: slope undefined".into(),
        ));
    }
    let sxy: f64 = groups.iter().flatten().map(|(x, y)| x * y).sum();
    let slope = sxy / sxx;
    // Cluster-robust sandwich variance over group-level score sums.
    let meat: f64 = groups
        .iter()
        .map(|grp| {
            grp.iter()
                .map(|(x, y)| x * (y - slope * x))
                .sum::<f64>()
                .powi(2)
        })
        .sum();
    let se = meat.sqrt() / sxx;
    Ok((slope, 1.96 * se))
}

/// Clipping-bias report for a discrete distribution of values.
#[derive(Debug, Clone, Copy)]
pub struct ClipBiasReport {
    pub bias: f64,
    /// E[|Z| 1{|Z| > c}].
    pub bound_overflow: f64,
    /// ||Z||_inf * P(|Z| > c).
    pub bound_inf: f64,
    /// sqrt(E[Z^2] * P(|Z| > c)).
    pub bound_l2: f64,
}

/// |E[clip(Z)] - E[Z]| with the overflow, sup-norm, and Cauchy-Schwarz
/// bounds; the bias never exceeds any of them.
pub fn clip_bias_bound(values: &[f64], probs: &[f64], clip_c: f64) -> Result<ClipBiasReport> {
    if values.is_empty() || values.len() != probs.len() {
        return Err(Error::Usage("values/probs mismatch".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Usage("probs must sum to 1".into()));
    }
    let mean: f64 = values.iter().zip(probs).map(|(z, p)| z * p).sum();
    let mean_clip: f64 = values
        .iter()
        .zip(probs)
        .map(|(z, p)| z.clamp(-clip_c, clip_c) * p)
        .sum();
    let bias = (mean_clip - mean).abs();
    let overflow: f64 = values
        .iter()
        .zip(probs)
        .filter(|(z, _)| z.abs() > clip_c)
        .map(|(z, p)| z.abs() * p)
        .sum();
    let p_over: f64 = values
        .iter()
        .zip(probs)
        .filter(|(z, _)| z.abs() > clip_c)
        .map(|(_, p)| *p)
        .sum();
    let sup = values.iter().map(|z| z.abs()).fold(0.0, f64::max);
    let second: f64 = values.iter().zip(probs).map(|(z, p)| z * z * p).sum();
    let report = ClipBiasReport {
        bias,
        bound_overflow: overflow,
        bound_inf: sup * p_over,
        bound_l2: (second * p_over).sqrt(),
    };
    assert!(
        report.bias <= report.bound_overflow + 1e-12
            && report.bias <= report.bound_inf.min(report.bound_l2) + 1e-12,
        "clip bias inequality violated: {report:?}"
    );
    Ok(report)
}
