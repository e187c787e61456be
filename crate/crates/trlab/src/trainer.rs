//! Stage-wise sequential trust-region training with intermediate-occupancy
//! resampling, plus the stale-rollout, stale-with-importance-weighting,
//! periodic-resampling, joint-update, and penalty-only baselines, and the
//! projected-gradient auxiliaries with their smoothness constant.
//!
//! Batch collection events share RNG stream labels across modes, so
//! resample-every-1 is log-identical to the fresh mode and paired-mode
//! comparisons run under common random numbers.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::advantage::{
    batch_advantages, collect_rollouts, sample_prompts, zeta_proxy, GroupAdvConfig, RolloutBatch,
};
use crate::divergence::{token_kl_factor, KlEstimate, ScheduleMode, TrustRegionSchedule};
use crate::env::{ContextState, EnvConfig, Token};
use crate::error::{Error, Result};
use crate::exact::Evaluator;
use crate::policy::{AgentPolicy, RowKey, TeamPolicy};
use crate::seed::SeedTree;

/// Training mode for a stage run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Fresh rollouts under the intermediate team before every update.
    Fresh,
    /// One stage-start batch reused for all within-stage updates.
    Stale,
    /// Stage-start batch reweighted by cumulative importance ratios.
    StaleIs,
    /// Fresh rollouts every k updates.
    ResampleEveryK,
    /// All agents updated simultaneously from one stage-start batch.
    Joint,
    /// Adaptive KL penalty without trust-region gating or rejection.
    KlPenaltyOnly,
}

/// Update-order policy across a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderSpec {
    Fixed,
    Reverse,
    RandomPerStage,
}

/// Per-stage plan: mode, order, radii, and the rollout budget (total prompt
/// groups per stage, split evenly over collection events so modes are
/// budget-matched).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub mode: TrainMode,
    pub order: OrderSpec,
    pub radii: TrustRegionSchedule,
    #[serde(default = "default_one")]
    pub inner_epochs: usize,
    #[serde(default = "default_one")]
    pub resample_k: usize,
    pub rollout_budget: usize,
}

fn default_one() -> usize {
    1
}

impl StagePlan {
    pub fn validate(&self, n_agents: usize) -> Result<()> {
        self.radii.validate()?;
        if self.inner_epochs == 0 {
            return Err(Error::Config("inner_epochs must be >= 1".into()));
        }
        if self.mode == TrainMode::ResampleEveryK && self.resample_k == 0 {
            return Err(Error::Config("resample_k must be >= 1".into()));
        }
        if self.rollout_budget < n_agents.max(1) {
            return Err(Error::Config(format!(
                "rollout_budget {} cannot cover {} collection events",
                self.rollout_budget, n_agents
            )));
        }
        Ok(())
    }

    /// Update order for one stage.
    pub fn order_for_stage(&self, n: usize, stage: usize, tree: &SeedTree) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        match self.order {
            OrderSpec::Fixed => {}
            OrderSpec::Reverse => order.reverse(),
            OrderSpec::RandomPerStage => {
                let mut rng = tree.rng_indexed("order", stage as u64);
                order.shuffle(&mut rng);
            }
        }
        order
    }

    fn resamples_at(&self, step: usize) -> bool {
        match self.mode {
            TrainMode::Fresh | TrainMode::KlPenaltyOnly => true,
            TrainMode::Stale | TrainMode::StaleIs | TrainMode::Joint => step == 0,
            TrainMode::ResampleEveryK => step % self.resample_k == 0,
        }
    }
}

/// Inner-loop optimizer parameters: ratio clip, adaptive KL penalty, and
/// the early-stop band as fractions of the radius.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub ratio_eps: f64,
    pub beta_init: f64,
    pub beta_up: f64,
    pub beta_down: f64,
    pub lr: f64,
    pub max_inner_steps: usize,
    pub kl_band: (f64, f64),
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            ratio_eps: 0.2,
            beta_init: 1.0,
            beta_up: 2.0,
            beta_down: 0.5,
            lr: 0.3,
            max_inner_steps: 40,
            kl_band: (0.5, 1.0),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_eps > 0.0 && self.ratio_eps < 1.0) {
            return Err(Error::Config("ratio_eps must lie in (0,1)".into()));
        }
        if self.beta_init < 0.0 {
            return Err(Error::Config("beta_init must be >= 0".into()));
        }
        if !(self.beta_up > 1.0 && self.beta_down > 0.0 && self.beta_down < 1.0) {
            return Err(Error::Config(
                "need beta_up > 1 > beta_down > 0 for the adaptation rule".into(),
            ));
        }
        if self.lr < 0.0 {
            return Err(Error::Config("lr must be >= 0".into()));
        }
        if self.max_inner_steps == 0 {
            return Err(Error::Config("max_inner_steps must be >= 1".into()));
        }
        let (lo, hi) = self.kl_band;
        if !(0.0 < lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config("kl_band must satisfy 0 < low < high <= 1".into()));
        }
        Ok(())
    }
}

/// Per-update record with every exact field computed on the toy instance.
#[derive(Debug, Clone, Serialize)]
pub struct UpdateLog {
    pub stage: usize,
    pub step: usize,
    pub agent: usize,
    pub mode: TrainMode,
    pub radius: f64,
    pub groups: usize,
    /// Sampled token-KL monitor of the accepted policy.
    pub kl_monitored: f64,
    pub kl_monitor_stderr: f64,
    /// Exact token-KL of the updated factor under the behavior occupancy.
    pub kl_exact: f64,
    /// Exact team-level step KL (equals kl_exact by the single-factor
    /// reduction; logged separately as a standing identity check).
    pub kl_team_exact: f64,
    pub l_seq_hat: f64,
    pub l_stale_hat: f64,
    pub l_seq_exact: f64,
    pub l_stale_exact: f64,
    /// Exact max |A| of the behavior team at this step.
    pub a_max_exact: f64,
    pub zeta_norm: f64,
    pub zeta_clip: f64,
    pub zeta_ratio: f64,
    pub zeta_total: f64,
    pub beta_final: f64,
    pub inner_steps: usize,
    pub accepted: bool,
    pub in_region: bool,
    /// Normalized effective sample size of the stale-IS weights, when the
    /// mode uses them.
    pub ess_over_b: Option<f64>,
    pub j_before: f64,
    pub j_after: f64,
}

impl UpdateLog {
    pub fn csv_header() -> &'static str {
        "schema_version,stage,step,agent,mode,radius,groups,kl_monitored,kl_monitor_stderr,\
         kl_exact,kl_team_exact,l_seq_hat,l_stale_hat,l_seq_exact,l_stale_exact,a_max_exact,\
         zeta_norm,zeta_clip,zeta_ratio,zeta_total,beta_final,inner_steps,accepted,in_region,\
         ess_over_b,j_before,j_after"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "1,{},{},{},{:?},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.stage,
            self.step,
            self.agent,
            self.mode,
            self.radius,
            self.groups,
            self.kl_monitored,
            self.kl_monitor_stderr,
            self.kl_exact,
            self.kl_team_exact,
            self.l_seq_hat,
            self.l_stale_hat,
            self.l_seq_exact,
            self.l_stale_exact,
            self.a_max_exact,
            self.zeta_norm,
            self.zeta_clip,
            self.zeta_ratio,
            self.zeta_total,
            self.beta_final,
            self.inner_steps,
            self.accepted,
            self.in_region,
            self.ess_over_b.map(|e| e.to_string()).unwrap_or_default(),
            self.j_before,
            self.j_after
        )
    }
}

/// Likelihood ratio of a whole message under new vs behavior policies:
/// exp of the token log-ratio sum.
pub fn likelihood_ratio(
    agent_new: &AgentPolicy,
    agent_behavior: &AgentPolicy,
    state: &ContextState,
    message: &[Token],
    env: &EnvConfig,
) -> Result<f64> {
    let lp_new = agent_new.message_logprob(state, message, env)?;
    let lp_old = agent_behavior.message_logprob(state, message, env)?;
    Ok((lp_new - lp_old).exp())
}

/// One agent-j message occurrence prepared for the inner loop.
struct MsgTerm {
    state: ContextState,
    message: Vec<Token>,
    /// Stored behavior log-prob of the full message.
    behavior_lp: f64,
    /// Clipped group advantage broadcast from the trajectory.
    adv: f64,
    /// Trajectory importance weight (1 outside stale-IS).
    weight: f64,
}

fn gather_terms(
    batch: &RolloutBatch,
    agent: usize,
    advs: &[(Vec<f64>, Vec<f64>)],
    traj_weights: Option<&[f64]>,
) -> Result<Vec<MsgTerm>> {
    let mut terms = Vec::new();
    let mut traj_idx = 0usize;
    for (group, (_raw, clipped)) in batch.groups.iter().zip(advs) {
        for (gi, traj) in group.trajectories.iter().enumerate() {
            let weight = traj_weights.map(|w| w[traj_idx]).unwrap_or(1.0);
            traj_idx += 1;
            for step in traj.steps.iter().filter(|s| s.agent == agent) {
                terms.push(MsgTerm {
                    state: step.state.clone(),
                    message: step.message.clone(),
                    behavior_lp: step.token_logps.iter().sum(),
                    adv: clipped[gi],
                    weight,
                });
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::Estimation(format!(
            "no messages from agent {agent} in batch"
        )));
    }
    // Self-normalize the trajectory weights over messages.
    let mean_w: f64 = terms.iter().map(|t| t.weight).sum::<f64>() / terms.len() as f64;
    if mean_w > 0.0 {
        for t in terms.iter_mut() {
            t.weight /= mean_w;
        }
    }
    Ok(terms)
}

/// Weighted sampled token-KL monitor over prepared terms.
fn monitor_from_terms(terms: &[MsgTerm], new_agent: &AgentPolicy, env: &EnvConfig) -> Result<KlEstimate> {
    let n = terms.len();
    let mut vals = Vec::with_capacity(n);
    let mut wsum = 0.0;
    let mut mean = 0.0;
    for t in terms {
        let lp_new = new_agent.message_logprob(&t.state, &t.message, env)?;
        let v = t.behavior_lp - lp_new;
        vals.push((v, t.weight));
        wsum += t.weight;
        mean += t.weight * v;
    }
    mean /= wsum;
    let var: f64 = vals
        .iter()
        .map(|(v, w)| w * (v - mean).powi(2))
        .sum::<f64>()
        / wsum.max(1.0);
    let stderr = (var / n as f64).sqrt();
    Ok(KlEstimate {
        value: mean.max(0.0),
        raw_value: mean,
        stderr,
        n_samples: n,
        mode: crate::divergence::KlMode::Sampled,
    })
}

/// Clipped-surrogate objective with adaptive KL penalty:
/// mean over agent messages of min(w A, clip_eps(w) A) minus beta * kl_hat.
pub fn ppo_objective(
    batch: &RolloutBatch,
    agent: usize,
    agent_new: &AgentPolicy,
    advs: &[(Vec<f64>, Vec<f64>)],
    cfg: &PpoConfig,
    beta: f64,
    env: &EnvConfig,
) -> Result<f64> {
    let terms = gather_terms(batch, agent, advs, None)?;
    let (obj, _grad) = objective_and_grad(&terms, agent_new, cfg, beta, env, false)?;
    Ok(obj)
}

/// Objective value and (optionally) its exact gradient over the new
/// factor's logit rows.
fn objective_and_grad(
    terms: &[MsgTerm],
    new_agent: &AgentPolicy,
    cfg: &PpoConfig,
    beta: f64,
    env: &EnvConfig,
    with_grad: bool,
) -> Result<(f64, BTreeMap<RowKey, Vec<f64>>)> {
    let n = terms.len() as f64;
    let eps = cfg.ratio_eps;
    let mut obj_sur = 0.0;
    let mut kl_hat = 0.0;
    let mut grad: BTreeMap<RowKey, Vec<f64>> = BTreeMap::new();
    for t in terms {
        let lp_new = new_agent.message_logprob(&t.state, &t.message, env)?;
        let w = (lp_new - t.behavior_lp).exp();
        let w_clip = w.clamp(1.0 - eps, 1.0 + eps);
        obj_sur += t.weight * (w * t.adv).min(w_clip * t.adv);
        kl_hat += t.weight * (t.behavior_lp - lp_new);

        if with_grad {
            // Surrogate gradient flows unless the pessimistic min is pinned
            // at the clip boundary.
            let flow = if t.adv >= 0.0 { w <= 1.0 + eps } else { w >= 1.0 - eps };
            let sur_coeff = if flow { t.weight * t.adv * w / n } else { 0.0 };
            // KL-penalty gradient: +beta * mean of score terms.
            let kl_coeff = beta * t.weight / n;
            for u in 0..t.message.len() {
                let prefix = &t.message[..u];
                let probs = new_agent.probs_at(&t.state, prefix);
                let key: RowKey = (t.state.tokens.clone(), t.state.turn, prefix.to_vec());
                let row = grad
                    .entry(key)
                    .or_insert_with(|| vec![0.0; new_agent.vocab]);
                let tok = t.message[u] as usize;
                for (v, rv) in row.iter_mut().enumerate() {
                    let score = if v == tok { 1.0 - probs[v] } else { -probs[v] };
                    *rv += (sur_coeff + kl_coeff) * score;
                }
            }
        }
    }
    Ok((obj_sur / n - beta * (kl_hat / n), grad))
}

/// Result of one inner-loop optimization of a single factor.
#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub policy: AgentPolicy,
    pub kl_monitored: KlEstimate,
    pub beta_final: f64,
    pub inner_steps: usize,
    /// False when no gradient iterate satisfied the trust region and the
    /// behavior policy was returned instead.
    pub accepted: bool,
    pub in_region: bool,
}

/// Gradient-ascent inner loop on one factor with adaptive KL penalty:
/// beta doubles above the radius, halves below the band floor, and the
/// loop stops early once the monitor lands inside the band. When no
/// iterate is in-region by `max_inner_steps` the update is rejected and
/// the behavior policy is returned (flagged, zero step).
#[allow(clippy::too_many_arguments)]
pub fn update_agent(
    team: &TeamPolicy,
    agent: usize,
    batch: &RolloutBatch,
    radius: f64,
    adv_cfg: &GroupAdvConfig,
    ppo: &PpoConfig,
    env: &EnvConfig,
    schedule_mode: ScheduleMode,
    enforce: bool,
    inner_epochs: usize,
    traj_weights: Option<&[f64]>,
) -> Result<UpdateOutcome> {
    ppo.validate()?;
    let advs = batch_advantages(batch, adv_cfg)?;
    let terms = match gather_terms(batch, agent, &advs, traj_weights) {
        Ok(t) => t,
        // The agent never acted in this batch: nothing to optimize, the
        // behavior policy stands (zero step, trivially in-region).
        Err(Error::Estimation(_)) => {
            return Ok(UpdateOutcome {
                policy: team.agents[agent].clone(),
                kl_monitored: KlEstimate::exact(0.0),
                beta_final: ppo.beta_init,
                inner_steps: 0,
                accepted: true,
                in_region: true,
            })
        }
        Err(e) => return Err(e),
    };
    // A batch whose advantages are identically zero makes the surrogate
    // constant in the parameters, and the KL penalty is maximized at the
    // behavior policy itself: the exact argmax is a zero step.
    if terms.iter().all(|t| t.adv == 0.0) {
        return Ok(UpdateOutcome {
            policy: team.agents[agent].clone(),
            kl_monitored: KlEstimate::exact(0.0),
            beta_final: ppo.beta_init,
            inner_steps: 0,
            accepted: true,
            in_region: true,
        });
    }
    let band = match schedule_mode {
        ScheduleMode::Fixed => ppo.kl_band,
        ScheduleMode::AdaptiveTarget => (0.9, 1.0),
    };

    let behavior = team.agents[agent].clone();
    let mut current = behavior.clone();
    let mut beta = ppo.beta_init;
    let mut best: Option<(AgentPolicy, KlEstimate, f64)> = None;
    let mut steps_taken = 0usize;
    let mut khat = monitor_from_terms(&terms, &current, env)?;
    for _ in 0..ppo.max_inner_steps {
        for _ in 0..inner_epochs.max(1) {
            let (_obj, grad) = objective_and_grad(&terms, &current, ppo, beta, env, true)?;
            for (key, g) in &grad {
                let state = ContextState {
                    tokens: key.0.clone(),
                    turn: key.1,
                    terminal: false,
                };
                let delta: Vec<f64> = g.iter().map(|x| x * ppo.lr).collect();
                current.add_to_logits(&state, &key.2, &delta);
            }
        }
        steps_taken += 1;
        khat = monitor_from_terms(&terms, &current, env)?;
        if khat.value <= radius {
            best = Some((current.clone(), khat, beta));
        }
        if khat.value >= band.0 * radius && khat.value <= band.1 * radius {
            break;
        }
        if khat.value > radius {
            beta = (beta * ppo.beta_up).min(1e6);
        } else if khat.value < band.0 * radius {
            beta = (beta * ppo.beta_down).max(if ppo.beta_init > 0.0 { 1e-6 } else { 0.0 });
        }
    }

    if !enforce {
        let in_region = khat.value <= radius;
        return Ok(UpdateOutcome {
            policy: current,
            kl_monitored: khat,
            beta_final: beta,
            inner_steps: steps_taken,
            accepted: true,
            in_region,
        });
    }
    match best {
        Some((policy, kl, beta_at)) => Ok(UpdateOutcome {
            policy,
            kl_monitored: kl,
            beta_final: beta_at,
            inner_steps: steps_taken,
            accepted: true,
            in_region: true,
        }),
        None => Ok(UpdateOutcome {
            policy: behavior,
            kl_monitored: KlEstimate::exact(0.0),
            beta_final: beta,
            inner_steps: steps_taken,
            accepted: false,
            in_region: true,
        }),
    }
}

/// Cumulative importance weights of stage-start trajectories against the
/// current team, over messages emitted by already-updated factors.
pub fn importance_weights(
    stage_start_batch: &RolloutBatch,
    updated: &[usize],
    current_team: &TeamPolicy,
    env: &EnvConfig,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(stage_start_batch.n_trajectories());
    for group in &stage_start_batch.groups {
        for traj in &group.trajectories {
            let mut logw = 0.0;
            for step in &traj.steps {
                if updated.contains(&step.agent) {
                    let lp_new = current_team.agents[step.agent]
                        .message_logprob(&step.state, &step.message, env)?;
                    let lp_old: f64 = step.token_logps.iter().sum();
                    logw += lp_new - lp_old;
                }
            }
            out.push(logw.exp());
        }
    }
    Ok(out)
}

/// Sampled surrogate estimate (importance-weighted, discount-weighted):
/// mean over trajectories of sum_t gamma^t w_t A_tilde over agent messages.
pub fn sampled_surrogate(
    batch: &RolloutBatch,
    agent: usize,
    new_agent: &AgentPolicy,
    adv_cfg: &GroupAdvConfig,
    env: &EnvConfig,
) -> Result<f64> {
    let advs = batch_advantages(batch, adv_cfg)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (group, (_raw, clipped)) in batch.groups.iter().zip(&advs) {
        for (gi, traj) in group.trajectories.iter().enumerate() {
            count += 1;
            let mut disc = 1.0;
            for step in &traj.steps {
                if step.agent == agent {
                    let lp_new = new_agent.message_logprob(&step.state, &step.message, env)?;
                    let lp_old: f64 = step.token_logps.iter().sum();
                    let w = (lp_new - lp_old).exp();
                    total += disc * w * clipped[gi];
                }
                disc *= env.gamma;
            }
        }
    }
    Ok(total / count as f64)
}

/// A full stage of sequential (or joint) updates with exact bookkeeping.
pub struct StageContext<'a> {
    pub eval: &'a Evaluator,
    pub plan: &'a StagePlan,
    pub adv: &'a GroupAdvConfig,
    pub ppo: &'a PpoConfig,
}

/// Outcome of one stage: the updated team, one log per update, and the
/// intermediate team snapshots (index 0 is the stage-start team).
pub struct StageResult {
    pub team: TeamPolicy,
    pub logs: Vec<UpdateLog>,
    pub intermediates: Vec<TeamPolicy>,
}

/// Runs one stage in the plan's mode and returns the updated team plus one
/// log per update. Fresh probe batches used for logging the intermediate
/// surrogate in stale modes never enter the update path.
pub fn run_stage(
    ctx: &StageContext,
    team: &TeamPolicy,
    stage: usize,
    tree: &SeedTree,
) -> Result<StageResult> {
    let env = &ctx.eval.env;
    let n = env.n_agents;
    ctx.plan.validate(n)?;
    ctx.adv.validate()?;
    ctx.ppo.validate()?;
    if ctx.plan.mode == TrainMode::Joint {
        return run_stage_joint(ctx, team, stage, tree);
    }

    let order = ctx.plan.order_for_stage(n, stage, tree);
    // Budget matching: every update trains on an equal-sized slice of
    // whichever collection serves it. Stale modes collect once at stage
    // start and consume the collection as disjoint per-update slices, so
    // modes differ in freshness, not per-update sample size.
    let slice = (ctx.plan.rollout_budget / n.max(1)).max(1);
    let stage_start = team.clone();
    let d_start = ctx.eval.exact_occupancy(&stage_start)?;
    let mut current = team.clone();
    let mut intermediates = vec![team.clone()];
    let mut logs = Vec::with_capacity(n);
    let mut batch: Option<RolloutBatch> = None;
    let mut batch_offset = 0usize;
    let mut stage_start_batch: Option<RolloutBatch> = None;
    let mut updated_agents: Vec<usize> = Vec::new();

    for (i, &agent) in order.iter().enumerate() {
        let radius = ctx.plan.radii.radius(i);
        if ctx.plan.resamples_at(i) {
            // This collection serves every step until the next resample.
            let served = (i..n).take_while(|k| *k == i || !ctx.plan.resamples_at(*k)).count();
            let mut prng = tree.rng_indexed(&format!("prompts-s{stage}"), i as u64);
            let prompts = sample_prompts(env, served * slice, &mut prng);
            let b = collect_rollouts(
                &current,
                env,
                &prompts,
                ctx.adv.group_size,
                tree.child_indexed(&format!("collect-s{stage}"), i as u64),
            )?;
            if i == 0 {
                stage_start_batch = Some(b.clone());
            }
            batch = Some(b);
            batch_offset = i;
        }
        let full_batch = batch.as_ref().expect("first step always collects");
        let lo = (i - batch_offset) * slice;
        let hi = (lo + slice).min(full_batch.groups.len());
        let update_batch = RolloutBatch {
            groups: full_batch.groups[lo..hi].to_vec(),
            behavior_team_id: full_batch.behavior_team_id.clone(),
            gamma: full_batch.gamma,
        };
        let batch_ref = &update_batch;

        // Stale-IS reweighting of the reused slice.
        let (weights, ess) = if ctx.plan.mode == TrainMode::StaleIs && !updated_agents.is_empty() {
            let w = importance_weights(batch_ref, &updated_agents, &current, env)?;
            let sum: f64 = w.iter().sum();
            let sumsq: f64 = w.iter().map(|x| x * x).sum();
            let ess = sum * sum / (w.len() as f64 * sumsq);
            (Some(w), Some(ess))
        } else if ctx.plan.mode == TrainMode::StaleIs {
            (None, Some(1.0))
        } else {
            (None, None)
        };

        let j_before = ctx.eval.exact_return(&current)?;
        let behavior_factor = current.agents[agent].clone();
        let outcome = update_agent(
            &current,
            agent,
            batch_ref,
            radius,
            ctx.adv,
            ctx.ppo,
            env,
            ctx.plan.radii.mode,
            ctx.plan.mode != TrainMode::KlPenaltyOnly,
            ctx.plan.inner_epochs,
            weights.as_deref(),
        )?;
        let next = current.replace_factor(agent, outcome.policy.clone())?;
        let j_after = ctx.eval.exact_return(&next)?;

        // Exact bookkeeping on the behavior team.
        let kl_exact = token_kl_factor(ctx.eval, &current, agent, &behavior_factor, &outcome.policy)?
            .value;
        let kl_team_exact = crate::divergence::token_kl_tok(ctx.eval, &current, &current, &next)?
            .value;
        let d_inter = ctx.eval.exact_occupancy(&current)?;
        let adv_behavior = ctx.eval.exact_advantage(&current)?;
        let l_seq_exact = ctx.eval.surrogate_from(&d_inter, &adv_behavior, &next)?;
        let l_stale_exact = ctx.eval.surrogate_from(&d_start, &adv_behavior, &next)?;

        // Sampled surrogates: fresh side from the update batch (fresh
        // modes) or a logging-only probe batch (stale modes); stale side
        // from the retained stage-start batch.
        let l_seq_hat = if ctx.plan.resamples_at(i) || ctx.plan.mode == TrainMode::Fresh {
            sampled_surrogate(batch_ref, agent, &outcome.policy, ctx.adv, env)?
        } else {
            let mut prng = tree.rng_indexed(&format!("probe-prompts-s{stage}"), i as u64);
            let prompts = sample_prompts(env, slice, &mut prng);
            let probe = collect_rollouts(
                &current,
                env,
                &prompts,
                ctx.adv.group_size,
                tree.child_indexed(&format!("probe-s{stage}"), i as u64),
            )?;
            sampled_surrogate(&probe, agent, &outcome.policy, ctx.adv, env)?
        };
        let l_stale_hat = sampled_surrogate(
            stage_start_batch.as_ref().expect("set at step 0"),
            agent,
            &outcome.policy,
            ctx.adv,
            env,
        )?;

        let zp = zeta_proxy(batch_ref, &next, agent, ctx.adv, ctx.ppo.ratio_eps, env)?;
        logs.push(UpdateLog {
            stage,
            step: i + 1,
            agent,
            mode: ctx.plan.mode,
            radius,
            groups: slice,
            kl_monitored: outcome.kl_monitored.value,
            kl_monitor_stderr: outcome.kl_monitored.stderr,
            kl_exact,
            kl_team_exact,
            l_seq_hat,
            l_stale_hat,
            l_seq_exact,
            l_stale_exact,
            a_max_exact: adv_behavior.a_max_observed,
            zeta_norm: zp.norm_term.unwrap_or(0.0),
            zeta_clip: zp.clip_term,
            zeta_ratio: zp.ratio_term,
            zeta_total: zp.total(),
            beta_final: outcome.beta_final,
            inner_steps: outcome.inner_steps,
            accepted: outcome.accepted,
            in_region: outcome.in_region,
            ess_over_b: ess,
            j_before,
            j_after,
        });

        updated_agents.push(agent);
        current = next;
        intermediates.push(current.clone());
    }
    Ok(StageResult {
        team: current,
        logs,
        intermediates,
    })
}

/// Joint baseline: every agent updated simultaneously from one shared
/// stage-start batch; no per-factor KL identity is assumed.
fn run_stage_joint(
    ctx: &StageContext,
    team: &TeamPolicy,
    stage: usize,
    tree: &SeedTree,
) -> Result<StageResult> {
    let env = &ctx.eval.env;
    let n = env.n_agents;
    let per_collection = ctx.plan.rollout_budget.max(1);
    let mut prng = tree.rng_indexed(&format!("prompts-s{stage}"), 0);
    let prompts = sample_prompts(env, per_collection, &mut prng);
    let batch = collect_rollouts(
        team,
        env,
        &prompts,
        ctx.adv.group_size,
        tree.child_indexed(&format!("collect-s{stage}"), 0),
    )?;

    let j_before = ctx.eval.exact_return(team)?;
    let d_start = ctx.eval.exact_occupancy(team)?;
    let adv_behavior = ctx.eval.exact_advantage(team)?;
    let mut next = team.clone();
    let mut outcomes = Vec::with_capacity(n);
    for agent in 0..n {
        let radius = ctx.plan.radii.radius(agent);
        let outcome = update_agent(
            team,
            agent,
            &batch,
            radius,
            ctx.adv,
            ctx.ppo,
            env,
            ctx.plan.radii.mode,
            true,
            ctx.plan.inner_epochs,
            None,
        )?;
        next = next.replace_factor(agent, outcome.policy.clone())?;
        outcomes.push((agent, radius, outcome));
    }
    let j_after = ctx.eval.exact_return(&next)?;

    let mut logs = Vec::with_capacity(n);
    for (i, (agent, radius, outcome)) in outcomes.into_iter().enumerate() {
        let kl_exact =
            token_kl_factor(ctx.eval, team, agent, &team.agents[agent], &next.agents[agent])?
                .value;
        // Team-level step KL of the joint move (all factors at once).
        let kl_team_exact = crate::divergence::token_kl_tok(ctx.eval, team, team, &next)?.value;
        let l_seq_exact = ctx.eval.surrogate_from(&d_start, &adv_behavior, &next)?;
        let l_hat = sampled_surrogate(&batch, agent, &next.agents[agent], ctx.adv, env)?;
        let zp = zeta_proxy(&batch, &next, agent, ctx.adv, ctx.ppo.ratio_eps, env)?;
        logs.push(UpdateLog {
            stage,
            step: i + 1,
            agent,
            mode: TrainMode::Joint,
            radius,
            groups: per_collection,
            kl_monitored: outcome.kl_monitored.value,
            kl_monitor_stderr: outcome.kl_monitored.stderr,
            kl_exact,
            kl_team_exact,
            l_seq_hat: l_hat,
            l_stale_hat: l_hat,
            l_seq_exact,
            l_stale_exact: l_seq_exact,
            a_max_exact: adv_behavior.a_max_observed,
            zeta_norm: zp.norm_term.unwrap_or(0.0),
            zeta_clip: zp.clip_term,
            zeta_ratio: zp.ratio_term,
            zeta_total: zp.total(),
            beta_final: outcome.beta_final,
            inner_steps: outcome.inner_steps,
            accepted: outcome.accepted,
            in_region: outcome.in_region,
            ess_over_b: None,
            j_before,
            j_after,
        });
    }
    Ok(StageResult {
        intermediates: vec![team.clone(), next.clone()],
        team: next,
        logs,
    })
}

/// Score-norm and Hessian-norm bounds of the tabular log-softmax over all
/// reachable rows, assembled into the smoothness constant
/// L = n A_clip / (1-gamma) (B2 + B1^2).
pub fn smoothness_constant(
    team: &TeamPolicy,
    eval: &Evaluator,
    a_clip: f64,
) -> Result<(f64, f64, f64)> {
    let env = &eval.env;
    if env.msg_len_max != 1 {
        return Err(Error::Usage("smoothness constant requires token mode".into()));
    }
    let mut b1: f64 = 0.0;
    let mut b2: f64 = 0.0;
    for state in eval.space.states.iter().filter(|s| !s.terminal) {
        let j = crate::env::active_agent(state, &eval.router, env)?;
        let probs = team.agents[j].probs_at(state, &[]);
        for a in 0..probs.len() {
            // Score e_a - pi in logit coordinates.
            let norm_sq: f64 = probs
                .iter()
                .enumerate()
                .map(|(v, p)| {
                    let s = if v == a { 1.0 - p } else { -p };
                    s * s
                })
                .sum();
            b1 = b1.max(norm_sq.sqrt());
        }
        // Hessian of log-softmax is -(diag(pi) - pi pi^T); its operator
        // norm is the top eigenvalue of the Fisher row.
        let f = crate::policy::fisher_at(&team.agents[j], state, env)?;
        let eig = f.symmetric_eigen();
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        b2 = b2.max(top);
    }
    let n = team.n_agents() as f64;
    let l = n * a_clip / (1.0 - env.gamma) * (b2 + b1 * b1);
    Ok((l, b1, b2))
}

/// One projected-gradient ascent step theta' = Proj(theta + eta grad),
/// returning the iterate and the gradient mapping (theta' - theta) / eta.
pub fn pga_step<P: Fn(&[f64]) -> Vec<f64>>(
    theta: &[f64],
    grad: &[f64],
    eta: f64,
    project: P,
) -> (Vec<f64>, Vec<f64>) {
    let raw: Vec<f64> = theta.iter().zip(grad).map(|(t, g)| t + eta * g).collect();
    let next = project(&raw);
    let mapping: Vec<f64> = next
        .iter()
        .zip(theta)
        .map(|(n, t)| (n - t) / eta)
        .collect();
    (next, mapping)
}

/// Euclidean projection onto the ball of the given radius.
pub fn project_to_ball(theta: &[f64], radius: f64) -> Vec<f64> {
    let norm: f64 = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= radius {
        theta.to_vec()
    } else {
        theta.iter().map(|x| x * radius / norm).collect()
    }
}


#[cfg(test)]
mod order_tests {
    use super::*;

    #[test]
    fn random_order_is_a_valid_permutation() {
        let plan = StagePlan {
            mode: TrainMode::Fresh,
            order: OrderSpec::RandomPerStage,
            radii: TrustRegionSchedule::fixed(0.05, 5),
            inner_epochs: 1,
            resample_k: 1,
            rollout_budget: 10,
        };
        let tree = SeedTree::new(9);
        for stage in 0..10 {
            let order = plan.order_for_stage(5, stage, &tree);
            let mut sorted = order.clone();
            sorted.sort();
            assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
            // Same stage, same order; the stream is per stage.
            assert_eq!(order, plan.order_for_stage(5, stage, &tree));
        }
        // Different stages shuffle differently somewhere in 10 draws.
        let all_same = (1..10).all(|s| {
            plan.order_for_stage(5, s, &tree) == plan.order_for_stage(5, 0, &tree)
        });
        assert!(!all_same);
    }
}
