//! Experiment-level measurements: stale-occupancy gap traces, occupancy
//! drift, team-size scaling exponents, importance-weight degeneracy, and
//! certificate calibration.
//!
//! Exact occupancies replace the hashed empirical context distributions a
//! large-scale run would use; runs at this scale measure the same
//! quantities with zero estimation noise.

use std::fmt::Write as _;

use serde::Serialize;

use crate::advantage::GroupAdvConfig;
use crate::certificate::stale_gap_bound;
use crate::env::{ContextState, EnvConfig};
use crate::error::{Error, Result};
use crate::exact::Evaluator;
use crate::policy::{AgentPolicy, TeamPolicy};
use crate::seed::SeedTree;
use crate::trainer::{run_stage, PpoConfig, StageContext, StagePlan, UpdateLog};

/// One within-stage gap measurement.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapRow {
    pub stage: usize,
    pub step: usize,
    /// Sampled-surrogate gap |L_seq_hat - L_stale_hat|.
    pub gap_hat: f64,
    /// Exact-surrogate gap |L_seq_exact - L_stale_exact|.
    pub gap_exact: f64,
    /// Surrogate-gap bound built from the exact per-step KLs of the
    /// earlier updates in the same stage.
    pub bound: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GapTrace {
    pub rows: Vec<GapRow>,
}

impl GapTrace {
    /// Median of the exact-surrogate gap at a given within-stage step.
    pub fn median_gap_at_step(&self, step: usize) -> Option<f64> {
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.step == step)
            .map(|r| r.gap_exact)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(v[v.len() / 2])
    }

    pub fn any_bound_violation(&self) -> bool {
        self.rows.iter().any(|r| r.gap_exact > r.bound + 1e-9)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("schema_version,stage,step,gap_hat,gap_exact,bound,radius\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "1,{},{},{},{},{},{}",
                r.stage, r.step, r.gap_hat, r.gap_exact, r.bound, r.radius
            );
        }
        out
    }
}

/// Builds the gap trace from update logs. Every log row carries both
/// surrogate variants, so the only failure mode is an empty input.
pub fn stale_gap(logs: &[UpdateLog], gamma: f64) -> Result<GapTrace> {
    if logs.is_empty() {
        return Err(Error::Usage("no update logs to trace".into()));
    }
    let mut rows = Vec::with_capacity(logs.len());
    let mut stage = usize::MAX;
    let mut kl_prefix: Vec<f64> = Vec::new();
    for log in logs {
        if log.stage != stage {
            stage = log.stage;
            kl_prefix.clear();
        }
        let bound = stale_gap_bound(&kl_prefix, log.a_max_exact, gamma);
        rows.push(GapRow {
            stage: log.stage,
            step: log.step,
            gap_hat: (log.l_seq_hat - log.l_stale_hat).abs(),
            gap_exact: (log.l_seq_exact - log.l_stale_exact).abs(),
            bound,
            radius: log.radius,
        });
        kl_prefix.push(log.kl_exact);
    }
    Ok(GapTrace { rows })
}

/// Total variation between two teams' exact occupancies.
pub fn occupancy_tv_proxy(eval: &Evaluator, a: &TeamPolicy, b: &TeamPolicy) -> Result<f64> {
    let da = eval.exact_occupancy(a)?;
    let db = eval.exact_occupancy(b)?;
    Ok(0.5
        * da.dist
            .iter()
            .zip(&db.dist)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>())
}

/// Ordinary least squares on (log n, log y) with a free intercept;
/// returns the exponent.
pub fn fit_exponent(ns: &[f64], ys: &[f64]) -> Result<f64> {
    if ns.len() != ys.len() || ns.len() < 2 {
        return Err(Error::Usage("need >= 2 points to fit".into()));
    }
    if ys.iter().any(|y| *y <= 0.0) || ns.iter().any(|n| *n <= 0.0) {
        return Err(Error::Usage("log-log fit needs positive values".into()));
    }
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ls: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ls.iter().sum::<f64>() / ls.len() as f64;
    let num: f64 = xs.iter().zip(&ls).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if den == 0.0 {
        return Err(Error::Usage("degenerate n values".into()));
    }
    Ok(num / den)
}

/// Per-cell measurement of the team-size sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScalingCell {
    pub n: usize,
    pub seed: u64,
    pub delta_stale: f64,
    pub d_occ: f64,
    /// Measured certificate penalty sum over the run, in the form the
    /// mode's stage certificate uses: sum_i sqrt(kl_i) for fresh
    /// evaluation, sum_i (sqrt(kl_i) + sum_{k<i} sqrt(kl_k)) for stale.
    pub penalty_sum: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingResult {
    pub n_values: Vec<usize>,
    pub cells: Vec<ScalingCell>,
    /// Fitted exponent of the summed surrogate gap, mean over seeds.
    pub alpha_delta: f64,
    pub alpha_delta_stderr: f64,
    /// Fitted exponent of the summed occupancy TV drift.
    pub alpha_docc: f64,
    pub alpha_docc_stderr: f64,
    /// Fitted exponent of the measured certificate penalty sum (the
    /// quadratic-to-linear quantity of the stale/fresh stage bounds).
    pub alpha_penalty: f64,
    pub alpha_penalty_stderr: f64,
    pub method: String,
}

impl ScalingResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("schema_version,method,n,seed,delta_stale,d_occ\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "1,{},{},{},{},{}",
                self.method, c.n, c.seed, c.delta_stale, c.d_occ
            );
        }
        out
    }
}

/// Runs the team-size sweep: for each (n, seed), trains `stages` stages and
/// measures the summed sampled-surrogate gap (hat estimates from rollout
/// batches; for fresh-mode runs the per-step gap is pure sampling noise
/// of roughly constant size, so its sum grows linearly in n) and the
/// summed exact-occupancy drift against the stage start. Both are
/// aggregated over all stages: a single stage's values alias with the
/// phase of stale-mode churn at this scale. Exponents are fitted per seed
/// and averaged; fewer than 4 distinct team sizes are refused.
#[allow(clippy::too_many_arguments)]
pub fn scaling_sweep<F>(
    n_values: &[usize],
    make_env: F,
    plan_template: &StagePlan,
    adv: &GroupAdvConfig,
    ppo: &PpoConfig,
    stages: usize,
    seeds: &[u64],
    method: &str,
) -> Result<ScalingResult>
where
    F: Fn(usize) -> EnvConfig,
{
    if n_values.len() < 4 {
        return Err(Error::Usage(format!(
            "scaling fit refused: need >= 4 distinct team sizes, got {}",
            n_values.len()
        )));
    }
    if seeds.is_empty() || stages == 0 {
        return Err(Error::Usage("need >= 1 seed and >= 1 stage".into()));
    }
    let mut cells = Vec::new();
    for &seed in seeds {
        for &n in n_values {
            let env = make_env(n);
            let router = crate::env::Router::RoundRobin;
            let eval = Evaluator::new(&env, &router)?;
            let mut plan = plan_template.clone();
            // Budget scales with the number of within-stage updates so each
            // update sees the same group count across team sizes.
            plan.rollout_budget = plan_template.rollout_budget * n;
            let ctx = StageContext {
                eval: &eval,
                plan: &plan,
                adv,
                ppo,
            };
            let tree = SeedTree::new(seed).subtree(&format!("scale-n{n}"));
            let mut team = TeamPolicy::uniform(&env, router.clone());
            let mut delta_stale = 0.0;
            let mut d_occ = 0.0;
            let mut penalty_sum = 0.0;
            let stale_form = matches!(
                plan.mode,
                crate::trainer::TrainMode::Stale | crate::trainer::TrainMode::StaleIs
            );
            for stage in 0..stages {
                let result = run_stage(&ctx, &team, stage, &tree)?;
                team = result.team.clone();
                delta_stale += result
                    .logs
                    .iter()
                    .map(|l| (l.l_seq_hat - l.l_stale_hat).abs())
                    .sum::<f64>();
                let start = &result.intermediates[0];
                for i in 1..=env.n_agents {
                    d_occ += occupancy_tv_proxy(&eval, &result.intermediates[i - 1], start)?;
                }
                let kls: Vec<f64> = result.logs.iter().map(|l| l.kl_exact).collect();
                penalty_sum += if stale_form {
                    crate::certificate::stale_penalty_sqrt_sum(&kls)
                } else {
                    kls.iter().map(|k| k.sqrt()).sum::<f64>()
                };
            }
            cells.push(ScalingCell {
                n,
                seed,
                delta_stale,
                d_occ,
                penalty_sum,
            });
        }
    }

    let fit_per_seed = |metric: &dyn Fn(&ScalingCell) -> f64| -> Result<(f64, f64)> {
        let mut alphas = Vec::new();
        for &seed in seeds {
            let ns: Vec<f64> = n_values.iter().map(|n| *n as f64).collect();
            let ys: Vec<f64> = n_values
                .iter()
                .map(|n| {
                    cells
                        .iter()
                        .find(|c| c.n == *n && c.seed == seed)
                        .map(metric)
                        .unwrap()
                        .max(1e-12)
                })
                .collect();
            alphas.push(fit_exponent(&ns, &ys)?);
        }
        let mean = alphas.iter().sum::<f64>() / alphas.len() as f64;
        let stderr = if alphas.len() > 1 {
            let var = alphas.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
                / (alphas.len() - 1) as f64;
            (var / alphas.len() as f64).sqrt()
        } else {
            0.0
        };
        Ok((mean, stderr))
    };
    let (alpha_delta, alpha_delta_stderr) = fit_per_seed(&|c| c.delta_stale)?;
    let (alpha_docc, alpha_docc_stderr) = fit_per_seed(&|c| c.d_occ)?;
    let (alpha_penalty, alpha_penalty_stderr) = fit_per_seed(&|c| c.penalty_sum)?;
    Ok(ScalingResult {
        n_values: n_values.to_vec(),
        cells,
        alpha_delta,
        alpha_delta_stderr,
        alpha_docc,
        alpha_docc_stderr,
        alpha_penalty,
        alpha_penalty_stderr,
        method: method.to_string(),
    })
}

/// Effective-sample-size report for one weight vector.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EssReport {
    pub ess_over_b: f64,
    pub p95: f64,
    pub p99: f64,
    pub max_weight: f64,
    pub frac_above_10: f64,
}

/// ESS/B = (sum w)^2 / (B sum w^2) with tail quantiles.
pub fn ess(weights: &[f64]) -> Result<EssReport> {
    if weights.is_empty() {
        return Err(Error::Usage("empty weight vector".into()));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Usage("weights must be nonnegative".into()));
    }
    let b = weights.len() as f64;
    let sum: f64 = weights.iter().sum();
    let sumsq: f64 = weights.iter().map(|w| w * w).sum();
    if sumsq == 0.0 {
        return Err(Error::Usage("all-zero weights".into()));
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| sorted[(((sorted.len() - 1) as f64) * p).round() as usize];
    let report = EssReport {
        ess_over_b: sum * sum / (b * sumsq),
        p95: q(0.95),
        p99: q(0.99),
        max_weight: *sorted.last().unwrap(),
        frac_above_10: weights.iter().filter(|w| **w > 10.0).count() as f64 / b,
    };
    debug_assert!(report.ess_over_b > 0.0 && report.ess_over_b <= 1.0 + 1e-12);
    Ok(report)
}

/// Calibration of per-stage certificates against measured improvements.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CalibrationReport {
    /// Spearman rank correlation; undefined below 5 stages.
    pub rank_correlation: Option<f64>,
    /// Fraction of stages where the certified bound exceeds the measured
    /// improvement.
    pub violation_rate: f64,
    pub n_stages: usize,
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].partial_cmp(&values[*b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}

/// (measured improvement, certified lower bound) pairs per stage.
pub fn certificate_calibration(pairs: &[(f64, f64)]) -> Result<CalibrationReport> {
    if pairs.is_empty() {
        return Err(Error::Usage("no calibration pairs".into()));
    }
    let violations = pairs.iter().filter(|(dj, lb)| *lb > dj + 1e-9).count();
    let violation_rate = violations as f64 / pairs.len() as f64;
    let rank_correlation = if pairs.len() >= 5 {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let rx = ranks(&xs);
        let ry = ranks(&ys);
        let mx = rx.iter().sum::<f64>() / rx.len() as f64;
        let my = ry.iter().sum::<f64>() / ry.len() as f64;
        let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let dx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let dy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        if dx == 0.0 || dy == 0.0 {
            None
        } else {
            Some(num / (dx * dy).sqrt())
        }
    } else {
        None
    };
    Ok(CalibrationReport {
        rank_correlation,
        violation_rate,
        n_stages: pairs.len(),
    })
}

/// Per-token probability movement at a state, ranked by pre-update
/// probability, with the tail aggregated into an `other` bucket.
#[derive(Debug, Clone, Serialize)]
pub struct LogitShiftReport {
    /// (token id, prob before, prob after, delta), descending prob-before.
    pub rows: Vec<(u16, f64, f64, f64)>,
    pub other_delta: f64,
    pub argmax_flipped: bool,
}

pub fn logit_shift_report(
    before: &AgentPolicy,
    after: &AgentPolicy,
    state: &ContextState,
    _env: &EnvConfig,
    top_k: usize,
) -> LogitShiftReport {
    let pb = before.probs_at(state, &[]);
    let pa = after.probs_at(state, &[]);
    let mut order: Vec<usize> = (0..pb.len()).collect();
    order.sort_by(|a, b| pb[*b].partial_cmp(&pb[*a]).unwrap());
    let take = top_k.min(order.len());
    let rows: Vec<(u16, f64, f64, f64)> = order[..take]
        .iter()
        .map(|&t| (t as u16, pb[t], pa[t], pa[t] - pb[t]))
        .collect();
    let other_delta: f64 = order[take..].iter().map(|&t| pa[t] - pb[t]).sum();
    // First index attaining the max on both sides, so exact ties never
    // register as a flip.
    let first_argmax = |p: &[f64]| {
        let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        p.iter().position(|x| *x == m).unwrap()
    };
    let argmax_before = first_argmax(&pb);
    let argmax_after = first_argmax(&pa);
    LogitShiftReport {
        rows,
        other_delta,
        argmax_flipped: argmax_before != argmax_after,
    }
}


#[cfg(test)]
mod shift_tests {
    use super::*;
    use crate::env::{PatternReward, RewardSpec, Router};
    use crate::trainer::{run_stage, OrderSpec, StagePlan, TrainMode};

    fn env3() -> EnvConfig {
        EnvConfig {
            vocab_size: 2,
            msg_len_max: 1,
            ctx_len_max: 3,
            n_agents: 3,
            gamma: 0.7,
            r_max: 1.0,
            state_cap: 10_000,
            initial_contexts: vec![vec![]],
            initial_probs: vec![1.0],
            reward: RewardSpec::TerminalPattern {
                patterns: vec![
                    PatternReward {
                        suffix: vec![1, 1, 1],
                        reward: 1.0,
                    },
                    PatternReward {
                        suffix: vec![0, 0, 0],
                        reward: 0.6,
                    },
                ],
            },
        }
    }

    // Paired runs with and without the trust region: gated updates flip
    // the argmax token at fewer probed states.
    #[test]
    fn in_region_updates_flip_fewer_argmaxes() {
        let env = env3();
        let eval = Evaluator::new(&env, &Router::RoundRobin).unwrap();
        let adv = GroupAdvConfig {
            group_size: 8,
            a_clip: 3.0,
            eps_norm: 1e-6,
        };
        let mut ppo = PpoConfig::default();
        ppo.ratio_eps = 0.9;
        ppo.max_inner_steps = 60;
        let flip_fraction = |radius: f64, beta: f64, seed: u64| -> f64 {
            let mut p = ppo;
            p.beta_init = beta;
            let plan = StagePlan {
                mode: TrainMode::Fresh,
                order: OrderSpec::Fixed,
                radii: crate::divergence::TrustRegionSchedule::fixed(radius, 3),
                inner_epochs: 1,
                resample_k: 1,
                rollout_budget: 24,
            };
            let ctx = StageContext {
                eval: &eval,
                plan: &plan,
                adv: &adv,
                ppo: &p,
            };
            let tree = SeedTree::new(seed);
            // A non-uniform starting team, so argmax tokens are well
            // defined before the updates move anything.
            let mut init_rng = tree.rng("init");
            let mut before = TeamPolicy::uniform(&env, Router::RoundRobin);
            for j in 0..env.n_agents {
                let p = before.agents[j]
                    .perturbed(&eval.space, &eval.router, &env, 0.7, &mut init_rng)
                    .unwrap();
                before = before.replace_factor(j, p).unwrap();
            }
            let mut team = before.clone();
            for stage in 0..2 {
                team = run_stage(&ctx, &team, stage, &tree).unwrap().team;
            }
            let mut flips = 0;
            let mut probed = 0;
            for state in eval.space.states.iter().filter(|s| !s.terminal) {
                let j = crate::env::active_agent(state, &eval.router, &env).unwrap();
                let rep = logit_shift_report(&before.agents[j], &team.agents[j], state, &env, 2);
                probed += 1;
                if rep.argmax_flipped {
                    flips += 1;
                }
            }
            flips as f64 / probed as f64
        };
        let mut gated = Vec::new();
        let mut ungated = Vec::new();
        for seed in 0..20u64 {
            gated.push(flip_fraction(0.005, 1.0, 100 + seed));
            ungated.push(flip_fraction(f64::INFINITY, 0.0, 100 + seed));
        }
        gated.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ungated.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            gated[10] < ungated[10],
            "median flip fraction gated {} vs ungated {}",
            gated[10],
            ungated[10]
        );
    }
}
