//! Experiment runner: loads configs, seeds component streams, executes the
//! subcommands, and writes the structured artifact set (CSV logs, JSON
//! summaries, policy checkpoints). Given (config, seed, build) the artifact
//! set is byte-identical across runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::certificate::{hp_stage_bound, stage_bound, CertConfig};
use crate::config::{preset, RunConfig, ScaleFamily, TeamInit};
use crate::diagnostics::{
    certificate_calibration, scaling_sweep, stale_gap, ScalingResult,
};
use crate::env::{EnvConfig, PatternReward, RewardSpec};
use crate::error::{Error, Result};
use crate::exact::Evaluator;
use crate::plugswap::{sample_probe_contexts, AlignMode, SwapReport};
use crate::policy::{AgentPolicy, TeamPolicy};
use crate::seed::SeedTree;
use crate::trainer::{run_stage, StageContext, StagePlan, TrainMode, UpdateLog};

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

/// Loads a config from a file path or a built-in preset name.
pub fn load_config(path_or_preset: &str) -> Result<RunConfig> {
    let text = if Path::new(path_or_preset).exists() {
        fs::read_to_string(path_or_preset)?
    } else if let Some(built_in) = preset(path_or_preset) {
        built_in.to_string()
    } else {
        return Err(Error::Config(format!(
            "config '{path_or_preset}' is neither a file nor a preset ({})",
            crate::config::preset_names().join(", ")
        )));
    };
    RunConfig::from_toml(&text)
}

/// Per-stage certificate summary with exact inputs (zeta = 0 by
/// construction) under both A_max sources, plus the high-probability
/// empirical bound from the sampled surrogates.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub mode: TrainMode,
    pub order: Vec<usize>,
    pub j_start: f64,
    pub j_end: f64,
    pub delta_j: f64,
    /// Stage bound with exact surrogates/KLs and the exact max |A|.
    pub lb_exact_amax: f64,
    /// Same bound under the conservative cap 2 r_max / (1-gamma).
    pub lb_cap_amax: f64,
    /// High-probability empirical bound from sampled surrogates (logged,
    /// never asserted: monitor noise is acknowledged).
    pub hp_lb: f64,
    /// Occupancy-weighted zeta proxy summed over steps (primary form).
    pub zeta_proxy_sum: f64,
    /// Sup-form proxy: the largest per-step proxy total.
    pub zeta_proxy_sup: f64,
    pub violation_exact: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub crate_version: String,
    pub mode: TrainMode,
    pub stages: usize,
    pub j_trace: Vec<f64>,
    pub final_j: f64,
    pub truncation_error_bound: f64,
    pub violation_rate_exact: f64,
    pub n_states: usize,
}

fn write(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, content)?;
    Ok(())
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes")
}

/// Builds the evaluator + initial team for a config.
pub fn build_instance(cfg: &RunConfig) -> Result<(Evaluator, TeamPolicy)> {
    let eval = Evaluator::new(&cfg.env, &cfg.router)?;
    let tree = SeedTree::new(cfg.seed);
    let team = initial_team(cfg, &eval, &tree)?;
    Ok((eval, team))
}

fn initial_team(cfg: &RunConfig, eval: &Evaluator, tree: &SeedTree) -> Result<TeamPolicy> {
    let mut team = TeamPolicy::uniform(&cfg.env, cfg.router.clone());
    if cfg.team.init == TeamInit::Random {
        let mut rng = tree.rng("team-init");
        for j in 0..cfg.env.n_agents {
            let p = team.agents[j].perturbed(
                &eval.space,
                &eval.router,
                &cfg.env,
                cfg.team.init_scale,
                &mut rng,
            )?;
            team = team.replace_factor(j, p)?;
        }
    }
    Ok(team)
}

/// Outcome of a multi-stage training run before artifact writing.
pub struct TrainOutcome {
    pub team: TeamPolicy,
    pub logs: Vec<UpdateLog>,
    pub stage_summaries: Vec<StageSummary>,
    pub j_trace: Vec<f64>,
    pub checkpoints: Vec<(usize, String)>,
}

/// Core engine shared by every subcommand: runs `stages` stages of the plan
/// and assembles per-stage certificates from the logged exact quantities.
pub fn train_stages(
    cfg: &RunConfig,
    eval: &Evaluator,
    start_team: &TeamPolicy,
    plan: &StagePlan,
    stage_range: std::ops::Range<usize>,
    tree: &SeedTree,
) -> Result<TrainOutcome> {
    let ctx = StageContext {
        eval,
        plan,
        adv: &cfg.adv,
        ppo: &cfg.ppo,
    };
    let mut team = start_team.clone();
    let mut logs = Vec::new();
    let mut stage_summaries = Vec::new();
    let mut j_trace = vec![eval.exact_return(&team)?];
    let mut checkpoints = vec![(stage_range.start, team.to_text())];
    for stage in stage_range {
        let result = run_stage(&ctx, &team, stage, tree)?;
        team = result.team;
        let order: Vec<usize> = result.logs.iter().map(|l| l.agent).collect();
        let summary = summarize_stage(cfg, stage, plan.mode, order, &result.logs)?;
        j_trace.push(summary.j_end);
        stage_summaries.push(summary);
        logs.extend(result.logs);
        checkpoints.push((stage + 1, team.to_text()));
    }
    Ok(TrainOutcome {
        team,
        logs,
        stage_summaries,
        j_trace,
        checkpoints,
    })
}

fn summarize_stage(
    cfg: &RunConfig,
    stage: usize,
    mode: TrainMode,
    order: Vec<usize>,
    logs: &[UpdateLog],
) -> Result<StageSummary> {
    let gamma = cfg.env.gamma;
    let l_seq_exact: Vec<f64> = logs.iter().map(|l| l.l_seq_exact).collect();
    let kls: Vec<f64> = logs.iter().map(|l| l.kl_exact).collect();
    let zeros = vec![0.0; logs.len()];
    let a_max_exact = logs
        .iter()
        .map(|l| l.a_max_exact)
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let cert_exact = CertConfig {
        gamma,
        a_max: a_max_exact,
        a_clip: cfg.adv.a_clip,
        ratio_eps: cfg.ppo.ratio_eps,
        delta_conf: cfg.cert.delta_conf,
    };
    let lb_exact = stage_bound(&l_seq_exact, &kls, &zeros, &cert_exact)?.stage_lb;
    let cert_cap = CertConfig {
        a_max: 2.0 * cfg.env.r_max / (1.0 - gamma),
        ..cert_exact
    };
    let lb_cap = stage_bound(&l_seq_exact, &kls, &zeros, &cert_cap)?.stage_lb;

    let l_hats: Vec<f64> = logs.iter().map(|l| l.l_seq_hat).collect();
    let zetas: Vec<f64> = logs.iter().map(|l| l.zeta_total).collect();
    let monitors: Vec<f64> = logs.iter().map(|l| l.kl_monitored).collect();
    let groups: Vec<usize> = logs.iter().map(|l| l.groups).collect();
    let hp_lb = hp_stage_bound(&l_hats, &monitors, &zetas, &groups, &cert_cap)?;

    let j_start = logs.first().map(|l| l.j_before).unwrap_or(0.0);
    let j_end = logs.last().map(|l| l.j_after).unwrap_or(0.0);
    let delta_j = j_end - j_start;
    Ok(StageSummary {
        stage,
        mode,
        order,
        j_start,
        j_end,
        delta_j,
        lb_exact_amax: lb_exact,
        lb_cap_amax: lb_cap,
        hp_lb,
        zeta_proxy_sum: zetas.iter().sum(),
        zeta_proxy_sup: zetas.iter().cloned().fold(0.0, f64::max),
        violation_exact: lb_exact > delta_j + 1e-9,
    })
}

fn updates_csv(logs: &[UpdateLog]) -> String {
    let mut out = String::from(UpdateLog::csv_header());
    out.push('\n');
    for log in logs {
        out.push_str(&log.csv_row());
        out.push('\n');
    }
    out
}

fn kl_log_csv(logs: &[UpdateLog]) -> String {
    let mut out =
        String::from("schema_version,stage,step,agent,mode,value,stderr,threshold,in_region\n");
    for l in logs {
        let _ = writeln!(
            out,
            "1,{},{},{},sampled,{},{},{},{}",
            l.stage,
            l.step,
            l.agent,
            l.kl_monitored,
            l.kl_monitor_stderr,
            l.radius,
            l.kl_monitored <= l.radius
        );
        let _ = writeln!(
            out,
            "1,{},{},{},exact,{},0,{},{}",
            l.stage,
            l.step,
            l.agent,
            l.kl_exact,
            l.radius,
            l.kl_exact <= l.radius
        );
    }
    out
}

fn calibration_csv(summaries: &[StageSummary]) -> String {
    let mut out = String::from("schema_version,stage,delta_j,lb_exact,violation\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "1,{},{},{},{}",
            s.stage, s.delta_j, s.lb_exact_amax, s.violation_exact
        );
    }
    out
}

fn write_run_artifacts(
    cfg: &RunConfig,
    eval: &Evaluator,
    out: &Path,
    outcome: &TrainOutcome,
    mode: TrainMode,
) -> Result<RunSummary> {
    let violations = outcome
        .stage_summaries
        .iter()
        .filter(|s| s.violation_exact)
        .count();
    let summary = RunSummary {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        mode,
        stages: outcome.stage_summaries.len(),
        j_trace: outcome.j_trace.clone(),
        final_j: *outcome.j_trace.last().unwrap(),
        truncation_error_bound: cfg.env.truncation_error_bound(),
        violation_rate_exact: violations as f64 / outcome.stage_summaries.len().max(1) as f64,
        n_states: eval.n_states(),
    };
    write(&out.join("config.toml"), &cfg.to_toml())?;
    write(&out.join("updates.csv"), &updates_csv(&outcome.logs))?;
    write(&out.join("kl_log.csv"), &kl_log_csv(&outcome.logs))?;
    write(
        &out.join("stage_summaries.json"),
        &json(&outcome.stage_summaries),
    )?;
    write(
        &out.join("calibration.csv"),
        &calibration_csv(&outcome.stage_summaries),
    )?;
    write(&out.join("states.csv"), &eval.space.to_csv())?;
    for (stage, text) in &outcome.checkpoints {
        write(&out.join(format!("checkpoints/stage_{stage:03}.policy")), text)?;
    }
    write(&out.join("run_summary.json"), &json(&summary))?;
    Ok(summary)
}

/// `train`: runs the configured number of stages in the fresh
/// (intermediate-occupancy) mode and writes the artifact set.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    if cfg.plan.mode != TrainMode::Fresh {
        return Err(Error::Config(
            "train requires plan.mode = \"fresh\"; use compare for baselines".into(),
        ));
    }
    let (eval, team) = build_instance(cfg)?;
    let plan = cfg.plan.compile(cfg.env.n_agents)?;
    let tree = SeedTree::new(cfg.seed);
    let outcome = train_stages(cfg, &eval, &team, &plan, 0..cfg.plan.stages, &tree)?;
    write_run_artifacts(cfg, &eval, out, &outcome, plan.mode)
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub modes: Vec<TrainMode>,
    pub final_j: Vec<f64>,
    pub violation_rate_exact: Vec<f64>,
    pub stage_dj_variance: Vec<f64>,
    pub median_gap_step2: Vec<Option<f64>>,
    pub median_gap_step3: Vec<Option<f64>>,
}

/// `compare`: runs every listed mode under the same seed and budget and
/// emits the joint comparison table.
pub fn cmd_compare(cfg: &RunConfig, out: &Path, threads: usize) -> Result<CompareSummary> {
    let compare = cfg
        .compare
        .clone()
        .ok_or_else(|| Error::Config("compare section missing".into()))?;
    let run_mode = |mode: TrainMode| -> Result<(TrainMode, RunSummary, Vec<UpdateLog>)> {
        let mut mode_cfg = cfg.clone();
        mode_cfg.plan.mode = mode;
        mode_cfg.validate()?;
        let (eval, team) = build_instance(&mode_cfg)?;
        let plan = mode_cfg.plan.compile(mode_cfg.env.n_agents)?;
        let tree = SeedTree::new(mode_cfg.seed);
        let outcome =
            train_stages(&mode_cfg, &eval, &team, &plan, 0..mode_cfg.plan.stages, &tree)?;
        let sub = out.join(mode_dir_name(mode));
        let summary = write_run_artifacts(&mode_cfg, &eval, &sub, &outcome, mode)?;
        Ok((mode, summary, outcome.logs))
    };

    let results: Vec<(TrainMode, RunSummary, Vec<UpdateLog>)> = if threads > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = compare
                .modes
                .iter()
                .map(|m| {
                    let mode = *m;
                    scope.spawn(move || run_mode(mode))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("mode thread"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        compare
            .modes
            .iter()
            .map(|m| run_mode(*m))
            .collect::<Result<Vec<_>>>()?
    };

    let mut summary = CompareSummary {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        modes: Vec::new(),
        final_j: Vec::new(),
        violation_rate_exact: Vec::new(),
        stage_dj_variance: Vec::new(),
        median_gap_step2: Vec::new(),
        median_gap_step3: Vec::new(),
    };
    let mut table = String::from("schema_version,mode,stage,j_end,lb_exact,violation\n");
    for (mode, run, logs) in &results {
        summary.modes.push(*mode);
        summary.final_j.push(run.final_j);
        summary.violation_rate_exact.push(run.violation_rate_exact);
        let djs: Vec<f64> = run.j_trace.windows(2).map(|w| w[1] - w[0]).collect();
        let mean = djs.iter().sum::<f64>() / djs.len().max(1) as f64;
        let var = djs.iter().map(|d| (d - mean).powi(2)).sum::<f64>()
            / djs.len().max(2).saturating_sub(1) as f64;
        summary.stage_dj_variance.push(var);
        let trace = stale_gap(logs, cfg.env.gamma)?;
        summary.median_gap_step2.push(trace.median_gap_at_step(2));
        summary.median_gap_step3.push(trace.median_gap_at_step(3));
        for (i, j) in run.j_trace.iter().enumerate().skip(1) {
            let _ = writeln!(table, "1,{},{},{},,", mode_dir_name(*mode), i - 1, j);
        }
    }
    write(&out.join("compare.csv"), &table)?;
    write(&out.join("compare_summary.json"), &json(&summary))?;
    Ok(summary)
}

pub fn mode_dir_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Fresh => "fresh",
        TrainMode::Stale => "stale",
        TrainMode::StaleIs => "stale-is",
        TrainMode::ResampleEveryK => "resample-every-k",
        TrainMode::Joint => "joint",
        TrainMode::KlPenaltyOnly => "kl-penalty-only",
    }
}

/// Team-size family used by the scaling study: n agents, one single-token
/// message each, context cap n, reward per the family kind.
pub fn scale_family(
    base: &EnvConfig,
    family: ScaleFamily,
) -> impl Fn(usize) -> EnvConfig + '_ {
    move |n: usize| {
        let reward = match family {
            ScaleFamily::AllOnes => RewardSpec::TerminalPattern {
                patterns: vec![PatternReward {
                    suffix: vec![1; n],
                    reward: 1.0,
                }],
            },
            ScaleFamily::OneHot => RewardSpec::PerStepTable {
                default: 0.0,
                entries: one_hot_entries(n),
            },
            ScaleFamily::Decoy => RewardSpec::TerminalPattern {
                patterns: vec![
                    PatternReward {
                        suffix: vec![1; n],
                        reward: 1.0,
                    },
                    PatternReward {
                        suffix: vec![0; n],
                        reward: 0.6,
                    },
                ],
            },
        };
        EnvConfig {
            n_agents: n,
            ctx_len_max: n,
            reward,
            ..base.clone()
        }
    }
}

/// Final-transition rewards of the exactly-one-token-1 game: every length
/// n-1 context paired with the message that completes a one-hot context.
fn one_hot_entries(n: usize) -> Vec<crate::env::StepReward> {
    let mut entries = Vec::new();
    for bits in 0..(1usize << (n - 1)) {
        let context: Vec<crate::env::Token> = (0..n - 1)
            .map(|i| ((bits >> i) & 1) as crate::env::Token)
            .collect();
        let ones = context.iter().filter(|t| **t == 1).count();
        for msg in 0..2u16 {
            if ones + (msg == 1) as usize == 1 {
                entries.push(crate::env::StepReward {
                    context: context.clone(),
                    message: vec![msg],
                    reward: 1.0,
                });
            }
        }
    }
    entries
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub alpha_delta_stale: f64,
    pub alpha_docc_stale: f64,
    pub alpha_penalty_stale: f64,
    pub alpha_delta_fresh: f64,
    pub alpha_docc_fresh: f64,
    pub alpha_penalty_fresh: f64,
    pub alpha_delta_stale_stderr: f64,
    pub alpha_delta_fresh_stderr: f64,
    pub alpha_penalty_stale_stderr: f64,
    pub alpha_penalty_fresh_stderr: f64,
}

/// `scale`: the team-size sweep in stale and fresh modes with matched
/// budgets, writing per-cell metrics and fitted exponents.
pub fn cmd_scale(cfg: &RunConfig, out: &Path, threads: usize) -> Result<ScaleSummary> {
    let scale = cfg
        .scale
        .clone()
        .ok_or_else(|| Error::Config("scale section missing".into()))?;
    let family = scale_family(&cfg.env, scale.family);
    let base_plan = |mode: TrainMode| -> Result<StagePlan> {
        let mut plan = cfg.plan.compile(cfg.env.n_agents)?;
        plan.mode = mode;
        plan.rollout_budget = scale.groups_per_update;
        Ok(plan)
    };
    let run = |mode: TrainMode| -> Result<ScalingResult> {
        scaling_sweep(
            &scale.n_values,
            &family,
            &base_plan(mode)?,
            &cfg.adv,
            &cfg.ppo,
            scale.stages,
            &scale.seeds,
            mode_dir_name(mode),
        )
    };
    let (stale, fresh) = if threads > 1 {
        std::thread::scope(|scope| {
            let hs = scope.spawn(|| run(TrainMode::Stale));
            let ht = scope.spawn(|| run(TrainMode::Fresh));
            let s = hs.join().expect("stale thread");
            let t = ht.join().expect("fresh thread");
            s.and_then(|s| t.map(|t| (s, t)))
        })?
    } else {
        (run(TrainMode::Stale)?, run(TrainMode::Fresh)?)
    };

    let mut cells =
        String::from("schema_version,method,n,seed,delta_stale,d_occ,penalty_sum\n");
    for r in [&stale, &fresh] {
        for c in &r.cells {
            let _ = writeln!(
                cells,
                "1,{},{},{},{},{},{}",
                r.method, c.n, c.seed, c.delta_stale, c.d_occ, c.penalty_sum
            );
        }
    }
    let summary = ScaleSummary {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        alpha_delta_stale: stale.alpha_delta,
        alpha_docc_stale: stale.alpha_docc,
        alpha_penalty_stale: stale.alpha_penalty,
        alpha_delta_fresh: fresh.alpha_delta,
        alpha_docc_fresh: fresh.alpha_docc,
        alpha_penalty_fresh: fresh.alpha_penalty,
        alpha_delta_stale_stderr: stale.alpha_delta_stderr,
        alpha_delta_fresh_stderr: fresh.alpha_delta_stderr,
        alpha_penalty_stale_stderr: stale.alpha_penalty_stderr,
        alpha_penalty_fresh_stderr: fresh.alpha_penalty_stderr,
    };
    write(&out.join("scale_cells.csv"), &cells)?;
    write(&out.join("scale_summary.json"), &json(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct SwapRunSummary {
    pub schema_version: u32,
    pub config_hash: String,
    pub direct_shock: f64,
    pub aligned_shock: f64,
    pub aligned_probe_kl: Option<f64>,
    pub final_j_direct: f64,
    pub final_j_aligned: f64,
    pub final_j_retrain: f64,
    pub post_swap_violation_rate_direct: f64,
    pub post_swap_violation_rate_aligned: f64,
}

/// `swap`: trains to the swap stage, then continues under the three
/// replacement strategies (direct, stage-0 aligned, retrain-from-scratch)
/// with common random numbers for the post-swap stages.
pub fn cmd_swap(cfg: &RunConfig, out: &Path) -> Result<SwapRunSummary> {
    let swap = cfg
        .swap
        .clone()
        .ok_or_else(|| Error::Config("swap section missing".into()))?;
    let (eval, team0) = build_instance(cfg)?;
    let plan = cfg.plan.compile(cfg.env.n_agents)?;
    let tree = SeedTree::new(cfg.seed);
    let pre = train_stages(cfg, &eval, &team0, &plan, 0..swap.swap_stage, &tree)?;

    // Freshly random replacement, common to all strategies.
    let mut repl_rng = tree.rng("replacement");
    let replacement = AgentPolicy::uniform(swap.agent, cfg.env.vocab_size).perturbed(
        &eval.space,
        &eval.router,
        &cfg.env,
        swap.replacement_scale,
        &mut repl_rng,
    )?;

    let j_at_swap = *pre.j_trace.last().unwrap();
    let remaining = swap.swap_stage..cfg.plan.stages;

    // Direct swap.
    let mut direct_rng = tree.rng("swap-direct");
    let (direct_team, direct_report) = crate::plugswap::swap_agent(
        &eval,
        &pre.team,
        swap.agent,
        replacement.clone(),
        None,
        &mut direct_rng,
    )?;
    let direct_run =
        train_stages(cfg, &eval, &direct_team, &plan, remaining.clone(), &tree)?;

    // Stage-0 aligned swap.
    let mut aligned_rng = tree.rng("swap-aligned");
    let mut probe_rng = tree.rng("probes");
    let probes =
        sample_probe_contexts(&eval, &pre.team, swap.agent, swap.probe_size, &mut probe_rng)?;
    let (aligned_team, aligned_report) = crate::plugswap::swap_agent(
        &eval,
        &pre.team,
        swap.agent,
        replacement.clone(),
        Some((&swap.align, &probes, AlignMode::Exact)),
        &mut aligned_rng,
    )?;
    let aligned_run =
        train_stages(cfg, &eval, &aligned_team, &plan, remaining.clone(), &tree)?;

    // Retrain from scratch: reinitialized team for the remaining budget.
    let retrain_team = initial_team(cfg, &eval, &tree.subtree("retrain"))?;
    let retrain_run = train_stages(cfg, &eval, &retrain_team, &plan, remaining, &tree)?;

    // J-trace CSV spanning the swap.
    let mut trace = String::from("schema_version,strategy,event,stage,j\n");
    for (label, run, report) in [
        ("direct", &direct_run, Some(&direct_report)),
        ("aligned", &aligned_run, Some(&aligned_report)),
        ("retrain", &retrain_run, None),
    ] {
        for (i, j) in pre.j_trace.iter().enumerate() {
            let _ = writeln!(trace, "1,{label},stage-end,{i},{j}");
        }
        if let Some(r) = report {
            let _ = writeln!(trace, "1,{label},swap,{},{}", swap.swap_stage, r.j_after);
        } else {
            let _ = writeln!(
                trace,
                "1,{label},swap,{},{}",
                swap.swap_stage, run.j_trace[0]
            );
        }
        for (i, j) in run.j_trace.iter().enumerate().skip(1) {
            let _ = writeln!(trace, "1,{label},stage-end,{},{j}", swap.swap_stage + i);
        }
    }
    write(&out.join("jtrace.csv"), &trace)?;

    let reports: Vec<&SwapReport> = vec![&direct_report, &aligned_report];
    write(&out.join("swap_reports.json"), &json(&reports))?;

    let violation_rate = |run: &TrainOutcome| {
        run.stage_summaries
            .iter()
            .filter(|s| s.violation_exact)
            .count() as f64
            / run.stage_summaries.len().max(1) as f64
    };
    let summary = SwapRunSummary {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        direct_shock: crate::plugswap::swap_shock_metric(
            &[j_at_swap, direct_report.j_after],
            1,
        ),
        aligned_shock: crate::plugswap::swap_shock_metric(
            &[j_at_swap, aligned_report.j_after],
            1,
        ),
        aligned_probe_kl: aligned_report.probe_kl,
        final_j_direct: *direct_run.j_trace.last().unwrap(),
        final_j_aligned: *aligned_run.j_trace.last().unwrap(),
        final_j_retrain: *retrain_run.j_trace.last().unwrap(),
        post_swap_violation_rate_direct: violation_rate(&direct_run),
        post_swap_violation_rate_aligned: violation_rate(&aligned_run),
    };
    write(&out.join("swap_summary.json"), &json(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub rank_correlation: Option<f64>,
    pub violation_rate: f64,
    pub n_stages: usize,
    pub gap_median_step2: Option<f64>,
    pub gap_median_step3: Option<f64>,
    pub gap_bound_violations: usize,
    /// Monitor/radius ratio histogram over updates (10 bins on [0, 2]).
    pub kl_ratio_histogram: Vec<usize>,
    /// Fraction of probed states whose argmax token changed between the
    /// first and last checkpoints.
    pub argmax_flip_fraction: f64,
    /// Mean / P50 / P90 of each estimation-error proxy component across
    /// updates (norm, clip, ratio, total).
    pub zeta_summary: Vec<ZetaComponentSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ZetaComponentSummary {
    pub component: String,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
}

fn summarize_component(name: &str, values: &[f64]) -> ZetaComponentSummary {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        if sorted.is_empty() {
            0.0
        } else {
            sorted[(((sorted.len() - 1) as f64) * p).round() as usize]
        }
    };
    ZetaComponentSummary {
        component: name.to_string(),
        mean: values.iter().sum::<f64>() / values.len().max(1) as f64,
        p50: q(0.5),
        p90: q(0.9),
    }
}

fn parse_updates_csv(text: &str) -> Result<Vec<(usize, usize, f64, f64, f64, f64, f64, f64, f64)>> {
    // (stage, step, kl_monitored, kl_exact, l_seq_hat, l_stale_hat,
    //  l_seq_exact, l_stale_exact plus a_max/radius packing below)
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 27 {
            return Err(Error::Parse(format!("updates.csv line {ln} too short")));
        }
        let f = |i: usize| -> Result<f64> {
            cols[i]
                .parse()
                .map_err(|_| Error::Parse(format!("updates.csv line {ln} col {i}")))
        };
        let u = |i: usize| -> Result<usize> {
            cols[i]
                .parse()
                .map_err(|_| Error::Parse(format!("updates.csv line {ln} col {i}")))
        };
        rows.push((
            u(1)?,
            u(2)?,
            f(7)?,
            f(9)?,
            f(11)?,
            f(12)?,
            f(13)?,
            f(14)?,
            f(5)?,
        ));
    }
    Ok(rows)
}

/// `report`: consolidates a completed run directory into one JSON bundle;
/// regeneration is idempotent.
pub fn cmd_report(run_dir: &Path, out: &Path) -> Result<Report> {
    let required = [
        "config.toml",
        "updates.csv",
        "stage_summaries.json",
        "run_summary.json",
    ];
    let missing: Vec<&str> = required
        .iter()
        .filter(|f| !run_dir.join(f).exists())
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Usage(format!(
            "run dir {} is missing artifacts: {}",
            run_dir.display(),
            missing.join(", ")
        )));
    }
    let cfg = RunConfig::from_toml(&fs::read_to_string(run_dir.join("config.toml"))?)?;
    // Refuse artifact sets written under a different schema.
    let run_summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(
        run_dir.join("run_summary.json"),
    )?)
    .map_err(|e| Error::Parse(format!("run_summary.json: {e}")))?;
    let version = run_summary["schema_version"].as_u64().unwrap_or(0) as u32;
    if version != ARTIFACT_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "run artifacts carry schema_version {version}, this build reads {ARTIFACT_SCHEMA_VERSION}"
        )));
    }
    let summaries: Vec<StageSummary> = serde_json::from_str(&fs::read_to_string(
        run_dir.join("stage_summaries.json"),
    )?)
    .map_err(|e| Error::Parse(format!("stage_summaries.json: {e}")))?;
    let pairs: Vec<(f64, f64)> = summaries
        .iter()
        .map(|s| (s.delta_j, s.lb_exact_amax))
        .collect();
    let calib = certificate_calibration(&pairs)?;

    let full_csv = fs::read_to_string(run_dir.join("updates.csv"))?;
    let rows = parse_updates_csv(&full_csv)?;
    let mut zeta_cols: [Vec<f64>; 4] = Default::default();
    for line in full_csv.lines().skip(1).filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        for (slot, idx) in [(0usize, 16usize), (1, 17), (2, 18), (3, 19)] {
            zeta_cols[slot].push(
                cols[idx]
                    .parse()
                    .map_err(|_| Error::Parse("zeta column".into()))?,
            );
        }
    }
    let mut hist = vec![0usize; 10];
    let median_at = |step: usize| -> Option<f64> {
        let mut v: Vec<f64> = rows
            .iter()
            .filter(|r| r.1 == step)
            .map(|r| (r.6 - r.7).abs())
            .collect();
        if v.is_empty() {
            None
        } else {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Some(v[v.len() / 2])
        }
    };
    for r in &rows {
        let ratio = if r.8 > 0.0 && r.8.is_finite() { r.2 / r.8 } else { 0.0 };
        let bin = ((ratio / 0.2).floor() as usize).min(9);
        hist[bin] += 1;
    }
    // Exact-surrogate gap bound violations, recomputed from the CSV.
    let gamma = cfg.env.gamma;
    let full = full_csv;
    let mut gap_violations = 0usize;
    {
        let mut stage = usize::MAX;
        let mut prefix: Vec<f64> = Vec::new();
        for (ln, line) in full.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let parse = |i: usize| -> Result<f64> {
                cols[i]
                    .parse()
                    .map_err(|_| Error::Parse(format!("updates.csv line {ln}")))
            };
            let st: usize = cols[1]
                .parse()
                .map_err(|_| Error::Parse("stage column".into()))?;
            if st != stage {
                stage = st;
                prefix.clear();
            }
            let gap = (parse(13)? - parse(14)?).abs();
            let bound =
                crate::certificate::stale_gap_bound(&prefix, parse(15)?, gamma);
            if gap > bound + 1e-9 {
                gap_violations += 1;
            }
            prefix.push(parse(9)?);
        }
    }

    // Argmax flips between the first and last checkpoints over all
    // non-terminal states.
    let eval = Evaluator::new(&cfg.env, &cfg.router)?;
    let ck_dir = run_dir.join("checkpoints");
    let mut flips = 0usize;
    let mut probed = 0usize;
    let mut names: Vec<PathBuf> = fs::read_dir(&ck_dir)
        .map_err(|_| Error::Usage("checkpoints directory missing".into()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    if names.len() >= 2 {
        let first = TeamPolicy::from_text(&fs::read_to_string(&names[0])?, cfg.router.clone())?;
        let last = TeamPolicy::from_text(
            &fs::read_to_string(names.last().unwrap())?,
            cfg.router.clone(),
        )?;
        for state in eval.space.states.iter().filter(|s| !s.terminal) {
            let j = crate::env::active_agent(state, &cfg.router, &cfg.env)?;
            let rep = crate::diagnostics::logit_shift_report(
                &first.agents[j],
                &last.agents[j],
                state,
                &cfg.env,
                4,
            );
            probed += 1;
            if rep.argmax_flipped {
                flips += 1;
            }
        }
    }

    let report = Report {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        rank_correlation: calib.rank_correlation,
        violation_rate: calib.violation_rate,
        n_stages: calib.n_stages,
        gap_median_step2: median_at(2),
        gap_median_step3: median_at(3),
        gap_bound_violations: gap_violations,
        kl_ratio_histogram: hist,
        argmax_flip_fraction: if probed > 0 {
            flips as f64 / probed as f64
        } else {
            0.0
        },
        zeta_summary: ["norm", "clip", "ratio", "total"]
            .iter()
            .zip(&zeta_cols)
            .map(|(name, vals)| summarize_component(name, vals))
            .collect(),
    };
    write(&out.join("report.json"), &json(&report))?;
    Ok(report)
}
