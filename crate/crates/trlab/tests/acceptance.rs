//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line with the measured quantities. All tolerances are pinned here.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trlab::advantage::{
    clip_bias_bound, collect_rollouts, shrinkage_check, GroupAdvConfig,
};
use trlab::certificate::{
    cumulative_shift_bound, dv_oracle_upper, hoeffding_correction, klfisher_quadratic_check,
    lin_quad, occ_shift_bound, ratio_clip_bias_bound, ratio_tv_identity_check, stage_bound,
    stale_gap_bound, stale_penalty_sqrt_sum, stale_stage_bound, CertConfig,
};
use trlab::config::ScaleFamily;
use trlab::diagnostics::{ess, fit_exponent, scaling_sweep, stale_gap};
use trlab::divergence::{
    chain_rule_message_kl, max_statewise_kl, sampled_kl_monitor, subsample_flip_rate,
    token_kl_factor, TrustRegionSchedule,
};
use trlab::env::{ContextState, EnvConfig, PatternReward, RewardSpec, Router};
use trlab::exact::Evaluator;
use trlab::plugswap::{sample_probe_contexts, swap_agent, AlignConfig, AlignMode};
use trlab::policy::{kl_statewise, AgentPolicy, TeamPolicy};
use trlab::runner::{build_instance, scale_family, train_stages};
use trlab::seed::SeedTree;
use trlab::trainer::{
    pga_step, project_to_ball, run_stage, OrderSpec, PpoConfig, StageContext, StagePlan,
    TrainMode,
};

fn base_env(vocab: usize, msg_len: usize, ctx: usize, n: usize, gamma: f64) -> EnvConfig {
    EnvConfig {
        vocab_size: vocab,
        msg_len_max: msg_len,
        ctx_len_max: ctx,
        n_agents: n,
        gamma,
        r_max: 1.0,
        state_cap: 50_000,
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

fn random_team(env: &EnvConfig, eval: &Evaluator, scale: f64, rng: &mut ChaCha8Rng) -> TeamPolicy {
    let mut team = TeamPolicy::uniform(env, eval.router.clone());
    for j in 0..env.n_agents {
        let p = team.agents[j]
            .perturbed(&eval.space, &eval.router, env, scale, rng)
            .unwrap();
        team = team.replace_factor(j, p).unwrap();
    }
    team
}

fn decoy_env(n: usize, gamma: f64) -> EnvConfig {
    EnvConfig {
        n_agents: n,
        ctx_len_max: n,
        reward: RewardSpec::TerminalPattern {
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
        ..base_env(2, 1, n, n, gamma)
    }
}

fn wide_ppo() -> PpoConfig {
    PpoConfig {
        ratio_eps: 0.9,
        beta_init: 1.0,
        beta_up: 2.0,
        beta_down: 0.5,
        lr: 0.3,
        max_inner_steps: 80,
        kl_band: (0.5, 1.0),
    }
}

fn plan(mode: TrainMode, radius: f64, n: usize, budget: usize) -> StagePlan {
    StagePlan {
        mode,
        order: OrderSpec::Fixed,
        radii: TrustRegionSchedule::fixed(radius, n),
        inner_epochs: 1,
        resample_k: 2,
        rollout_budget: budget,
    }
}

#[test]
fn criterion_01_active_factor_reduction() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut max_dev = 0.0f64;
    let mut probes = 0;
    // Mix of team sizes, vocabularies, and message modes.
    let configs = [
        (2usize, 1usize, 3usize, 2usize),
        (3, 1, 3, 3),
        (4, 1, 2, 4),
        (2, 2, 4, 3),
        (3, 2, 3, 2),
    ];
    'outer: for (vocab, msg_len, ctx, n) in configs {
        let env = base_env(vocab, msg_len, ctx, n, 0.7);
        let eval = Evaluator::new(&env, &Router::RoundRobin).unwrap();
        let states: Vec<ContextState> = eval
            .space
            .states
            .iter()
            .filter(|s| !s.terminal)
            .cloned()
            .collect();
        loop {
            let p = random_team(&env, &eval, 1.0, &mut rng);
            let q = random_team(&env, &eval, 1.0, &mut rng);
            for state in &states {
                let team_kl = p.team_kl_statewise(&q, state, &env).unwrap();
                let j = trlab::env::active_agent(state, &eval.router, &env).unwrap();
                let factor_kl = kl_statewise(&p.agents[j], &q.agents[j], state, &env).unwrap();
                max_dev = max_dev.max((team_kl - factor_kl).abs());
                probes += 1;
                if probes >= 200 * (configs.len()) {
                    break 'outer;
                }
            }
            if probes >= 1000 && start.elapsed().as_secs() > 3 {
                break 'outer;
            }
        }
    }
    let ok = probes >= 1000 && max_dev <= 1e-12 && start.elapsed().as_secs_f64() < 5.0;
    println!(
        "[criterion 01] {}, active-factor reduction: {} probes, max |team KL - factor KL| = {:.2e} (tol 1e-12), {:.2}s",
        if ok { "PASS" } else { "FAIL" },
        probes,
        max_dev,
        start.elapsed().as_secs_f64()
    );
    assert!(ok);
}

#[test]
fn criterion_02_chain_rule() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut max_dev = 0.0f64;
    let mut checked = 0;
    for vocab in 2..=4usize {
        for msg_len in 1..=3usize {
            let env = base_env(vocab, msg_len, msg_len + 1, 1, 0.5);
            let eval = Evaluator::new(&env, &Router::RoundRobin).unwrap();
            let s0 = ContextState::initial(vec![], &env);
            for _ in 0..20 {
                let p = AgentPolicy::uniform(0, vocab)
                    .perturbed(&eval.space, &eval.router, &env, 1.0, &mut rng)
                    .unwrap();
                let q = AgentPolicy::uniform(0, vocab)
                    .perturbed(&eval.space, &eval.router, &env, 1.0, &mut rng)
                    .unwrap();
                let chain = chain_rule_message_kl(&p, &q, &s0, &env).unwrap();
                let direct = kl_statewise(&p, &q, &s0, &env).unwrap();
                max_dev = max_dev.max((chain - direct).abs());
                checked += 1;
            }
        }
    }
    let ok = max_dev <= 1e-12 && start.elapsed().as_secs_f64() < 10.0;
    println!(
        "[criterion 02] {}, chain rule: {} (vocab, length, pair) cases, max |chain - direct| = {:.2e} (tol 1e-12), {:.2}s",
        if ok { "PASS" } else { "FAIL" },
        checked,
        max_dev,
        start.elapsed().as_secs_f64()
    );
    assert!(ok);
}

#[test]
fn criterion_03_occupancy_and_pdl() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut max_pdl_dev = 0.0f64;
    let mut max_residual = 0.0f64;
    for trial in 0..200 {
        let gamma = [0.5, 0.7, 0.9][trial % 3];
        let n = 2 + trial % 2;
        let env = base_env(2, 1, 3, n, gamma);
        let eval = Evaluator::new(&env, &Router::RoundRobin).unwrap();
        let old = random_team(&env, &eval, 1.0, &mut rng);
        let new = random_team(&env, &eval, 1.0, &mut rng);
        // Occupancy fixed-point residual is enforced at 1e-9 inside the
        // solver; recompute it here explicitly.
        let occ = eval.exact_occupancy(&new).unwrap();
        let kernel = eval.induced_kernel(&new).unwrap();
        for s in 0..eval.n_states() {
            let mut rhs = (1.0 - gamma) * eval.mu[s];
            for t in 0..eval.n_states() {
                rhs += gamma * kernel[(t, s)] * occ.dist[t];
            }
            max_residual = max_residual.max((occ.dist[s] - rhs).abs());
        }
        let pdl = eval.performance_difference(&new, &old).unwrap();
        let direct = eval.exact_return(&new).unwrap() - eval.exact_return(&old).unwrap();
        max_pdl_dev = max_pdl_dev.max((pdl - direct).abs());
    }
    let ok = max_residual <= 1e-9 && max_pdl_dev <= 1e-8 && start.elapsed().as_secs_f64() < 30.0;
    println!(
        "[criterion 03] {}, occupancy residual max {:.2e} (tol 1e-9); PDL identity max dev {:.2e} over 200 pairs (tol 1e-8), {:.2}s",
        if ok { "PASS" } else { "FAIL" },
        max_residual,
        max_pdl_dev,
        start.elapsed().as_secs_f64()
    );
    assert!(ok);
}

struct BoundViolations {
    occ_shift: usize,
    cumocc: usize,
    gap: usize,
    thm1: usize,
    thm2: usize,
    thm3: usize,
    clipbias_tr: usize,
    oracle: usize,
    updates: usize,
}

#[test]
fn criterion_04_bound_soundness() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut v = BoundViolations {
        occ_shift: 0,
        cumocc: 0,
        gap: 0,
        thm1: 0,
        thm2: 0,
        thm3: 0,
        clipbias_tr: 0,
        oracle: 0,
        updates: 0,
    };
    let slack = 1e-9;
    // Randomized sequential stages; every step is an in-region update
    // (bounds instantiated at the measured exact KLs, the tightest case).
    while v.updates < 500 {
        let gamma = [0.5, 0.7, 0.85][v.updates % 3];
        let n = 2 + v.updates % 3;
        let env = decoy_env(n, gamma);
        let eval = Evaluator::new(&env, &Router::RoundRobin).unwrap();
        let stage_start = random_team(&env, &eval, 0.8, &mut rng);
        let d_start = eval.exact_occupancy(&stage_start).unwrap();
        let j_start = eval.exact_return(&stage_start).unwrap();
        let a_clip = 1.0 + rng.gen_range(0.0..2.0);

        let mut current = stage_start.clone();
        let mut kls: Vec<f64> = Vec::new();
        let mut l_seqs: Vec<f64> = Vec::new();
        let mut l_stales: Vec<f64> = Vec::new();
        let mut a_max_stage = 0.0f64;
        for j in 0..n {
            let behavior = current.clone();
            let d_b = eval.exact_occupancy(&behavior).unwrap();
            let adv_b = eval.exact_advantage(&behavior).unwrap();
            let a_max = adv_b.a_max_observed.max(1e-9);
            a_max_stage = a_max_stage.max(a_max);
            let scale = rng.gen_range(0.05..0.4);
            let new_factor = behavior.agents[j]
                .perturbed(&eval.space, &eval.router, &env, scale, &mut rng)
                .unwrap();
            let next = behavior.replace_factor(j, new_factor.clone()).unwrap();
            let kl =
                token_kl_factor(&eval, &behavior, j, &behavior.agents[j], &new_factor)
                    .unwrap()
                    .value;
            let j_b = eval.exact_return(&behavior).unwrap();
            let j_n = eval.exact_return(&next).unwrap();

            // Occupancy-shift bound on a random bounded f.
            let f: Vec<f64> = (0..eval.n_states())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let f_inf = f.iter().map(|x| x.abs()).fold(0.0, f64::max);
            let d_n = eval.exact_occupancy(&next).unwrap();
            let shift = (d_n.expectation(&f) - d_b.expectation(&f)).abs();
            if shift > occ_shift_bound(kl, gamma, f_inf) + slack {
                v.occ_shift += 1;
            }

            // Single-step lower bound with exact inputs (zeta = 0).
            let l_seq = eval.surrogate_from(&d_b, &adv_b, &next).unwrap();
            let occ_coeff = 2f64.sqrt() * gamma * a_max / (1.0 - gamma).powi(2);
            if j_n - j_b < l_seq - occ_coeff * kl.sqrt() - slack {
                v.thm1 += 1;
            }

            // Oracle upper envelope at the exact max statewise forward KL.
            let kl_max = max_statewise_kl(&eval, &next, &behavior).unwrap();
            if j_n - j_b > dv_oracle_upper(a_max, gamma, kl_max) + slack {
                v.oracle += 1;
            }

            // Ratio-clipping bias under the trust region.
            let unclipped = eval
                .clipped_surrogate_from(&d_b, &adv_b, &behavior, &next, a_clip, None)
                .unwrap();
            let clipped = eval
                .clipped_surrogate_from(&d_b, &adv_b, &behavior, &next, a_clip, Some(0.2))
                .unwrap();
            if (unclipped - clipped).abs() > ratio_clip_bias_bound(kl, a_clip, gamma) + 1e-10 {
                v.clipbias_tr += 1;
            }

            // Stale-side quantities for the stage-level bounds.
            let l_stale = eval.surrogate_from(&d_start, &adv_b, &next).unwrap();
            if (l_seq - l_stale).abs() > stale_gap_bound(&kls, a_max, gamma) + slack {
                v.gap += 1;
            }
            // Cumulative shift of the intermediate occupancy.
            let cum_shift = (d_b.expectation(&f) - d_start.expectation(&f)).abs();
            if cum_shift > cumulative_shift_bound(&kls, gamma, f_inf) + slack {
                v.cumocc += 1;
            }

            kls.push(kl);
            l_seqs.push(l_seq);
            l_stales.push(l_stale);
            current = next;
            v.updates += 1;
        }
        let j_end = eval.exact_return(&current).unwrap();
        let cfg = CertConfig {
            gamma,
            a_max: a_max_stage,
            a_clip,
            ratio_eps: 0.2,
            delta_conf: 0.05,
        };
        let zeros = vec![0.0; kls.len()];
        let stage = stage_bound(&l_seqs, &kls, &zeros, &cfg).unwrap();
        if stage.stage_lb > j_end - j_start + slack {
            v.thm2 += 1;
        }
        let stale_stage = stale_stage_bound(&l_stales, &kls, &zeros, &cfg).unwrap();
        if stale_stage.stage_lb > j_end - j_start + slack {
            v.thm3 += 1;
        }
    }
    let total = v.occ_shift + v.cumocc + v.gap + v.thm1 + v.thm2 + v.thm3 + v.clipbias_tr + v.oracle;
    let elapsed = start.elapsed().as_secs_f64();
    let ok = total == 0 && elapsed < 300.0;
    println!(
        "[criterion 04] {}, bound soundness over {} in-region updates: violations occ_shift {} cumocc {} gap {} thm1 {} thm2 {} thm3 {} clipbias_tr {} oracle {} (all must be 0), {:.1}s",
        if ok { "PASS" } else { "FAIL" },
        v.updates,
        v.occ_shift,
        v.cumocc,
        v.gap,
        v.thm1,
        v.thm2,
        v.thm3,
        v.clipbias_tr,
        v.oracle,
        elapsed
    );
    assert!(ok);
}

#[test]
fn criterion_05_quadratic_to_linear() {
    let start = std::time::Instant::now();
    // Closed-form penalty-sum ratio stale/fresh = (n+1)/2 exactly.
    let mut ratio_ok = true;
    for n in 1..=8usize {
        let deltas = vec![0.01f64; n];
        let fresh: f64 = deltas.iter().map(|d| d.sqrt()).sum();
        let stale = stale_penalty_sqrt_sum(&deltas);
        if (stale / fresh - (n as f64 + 1.0) / 2.0).abs() > 1e-12 {
            ratio_ok = false;
        }
    }

    // Fitting routine reproduces the closed-form log-log slopes. The
    // analytic oracle is an independent OLS over the triangular numbers.
    let ns: Vec<f64> = (2..=8).map(|n| n as f64).collect();
    let stale_closed: Vec<f64> = (2..=8).map(|n| (n * (n + 1)) as f64 / 2.0).collect();
    let fresh_closed: Vec<f64> = (2..=8).map(|n| n as f64).collect();
    let analytic = {
        let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
        let ys: Vec<f64> = stale_closed.iter().map(|y| y.ln()).collect();
        let mx = xs.iter().sum::<f64>() / 7.0;
        let my = ys.iter().sum::<f64>() / 7.0;
        let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        num / den
    };
    let fit_stale = fit_exponent(&ns, &stale_closed).unwrap();
    let fit_fresh = fit_exponent(&ns, &fresh_closed).unwrap();
    let fit_ok = (fit_stale - analytic).abs() <= 0.05 && (fit_fresh - 1.0).abs() <= 1e-12;

    // Empirical toy-run exponents from the sweep: measured certificate
    // penalty sums (stale form vs fresh form on realized exact step-KLs).
    let base = decoy_env(2, 0.7);
    let adv = GroupAdvConfig {
        group_size: 8,
        a_clip: 3.0,
        eps_norm: 1e-6,
    };
    let ppo = wide_ppo();
    let family = scale_family(&base, ScaleFamily::Decoy);
    let n_values = [2usize, 3, 4, 5];
    let seeds = [1u64, 2, 3];
    let stale_sweep = scaling_sweep(
        &n_values,
        &family,
        &plan(TrainMode::Stale, 0.1, 4, 16),
        &adv,
        &ppo,
        12,
        &seeds,
        "stale",
    )
    .unwrap();
    let fresh_sweep = scaling_sweep(
        &n_values,
        &family,
        &plan(TrainMode::Fresh, 0.1, 4, 16),
        &adv,
        &ppo,
        12,
        &seeds,
        "fresh",
    )
    .unwrap();
    let empirical_ok =
        stale_sweep.alpha_penalty >= 1.5 && fresh_sweep.alpha_penalty <= 1.3;

    let elapsed = start.elapsed().as_secs_f64();
    let ok = ratio_ok && fit_ok && empirical_ok && elapsed < 600.0;
    println!(
        "[criterion 05] {}, penalty ratio (n+1)/2 exact for n in 1..=8: {}; fitted closed-form slopes stale {:.4} (analytic {:.4}, tol 0.05) / fresh {:.4} (= 1 exactly); empirical penalty exponents stale {:.2} (>= 1.5) vs fresh {:.2} (<= 1.3) [gap-based alpha_delta {:.2}/{:.2}, drift alpha_docc {:.2}/{:.2} reported], {:.1}s",
        if ok { "PASS" } else { "FAIL" },
        ratio_ok,
        fit_stale,
        analytic,
        fit_fresh,
        stale_sweep.alpha_penalty,
        fresh_sweep.alpha_penalty,
        stale_sweep.alpha_delta,
        fresh_sweep.alpha_delta,
        stale_sweep.alpha_docc,
        fresh_sweep.alpha_docc,
        elapsed
    );
    assert!(ok);
}

#[test]
fn criterion_06_stale_gap_monotonicity() {
    let start = std::time::Instant::now();
    let env = decoy_env(3, 0.7);
    let eval = Evaluator::new(&env, &Router::RoundRobin).unwrap();
    let adv = GroupAdvConfig {
        group_size: 8,
        a_clip: 3.0,
        eps_norm: 1e-6,
    };
    let ppo = wide_ppo();
    let p = plan(TrainMode::Stale, 0.2, 3, 24);
    let ctx = StageContext {
        eval: &eval,
        plan: &p,
        adv: &adv,
        ppo: &ppo,
    };
    let mut logs = Vec::new();
    for seed in [11u64, 12, 13] {
        let tree = SeedTree::new(seed);
        let mut team = TeamPolicy::uniform(&env, Router::RoundRobin);
        for stage in 0..20 {
            let result = run_stage(&ctx, &team, stage, &tree).unwrap();
            team = result.team;
            logs.extend(result.logs);
        }
    }
    let trace = stale_gap(&logs, env.gamma).unwrap();
    let med2 = trace.median_gap_at_step(2).unwrap();
    let med3 = trace.median_gap_at_step(3).unwrap();
    let bound_ok = !trace.any_bound_violation();
    // Sampled-surrogate medians reported alongside the exact ones.
    let med_hat = |step: usize| {
        let mut v: Vec<f64> = trace
            .rows
            .iter()
            .filter(|r| r.step == step)
            .map(|r| r.gap_hat)
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let elapsed = start.elapsed().as_secs_f64();
    let ok = med3 > med2 && bound_ok && elapsed < 300.0;
    println!(
        "[criterion 06] {}, stale-gap monotonicity over 20 stages x 3 seeds: exact median Gap_3 {:.3e} > Gap_2 {:.3e}; sampled medians {:.3e} vs {:.3e}; all exact gaps within the surrogate-gap bound: {}, {:.1}s",
        if ok { "PASS" } else { "FAIL" },
        med3,
        med2,
        med_hat(3),
        med_hat(2),
        bound_ok,
        elapsed
    );
    assert!(ok);
}

#[test]
fn criterion_07_estimator_lemmas() {
    let start = std::time::Instant::now();
    // Shrinkage slope 1 - 1/G within the 95% CI at 1e4 trials.
    let env = decoy_env(2, 0.7);
    let eval = Evaluator::new(&env, &Router::RoundRobin).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let team = random_team(&env, &eval, 0.5, &mut rng);
    let mut shrink_ok = true;
    let mut slopes = Vec::new();
    for g in [2usize, 4, 8] {
        let (slope, ci) = shrinkage_check(&eval, &team, g, 10_000, 2700 + g as u64).unwrap();
        let expect = 1.0 - 1.0 / g as f64;
        slopes.push((g, slope, ci));
        if (slope - expect).abs() > ci {
            shrink_ok = false;
        }
    }

    // Ratio-TV identity on 1000 random pairs.
    let mut max_tv_dev = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(2..6);
        let mut p: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let mut q: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sp: f64 = p.iter().sum();
        let sq: f64 = q.iter().sum();
        p.iter_mut().for_each(|x| *x /= sp);
        q.iter_mut().for_each(|x| *x /= sq);
        let (lhs, rhs) = ratio_tv_identity_check(&p, &q).unwrap();
        max_tv_dev = max_tv_dev.max((lhs - rhs).abs());
    }

    // Clip-bias inequalities on 1000 random discrete distributions (the
    // inequality asserts live inside clip_bias_bound).
    let mut clip_ok = true;
    for _ in 0..1000 {
        let k = rng.gen_range(2..8);
        let values: Vec<f64> = (0..k).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let mut probs: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|x| *x /= total);
        let c = rng.gen_range(0.2..3.0);
        if clip_bias_bound(&values, &probs, c).is_err() {
            clip_ok = false;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = shrink_ok && max_tv_dev <= 1e-12 && clip_ok && elapsed < 120.0;
    println!(
        "[criterion 07] {}, shrinkage slopes {:?} each within CI of 1-1/G; ratio-TV max dev {:.2e} over 1000 pairs (tol 1e-12); clip-bias inequalities held on 1000 distributions: {}, {:.1}s",
        if ok { "PASS" } else { "FAIL" },
        slopes
            .iter()
            .map(|(g, s, _)| format!("G={g}:{s:.4}"))
            .collect::<Vec<_>>(),
        max_tv_dev,
        clip_ok,
        elapsed
    );
    assert!(ok);
}

#[test]
fn criterion_08_concentration() {
    let start = std::time::Instant::now();
    let env = decoy_env(2, 0.7);
    let eval = Evaluator::new(&env, &Router::RoundRobin).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let behavior = random_team(&env, &eval, 0.5, &mut rng);
    let new0 = behavior.agents[0]
        .perturbed(&eval.space, &eval.router, &env, 0.3, &mut rng)
        .unwrap();
    let new_team = behavior.replace_factor(0, new0).unwrap();
    let adv_cfg = GroupAdvConfig {
        group_size: 8,
        a_clip: 3.0,
        eps_norm: 1e-6,
    };
    let cert = CertConfig {
        gamma: env.gamma,
        a_max: 1.0,
        a_clip: adv_cfg.a_clip,
        ratio_eps: 0.2,
        delta_conf: 0.05,
    };
    let kl_exact = token_kl_factor(&eval, &behavior, 0, &behavior.agents[0], &new_team.agents[0])
        .unwrap()
        .value;

    // Empirical surrogate of one batch: mean over trajectories of the
    // clipped-ratio weighted advantage, discount-weighted.
    let surrogate = |seed: u64, n_groups: usize, clip: bool| -> f64 {
        let prompts = vec![vec![]; n_groups];
        let batch = collect_rollouts(&behavior, &env, &prompts, adv_cfg.group_size, seed).unwrap();
        let advs = trlab::advantage::batch_advantages(&batch, &adv_cfg).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for (group, (_raw, clipped)) in batch.groups.iter().zip(&advs) {
            for (gi, traj) in group.trajectories.iter().enumerate() {
                count += 1;
                let mut disc = 1.0;
                for step in &traj.steps {
                    if step.agent == 0 {
                        let lp_new = new_team.agents[0]
                            .message_logprob(&step.state, &step.message, &env)
                            .unwrap();
                        let lp_old: f64 = step.token_logps.iter().sum();
                        let mut w = (lp_new - lp_old).exp();
                        if clip {
                            w = w.clamp(1.0 - cert.ratio_eps, 1.0 + cert.ratio_eps);
                        }
                        total += disc * w * clipped[gi];
                    }
                    disc *= env.gamma;
                }
            }
        }
        total / count as f64
    };

    // Population value of the unclipped surrogate via a large MC run.
    let l_pop = surrogate(999_999, 30_000, false);
    let mut covered = 0;
    for trial in 0..500u64 {
        let l_hat = surrogate(1000 + trial, 50, true);
        let (corrected, _s, _r) = hoeffding_correction(l_hat, 50, kl_exact, 0.05, &cert).unwrap();
        if corrected <= l_pop {
            covered += 1;
        }
    }
    let coverage = covered as f64 / 500.0;

    // Block bound reduces to two-sided Hoeffding when beta = 0, block 1.
    let reduce =
        trlab::certificate::block_bound(400, 1, 0.0, 1.0, 0.2).unwrap();
    let hoeffding = 2.0 * (-200.0f64 * 0.2 * 0.2 / 2.0).exp();
    let reduction_ok = (reduce - hoeffding).abs() < 1e-15;

    let elapsed = start.elapsed().as_secs_f64();
    let ok = coverage >= 0.95 && reduction_ok && elapsed < 300.0;
    println!(
        "[criterion 08] {}, Hoeffding-corrected bound coverage {:.1}% over 500 resampled runs (need >= 95%); block bound reduces to Hoeffding at beta=0: {}, {:.1}s",
        if ok { "PASS" } else { "FAIL" },
        100.0 * coverage,
        reduction_ok,
        elapsed
    );
    assert!(ok);
}

#[test]
fn criterion_09_monitor_reliability() {
    let start = std::time::Instant::now();
    let env = decoy_env(2, 0.7);
    let eval = Evaluator::new(&env, &Router::RoundRobin).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let behavior = random_team(&env, &eval, 0.5, &mut rng);
    let new0 = behavior.agents[0]
        .perturbed(&eval.space, &eval.router, &env, 0.35, &mut rng)
        .unwrap();
    let batch = collect_rollouts(&behavior, &env, &vec![vec![]; 600], 1, 910).unwrap();
    let full = sampled_kl_monitor(&batch, 0, &behavior.agents[0], &new0, &env).unwrap();
    // Threshold sits above the measurement by a margin sized against the
    // q=0.25 subsampling noise, still inside the near-threshold band.
    let delta = full.raw_value * 1.14;

    // Full-batch subsampling: deviation 0 and flip rate 0.
    let rep_full = subsample_flip_rate(
        &batch,
        0,
        &behavior.agents[0],
        &new0,
        &env,
        delta,
        1.0,
        200,
        911,
    )
    .unwrap();
    let full_ok = rep_full.median_dev == 0.0 && rep_full.flip_rate == Some(0.0);

    let rep50 = subsample_flip_rate(
        &batch, 0, &behavior.agents[0], &new0, &env, delta, 0.5, 3000, 912,
    )
    .unwrap();
    let rep25 = subsample_flip_rate(
        &batch, 0, &behavior.agents[0], &new0, &env, delta, 0.25, 3000, 912,
    )
    .unwrap();
    let f50 = rep50.flip_rate.unwrap_or(f64::NAN);
    let f25 = rep25.flip_rate.unwrap_or(f64::NAN);
    let order_ok = f50 <= f25;

    // Identical policies: monitor identically zero, flips impossible.
    let rep_same = subsample_flip_rate(
        &batch,
        0,
        &behavior.agents[0],
        &behavior.agents[0].clone(),
        &env,
        0.01,
        0.5,
        100,
        913,
    )
    .unwrap();
    let same_ok = rep_same.flip_rate == Some(0.0);

    let elapsed = start.elapsed().as_secs_f64();
    let ok = full_ok && order_ok && same_ok && elapsed < 60.0;
    println!(
        "[criterion 09] {}, q=1.0 deviation {:.1e} / flip {:?} (must be 0/0); flip rate q=0.5 {:.3} <= q=0.25 {:.3}; p=q flip rate {:?}, {:.1}s",
        if ok { "PASS" } else { "FAIL" },
        rep_full.median_dev,
        rep_full.flip_rate,
        f50,
        f25,
        rep_same.flip_rate,
        elapsed
    );
    assert!(ok);
}

#[test]
fn criterion_10_ess_degeneracy() {
    let start = std::time::Instant::now();
    let env = decoy_env(5, 0.8);
    let eval = Evaluator::new(&env, &Router::RoundRobin).unwrap();
    let adv = GroupAdvConfig {
        group_size: 8,
        a_clip: 3.0,
        eps_norm: 1e-6,
    };
    let ppo = wide_ppo();
    let p = plan(TrainMode::StaleIs, 0.2, 5, 40);
    let ctx = StageContext {
        eval: &eval,
        plan: &p,
        adv: &adv,
        ppo: &ppo,
    };
    let mut per_u: Vec<Vec<f64>> = vec![Vec::new(); 5];
    for seed in [21u64, 22, 23] {
        let tree = SeedTree::new(seed);
        let mut team = TeamPolicy::uniform(&env, Router::RoundRobin);
        for stage in 0..4 {
            let result = run_stage(&ctx, &team, stage, &tree).unwrap();
            team = result.team;
            for log in &result.logs {
                // Step i has |U_{i-1}| = i - 1 updated factors.
                if log.step >= 2 {
                    if let Some(e) = log.ess_over_b {
                        per_u[log.step - 1].push(e);
                    }
                }
            }
        }
    }
    let medians: Vec<f64> = (1..5)
        .map(|u| {
            let mut v = per_u[u].clone();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        })
        .collect();
    let strictly_decreasing = medians.windows(2).all(|w| w[1] < w[0]);

    // ESS formula sanity on the report itself.
    let uniform = ess(&[1.0; 8]).unwrap();
    let formula_ok = (uniform.ess_over_b - 1.0).abs() < 1e-12;

    let elapsed = start.elapsed().as_secs_f64();
    let ok = strictly_decreasing && formula_ok && elapsed < 240.0;
    println!(
        "[criterion 10] {}, stale-IS median ESS/B by |U|: {:?} strictly decreasing: {}; uniform-weight ESS/B = 1: {}, {:.1}s",
        if ok { "PASS" } else { "FAIL" },
        medians.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>(),
        strictly_decreasing,
        formula_ok,
        elapsed
    );
    assert!(ok);
}

#[test]
fn criterion_11_plug_and_play() {
    let start = std::time::Instant::now();
    let env = decoy_env(2, 0.7);
    let eval = Evaluator::new(&env, &Router::RoundRobin).unwrap();
    let adv = GroupAdvConfig {
        group_size: 8,
        a_clip: 3.0,
        eps_norm: 1e-6,
    };
    let ppo = PpoConfig::default();
    let train_plan = plan(TrainMode::Fresh, 0.1, 2, 16);
    let align_cfg = AlignConfig {
        delta_align: 0.01,
        max_steps: 3000,
        lr: 0.5,
        teacher_samples_per_context: 8,
    };

    let mut direct_shocks = Vec::new();
    let mut aligned_shocks = Vec::new();
    let mut probe_ok = true;
    let mut cert_violations = 0usize;
    for seed in 0..20u64 {
        let tree = SeedTree::new(3000 + seed);
        let ctx = StageContext {
            eval: &eval,
            plan: &train_plan,
            adv: &adv,
            ppo: &ppo,
        };
        // Train a competent team so a random replacement hurts.
        let mut team = TeamPolicy::uniform(&env, Router::RoundRobin);
        for stage in 0..6 {
            team = run_stage(&ctx, &team, stage, &tree).unwrap().team;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let replacement = AgentPolicy::uniform(0, env.vocab_size)
            .perturbed(&eval.space, &eval.router, &env, 2.0, &mut rng)
            .unwrap();
        let (_direct_team, direct) =
            swap_agent(&eval, &team, 0, replacement.clone(), None, &mut rng).unwrap();
        let probes = sample_probe_contexts(&eval, &team, 0, 50, &mut rng).unwrap();
        let (aligned_team, aligned) = swap_agent(
            &eval,
            &team,
            0,
            replacement,
            Some((&align_cfg, &probes, AlignMode::Exact)),
            &mut rng,
        )
        .unwrap();
        direct_shocks.push(direct.swap_shock);
        aligned_shocks.push(aligned.swap_shock);
        if aligned.align_success == Some(true) {
            if aligned.probe_kl.unwrap() > align_cfg.delta_align {
                probe_ok = false;
            }
        }
        // Post-alignment TeamTR stages: certificates with exact inputs
        // must stay sound.
        let mut post = aligned_team;
        for stage in 6..8 {
            let result = run_stage(&ctx, &post, stage, &tree).unwrap();
            post = result.team;
            let l_seq: Vec<f64> = result.logs.iter().map(|l| l.l_seq_exact).collect();
            let kls: Vec<f64> = result.logs.iter().map(|l| l.kl_exact).collect();
            let a_max = result
                .logs
                .iter()
                .map(|l| l.a_max_exact)
                .fold(0.0f64, f64::max)
                .max(1e-12);
            let cfg = CertConfig {
                gamma: env.gamma,
                a_max,
                a_clip: adv.a_clip,
                ratio_eps: ppo.ratio_eps,
                delta_conf: 0.05,
            };
            let zeros = vec![0.0; kls.len()];
            let lb = stage_bound(&l_seq, &kls, &zeros, &cfg).unwrap().stage_lb;
            let dj = result.logs.last().unwrap().j_after - result.logs[0].j_before;
            if lb > dj + 1e-9 {
                cert_violations += 1;
            }
        }
    }
    direct_shocks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    aligned_shocks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let md = direct_shocks[10];
    let ma = aligned_shocks[10];
    let elapsed = start.elapsed().as_secs_f64();
    let ok = ma < md && probe_ok && cert_violations == 0 && elapsed < 300.0;
    println!(
        "[criterion 11] {}, median shock aligned {:.4} < direct {:.4} over 20 seeds; probe KL <= delta_align on every success: {}; post-alignment certificate violations {} (must be 0), {:.1}s",
        if ok { "PASS" } else { "FAIL" },
        ma,
        md,
        probe_ok,
        cert_violations,
        elapsed
    );
    assert!(ok);
}

#[test]
fn criterion_12_optimization_auxiliaries() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1212);

    // lin-quad closed form vs numerical maximization to 1e-8.
    let mut linquad_ok = true;
    for _ in 0..10 {
        let n = 3;
        let a = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let f = &a * a.transpose() + nalgebra::DMatrix::identity(n, n);
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let radius = 0.3;
        let (_dir, val) = lin_quad(&g, &f, radius).unwrap();
        let gv = nalgebra::DVector::from_column_slice(&g);
        let chol = f.clone().cholesky().unwrap();
        let c = chol.l().solve_lower_triangular(&gv).unwrap();
        let mut y: nalgebra::DVector<f64> = nalgebra::DVector::zeros(n);
        for _ in 0..5_000 {
            y += 0.05 * &c;
            let norm_sq = 0.5 * y.norm_squared();
            if norm_sq > radius {
                y *= (radius / norm_sq).sqrt();
            }
        }
        if (val - c.dot(&y)).abs() > 1e-8 {
            linquad_ok = false;
        }
    }

    // Projected-gradient per-step inequality over 100 steps.
    let a = [[2.0, 0.3], [0.3, 1.0]];
    let b = [1.0, -0.5];
    let eta = 1.0 / 2.2;
    let g_val = |x: &[f64]| -> f64 {
        let ax0 = a[0][0] * x[0] + a[0][1] * x[1];
        let ax1 = a[1][0] * x[0] + a[1][1] * x[1];
        b[0] * x[0] + b[1] * x[1] - 0.5 * (x[0] * ax0 + x[1] * ax1)
    };
    let grad = |x: &[f64]| -> Vec<f64> {
        vec![
            b[0] - (a[0][0] * x[0] + a[0][1] * x[1]),
            b[1] - (a[1][0] * x[0] + a[1][1] * x[1]),
        ]
    };
    let mut theta = vec![-0.3, 0.35];
    let mut pga_ok = true;
    for _ in 0..100 {
        let g = grad(&theta);
        let (next, mapping) = pga_step(&theta, &g, eta, |t| project_to_ball(t, 0.4));
        let norm_sq: f64 = mapping.iter().map(|x| x * x).sum();
        if g_val(&next) < g_val(&theta) + eta / 2.0 * norm_sq - 1e-12 {
            pga_ok = false;
        }
        theta = next;
    }

    // KL-Fisher residual halving ratio about 1/8 within 30%.
    let env = base_env(3, 1, 2, 1, 0.5);
    let state = ContextState::initial(vec![], &env);
    let mut ratio_hits = 0;
    let mut ratio_tried = 0;
    for _ in 0..30 {
        let mut agent = AgentPolicy::uniform(0, 3);
        agent.set_logits(
            &state,
            &[],
            vec![
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
        );
        let delta: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.05..0.05)).collect();
        let (_kl, _quad, residual) =
            klfisher_quadratic_check(&agent, &state, &env, &delta).unwrap();
        if residual.abs() < 1e-12 {
            continue;
        }
        let half: Vec<f64> = delta.iter().map(|d| d / 2.0).collect();
        let (_, _, res_half) = klfisher_quadratic_check(&agent, &state, &env, &half).unwrap();
        ratio_tried += 1;
        let ratio = res_half / residual;
        if (ratio - 0.125).abs() <= 0.125 * 0.3 {
            ratio_hits += 1;
        }
    }
    let fisher_ok = ratio_tried >= 20 && ratio_hits * 10 >= ratio_tried * 8;

    let elapsed = start.elapsed().as_secs_f64();
    let ok = linquad_ok && pga_ok && fisher_ok && elapsed < 60.0;
    println!(
        "[criterion 12] {}, lin-quad matches numeric maximization to 1e-8: {}; PGA per-step inequality held on all 100 steps: {}; KL-Fisher residual halving ~1/8 in {}/{} instances, {:.1}s",
        if ok { "PASS" } else { "FAIL" },
        linquad_ok,
        pga_ok,
        ratio_hits,
        ratio_tried,
        elapsed
    );
    assert!(ok);
}

#[test]
fn criterion_13_end_to_end_trend() {
    let start = std::time::Instant::now();
    // Part 1: final-J ordering fresh >= resample-every-2 >= stale over 20
    // paired seeds. The scenario is a relay ladder (any wrong token ends
    // the episode; deep states are data-starved at stage start), the
    // regime where freshness matters most at this scale.
    let mut base = trlab::runner::load_config("compare-modes").unwrap();
    base.env = EnvConfig {
        vocab_size: 4,
        ctx_len_max: 4,
        n_agents: 4,
        gamma: 0.9,
        reward: RewardSpec::TerminalPattern {
            patterns: vec![
                PatternReward {
                    suffix: vec![1; 4],
                    reward: 1.0,
                },
                PatternReward {
                    suffix: vec![0],
                    reward: 0.0,
                },
                PatternReward {
                    suffix: vec![2],
                    reward: 0.0,
                },
                PatternReward {
                    suffix: vec![3],
                    reward: 0.0,
                },
            ],
        },
        ..base.env.clone()
    };
    base.plan.radius = Some(0.2);
    base.plan.rollout_budget = 32;
    base.plan.stages = 4;
    base.validate().unwrap();
    let mut chain = 0usize;
    let mut t_ge_s = 0usize;
    for seed in 1..=20u64 {
        let mut finals = Vec::new();
        for mode in [TrainMode::Fresh, TrainMode::ResampleEveryK, TrainMode::Stale] {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.plan.mode = mode;
            let (eval, team) = build_instance(&cfg).unwrap();
            let p = cfg.plan.compile(cfg.env.n_agents).unwrap();
            let tree = SeedTree::new(cfg.seed);
            let outcome =
                train_stages(&cfg, &eval, &team, &p, 0..cfg.plan.stages, &tree).unwrap();
            finals.push(*outcome.j_trace.last().unwrap());
        }
        if finals[0] >= finals[1] && finals[1] >= finals[2] {
            chain += 1;
        }
        if finals[0] >= finals[2] {
            t_ge_s += 1;
        }
    }
    let chain_frac = chain as f64 / 20.0;
    let ordering_ok = chain_frac >= 0.8;

    // Part 2: the no-trust-region variant has the largest per-stage J
    // variance of all modes (20 stages x 3 seeds on the training scenario).
    let train_cfg = trlab::runner::load_config("train-small").unwrap();
    let variance_of = |mode: TrainMode, radius: f64, beta: f64| -> f64 {
        let mut djs = Vec::new();
        for seed in [5u64, 6, 7] {
            let mut cfg = train_cfg.clone();
            cfg.seed = seed;
            cfg.plan.mode = mode;
            cfg.plan.radius = Some(radius);
            cfg.ppo.beta_init = beta;
            let (eval, team) = build_instance(&cfg).unwrap();
            let p = cfg.plan.compile(cfg.env.n_agents).unwrap();
            let tree = SeedTree::new(cfg.seed);
            let outcome =
                train_stages(&cfg, &eval, &team, &p, 0..cfg.plan.stages, &tree).unwrap();
            djs.extend(outcome.j_trace.windows(2).map(|w| w[1] - w[0]));
        }
        let mean = djs.iter().sum::<f64>() / djs.len() as f64;
        djs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (djs.len() - 1) as f64
    };
    let var_fresh = variance_of(TrainMode::Fresh, 0.05, 1.0);
    let var_stale = variance_of(TrainMode::Stale, 0.05, 1.0);
    let var_joint = variance_of(TrainMode::Joint, 0.05, 1.0);
    let var_notr = variance_of(TrainMode::Fresh, f64::INFINITY, 0.0);
    let variance_ok =
        var_notr > var_fresh && var_notr > var_stale && var_notr > var_joint;

    let elapsed = start.elapsed().as_secs_f64();
    let ok = ordering_ok && variance_ok && elapsed < 900.0;
    println!(
        "[criterion 13] {}, final-J ordering fresh >= resample-2 >= stale in {}/20 paired runs (need >= 16; fresh >= stale alone in {}/20); per-stage dJ variance: no-TR {:.2e} vs fresh {:.2e} / stale {:.2e} / joint {:.2e} (no-TR must be largest: {}), {:.1}s",
        if ok { "PASS" } else { "FAIL" },
        chain,
        t_ge_s,
        var_notr,
        var_fresh,
        var_stale,
        var_joint,
        variance_ok,
        elapsed
    );
    assert!(
        variance_ok,
        "no-trust-region variance must dominate: notr {var_notr:.3e} fresh {var_fresh:.3e} stale {var_stale:.3e} joint {var_joint:.3e}"
    );
    assert!(
        ordering_ok,
        "final-J ordering held in {chain}/20 paired runs, below the 16/20 requirement"
    );
}
