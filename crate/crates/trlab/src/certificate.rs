//! Improvement certificates and every supporting bound: per-step and
//! per-stage lower bounds, the stale-occupancy variant, occupancy-shift and
//! cumulative-shift bounds, Hoeffding and blocking corrections, the oracle
//! upper envelope, the KL-Fisher quadratic model with its linear-quadratic
//! allocation, and the ratio/clipping identities.
//!
//! All assemblers are pure functions of their numeric inputs; the exact
//! quantities (surrogates, KLs, advantages) are supplied by callers from
//! the exact-eval oracles or from logged monitors.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::env::{ContextState, EnvConfig};
use crate::error::{Error, Result};
use crate::policy::{fisher_at, AgentPolicy};

/// Inputs shared by the certificate assemblers.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CertConfig {
    pub gamma: f64,
    /// Advantage bound: exact max |A| or the cap 2 r_max / (1-gamma).
    pub a_max: f64,
    pub a_clip: f64,
    pub ratio_eps: f64,
    pub delta_conf: f64,
}

impl CertConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("gamma must lie in (0,1)".into()));
        }
        if self.a_max <= 0.0 || self.a_clip <= 0.0 {
            return Err(Error::Config("a_max and a_clip must be positive".into()));
        }
        if !(self.delta_conf > 0.0 && self.delta_conf < 1.0) {
            return Err(Error::Config("delta_conf must lie in (0,1)".into()));
        }
        Ok(())
    }

    /// Occupancy-penalty coefficient sqrt(2) gamma A_max / (1-gamma)^2.
    pub fn occ_coeff(&self) -> f64 {
        2f64.sqrt() * self.gamma * self.a_max / (1.0 - self.gamma).powi(2)
    }

    /// Per-sample bound B = (1 + eps_w) A_clip / (1-gamma) entering the
    /// Hoeffding sampling term.
    pub fn b_sampling(&self) -> f64 {
        (1.0 + self.ratio_eps) * self.a_clip / (1.0 - self.gamma)
    }
}

/// Occupancy-shift bound sqrt(2) gamma / (1-gamma) * sqrt(kl) * ||f||_inf
/// on |E_{d'}[f] - E_d[f]| for KL(old || new) = kl under the old occupancy.
pub fn occ_shift_bound(kl: f64, gamma: f64, f_inf: f64) -> f64 {
    debug_assert!(kl >= 0.0);
    2f64.sqrt() * gamma / (1.0 - gamma) * kl.sqrt() * f_inf
}

/// Cumulative within-stage shift bound
/// sqrt(2) gamma / (1-gamma) * ||f||_inf * sum_k sqrt(delta_k)
/// over the prefix of per-step radii.
pub fn cumulative_shift_bound(radii_prefix: &[f64], gamma: f64, f_inf: f64) -> f64 {
    let s: f64 = radii_prefix.iter().map(|d| d.sqrt()).sum();
    2f64.sqrt() * gamma / (1.0 - gamma) * f_inf * s
}

/// Surrogate-gap bound |L_seq - L_stale| <=
/// sqrt(2) gamma / (1-gamma)^2 * A_max * sum_{k<i} sqrt(delta_k).
pub fn stale_gap_bound(radii_prefix: &[f64], a_max: f64, gamma: f64) -> f64 {
    let s: f64 = radii_prefix.iter().map(|d| d.sqrt()).sum();
    2f64.sqrt() * gamma / (1.0 - gamma).powi(2) * a_max * s
}

/// Single-step certificate: lb = L_seq - occ_coeff * sqrt(delta) - zeta/(1-gamma).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepCertificate {
    pub l_seq: f64,
    pub delta_i: f64,
    pub zeta_i: f64,
    pub lb: f64,
    pub surrogate: f64,
    pub occ_penalty: f64,
    pub zeta_penalty: f64,
}

pub fn single_step_bound(l_seq: f64, delta_i: f64, zeta_i: f64, cfg: &CertConfig) -> StepCertificate {
    let occ_penalty = cfg.occ_coeff() * delta_i.sqrt();
    let zeta_penalty = zeta_i / (1.0 - cfg.gamma);
    StepCertificate {
        l_seq,
        delta_i,
        zeta_i,
        lb: l_seq - occ_penalty - zeta_penalty,
        surrogate: l_seq,
        occ_penalty,
        zeta_penalty,
    }
}

/// Component breakdown of a stage certificate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StageComponents {
    pub surrogate_sum: f64,
    /// sum_i sqrt(delta_i) for the fresh form, or the double sum
    /// sum_i (sqrt(delta_i) + sum_{k<i} sqrt(delta_k)) for the stale form.
    pub penalty_sqrt_sum: f64,
    pub occ_penalty: f64,
    pub zeta_penalty: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageCertificate {
    pub steps: Vec<StepCertificate>,
    pub stage_lb: f64,
    pub components: StageComponents,
}

/// Stage certificate: sum of surrogates minus the fresh penalty
/// occ_coeff * sum_i sqrt(delta_i) minus sum_i zeta_i / (1-gamma).
pub fn stage_bound(
    l_seqs: &[f64],
    deltas: &[f64],
    zetas: &[f64],
    cfg: &CertConfig,
) -> Result<StageCertificate> {
    if l_seqs.len() != deltas.len() || deltas.len() != zetas.len() || l_seqs.is_empty() {
        return Err(Error::Usage("stage inputs must be equal non-zero length".into()));
    }
    let steps: Vec<StepCertificate> = l_seqs
        .iter()
        .zip(deltas)
        .zip(zetas)
        .map(|((l, d), z)| single_step_bound(*l, *d, *z, cfg))
        .collect();
    let surrogate_sum: f64 = l_seqs.iter().sum();
    let penalty_sqrt_sum: f64 = deltas.iter().map(|d| d.sqrt()).sum();
    let occ_penalty = cfg.occ_coeff() * penalty_sqrt_sum;
    let zeta_penalty: f64 = zetas.iter().map(|z| z / (1.0 - cfg.gamma)).sum();
    Ok(StageCertificate {
        stage_lb: surrogate_sum - occ_penalty - zeta_penalty,
        steps,
        components: StageComponents {
            surrogate_sum,
            penalty_sqrt_sum,
            occ_penalty,
            zeta_penalty,
        },
    })
}

/// Stale-form penalty multiplier sum_i (sqrt(delta_i) + sum_{k<i} sqrt(delta_k));
/// for constant radii this is sqrt(delta) * n(n+1)/2.
pub fn stale_penalty_sqrt_sum(deltas: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut prefix = 0.0;
    for d in deltas {
        total += d.sqrt() + prefix;
        prefix += d.sqrt();
    }
    total
}

/// Stage certificate under stale-occupancy surrogates: the quadratic-in-n
/// penalty replaces the fresh linear one.
pub fn stale_stage_bound(
    l_stales: &[f64],
    deltas: &[f64],
    zetas: &[f64],
    cfg: &CertConfig,
) -> Result<StageCertificate> {
    if l_stales.len() != deltas.len() || deltas.len() != zetas.len() || l_stales.is_empty() {
        return Err(Error::Usage("stage inputs must be equal non-zero length".into()));
    }
    let steps: Vec<StepCertificate> = l_stales
        .iter()
        .zip(deltas)
        .zip(zetas)
        .map(|((l, d), z)| single_step_bound(*l, *d, *z, cfg))
        .collect();
    let surrogate_sum: f64 = l_stales.iter().sum();
    let penalty_sqrt_sum = stale_penalty_sqrt_sum(deltas);
    let occ_penalty = cfg.occ_coeff() * penalty_sqrt_sum;
    let zeta_penalty: f64 = zetas.iter().map(|z| z / (1.0 - cfg.gamma)).sum();
    Ok(StageCertificate {
        stage_lb: surrogate_sum - occ_penalty - zeta_penalty,
        steps,
        components: StageComponents {
            surrogate_sum,
            penalty_sqrt_sum,
            occ_penalty,
            zeta_penalty,
        },
    })
}

/// Empirical-to-population correction for one step: returns
/// (corrected lower bound on L_seq, sampling term, ratio-clipping term)
/// at confidence delta_conf.
pub fn hoeffding_correction(
    l_hat: f64,
    n_groups: usize,
    delta_i: f64,
    delta_conf: f64,
    cfg: &CertConfig,
) -> Result<(f64, f64, f64)> {
    if n_groups == 0 {
        return Err(Error::Usage("need at least one prompt group".into()));
    }
    if !(delta_conf > 0.0 && delta_conf < 1.0) {
        return Err(Error::Config("confidence level must lie in (0,1)".into()));
    }
    let sampling = cfg.b_sampling() * (2.0 * (2.0 / delta_conf).ln() / n_groups as f64).sqrt();
    let ratio = cfg.a_clip / (1.0 - cfg.gamma) * (2.0 * delta_i).sqrt();
    Ok((l_hat - sampling - ratio, sampling, ratio))
}

/// High-probability stage bound: empirical surrogates corrected per step at
/// confidence delta_conf / n (union bound), assembled with the fresh
/// occupancy penalty and zeta terms.
pub fn hp_stage_bound(
    l_hats: &[f64],
    deltas: &[f64],
    zetas: &[f64],
    n_groups: &[usize],
    cfg: &CertConfig,
) -> Result<f64> {
    let n = l_hats.len();
    if n == 0 || deltas.len() != n || zetas.len() != n || n_groups.len() != n {
        return Err(Error::Usage("stage inputs must be equal non-zero length".into()));
    }
    let per_step_conf = cfg.delta_conf / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let (corrected, _s, _r) =
            hoeffding_correction(l_hats[i], n_groups[i], deltas[i], per_step_conf, cfg)?;
        total += corrected;
    }
    let occ = cfg.occ_coeff() * deltas.iter().map(|d| d.sqrt()).sum::<f64>();
    let zeta: f64 = zetas.iter().map(|z| z / (1.0 - cfg.gamma)).sum();
    Ok(total - occ - zeta)
}

/// Blocking tail bound for beta-mixing group sequences:
/// 2 exp(-m eps^2 / (2 B^2)) + 2 (m-1) beta(l) with m = floor(N / (2 l)).
pub fn block_bound(n_samples: usize, block_len: usize, beta_mix: f64, b: f64, eps: f64) -> Result<f64> {
    if block_len == 0 {
        return Err(Error::Usage("block length must be >= 1".into()));
    }
    let m = n_samples / (2 * block_len);
    if m == 0 {
        return Err(Error::Usage("too few samples for one block pair".into()));
    }
    Ok(2.0 * (-(m as f64) * eps * eps / (2.0 * b * b)).exp() + 2.0 * (m as f64 - 1.0) * beta_mix)
}

/// Oracle single-step upper envelope A_max / (1-gamma) * sqrt(2 delta_max),
/// with delta_max the per-state maximum forward KL(new || old).
pub fn dv_oracle_upper(a_max: f64, gamma: f64, delta_max: f64) -> f64 {
    debug_assert!(delta_max >= 0.0);
    a_max / (1.0 - gamma) * (2.0 * delta_max).sqrt()
}

/// Radius allocations for a total KL budget: equal split, plus the
/// gain-weighted variant delta_i ~ gain_i^2 when per-step gains are known.
/// Any feasible allocation satisfies the Jensen penalty cap
/// sum_i sqrt(delta_i) <= sqrt(n * budget), with equality at the equal split.
#[derive(Debug, Clone, Serialize)]
pub struct Allocation {
    pub equal: Vec<f64>,
    pub gain_weighted: Option<Vec<f64>>,
}

pub fn kl_allocation(budget: f64, n: usize, gains: Option<&[f64]>) -> Result<Allocation> {
    if budget <= 0.0 || n == 0 {
        return Err(Error::Usage("budget must be positive over >= 1 steps".into()));
    }
    let equal = vec![budget / n as f64; n];
    let cap = (n as f64 * budget).sqrt();
    let check = |radii: &[f64]| {
        let s: f64 = radii.iter().map(|d| d.sqrt()).sum();
        assert!(s <= cap + 1e-12, "Jensen penalty cap violated: {s} > {cap}");
    };
    check(&equal);
    let gain_weighted = match gains {
        Some(g) => {
            if g.len() != n {
                return Err(Error::Usage("gains length must match step count".into()));
            }
            let total_sq: f64 = g.iter().map(|x| x * x).sum();
            if total_sq <= 0.0 {
                None
            } else {
                let w: Vec<f64> = g.iter().map(|x| budget * x * x / total_sq).collect();
                check(&w);
                Some(w)
            }
        }
        None => None,
    };
    Ok(Allocation {
        equal,
        gain_weighted,
    })
}

/// Closed-form maximizer of g . delta subject to (1/2) delta^T F delta <= r:
/// direction (F^-1 g) scaled to the boundary, value sqrt(2 r g^T F^-1 g).
pub fn lin_quad(g: &[f64], fisher_reg: &DMatrix<f64>, radius: f64) -> Result<(Vec<f64>, f64)> {
    let n = g.len();
    if fisher_reg.nrows() != n || fisher_reg.ncols() != n {
        return Err(Error::Usage("gradient/Fisher dimension mismatch".into()));
    }
    let gv = DVector::from_column_slice(g);
    if gv.amax() == 0.0 {
        return Ok((vec![0.0; n], 0.0));
    }
    let lu = fisher_reg.clone().lu();
    let sol = lu.solve(&gv).ok_or_else(|| {
        Error::Numerical("regularized Fisher is singular in lin_quad".into())
    })?;
    let quad_form = gv.dot(&sol);
    if quad_form <= 0.0 {
        return Err(Error::Numerical(
            "Fisher quadratic form not positive definite".into(),
        ));
    }
    let scale = (2.0 * radius / quad_form).sqrt();
    let direction: Vec<f64> = sol.iter().map(|x| x * scale).collect();
    let value = (2.0 * radius * quad_form).sqrt();
    Ok((direction, value))
}

/// Budget-aware stage lower bound: attainable local gains
/// kappa_i sqrt(delta_i) - a_i delta_i minus the occupancy, zeta, sampling,
/// and (optional) ratio-bias penalties.
#[allow(clippy::too_many_arguments)]
pub fn budget_lower_bound(
    kappas: &[f64],
    a_regs: &[f64],
    radii: &[f64],
    zetas: &[f64],
    n_groups: &[usize],
    cfg: &CertConfig,
    include_ratio_bias: bool,
) -> Result<f64> {
    let n = kappas.len();
    if n == 0
        || a_regs.len() != n
        || radii.len() != n
        || zetas.len() != n
        || n_groups.len() != n
    {
        return Err(Error::Usage("budget inputs must be equal non-zero length".into()));
    }
    let gain: f64 = kappas
        .iter()
        .zip(a_regs)
        .zip(radii)
        .map(|((k, a), d)| k * d.sqrt() - a * d)
        .sum();
    let occ = cfg.occ_coeff() * radii.iter().map(|d| d.sqrt()).sum::<f64>();
    let zeta: f64 = zetas.iter().map(|z| z / (1.0 - cfg.gamma)).sum();
    let sampling: f64 = n_groups
        .iter()
        .map(|ni| {
            cfg.b_sampling()
                * (2.0 * (2.0 * n as f64 / cfg.delta_conf).ln() / *ni as f64).sqrt()
        })
        .sum();
    let ratio_bias = if include_ratio_bias {
        radii
            .iter()
            .map(|d| cfg.a_clip / (1.0 - cfg.gamma) * (2.0 * d).sqrt())
            .sum()
    } else {
        0.0
    };
    Ok(gain - occ - zeta - sampling - ratio_bias)
}

/// Exact KL of a logit-row perturbation against its quadratic Fisher model:
/// returns (exact KL(pi_{z+dz} || pi_z), (1/2) dz^T F dz, residual).
pub fn klfisher_quadratic_check(
    agent: &AgentPolicy,
    state: &ContextState,
    env: &EnvConfig,
    perturbation: &[f64],
) -> Result<(f64, f64, f64)> {
    if env.msg_len_max != 1 {
        return Err(Error::Usage("quadratic check requires token mode".into()));
    }
    if perturbation.len() != agent.vocab {
        return Err(Error::Usage("perturbation dimension mismatch".into()));
    }
    let base = agent.logits_at(state, &[]);
    let mut shifted = agent.clone();
    let moved: Vec<f64> = base.iter().zip(perturbation).map(|(z, d)| z + d).collect();
    shifted.set_logits(state, &[], moved);
    // KL(new || old) in token mode.
    let kl = crate::policy::kl_statewise(&shifted, agent, state, env)?;
    let f = fisher_at(agent, state, env)?;
    let dv = DVector::from_column_slice(perturbation);
    let quad = 0.5 * dv.dot(&(&f * &dv));
    debug_assert!(quad >= -1e-12);
    Ok((kl, quad, kl - quad))
}

/// Both sides of E_{a~P}[|1 - w(a)|] = 2 TV(P, Q) with w = dQ/dP.
pub fn ratio_tv_identity_check(p: &[f64], q: &[f64]) -> Result<(f64, f64)> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Usage("distribution length mismatch".into()));
    }
    let mut lhs = 0.0;
    let mut tv = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi == 0.0 && *qi > 0.0 {
            return Err(Error::Usage(
                "Q is not absolutely continuous w.r.t. P".into(),
            ));
        }
        if *pi > 0.0 {
            lhs += pi * (1.0 - qi / pi).abs();
        }
        tv += (pi - qi).abs();
    }
    Ok((lhs, tv))
}

/// Ratio-clipping bias bound under the token-level trust region, in
/// surrogate units: (A_clip / (1-gamma)) sqrt(2 delta).
pub fn ratio_clip_bias_bound(delta: f64, a_clip: f64, gamma: f64) -> f64 {
    a_clip / (1.0 - gamma) * (2.0 * delta).sqrt()
}

/// Checks a measured |unclipped - clipped| surrogate difference against the
/// bound; `violated` is the soundness flag used by the bound suites.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RatioClipCheck {
    pub measured: f64,
    pub bound: f64,
    pub violated: bool,
}

pub fn ratio_clip_bias_tr(delta: f64, a_clip: f64, gamma: f64, measured: f64) -> RatioClipCheck {
    let bound = ratio_clip_bias_bound(delta, a_clip, gamma);
    RatioClipCheck {
        measured,
        bound,
        violated: measured > bound + 1e-10,
    }
}
