//! Exact discounted occupancy, value, return, and advantage computation on
//! the enumerated state space.
//!
//! Everything here is a pure function of immutable inputs and serves as the
//! ground-truth oracle for the certificate tests: occupancies solve the
//! fixed point d = (1-gamma) mu + gamma P^T d by a direct dense solve, and
//! values solve V = r + gamma P V. Terminal states are absorbing with zero
//! self-loop reward, which makes the infinite-horizon sums exact despite
//! the context cap.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::env::{enumerate_states, step, ContextState, EnvConfig, Router, StateSpace, Token};
use crate::error::{Error, Result};
use crate::policy::TeamPolicy;

/// Residual tolerance for the occupancy fixed point and value solves.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-9;

/// Exact discounted state-visitation distribution.
#[derive(Debug, Clone)]
pub struct OccupancyMeasure {
    pub dist: Vec<f64>,
    pub gamma: f64,
}

impl OccupancyMeasure {
    /// Expectation of a state function under the occupancy.
    pub fn expectation(&self, f: &[f64]) -> f64 {
        self.dist.iter().zip(f).map(|(d, v)| d * v).sum()
    }

    /// CSV (schema v1): index, mass.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("schema_version,index,occupancy\n");
        for (i, d) in self.dist.iter().enumerate() {
            let _ = writeln!(out, "1,{i},{d}");
        }
        out
    }
}

/// Exact V, Q, A tables over (state, message).
#[derive(Debug, Clone)]
pub struct ValueTable {
    pub v: Vec<f64>,
    /// q[state][message-index]; empty row at terminal states.
    pub q: Vec<Vec<f64>>,
    pub adv: Vec<Vec<f64>>,
    pub a_max_observed: f64,
}

impl ValueTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("schema_version,index,value,max_abs_advantage\n");
        for (i, v) in self.v.iter().enumerate() {
            let amax = self.adv[i].iter().map(|a| a.abs()).fold(0.0, f64::max);
            let _ = writeln!(out, "1,{i},{v},{amax}");
        }
        out
    }
}

/// Packages an environment with its enumeration and precomputed
/// (policy-independent) transition table. Shared read-only by everything
/// that needs exact evaluation.
pub struct Evaluator {
    pub env: EnvConfig,
    pub router: Router,
    pub space: StateSpace,
    pub messages: Vec<Vec<Token>>,
    /// Per non-terminal state: (next state index, reward) per message,
    /// aligned with `messages`.
    transitions: Vec<Vec<(usize, f64)>>,
    /// Initial distribution over enumerated states.
    pub mu: Vec<f64>,
}

impl Evaluator {
    pub fn new(env: &EnvConfig, router: &Router) -> Result<Evaluator> {
        let space = enumerate_states(env, router)?;
        let messages = env.enumerate_messages();
        let mut transitions = Vec::with_capacity(space.len());
        for s in &space.states {
            if s.terminal {
                transitions.push(Vec::new());
                continue;
            }
            let mut row = Vec::with_capacity(messages.len());
            for m in &messages {
                let (next, r) = step(s, m, env)?;
                row.push((space.index_of(&next)?, r));
            }
            transitions.push(row);
        }
        let mut mu = vec![0.0; space.len()];
        for (ctx, p) in env.initial_contexts.iter().zip(&env.initial_probs) {
            let s = ContextState::initial(ctx.clone(), env);
            mu[space.index_of(&s)?] += p;
        }
        Ok(Evaluator {
            env: env.clone(),
            router: router.clone(),
            space,
            messages,
            transitions,
            mu,
        })
    }

    pub fn n_states(&self) -> usize {
        self.space.len()
    }

    /// Deterministic transition target and reward for (state, message).
    pub fn transition(&self, state_idx: usize, msg_idx: usize) -> (usize, f64) {
        self.transitions[state_idx][msg_idx]
    }

    fn check_team(&self, team: &TeamPolicy) -> Result<()> {
        if team.n_agents() != self.env.n_agents {
            return Err(Error::Usage(format!(
                "team has {} agents but env expects {}",
                team.n_agents(),
                self.env.n_agents
            )));
        }
        Ok(())
    }

    /// Message distribution of the active agent at an enumerated state,
    /// aligned with `self.messages`.
    pub fn message_probs(&self, team: &TeamPolicy, state_idx: usize) -> Result<Vec<f64>> {
        let state = self.space.state(state_idx);
        let agent = team.active(state, &self.env)?;
        self.messages
            .iter()
            .map(|m| agent.message_logprob(state, m, &self.env).map(f64::exp))
            .collect()
    }

    /// Induced state-transition matrix P_pi (row-stochastic; terminal rows
    /// self-absorbing).
    pub fn induced_kernel(&self, team: &TeamPolicy) -> Result<DMatrix<f64>> {
        self.check_team(team)?;
        let n = self.n_states();
        let mut p = DMatrix::zeros(n, n);
        for s in 0..n {
            if self.space.state(s).terminal {
                p[(s, s)] = 1.0;
                continue;
            }
            let probs = self.message_probs(team, s)?;
            for (m, pm) in probs.iter().enumerate() {
                let (next, _r) = self.transitions[s][m];
                p[(s, next)] += pm;
            }
        }
        Ok(p)
    }

    /// Expected one-step reward per state under the team.
    pub fn reward_vector(&self, team: &TeamPolicy) -> Result<DVector<f64>> {
        self.check_team(team)?;
        let n = self.n_states();
        let mut r = DVector::zeros(n);
        for s in 0..n {
            if self.space.state(s).terminal {
                continue;
            }
            let probs = self.message_probs(team, s)?;
            r[s] = probs
                .iter()
                .enumerate()
                .map(|(m, pm)| pm * self.transitions[s][m].1)
                .sum();
        }
        Ok(r)
    }

    /// Solves the occupancy fixed point d = (1-gamma) mu + gamma P^T d.
    pub fn exact_occupancy(&self, team: &TeamPolicy) -> Result<OccupancyMeasure> {
        let gamma = self.env.gamma;
        let p = self.induced_kernel(team)?;
        let n = self.n_states();
        let a = DMatrix::identity(n, n) - p.transpose() * gamma;
        let b = DVector::from_iterator(n, self.mu.iter().map(|m| m * (1.0 - gamma)));
        let lu = a.clone().lu();
        let d = lu.solve(&b).ok_or_else(|| {
            Error::Numerical(format!(
                "occupancy solve failed on {n} states (singular I - gamma P^T)"
            ))
        })?;
        let residual = (&a * &d - &b).amax();
        if residual > SOLVE_RESIDUAL_TOL {
            return Err(Error::Numerical(format!(
                "occupancy fixed-point residual {residual:.3e} exceeds {SOLVE_RESIDUAL_TOL:.0e}"
            )));
        }
        let dist: Vec<f64> = d.iter().copied().collect();
        debug_assert!(dist.iter().all(|x| *x >= -1e-12));
        debug_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Ok(OccupancyMeasure { dist, gamma })
    }

    /// Exact discounted return J(team).
    pub fn exact_return(&self, team: &TeamPolicy) -> Result<f64> {
        let gamma = self.env.gamma;
        let p = self.induced_kernel(team)?;
        let r = self.reward_vector(team)?;
        let n = self.n_states();
        let a = DMatrix::identity(n, n) - p * gamma;
        let v = a
            .lu()
            .solve(&r)
            .ok_or_else(|| Error::Numerical("value solve failed".into()))?;
        let j: f64 = self.mu.iter().zip(v.iter()).map(|(m, v)| m * v).sum();
        debug_assert!(j.abs() <= self.env.r_max / (1.0 - gamma) + 1e-9);
        Ok(j)
    }

    /// Exact Q, V, A with the centering invariant checked per state.
    pub fn exact_advantage(&self, team: &TeamPolicy) -> Result<ValueTable> {
        let gamma = self.env.gamma;
        let p = self.induced_kernel(team)?;
        let r = self.reward_vector(team)?;
        let n = self.n_states();
        let a_mat = DMatrix::identity(n, n) - p * gamma;
        let v = a_mat
            .lu()
            .solve(&r)
            .ok_or_else(|| Error::Numerical("value solve failed".into()))?;

        let mut q = Vec::with_capacity(n);
        let mut adv = Vec::with_capacity(n);
        let mut a_max = 0.0f64;
        for s in 0..n {
            if self.space.state(s).terminal {
                q.push(Vec::new());
                adv.push(Vec::new());
                continue;
            }
            let probs = self.message_probs(team, s)?;
            let mut qs = Vec::with_capacity(self.messages.len());
            let mut advs = Vec::with_capacity(self.messages.len());
            let mut centered = 0.0;
            for (m, _msg) in self.messages.iter().enumerate() {
                let (next, rew) = self.transitions[s][m];
                let qv = rew + gamma * v[next];
                let av = qv - v[s];
                centered += probs[m] * av;
                a_max = a_max.max(av.abs());
                qs.push(qv);
                advs.push(av);
            }
            if centered.abs() > 1e-9 {
                return Err(Error::Numerical(format!(
                    "advantage centering violated at state {s}: {centered:.3e}"
                )));
            }
            q.push(qs);
            adv.push(advs);
        }
        debug_assert!(a_max <= 2.0 * self.env.r_max / (1.0 - gamma) + 1e-9);
        Ok(ValueTable {
            v: v.iter().copied().collect(),
            q,
            adv,
            a_max_observed: a_max,
        })
    }

    /// Expected undiscounted visit counts of the transient (non-terminal)
    /// states: rho = mu + P^T rho restricted to the transient block. This is
    /// the state weighting behind flat per-message monitors, as opposed to
    /// the discounted occupancy behind the certificates.
    pub fn reach_weights(&self, team: &TeamPolicy) -> Result<Vec<f64>> {
        let p = self.induced_kernel(team)?;
        let n = self.n_states();
        let transient: Vec<usize> = (0..n)
            .filter(|s| !self.space.state(*s).terminal)
            .collect();
        let m = transient.len();
        if m == 0 {
            return Ok(vec![0.0; n]);
        }
        let mut a = DMatrix::identity(m, m);
        for (i, &si) in transient.iter().enumerate() {
            for (j, &sj) in transient.iter().enumerate() {
                a[(i, j)] -= p[(sj, si)];
            }
        }
        let b = DVector::from_iterator(m, transient.iter().map(|&s| self.mu[s]));
        let rho = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Numerical("reach-weight solve failed".into()))?;
        let mut out = vec![0.0; n];
        for (i, &s) in transient.iter().enumerate() {
            out[s] = rho[i];
        }
        Ok(out)
    }

    /// Exact performance-difference value
    /// (1/(1-gamma)) E_{s ~ d^new, m ~ new}[A^old(s, m)],
    /// which equals J(new) - J(old).
    pub fn performance_difference(&self, new: &TeamPolicy, old: &TeamPolicy) -> Result<f64> {
        let d_new = self.exact_occupancy(new)?;
        let a_old = self.exact_advantage(old)?;
        self.surrogate_from(&d_new, &a_old, new)
    }

    /// Generic exact surrogate (1/(1-gamma)) E_{s ~ d, m ~ team}[adv(s, m)]
    /// for an arbitrary reference occupancy and advantage table. Terminal
    /// states contribute zero (their advantage is identically zero).
    pub fn surrogate_from(
        &self,
        d: &OccupancyMeasure,
        adv: &ValueTable,
        team: &TeamPolicy,
    ) -> Result<f64> {
        let mut total = 0.0;
        for s in 0..self.n_states() {
            if self.space.state(s).terminal || d.dist[s] == 0.0 {
                continue;
            }
            let probs = self.message_probs(team, s)?;
            let inner: f64 = probs
                .iter()
                .zip(&adv.adv[s])
                .map(|(p, a)| p * a)
                .sum();
            total += d.dist[s] * inner;
        }
        Ok(total / (1.0 - self.env.gamma))
    }

    /// Like `surrogate_from` but with the advantage estimator clipped to
    /// +/- a_clip and the likelihood ratio optionally clipped to
    /// [1-eps, 1+eps]; used by the ratio-clipping bias checks. Evaluated in
    /// importance-weighted form under the behavior team's actions.
    pub fn clipped_surrogate_from(
        &self,
        d: &OccupancyMeasure,
        adv: &ValueTable,
        behavior: &TeamPolicy,
        new: &TeamPolicy,
        a_clip: f64,
        ratio_eps: Option<f64>,
    ) -> Result<f64> {
        let mut total = 0.0;
        for s in 0..self.n_states() {
            if self.space.state(s).terminal || d.dist[s] == 0.0 {
                continue;
            }
            let pb = self.message_probs(behavior, s)?;
            let pn = self.message_probs(new, s)?;
            let mut inner = 0.0;
            for m in 0..self.messages.len() {
                let w = pn[m] / pb[m];
                let w_used = match ratio_eps {
                    Some(eps) => w.clamp(1.0 - eps, 1.0 + eps),
                    None => w,
                };
                let a = adv.adv[s][m].clamp(-a_clip, a_clip);
                inner += pb[m] * w_used * a;
            }
            total += d.dist[s] * inner;
        }
        Ok(total / (1.0 - self.env.gamma))
    }
}

/// Convenience: evaluator plus uniform team for an env/router pair.
pub fn evaluator_and_uniform_team(env: &EnvConfig, router: &Router) -> Result<(Evaluator, TeamPolicy)> {
    let eval = Evaluator::new(env, router)?;
    let team = TeamPolicy::uniform(env, router.clone());
    Ok((eval, team))
}

/// Map from state key to index for external callers that only hold states.
pub fn index_map(space: &StateSpace) -> BTreeMap<(Vec<Token>, u32), usize> {
    space
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.key(), i))
        .collect()
}


#[cfg(test)]
mod csv_tests {
    use super::*;
    use crate::env::{PatternReward, RewardSpec, Router};

    #[test]
    fn occupancy_and_value_csv_export() {
        let env = EnvConfig {
            vocab_size: 2,
            msg_len_max: 1,
            ctx_len_max: 2,
            n_agents: 1,
            gamma: 0.5,
            r_max: 1.0,
            state_cap: 100,
            initial_contexts: vec![vec![]],
            initial_probs: vec![1.0],
            reward: RewardSpec::TerminalPattern {
                patterns: vec![PatternReward {
                    suffix: vec![1, 1],
                    reward: 1.0,
                }],
            },
        };
        let eval = Evaluator::new(&env, &Router::RoundRobin).unwrap();
        let team = crate::policy::TeamPolicy::uniform(&env, Router::RoundRobin);
        let occ = eval.exact_occupancy(&team).unwrap();
        let csv = occ.to_csv();
        assert!(csv.starts_with("schema_version,index,occupancy\n"));
        assert_eq!(csv.lines().count(), 1 + eval.n_states());
        let table = eval.exact_advantage(&team).unwrap();
        let csv = table.to_csv();
        assert!(csv.starts_with("schema_version,index,value,max_abs_advantage\n"));
        assert_eq!(csv.lines().count(), 1 + eval.n_states());
    }
}
