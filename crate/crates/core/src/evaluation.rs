//! Exact regularized policy evaluation, soft best response, exploitability and
//! the weighted-KL distance to a reference profile.
//!
//! With `R(p) = <p, log p>` the regularized value is
//! `V_h(s) = sum_a pi(a|s) [Q_h(s,a) - lambda log pi(a|s)]` and
//! `Q_h(s,a) = r_h(s,a,z_h) + sum_s' P_h(s'|s,a) V_{h+1}(s')`, `V_{H+1} = 0`.

use rayon::prelude::*;

use crate::error::{check_dim, GmfgError, Result};
use crate::game::GameSpec;
use crate::graphon::DiscreteGraphon;
use crate::meanfield::{compute_aggregates, induce_flow, AggregateField, DistributionFlow, PolicyProfile, StateField};

/// Tolerance for grouping near-maximal actions when `lambda = 0`.
pub const ARGMAX_TIE_TOL: f64 = 1e-12;

/// `q[i][h][s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QProfile {
    n_agents: usize,
    horizon: usize,
    n_states: usize,
    n_actions: usize,
    data: Vec<f64>,
}

impl QProfile {
    pub fn zeros(n_agents: usize, horizon: usize, n_states: usize, n_actions: usize) -> Self {
        Self { n_agents, horizon, n_states, n_actions, data: vec![0.0; n_agents * horizon * n_states * n_actions] }
    }

    pub fn from_vec(n_agents: usize, horizon: usize, n_states: usize, n_actions: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("q tensor", n_agents * horizon * n_states * n_actions, data.len())?;
        Ok(Self { n_agents, horizon, n_states, n_actions, data })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn n_states(&self) -> usize {
        self.n_states
    }
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        let len = self.agent_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn row(&self, i: usize, h: usize, s: usize) -> &[f64] {
        let start = ((i * self.horizon + h) * self.n_states + s) * self.n_actions;
        &self.data[start..start + self.n_actions]
    }

    pub fn row_mut(&mut self, i: usize, h: usize, s: usize) -> &mut [f64] {
        let start = ((i * self.horizon + h) * self.n_states + s) * self.n_actions;
        &mut self.data[start..start + self.n_actions]
    }

    pub(crate) fn agent_len(&self) -> usize {
        self.horizon * self.n_states * self.n_actions
    }

    pub(crate) fn agent_slices_mut(&mut self) -> rayon::slice::ChunksMut<'_, f64> {
        let len = self.agent_len();
        self.data.par_chunks_mut(len)
    }
}

/// Regularized values `v[i][h][s]` and cumulative rewards `J^i = <mu1, V_1^i>`.
#[derive(Debug, Clone, PartialEq)]
pub struct VProfile {
    pub values: StateField,
    pub cumulative: Vec<f64>,
}

/// `sum_a p(a) log p(a)`, with `0 log 0 = 0`.
pub fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum()
}

fn check_aggregates(game: &GameSpec, n_agents: usize, z: &AggregateField) -> Result<()> {
    check_dim("aggregate agents", n_agents, z.n_agents())?;
    check_dim("aggregate horizon", game.horizon(), z.horizon())?;
    check_dim("aggregate states", game.n_states(), z.n_states())
}

/// `sum_s' P_h(s'|s,a) next[s']`.
fn expected_next(game: &GameSpec, h: usize, s: usize, a: usize, next: Option<&[f64]>) -> f64 {
    match next {
        Some(v) => game.transition_row(h, s, a).iter().zip(v).map(|(p, x)| p * x).sum(),
        None => 0.0,
    }
}

/// Backward recursion for the regularized `Q` and `V` of `pi` against fixed
/// aggregates `z`.
///
/// Fails when `lambda > 0` and a reachable state has a zero-probability action:
/// the entropy term is then infinite for that state's log-policy.
pub fn eval_policy_exact(game: &GameSpec, pi: &PolicyProfile, z: &AggregateField) -> Result<(QProfile, VProfile)> {
    let n = pi.n_agents();
    pi.check_game(game, n)?;
    check_aggregates(game, n, z)?;
    let (hz, ns, na, lambda) = (game.horizon(), game.n_states(), game.n_actions(), game.lambda());

    if lambda > 0.0 {
        let flow = induce_flow(game, pi)?;
        for i in 0..n {
            for h in 0..hz {
                for s in 0..ns {
                    if flow.get(i, h)[s] > 0.0 && pi.row(i, h, s).iter().any(|&p| p == 0.0) {
                        return Err(GmfgError::Evaluation(format!(
                            "agent {i} has a zero action probability at reachable state {s}, step {h}, with lambda={lambda}"
                        )));
                    }
                }
            }
        }
    }

    let mut q = QProfile::zeros(n, hz, ns, na);
    let mut values = StateField::zeros(n, hz, ns);
    let q_len = q.agent_len();
    let v_len = hz * ns;
    let values_slice = values.as_mut_slice();
    q.data
        .par_chunks_mut(q_len)
        .zip(values_slice.par_chunks_mut(v_len))
        .enumerate()
        .for_each(|(i, (qi, vi))| {
            for h in (0..hz).rev() {
                let (cur_v, next_v) = vi.split_at_mut((h + 1) * ns);
                let next = if h + 1 < hz { Some(&next_v[..ns]) } else { None };
                let cur_v = &mut cur_v[h * ns..];
                let zh = z.get(i, h);
                for s in 0..ns {
                    let qrow = &mut qi[(h * ns + s) * na..(h * ns + s + 1) * na];
                    for (a, qv) in qrow.iter_mut().enumerate() {
                        *qv = game.reward(h, s, a, zh) + expected_next(game, h, s, a, next);
                    }
                    let prow = pi.row(i, h, s);
                    let mut v = 0.0;
                    for (&p, &qv) in prow.iter().zip(qrow.iter()) {
                        if p > 0.0 {
                            v += p * (qv - lambda * p.ln());
                        }
                    }
                    cur_v[s] = v;
                }
            }
        });
    let cumulative = (0..n)
        .map(|i| game.mu1().iter().zip(values.get(i, 0)).map(|(m, v)| m * v).sum())
        .collect();
    Ok((q, VProfile { values, cumulative }))
}

/// Optimal regularized policy against fixed aggregates.
///
/// For `lambda > 0` the maximizer is the softmax of `r + P V*` at temperature
/// `lambda` and `V*` is its log-sum-exp. For `lambda = 0` it is a hard max with
/// uniform weight over actions within [`ARGMAX_TIE_TOL`] of the best.
pub fn soft_best_response(game: &GameSpec, z: &AggregateField) -> Result<(PolicyProfile, VProfile)> {
    let n = z.n_agents();
    check_aggregates(game, n, z)?;
    let (hz, ns, na, lambda) = (game.horizon(), game.n_states(), game.n_actions(), game.lambda());
    let mut pi = PolicyProfile::uniform_for(game, n);
    let mut values = StateField::zeros(n, hz, ns);
    let p_len = hz * ns * na;
    let v_len = hz * ns;
    let values_slice = values.as_mut_slice();
    pi.as_mut_slice()
        .par_chunks_mut(p_len)
        .zip(values_slice.par_chunks_mut(v_len))
        .enumerate()
        .for_each(|(i, (pi_i, vi))| {
            let mut bracket = vec![0.0; na];
            for h in (0..hz).rev() {
                let (cur_v, next_v) = vi.split_at_mut((h + 1) * ns);
                let next = if h + 1 < hz { Some(&next_v[..ns]) } else { None };
                let cur_v = &mut cur_v[h * ns..];
                let zh = z.get(i, h);
                for s in 0..ns {
                    for (a, b) in bracket.iter_mut().enumerate() {
                        *b = game.reward(h, s, a, zh) + expected_next(game, h, s, a, next);
                    }
                    let prow = &mut pi_i[(h * ns + s) * na..(h * ns + s + 1) * na];
                    cur_v[s] = soft_max_row(&bracket, lambda, prow);
                }
            }
        });
    let cumulative = (0..n)
        .map(|i| game.mu1().iter().zip(values.get(i, 0)).map(|(m, v)| m * v).sum())
        .collect();
    Ok((pi, VProfile { values, cumulative }))
}

/// Writes the regularized argmax of `bracket` into `out` and returns the optimal value.
fn soft_max_row(bracket: &[f64], lambda: f64, out: &mut [f64]) -> f64 {
    let m = bracket.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lambda > 0.0 {
        let mut total = 0.0;
        for (o, &b) in out.iter_mut().zip(bracket) {
            *o = ((b - m) / lambda).exp();
            total += *o;
        }
        out.iter_mut().for_each(|o| *o /= total);
        m + lambda * total.ln()
    } else {
        let count = bracket.iter().filter(|&&b| b >= m - ARGMAX_TIE_TOL).count() as f64;
        for (o, &b) in out.iter_mut().zip(bracket) {
            *o = if b >= m - ARGMAX_TIE_TOL { 1.0 / count } else { 0.0 };
        }
        m
    }
}

/// Best-response gain averaged over agents, against the aggregates `z` that
/// `pi` induces. Callers that already hold `z` should use [`exploitability_against`].
pub fn exploitability(game: &GameSpec, graphon: &DiscreteGraphon, pi: &PolicyProfile) -> Result<f64> {
    pi.check_game(game, graphon.n_agents())?;
    let flow = induce_flow(game, pi)?;
    let z = compute_aggregates(&flow, graphon)?;
    exploitability_against(game, pi, &z)
}

/// `(1/N) sum_i (J_best^i - J_pi^i)` with both values taken against `z`.
pub fn exploitability_against(game: &GameSpec, pi: &PolicyProfile, z: &AggregateField) -> Result<f64> {
    let (_, best) = soft_best_response(game, z)?;
    let (_, own) = eval_policy_exact(game, pi, z)?;
    let n = pi.n_agents() as f64;
    Ok(best.cumulative.iter().zip(&own.cumulative).map(|(b, o)| b - o).sum::<f64>() / n)
}

/// `(1/N) sum_i sum_h sum_s mu_ref[i][h][s] KL(pi_ref[i][h][s] || pi[i][h][s])`.
pub fn kl_metric(pi: &PolicyProfile, pi_ref: &PolicyProfile, mu_ref: &DistributionFlow) -> Result<f64> {
    if !pi.same_shape(pi_ref) {
        return Err(GmfgError::Metric("policy and reference have different shapes".into()));
    }
    check_dim("reference flow agents", pi.n_agents(), mu_ref.n_agents())?;
    check_dim("reference flow horizon", pi.horizon(), mu_ref.horizon())?;
    check_dim("reference flow states", pi.n_states(), mu_ref.n_states())?;
    let mut total = 0.0;
    for i in 0..pi.n_agents() {
        for h in 0..pi.horizon() {
            let weights = mu_ref.get(i, h);
            for s in 0..pi.n_states() {
                let mut kl = 0.0;
                for (&r, &p) in pi_ref.row(i, h, s).iter().zip(pi.row(i, h, s)) {
                    if r > 0.0 {
                        if p <= 0.0 {
                            return Err(GmfgError::Metric(format!(
                                "policy of agent {i} puts zero mass where the reference does not (h={h}, s={s})"
                            )));
                        }
                        kl += r * (r / p).ln();
                    }
                }
                total += weights[s] * kl;
            }
        }
    }
    Ok(total / pi.n_agents() as f64)
}
