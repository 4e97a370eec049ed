//! Policy profiles, the distribution flows they induce, and graphon aggregates.

use rayon::prelude::*;

use crate::error::{check_dim, validation, Result};
use crate::game::GameSpec;
use crate::graphon::DiscreteGraphon;

const PROB_TOL: f64 = 1e-12;

/// `pi[i][h][s][a]`, one stochastic policy per agent and step.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyProfile {
    n_agents: usize,
    horizon: usize,
    n_states: usize,
    n_actions: usize,
    data: Vec<f64>,
}

impl PolicyProfile {
    pub fn uniform(n_agents: usize, horizon: usize, n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self { n_agents, horizon, n_states, n_actions, data: vec![p; n_agents * horizon * n_states * n_actions] }
    }

    /// Uniform profile sized for `game` and `n_agents`.
    pub fn uniform_for(game: &GameSpec, n_agents: usize) -> Self {
        Self::uniform(n_agents, game.horizon(), game.n_states(), game.n_actions())
    }

    /// Wraps raw `[i][h][s][a]` data, checking every row is a probability vector.
    pub fn from_vec(
        n_agents: usize,
        horizon: usize,
        n_states: usize,
        n_actions: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        check_dim("policy tensor", n_agents * horizon * n_states * n_actions, data.len())?;
        let p = Self { n_agents, horizon, n_states, n_actions, data };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, row) in self.data.chunks(self.n_actions).enumerate() {
            if row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(validation(format!("policy row {k} has a negative or non-finite entry")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(validation(format!("policy row {k} sums to {total}")));
            }
        }
        Ok(())
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

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// All `[h][s][a]` entries of agent `i`.
    pub fn agent(&self, i: usize) -> &[f64] {
        let len = self.horizon * self.n_states * self.n_actions;
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

    pub(crate) fn same_shape(&self, other: &Self) -> bool {
        (self.n_agents, self.horizon, self.n_states, self.n_actions)
            == (other.n_agents, other.horizon, other.n_states, other.n_actions)
    }

    /// Checks the profile fits `game` with `n_agents` agents.
    pub fn check_game(&self, game: &GameSpec, n_agents: usize) -> Result<()> {
        check_dim("policy agents", n_agents, self.n_agents)?;
        check_dim("policy horizon", game.horizon(), self.horizon)?;
        check_dim("policy states", game.n_states(), self.n_states)?;
        check_dim("policy actions", game.n_actions(), self.n_actions)
    }

    /// Same-shape copy with replaced data, no validation.
    pub(crate) fn clone_shape(&self, data: Vec<f64>) -> Self {
        Self { n_agents: self.n_agents, horizon: self.horizon, n_states: self.n_states, n_actions: self.n_actions, data }
    }
}

/// Per-agent, per-step values over states: `[i][h][s]`. Used for both the
/// distribution flow and the aggregate field.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    n_agents: usize,
    horizon: usize,
    n_states: usize,
    data: Vec<f64>,
}

impl StateField {
    pub fn zeros(n_agents: usize, horizon: usize, n_states: usize) -> Self {
        Self { n_agents, horizon, n_states, data: vec![0.0; n_agents * horizon * n_states] }
    }

    pub fn from_vec(n_agents: usize, horizon: usize, n_states: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("state field", n_agents * horizon * n_states, data.len())?;
        Ok(Self { n_agents, horizon, n_states, data })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, h: usize) -> &[f64] {
        let start = (i * self.horizon + h) * self.n_states;
        &self.data[start..start + self.n_states]
    }

    pub fn get_mut(&mut self, i: usize, h: usize) -> &mut [f64] {
        let start = (i * self.horizon + h) * self.n_states;
        &mut self.data[start..start + self.n_states]
    }

    fn agent_len(&self) -> usize {
        self.horizon * self.n_states
    }
}

/// `mu[i][h][s]`: state marginals of each agent.
pub type DistributionFlow = StateField;

/// `z[i][h][s]`: graphon-weighted average of the other agents' marginals.
pub type AggregateField = StateField;

/// Propagates `mu1` forward under each agent's policy. Transitions ignore the
/// aggregate, so agents are independent.
pub fn induce_flow(game: &GameSpec, pi: &PolicyProfile) -> Result<DistributionFlow> {
    pi.check_game(game, pi.n_agents())?;
    let (hz, ns, na) = (game.horizon(), game.n_states(), game.n_actions());
    let mut flow = StateField::zeros(pi.n_agents(), hz, ns);
    let agent_len = flow.agent_len();
    flow.data.par_chunks_mut(agent_len).enumerate().for_each(|(i, mu)| {
        mu[..ns].copy_from_slice(game.mu1());
        for h in 0..hz.saturating_sub(1) {
            let (cur, next) = mu[h * ns..(h + 2) * ns].split_at_mut(ns);
            next.iter_mut().for_each(|v| *v = 0.0);
            for s in 0..ns {
                let mass = cur[s];
                if mass == 0.0 {
                    continue;
                }
                let row = pi.row(i, h, s);
                for a in 0..na {
                    let w = mass * row[a];
                    if w == 0.0 {
                        continue;
                    }
                    for (n, p) in next.iter_mut().zip(game.transition_row(h, s, a)) {
                        *n += w * p;
                    }
                }
            }
        }
    });
    Ok(flow)
}

/// `z[i][h][s] = (1/N) sum_j W_h[i][j] mu[j][h][s]`, summed in agent order.
pub fn compute_aggregates(mu: &DistributionFlow, graphon: &DiscreteGraphon) -> Result<AggregateField> {
    check_dim("flow agents vs graphon", graphon.n_agents(), mu.n_agents())?;
    check_dim("flow horizon vs graphon", graphon.horizon(), mu.horizon())?;
    let (n, hz, ns) = (mu.n_agents(), mu.horizon(), mu.n_states());
    let mut z = StateField::zeros(n, hz, ns);
    let agent_len = z.agent_len();
    let inv_n = 1.0 / n as f64;
    z.data.par_chunks_mut(agent_len).enumerate().for_each(|(i, zi)| {
        for h in 0..hz {
            let out = &mut zi[h * ns..(h + 1) * ns];
            for (j, &w) in graphon.row(h, i).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, m) in out.iter_mut().zip(mu.get(j, h)) {
                    *o += w * m;
                }
            }
            out.iter_mut().for_each(|v| *v *= inv_n);
        }
    });
    Ok(z)
}
