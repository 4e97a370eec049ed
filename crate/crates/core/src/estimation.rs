//! Sampled-agent episode collection and tabular fitted Q-evaluation.
//!
//! `n_sampled` agents sit at `i / n_sampled` for `i = 1..=n_sampled`, which is
//! grid agent `i * N / n_sampled` (1-based) when `n_sampled` divides `N`. They
//! follow a behavior policy while the rest of the population keeps `pi_t`; the
//! aggregates are those induced by `pi_t` alone.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, validation, GmfgError, Result};
use crate::evaluation::{neg_entropy, QProfile};
use crate::game::GameSpec;
use crate::meanfield::{AggregateField, PolicyProfile};

/// Policy run by the sampled agents while collecting data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BehaviorPolicySpec {
    #[default]
    Uniform,
    /// `(1 - epsilon) pi_t + epsilon Unif(A)`.
    EpsilonMix { epsilon: f64 },
}

impl BehaviorPolicySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Uniform => Ok(()),
            Self::EpsilonMix { epsilon } => {
                if *epsilon > 0.0 && *epsilon <= 1.0 {
                    Ok(())
                } else {
                    Err(validation(format!("behavior epsilon={epsilon} must lie in (0, 1]")))
                }
            }
        }
    }

    /// Writes the behavior action distribution for a target row into `out`.
    pub fn action_probs(&self, target: &[f64], out: &mut [f64]) {
        let u = 1.0 / target.len() as f64;
        match self {
            Self::Uniform => out.iter_mut().for_each(|o| *o = u),
            Self::EpsilonMix { epsilon } => {
                for (o, &p) in out.iter_mut().zip(target) {
                    *o = (1.0 - epsilon) * p + epsilon * u;
                }
            }
        }
    }

    /// Lower bound on every behavior action probability.
    pub fn min_prob(&self, n_actions: usize) -> f64 {
        match self {
            Self::Uniform => 1.0 / n_actions as f64,
            Self::EpsilonMix { epsilon } => epsilon / n_actions as f64,
        }
    }
}

/// Tabular action-value class with signed per-step clip bounds
/// `|f| <= (H - h + 1)(r_max + lambda log|A|)` (1-based `h`).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularFunctionClass {
    bounds: Vec<f64>,
}

impl TabularFunctionClass {
    pub fn for_game(game: &GameSpec) -> Self {
        Self { bounds: (0..game.horizon()).map(|h| game.value_bound(h)).collect() }
    }

    pub fn from_bounds(bounds: Vec<f64>) -> Result<Self> {
        if bounds.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(validation("clip bounds must be finite and nonnegative"));
        }
        Ok(Self { bounds })
    }

    pub fn horizon(&self) -> usize {
        self.bounds.len()
    }

    /// `(low_h, high_h)` for zero-based `h`.
    pub fn bounds(&self, h: usize) -> (f64, f64) {
        (-self.bounds[h], self.bounds[h])
    }

    pub fn clip(&self, h: usize, x: f64) -> f64 {
        x.clamp(-self.bounds[h], self.bounds[h])
    }
}

/// One recorded step of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

/// Transitions laid out `[sampled agent][episode][h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    /// Zero-based grid index of each sampled agent.
    pub agents: Vec<usize>,
    pub n_episodes: usize,
    pub horizon: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub seed: u64,
    /// Free-form tag of the policy that generated the aggregates, e.g. the iteration.
    pub policy_tag: String,
    pub transitions: Vec<Transition>,
}

/// One line of the batch dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct DumpRecord {
    i: usize,
    tau: usize,
    h: usize,
    s: usize,
    a: usize,
    r: f64,
    s_next: usize,
}

impl EpisodeBatch {
    pub fn n_sampled(&self) -> usize {
        self.agents.len()
    }

    pub fn episode(&self, k: usize, tau: usize) -> &[Transition] {
        let start = (k * self.n_episodes + tau) * self.horizon;
        &self.transitions[start..start + self.horizon]
    }

    /// Writes one JSON object per transition: `{"i","tau","h","s","a","r","s_next"}`,
    /// with `i` the 1-based sampled-agent index and `tau`, `h` 1-based as well.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for k in 0..self.n_sampled() {
            for tau in 0..self.n_episodes {
                for (h, t) in self.episode(k, tau).iter().enumerate() {
                    let rec = DumpRecord { i: k + 1, tau: tau + 1, h: h + 1, s: t.s, a: t.a, r: t.r, s_next: t.s_next };
                    serde_json::to_writer(&mut out, &rec)?;
                    out.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }

    /// Reads a dump written by [`EpisodeBatch::write_jsonl`] back into the
    /// transition tensor. Shape metadata is not part of the dump and is taken
    /// from `template`.
    pub fn read_jsonl<R: BufRead>(input: R, template: &EpisodeBatch) -> Result<EpisodeBatch> {
        let mut batch = EpisodeBatch { transitions: vec![Transition { s: 0, a: 0, r: 0.0, s_next: 0 }; template.transitions.len()], ..template.clone() };
        let mut seen = 0;
        for line in input.lines() {
            let line = line.map_err(|e| validation(format!("reading batch dump: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DumpRecord = serde_json::from_str(&line).map_err(|e| validation(format!("bad batch record: {e}")))?;
            if rec.i == 0 || rec.i > batch.n_sampled() || rec.tau == 0 || rec.tau > batch.n_episodes || rec.h == 0 || rec.h > batch.horizon {
                return Err(validation(format!("batch record index out of range: {line}")));
            }
            let idx = ((rec.i - 1) * batch.n_episodes + rec.tau - 1) * batch.horizon + rec.h - 1;
            batch.transitions[idx] = Transition { s: rec.s, a: rec.a, r: rec.r, s_next: rec.s_next };
            seen += 1;
        }
        check_dim("batch dump records", batch.transitions.len(), seen)?;
        Ok(batch)
    }
}

/// Zero-based grid indices of the sampled agents at `i / n_sampled`.
pub fn sampled_grid_agents(n_sampled: usize, n_total: usize) -> Result<Vec<usize>> {
    if n_sampled == 0 || n_sampled > n_total || n_total % n_sampled != 0 {
        return Err(GmfgError::Config(format!(
            "n_sampled={n_sampled} must be positive and divide the number of grid agents {n_total}"
        )));
    }
    let block = n_total / n_sampled;
    Ok((1..=n_sampled).map(|i| i * block - 1).collect())
}

/// Independent RNG for one sampled agent: the seed selects the key, the agent
/// selects the ChaCha stream, so serial and parallel sampling agree.
fn agent_stream(seed: u64, agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent as u64);
    rng
}

/// Inverse-CDF draw from a probability row.
fn draw(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding can leave `acc` a hair below 1; fall back to the last positive entry.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Rolls out `n_episodes` independent episodes for each sampled agent.
///
/// Each step consumes exactly two uniforms (action, next state) plus one for the
/// initial state, so the first `K` episodes of a `2K` batch equal a `K` batch.
pub fn sample_episodes(
    game: &GameSpec,
    pi_t: &PolicyProfile,
    behavior: &BehaviorPolicySpec,
    z_t: &AggregateField,
    n_sampled: usize,
    n_episodes: usize,
    rng_seed: u64,
) -> Result<EpisodeBatch> {
    behavior.validate()?;
    let n = pi_t.n_agents();
    pi_t.check_game(game, n)?;
    check_dim("aggregate agents", n, z_t.n_agents())?;
    check_dim("aggregate horizon", game.horizon(), z_t.horizon())?;
    check_dim("aggregate states", game.n_states(), z_t.n_states())?;
    if n_episodes == 0 {
        return Err(validation("number of episodes must be positive"));
    }
    let agents = sampled_grid_agents(n_sampled, n)?;
    let (hz, na) = (game.horizon(), game.n_actions());
    let per_agent = n_episodes * hz;
    let mut transitions = vec![Transition { s: 0, a: 0, r: 0.0, s_next: 0 }; n_sampled * per_agent];
    transitions.par_chunks_mut(per_agent).enumerate().for_each(|(k, out)| {
        let i = agents[k];
        let mut rng = agent_stream(rng_seed, k);
        let mut probs = vec![0.0; na];
        for tau in 0..n_episodes {
            let mut s = draw(game.mu1(), rng.random::<f64>());
            for h in 0..hz {
                behavior.action_probs(pi_t.row(i, h, s), &mut probs);
                let a = draw(&probs, rng.random::<f64>());
                let r = game.reward(h, s, a, z_t.get(i, h));
                let s_next = draw(game.transition_row(h, s, a), rng.random::<f64>());
                out[tau * hz + h] = Transition { s, a, r, s_next };
                s = s_next;
            }
        }
    });
    Ok(EpisodeBatch {
        agents,
        n_episodes,
        horizon: hz,
        n_states: game.n_states(),
        n_actions: na,
        seed: rng_seed,
        policy_tag: String::new(),
        transitions,
    })
}

/// Fitted action values for the sampled agents plus per-cell visit counts
/// (`visits[k][h][s][a]`, zero means the cell defaulted to 0).
#[derive(Debug, Clone, PartialEq)]
pub struct FittedQ {
    pub q: QProfile,
    pub visits: Vec<u32>,
}

impl FittedQ {
    pub fn visits(&self, k: usize, h: usize, s: usize, a: usize) -> u32 {
        let (hz, ns, na) = (self.q.horizon(), self.q.n_states(), self.q.n_actions());
        self.visits[((k * hz + h) * ns + s) * na + a]
    }

    pub fn is_visited(&self, k: usize, h: usize, s: usize, a: usize) -> bool {
        self.visits(k, h, s, a) > 0
    }
}

/// Backward least squares over the tabular class: each visited cell takes the
/// mean of `r + V_hat_{h+1}(s')`, clipped to the class bounds, and
/// `V_hat_h(s) = <Q_hat_h(s,.), pi> - lambda R(pi)`.
pub fn fitted_q_evaluation(
    batch: &EpisodeBatch,
    pi_t: &PolicyProfile,
    lambda: f64,
    class: &TabularFunctionClass,
) -> Result<FittedQ> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(validation(format!("lambda={lambda} must be finite and nonnegative")));
    }
    check_dim("policy horizon", batch.horizon, pi_t.horizon())?;
    check_dim("policy states", batch.n_states, pi_t.n_states())?;
    check_dim("policy actions", batch.n_actions, pi_t.n_actions())?;
    check_dim("function class horizon", batch.horizon, class.horizon())?;
    if let Some(&bad) = batch.agents.iter().find(|&&i| i >= pi_t.n_agents()) {
        return Err(validation(format!("batch agent {bad} outside the policy profile")));
    }
    let (hz, ns, na) = (batch.horizon, batch.n_states, batch.n_actions);
    let ns_ = batch.n_sampled();
    let mut q = QProfile::zeros(ns_, hz, ns, na);
    let mut visits = vec![0u32; ns_ * hz * ns * na];
    let cell_len = hz * ns * na;
    q.agent_slices_mut()
        .zip(visits.par_chunks_mut(cell_len))
        .enumerate()
        .for_each(|(k, (qk, vk))| {
            let i = batch.agents[k];
            let mut sums = vec![0.0; ns * na];
            let mut v_next = vec![0.0; ns];
            let mut v_cur = vec![0.0; ns];
            for h in (0..hz).rev() {
                sums.iter_mut().for_each(|x| *x = 0.0);
                let counts = &mut vk[h * ns * na..(h + 1) * ns * na];
                for tau in 0..batch.n_episodes {
                    let t = batch.episode(k, tau)[h];
                    let target = t.r + if h + 1 < hz { v_next[t.s_next] } else { 0.0 };
                    sums[t.s * na + t.a] += target;
                    counts[t.s * na + t.a] += 1;
                }
                let qh = &mut qk[h * ns * na..(h + 1) * ns * na];
                for c in 0..ns * na {
                    qh[c] = if counts[c] > 0 { class.clip(h, sums[c] / counts[c] as f64) } else { 0.0 };
                }
                for s in 0..ns {
                    let p = pi_t.row(i, h, s);
                    let inner: f64 = p.iter().zip(&qh[s * na..(s + 1) * na]).map(|(a, b)| a * b).sum();
                    v_cur[s] = inner - lambda * neg_entropy(p);
                }
                std::mem::swap(&mut v_cur, &mut v_next);
            }
        });
    Ok(FittedQ { q, visits })
}

/// Spreads sampled estimates over the grid: grid agent `j` (1-based, at `j/N`)
/// takes sampled agent `i` with `j/N` in `((i-1)/N_s, i/N_s]`, i.e. `i = ceil(j N_s / N)`.
pub fn assign_estimates(q_sampled: &QProfile, n_total: usize) -> Result<QProfile> {
    let ns_ = q_sampled.n_agents();
    if ns_ == 0 || n_total == 0 || ns_ > n_total {
        return Err(validation(format!("cannot assign {ns_} sampled agents to {n_total} grid agents")));
    }
    let len = q_sampled.agent_len();
    let mut data = Vec::with_capacity(n_total * len);
    for j in 1..=n_total {
        let i = (j * ns_).div_ceil(n_total);
        data.extend_from_slice(q_sampled.agent(i - 1));
    }
    QProfile::from_vec(n_total, q_sampled.horizon(), q_sampled.n_states(), q_sampled.n_actions(), data)
}
