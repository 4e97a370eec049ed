//! Policy mirror descent for regularized graphon mean-field games.
//!
//! Each iteration evaluates `pi_t` on the game induced by its own flow, takes
//! the step `pi_hat ∝ pi_t^(1 - lambda eta) exp(eta Q)` and mixes with the
//! uniform policy. The returned average is the pointwise mean of the iterates
//! produced by the steps, `pi_2 ..= pi_{T+1}`.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, GmfgError, Result};
use crate::estimation::{assign_estimates, fitted_q_evaluation, sample_episodes, BehaviorPolicySpec, TabularFunctionClass};
use crate::evaluation::{eval_policy_exact, exploitability, QProfile};
use crate::game::GameSpec;
use crate::graphon::DiscreteGraphon;
use crate::meanfield::{compute_aggregates, induce_flow, PolicyProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QSource {
    #[default]
    Oracle,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Discounts the previous policy by `1 - lambda eta`.
    #[default]
    Regularized,
    /// Keeps the previous policy undiscounted while still evaluating the regularized game.
    Unregularized,
}

/// Sampling parameters used when `q_source = estimated`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub n_sampled: usize,
    pub episodes: usize,
    pub behavior: BehaviorPolicySpec,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self { n_sampled: 10, episodes: 300, behavior: BehaviorPolicySpec::Uniform }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PMDConfig {
    pub iterations: usize,
    /// Fixed step size; defaults to `eta_scale / sqrt(T)`.
    pub eta: Option<f64>,
    /// Fixed mixing weight; defaults to `beta_scale / T`.
    pub beta: Option<f64>,
    pub eta_scale: f64,
    pub beta_scale: f64,
    /// Overrides the game's regularization strength when set.
    pub lambda: Option<f64>,
    pub q_source: QSource,
    pub baseline: Baseline,
    pub estimation: EstimationConfig,
    pub rng_seed: u64,
    /// Exploitability is recorded every `exploit_stride` iterations and at `T`.
    pub exploit_stride: usize,
}

impl Default for PMDConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            eta: None,
            beta: None,
            eta_scale: 1.0,
            beta_scale: 1.0,
            lambda: None,
            q_source: QSource::Oracle,
            baseline: Baseline::Regularized,
            estimation: EstimationConfig::default(),
            rng_seed: 0,
            exploit_stride: 1,
        }
    }
}

impl PMDConfig {
    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(self.eta_scale / (self.iterations as f64).sqrt())
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(self.beta_scale / self.iterations as f64)
    }

    /// Checks the config on its own and against the game it will run on.
    pub fn validate(&self, game: &GameSpec) -> Result<()> {
        if self.iterations == 0 {
            return Err(GmfgError::Config("iterations must be positive".into()));
        }
        if self.exploit_stride == 0 {
            return Err(GmfgError::Config("exploit_stride must be positive".into()));
        }
        let (eta, beta) = (self.eta(), self.beta());
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(GmfgError::Config(format!("eta={eta} must be finite and nonnegative")));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(GmfgError::Config(format!("beta={beta} must lie in [0, 1)")));
        }
        let lambda = self.lambda.unwrap_or(game.lambda());
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(GmfgError::Config(format!("lambda={lambda} must be finite and nonnegative")));
        }
        if lambda * eta >= 1.0 {
            return Err(GmfgError::Config(format!("lambda*eta = {} must be below 1", lambda * eta)));
        }
        if self.q_source == QSource::Estimated {
            if self.estimation.n_sampled == 0 || self.estimation.episodes == 0 {
                return Err(GmfgError::Config("estimation needs n_sampled > 0 and episodes > 0".into()));
            }
            self.estimation.behavior.validate().map_err(|e| GmfgError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// One row of the convergence trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub exploitability_last: f64,
    pub exploitability_avg: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct PmdOutput {
    pub trace: Vec<IterationRecord>,
    pub avg_policy: PolicyProfile,
    pub last_policy: PolicyProfile,
}

/// One mirror-descent step followed by uniform mixing.
pub fn pmd_step(pi_t: &PolicyProfile, q_hat: &QProfile, eta: f64, beta: f64, lambda: f64) -> Result<PolicyProfile> {
    if !(lambda >= 0.0 && eta >= 0.0 && lambda * eta < 1.0) {
        return Err(GmfgError::Config(format!("lambda={lambda}, eta={eta}: need lambda*eta < 1")));
    }
    if lambda > 0.0 && pi_t.as_slice().iter().any(|&p| p <= 0.0) {
        return Err(GmfgError::Step("policy has a zero entry while lambda > 0".into()));
    }
    step_with_exponent(pi_t, q_hat, eta, beta, 1.0 - lambda * eta)
}

fn step_with_exponent(pi_t: &PolicyProfile, q_hat: &QProfile, eta: f64, beta: f64, exponent: f64) -> Result<PolicyProfile> {
    if !(0.0..1.0).contains(&beta) {
        return Err(GmfgError::Config(format!("beta={beta} must lie in [0, 1)")));
    }
    if q_hat.n_agents() != pi_t.n_agents()
        || q_hat.horizon() != pi_t.horizon()
        || q_hat.n_states() != pi_t.n_states()
        || q_hat.n_actions() != pi_t.n_actions()
    {
        return Err(validation("action values and policy have different shapes"));
    }
    let na = pi_t.n_actions();
    let floor = beta / na as f64;
    let mut out = vec![0.0; pi_t.as_slice().len()];
    out.par_chunks_mut(na)
        .zip(pi_t.as_slice().par_chunks(na))
        .zip(q_hat.as_slice().par_chunks(na))
        .for_each(|((o, p), q)| {
            // log-domain: exponent * ln p + eta q, shifted by its max.
            for ((o, &p), &q) in o.iter_mut().zip(p).zip(q) {
                *o = if p > 0.0 { exponent * p.ln() + eta * q } else { f64::NEG_INFINITY };
            }
            let m = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in o.iter_mut() {
                *x = (*x - m).exp();
                total += *x;
            }
            for x in o.iter_mut() {
                *x = (1.0 - beta) * (*x / total) + floor;
            }
        });
    Ok(pi_t.clone_shape(out))
}

/// Pointwise mean of a nonempty history of same-shaped profiles.
pub fn average_policies(history: &[PolicyProfile]) -> Result<PolicyProfile> {
    let first = history.first().ok_or_else(|| validation("cannot average an empty policy history"))?;
    let mut sum = vec![0.0; first.as_slice().len()];
    for p in history {
        if !p.same_shape(first) {
            return Err(validation("policy history has inconsistent shapes"));
        }
        for (s, &x) in sum.iter_mut().zip(p.as_slice()) {
            *s += x;
        }
    }
    let t = history.len() as f64;
    sum.iter_mut().for_each(|s| *s /= t);
    Ok(first.clone_shape(sum))
}

/// Runs policy mirror descent, training and measuring on the same graphon.
pub fn pmd_run(game: &GameSpec, graphon: &DiscreteGraphon, config: &PMDConfig) -> Result<PmdOutput> {
    pmd_run_with_eval(game, graphon, graphon, config)
}

/// Runs policy mirror descent on `train` and reports exploitability on `eval`.
///
/// This is how a learner that assumes a misspecified graphon is scored against
/// the true game.
pub fn pmd_run_with_eval(
    game: &GameSpec,
    train: &DiscreteGraphon,
    eval: &DiscreteGraphon,
    config: &PMDConfig,
) -> Result<PmdOutput> {
    config.validate(game)?;
    let game = match config.lambda {
        Some(l) => game.with_lambda(l)?,
        None => game.clone(),
    };
    let n = train.n_agents();
    if eval.n_agents() != n || train.horizon() != game.horizon() || eval.horizon() != game.horizon() {
        return Err(validation("train and eval graphons must match the game horizon and each other's agent count"));
    }
    let (eta, beta, lambda) = (config.eta(), config.beta(), game.lambda());
    let exponent = match config.baseline {
        Baseline::Regularized => 1.0 - lambda * eta,
        Baseline::Unregularized => 1.0,
    };
    let class = TabularFunctionClass::for_game(&game);
    let t_max = config.iterations;
    let start = Instant::now();

    let mut pi = PolicyProfile::uniform_for(&game, n);
    let mut sum = vec![0.0; pi.as_slice().len()];
    let mut avg = pi.clone();
    let mut trace = Vec::new();
    for t in 1..=t_max {
        let flow = induce_flow(&game, &pi)?;
        let z = compute_aggregates(&flow, train)?;
        let q = match config.q_source {
            QSource::Oracle => eval_policy_exact(&game, &pi, &z)?.0,
            QSource::Estimated => {
                let est = &config.estimation;
                let seed = iteration_seed(config.rng_seed, t as u64);
                let mut batch = sample_episodes(&game, &pi, &est.behavior, &z, est.n_sampled, est.episodes, seed)?;
                batch.policy_tag = format!("t={t}");
                let fitted = fitted_q_evaluation(&batch, &pi, lambda, &class)?;
                assign_estimates(&fitted.q, n)?
            }
        };
        let next = step_with_exponent(&pi, &q, eta, beta, exponent)?;
        if let Some(bad) = next.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(GmfgError::NonFinite { iteration: t, detail: format!("policy entry {bad} is not finite") });
        }
        pi = next;
        for (s, &x) in sum.iter_mut().zip(pi.as_slice()) {
            *s += x;
        }
        if t % config.exploit_stride == 0 || t == t_max {
            let inv = 1.0 / t as f64;
            avg = pi.clone_shape(sum.iter().map(|s| s * inv).collect());
            let last_e = exploitability(&game, eval, &pi)?;
            let avg_e = exploitability(&game, eval, &avg)?;
            for (name, e) in [("last", last_e), ("average", avg_e)] {
                if !e.is_finite() || e < -1e-9 {
                    return Err(GmfgError::NonFinite { iteration: t, detail: format!("{name} exploitability {e}") });
                }
            }
            log::debug!("t={t} exploit_last={last_e:.6e} exploit_avg={avg_e:.6e}");
            trace.push(IterationRecord {
                t,
                exploitability_last: last_e,
                exploitability_avg: avg_e,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(PmdOutput { trace, avg_policy: avg, last_policy: pi })
}

/// SplitMix64 finalizer over `(seed, t)`, giving each iteration its own sampling key.
fn iteration_seed(seed: u64, t: u64) -> u64 {
    let mut x = seed ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
