//! Finite entropy-regularized graphon mean-field game model.
//!
//! Transitions do not depend on the aggregate; rewards do. States and actions are
//! indexed from zero. Beach Bar positions are reported 1-based (`1..=|S|`) in the
//! config, which is state index `position - 1` here.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, validation, Result};
use crate::graphon::DiscreteGraphon;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Reward `r_h(s, a, z)` with `z` the aggregate over states.
pub trait RewardFn: Send + Sync {
    fn reward(&self, h: usize, s: usize, a: usize, z: &[f64]) -> f64;
}

impl<F> RewardFn for F
where
    F: Fn(usize, usize, usize, &[f64]) -> f64 + Send + Sync,
{
    fn reward(&self, h: usize, s: usize, a: usize, z: &[f64]) -> f64 {
        self(h, s, a, z)
    }
}

/// Raw ingredients of a [`GameSpec`], checked by [`GameSpec::new`].
pub struct GameParts {
    pub n_states: usize,
    pub actions: Vec<f64>,
    pub horizon: usize,
    /// Row-major `[h][s][a][s']`.
    pub transition: Vec<f64>,
    pub reward: Arc<dyn RewardFn>,
    pub lambda: f64,
    pub mu1: Vec<f64>,
    pub r_max: f64,
}

/// An immutable game: `(S, A, H, P, r, lambda, mu1)` plus the reward bound.
#[derive(Clone)]
pub struct GameSpec {
    n_states: usize,
    actions: Vec<f64>,
    horizon: usize,
    transition: Vec<f64>,
    reward: Arc<dyn RewardFn>,
    lambda: f64,
    mu1: Vec<f64>,
    r_max: f64,
}

impl fmt::Debug for GameSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GameSpec")
            .field("n_states", &self.n_states)
            .field("actions", &self.actions)
            .field("horizon", &self.horizon)
            .field("lambda", &self.lambda)
            .field("mu1", &self.mu1)
            .field("r_max", &self.r_max)
            .finish_non_exhaustive()
    }
}

fn check_probability(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(validation(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > STOCHASTIC_TOL {
        return Err(validation(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

impl GameSpec {
    pub fn new(parts: GameParts) -> Result<Self> {
        let GameParts { n_states, actions, horizon, transition, reward, lambda, mu1, r_max } = parts;
        if n_states == 0 || actions.is_empty() || horizon == 0 {
            return Err(validation("game needs at least one state, one action and one step"));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(validation(format!("lambda={lambda} must be a nonnegative real")));
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(validation(format!("r_max={r_max} must be positive")));
        }
        let n_actions = actions.len();
        check_dim("transition tensor", horizon * n_states * n_actions * n_states, transition.len())?;
        check_dim("initial distribution", n_states, mu1.len())?;
        check_probability(&mu1, "mu1")?;
        for (k, row) in transition.chunks(n_states).enumerate() {
            let s = (k / n_actions) % n_states;
            let h = k / (n_actions * n_states);
            check_probability(row, &format!("transition row (h={h}, s={s}, a={})", k % n_actions))?;
        }
        let game = Self { n_states, actions, horizon, transition, reward, lambda, mu1, r_max };
        game.spot_check_reward_bound()?;
        Ok(game)
    }

    /// Checks `|r| <= r_max` on a few aggregates: zero, uniform, and unit masses.
    fn spot_check_reward_bound(&self) -> Result<()> {
        let ns = self.n_states;
        let mut probes = vec![vec![0.0; ns], vec![1.0 / ns as f64; ns]];
        for s in 0..ns {
            let mut e = vec![0.0; ns];
            e[s] = 1.0;
            probes.push(e);
        }
        for h in 0..self.horizon {
            for s in 0..ns {
                for a in 0..self.n_actions() {
                    for z in &probes {
                        let r = self.reward(h, s, a, z);
                        if !r.is_finite() || r.abs() > self.r_max * (1.0 + 1e-12) {
                            return Err(validation(format!(
                                "reward {r} at (h={h}, s={s}, a={a}) exceeds r_max={}",
                                self.r_max
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    /// Numeric action labels, in index order.
    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mu1(&self) -> &[f64] {
        &self.mu1
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// `P_h(. | s, a)`.
    pub fn transition_row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let ns = self.n_states;
        let start = ((h * ns + s) * self.n_actions() + a) * ns;
        &self.transition[start..start + ns]
    }

    pub fn reward(&self, h: usize, s: usize, a: usize, z: &[f64]) -> f64 {
        self.reward.reward(h, s, a, z)
    }

    /// The same game with a different regularization weight.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(validation(format!("lambda={lambda} must be a nonnegative real")));
        }
        Ok(Self { lambda, ..self.clone() })
    }

    /// The same game with a different reward.
    pub fn with_reward(&self, reward: Arc<dyn RewardFn>, r_max: f64) -> Result<Self> {
        Self::new(GameParts {
            n_states: self.n_states,
            actions: self.actions.clone(),
            horizon: self.horizon,
            transition: self.transition.clone(),
            reward,
            lambda: self.lambda,
            mu1: self.mu1.clone(),
            r_max,
        })
    }

    /// `(H - h) * (r_max + lambda log|A|)` for zero-based `h`: the magnitude bound
    /// on any regularized action-value at step `h`.
    pub fn value_bound(&self, h: usize) -> f64 {
        (self.horizon - h) as f64 * (self.r_max + self.lambda * (self.n_actions() as f64).ln())
    }
}

/// How `s + a + eps` is folded back into `1..=|S|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    #[default]
    Clamp,
    Reflect,
}

/// Sign convention of the distance term of the Beach Bar reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RewardSignMode {
    /// `+dist_coeff |B - s|`, as the formula is written.
    #[default]
    AsWritten,
    /// `-dist_coeff |B - s|`: agents are rewarded for being near the bar.
    NegatedDistance,
}

/// Beach Bar parameters. Every field has a default, so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeachBarConfig {
    pub n_states: usize,
    /// 1-based position of the bar; defaults to `n_states / 2`.
    pub bar_position: Option<f64>,
    /// Defaults to `2 / n_states`.
    pub dist_coeff: Option<f64>,
    /// Defaults to `2 / n_states`.
    pub action_coeff: Option<f64>,
    pub crowd_coeff: f64,
    pub horizon: usize,
    pub lambda: f64,
    /// Probability of the `+1` noise; `-1` gets the rest.
    pub noise_prob: f64,
    pub boundary_mode: BoundaryMode,
    pub reward_sign_mode: RewardSignMode,
}

impl Default for BeachBarConfig {
    fn default() -> Self {
        Self {
            n_states: 10,
            bar_position: None,
            dist_coeff: None,
            action_coeff: None,
            crowd_coeff: 8.0,
            horizon: 10,
            lambda: 1.0,
            noise_prob: 0.5,
            boundary_mode: BoundaryMode::Clamp,
            reward_sign_mode: RewardSignMode::AsWritten,
        }
    }
}

impl BeachBarConfig {
    pub fn bar(&self) -> f64 {
        self.bar_position.unwrap_or(self.n_states as f64 / 2.0)
    }

    pub fn dist(&self) -> f64 {
        self.dist_coeff.unwrap_or(2.0 / self.n_states as f64)
    }

    pub fn action(&self) -> f64 {
        self.action_coeff.unwrap_or(2.0 / self.n_states as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.horizon == 0 {
            return Err(validation("beach bar needs n_states >= 1 and horizon >= 1"));
        }
        let bar = self.bar();
        if !(1.0..=self.n_states as f64).contains(&bar) {
            return Err(validation(format!("bar_position={bar} outside [1, {}]", self.n_states)));
        }
        if self.dist() < 0.0 || self.action() < 0.0 {
            return Err(validation("beach bar coefficients must be nonnegative"));
        }
        if !self.crowd_coeff.is_finite() {
            return Err(validation("crowd_coeff must be finite"));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(validation(format!("noise_prob={} outside [0,1]", self.noise_prob)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(validation(format!("lambda={} must be nonnegative", self.lambda)));
        }
        Ok(())
    }
}

/// Folds a 1-based position into `1..=n`.
fn fold_position(x: i64, n: i64, mode: BoundaryMode) -> i64 {
    match mode {
        BoundaryMode::Clamp => x.clamp(1, n),
        BoundaryMode::Reflect => {
            if n == 1 {
                return 1;
            }
            let mut y = x;
            while !(1..=n).contains(&y) {
                y = if y < 1 { 2 - y } else { 2 * n - y };
            }
            y
        }
    }
}

#[derive(Debug, Clone)]
struct BeachBarReward {
    bar: f64,
    dist: f64,
    action: f64,
    crowd: f64,
    actions: Vec<f64>,
}

impl RewardFn for BeachBarReward {
    fn reward(&self, _h: usize, s: usize, a: usize, z: &[f64]) -> f64 {
        let position = (s + 1) as f64;
        self.dist * (self.bar - position).abs() + self.action * self.actions[a].abs() - self.crowd * z[s]
    }
}

/// Beach Bar: `s' = s + a + eps`, `eps = +/-1`, reward
/// `dist |B - s| + action |a| - crowd z(s)` with `z(s)` the aggregate mass at the
/// agent's own state.
pub fn build_beach_bar(config: &BeachBarConfig) -> Result<GameSpec> {
    config.validate()?;
    let ns = config.n_states;
    let actions = vec![-1.0, 0.0, 1.0];
    let na = actions.len();
    let mut transition = vec![0.0; config.horizon * ns * na * ns];
    for h in 0..config.horizon {
        for s in 0..ns {
            for (a, &label) in actions.iter().enumerate() {
                let row = &mut transition[((h * ns + s) * na + a) * ns..][..ns];
                let base = s as i64 + 1 + label as i64;
                for (eps, p) in [(1i64, config.noise_prob), (-1, 1.0 - config.noise_prob)] {
                    let next = fold_position(base + eps, ns as i64, config.boundary_mode);
                    row[(next - 1) as usize] += p;
                }
            }
        }
    }
    let dist = match config.reward_sign_mode {
        RewardSignMode::AsWritten => config.dist(),
        RewardSignMode::NegatedDistance => -config.dist(),
    };
    let bar = config.bar();
    let max_dist = (0..ns).map(|s| (bar - (s + 1) as f64).abs()).fold(0.0, f64::max);
    let r_max = (dist.abs() * max_dist + config.action() + config.crowd_coeff.abs()).max(f64::MIN_POSITIVE);
    let reward = BeachBarReward { bar, dist, action: config.action(), crowd: config.crowd_coeff, actions: actions.clone() };
    GameSpec::new(GameParts {
        n_states: ns,
        actions,
        horizon: config.horizon,
        transition,
        reward: Arc::new(reward),
        lambda: config.lambda,
        mu1: vec![1.0 / ns as f64; ns],
        r_max,
    })
}

/// Tabular game with reward `base[h][s][a] + sum_s' coupling[s][s'] z[s']`,
/// loadable from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularGameFile {
    pub n_states: usize,
    pub actions: Vec<f64>,
    pub horizon: usize,
    pub lambda: f64,
    pub mu1: Vec<f64>,
    /// `[h][s][a][s']`.
    pub transition: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[h][s][a]`.
    pub reward_base: Vec<Vec<Vec<f64>>>,
    /// `[s][s']`; omitted means no aggregate dependence.
    #[serde(default)]
    pub reward_coupling: Option<Vec<Vec<f64>>>,
}

impl TabularGameFile {
    pub fn build(&self) -> Result<GameSpec> {
        let (ns, na, hz) = (self.n_states, self.actions.len(), self.horizon);
        let shape_err = || validation("tabular game tensors do not match n_states / actions / horizon");
        if self.transition.len() != hz || self.reward_base.len() != hz {
            return Err(shape_err());
        }
        let mut transition = Vec::with_capacity(hz * ns * na * ns);
        let mut base = Vec::with_capacity(hz * ns * na);
        for h in 0..hz {
            if self.transition[h].len() != ns || self.reward_base[h].len() != ns {
                return Err(shape_err());
            }
            for s in 0..ns {
                if self.transition[h][s].len() != na || self.reward_base[h][s].len() != na {
                    return Err(shape_err());
                }
                for a in 0..na {
                    if self.transition[h][s][a].len() != ns {
                        return Err(shape_err());
                    }
                    transition.extend_from_slice(&self.transition[h][s][a]);
                    base.push(self.reward_base[h][s][a]);
                }
            }
        }
        let coupling: Vec<f64> = match &self.reward_coupling {
            Some(c) => {
                if c.len() != ns || c.iter().any(|r| r.len() != ns) {
                    return Err(shape_err());
                }
                c.iter().flatten().copied().collect()
            }
            None => vec![0.0; ns * ns],
        };
        // |z[s']| <= 1 with total mass <= 1, so the coupling adds at most the largest |entry| per row.
        let coupling_max = coupling.chunks(ns).map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect::<Vec<_>>();
        let mut r_max: f64 = 0.0;
        for h in 0..hz {
            for s in 0..ns {
                for a in 0..na {
                    r_max = r_max.max(base[(h * ns + s) * na + a].abs() + coupling_max[s]);
                }
            }
        }
        let reward = move |h: usize, s: usize, a: usize, z: &[f64]| {
            let row = &coupling[s * ns..(s + 1) * ns];
            base[(h * ns + s) * na + a] + row.iter().zip(z).map(|(c, v)| c * v).sum::<f64>()
        };
        GameSpec::new(GameParts {
            n_states: ns,
            actions: self.actions.clone(),
            horizon: hz,
            transition,
            reward: Arc::new(reward),
            lambda: self.lambda,
            mu1: self.mu1.clone(),
            r_max: r_max.max(1e-12),
        })
    }
}

/// Outcome of [`monotonicity_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Largest left-hand side over all trials and steps.
    pub max_lhs: f64,
    /// Trial/step pairs with left-hand side above the tolerance.
    pub violations: usize,
    pub trials: usize,
}

pub const PROBE_TOLERANCE: f64 = 1e-10;

/// Per-agent state-action distributions, `[i][s][a]` row-major.
pub type StateActionProfile = Vec<f64>;

/// `(1/N) sum_i sum_{s,a} (rho - rho~)(s,a) [r_h(s,a,z^i(mu)) - r_h(s,a,z^i(mu~))]`.
pub fn probe_lhs(
    game: &GameSpec,
    graphon: &DiscreteGraphon,
    h: usize,
    rho: &[f64],
    rho_tilde: &[f64],
) -> Result<f64> {
    let (n, ns, na) = (graphon.n_agents(), game.n_states(), game.n_actions());
    check_dim("probe profile", n * ns * na, rho.len())?;
    check_dim("probe profile", n * ns * na, rho_tilde.len())?;
    let z = probe_aggregates(graphon, h, &state_marginals(rho, n, ns, na));
    let z_tilde = probe_aggregates(graphon, h, &state_marginals(rho_tilde, n, ns, na));
    let mut total = 0.0;
    for i in 0..n {
        let zi = &z[i * ns..(i + 1) * ns];
        let zti = &z_tilde[i * ns..(i + 1) * ns];
        for s in 0..ns {
            for a in 0..na {
                let k = (i * ns + s) * na + a;
                let dr = game.reward(h, s, a, zi) - game.reward(h, s, a, zti);
                total += (rho[k] - rho_tilde[k]) * dr;
            }
        }
    }
    Ok(total / n as f64)
}

fn state_marginals(rho: &[f64], n: usize, ns: usize, na: usize) -> Vec<f64> {
    let mut mu = vec![0.0; n * ns];
    for (k, m) in mu.iter_mut().enumerate() {
        *m = rho[k * na..(k + 1) * na].iter().sum();
    }
    mu
}

fn probe_aggregates(graphon: &DiscreteGraphon, h: usize, mu: &[f64]) -> Vec<f64> {
    let n = graphon.n_agents();
    let ns = mu.len() / n;
    let mut z = vec![0.0; n * ns];
    for i in 0..n {
        let row = graphon.row(h, i);
        let zi = &mut z[i * ns..(i + 1) * ns];
        for (j, &w) in row.iter().enumerate() {
            for s in 0..ns {
                zi[s] += w * mu[j * ns + s];
            }
        }
        zi.iter_mut().for_each(|v| *v /= n as f64);
    }
    z
}

/// Uniform draw from the simplex of dimension `len`.
pub(crate) fn sample_simplex<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// Random search for violations of the weakly monotone inequality.
pub fn monotonicity_probe(
    game: &GameSpec,
    graphon: &DiscreteGraphon,
    n_trials: usize,
    rng_seed: u64,
) -> Result<ProbeReport> {
    if graphon.horizon() != game.horizon() {
        return Err(validation("graphon and game horizons differ"));
    }
    let (n, ns, na) = (graphon.n_agents(), game.n_states(), game.n_actions());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut max_lhs = f64::NEG_INFINITY;
    let mut violations = 0;
    for _ in 0..n_trials {
        let mut rho = Vec::with_capacity(n * ns * na);
        let mut rho_tilde = Vec::with_capacity(n * ns * na);
        for _ in 0..n {
            rho.extend(sample_simplex(&mut rng, ns * na));
            rho_tilde.extend(sample_simplex(&mut rng, ns * na));
        }
        for h in 0..game.horizon() {
            let lhs = probe_lhs(game, graphon, h, &rho, &rho_tilde)?;
            max_lhs = max_lhs.max(lhs);
            if lhs > PROBE_TOLERANCE {
                violations += 1;
            }
        }
    }
    Ok(ProbeReport { max_lhs, violations, trials: n_trials })
}
