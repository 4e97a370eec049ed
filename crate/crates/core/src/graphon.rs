//! Graphon specifications and their realization on the `N`-agent grid.
//!
//! A graphon `W: [0,1]^2 -> [0,1]` is symmetric. Agents live on the right-endpoint
//! grid `alpha_i = i / N` for `i = 1..=N`; in code agent indices are zero-based, so
//! agent `i` sits at `(i + 1) / N`. Step indices `h` are zero-based as well.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// A graphon, possibly varying with the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphonSpec {
    /// `W(alpha, beta) = p`.
    Constant { p: f64 },
    /// Stochastic block model. `boundaries` are cumulative population fractions
    /// ending at 1; community `k` is `(boundaries[k-1], boundaries[k]]`, with the
    /// first community closed at 0.
    Sbm {
        boundaries: Vec<f64>,
        rates: Vec<Vec<f64>>,
    },
    /// `W(alpha, beta) = 2 exp(theta alpha beta) / (1 + exp(theta alpha beta)) - 1`.
    Exp { theta: f64 },
    /// Piecewise-constant graphon from step-indexed `M x M` matrices. A single
    /// matrix is shared by every step.
    Custom { matrices: Vec<Vec<Vec<f64>>> },
    /// One spec per step.
    PerStep { steps: Vec<GraphonSpec> },
}

impl GraphonSpec {
    /// Two communities with 70% / 30% of the population, intra-rate 0.9 and
    /// inter-rate 0.3.
    pub fn beach_bar_sbm() -> Self {
        GraphonSpec::Sbm {
            boundaries: vec![0.7, 1.0],
            rates: vec![vec![0.9, 0.3], vec![0.3, 0.9]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GraphonSpec::Constant { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(validation(format!("constant graphon p={p} outside [0,1]")));
                }
            }
            GraphonSpec::Sbm { boundaries, rates } => {
                let k = boundaries.len();
                if k == 0 {
                    return Err(validation("sbm needs at least one community"));
                }
                let mut prev = 0.0;
                for &b in boundaries {
                    if !(b > prev && b <= 1.0) {
                        return Err(validation(format!(
                            "sbm boundaries must be strictly increasing in (0,1], got {boundaries:?}"
                        )));
                    }
                    prev = b;
                }
                if boundaries[k - 1] != 1.0 {
                    return Err(validation("sbm boundaries must end at 1"));
                }
                check_square_symmetric_unit(rates, k, "sbm rates")?;
            }
            GraphonSpec::Exp { theta } => {
                if !(theta.is_finite() && *theta > 0.0) {
                    return Err(validation(format!("exp graphon theta={theta} must be positive")));
                }
            }
            GraphonSpec::Custom { matrices } => {
                if matrices.is_empty() {
                    return Err(validation("custom graphon needs at least one matrix"));
                }
                for m in matrices {
                    if m.is_empty() {
                        return Err(validation("custom graphon matrix is empty"));
                    }
                    check_square_symmetric_unit(m, m.len(), "custom graphon matrix")?;
                }
            }
            GraphonSpec::PerStep { steps } => {
                if steps.is_empty() {
                    return Err(validation("per-step graphon needs at least one step"));
                }
                for s in steps {
                    if matches!(s, GraphonSpec::PerStep { .. }) {
                        return Err(validation("per-step graphons cannot be nested"));
                    }
                    s.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Number of steps the spec pins down, `None` when it is time-invariant.
    pub fn fixed_steps(&self) -> Option<usize> {
        match self {
            GraphonSpec::PerStep { steps } => Some(steps.len()),
            GraphonSpec::Custom { matrices } if matrices.len() > 1 => Some(matrices.len()),
            _ => None,
        }
    }

    fn eval_unchecked(&self, h: usize, alpha: f64, beta: f64) -> Result<f64> {
        Ok(match self {
            GraphonSpec::Constant { p } => *p,
            GraphonSpec::Sbm { boundaries, rates } => {
                rates[community(boundaries, alpha)][community(boundaries, beta)]
            }
            GraphonSpec::Exp { theta } => {
                // 2 e^x / (1 + e^x) - 1 == tanh(x / 2), without overflow for large x.
                (0.5 * theta * (alpha * beta)).tanh()
            }
            GraphonSpec::Custom { matrices } => {
                let m = step_entry(matrices, h)?;
                let n = m.len();
                m[grid_cell(alpha, n)][grid_cell(beta, n)]
            }
            GraphonSpec::PerStep { steps } => step_entry(steps, h)?.eval_unchecked(h, alpha, beta)?,
        })
    }
}

fn step_entry<T>(items: &[T], h: usize) -> Result<&T> {
    if items.len() == 1 {
        return Ok(&items[0]);
    }
    items
        .get(h)
        .ok_or_else(|| validation(format!("step {h} outside the {} steps of the graphon", items.len())))
}

fn check_square_symmetric_unit(m: &[Vec<f64>], k: usize, what: &str) -> Result<()> {
    if m.len() != k || m.iter().any(|row| row.len() != k) {
        return Err(validation(format!("{what} must be {k}x{k}")));
    }
    for i in 0..k {
        for j in 0..k {
            let v = m[i][j];
            if !(0.0..=1.0).contains(&v) {
                return Err(validation(format!("{what}[{i}][{j}]={v} outside [0,1]")));
            }
            if (v - m[j][i]).abs() > SYMMETRY_TOL {
                return Err(validation(format!("{what} is not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

/// Community of `alpha`: the first `k` with `alpha <= boundaries[k]`.
fn community(boundaries: &[f64], alpha: f64) -> usize {
    boundaries
        .iter()
        .position(|&b| alpha <= b)
        .unwrap_or(boundaries.len() - 1)
}

/// Cell of `alpha` in a uniform partition of `[0,1]` into `n` right-closed cells.
fn grid_cell(alpha: f64, n: usize) -> usize {
    if alpha <= 0.0 {
        return 0;
    }
    let c = (alpha * n as f64).ceil() as usize;
    c.clamp(1, n) - 1
}

/// `W_h(alpha, beta)`.
pub fn evaluate(spec: &GraphonSpec, h: usize, alpha: f64, beta: f64) -> Result<f64> {
    for (name, x) in [("alpha", alpha), ("beta", beta)] {
        if !(0.0..=1.0).contains(&x) {
            return Err(validation(format!("{name}={x} outside [0,1]")));
        }
    }
    spec.validate()?;
    spec.eval_unchecked(h, alpha, beta)
}

/// Per-step symmetric `N x N` weight matrices on the grid `alpha_i = (i + 1) / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteGraphon {
    n_agents: usize,
    horizon: usize,
    weights: Vec<f64>,
}

impl DiscreteGraphon {
    /// Builds from explicit `[h][i][j]` matrices.
    pub fn from_matrices(matrices: &[Vec<Vec<f64>>]) -> Result<Self> {
        let horizon = matrices.len();
        if horizon == 0 {
            return Err(validation("discrete graphon needs at least one step"));
        }
        let n = matrices[0].len();
        if n == 0 {
            return Err(validation("discrete graphon needs at least one agent"));
        }
        let mut weights = Vec::with_capacity(horizon * n * n);
        for m in matrices {
            check_square_symmetric_unit(m, n, "discrete graphon")?;
            for row in m {
                weights.extend_from_slice(row);
            }
        }
        Ok(Self { n_agents: n, horizon, weights })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Grid position of agent `i`.
    pub fn position(&self, i: usize) -> f64 {
        grid_point(i, self.n_agents)
    }

    /// Row-major `N x N` matrix for step `h`.
    pub fn matrix(&self, h: usize) -> &[f64] {
        let nn = self.n_agents * self.n_agents;
        &self.weights[h * nn..(h + 1) * nn]
    }

    pub fn row(&self, h: usize, i: usize) -> &[f64] {
        let n = self.n_agents;
        &self.matrix(h)[i * n..(i + 1) * n]
    }

    pub fn weight(&self, h: usize, i: usize, j: usize) -> f64 {
        self.row(h, i)[j]
    }

    /// `(1/N) sum_j W_h[i][j]`, the total aggregate mass agent `i` sees.
    pub fn row_mean(&self, h: usize, i: usize) -> f64 {
        self.row(h, i).iter().sum::<f64>() / self.n_agents as f64
    }
}

/// `(i + 1) / n`.
pub fn grid_point(i: usize, n: usize) -> f64 {
    (i + 1) as f64 / n as f64
}

/// Realizes `spec` on the `n_agents` grid for `horizon` steps.
pub fn discretize(spec: &GraphonSpec, n_agents: usize, horizon: usize) -> Result<DiscreteGraphon> {
    if n_agents == 0 || horizon == 0 {
        return Err(validation("discretize needs n_agents >= 1 and horizon >= 1"));
    }
    spec.validate()?;
    if let Some(steps) = spec.fixed_steps() {
        if steps != horizon {
            return Err(validation(format!(
                "graphon defines {steps} steps but the horizon is {horizon}"
            )));
        }
    }
    let n = n_agents;
    let mut weights = vec![0.0; horizon * n * n];
    for h in 0..horizon {
        let m = &mut weights[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let a = grid_point(i, n);
            for j in i..n {
                let w = spec.eval_unchecked(h, a, grid_point(j, n))?;
                m[i * n + j] = w;
                m[j * n + i] = w;
            }
        }
    }
    Ok(DiscreteGraphon { n_agents, horizon, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn exp_formula(theta: f64, a: f64, b: f64) -> f64 {
        let e = (theta * a * b).exp();
        2.0 * e / (1.0 + e) - 1.0
    }

    #[test]
    fn exp_graphon_values() {
        let spec = GraphonSpec::Exp { theta: 3.0 };
        assert_eq!(evaluate(&spec, 0, 0.0, 0.5).unwrap(), 0.0);
        let w11 = evaluate(&spec, 0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(w11, exp_formula(3.0, 1.0, 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(w11, 0.905148, epsilon = 1e-6);
        for &(a, b) in &[(0.1, 0.9), (0.33, 0.77), (0.5, 0.5)] {
            assert_abs_diff_eq!(
                evaluate(&spec, 0, a, b).unwrap(),
                exp_formula(3.0, a, b),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn sbm_values_and_boundary_rule() {
        let spec = GraphonSpec::beach_bar_sbm();
        assert_eq!(evaluate(&spec, 0, 0.1, 0.2).unwrap(), 0.9);
        assert_eq!(evaluate(&spec, 0, 0.1, 0.8).unwrap(), 0.3);
        // 0.7 closes the first community.
        assert_eq!(evaluate(&spec, 0, 0.7, 0.0).unwrap(), 0.9);
        assert_eq!(evaluate(&spec, 0, 0.7, 0.7000001).unwrap(), 0.3);
    }

    #[test]
    fn constant_is_constant() {
        let spec = GraphonSpec::Constant { p: 0.5 };
        for &(a, b) in &[(0.0, 0.0), (0.2, 0.9), (1.0, 1.0)] {
            assert_eq!(evaluate(&spec, 3, a, b).unwrap(), 0.5);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = GraphonSpec::Constant { p: 0.5 };
        assert!(evaluate(&spec, 0, -0.1, 0.5).is_err());
        assert!(evaluate(&spec, 0, 0.5, 1.5).is_err());
        assert!(GraphonSpec::Constant { p: 1.2 }.validate().is_err());
        assert!(GraphonSpec::Exp { theta: 0.0 }.validate().is_err());
        let bad = GraphonSpec::Sbm { boundaries: vec![0.7, 0.6, 1.0], rates: vec![vec![0.5; 3]; 3] };
        assert!(bad.validate().is_err());
        let short = GraphonSpec::Sbm { boundaries: vec![0.7], rates: vec![vec![0.5]] };
        assert!(short.validate().is_err());
        let asym = GraphonSpec::Sbm {
            boundaries: vec![0.5, 1.0],
            rates: vec![vec![0.9, 0.3], vec![0.2, 0.9]],
        };
        assert!(asym.validate().is_err());
    }

    #[test]
    fn discretize_constant_one() {
        let g = discretize(&GraphonSpec::Constant { p: 1.0 }, 3, 2).unwrap();
        for h in 0..2 {
            assert!(g.matrix(h).iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn discretize_sbm_partition() {
        let g = discretize(&GraphonSpec::beach_bar_sbm(), 10, 1).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let same = (i < 7) == (j < 7);
                assert_eq!(g.weight(0, i, j), if same { 0.9 } else { 0.3 }, "({i},{j})");
            }
        }
    }

    #[test]
    fn discretize_exp_two_agents() {
        let g = discretize(&GraphonSpec::Exp { theta: 3.0 }, 2, 1).unwrap();
        assert_abs_diff_eq!(g.weight(0, 0, 0), exp_formula(3.0, 0.5, 0.5), epsilon = 1e-15);
        assert_abs_diff_eq!(g.weight(0, 0, 1), exp_formula(3.0, 0.5, 1.0), epsilon = 1e-15);
        assert_eq!(g.weight(0, 0, 1), g.weight(0, 1, 0));
        assert_abs_diff_eq!(g.weight(0, 1, 1), 0.905148, epsilon = 1e-6);
    }

    #[test]
    fn custom_and_per_step() {
        let custom = GraphonSpec::Custom {
            matrices: vec![vec![vec![1.0, 0.0], vec![0.0, 0.5]]],
        };
        let g = discretize(&custom, 4, 3).unwrap();
        assert_eq!(g.weight(2, 0, 1), 1.0);
        assert_eq!(g.weight(2, 1, 2), 0.0);
        assert_eq!(g.weight(2, 3, 2), 0.5);

        let per = GraphonSpec::PerStep {
            steps: vec![GraphonSpec::Constant { p: 0.0 }, GraphonSpec::Constant { p: 1.0 }],
        };
        let g = discretize(&per, 2, 2).unwrap();
        assert_eq!(g.weight(0, 0, 1), 0.0);
        assert_eq!(g.weight(1, 0, 1), 1.0);
        assert!(discretize(&per, 2, 3).is_err());
    }

    #[test]
    fn serde_tags() {
        let spec: GraphonSpec = serde_json::from_str(r#"{"kind":"exp","theta":3.0}"#).unwrap();
        assert_eq!(spec, GraphonSpec::Exp { theta: 3.0 });
        let json = serde_json::to_string(&GraphonSpec::beach_bar_sbm()).unwrap();
        assert!(json.contains(r#""kind":"sbm""#));
    }

    /// Largest finite-difference slope of `spec` over a fine grid.
    fn lipschitz_estimate(spec: &GraphonSpec) -> f64 {
        let m = 400;
        let d = 1.0 / m as f64;
        let mut best: f64 = 0.0;
        for i in 0..m {
            for j in 0..=m {
                let a = i as f64 * d;
                let b = j as f64 * d;
                let w0 = spec.eval_unchecked(0, a, b).unwrap();
                let w1 = spec.eval_unchecked(0, a + d, b).unwrap();
                best = best.max((w1 - w0).abs() / d);
            }
        }
        best
    }

    #[test]
    fn refinement_is_lipschitz_close() {
        for spec in [GraphonSpec::Exp { theta: 3.0 }, GraphonSpec::Constant { p: 0.3 }] {
            let l = lipschitz_estimate(&spec);
            for n in [5usize, 10, 20] {
                let coarse = discretize(&spec, n, 1).unwrap();
                let fine = discretize(&spec, 2 * n, 1).unwrap();
                let mut gap: f64 = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        // nearest fine neighbours sit 1/(2n) to the left in each coordinate
                        let diff = coarse.weight(0, i, j) - fine.weight(0, 2 * i, 2 * j);
                        gap = gap.max(diff.abs());
                    }
                }
                assert!(gap <= l / n as f64 + 1e-12, "gap {gap} > L/N with L={l}");
            }
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn spec_strategy() -> impl Strategy<Value = GraphonSpec> {
            prop_oneof![
                (0.0..=1.0f64).prop_map(|p| GraphonSpec::Constant { p }),
                (0.01..20.0f64).prop_map(|theta| GraphonSpec::Exp { theta }),
                (0.05..0.95f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(b, x, y, z)| {
                    GraphonSpec::Sbm { boundaries: vec![b, 1.0], rates: vec![vec![x, y], vec![y, z]] }
                }),
            ]
        }

        proptest! {
            #[test]
            fn symmetric_and_in_range(spec in spec_strategy(), a in 0.0..=1.0f64, b in 0.0..=1.0f64, n in 1usize..25) {
                let w = evaluate(&spec, 0, a, b).unwrap();
                prop_assert!((0.0..=1.0).contains(&w));
                prop_assert_eq!(w, evaluate(&spec, 0, b, a).unwrap());
                let g = discretize(&spec, n, 2).unwrap();
                for h in 0..2 {
                    for i in 0..n {
                        for j in 0..n {
                            prop_assert_eq!(g.weight(h, i, j), g.weight(h, j, i));
                        }
                    }
                }
                if let GraphonSpec::Constant { p } = spec {
                    prop_assert!(g.matrix(0).iter().all(|&w| w == p));
                }
            }
        }
    }
}
