//! Acceptance criteria. Each test prints one `criterion N [PASS|FAIL]` line to
//! stderr (bypassing the test harness capture) before asserting.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gmfg::estimation::{assign_estimates, fitted_q_evaluation, sample_episodes, BehaviorPolicySpec, TabularFunctionClass};
use gmfg::evaluation::{eval_policy_exact, kl_metric};
use gmfg::experiment::{compare_runs, ExperimentConfig, GameSection, Variant};
use gmfg::game::{build_beach_bar, monotonicity_probe, BeachBarConfig, GameParts, GameSpec, PROBE_TOLERANCE};
use gmfg::graphon::{discretize, GraphonSpec};
use gmfg::meanfield::{compute_aggregates, induce_flow, PolicyProfile, StateField};
use gmfg::solver::{pmd_run, pmd_step, Baseline, PMDConfig, QSource};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {id} [{verdict}] {name}: {detail}");
}

fn random_row(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + floor).collect();
    let t: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / t).collect()
}

fn random_profile(rng: &mut ChaCha8Rng, n: usize, hz: usize, ns: usize, na: usize) -> PolicyProfile {
    let data = (0..n * hz * ns).flat_map(|_| random_row(rng, na, 0.05)).collect();
    PolicyProfile::from_vec(n, hz, ns, na, data).unwrap()
}

fn beach_bar() -> GameSpec {
    build_beach_bar(&BeachBarConfig::default()).unwrap()
}

// ---------------------------------------------------------------------------
// 1. exact evaluation against trajectory enumeration

/// Expected regularized return from `(h0, s0)`, optionally forcing the first
/// action, by summing over every trajectory.
fn enumerate_value(game: &GameSpec, pi: &PolicyProfile, z: &StateField, h0: usize, s0: usize, first: Option<usize>) -> f64 {
    let (hz, ns, na, lambda) = (game.horizon(), game.n_states(), game.n_actions(), game.lambda());
    let steps = hz - h0;
    let branches = (na * ns).pow(steps as u32);
    let mut total = 0.0;
    for code in 0..branches {
        let mut c = code;
        let mut s = s0;
        let mut prob = 1.0;
        let mut ret = 0.0;
        let mut skip = false;
        for h in h0..hz {
            let a = c % na;
            c /= na;
            let s_next = c % ns;
            c /= ns;
            if h == h0 {
                if let Some(f) = first {
                    if a != f {
                        skip = true;
                        break;
                    }
                }
            }
            let p_a = pi.row(0, h, s)[a];
            let forced = h == h0 && first.is_some();
            if !forced {
                prob *= p_a;
            }
            prob *= game.transition_row(h, s, a)[s_next];
            ret += game.reward(h, s, a, z.get(0, h));
            if !forced {
                ret -= lambda * p_a.ln();
            }
            s = s_next;
        }
        if !skip {
            total += prob * ret;
        }
    }
    total
}

#[test]
fn criterion_1_brute_force_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (ns, na, hz) = (2, 2, 3);
    let transition: Vec<f64> = (0..hz * ns * na).flat_map(|_| random_row(&mut rng, ns, 0.0)).collect();
    let base: Vec<f64> = (0..hz * ns * na).map(|_| rng.random_range(-1.0..1.0)).collect();
    let coupling: Vec<f64> = (0..ns).map(|_| rng.random_range(-1.0..0.0)).collect();
    let game = GameSpec::new(GameParts {
        n_states: ns,
        actions: vec![0.0, 1.0],
        horizon: hz,
        transition,
        reward: Arc::new(move |h: usize, s: usize, a: usize, z: &[f64]| base[(h * ns + s) * na + a] + coupling[s] * z[s]),
        lambda: 1.0,
        mu1: random_row(&mut rng, ns, 0.0),
        r_max: 2.0,
    })
    .unwrap();
    let pi = random_profile(&mut rng, 1, hz, ns, na);
    let z = StateField::from_vec(1, hz, ns, (0..hz * ns).map(|_| rng.random::<f64>()).collect()).unwrap();

    let mut worst: f64 = 0.0;
    for lambda in [1.0, 0.0] {
        let g = game.with_lambda(lambda).unwrap();
        let (q, v) = eval_policy_exact(&g, &pi, &z).unwrap();
        for h in 0..hz {
            for s in 0..ns {
                worst = worst.max((v.values.get(0, h)[s] - enumerate_value(&g, &pi, &z, h, s, None)).abs());
                for a in 0..na {
                    worst = worst.max((q.row(0, h, s)[a] - enumerate_value(&g, &pi, &z, h, s, Some(a))).abs());
                }
            }
        }
        let j: f64 = (0..ns).map(|s| g.mu1()[s] * enumerate_value(&g, &pi, &z, 0, s, None)).sum();
        worst = worst.max((v.cumulative[0] - j).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && elapsed < Duration::from_secs(1);
    report(1, "brute-force equivalence", pass, &format!("max |diff| = {worst:.3e} (tol 1e-12), {elapsed:.2?}"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. multiplicative step against a numerically solved KL-regularized argmax

/// Damped Newton ascent on `c [<q,p> - lambda <p, ln p>] - KL(p || pi)` over the
/// simplex, with the equality constraint handled by projecting the Newton step.
fn newton_argmax(q: &[f64], pi: &[f64], eta: f64, lambda: f64) -> Vec<f64> {
    let n = q.len();
    let c = eta / (1.0 - lambda * eta);
    let objective = |p: &[f64]| -> f64 {
        (0..n).map(|a| c * (q[a] * p[a] - lambda * p[a] * p[a].ln()) - p[a] * (p[a] / pi[a]).ln()).sum()
    };
    let mut p = vec![1.0 / n as f64; n];
    for _ in 0..500 {
        let grad: Vec<f64> = (0..n).map(|a| c * (q[a] - lambda * (p[a].ln() + 1.0)) - (p[a] / pi[a]).ln() - 1.0).collect();
        // Hessian is diag(-(1 + c lambda) / p); weights p / (1 + c lambda) invert it.
        let w: Vec<f64> = p.iter().map(|x| x / (1.0 + c * lambda)).collect();
        let nu = w.iter().zip(&grad).map(|(w, g)| w * g).sum::<f64>() / w.iter().sum::<f64>();
        let d: Vec<f64> = (0..n).map(|a| w[a] * (grad[a] - nu)).collect();
        let size = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if size < 1e-17 {
            break;
        }
        let f0 = objective(&p);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = (0..n).map(|a| p[a] + t * d[a]).collect();
            if cand.iter().all(|&x| x > 0.0) && objective(&cand) >= f0 - 1e-15 {
                let total: f64 = cand.iter().sum();
                p = cand.iter().map(|x| x / total).collect();
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return p;
            }
        }
    }
    p
}

#[test]
fn criterion_2_step_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let na = rng.random_range(2..=5);
        let pi = random_row(&mut rng, na, 0.05);
        let q: Vec<f64> = (0..na).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lambda: f64 = rng.random_range(0.05..2.0);
        let eta = rng.random_range(0.01..0.95) / lambda.max(0.5);
        assert!(lambda * eta < 1.0);
        let step = pmd_step(
            &PolicyProfile::from_vec(1, 1, 1, na, pi.clone()).unwrap(),
            &gmfg::QProfile::from_vec(1, 1, 1, na, q.clone()).unwrap(),
            eta,
            0.0,
            lambda,
        )
        .unwrap();
        let oracle = newton_argmax(&q, &pi, eta, lambda);
        for (a, b) in step.as_slice().iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-8 && elapsed < Duration::from_secs(5);
    report(2, "step equivalence", pass, &format!("max |diff| over 100 draws = {worst:.3e} (tol 1e-8), {elapsed:.2?}"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. oracle convergence

#[test]
fn criterion_3_oracle_convergence() {
    let start = Instant::now();
    let game = beach_bar();
    let w = discretize(&GraphonSpec::beach_bar_sbm(), 10, game.horizon()).unwrap();
    let cfg = PMDConfig { iterations: 200, ..Default::default() };
    let out = pmd_run(&game, &w, &cfg).unwrap();
    let curve: Vec<f64> = out.trace.iter().map(|r| r.exploitability_avg).collect();
    let first = curve[0];
    let last = *curve.last().unwrap();
    let mut running_min = f64::INFINITY;
    let mut worst_rise: f64 = 0.0;
    for &e in &curve {
        if running_min.is_finite() {
            worst_rise = worst_rise.max(e / running_min - 1.0);
        }
        running_min = running_min.min(e);
    }
    let elapsed = start.elapsed();
    let ratio = last / first;
    let pass = ratio <= 0.1 && worst_rise <= 0.05 && elapsed < Duration::from_secs(60);
    report(
        3,
        "oracle convergence",
        pass,
        &format!(
            "avg exploitability t=1 {first:.4e} -> t=200 {last:.4e} (ratio {ratio:.4}, need <= 0.1); worst rise over running min {:.2}% (need <= 5%); {elapsed:.2?}",
            100.0 * worst_rise
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. rate scaling of the KL distance to a reference equilibrium

#[test]
fn criterion_4_rate_scaling() {
    let start = Instant::now();
    let game = beach_bar();
    let w = discretize(&GraphonSpec::beach_bar_sbm(), 10, game.horizon()).unwrap();
    // Reference: long run with a fixed step and no mixing; its last iterate is
    // the fixed point of the undamped regularized update.
    let reference_cfg = PMDConfig { iterations: 10_000, eta: Some(0.5), beta: Some(0.0), exploit_stride: 10_000, ..Default::default() };
    let reference = pmd_run(&game, &w, &reference_cfg).unwrap();
    let ref_exploit = reference.trace.last().unwrap().exploitability_last;
    let pi_ref = reference.last_policy;
    let mu_ref = induce_flow(&game, &pi_ref).unwrap();

    let d_at = |t: usize| {
        let cfg = PMDConfig { iterations: t, exploit_stride: t, ..Default::default() };
        let out = pmd_run(&game, &w, &cfg).unwrap();
        kl_metric(&out.avg_policy, &pi_ref, &mu_ref).unwrap()
    };
    let d100 = d_at(100);
    let d400 = d_at(400);
    let ratio = d400 / d100;
    let elapsed = start.elapsed();
    let pass = ref_exploit < 1e-4 && (0.3..=0.8).contains(&ratio) && elapsed < Duration::from_secs(600);
    report(
        4,
        "rate scaling",
        pass,
        &format!(
            "reference exploitability {ref_exploit:.3e} (need < 1e-4); D(T=100) {d100:.4e}, D(T=400) {d400:.4e}, ratio {ratio:.4} (need [0.3, 0.8]); {elapsed:.2?}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5. fitted Q-evaluation error against episode count

#[test]
fn criterion_5_estimation_scaling() {
    let start = Instant::now();
    let game = beach_bar();
    let n = 10;
    let w = discretize(&GraphonSpec::beach_bar_sbm(), n, game.horizon()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let pi = random_profile(&mut rng, n, 10, 10, 3);
    let z = compute_aggregates(&induce_flow(&game, &pi).unwrap(), &w).unwrap();
    let (q_exact, _) = eval_policy_exact(&game, &pi, &z).unwrap();
    let class = TabularFunctionClass::for_game(&game);
    let behavior = BehaviorPolicySpec::Uniform;

    let (mut rmse_small, mut rmse_large) = (0.0, 0.0);
    let seeds = 10;
    for seed in 0..seeds {
        let small = sample_episodes(&game, &pi, &behavior, &z, n, 250, seed).unwrap();
        let large = sample_episodes(&game, &pi, &behavior, &z, n, 1000, seed).unwrap();
        let fs = fitted_q_evaluation(&small, &pi, game.lambda(), &class).unwrap();
        let fl = fitted_q_evaluation(&large, &pi, game.lambda(), &class).unwrap();
        // Cells visited at K=250 are also visited at K=1000 (prefix property).
        let (mut ss, mut sl, mut cells) = (0.0, 0.0, 0usize);
        for k in 0..n {
            let i = small.agents[k];
            for h in 0..10 {
                for s in 0..10 {
                    for a in 0..3 {
                        if fs.is_visited(k, h, s, a) {
                            let exact = q_exact.row(i, h, s)[a];
                            ss += (fs.q.row(k, h, s)[a] - exact).powi(2);
                            sl += (fl.q.row(k, h, s)[a] - exact).powi(2);
                            cells += 1;
                        }
                    }
                }
            }
        }
        rmse_small += (ss / cells as f64).sqrt() / seeds as f64;
        rmse_large += (sl / cells as f64).sqrt() / seeds as f64;
    }
    let ratio = rmse_large / rmse_small;
    let elapsed = start.elapsed();
    let pass = (0.35..=0.72).contains(&ratio) && elapsed < Duration::from_secs(60);
    report(
        5,
        "estimation scaling",
        pass,
        &format!("RMSE K=250 {rmse_small:.4e}, K=1000 {rmse_large:.4e}, ratio {ratio:.4} (need [0.35, 0.72]); {elapsed:.2?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6. assignment error against the number of sampled agents

#[test]
fn criterion_6_agent_sampling_scaling() {
    let start = Instant::now();
    let game = beach_bar();
    let n_total = 20;
    let w = discretize(&GraphonSpec::Exp { theta: 3.0 }, n_total, game.horizon()).unwrap();
    let pi = PolicyProfile::uniform_for(&game, n_total);
    let z = compute_aggregates(&induce_flow(&game, &pi).unwrap(), &w).unwrap();
    let (q_exact, _) = eval_policy_exact(&game, &pi, &z).unwrap();
    let class = TabularFunctionClass::for_game(&game);

    let error_for = |n_sampled: usize| -> f64 {
        let seeds = 5;
        let mut total = 0.0;
        for seed in 0..seeds {
            let batch = sample_episodes(&game, &pi, &BehaviorPolicySpec::Uniform, &z, n_sampled, 10_000, 100 + seed).unwrap();
            let fitted = fitted_q_evaluation(&batch, &pi, game.lambda(), &class).unwrap();
            let assigned = assign_estimates(&fitted.q, n_total).unwrap();
            let mut worst: f64 = 0.0;
            for j in 0..n_total {
                let k = ((j + 1) * n_sampled).div_ceil(n_total) - 1;
                for h in 0..10 {
                    for s in 0..10 {
                        for a in 0..3 {
                            if fitted.is_visited(k, h, s, a) {
                                worst = worst.max((assigned.row(j, h, s)[a] - q_exact.row(j, h, s)[a]).abs());
                            }
                        }
                    }
                }
            }
            total += worst / seeds as f64;
        }
        total
    };
    let e5 = error_for(5);
    let e10 = error_for(10);
    let elapsed = start.elapsed();
    let pass = e10 < e5 && elapsed < Duration::from_secs(120);
    report(
        6,
        "agent-sampling scaling",
        pass,
        &format!("mean max assignment error N_s=5 {e5:.4e}, N_s=10 {e10:.4e} (need N_s=10 lower); {elapsed:.2?}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7 and 9. experiment-shape reproduction, unregularized baseline

fn variant(name: &str, solver: &str, graphon: Option<GraphonSpec>) -> Variant {
    Variant { name: name.into(), solver: serde_json::from_str(solver).unwrap(), graphon }
}

#[test]
fn criterion_7_experiment_shape() {
    let start = Instant::now();
    let mut cfg = ExperimentConfig {
        game: GameSection::BeachBar(BeachBarConfig::default()),
        graphon: GraphonSpec::beach_bar_sbm(),
        n_agents: 10,
        replications: 5,
        base_seed: 1,
        ..Default::default()
    };
    cfg.solver = PMDConfig { iterations: 200, q_source: QSource::Oracle, ..Default::default() };
    let est = |n: usize, k: usize| format!(r#"{{"q_source": "estimated", "estimation": {{"n_sampled": {n}, "episodes": {k}}}}}"#);
    let variants = vec![
        variant("n10_k300", &est(10, 300), None),
        variant("n10_k100", &est(10, 100), None),
        variant("n5_k300", &est(5, 300), None),
        variant("const_0", "{}", Some(GraphonSpec::Constant { p: 0.0 })),
        variant("const_0.5", "{}", Some(GraphonSpec::Constant { p: 0.5 })),
        variant("const_1", "{}", Some(GraphonSpec::Constant { p: 1.0 })),
    ];
    let table = compare_runs(&cfg, &variants, Path::new(".")).unwrap();
    let fin = |name: &str| table.get(name).unwrap().final_summary().unwrap().mean;
    let (best, k100, n5) = (fin("n10_k300"), fin("n10_k100"), fin("n5_k300"));
    let sbm = fin("base");
    let consts = [fin("const_0"), fin("const_0.5"), fin("const_1")];
    let ordering = best <= k100 && best <= n5;
    let gross = consts.iter().all(|&c| c >= 2.0 * sbm);
    let elapsed = start.elapsed();
    let pass = ordering && gross && elapsed < Duration::from_secs(600);
    report(
        7,
        "experiment-shape reproduction",
        pass,
        &format!(
            "final mean exploitability (10,300) {best:.4e}, (10,100) {k100:.4e}, (5,300) {n5:.4e}; SBM oracle {sbm:.4e}, constant p=0/0.5/1 {:.4e}/{:.4e}/{:.4e} (need >= 2x SBM); {elapsed:.2?}",
            consts[0], consts[1], consts[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_unregularized_baseline_informational() {
    let game = beach_bar();
    let w = discretize(&GraphonSpec::beach_bar_sbm(), 10, game.horizon()).unwrap();
    let cfg = PMDConfig { iterations: 200, baseline: Baseline::Unregularized, ..Default::default() };
    let out = pmd_run(&game, &w, &cfg).unwrap();
    let describe = |series: Vec<f64>| {
        let (arg, min) = series.iter().enumerate().fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
        let fin = *series.last().unwrap();
        let shape = arg + 1 < series.len() && fin >= 1.2 * min;
        (shape, format!("min {min:.4e} at t={}, final {fin:.4e}", arg + 1))
    };
    let (shape_last, d_last) = describe(out.trace.iter().map(|r| r.exploitability_last).collect());
    let (_, d_avg) = describe(out.trace.iter().map(|r| r.exploitability_avg).collect());
    report(
        9,
        "unregularized baseline (informational)",
        shape_last,
        &format!("last iterate: {d_last}; average: {d_avg}; non-gating"),
    );
}

// ---------------------------------------------------------------------------
// 8. monotonicity probe

#[test]
fn criterion_8_monotonicity_probe() {
    let start = Instant::now();
    let game = beach_bar();
    let w = discretize(&GraphonSpec::beach_bar_sbm(), 10, game.horizon()).unwrap();
    let ok = monotonicity_probe(&game, &w, 1000, 8).unwrap();
    let flipped = build_beach_bar(&BeachBarConfig { crowd_coeff: -8.0, ..Default::default() }).unwrap();
    let bad = monotonicity_probe(&flipped, &w, 1000, 8).unwrap();
    let elapsed = start.elapsed();
    let pass = ok.violations == 0 && ok.max_lhs <= PROBE_TOLERANCE && bad.violations >= 1 && elapsed < Duration::from_secs(10);
    report(
        8,
        "monotonicity probe",
        pass,
        &format!(
            "as written: {} violations, max LHS {:.3e}; sign-flipped: {} violations; {elapsed:.2?}",
            ok.violations, ok.max_lhs, bad.violations
        ),
    );
    assert!(pass);
}
